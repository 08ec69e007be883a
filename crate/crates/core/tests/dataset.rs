mod common;

use ndarray::Array2;
use plain::dataset::{
    make_folds, read_dataset, synthesize_pml, write_dataset, Dataset, LabelStats, SynthConfig,
};
use proptest::prelude::*;

prop_compose! {
    fn dataset()(n in 1usize..12, d in 1usize..6, l in 2usize..7)
        (features in prop::collection::vec(
            prop_oneof![Just(0.0), Just(-0.0), -1e3..1e3f64, any::<f64>().prop_filter("finite", |v| v.is_finite())],
            n * d),
         truth in prop::collection::vec(prop::collection::vec(any::<bool>(), l), n),
         extra in prop::collection::vec(prop::collection::vec(any::<bool>(), l), n),
         keep_truth in any::<bool>(),
         n in Just(n), d in Just(d), l in Just(l))
        -> Dataset
    {
        let mut t = Array2::<u8>::zeros((n, l));
        let mut c = Array2::<u8>::zeros((n, l));
        for i in 0..n {
            for j in 0..l {
                t[[i, j]] = u8::from(truth[i][j]);
                c[[i, j]] = u8::from(truth[i][j] || extra[i][j]);
            }
            if c.row(i).iter().all(|&v| v == 0) {
                c[[i, 0]] = 1;
            }
        }
        let x = Array2::from_shape_vec((n, d), features).unwrap();
        Dataset::new(x, c, keep_truth.then_some(t)).unwrap()
    }
}

fn text(data: &Dataset) -> String {
    let mut out = Vec::new();
    write_dataset(data, &mut out).unwrap();
    String::from_utf8(out).unwrap()
}

proptest! {
    #[test]
    fn save_then_load_is_lossless(data in dataset()) {
        let back = read_dataset(text(&data).as_bytes(), false).unwrap();
        let bits = |d: &Dataset| d.features().mapv(f64::to_bits);
        prop_assert_eq!(bits(&back), bits(&data));
        prop_assert_eq!(back.candidates(), data.candidates());
        // an all-empty truth block reads back as "no truth"
        let empty_truth = data.truth().is_none_or(|t| t.iter().all(|&v| v == 0));
        if empty_truth {
            prop_assert!(back.truth().is_none());
        } else {
            prop_assert_eq!(back.truth(), data.truth());
        }
        prop_assert_eq!(text(&back), text(&data));
    }

    #[test]
    fn corruption_adds_exactly_r_false_positives(
        seed in 0u64..10_000, r in 1usize..5, n in 1usize..20, l in 2usize..9,
    ) {
        let mut rng = common::rng(seed);
        let truth = common::binary(n, l, 0.3, &mut rng);
        let x = common::uniform(n, 3, -1.0, 1.0, &mut rng);
        let clean = Dataset::new(x, truth.clone(), Some(truth.clone())).unwrap();
        let pml = synthesize_pml(&clean, &SynthConfig { r, seed }).unwrap();
        for (c, t) in pml.candidates().rows().into_iter().zip(truth.rows()) {
            prop_assert!(c.iter().zip(t).all(|(&c, &t)| c >= t));
            let true_count = t.iter().filter(|&&v| v == 1).count();
            let cand_count = c.iter().filter(|&&v| v == 1).count();
            prop_assert_eq!(cand_count, (true_count + r).min(l));
        }
        prop_assert_eq!(pml.truth().unwrap(), &truth);
        let again = synthesize_pml(&clean, &SynthConfig { r, seed }).unwrap();
        prop_assert_eq!(again.candidates(), pml.candidates());
    }

    #[test]
    fn folds_partition_every_index(n in 2usize..200, k in 2usize..12, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let plan = make_folds(n, k, seed).unwrap();
        let sizes = plan.fold_sizes();
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for f in 0..k {
            let mut all = plan.test_indices(f);
            all.extend(plan.train_indices(f));
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        }
    }
}

#[test]
fn label_stats_reflect_corruption() {
    let data = common::pml_data(300, 10, 6, 2, 4);
    let s = LabelStats::of(&data);
    let truth = data.truth().unwrap();
    let want: f64 = truth
        .rows()
        .into_iter()
        .map(|t| (t.iter().map(|&v| v as usize).sum::<usize>() + 2).min(6) as f64)
        .sum::<f64>()
        / 300.0;
    assert!((s.mean_candidates - want).abs() < 1e-12);
    let full = truth.rows().into_iter().filter(|t| t.iter().filter(|&&v| v == 1).count() >= 4).count();
    assert_eq!(s.full_rows, full);
}

#[test]
fn reports_line_numbers_for_bad_input() {
    let bad = "2 2 3\n0|0 0:1.0\n\n5|  1:1.0\n";
    let err = read_dataset(bad.as_bytes(), false).unwrap_err();
    assert!(matches!(err, plain::Error::Parse { line: 4, .. }), "{err}");
    assert_eq!(err.kind(), plain::ErrorKind::Data);
}
