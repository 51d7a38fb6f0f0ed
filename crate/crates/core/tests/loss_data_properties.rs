use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use proptest::prelude::*;

use speednet_core::data::{
    prefetch_batches, scan_dataset, split, synth_dataset, write_dataset, BatchSource, DatasetIndex, DiskSource,
    Sample, SplitSpec,
};
use speednet_core::loss::{tversky_loss, TverskyParams};
use speednet_core::metrics::{metrics, ConfusionCounts};
use speednet_core::model::Variant;
use speednet_core::training::{PlateauScheduler, RunConfig};
use speednet_core::{Shape4, Tensor4};

fn row(v: &[f64]) -> Tensor4<f64> {
    Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap()
}

fn pixels() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0.0f64..=1.0, n),
            prop::collection::vec(prop::bool::ANY.prop_map(|b| b as u8 as f64), n),
        )
    })
}

fn params() -> impl Strategy<Value = TverskyParams> {
    (0.0f64..=1.0, 0.0f64..=1.0, prop::sample::select(vec![0.0, 1e-3, 1.0]))
        .prop_filter("a zero denominator is possible only with smoothing", |(a, b, s)| *s > 0.0 || a + b > 0.0)
        .prop_map(|(alpha, beta, smooth)| TverskyParams { alpha, beta, smooth })
}

fn loss(p: &[f64], t: &[f64], params: &TverskyParams) -> f64 {
    tversky_loss(&row(p), &row(t), params).unwrap().0
}

proptest! {
    #[test]
    fn tversky_loss_lies_in_unit_interval((p, t) in pixels(), params in params()) {
        let l = loss(&p, &t, &params);
        prop_assert!((0.0..=1.0).contains(&l), "{l}");
    }

    #[test]
    fn raising_a_foreground_pixel_never_raises_the_loss(
        (p, t) in pixels(), params in params(), pick in any::<prop::sample::Index>(), step in 0.0f64..=1.0,
    ) {
        let fg: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1.0).collect();
        prop_assume!(!fg.is_empty());
        let i = fg[pick.index(fg.len())];
        let mut q = p.clone();
        q[i] = (q[i] + step).min(1.0);
        prop_assert!(loss(&q, &t, &params) <= loss(&p, &t, &params) + 1e-12);
    }

    /// Exchanging prediction and target turns false positives into false negatives.
    #[test]
    fn swapping_alpha_beta_swaps_fp_and_fn((p, t) in pixels(), params in params()) {
        let swapped = TverskyParams { alpha: params.beta, beta: params.alpha, ..params };
        let a = loss(&p, &t, &params);
        let b = loss(&t, &p, &swapped);
        prop_assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }

    #[test]
    fn metrics_are_scale_free(tp in 0u64..1000, fp in 0u64..1000, fn_ in 0u64..1000, tn in 0u64..1000, k in 1u64..1000) {
        let c = ConfusionCounts { tp, fp, fn_, tn };
        prop_assert_eq!(metrics(&c.scaled(k)), metrics(&c));
    }

    #[test]
    fn jaccard_equals_dice_only_at_zero_or_one(tp in 0u64..500, fp in 0u64..500, fn_ in 0u64..500) {
        let m = metrics(&ConfusionCounts { tp, fp, fn_, tn: 0 });
        prop_assert!(m.jaccard <= m.dice);
        let extreme = |v: f64| v == 0.0 || v == 1.0;
        prop_assert_eq!(m.jaccard == m.dice, extreme(m.dice) && extreme(m.jaccard));
    }

    #[test]
    fn split_partitions_every_class(
        sizes in prop::collection::vec(0usize..30, 1..5), fraction in 0.0f64..=1.0, seed in any::<u64>(),
    ) {
        let mut index = DatasetIndex::default();
        for (c, &n) in sizes.iter().enumerate() {
            let samples = (0..n)
                .map(|i| Sample {
                    image_path: PathBuf::from(format!("c{c}/image/{i}.png")),
                    mask_path: PathBuf::from(format!("c{c}/label/{i}.png")),
                    class_name: format!("c{c}"),
                })
                .collect();
            index.classes.insert(format!("c{c}"), samples);
        }
        let (train, test) = split(&index, SplitSpec { train_fraction: fraction, seed });
        let names = |v: &[Sample]| v.iter().map(|s| s.image_path.clone()).collect::<BTreeSet<_>>();
        let (a, b) = (names(&train), names(&test));
        prop_assert_eq!(a.len(), train.len());
        prop_assert!(a.is_disjoint(&b));
        let all: BTreeSet<PathBuf> = index.classes.values().flatten().map(|s| s.image_path.clone()).collect();
        prop_assert_eq!(a.union(&b).cloned().collect::<BTreeSet<_>>(), all);
        for (class, samples) in &index.classes {
            let k = train.iter().filter(|s| &s.class_name == class).count();
            prop_assert_eq!(k, (fraction * samples.len() as f64).floor() as usize);
        }
    }

    #[test]
    fn scheduler_only_ever_multiplies_by_the_factor(
        losses in prop::collection::vec(0.0f64..2.0, 1..200), patience in 1usize..15,
    ) {
        let mut s = PlateauScheduler::new(1e-3, 0.1, patience);
        let mut prev = s.lr;
        let mut drops = 0;
        for l in losses {
            let lr = s.step(l);
            prop_assert!(lr == prev || lr == prev * 0.1, "{prev} -> {lr}");
            drops += (lr < prev) as i32;
            prev = lr;
        }
        prop_assert_eq!(prev, (0..drops).fold(1e-3, |lr, _| lr * 0.1));
    }

    #[test]
    fn config_text_round_trips(
        epochs in 0usize..500, batch in 1usize..64, lr in 1e-6f64..1.0, factor in 0.01f64..=1.0,
        patience in 0usize..50, alpha in 0.0f64..=1.0, beta in 0.0f64..=1.0, seed in any::<u64>(),
        variant in prop::sample::select(Variant::ALL.to_vec()),
        dilations in prop::collection::vec(1usize..6, 1..4),
        class in prop::option::of("[a-z]{1,8}"),
    ) {
        let mut cfg = RunConfig { epochs, batch_size: batch, lr, lr_factor: factor, lr_patience: patience, class, ..RunConfig::default() };
        cfg.tversky.alpha = alpha;
        cfg.tversky.beta = beta;
        cfg.model.seed = seed;
        cfg.model.variant = variant;
        cfg.model.dilations = dilations;
        let text = cfg.to_text();
        let back = RunConfig::parse_text(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }
}

#[test]
fn scan_split_load_touches_every_file_once() {
    let dir = tempfile::tempdir().unwrap();
    let set = synth_dataset(10, 16, 4).unwrap();
    write_dataset(dir.path(), &set).unwrap();
    let index = scan_dataset(dir.path()).unwrap();
    let (train, test) = split(&index, SplitSpec { train_fraction: 0.7, seed: 2 });
    assert_eq!((train.len(), test.len()), (7, 3));

    // Every item's planar RGB, keyed by file name.
    let plane = 16 * 16;
    let expected: BTreeMap<String, Vec<f32>> = set
        .items
        .iter()
        .map(|it| {
            let mut planar = vec![0.0; 3 * plane];
            for (i, px) in it.image.chunks(3).enumerate() {
                for c in 0..3 {
                    planar[c * plane + i] = px[c] as f32 / 255.0;
                }
            }
            (it.name.clone(), planar)
        })
        .collect();

    let mut seen = BTreeMap::new();
    for samples in [train, test] {
        let source = DiskSource { samples, size: 16 };
        prefetch_batches(&source, 3, |b, x, _| {
            for j in 0..x.shape().n {
                let s = &source.samples[b * 3 + j];
                let name = s.image_path.file_name().unwrap().to_str().unwrap().to_string();
                assert_eq!(&x.data()[j * 3 * plane..(j + 1) * 3 * plane], &expected[&name][..], "{name}");
                *seen.entry(name).or_insert(0) += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(source.len(), source.samples.len());
    }
    assert_eq!(seen.len(), 10);
    assert!(seen.values().all(|&n| n == 1));
}
