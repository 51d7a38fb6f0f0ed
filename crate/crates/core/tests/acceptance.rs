//! Acceptance gate: one PASS/FAIL line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p speednet-core --test acceptance`.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use speednet_core::data::{synth_dataset, MemorySource};
use speednet_core::gradcheck::suite::{run_check, run_suite, SuiteOptions, CHECKS};
use speednet_core::layers::{DipcBlock, DipcConfig, Init, Mixer, Module};
use speednet_core::loss::{soft_dice_loss, tversky_loss, TverskyParams};
use speednet_core::metrics::{confusion, metrics, ConfusionCounts};
use speednet_core::model::{SpeedNet, SpeedNetConfig, Variant};
use speednet_core::ops::{self, ConvGeometry, ConvSpec, InvolutionGeometry, OpKind};
use speednet_core::parallel::with_threads;
use speednet_core::training::checkpoint::encode;
use speednet_core::training::{train, PlateauScheduler, RunConfig};
use speednet_core::{Mode, Shape4, Tensor4};

type Outcome = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: Shape4, lo: f64, hi: f64) -> Tensor4<f64> {
    Tensor4::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn gradient_suite() -> Outcome {
    let opts = SuiteOptions::default();
    let report = run_suite(&opts);
    let failures = report.failures();
    let worst = report
        .results
        .iter()
        .map(|r| r.max_rel_error / r.tolerance)
        .fold(0.0f64, f64::max);
    ensure(
        failures.is_empty() && opts.seeds >= 5 && report.elapsed < Duration::from_secs(60),
        format!(
            "{} checks, {} seeds, worst error/tolerance {worst:.3}, {:.1} s, failing {failures:?}",
            report.results.len(),
            opts.seeds,
            report.elapsed.as_secs_f64()
        ),
    )
}

/// Gather-form convolution, accumulating over (c, u, v) and skipping padding, bias last.
fn conv_oracle(x: &Tensor4<f64>, k: &Tensor4<f64>, bias: &[f64], g: ConvGeometry) -> Option<Tensor4<f64>> {
    let (xs, ks) = (x.shape(), k.shape());
    let ho = g.output_len(xs.h, ks.h)?;
    let wo = g.output_len(xs.w, ks.w)?;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, ks.n, ho, wo));
    for b in 0..xs.n {
        for o in 0..ks.n {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..xs.c {
                        for u in 0..ks.h {
                            for v in 0..ks.w {
                                let y = (i * g.stride + u * g.dilation) as isize - g.padding as isize;
                                let z = (j * g.stride + v * g.dilation) as isize - g.padding as isize;
                                if y >= 0 && z >= 0 && (y as usize) < xs.h && (z as usize) < xs.w {
                                    acc += k.at(o, c, u, v) * x.at(b, c, y as usize, z as usize);
                                }
                            }
                        }
                    }
                    out.set(b, o, i, j, acc + bias[o]);
                }
            }
        }
    }
    Some(out)
}

fn involution_oracle(x: &Tensor4<f64>, kernels: &Tensor4<f64>, g: InvolutionGeometry) -> Tensor4<f64> {
    let xs = x.shape();
    let ks = kernels.shape();
    let per_group = xs.c / g.groups;
    let pad = g.padding() as isize;
    let mut out = Tensor4::zeros(Shape4::new(xs.n, xs.c, ks.h, ks.w));
    for b in 0..xs.n {
        for c in 0..xs.c {
            let grp = c / per_group;
            for i in 0..ks.h {
                for j in 0..ks.w {
                    let mut acc = 0.0;
                    for u in 0..g.kernel_size {
                        for v in 0..g.kernel_size {
                            let y = (i * g.stride + u * g.dilation) as isize - pad;
                            let z = (j * g.stride + v * g.dilation) as isize - pad;
                            if y >= 0 && z >= 0 && (y as usize) < xs.h && (z as usize) < xs.w {
                                let tap = (grp * g.kernel_size + u) * g.kernel_size + v;
                                acc += kernels.at(b, tap, i, j) * x.at(b, c, y as usize, z as usize);
                            }
                        }
                    }
                    out.set(b, c, i, j, acc);
                }
            }
        }
    }
    out
}

const SIDES: [(usize, usize); 6] = [(1, 1), (3, 5), (6, 6), (8, 8), (8, 3), (5, 8)];

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut convs, mut invs) = (0, 0);
    for n in 1..=2 {
        for c in 1..=4 {
            for &(h, w) in &SIDES {
                let x = random(&mut rng, Shape4::new(n, c, h, w), -1.0, 1.0);
                for dilation in 1..=3 {
                    for stride in 1..=2 {
                        for k in [1, 3] {
                            for out_c in [1, 4] {
                                for padding in [0, dilation * (k - 1) / 2] {
                                    let g = ConvGeometry { stride, dilation, padding };
                                    let kernel = random(&mut rng, Shape4::new(out_c, c, k, k), -1.0, 1.0);
                                    let bias: Vec<f64> = (0..out_c).map(|_| rng.random_range(-1.0..1.0)).collect();
                                    let Some(want) = conv_oracle(&x, &kernel, &bias, g) else { continue };
                                    let spec = ConvSpec { kernel: &kernel, bias: &bias, geometry: g };
                                    let got = ops::conv2d(&x, &spec).map_err(|e| e.to_string())?;
                                    if got.data() != want.data() {
                                        return Err(format!("conv2d differs at x {:?} k {k} {g:?}", x.shape()));
                                    }
                                    convs += 1;
                                }
                            }
                            for groups in (1..=c).filter(|g| c % g == 0) {
                                let g = InvolutionGeometry { kernel_size: k, groups, stride, dilation };
                                let (ho, wo) = (ops::involution_output_size(h, stride), ops::involution_output_size(w, stride));
                                let kernels = random(&mut rng, Shape4::new(n, groups * k * k, ho, wo), -1.0, 1.0);
                                let got = ops::involution2d(&x, &kernels, g).map_err(|e| e.to_string())?;
                                if got.data() != involution_oracle(&x, &kernels, g).data() {
                                    return Err(format!("involution2d differs at x {:?} {g:?}", x.shape()));
                                }
                                invs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{convs} conv2d and {invs} involution2d cases bit-identical"))
}

fn dipc_shape_law() -> Outcome {
    let channels = [32, 32, 64, 128];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut min_a = f32::INFINITY;
    let mut max_a = f32::NEG_INFINITY;
    for (i, &c) in channels.iter().enumerate() {
        let level = i + 1;
        let block = DipcBlock::<f32>::new(
            &mut Init::new(level as u64),
            DipcConfig {
                level,
                channels: c,
                dilations: vec![1, 2, 4],
                mixer: Mixer::Involution { kernel_size: 7, reduction: 4 },
                residual: true,
            },
        )
        .map_err(|e| e.to_string())?;
        let side = 8;
        let f = random(&mut rng, Shape4::new(2, c, side, side), -1.0, 1.0).cast::<f32>();
        let img_side = side << (level - 1);
        let image = random(&mut rng, Shape4::new(2, 3, img_side, img_side), 0.0, 1.0).cast::<f32>();
        let (out, cache) = block.forward(&f, &image, Mode::Train).map_err(|e| e.to_string())?;
        let want = Shape4::new(2, 2 * c, side / 2, side / 2);
        if out.shape() != want {
            return Err(format!("level {level}: got {} want {want}", out.shape()));
        }
        for &a in cache.attention().data() {
            min_a = min_a.min(a);
            max_a = max_a.max(a);
        }
    }
    ensure(
        min_a > 0.0 && max_a < 1.0,
        format!("levels 1-4 map (b,c,8,8) to (b,2c,4,4); attention in [{min_a:e}, {max_a}]"),
    )
}

fn parameter_accounting() -> Outcome {
    let count = |variant| -> Result<(usize, usize), String> {
        let net = SpeedNet::<f32>::new(SpeedNetConfig {
            variant,
            ..SpeedNetConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let stored = net.param_count() + net.buffer_count();
        let text = RunConfig {
            model: net.config.clone(),
            ..RunConfig::default()
        }
        .to_text();
        let bytes = encode(&text, &net, None).len();
        let ratio = bytes as f64 / (4.0 * stored as f64);
        if (ratio - 1.0).abs() > 0.02 {
            return Err(format!("{variant}: file {bytes} B vs 4 x {stored} scalars"));
        }
        Ok((net.param_count(), bytes))
    };
    let (full, full_bytes) = count(Variant::Full)?;
    let (plain, _) = count(Variant::NoInvolution)?;
    let (dilated, _) = count(Variant::DilatedBottleneck)?;
    let within = |v: usize, target: f64| ((v as f64 - target) / target).abs() <= 0.15;
    ensure(
        within(full, 2.40e6) && within(plain, 4.95e6) && full < plain && dilated == full,
        format!(
            "full {full} ({:+.1}% of 2.40M), no-involution {plain} ({:+.1}% of 4.95M), dilated-bottleneck {dilated}, full checkpoint {full_bytes} B",
            (full as f64 / 2.40e6 - 1.0) * 100.0,
            (plain as f64 / 4.95e6 - 1.0) * 100.0
        ),
    )
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let dice_params = TverskyParams { alpha: 0.5, beta: 0.5, smooth: 0.0 };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..4);
        let side = rng.random_range(2..9);
        let s = Shape4::new(n, 1, side, side);
        let pred = random(&mut rng, s, 0.0, 1.0);
        let target = Tensor4::from_fn(s, |_| if rng.random_bool(0.5) { 1.0 } else { 0.0 });
        let (t, _) = tversky_loss(&pred, &target, &dice_params).map_err(|e| e.to_string())?;
        let d = soft_dice_loss(&pred, &target).map_err(|e| e.to_string())?;
        worst = worst.max((t - d).abs());
    }
    let row = |v: &[f64]| Tensor4::from_vec(Shape4::new(1, 1, 1, v.len()), v.to_vec()).unwrap();
    let hand = TverskyParams { alpha: 0.3, beta: 0.7, smooth: 0.0 };
    let (loss, _) = tversky_loss(&row(&[1.0; 4]), &row(&[1.0, 1.0, 0.0, 0.0]), &hand).map_err(|e| e.to_string())?;
    let hand_err = (1.0 - loss - 2.0 / 2.6).abs();
    let &(name, tolerance, check) = CHECKS.iter().find(|c| c.0 == "tversky").ok_or("no tversky check")?;
    let tv = run_check(name, tolerance, check, &SuiteOptions::default());
    ensure(
        worst < 1e-9 && hand_err < 1e-12 && tv.passed() && tv.tolerance <= 1e-6,
        format!(
            "dice identity max diff {worst:.1e}; hand case error {hand_err:.1e}; gradient rel err {:.1e}",
            tv.max_rel_error
        ),
    )
}

fn metric_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst_j = 0.0f64;
    for _ in 0..1000 {
        let len = rng.random_range(1..200);
        let p_fg = rng.random_range(0.0..1.0);
        let g_fg = rng.random_range(0.0..1.0);
        let s = Shape4::new(1, 1, 1, len);
        let pred = Tensor4::from_fn(s, |_| if rng.random_bool(p_fg) { 0.9 } else { 0.1 });
        let gt = Tensor4::from_fn(s, |_| if rng.random_bool(g_fg) { 1.0 } else { 0.0 });
        let c = confusion(&pred, &gt, 0.5).map_err(|e| e.to_string())?;
        let mut brute = ConfusionCounts::default();
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p > 0.5, g > 0.0) {
                (true, true) => brute.tp += 1,
                (true, false) => brute.fp += 1,
                (false, true) => brute.fn_ += 1,
                (false, false) => brute.tn += 1,
            }
        }
        if c != brute {
            return Err(format!("counts {c:?} vs brute force {brute:?}"));
        }
        let m = metrics(&c);
        if m.jaccard > m.dice {
            return Err(format!("jaccard {} > dice {}", m.jaccard, m.dice));
        }
        if c.tp + c.fp + c.fn_ > 0 {
            worst_j = worst_j.max((m.jaccard - m.dice / (2.0 - m.dice)).abs());
        }
    }
    ensure(
        worst_j < 1e-12,
        format!("1000 random masks: exact counts, jaccard <= dice, |J - D/(2-D)| <= {worst_j:.1e}"),
    )
}

fn synthetic_run(dir: &std::path::Path, tag: &str, n: usize, size: usize, epochs: usize) -> Result<RunConfig, String> {
    let set = synth_dataset(n, size, 11).map_err(|e| e.to_string())?;
    let source = MemorySource::from_synth(&set);
    let cfg = RunConfig {
        epochs,
        model: SpeedNetConfig::toy(size),
        checkpoint_out: dir.join(format!("{tag}.ckpt")),
        log_out: dir.join(format!("{tag}.log")),
        ..RunConfig::default()
    };
    train(&cfg, &source, None, None).map_err(|e| e.to_string())?;
    Ok(cfg)
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let set = synth_dataset(16, 64, 11).map_err(|e| e.to_string())?;
    let source = MemorySource::from_synth(&set);
    let cfg = RunConfig {
        epochs: 200,
        model: SpeedNetConfig::toy(64),
        checkpoint_out: dir.path().join("overfit.ckpt"),
        log_out: dir.path().join("overfit.log"),
        ..RunConfig::default()
    };
    let outcome = with_threads(1, || train(&cfg, &source, None, None)).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let last = outcome.log.last().ok_or("empty log")?;
    // Reported, not gated: 20-epoch window means of the training loss.
    let means: Vec<f64> = outcome
        .log
        .chunks(20)
        .map(|w| w.iter().map(|r| r.train_loss).sum::<f64>() / w.len() as f64)
        .collect();
    let rises: Vec<String> = means
        .windows(2)
        .enumerate()
        .filter(|(_, m)| m[1] > m[0])
        .map(|(i, m)| format!("epochs {}-{} +{:.1}%", 20 * i + 21, 20 * i + 40, (m[1] / m[0] - 1.0) * 100.0))
        .collect();
    ensure(
        last.eval.dice >= 0.95 && elapsed < Duration::from_secs(600),
        format!(
            "train dice {:.4} after {} epochs, loss {:.4}, {:.0} s single-threaded; window-mean rises: {rises:?}",
            last.eval.dice,
            last.epoch,
            last.train_loss,
            elapsed.as_secs_f64()
        ),
    )
}

fn scheduler_behavior() -> Outcome {
    let mut s = PlateauScheduler::new(1e-3, 0.1, 12);
    let mut lrs = vec![s.step(1.0)];
    for _ in 0..12 {
        lrs.push(s.step(1.0));
    }
    let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut never_up = true;
    let mut prev = s.lr;
    for _ in 0..500 {
        let lr = s.step(rng.random_range(0.0..1.0));
        never_up &= lr <= prev;
        prev = lr;
    }
    ensure(
        drops == 1 && lrs[11] == 1e-3 && lrs[12] == 1e-4 && never_up,
        format!("lr after 12 flat epochs {:e}, {drops} drop, never increases over 500 random epochs: {never_up}", lrs.last().unwrap()),
    )
}

fn determinism() -> Outcome {
    // Both runs write to the same paths so the embedded config text matches as well.
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
    let a = with_threads(4, || synthetic_run(dir.path(), "run", 8, 32, 3))?;
    let (ckpt_a, log_a) = (read(&a.checkpoint_out)?, read(&a.log_out)?);
    let b = with_threads(1, || synthetic_run(dir.path(), "run", 8, 32, 3))?;
    let (ckpt_b, log_b) = (read(&b.checkpoint_out)?, read(&b.log_out)?);
    let (same_ckpt, same_log) = (ckpt_a == ckpt_b, log_a == log_b);
    ensure(
        same_ckpt && same_log,
        format!(
            "4-thread and 1-thread 3-epoch runs: checkpoints identical {same_ckpt} ({} B), logs identical {same_log}",
            ckpt_a.len()
        ),
    )
}

fn mutation_sensitivity() -> Outcome {
    let mut missed = Vec::new();
    for op in OpKind::ALL {
        let report = run_suite(&SuiteOptions {
            seeds: 1,
            model_samples: 0,
            flip: Some(op),
        });
        if !report.failures().contains(&op.name()) {
            missed.push(op.name());
        }
    }
    ensure(
        missed.is_empty(),
        format!("{} flipped backward kernels, undetected: {missed:?}", OpKind::ALL.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("oracle equivalence", oracle_equivalence),
        ("dipc shape law", dipc_shape_law),
        ("parameter accounting", parameter_accounting),
        ("loss identities", loss_identities),
        ("metric identities", metric_identities),
        ("overfit", overfit),
        ("scheduler", scheduler_behavior),
        ("determinism", determinism),
        ("mutation sensitivity", mutation_sensitivity),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{status} {:>2} {name}: {detail} [{:.1} s]", i + 1, start.elapsed().as_secs_f64());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
