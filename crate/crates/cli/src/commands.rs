use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::RgbImage;
use log::{info, warn};
use speednet_core::data::{
    load_rgb, prefetch_batches, save_mask, scan_dataset, split, synth_dataset, write_dataset, BatchSource,
    DiskSource, Sample, SplitSpec, SYNTH_CLASS,
};
use speednet_core::gradcheck::suite::{run_suite, SuiteOptions};
use speednet_core::metrics::{aggregate, confusion_per_image, metrics, MetricSet, DEFAULT_THRESHOLD};
use speednet_core::model::{SpeedNet, SpeedNetConfig, Variant};
use speednet_core::ops::OpKind;
use speednet_core::training::{self, load_checkpoint, RunConfig};
use speednet_core::{Error, Result, Shape4, Tensor4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
    All,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::All => "all",
        })
    }
}

pub struct EvalArgs {
    pub checkpoints: Vec<PathBuf>,
    pub data: Option<PathBuf>,
    pub class: Option<String>,
    pub split: Split,
    pub csv: Option<PathBuf>,
    pub mask_oracle: bool,
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.into(),
        source,
    })?;
    RunConfig::parse_text(&text)
}

/// The train/test split a run with `cfg` sees under `root`.
fn split_samples(cfg: &RunConfig, root: &Path) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let mut index = scan_dataset(root)?;
    if let Some(class) = &cfg.class {
        index = index.only(class)?;
    }
    if !index.dropped.is_empty() {
        warn!("{} images without labels were skipped", index.dropped.len());
    }
    let spec = SplitSpec {
        train_fraction: cfg.train_fraction,
        seed: cfg.model.seed,
    };
    Ok(split(&index, spec))
}

pub fn train(
    config: &Path,
    overrides: &[String],
    epochs: Option<usize>,
    seed: Option<u64>,
    resume: Option<&Path>,
) -> Result<()> {
    let mut cfg = read_config(config)?;
    for o in overrides {
        cfg.apply_override(o)?;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
    }
    cfg.validate()?;
    let root = cfg.require_data_root()?.clone();
    info!("resolved config:\n{}", cfg.to_text().trim_end());

    let (train_samples, test_samples) = split_samples(&cfg, &root)?;
    info!("{} training and {} test images", train_samples.len(), test_samples.len());
    let size = cfg.model.img_size;
    let train_set = DiskSource {
        samples: train_samples,
        size,
    };
    let test_set = DiskSource {
        samples: test_samples,
        size,
    };

    let resume = match resume {
        None => None,
        Some(path) => {
            let ck = load_checkpoint::<f32>(path)?;
            if ck.run_config()?.model != cfg.model {
                return Err(Error::Config(format!(
                    "{} was trained with different model settings",
                    path.display()
                )));
            }
            let state = ck
                .state
                .clone()
                .ok_or_else(|| Error::Format(format!("{} holds no optimizer state", path.display())))?;
            info!("resuming after epoch {}", state.epoch);
            Some((ck.model()?, state))
        }
    };

    for out in [&cfg.checkpoint_out, &cfg.log_out] {
        if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|source| Error::Io {
                path: dir.into(),
                source,
            })?;
        }
    }
    let outcome = training::train(&cfg, &train_set, Some(&test_set), resume)?;
    match outcome.log.last() {
        Some(r) => println!(
            "epoch {}: loss {:.6}, dice {:.4}, jaccard {:.4}",
            r.epoch, r.train_loss, r.eval.dice, r.eval.jaccard
        ),
        None => println!("no epochs run; wrote the initial weights"),
    }
    println!("checkpoint {}", cfg.checkpoint_out.display());
    println!("log        {}", cfg.log_out.display());
    Ok(())
}

/// Per-image metrics of the ground truth scored against itself.
fn mask_oracle(source: &dyn BatchSource, batch_size: usize) -> Result<Vec<(String, MetricSet)>> {
    let mut out = Vec::with_capacity(source.len());
    prefetch_batches(source, batch_size, |i, _, y| {
        for (j, c) in confusion_per_image(&y, &y, DEFAULT_THRESHOLD)?.iter().enumerate() {
            out.push((source.class_of(i * batch_size + j).to_string(), metrics(c)));
        }
        Ok(())
    })?;
    Ok(out)
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if args.csv.is_some() && args.checkpoints.len() > 1 {
        return Err(Error::Config(
            "--csv takes a single checkpoint; without it each report goes to <checkpoint>.eval.csv".into(),
        ));
    }
    for path in &args.checkpoints {
        let ck = load_checkpoint::<f32>(path)?;
        let cfg = ck.run_config()?;
        let root = match &args.data {
            Some(d) => d.clone(),
            None => cfg.require_data_root()?.clone(),
        };
        let (train, test) = split_samples(&cfg, &root)?;
        let mut samples = match args.split {
            Split::Train => train,
            Split::Test => test,
            Split::All => train.into_iter().chain(test).collect(),
        };
        if let Some(class) = &args.class {
            samples.retain(|s| &s.class_name == class);
        }
        if samples.is_empty() {
            return Err(Error::Dataset(format!(
                "no {} images under {}{}",
                args.split,
                root.display(),
                args.class.as_ref().map(|c| format!(" for class '{c}'")).unwrap_or_default()
            )));
        }
        let count = samples.len();
        let source = DiskSource {
            samples,
            size: cfg.model.img_size,
        };
        let per_image = if args.mask_oracle {
            mask_oracle(&source, cfg.batch_size)?
        } else {
            training::evaluate(&ck.model()?, &source, cfg.batch_size)?
        };
        let report = aggregate(&per_image)?;
        println!("{} ({} split, {count} images)", path.display(), args.split);
        print!("{}", report.to_text());
        let csv = args.csv.clone().unwrap_or_else(|| path.with_extension("eval.csv"));
        fs::write(&csv, report.to_csv()).map_err(|source| Error::Io {
            path: csv.clone(),
            source,
        })?;
        info!("wrote {}", csv.display());
    }
    Ok(())
}

/// Bilinear rescale of planar RGB in `[0, 1]` to `size × size`.
fn resize_planar(w: u32, h: u32, planar: &[f32], size: usize) -> Vec<f32> {
    let plane = (w * h) as usize;
    let img = RgbImage::from_fn(w, h, |x, y| {
        let i = (y * w + x) as usize;
        image::Rgb([0, 1, 2].map(|c| (planar[c * plane + i] * 255.0).round() as u8))
    });
    let out = imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    let plane = size * size;
    let mut planar = vec![0.0f32; 3 * plane];
    for (i, px) in out.pixels().enumerate() {
        for c in 0..3 {
            planar[c * plane + i] = px[c] as f32 / 255.0;
        }
    }
    planar
}

pub fn predict(checkpoint: &Path, input: &Path, output: &Path, resize: bool) -> Result<()> {
    let ck = load_checkpoint::<f32>(checkpoint)?;
    let size = ck.run_config()?.model.img_size;
    let model = ck.model()?;
    let (w, h, mut planar) = load_rgb(input)?;
    if (w as usize, h as usize) != (size, size) {
        if !resize {
            return Err(Error::Config(format!(
                "{} is {w}x{h} but the model expects {size}x{size}; pass --resize to scale it",
                input.display()
            )));
        }
        planar = resize_planar(w, h, &planar, size);
    }
    let x = Tensor4::from_vec(Shape4::new(1, 3, size, size), planar)?;
    let prob = model.predict(&x)?;
    let mask: Vec<u8> = prob.data().iter().map(|&p| if p > 0.5 { 255 } else { 0 }).collect();
    let foreground = mask.iter().filter(|&&m| m == 255).count();
    save_mask(output, size as u32, size as u32, mask)?;
    println!(
        "{}: {foreground} of {} pixels foreground",
        output.display(),
        size * size
    );
    Ok(())
}

pub fn params(variant: Option<&str>, config: Option<&Path>) -> Result<()> {
    let base = match config {
        Some(p) => read_config(p)?.model,
        None => SpeedNetConfig::default(),
    };
    let variants = match variant {
        Some(v) => vec![v.parse::<Variant>()?],
        None => Variant::ALL.to_vec(),
    };
    let mut totals = Vec::new();
    for v in variants {
        let net = SpeedNet::<f32>::new(SpeedNetConfig {
            variant: v,
            ..base.clone()
        })?;
        let counts = net.count_parameters();
        println!("{v}");
        for (name, n) in net.breakdown() {
            println!("  {name:<14} {n:>10}");
        }
        println!("  {:<14} {:>10}", "trainable", counts.trainable);
        println!("  {:<14} {:>10}", "with bn stats", counts.total_with_stats);
        println!(
            "  {:<14} {:>10}  ({:.2} MB)",
            "f32 checkpoint",
            counts.bytes32,
            counts.bytes32 as f64 / 1e6
        );
        totals.push((v, counts.trainable));
    }
    let total = |want| totals.iter().find(|(v, _)| *v == want).map(|t| t.1);
    if let (Some(full), Some(plain)) = (total(Variant::Full), total(Variant::NoInvolution)) {
        println!("no-involution / full = {:.3}", plain as f64 / full as f64);
    }
    Ok(())
}

pub fn gradcheck(seeds: u64, model_samples: usize, mutate: Option<OpKind>) -> Result<()> {
    if let Some(op) = mutate {
        warn!("the {op} backward kernel is negated for this run");
    }
    let report = run_suite(&SuiteOptions {
        seeds,
        model_samples,
        flip: mutate,
    });
    for r in &report.results {
        println!("{}", r.summary());
    }
    let failures = report.failures();
    println!(
        "{} of {} checks passed in {:.1} s",
        report.results.len() - failures.len(),
        report.results.len(),
        report.elapsed.as_secs_f64()
    );
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(failures.join(", ")))
    }
}

pub fn synth(out: &Path, n: usize, size: usize, seed: u64) -> Result<()> {
    let set = synth_dataset(n, size, seed)?;
    write_dataset(out, &set)?;
    println!("wrote {n} image/label pairs to {}", out.join(SYNTH_CLASS).display());
    Ok(())
}
