//! Line-oriented `key = value` run configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::TverskyParams;
use crate::model::{SpeedNetConfig, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Dataset root in `root/<class>/{image,label}` layout.
    pub data_root: Option<PathBuf>,
    /// Train on this class only; `None` pools every class into one binary task.
    pub class: Option<String>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: usize,
    pub tversky: TverskyParams,
    pub train_fraction: f64,
    pub checkpoint_out: PathBuf,
    pub log_out: PathBuf,
    pub model: SpeedNetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data_root: None,
            class: None,
            epochs: 120,
            batch_size: 4,
            lr: 1e-3,
            lr_factor: 0.1,
            lr_patience: 12,
            tversky: TverskyParams::default(),
            train_fraction: 0.8,
            checkpoint_out: PathBuf::from("speednet.ckpt"),
            log_out: PathBuf::from("train_log.csv"),
            model: SpeedNetConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn optional(value: &str) -> Option<String> {
    (!value.is_empty()).then(|| value.to_string())
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "data_root",
        "class",
        "img_size",
        "epochs",
        "batch_size",
        "lr",
        "lr_factor",
        "lr_patience",
        "alpha",
        "beta",
        "smooth",
        "variant",
        "seed",
        "checkpoint_out",
        "log_out",
        "train_fraction",
        "involution_k",
        "involution_r",
        "dilations",
        "encoder_channels",
        "bottleneck_channels",
        "decoder_channels",
        "bottleneck_dilation",
        "residual",
    ];

    /// Applies one `key = value` assignment. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let m = &mut self.model;
        match key.trim() {
            "data_root" => self.data_root = optional(v).map(PathBuf::from),
            "class" => self.class = optional(v),
            "img_size" => m.img_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "lr_factor" => self.lr_factor = parse(key, v)?,
            "lr_patience" => self.lr_patience = parse(key, v)?,
            "alpha" => self.tversky.alpha = parse(key, v)?,
            "beta" => self.tversky.beta = parse(key, v)?,
            "smooth" => self.tversky.smooth = parse(key, v)?,
            "variant" => m.variant = v.parse::<Variant>()?,
            "seed" => m.seed = parse(key, v)?,
            "checkpoint_out" => self.checkpoint_out = PathBuf::from(v),
            "log_out" => self.log_out = PathBuf::from(v),
            "train_fraction" => self.train_fraction = parse(key, v)?,
            "involution_k" => m.involution_k = parse(key, v)?,
            "involution_r" => m.involution_r = parse(key, v)?,
            "dilations" => m.dilations = parse_list(key, v)?,
            "encoder_channels" => m.encoder_channels = parse_list(key, v)?,
            "bottleneck_channels" => m.bottleneck_channels = parse(key, v)?,
            "decoder_channels" => m.decoder_channels = parse_list(key, v)?,
            "bottleneck_dilation" => m.bottleneck_dilation = parse(key, v)?,
            "residual" => m.residual = parse(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value', got '{line}'", n + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    /// Parses a `key=value` override as given on the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{assignment}' must look like key=value")))?;
        self.set(k, v)
    }

    /// Every key with its resolved value, in a fixed order. Parsing the result
    /// yields an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data_root", path(&self.data_root));
        kv("class", self.class.clone().unwrap_or_default());
        kv("img_size", m.img_size.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_factor", self.lr_factor.to_string());
        kv("lr_patience", self.lr_patience.to_string());
        kv("alpha", self.tversky.alpha.to_string());
        kv("beta", self.tversky.beta.to_string());
        kv("smooth", self.tversky.smooth.to_string());
        kv("variant", m.variant.to_string());
        kv("seed", m.seed.to_string());
        kv("checkpoint_out", self.checkpoint_out.display().to_string());
        kv("log_out", self.log_out.display().to_string());
        kv("train_fraction", self.train_fraction.to_string());
        kv("involution_k", m.involution_k.to_string());
        kv("involution_r", m.involution_r.to_string());
        kv("dilations", list(&m.dilations));
        kv("encoder_channels", list(&m.encoder_channels));
        kv("bottleneck_channels", m.bottleneck_channels.to_string());
        kv("decoder_channels", list(&m.decoder_channels));
        kv("bottleneck_dilation", m.bottleneck_dilation.to_string());
        kv("residual", m.residual.to_string());
        s
    }

    /// Checks everything except the data location.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tversky.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor <= 1.0) {
            return Err(Error::Config(format!("lr_factor must lie in (0, 1], got {}", self.lr_factor)));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::Config(format!("train_fraction must lie in [0, 1], got {}", self.train_fraction)));
        }
        Ok(())
    }

    pub fn require_data_root(&self) -> Result<&PathBuf> {
        self.data_root
            .as_ref()
            .ok_or_else(|| Error::Config("data_root is not set".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data_root = Some("/data/ebhi".into());
        cfg.class = Some("polyp".into());
        cfg.model.dilations = vec![1, 3];
        cfg.lr = 3.5e-4;
        let back = RunConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_text(), cfg.to_text());
    }

    #[test]
    fn unknown_key_is_an_error() {
        let err = RunConfig::parse_text("epochs = 3\nbatchsize = 2\n").unwrap_err();
        assert!(err.to_string().contains("batchsize"));
    }

    #[test]
    fn comments_and_blanks() {
        let cfg = RunConfig::parse_text("# run\n\nepochs = 7  # short\nvariant = no-involution\n").unwrap();
        assert_eq!(cfg.epochs, 7);
        assert_eq!(cfg.model.variant, Variant::NoInvolution);
    }

    #[test]
    fn bad_values() {
        assert!(RunConfig::parse_text("lr = fast").is_err());
        assert!(RunConfig::parse_text("just words").is_err());
        let mut cfg = RunConfig::default();
        assert!(cfg.apply_override("epochs").is_err());
        cfg.apply_override("epochs=0").unwrap();
        assert_eq!(cfg.epochs, 0);
        assert!(cfg.require_data_root().unwrap_err().to_string().contains("data_root"));
    }

    #[test]
    fn every_key_is_settable() {
        let text = RunConfig::default().to_text();
        for key in RunConfig::KEYS {
            assert!(text.contains(&format!("{key} = ")), "{key}");
        }
    }
}
