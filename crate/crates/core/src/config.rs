//! Run configuration in plain `key = value` text.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::network::{LossWeights, NetConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub reduction: usize,
    pub alpha: usize,
    pub gh: usize,
    pub gw: usize,
    pub lambda_main: f64,
    pub lambda_cls: f64,
    pub lambda_aux: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_iter: usize,
    pub power: f64,
    pub batch_size: usize,
    pub use_caa: bool,
    pub use_cca: bool,
    pub use_rsa: bool,
    /// Augmentation scale range; `scale_min = 0` disables augmentation.
    pub scale_min: f64,
    pub scale_max: f64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = NetConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            seed: 0,
            height: 64,
            width: 64,
            classes: net.classes,
            reduction: net.reduction,
            alpha: net.alpha,
            gh: net.gh,
            gw: net.gw,
            lambda_main: train.weights.main,
            lambda_cls: train.weights.cls,
            lambda_aux: train.weights.aux,
            lr: train.base_lr,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            max_iter: train.iterations,
            power: train.power,
            batch_size: train.batch_size,
            use_caa: true,
            use_cca: true,
            use_rsa: true,
            scale_min: 0.0,
            scale_max: 0.0,
            data_dir: None,
            out_dir: None,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::usage(format!("invalid value '{value}' for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::usage(format!("invalid boolean '{value}' for {key}"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "height" | "h" => self.height = parse(key, v)?,
            "width" | "w" => self.width = parse(key, v)?,
            "classes" | "k" => self.classes = parse(key, v)?,
            "reduction" => self.reduction = parse(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "gh" => self.gh = parse(key, v)?,
            "gw" => self.gw = parse(key, v)?,
            "lambda_main" => self.lambda_main = parse(key, v)?,
            "lambda_cls" => self.lambda_cls = parse(key, v)?,
            "lambda_aux" => self.lambda_aux = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "power" => self.power = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "use_caa" => self.use_caa = parse_bool(key, v)?,
            "use_cca" => self.use_cca = parse_bool(key, v)?,
            "use_rsa" => self.use_rsa = parse_bool(key, v)?,
            "scale_min" => self.scale_min = parse(key, v)?,
            "scale_max" => self.scale_max = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            other => return Err(Error::usage(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::usage(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(&fs::read_to_string(path)?)?;
        Ok(c)
    }

    /// Canonical `key = value` echo; [`RunConfig::apply_text`] reads it back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("height", self.height.to_string());
        kv("width", self.width.to_string());
        kv("classes", self.classes.to_string());
        kv("reduction", self.reduction.to_string());
        kv("alpha", self.alpha.to_string());
        kv("gh", self.gh.to_string());
        kv("gw", self.gw.to_string());
        kv("lambda_main", self.lambda_main.to_string());
        kv("lambda_cls", self.lambda_cls.to_string());
        kv("lambda_aux", self.lambda_aux.to_string());
        kv("lr", self.lr.to_string());
        kv("momentum", self.momentum.to_string());
        kv("weight_decay", self.weight_decay.to_string());
        kv("max_iter", self.max_iter.to_string());
        kv("power", self.power.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("use_caa", self.use_caa.to_string());
        kv("use_cca", self.use_cca.to_string());
        kv("use_rsa", self.use_rsa.to_string());
        kv("scale_min", self.scale_min.to_string());
        kv("scale_max", self.scale_max.to_string());
        if let Some(p) = &self.data_dir {
            kv("data_dir", p.display().to_string());
        }
        if let Some(p) = &self.out_dir {
            kv("out_dir", p.display().to_string());
        }
        s
    }

    pub fn net_config(&self) -> NetConfig {
        NetConfig {
            classes: self.classes,
            reduction: self.reduction,
            alpha: self.alpha,
            gh: self.gh,
            gw: self.gw,
            use_caa: self.use_caa,
            use_cca: self.use_cca && self.use_caa,
            use_rsa: self.use_rsa,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            main: self.lambda_main,
            cls: self.lambda_cls,
            aux: self.lambda_aux,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let augment = (self.scale_min > 0.0).then(|| crate::data::AugmentConfig {
            scale_min: self.scale_min,
            scale_max: self.scale_max.max(self.scale_min),
            ..crate::data::AugmentConfig::new(self.height, self.width)
        });
        TrainConfig {
            seed: self.seed,
            iterations: self.max_iter,
            batch_size: self.batch_size,
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            power: self.power,
            weights: self.loss_weights(),
            augment,
        }
    }
}
