//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::augment::{SceneConfig, ShapeColors};
use crate::error::{Error, Result};
use crate::model::{EncoderSpec, HeadSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Mode {
    Scrl,
    GlobalByol,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scrl" => Ok(Mode::Scrl),
            "global-byol" => Ok(Mode::GlobalByol),
            _ => Err(Error::Config(format!("mode must be scrl or global-byol, got {s:?}"))),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Scrl => "scrl",
            Mode::GlobalByol => "global-byol",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OptimizerKind {
    Sgd,
    Lars,
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "lars" => Ok(OptimizerKind::Lars),
            _ => Err(Error::Config(format!("optimizer must be sgd or lars, got {s:?}"))),
        }
    }
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Lars => "lars",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub k: usize,
    pub iou_thr: Option<f64>,
    /// Relative box jitter; infinity replaces each box with a random one.
    pub jitter: f64,
    pub tau0: f64,
    pub lr0: f64,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust_coeff: f64,
    pub seed: u64,
    pub data_seed: u64,
    pub dataset_size: usize,
    pub image_size: usize,
    pub shape_min: f64,
    pub shape_max: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub shape_colors: ShapeColors,
    pub texture: f64,
    /// Upper end of the Gaussian blur sigma range, in view pixels.
    pub blur_sigma_max: f64,
    pub widths: Vec<usize>,
    pub proj_hidden: usize,
    pub proj_out: usize,
    pub pred_hidden: usize,
    /// Minimum RoI side in source pixels; 0 selects one feature cell.
    pub min_box: f64,
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Scrl,
            k: 10,
            iou_thr: Some(0.5),
            jitter: 0.0,
            tau0: 0.97,
            lr0: 0.3,
            warmup_epochs: 1,
            epochs: 80,
            batch: 32,
            optimizer: OptimizerKind::Sgd,
            momentum: 0.9,
            weight_decay: 1e-4,
            trust_coeff: 0.001,
            seed: 0,
            data_seed: 0,
            dataset_size: 2000,
            image_size: 64,
            shape_min: 16.0,
            shape_max: 32.0,
            objects_min: 1,
            objects_max: 4,
            shape_colors: ShapeColors::Random,
            texture: 1.0,
            blur_sigma_max: 2.0,
            widths: vec![16, 32, 64, 64],
            proj_hidden: 256,
            proj_out: 64,
            pred_hidden: 256,
            min_box: 0.0,
            checkpoint_every: 0,
            log_every: 10,
        }
    }
}

pub const BLUR_SIGMA_MIN: f64 = 0.1;

pub const KEYS: &[&str] = &[
    "mode",
    "k",
    "iou_thr",
    "jitter",
    "tau0",
    "lr0",
    "warmup_epochs",
    "epochs",
    "batch",
    "optimizer",
    "momentum",
    "weight_decay",
    "trust_coeff",
    "seed",
    "data_seed",
    "dataset_size",
    "image_size",
    "shape_min",
    "shape_max",
    "objects_min",
    "objects_max",
    "shape_colors",
    "texture",
    "blur_sigma_max",
    "widths",
    "proj_hidden",
    "proj_out",
    "pred_hidden",
    "min_box",
    "checkpoint_every",
    "log_every",
];

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn float(key: &str, v: &str) -> Result<f64> {
    match v {
        "inf" | "infinity" => Ok(f64::INFINITY),
        _ => {
            let x: f64 = num(key, v)?;
            if x.is_nan() {
                return Err(Error::Config(format!("{key}: NaN is not allowed")));
            }
            Ok(x)
        }
    }
}

fn fmt_f64(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "mode" => self.mode = v.parse()?,
            "k" => self.k = num(key, v)?,
            "iou_thr" => {
                self.iou_thr = match v {
                    "none" | "off" => None,
                    _ => Some(float(key, v)?),
                }
            }
            "jitter" => self.jitter = float(key, v)?,
            "tau0" => self.tau0 = float(key, v)?,
            "lr0" => self.lr0 = float(key, v)?,
            "warmup_epochs" => self.warmup_epochs = num(key, v)?,
            "epochs" => self.epochs = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "optimizer" => self.optimizer = v.parse()?,
            "momentum" => self.momentum = float(key, v)?,
            "weight_decay" => self.weight_decay = float(key, v)?,
            "trust_coeff" => self.trust_coeff = float(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "dataset_size" => self.dataset_size = num(key, v)?,
            "image_size" => self.image_size = num(key, v)?,
            "shape_min" => self.shape_min = float(key, v)?,
            "shape_max" => self.shape_max = float(key, v)?,
            "objects_min" => self.objects_min = num(key, v)?,
            "objects_max" => self.objects_max = num(key, v)?,
            "shape_colors" => self.shape_colors = v.parse()?,
            "texture" => self.texture = float(key, v)?,
            "blur_sigma_max" => self.blur_sigma_max = float(key, v)?,
            "widths" => {
                self.widths = v
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "proj_hidden" => self.proj_hidden = num(key, v)?,
            "proj_out" => self.proj_out = num(key, v)?,
            "pred_hidden" => self.pred_hidden = num(key, v)?,
            "min_box" => self.min_box = float(key, v)?,
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are ignored; unknown or repeated keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k:?}", no + 1)));
            }
            cfg.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = match *key {
                "mode" => self.mode.as_str().to_string(),
                "k" => self.k.to_string(),
                "iou_thr" => self.iou_thr.map_or("none".into(), fmt_f64),
                "jitter" => fmt_f64(self.jitter),
                "tau0" => fmt_f64(self.tau0),
                "lr0" => fmt_f64(self.lr0),
                "warmup_epochs" => self.warmup_epochs.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch" => self.batch.to_string(),
                "optimizer" => self.optimizer.as_str().to_string(),
                "momentum" => fmt_f64(self.momentum),
                "weight_decay" => fmt_f64(self.weight_decay),
                "trust_coeff" => fmt_f64(self.trust_coeff),
                "seed" => self.seed.to_string(),
                "data_seed" => self.data_seed.to_string(),
                "dataset_size" => self.dataset_size.to_string(),
                "image_size" => self.image_size.to_string(),
                "shape_min" => fmt_f64(self.shape_min),
                "shape_max" => fmt_f64(self.shape_max),
                "objects_min" => self.objects_min.to_string(),
                "objects_max" => self.objects_max.to_string(),
                "shape_colors" => self.shape_colors.as_str().to_string(),
                "texture" => fmt_f64(self.texture),
                "blur_sigma_max" => fmt_f64(self.blur_sigma_max),
                "widths" => self
                    .widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
                "proj_hidden" => self.proj_hidden.to_string(),
                "proj_out" => self.proj_out.to_string(),
                "pred_hidden" => self.pred_hidden.to_string(),
                "min_box" => fmt_f64(self.min_box),
                "checkpoint_every" => self.checkpoint_every.to_string(),
                "log_every" => self.log_every.to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == Mode::Scrl && self.k < 1 {
            return Err(Error::Config("k must be at least 1 in scrl mode".into()));
        }
        if self.batch < 2 {
            return Err(Error::Config("batch must be at least 2".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs > self.epochs {
            return Err(Error::Config("warmup_epochs cannot exceed epochs".into()));
        }
        if self.dataset_size < self.batch {
            return Err(Error::Config("dataset_size must be at least one batch".into()));
        }
        if let Some(t) = self.iou_thr {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config("iou_thr must lie in [0, 1]".into()));
            }
        }
        if self.jitter < 0.0 {
            return Err(Error::Config("jitter must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.tau0) {
            return Err(Error::Config("tau0 must lie in [0, 1]".into()));
        }
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config("lr0 must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 || self.trust_coeff <= 0.0 {
            return Err(Error::Config("momentum, weight_decay or trust_coeff out of range".into()));
        }
        if self.min_box < 0.0 || !self.min_box.is_finite() {
            return Err(Error::Config("min_box must be finite and non-negative".into()));
        }
        if !(self.blur_sigma_max >= BLUR_SIGMA_MIN && self.blur_sigma_max.is_finite()) {
            return Err(Error::Config(format!("blur_sigma_max must be finite and at least {BLUR_SIGMA_MIN}")));
        }
        self.scene().validate()?;
        self.encoder().validate()?;
        self.projector().validate()?;
        self.predictor().validate()?;
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            width: self.image_size,
            height: self.image_size,
            min_size: self.shape_min,
            max_size: self.shape_max,
            min_shapes: self.objects_min,
            max_shapes: self.objects_max,
            shape_colors: self.shape_colors,
            texture: self.texture,
            ..SceneConfig::default()
        }
    }

    pub fn encoder(&self) -> EncoderSpec {
        EncoderSpec::with_widths(self.image_size, &self.widths)
    }

    pub fn projector(&self) -> HeadSpec {
        HeadSpec::new(self.proj_hidden, self.proj_out)
    }

    pub fn predictor(&self) -> HeadSpec {
        HeadSpec::new(self.pred_hidden, self.proj_out)
    }

    /// Minimum RoI side in source pixels: the configured value, or the
    /// source-to-feature-grid ratio when unset.
    pub fn min_box_side(&self) -> f64 {
        if self.min_box > 0.0 {
            self.min_box
        } else {
            let e = self.encoder();
            self.image_size as f64 / e.feature_size() as f64
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.dataset_size / self.batch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch() * self.epochs
    }

    pub fn warmup_steps(&self) -> usize {
        self.steps_per_epoch() * self.warmup_epochs
    }
}
