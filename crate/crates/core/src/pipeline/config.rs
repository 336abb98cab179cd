//! Flat `key = value` run configuration shared by every command.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::esm::GateReduce;
use crate::synth::SceneConfig;

use super::model::Variant;

/// Every tunable of a run. Keys in the text form match field names.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    // scene
    pub count: usize,
    pub image_size: usize,
    pub n_categories: usize,
    pub objects_min: usize,
    pub objects_max: usize,
    pub size_min: usize,
    pub size_max: usize,
    pub shift_y: i32,
    pub shift_x: i32,
    pub jitter: i32,
    pub noise_sigma: f64,
    // model
    pub variant: Variant,
    pub visual_dim: usize,
    pub shared_dim: usize,
    pub text_dim: usize,
    pub gate: GateReduce,
    /// Embeddings CSV; empty selects seeded orthonormal test embeddings.
    pub embeddings: String,
    // training
    pub epochs: usize,
    pub batch_size: usize,
    /// Use at most this many samples of a dataset; 0 uses all.
    pub max_samples: usize,
    pub lr_stage1: f64,
    pub lr_stage2: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub w_det: f64,
    pub w_sa: f64,
    pub w_sc: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let scene = SceneConfig::default();
        Self {
            seed: scene.seed,
            count: 64,
            image_size: scene.image_size,
            n_categories: scene.n_categories,
            objects_min: scene.objects.0,
            objects_max: scene.objects.1,
            size_min: scene.object_size.0,
            size_max: scene.object_size.1,
            shift_y: scene.global_shift.0,
            shift_x: scene.global_shift.1,
            jitter: scene.jitter,
            noise_sigma: scene.noise_sigma,
            variant: Variant::Full,
            visual_dim: 32,
            shared_dim: crate::sam::DEFAULT_SHARED_DIM,
            text_dim: crate::semantics::DEFAULT_TEXT_DIM,
            gate: GateReduce::Max,
            embeddings: String::new(),
            epochs: 50,
            batch_size: 4,
            max_samples: 0,
            lr_stage1: 0.035,
            lr_stage2: 0.02,
            momentum: 0.843,
            weight_decay: 0.00036,
            w_det: 1.0,
            w_sa: 1.0,
            w_sc: 1.0,
        }
    }
}

/// Every accepted key, in the order configs are written.
pub const KEYS: &[&str] = &[
    "seed",
    "count",
    "image_size",
    "n_categories",
    "objects_min",
    "objects_max",
    "size_min",
    "size_max",
    "shift_y",
    "shift_x",
    "jitter",
    "noise_sigma",
    "variant",
    "visual_dim",
    "shared_dim",
    "text_dim",
    "gate",
    "embeddings",
    "epochs",
    "batch_size",
    "max_samples",
    "lr_stage1",
    "lr_stage2",
    "momentum",
    "weight_decay",
    "w_det",
    "w_sa",
    "w_sc",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for key `{key}`")))
}

/// Shortest text that parses back to the same `f64`.
fn float(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Reduced budget for quick runs: 5 epochs per stage, 32 samples.
    pub fn fast() -> Self {
        Self::default().with_fast()
    }

    pub fn with_fast(mut self) -> Self {
        self.epochs = 5;
        self.count = 32;
        self.max_samples = 32;
        self
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "count" => self.count = parse(key, v)?,
            "image_size" => self.image_size = parse(key, v)?,
            "n_categories" => self.n_categories = parse(key, v)?,
            "objects_min" => self.objects_min = parse(key, v)?,
            "objects_max" => self.objects_max = parse(key, v)?,
            "size_min" => self.size_min = parse(key, v)?,
            "size_max" => self.size_max = parse(key, v)?,
            "shift_y" => self.shift_y = parse(key, v)?,
            "shift_x" => self.shift_x = parse(key, v)?,
            "jitter" => self.jitter = parse(key, v)?,
            "noise_sigma" => self.noise_sigma = parse(key, v)?,
            "variant" => self.variant = parse(key, v)?,
            "visual_dim" => self.visual_dim = parse(key, v)?,
            "shared_dim" => self.shared_dim = parse(key, v)?,
            "text_dim" => self.text_dim = parse(key, v)?,
            "gate" => self.gate = parse(key, v)?,
            "embeddings" => self.embeddings = v.to_string(),
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_samples" => self.max_samples = parse(key, v)?,
            "lr_stage1" => self.lr_stage1 = parse(key, v)?,
            "lr_stage2" => self.lr_stage2 = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "w_det" => self.w_det = parse(key, v)?,
            "w_sa" => self.w_sa = parse(key, v)?,
            "w_sc" => self.w_sc = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "seed" => self.seed.to_string(),
            "count" => self.count.to_string(),
            "image_size" => self.image_size.to_string(),
            "n_categories" => self.n_categories.to_string(),
            "objects_min" => self.objects_min.to_string(),
            "objects_max" => self.objects_max.to_string(),
            "size_min" => self.size_min.to_string(),
            "size_max" => self.size_max.to_string(),
            "shift_y" => self.shift_y.to_string(),
            "shift_x" => self.shift_x.to_string(),
            "jitter" => self.jitter.to_string(),
            "noise_sigma" => float(self.noise_sigma),
            "variant" => self.variant.to_string(),
            "visual_dim" => self.visual_dim.to_string(),
            "shared_dim" => self.shared_dim.to_string(),
            "text_dim" => self.text_dim.to_string(),
            "gate" => self.gate.to_string(),
            "embeddings" => self.embeddings.clone(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_samples" => self.max_samples.to_string(),
            "lr_stage1" => float(self.lr_stage1),
            "lr_stage2" => float(self.lr_stage2),
            "momentum" => float(self.momentum),
            "weight_decay" => float(self.weight_decay),
            "w_det" => float(self.w_det),
            "w_sa" => float(self.w_sa),
            "w_sc" => float(self.w_sc),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Format {
                path: origin.to_string(),
                line: i + 1,
                msg: format!("expected `key = value`, got {raw:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text, origin)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            image_size: self.image_size,
            n_categories: self.n_categories,
            objects: (self.objects_min, self.objects_max),
            object_size: (self.size_min, self.size_max),
            global_shift: (self.shift_y, self.shift_x),
            jitter: self.jitter,
            noise_sigma: self.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene().validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.visual_dim == 0 || self.shared_dim == 0 || self.text_dim == 0 {
            return bad("feature dimensions must be positive");
        }
        let finite = [
            self.lr_stage1,
            self.lr_stage2,
            self.momentum,
            self.weight_decay,
            self.w_det,
            self.w_sa,
            self.w_sc,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return bad("learning rates, momentum, weight decay and loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for key in KEYS {
            writeln!(f, "{key} = {}", self.get(key).expect("listed key"))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.noise_sigma = 0.1 + 0.2;
        cfg.variant = Variant::SamIsm;
        cfg.embeddings = "emb.csv".into();
        let back = RunConfig::parse(&cfg.to_string(), "mem").unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("seed = 1\nlearning_rate = 3\n", "mem").unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn every_key_is_gettable_and_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for key in KEYS {
            let v = cfg.get(key).unwrap();
            other.set(key, &v).unwrap();
        }
        assert_eq!(cfg, other);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# run\n\nepochs = 3 # short\n", "mem").unwrap();
        assert_eq!(cfg.epochs, 3);
        assert!(matches!(
            RunConfig::parse("epochs 3", "mem"),
            Err(Error::Format { line: 1, .. })
        ));
    }
}
