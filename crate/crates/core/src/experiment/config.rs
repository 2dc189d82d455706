//! Run configuration: search, final training and data settings.
//!
//! A configuration file (TOML, or JSON when the extension is `.json`) holds
//! optional `[search]`, `[eval]` and `[data]` tables plus an optional
//! top-level `preset` key. Keys present in the file override the preset,
//! which defaults to `paper-search`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{AdamConfig, SgdConfig};

pub const PRESETS: [&str; 3] = ["paper-search", "paper-eval", "desk"];

/// SGD with momentum on a cosine schedule from `lr0` to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdSettings {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl SgdSettings {
    pub fn optimizer_config(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl AdamSettings {
    pub fn optimizer_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            eps: self.eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchConfig {
    pub cells: usize,
    pub intermediate_nodes: usize,
    pub init_channels: usize,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub w_opt: SgdSettings,
    pub a_opt: AdamSettings,
    /// `fp32` for real arithmetic, otherwise a builtin multiplier name or a
    /// table file path.
    pub multiplier: String,
    pub approximate_preprocessing: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub cells: usize,
    pub init_channels: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub w_opt: SgdSettings,
    pub drop_path_prob: f64,
    /// Side of the cutout square; 0 disables cutout.
    pub cutout_size: usize,
    /// Weight of the auxiliary head loss; 0 removes the head.
    pub aux_weight: f64,
    pub multiplier: String,
    pub approximate_preprocessing: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Cifar10,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    /// Dataset directory, relative to `AXNAS_DATA_DIR` when that is set.
    pub path: Option<String>,
    pub num_classes: usize,
    /// Synthetic data: image side, channels, samples per class, noise level
    /// and generator seed.
    pub image_size: usize,
    pub channels: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
    pub seed: u64,
    /// Optional caps on the number of loaded training and test images.
    pub max_train: Option<usize>,
    pub max_test: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub search: SearchConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

fn full_scale() -> RunConfig {
    RunConfig {
        search: SearchConfig {
            cells: 8,
            intermediate_nodes: 4,
            init_channels: 16,
            epochs: 50,
            warmup_epochs: 15,
            batch_size: 512,
            w_opt: SgdSettings {
                lr0: 0.1,
                momentum: 0.9,
                weight_decay: 3e-4,
                grad_clip: Some(5.0),
            },
            a_opt: AdamSettings {
                lr: 1e-4,
                beta1: 0.5,
                beta2: 0.999,
                weight_decay: 1e-3,
                eps: 1e-8,
            },
            multiplier: "fp32".into(),
            approximate_preprocessing: false,
            seed: 0,
        },
        eval: EvalConfig {
            cells: 20,
            init_channels: 32,
            epochs: 600,
            batch_size: 256,
            w_opt: SgdSettings {
                lr0: 0.025,
                momentum: 0.9,
                weight_decay: 3e-3,
                grad_clip: Some(5.0),
            },
            drop_path_prob: 0.3,
            cutout_size: 16,
            aux_weight: 0.4,
            multiplier: "fp32".into(),
            approximate_preprocessing: false,
            seed: 0,
        },
        data: DataConfig {
            source: DataSource::Cifar10,
            path: Some("cifar-10-batches-bin".into()),
            num_classes: 10,
            image_size: 32,
            channels: 3,
            train_per_class: 0,
            test_per_class: 0,
            noise: 0.0,
            seed: 0,
            max_train: None,
            max_test: None,
        },
    }
}

fn desk() -> RunConfig {
    let mut cfg = full_scale();
    cfg.search = SearchConfig {
        cells: 4,
        intermediate_nodes: 3,
        init_channels: 8,
        epochs: 10,
        warmup_epochs: 3,
        batch_size: 32,
        w_opt: SgdSettings {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
        },
        a_opt: AdamSettings {
            lr: 3e-3,
            ..cfg.search.a_opt
        },
        ..cfg.search
    };
    cfg.eval = EvalConfig {
        cells: 4,
        init_channels: 8,
        epochs: 30,
        batch_size: 32,
        w_opt: SgdSettings {
            lr0: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            grad_clip: Some(5.0),
        },
        drop_path_prob: 0.1,
        cutout_size: 6,
        aux_weight: 0.4,
        ..cfg.eval
    };
    cfg.data = DataConfig {
        source: DataSource::Synthetic,
        path: None,
        num_classes: 3,
        image_size: 16,
        channels: 3,
        train_per_class: 100,
        test_per_class: 50,
        noise: 0.35,
        seed: 7,
        max_train: None,
        max_test: None,
    };
    cfg
}

fn to_json(cfg: &RunConfig) -> Value {
    serde_json::to_value(cfg).expect("config serializes")
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-search" | "paper-eval" => Ok(full_scale()),
            "desk" => Ok(desk()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Parses configuration text in the given format (`"json"` or `"toml"`).
    pub fn parse(text: &str, json: bool) -> Result<Self> {
        let mut overlay: Value = if json {
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?
        } else {
            let t: toml::Table =
                toml::from_str(text).map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
            serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?
        };
        let Value::Object(map) = &mut overlay else {
            return Err(Error::Config("configuration must be a table".into()));
        };
        let preset = match map.remove("preset") {
            None => "paper-search".to_string(),
            Some(Value::String(s)) => s,
            Some(other) => {
                return Err(Error::Config(format!(
                    "`preset` must be a string, got {other}"
                )))
            }
        };
        let mut base = to_json(&Self::preset(&preset)?);
        merge(&mut base, overlay);
        let cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let json = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("json"));
        Self::parse(&text, json).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.search;
        let e = &self.eval;
        let d = &self.data;
        let fail = |key: &str, msg: &str| Err(Error::Config(format!("`{key}` {msg}")));
        if s.cells < 3 {
            return fail("search.cells", "must be at least 3");
        }
        if e.cells < 3 {
            return fail("eval.cells", "must be at least 3");
        }
        if s.intermediate_nodes == 0 {
            return fail("search.intermediate_nodes", "must be positive");
        }
        if s.init_channels == 0 || e.init_channels == 0 {
            return fail("init_channels", "must be positive");
        }
        if s.warmup_epochs > s.epochs {
            return fail("search.warmup_epochs", "must not exceed search.epochs");
        }
        if s.batch_size < 2 || e.batch_size < 2 {
            return fail("batch_size", "must be at least 2");
        }
        for (key, v) in [
            ("search.w_opt.lr0", s.w_opt.lr0),
            ("search.a_opt.lr", s.a_opt.lr),
            ("eval.w_opt.lr0", e.w_opt.lr0),
            ("eval.aux_weight", e.aux_weight),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return fail(key, "must be a non-negative number");
            }
        }
        if !(0.0..1.0).contains(&e.drop_path_prob) {
            return fail("eval.drop_path_prob", "must lie in [0, 1)");
        }
        if d.num_classes < 2 {
            return fail("data.num_classes", "must be at least 2");
        }
        if d.source == DataSource::Synthetic {
            if d.image_size < 4 {
                return fail("data.image_size", "must be at least 4");
            }
            if d.channels == 0 || d.train_per_class == 0 || d.test_per_class == 0 {
                return fail("data", "synthetic sizes must be positive");
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the resolved configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(&to_json(self)).expect("config serializes");
        hex::encode(Sha256::digest(canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_defaults() {
        let c = RunConfig::preset("paper-search").unwrap();
        assert_eq!(
            (c.search.cells, c.search.init_channels, c.search.epochs),
            (8, 16, 50)
        );
        assert_eq!((c.search.warmup_epochs, c.search.batch_size), (15, 512));
        assert_eq!(c.search.a_opt.lr, 1e-4);
        assert_eq!((c.search.a_opt.beta1, c.search.a_opt.beta2), (0.5, 0.999));
        assert_eq!(
            (c.eval.cells, c.eval.init_channels, c.eval.epochs),
            (20, 32, 600)
        );
        assert_eq!(
            (c.eval.drop_path_prob, c.eval.cutout_size, c.eval.aux_weight),
            (0.3, 16, 0.4)
        );
        assert_eq!(c.eval.w_opt.weight_decay, 3e-3);
    }

    #[test]
    fn file_overrides_preset() {
        let c = RunConfig::parse(
            "preset = \"desk\"\n[search]\nepochs = 4\nwarmup_epochs = 1\n",
            false,
        )
        .unwrap();
        assert_eq!(c.search.epochs, 4);
        assert_eq!(c.search.cells, 4);
        let j = RunConfig::parse(r#"{"preset": "desk", "eval": {"epochs": 2}}"#, true).unwrap();
        assert_eq!(j.eval.epochs, 2);
        assert_ne!(c.hash(), j.hash());
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::parse("[search]\nepochz = 3\n", false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("epochz"), "{err}");
        let err = RunConfig::parse("[search]\nwarmup_epochs = 60\n", false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("warmup_epochs"), "{err}");
        let err = RunConfig::parse("preset = \"huge\"\n", false)
            .unwrap_err()
            .to_string();
        assert!(err.contains("huge"), "{err}");
    }
}
