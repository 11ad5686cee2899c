//! Strict JSON experiment configuration.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::TrainedLayers;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    EarlyBinary,
    EarlyMulticlass,
    GlobalPoly,
    GlobalExp,
    Prm,
    CertifyOnly,
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    SyntheticOrthant {
        n: usize,
        d: usize,
        /// Defaults to the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default = "default_true")]
        include_antipodal: bool,
    },
    SyntheticMulticlass {
        n: usize,
        d: usize,
        classes: usize,
        #[serde(default)]
        seed: Option<u64>,
    },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        count: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Cifar10 {
        path: PathBuf,
        count: usize,
        #[serde(default = "default_true")]
        normalize: bool,
    },
    Csv {
        path: PathBuf,
        /// None for binary labels.
        #[serde(default)]
        classes: Option<usize>,
    },
}

/// κ as a number or the string "auto".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KappaSpec {
    Value(f64),
    Keyword(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub m: usize,
    pub kappa: KappaSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        eta: f64,
    },
    LossInverse {
        eta0: f64,
        c: f64,
    },
    TwoStagePoly {
        eta0: f64,
        /// Defaults to the largest admissible value 1/(6(1+2η0)²+2).
        #[serde(default)]
        c: Option<f64>,
        c_prime: f64,
        r: f64,
        #[serde(default)]
        force_stage2_at: Option<u64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchSpec {
    pub size: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub replacement: bool,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    /// Absent means full-batch GD.
    #[serde(default)]
    pub batch: Option<BatchSpec>,
    #[serde(default)]
    pub trained_layers: TrainedLayers,
    #[serde(default = "one")]
    pub record_every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrmSpec {
    pub d: usize,
    pub m: usize,
    #[serde(rename = "M")]
    pub big_m: usize,
    pub kappa: f64,
    /// Defaults to the largest admissible learning rate.
    #[serde(default)]
    pub eta: Option<f64>,
    /// Defaults to T* + 1.
    #[serde(default)]
    pub steps: Option<usize>,
}

fn default_delta() -> f64 {
    0.01
}

fn default_hessian_points() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    /// quadratic | exp | logistic | hinge
    #[serde(default)]
    pub loss: Option<String>,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub train: Option<TrainSpec>,
    #[serde(default)]
    pub prm: Option<PrmSpec>,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub certify: bool,
    /// Trajectory points at which dense Hessians are checked.
    #[serde(default = "default_hessian_points")]
    pub hessian_points: usize,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", p.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, field: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("`{field}` is required for kind {:?}", self.kind)))
            }
        };
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("`delta` must lie in (0, 1), got {}", self.delta)));
        }
        if let Some(ModelSpec { kappa: KappaSpec::Keyword(k), .. }) = &self.model {
            if k != "auto" {
                return Err(Error::Config(format!("`model.kappa` must be a number or \"auto\", got \"{k}\"")));
            }
        }
        if let Some(l) = &self.loss {
            crate::losses::LossFamily::from_key(l)?;
        }
        match self.kind {
            ExperimentKind::Prm => need(self.prm.is_some(), "prm"),
            ExperimentKind::CertifyOnly => need(self.dataset.is_some(), "dataset"),
            _ => {
                need(self.dataset.is_some(), "dataset")?;
                need(self.model.is_some(), "model")?;
                need(self.loss.is_some(), "loss")?;
                need(self.schedule.is_some(), "schedule")?;
                need(self.train.is_some(), "train")
            }
        }
    }
}

/// Base config plus axes whose cross product defines the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base: serde_json::Value,
    pub axes: Vec<SweepAxis>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted path into the base config, e.g. `model.m` or `schedule.eta`.
    pub param: String,
    pub values: Vec<serde_json::Value>,
}

pub const MAX_SWEEP_SIZE: usize = 10_000;

impl SweepSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let p = path.as_ref();
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
    }

    pub fn size(&self) -> usize {
        self.axes.iter().map(|a| a.values.len()).product()
    }

    /// Every point of the cross product as (axis values, parsed config).
    pub fn expand(&self) -> Result<Vec<(Vec<serde_json::Value>, ExperimentConfig)>> {
        let size = self.size();
        if size > MAX_SWEEP_SIZE {
            return Err(Error::Config(format!("sweep has {size} points, limit is {MAX_SWEEP_SIZE}")));
        }
        let mut out = Vec::with_capacity(size);
        for idx in 0..size {
            let mut rem = idx;
            let mut value = self.base.clone();
            let mut picked = Vec::with_capacity(self.axes.len());
            for axis in self.axes.iter().rev() {
                let v = &axis.values[rem % axis.values.len()];
                rem /= axis.values.len();
                set_path(&mut value, &axis.param, v.clone())?;
                picked.push(v.clone());
            }
            picked.reverse();
            let cfg: ExperimentConfig = serde_json::from_value(value).map_err(|e| Error::Config(format!("sweep point {idx}: {e}")))?;
            cfg.validate()?;
            out.push((picked, cfg));
        }
        Ok(out)
    }
}

fn set_path(root: &mut serde_json::Value, path: &str, v: serde_json::Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (q, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("sweep path `{path}`: `{part}` is not inside an object")))?;
        if q + 1 == parts.len() {
            obj.insert(part.to_string(), v);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| serde_json::Value::Object(Default::default()));
    }
    Err(Error::Config(format!("empty sweep path `{path}`")))
}
