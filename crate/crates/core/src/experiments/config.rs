//! TOML experiment configuration. Every field has a default, so an empty
//! document is valid; `rbdls print-config` prints the full schema with defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::random_field::FourierFieldSpec;
use crate::{Error, Result};

/// Number of samples `S` as a function of the space size `M`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingRule {
    Linear,
    ThreeM,
    Quadratic,
    Fixed(usize),
}

impl SamplingRule {
    pub fn samples(self, m: usize) -> usize {
        match self {
            SamplingRule::Linear => m,
            SamplingRule::ThreeM => 3 * m,
            SamplingRule::Quadratic => m * m,
            SamplingRule::Fixed(s) => s,
        }
    }
}

impl fmt::Display for SamplingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingRule::Linear => f.write_str("M"),
            SamplingRule::ThreeM => f.write_str("3M"),
            SamplingRule::Quadratic => f.write_str("M2"),
            SamplingRule::Fixed(s) => write!(f, "{s}"),
        }
    }
}

impl FromStr for SamplingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" => Ok(SamplingRule::Linear),
            "3M" => Ok(SamplingRule::ThreeM),
            "M2" | "M^2" => Ok(SamplingRule::Quadratic),
            other => match other.parse::<usize>() {
                Ok(n) if n > 0 => Ok(SamplingRule::Fixed(n)),
                _ => Err(Error::Config(format!("unknown sampling rule {other:?}; use M, 3M, M2 or a positive integer"))),
            },
        }
    }
}

impl Serialize for SamplingRule {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for SamplingRule {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Text(String),
            Count(usize),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
            Raw::Count(0) => Err(serde::de::Error::custom("fixed sample count must be positive")),
            Raw::Count(n) => Ok(SamplingRule::Fixed(n)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightSource {
    Regressed,
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    pub source: WeightSource,
    /// Used when `source = "fixed"`.
    pub fixed: Vec<f64>,
    pub regression_degree: usize,
    /// Required margin `min a(y) >= fraction * min a_0` on the rescaled polyellipse.
    pub coercivity_fraction: f64,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self {
            source: WeightSource::Regressed,
            fixed: vec![0.68, 0.66, 0.98, 1.37, 0.49],
            regression_degree: 8,
            coercivity_fraction: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DlsConfig {
    pub m_sweep: Vec<usize>,
    /// Rules swept by `example1`.
    pub rules: Vec<SamplingRule>,
    /// Rule used by `example2`.
    pub example2_rule: SamplingRule,
}

impl Default for DlsConfig {
    fn default() -> Self {
        Self {
            m_sweep: vec![5, 10, 20, 40, 70, 120],
            rules: vec![SamplingRule::Linear, SamplingRule::ThreeM, SamplingRule::Quadratic],
            example2_rule: SamplingRule::ThreeM,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RbConfig {
    pub eps_tol: f64,
    pub k_max: usize,
    pub s_train: usize,
}

impl Default for RbConfig {
    fn default() -> Self {
        Self {
            eps_tol: 1e-5,
            k_max: 30,
            s_train: 1000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub train: u64,
    pub sample: u64,
    pub test: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            train: 1,
            sample: 2,
            test: 3,
        }
    }
}

impl Seeds {
    /// `train = base`, `sample = base + 1`, `test = base + 2`.
    pub fn from_base(base: u64) -> Self {
        Self {
            train: base,
            sample: base.wrapping_add(1),
            test: base.wrapping_add(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_per_side: usize,
    pub s_test: usize,
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    pub output_dir: PathBuf,
    pub field: FourierFieldSpec,
    pub weights: WeightsConfig,
    pub dls: DlsConfig,
    pub rb: RbConfig,
    pub seeds: Seeds,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n_per_side: 32,
            s_test: 2000,
            workers: 0,
            output_dir: PathBuf::from("results"),
            field: FourierFieldSpec::default(),
            weights: WeightsConfig::default(),
            dls: DlsConfig::default(),
            rb: RbConfig::default(),
            seeds: Seeds::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_per_side", self.n_per_side),
            ("s_test", self.s_test),
            ("rb.k_max", self.rb.k_max),
            ("rb.s_train", self.rb.s_train),
            ("weights.regression_degree", self.weights.regression_degree),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.n_per_side < 2 {
            return Err(Error::Config("n_per_side must be at least 2".into()));
        }
        self.field.validate()?;
        if self.dls.m_sweep.is_empty() || self.dls.m_sweep.contains(&0) {
            return Err(Error::Config("dls.m_sweep must be a nonempty list of positive sizes".into()));
        }
        if self.dls.rules.is_empty() {
            return Err(Error::Config("dls.rules must not be empty".into()));
        }
        if !(self.rb.eps_tol > 0.0) {
            return Err(Error::Config("rb.eps_tol must be positive".into()));
        }
        let f = self.weights.coercivity_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("weights.coercivity_fraction must lie in (0, 1), got {f}")));
        }
        if self.weights.source == WeightSource::Fixed {
            if self.weights.fixed.len() != self.field.n_terms {
                return Err(Error::Config(format!(
                    "weights.fixed has {} entries but the field has {} parameters",
                    self.weights.fixed.len(),
                    self.field.n_terms
                )));
            }
            if let Some(w) = self.weights.fixed.iter().find(|w| !(**w > 0.0)) {
                return Err(Error::Config(format!("fixed weights must be positive, got {w}")));
            }
        }
        Ok(())
    }
}
