//! Run configuration: one TOML document with a section per pipeline stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::NormGrad;
use crate::data::{validate_factors, FactorSpec, GeneratorConfig};
use crate::error::{Error, Result};
use crate::logic::AggregatorConfig;
use crate::metrics::DEFAULT_MI_BINS;
use crate::reasoner::DEFAULT_QUANTILE;
use crate::rules::{Normalization, RuleWeights};
use crate::train::TrainConfig;
use crate::vae::ArchitectureConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Existing dataset directory (with `manifest.csv`). When unset, the
    /// dataset lives in `<out_dir>/data` and is produced by `gen-data`.
    pub dir: Option<PathBuf>,
    pub generator: GeneratorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorDims {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RulesSection {
    pub weights: RuleWeights,
    pub aggregator: AggregatorConfig,
    pub normalization: Normalization,
    pub norm_grad: NormGrad,
    /// Latent dims per factor; overrides the dims declared by the dataset.
    pub factors: Vec<FactorDims>,
}

impl Default for RulesSection {
    fn default() -> Self {
        RulesSection {
            weights: RuleWeights::default(),
            aggregator: AggregatorConfig::default(),
            normalization: Normalization::Joint,
            norm_grad: NormGrad::FrozenStats,
            factors: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReasonerSection {
    /// Clusters per factor; defaults to the number of observed values.
    pub k: Option<usize>,
    pub quantile: f64,
}

impl Default for ReasonerSection {
    fn default() -> Self {
        ReasonerSection { k: None, quantile: DEFAULT_QUANTILE }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub bins: usize,
    /// Also write an SVG scatter of each factor's first designated dim
    /// against the other factor's.
    pub scatter: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { bins: DEFAULT_MI_BINS, scatter: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    pub model: ArchitectureConfig,
    pub rules: RulesSection,
    pub training: TrainConfig,
    pub reasoner: ReasonerSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable config")
    }

    /// Hex sha256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| self.out_dir().join("data"))
    }

    /// Checks everything that does not need files on disk.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        self.rules.aggregator.validate()?;
        let g = &self.data.generator;
        g.validate()?;
        if self.data.dir.is_none() {
            if (g.height, g.width) != (self.model.height, self.model.width) || self.model.channels != 1 {
                return Err(Error::Config(format!(
                    "generator draws {}x{}x1 images but the model expects {}x{}x{}",
                    g.height, g.width, self.model.height, self.model.width, self.model.channels
                )));
            }
            validate_factors(&self.apply_dims(g.factor_specs())?, Some(self.model.latent_size))?;
        }
        if !(0.0..=1.0).contains(&self.reasoner.quantile) {
            return Err(Error::Config(format!("reasoner quantile {} outside [0, 1]", self.reasoner.quantile)));
        }
        if self.reasoner.k == Some(0) {
            return Err(Error::Config("reasoner k must be >= 1".into()));
        }
        if self.eval.bins < 2 {
            return Err(Error::Config("eval bins must be >= 2".into()));
        }
        Ok(())
    }

    /// Applies `rules.factors` dim overrides to declared factors.
    pub fn apply_dims(&self, mut factors: Vec<FactorSpec>) -> Result<Vec<FactorSpec>> {
        for o in &self.rules.factors {
            let f = factors
                .iter_mut()
                .find(|f| f.name == o.name)
                .ok_or_else(|| Error::Config(format!("rules name unknown factor `{}`", o.name)))?;
            f.dims = o.dims.clone();
        }
        Ok(factors)
    }
}
