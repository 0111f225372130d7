//! Experiment configuration, read from TOML.
//!
//! ```toml
//! schema_version = 1
//! methods = ["cogc", "qfl"]
//! seeds = [0, 1, 2]
//! clients = 10
//! stragglers = 5
//!
//! [channel]
//! rate = 0.2
//! snr_a = 5.0
//! sigma2_a = 0.5
//! sigma2_b = 0.02
//! mode = "linearized"
//!
//! [dataset]
//! samples_per_client = 600
//! source = { kind = "synthetic-blobs", dim = 32 }
//! partition = { kind = "label-skew", classes_per_client = 1 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::channel::{ChannelConfig, OutageMode};
use crate::error::{Error, Result};
use crate::fl::{DataSource, DatasetSpec, ModelKind, Partition, SgdConfig};
use crate::protocols::Method;
use crate::quantize::QuantizerConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerSection {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default = "default_bits")]
    pub bits: u32,
    #[serde(default)]
    pub lower: f64,
    #[serde(default = "default_upper")]
    pub upper: f64,
}

impl Default for QuantizerSection {
    fn default() -> Self {
        Self {
            enabled: true,
            bits: default_bits(),
            lower: 0.0,
            upper: default_upper(),
        }
    }
}

impl QuantizerSection {
    pub fn quantizer(&self) -> Option<QuantizerConfig> {
        self.enabled.then_some(QuantizerConfig {
            bits: self.bits,
            lower: self.lower,
            upper: self.upper,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_clients")]
    pub clients: usize,
    #[serde(default = "default_stragglers")]
    pub stragglers: usize,
    /// Wall-round budget `T`.
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    /// Local iterations `I`.
    #[serde(default = "default_local_steps")]
    pub local_steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default)]
    pub quantizer: QuantizerSection,
    #[serde(default = "default_channel")]
    pub channel: ChannelConfig,
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

fn yes() -> bool {
    true
}
fn default_bits() -> u32 {
    8
}
fn default_upper() -> f64 {
    1.0
}
fn default_run_id() -> String {
    "run".into()
}
fn default_methods() -> Vec<Method> {
    vec![Method::Cogc, Method::Qfl, Method::Nonblind, Method::Blind]
}
fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}
fn default_clients() -> usize {
    10
}
fn default_stragglers() -> usize {
    5
}
fn default_rounds() -> usize {
    20
}
fn default_local_steps() -> usize {
    5
}
fn default_batch() -> usize {
    1024
}
fn default_eta() -> f64 {
    0.01
}
fn default_channel() -> ChannelConfig {
    ChannelConfig {
        rate: 0.2,
        snr_a: 5.0,
        snr_b: None,
        sigma2_a: 0.5,
        sigma2_b: 0.02,
        mode: OutageMode::Linearized,
    }
}
fn default_output() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_id: default_run_id(),
            methods: default_methods(),
            seeds: default_seeds(),
            clients: default_clients(),
            stragglers: default_stragglers(),
            rounds: default_rounds(),
            local_steps: default_local_steps(),
            batch: default_batch(),
            eta: default_eta(),
            quantizer: QuantizerSection::default(),
            channel: default_channel(),
            dataset: DatasetSpec::default(),
            model: ModelKind::default(),
            output_dir: default_output(),
        }
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::config(
            field,
            format!("must be positive and finite, got {v}"),
        ))
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .filter(|_| e.message().contains("field"))
                .unwrap_or("<document>")
                .to_string();
            Error::config(field, e.to_string().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("<file>", format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            steps: self.local_steps,
            eta: self.eta,
            batch: self.batch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!(
                    "unsupported version {}, expected {SCHEMA_VERSION}",
                    self.schema_version
                ),
            ));
        }
        if self.run_id.is_empty() || self.run_id.contains([',', '\n', '"']) {
            return Err(Error::config(
                "run_id",
                "must be non-empty without commas, quotes or newlines",
            ));
        }
        if self.methods.is_empty() {
            return Err(Error::config("methods", "at least one method required"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "at least one seed required"));
        }
        if self.clients == 0 || self.clients > 64 {
            return Err(Error::config(
                "clients",
                format!("must lie in 1..=64, got {}", self.clients),
            ));
        }
        if self.stragglers >= self.clients {
            return Err(Error::config(
                "stragglers",
                format!(
                    "need s < M, got s = {} with M = {}",
                    self.stragglers, self.clients
                ),
            ));
        }
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be positive"));
        }
        if self.local_steps == 0 {
            return Err(Error::config("local_steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("batch", "must be positive"));
        }
        positive("eta", self.eta)?;
        if self.quantizer.enabled {
            let q = self.quantizer.quantizer().unwrap();
            if !(1..=crate::quantize::MAX_BITS).contains(&q.bits) {
                return Err(Error::config(
                    "quantizer.bits",
                    format!("must lie in 1..=31, got {}", q.bits),
                ));
            }
            if !(q.lower >= 0.0 && q.upper > q.lower && q.upper.is_finite()) {
                return Err(Error::config(
                    "quantizer.upper",
                    format!("need upper > lower >= 0, got [{}, {}]", q.lower, q.upper),
                ));
            }
        }
        let ch = &self.channel;
        positive("channel.rate", ch.rate)?;
        if !(ch.snr_a > 0.0) {
            return Err(Error::config(
                "channel.snr_a",
                format!("must be positive, got {}", ch.snr_a),
            ));
        }
        if let Some(b) = ch.snr_b {
            if !(b > 0.0) {
                return Err(Error::config(
                    "channel.snr_b",
                    format!("must be positive, got {b}"),
                ));
            }
        }
        positive("channel.sigma2_a", ch.sigma2_a)?;
        positive("channel.sigma2_b", ch.sigma2_b)?;
        let ds = &self.dataset;
        if ds.classes < 2 {
            return Err(Error::config(
                "dataset.classes",
                "need at least two classes",
            ));
        }
        if ds.samples_per_client == 0 {
            return Err(Error::config(
                "dataset.samples_per_client",
                "must be positive",
            ));
        }
        if let DataSource::SyntheticBlobs {
            dim,
            separation,
            offset,
            noise,
            test_samples,
        } = &ds.source
        {
            if *dim == 0 {
                return Err(Error::config("dataset.dim", "must be positive"));
            }
            if !(*separation >= 0.0) {
                return Err(Error::config("dataset.separation", "must be non-negative"));
            }
            if !(*offset >= 0.0 && offset.is_finite()) {
                return Err(Error::config("dataset.offset", "must be non-negative"));
            }
            positive("dataset.noise", *noise)?;
            if *test_samples == 0 {
                return Err(Error::config("dataset.test_samples", "must be positive"));
            }
        }
        if let Partition::LabelSkew {
            classes_per_client: k,
        } = ds.partition
        {
            if k == 0 || k > ds.classes || !(self.clients * k).is_multiple_of(ds.classes) {
                return Err(Error::config(
                    "dataset.partition.classes_per_client",
                    format!(
                        "M * k = {} must be a positive multiple of {} classes",
                        self.clients * k,
                        ds.classes
                    ),
                ));
            }
        }
        if let ModelKind::Mlp { hidden: 0 } = self.model {
            return Err(Error::config("model.hidden", "must be positive"));
        }
        Ok(())
    }
}
