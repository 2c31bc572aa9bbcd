//! Experiment configuration, read from TOML.
//!
//! Every field has a default, so an empty file is a valid configuration for
//! the 8-mode ring experiment. See the guide's configuration chapter for the
//! full schema.

use crate::data::{self, Dataset};
use crate::diffproc::{SamplerSettings, SdeSpec};
use crate::ndiff::{Activation, NetSpec};
use crate::objectives::WeightingKind;
use crate::random::stream;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub beta: f64,
    pub data: DataConfig,
    pub sde: SdeConfig,
    pub nets: NetsConfig,
    pub optimizer: OptimizerConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 2,
            beta: 0.01,
            data: DataConfig::default(),
            sde: SdeConfig::default(),
            nets: NetsConfig::default(),
            optimizer: OptimizerConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    GmmRing,
    Checkerboard,
    Gaussian,
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub n_train: usize,
    pub n_test: usize,
    pub modes: usize,
    pub radius: f64,
    pub std: f64,
    pub squares: usize,
    /// Dimension of the `gaussian` source.
    pub dim: usize,
    /// IDX image file for the `idx` source.
    pub path: Option<PathBuf>,
    /// Side length images are resampled to.
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::GmmRing,
            n_train: 8192,
            n_test: 512,
            modes: 8,
            radius: 2.0,
            std: 0.2,
            squares: 4,
            dim: 2,
            path: None,
            image_size: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeConfig {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
}

impl Default for SdeConfig {
    fn default() -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_end: 1.0,
        }
    }
}

/// Hidden layout of one network; input and output widths follow from the
/// data and latent dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_features: usize,
}

impl NetConfig {
    fn with_time(time_features: usize) -> Self {
        Self {
            hidden: vec![64, 64],
            activation: Activation::Gelu,
            time_features,
        }
    }

    pub fn spec(&self, input: usize, output: usize) -> Result<NetSpec> {
        NetSpec::dense(input, &self.hidden, output, self.activation, self.time_features)
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::with_time(4)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetsConfig {
    pub prior: NetConfig,
    pub encoder: NetConfig,
    pub corrector: NetConfig,
    /// Encoder shared by the β-VAE and DiffDecoder baselines.
    pub baseline_encoder: NetConfig,
    pub vae_decoder: NetConfig,
    /// Conditional score network of the DiffDecoder baseline.
    pub conditional: NetConfig,
}

impl Default for NetsConfig {
    fn default() -> Self {
        Self {
            prior: NetConfig::default(),
            encoder: NetConfig::default(),
            corrector: NetConfig::default(),
            baseline_encoder: NetConfig::with_time(0),
            vae_decoder: NetConfig::with_time(0),
            conditional: NetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub ema_rate: f64,
    pub n_iters: usize,
    pub batch_size: usize,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Per-component overrides of `n_iters`.
    pub prior_iters: Option<usize>,
    pub encoder_iters: Option<usize>,
    pub corrector_iters: Option<usize>,
    pub vae_iters: Option<usize>,
    pub diffdecoder_iters: Option<usize>,
    pub prior_weighting: WeightingKind,
    pub diffdecoder_weighting: WeightingKind,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            ema_rate: 0.999,
            n_iters: 8000,
            batch_size: 256,
            grad_clip: 1.0,
            prior_iters: None,
            encoder_iters: None,
            corrector_iters: None,
            vae_iters: None,
            diffdecoder_iters: None,
            prior_weighting: WeightingKind::Simple,
            diffdecoder_weighting: WeightingKind::Simple,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_steps: usize,
    pub t_eps: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        let s = SamplerSettings::default();
        Self {
            n_steps: s.n_steps,
            t_eps: s.t_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub mean_latent: bool,
    /// Worker threads for reconstruction; results do not depend on it.
    pub threads: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1234,
            mean_latent: false,
            threads: 4,
        }
    }
}

/// Training component, also used to derive independent random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Prior,
    Encoder,
    Corrector,
    Vae,
    DiffDecoder,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::Prior => "prior",
            Component::Encoder => "encoder",
            Component::Corrector => "corrector",
            Component::Vae => "vae",
            Component::DiffDecoder => "diffdecoder",
        }
    }

    fn stream_id(self) -> u64 {
        match self {
            Component::Prior => 1,
            Component::Encoder => 2,
            Component::Corrector => 3,
            Component::Vae => 4,
            Component::DiffDecoder => 5,
        }
    }
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "prior" => Component::Prior,
            "encoder" => Component::Encoder,
            "corrector" => Component::Corrector,
            "vae" => Component::Vae,
            "diffdecoder" => Component::DiffDecoder,
            other => return Err(Error::Format(format!("unknown component kind '{other}'"))),
        })
    }
}

const DATA_STREAM: u64 = 100;

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return bad(format!("beta must be >= 0, got {}", self.beta));
        }
        if self.latent_dim == 0 {
            return bad("latent_dim must be at least 1".into());
        }
        let o = &self.optimizer;
        if o.batch_size == 0 || o.n_iters == 0 {
            return bad("batch_size and n_iters must be at least 1".into());
        }
        for (name, v) in [
            ("prior_iters", o.prior_iters),
            ("encoder_iters", o.encoder_iters),
            ("corrector_iters", o.corrector_iters),
            ("vae_iters", o.vae_iters),
            ("diffdecoder_iters", o.diffdecoder_iters),
        ] {
            if v == Some(0) {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if !(o.learning_rate > 0.0) || !(0.0..1.0).contains(&o.ema_rate) || !(o.grad_clip >= 0.0) {
            return bad(format!(
                "need learning_rate > 0, 0 <= ema_rate < 1, grad_clip >= 0; got {}, {}, {}",
                o.learning_rate, o.ema_rate, o.grad_clip
            ));
        }
        let d = &self.data;
        if d.n_train == 0 || d.n_test == 0 {
            return bad("n_train and n_test must be at least 1".into());
        }
        if d.source == DataSource::Idx && d.path.is_none() {
            return bad("the idx source needs data.path".into());
        }
        for (name, net) in [
            ("prior", &self.nets.prior),
            ("encoder", &self.nets.encoder),
            ("corrector", &self.nets.corrector),
            ("conditional", &self.nets.conditional),
        ] {
            if net.time_features == 0 && name != "encoder" {
                return bad(format!("nets.{name} needs time_features >= 1"));
            }
            if net.hidden.contains(&0) {
                return bad(format!("nets.{name} has a zero-width layer"));
            }
        }
        if self.nets.vae_decoder.time_features != 0 || self.nets.baseline_encoder.time_features != 0 {
            return bad("baseline encoder and VAE decoder take no time input".into());
        }
        self.sde_spec(2)?;
        self.sampler_settings().validate(&self.sde_spec(2)?)?;
        Ok(())
    }

    pub fn sde_spec(&self, dim: usize) -> Result<SdeSpec> {
        SdeSpec::new(self.sde.beta_min, self.sde.beta_max, self.sde.t_end, dim)
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn sampler_settings(&self) -> SamplerSettings {
        SamplerSettings {
            n_steps: self.sampler.n_steps,
            t_eps: self.sampler.t_eps,
        }
    }

    pub fn iters(&self, c: Component) -> usize {
        let o = &self.optimizer;
        match c {
            Component::Prior => o.prior_iters,
            Component::Encoder => o.encoder_iters,
            Component::Corrector => o.corrector_iters,
            Component::Vae => o.vae_iters,
            Component::DiffDecoder => o.diffdecoder_iters,
        }
        .unwrap_or(o.n_iters)
    }

    /// Random stream owned by one training component.
    pub fn component_stream(&self, c: Component) -> crate::random::Stream {
        stream(self.seed, c.stream_id())
    }

    /// Train and test sets, generated from the seed (or read from disk).
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        let d = &self.data;
        let n = d.n_train + d.n_test;
        let mut rng = stream(self.seed, DATA_STREAM);
        let ds = match d.source {
            DataSource::GmmRing => data::gmm_ring(n, d.modes, d.radius, d.std, &mut rng),
            DataSource::Checkerboard => data::checkerboard(n, d.squares, &mut rng),
            DataSource::Gaussian => data::gaussian(n, d.dim, &mut rng),
            DataSource::Idx => {
                let path = d.path.as_ref().expect("validated");
                let full = data::idx_load(path)?;
                let full = match full.image_shape {
                    Some((h, w)) if h != d.image_size || w != d.image_size => {
                        data::resize_images(&full, d.image_size, d.image_size)?
                    }
                    _ => full,
                };
                if full.len() < n {
                    return Err(Error::Config(format!(
                        "{} holds {} samples, fewer than n_train + n_test = {n}",
                        path.display(),
                        full.len()
                    )));
                }
                let mut sub = full.clone();
                sub.samples = full.samples.slice(ndarray::s![..n, ..]).to_owned();
                Ok(sub)
            }
        }
        .map_err(|e| match e {
            Error::Config(_) | Error::Io(_) | Error::Format(_) => e,
            other => Error::Config(other.to_string()),
        })?;
        ds.split(d.n_test)
    }
}
