//! The full comparison: every component trained from one config, then
//! evaluated on the held-out split.

use super::config::ExperimentConfig;
use super::eval::{evaluate, Method, MetricRow};
use super::train::{
    train_corrector, train_diffdecoder, train_encoder, train_prior, train_vae, DiffDecoder,
    Trained, Vae,
};
use crate::data::Dataset;
use crate::models::{ConditionalNet, LatentMode, ScoreModel, TimeEncoder};
use crate::Result;

/// Every trained model of one run.
#[derive(Clone, Debug)]
pub struct Suite {
    pub prior: Trained<ScoreModel>,
    pub encoder: Trained<TimeEncoder>,
    pub corrector: Trained<ConditionalNet>,
    pub vae: Trained<Vae>,
    pub diffdecoder: Trained<DiffDecoder>,
    /// The DiffDecoder retrained without the KL term.
    pub diffdecoder_beta0: Trained<DiffDecoder>,
}

impl Suite {
    pub fn train(cfg: &ExperimentConfig, train: &Dataset) -> Result<Self> {
        let prior = train_prior(cfg, train)?;
        let encoder = train_encoder(cfg, train, &prior.model)?;
        let corrector = train_corrector(cfg, train, &prior.model, &encoder.model)?;
        let vae = train_vae(cfg, train)?;
        let diffdecoder = train_diffdecoder(cfg, train)?;
        let mut zero = cfg.clone();
        zero.beta = 0.0;
        let diffdecoder_beta0 = train_diffdecoder(&zero, train)?;
        Ok(Self {
            prior,
            encoder,
            corrector,
            vae,
            diffdecoder,
            diffdecoder_beta0,
        })
    }

    /// Rows in the order VAE, ScoreVAE, ScoreVAE+, DiffDecoder (β), DiffDecoder (β=0).
    pub fn methods(&self, beta: f64) -> Vec<(String, Method<'_>)> {
        let score = |corrector| Method::ScoreVae {
            prior: &self.prior.model,
            encoder: &self.encoder.model,
            corrector,
        };
        vec![
            ("VAE".into(), Method::Vae(&self.vae.model)),
            ("ScoreVAE".into(), score(None)),
            ("ScoreVAE+".into(), score(Some(&self.corrector.model))),
            (format!("DiffDecoder (β={beta})"), Method::DiffDecoder(&self.diffdecoder.model)),
            ("DiffDecoder (β=0)".into(), Method::DiffDecoder(&self.diffdecoder_beta0.model)),
        ]
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, test: &Dataset) -> Result<Vec<MetricRow>> {
        evaluate_methods(cfg, test, &self.methods(cfg.beta))
    }
}

/// L2 rows for the given methods under the config's sampler and eval seed.
pub fn evaluate_methods(
    cfg: &ExperimentConfig,
    test: &Dataset,
    methods: &[(String, Method<'_>)],
) -> Result<Vec<MetricRow>> {
    let spec = cfg.sde_spec(test.dim())?;
    let mode = if cfg.eval.mean_latent { LatentMode::Mean } else { LatentMode::Sample };
    methods
        .iter()
        .map(|(name, m)| {
            evaluate(
                name,
                m,
                &spec,
                &test.samples,
                cfg.sampler_settings(),
                mode,
                cfg.eval.seed,
                cfg.eval.threads,
            )
            .map(|(row, _)| row)
        })
        .collect()
}
