//! Training loops. Each returns the EMA weights as a model, the matching
//! checkpoint, and the per-iteration loss curve.
//!
//! The returned model is rebuilt from the checkpoint, so what is evaluated
//! in-process is exactly what a later `load` produces.

use super::checkpoint::Checkpoint;
use super::config::{Component, ExperimentConfig};
use super::optim::{clip_global_norm, Adam, Ema};
use crate::data::Dataset;
use crate::diffproc::SdeSpec;
use crate::models::{ConditionalNet, LatentMode, OutputScale, ScoreModel, TimeEncoder, VaeDecoder};
use crate::ndiff::{Mat, Mlp};
use crate::objectives::{
    cde_loss, corrector_loss, dsm_loss, scorevae_loss, vae_beta_elbo, Draws, Loss, T_EPS,
};
use crate::random::{standard_normal, Stream};
use crate::{Error, Result};
use rand::Rng;

/// One row of a loss curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub iteration: usize,
    pub total: f64,
    pub dsm_term: f64,
    pub kl_term: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub checkpoint: Checkpoint,
    pub curve: Vec<LossRow>,
}

/// The VAE baseline's encoder and decoder.
#[derive(Clone, Debug)]
pub struct Vae {
    pub encoder: TimeEncoder,
    pub decoder: VaeDecoder,
}

/// The DiffDecoder baseline: a conditional score network and its encoder.
#[derive(Clone, Debug)]
pub struct DiffDecoder {
    pub net: ConditionalNet,
    pub encoder: TimeEncoder,
    /// Whether latents are drawn from the encoder or set to its mean.
    pub latent: LatentMode,
}

fn random_batch(data: &Dataset, n: usize, rng: &mut Stream) -> Mat {
    let len = data.len();
    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..len)).collect();
    Mat::from_shape_fn((n, data.dim()), |(i, j)| data.samples[[idx[i], j]])
}

/// Adam + clipping + EMA over a batch loss.
fn optimize(
    cfg: &ExperimentConfig,
    component: Component,
    data: &Dataset,
    mut params: Vec<Mat>,
    rng: &mut Stream,
    mut loss_fn: impl FnMut(&[Mat], &Mat, &mut Stream) -> Result<Loss>,
) -> Result<(Vec<Mat>, Vec<LossRow>)> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let o = &cfg.optimizer;
    let n_iters = cfg.iters(component);
    let mut adam = Adam::new(&params, o.learning_rate);
    let mut ema = Ema::new(&params, o.ema_rate);
    let mut curve = Vec::with_capacity(n_iters);
    for iteration in 0..n_iters {
        let batch = random_batch(data, o.batch_size, rng);
        let Loss { report, mut grads } = loss_fn(&params, &batch, rng).map_err(|e| match e {
            Error::NonFinite { context } => Error::Divergence {
                iteration,
                detail: format!("{} loss: non-finite {context}", component.name()),
            },
            other => other,
        })?;
        let grad_norm = clip_global_norm(&mut grads, o.grad_clip);
        adam.step(&mut params, &grads);
        if params.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::Divergence {
                iteration,
                detail: format!("{} parameters became non-finite", component.name()),
            });
        }
        ema.update(&params);
        curve.push(LossRow {
            iteration,
            total: report.total,
            dsm_term: report.dsm_term,
            kl_term: report.kl_term,
            grad_norm,
        });
    }
    Ok((ema.into_params(), curve))
}

fn with_params(net: &Mlp, params: &[Mat]) -> Result<Mlp> {
    Mlp::from_params(net.spec().clone(), params.to_vec())
}

fn check_dim(what: &str, expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Config(format!(
            "{what}: expected dimension {expected}, got {got}"
        )));
    }
    Ok(())
}

fn checkpoint(
    cfg: &ExperimentConfig,
    component: Component,
    spec: &SdeSpec,
    nets: Vec<(&str, Mlp)>,
) -> Checkpoint {
    Checkpoint {
        component,
        seed: cfg.seed,
        iteration: cfg.iters(component),
        data_dim: spec.dim,
        latent_dim: cfg.latent_dim,
        sde: *spec,
        nets: nets.into_iter().map(|(n, m)| (n.to_string(), m)).collect(),
    }
    .round_to_storage()
}

/// Every score-valued network divides its output by `σ(t)`.
pub fn score_output(spec: &SdeSpec) -> OutputScale {
    OutputScale::InverseSigma(*spec)
}

pub fn prior_from(ckpt: &Checkpoint) -> Result<ScoreModel> {
    ckpt.expect_component(Component::Prior)?;
    Ok(ScoreModel::new(ckpt.net("prior")?.clone())?.with_output(score_output(&ckpt.sde)))
}

pub fn encoder_from(ckpt: &Checkpoint) -> Result<TimeEncoder> {
    ckpt.expect_component(Component::Encoder)?;
    TimeEncoder::new(ckpt.net("encoder")?.clone())
}

pub fn corrector_from(ckpt: &Checkpoint) -> Result<ConditionalNet> {
    ckpt.expect_component(Component::Corrector)?;
    Ok(ConditionalNet::new(ckpt.net("corrector")?.clone(), ckpt.data_dim)?
        .with_output(score_output(&ckpt.sde)))
}

pub fn vae_from(ckpt: &Checkpoint) -> Result<Vae> {
    ckpt.expect_component(Component::Vae)?;
    Ok(Vae {
        encoder: TimeEncoder::new(ckpt.net("encoder")?.clone())?,
        decoder: VaeDecoder::new(ckpt.net("decoder")?.clone())?,
    })
}

/// Latents are sampled when the checkpoint was trained with a KL term.
pub fn diffdecoder_from(ckpt: &Checkpoint, beta: f64) -> Result<DiffDecoder> {
    ckpt.expect_component(Component::DiffDecoder)?;
    Ok(DiffDecoder {
        net: ConditionalNet::new(ckpt.net("score")?.clone(), ckpt.data_dim)?
            .with_output(score_output(&ckpt.sde)),
        encoder: TimeEncoder::new(ckpt.net("encoder")?.clone())?,
        latent: diffdecoder_latent(beta),
    })
}

/// With β = 0 the baseline is a deterministic autoencoder.
pub fn diffdecoder_latent(beta: f64) -> LatentMode {
    if beta > 0.0 {
        LatentMode::Sample
    } else {
        LatentMode::Mean
    }
}

/// Unconditional score model by denoising score matching.
pub fn train_prior(cfg: &ExperimentConfig, train: &Dataset) -> Result<Trained<ScoreModel>> {
    let spec = cfg.sde_spec(train.dim())?;
    let mut rng = cfg.component_stream(Component::Prior);
    let d = train.dim();
    let init = ScoreModel::init(cfg.nets.prior.spec(d, d)?, &mut rng)?;
    let weighting = cfg.optimizer.prior_weighting;
    let (params, curve) = optimize(cfg, Component::Prior, train, init.net.params().to_vec(), &mut rng, |p, x0, rng| {
        let model = ScoreModel::new(with_params(&init.net, p)?)?.with_output(score_output(&spec));
        let draws = Draws::sample(rng, x0.nrows(), 0, &spec, T_EPS);
        dsm_loss(&model, x0, &spec, weighting, &draws)
    })?;
    let ckpt = checkpoint(cfg, Component::Prior, &spec, vec![("prior", with_params(&init.net, &params)?)]);
    Ok(Trained {
        model: prior_from(&ckpt)?,
        checkpoint: ckpt,
        curve,
    })
}

/// Time-dependent encoder against a frozen prior.
pub fn train_encoder(
    cfg: &ExperimentConfig,
    train: &Dataset,
    prior: &ScoreModel,
) -> Result<Trained<TimeEncoder>> {
    let d = train.dim();
    check_dim("prior", d, prior.dim())?;
    let spec = cfg.sde_spec(d)?;
    let k = cfg.latent_dim;
    let mut rng = cfg.component_stream(Component::Encoder);
    let init = TimeEncoder::init(cfg.nets.encoder.spec(d, 2 * k)?, &mut rng)?;
    let beta = cfg.beta;
    let (params, curve) = optimize(cfg, Component::Encoder, train, init.net.params().to_vec(), &mut rng, |p, x0, rng| {
        let enc = TimeEncoder::new(with_params(&init.net, p)?)?;
        let draws = Draws::sample(rng, x0.nrows(), k, &spec, T_EPS);
        scorevae_loss(&enc, prior, x0, &spec, beta, &draws)
    })?;
    let ckpt = checkpoint(cfg, Component::Encoder, &spec, vec![("encoder", with_params(&init.net, &params)?)]);
    Ok(Trained {
        model: encoder_from(&ckpt)?,
        checkpoint: ckpt,
        curve,
    })
}

/// Residual corrector against a frozen prior and encoder.
pub fn train_corrector(
    cfg: &ExperimentConfig,
    train: &Dataset,
    prior: &ScoreModel,
    encoder: &TimeEncoder,
) -> Result<Trained<ConditionalNet>> {
    let d = train.dim();
    check_dim("prior", d, prior.dim())?;
    check_dim("encoder", d, encoder.data_dim())?;
    let spec = cfg.sde_spec(d)?;
    let k = encoder.latent_dim();
    let mut rng = cfg.component_stream(Component::Corrector);
    let init = ConditionalNet::init(cfg.nets.corrector.spec(d + k, d)?, d, &mut rng)?;
    let beta = cfg.beta;
    let (params, curve) = optimize(cfg, Component::Corrector, train, init.net.params().to_vec(), &mut rng, |p, x0, rng| {
        let corr = ConditionalNet::new(with_params(&init.net, p)?, d)?.with_output(score_output(&spec));
        let draws = Draws::sample(rng, x0.nrows(), k, &spec, T_EPS);
        corrector_loss(&corr, encoder, prior, x0, &spec, beta, &draws)
    })?;
    let ckpt = checkpoint(cfg, Component::Corrector, &spec, vec![("corrector", with_params(&init.net, &params)?)]);
    Ok(Trained {
        model: corrector_from(&ckpt)?,
        checkpoint: ckpt,
        curve,
    })
}

/// β-VAE baseline with a Gaussian decoder.
pub fn train_vae(cfg: &ExperimentConfig, train: &Dataset) -> Result<Trained<Vae>> {
    let d = train.dim();
    let spec = cfg.sde_spec(d)?;
    let k = cfg.latent_dim;
    let mut rng = cfg.component_stream(Component::Vae);
    let enc = TimeEncoder::init(cfg.nets.baseline_encoder.spec(d, 2 * k)?, &mut rng)?;
    let dec = VaeDecoder::init(cfg.nets.vae_decoder.spec(k, d)?, &mut rng)?;
    let n_enc = enc.net.params().len();
    let init: Vec<Mat> = enc.net.params().iter().chain(dec.net.params()).cloned().collect();
    let beta = cfg.beta;
    let (params, curve) = optimize(cfg, Component::Vae, train, init, &mut rng, |p, x0, rng| {
        let e = TimeEncoder::new(with_params(&enc.net, &p[..n_enc])?)?;
        let dd = VaeDecoder::new(with_params(&dec.net, &p[n_enc..])?)?;
        let noise = standard_normal(rng, x0.nrows(), k);
        vae_beta_elbo(&e, &dd, x0, beta, &noise)
    })?;
    let ckpt = checkpoint(
        cfg,
        Component::Vae,
        &spec,
        vec![
            ("encoder", with_params(&enc.net, &params[..n_enc])?),
            ("decoder", with_params(&dec.net, &params[n_enc..])?),
        ],
    );
    Ok(Trained {
        model: vae_from(&ckpt)?,
        checkpoint: ckpt,
        curve,
    })
}

/// Conditional score network and encoder trained jointly, with `β·KL` when
/// `β > 0`.
pub fn train_diffdecoder(cfg: &ExperimentConfig, train: &Dataset) -> Result<Trained<DiffDecoder>> {
    let d = train.dim();
    let spec = cfg.sde_spec(d)?;
    let k = cfg.latent_dim;
    let mut rng = cfg.component_stream(Component::DiffDecoder);
    let net = ConditionalNet::init(cfg.nets.conditional.spec(d + k, d)?, d, &mut rng)?;
    let enc = TimeEncoder::init(cfg.nets.baseline_encoder.spec(d, 2 * k)?, &mut rng)?;
    let n_net = net.net.params().len();
    let init: Vec<Mat> = net.net.params().iter().chain(enc.net.params()).cloned().collect();
    let (beta, weighting) = (cfg.beta, cfg.optimizer.diffdecoder_weighting);
    let mode = diffdecoder_latent(beta);
    let (params, curve) = optimize(cfg, Component::DiffDecoder, train, init, &mut rng, |p, x0, rng| {
        let n = ConditionalNet::new(with_params(&net.net, &p[..n_net])?, d)?.with_output(score_output(&spec));
        let e = TimeEncoder::new(with_params(&enc.net, &p[n_net..])?)?;
        let draws = Draws::sample(rng, x0.nrows(), k, &spec, T_EPS);
        cde_loss(&n, &e, x0, &spec, weighting, beta, mode, &draws)
    })?;
    let ckpt = checkpoint(
        cfg,
        Component::DiffDecoder,
        &spec,
        vec![
            ("score", with_params(&net.net, &params[..n_net])?),
            ("encoder", with_params(&enc.net, &params[n_net..])?),
        ],
    );
    Ok(Trained {
        model: diffdecoder_from(&ckpt, beta)?,
        checkpoint: ckpt,
        curve,
    })
}
