//! Training objectives and the likelihood bound.
//!
//! Every loss is a batch mean evaluated on a [`Draws`] record, so the same
//! random numbers can be replayed across calls (finite differences, β
//! sweeps, comparisons between losses). Each loss returns its
//! [`LossReport`] together with the gradient of `total` with respect to the
//! trainable parameters.

use crate::compose::{LatentPosterior, PriorScore};
use crate::diffproc::{perturb_with_noise, prior_logdensity, transition_score, SdeSpec};
use crate::error::ensure_finite;
use crate::models::{ConditionalNet, LatentMode, ScoreModel, TimeEncoder, VaeDecoder};
use crate::ndiff::{Mat, Tape, Var};
use crate::random::{standard_normal, uniform};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Lower end of the training time range.
pub const T_EPS: f64 = 1e-3;

/// Time weighting `λ(t)` of the denoising objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingKind {
    /// `λ(t) = g(t)² = β(t)`.
    #[default]
    Likelihood,
    /// `λ(t) = σ(t)²`.
    Simple,
}

impl WeightingKind {
    pub fn lambda(self, spec: &SdeSpec, t: f64) -> Result<f64> {
        match self {
            WeightingKind::Likelihood => spec.beta(t),
            WeightingKind::Simple => Ok(spec.perturb_params(t)?.sigma.powi(2)),
        }
    }
}

/// Scalar summary of one loss evaluation.
///
/// `dsm_term` holds the data-fit part (the reconstruction error for the
/// β-ELBO) and `kl_term` the mean KL to the latent prior, so that
/// `total = dsm_term + β·kl_term`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub dsm_term: f64,
    pub kl_term: f64,
    pub n_samples: usize,
}

/// A loss value with the gradient of its total.
#[derive(Clone, Debug)]
pub struct Loss {
    pub report: LossReport,
    /// Gradients in the parameter order of the trainable components.
    pub grads: Vec<Mat>,
}

/// Where the latent of each row comes from.
#[derive(Clone, Debug)]
pub enum LatentDraw {
    /// Standard-normal noise for `z = μ + σ ⊙ ε` under the model's encoder.
    Noise(Mat),
    /// Latents supplied by the caller.
    Fixed(Mat),
}

/// The random numbers consumed by one loss evaluation.
#[derive(Clone, Debug)]
pub struct Draws {
    pub t: Vec<f64>,
    /// Forward-kernel noise, `x_t = a x_0 + σ ε`.
    pub noise: Mat,
    pub latent: LatentDraw,
}

impl Draws {
    /// `t ~ U(t_eps, T)` and fresh Gaussian noise for `n` rows.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        n: usize,
        latent_dim: usize,
        spec: &SdeSpec,
        t_eps: f64,
    ) -> Self {
        let t = uniform(rng, n, t_eps, spec.t_end);
        let noise = standard_normal(rng, n, spec.dim);
        let latent = LatentDraw::Noise(standard_normal(rng, n, latent_dim));
        Self { t, noise, latent }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn check(&self, x0: &Mat, latent_dim: usize) -> Result<()> {
        let n = x0.nrows();
        if n == 0 {
            return Err(Error::shape("loss batch", "at least one row", 0));
        }
        if self.t.len() != n || self.noise.dim() != x0.dim() {
            return Err(Error::shape(
                "loss draws",
                format!("{n} times and {:?} noise", x0.dim()),
                format!("{} times and {:?} noise", self.t.len(), self.noise.dim()),
            ));
        }
        let lat = match &self.latent {
            LatentDraw::Noise(m) | LatentDraw::Fixed(m) => m,
        };
        if lat.dim() != (n, latent_dim) {
            return Err(Error::shape(
                "latent draws",
                format!("{:?}", (n, latent_dim)),
                format!("{:?}", lat.dim()),
            ));
        }
        Ok(())
    }
}

/// `½ Σᵢ (μᵢ² + σᵢ² − 1 − ln σᵢ²)`, the KL from `N(μ, diag σ²)` to `N(0, I)`.
pub fn kl_diag_gaussian(mu: &[f64], sigma: &[f64]) -> Result<f64> {
    if mu.len() != sigma.len() {
        return Err(Error::shape("kl moments", mu.len(), sigma.len()));
    }
    let mut kl = 0.0;
    for (&m, &s) in mu.iter().zip(sigma) {
        if !(s > 0.0) {
            return Err(Error::Domain {
                what: "standard deviation",
                value: s,
                domain: "(0, inf)".into(),
            });
        }
        kl += m * m + s * s - 1.0 - 2.0 * s.ln();
    }
    Ok(0.5 * kl)
}

/// Row-wise `½ λᵢ ‖targetᵢ − predᵢ‖²`.
pub fn weighted_sq_residual(target: &Mat, pred: &Mat, lambda: &[f64]) -> Vec<f64> {
    (0..target.nrows())
        .map(|i| {
            let r2: f64 = target
                .row(i)
                .iter()
                .zip(pred.row(i))
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            0.5 * lambda[i] * r2
        })
        .collect()
}

fn lambdas(weighting: WeightingKind, spec: &SdeSpec, t: &[f64]) -> Result<Vec<f64>> {
    t.iter().map(|&t| weighting.lambda(spec, t)).collect()
}

/// `x_t` and the kernel score target for a batch.
fn diffuse(spec: &SdeSpec, x0: &Mat, draws: &Draws) -> Result<(Mat, Mat)> {
    let xt = perturb_with_noise(spec, x0, &draws.t, &draws.noise)?;
    let target = transition_score(spec, &xt, x0, &draws.t)?;
    Ok((xt, target))
}

/// Row-wise KL of `N(μ, exp(2 ls))` against `N(0, I)` on the tape, `n×1`.
fn kl_rows<'t>(mu: Var<'t>, log_sigma: Var<'t>) -> Var<'t> {
    let (n, k) = mu.shape();
    let two_ls = log_sigma.scale(2.0);
    mu.square()
        .add(two_ls.exp())
        .sub(two_ls)
        .sum_cols()
        .add_const(Mat::from_elem((n, 1), -(k as f64)))
        .scale(0.5)
}

/// `½ λᵢ ‖resid_i‖²` on the tape, `n×1`.
fn weighted_rows<'t>(resid: Var<'t>, lambda: &[f64]) -> Var<'t> {
    resid.square().sum_cols().scale_rows(lambda).scale(0.5)
}

fn finish(
    tape: &Tape,
    dsm: Var<'_>,
    kl: Option<Var<'_>>,
    beta: f64,
    n: usize,
    wrt: &[Var<'_>],
) -> Result<Loss> {
    let dsm_m = dsm.mean_all();
    let (total, kl_value) = match kl {
        Some(kl) => {
            let kl_m = kl.mean_all();
            (dsm_m.add(kl_m.scale(beta)), kl_m.item())
        }
        None => (dsm_m, 0.0),
    };
    let report = LossReport {
        total: total.item(),
        dsm_term: dsm_m.item(),
        kl_term: kl_value,
        n_samples: n,
    };
    ensure_finite([report.total].iter(), || "loss value".to_string())?;
    let grads: Vec<Mat> = tape
        .gradient(total, wrt)
        .into_iter()
        .map(|g| (*g.value()).clone())
        .collect();
    ensure_finite(grads.iter().flat_map(|g| g.iter()), || {
        "loss gradient".to_string()
    })?;
    Ok(Loss { report, grads })
}

fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0) || !beta.is_finite() {
        return Err(Error::Domain {
            what: "beta",
            value: beta,
            domain: "[0, inf)".into(),
        });
    }
    Ok(())
}

/// Weighted denoising score matching for an unconditional score model.
///
/// Gradients follow the model's parameter order.
pub fn dsm_loss(
    model: &ScoreModel,
    x0: &Mat,
    spec: &SdeSpec,
    weighting: WeightingKind,
    draws: &Draws,
) -> Result<Loss> {
    draws.check(x0, draws_latent_dim(draws))?;
    let (xt, target) = diffuse(spec, x0, draws)?;
    let lambda = lambdas(weighting, spec, &draws.t)?;
    let tape = Tape::new();
    let params = model.net.leaves(&tape);
    let s = model.score_tape(&params, tape.constant(xt), &draws.t)?;
    let resid = tape.constant(target).sub(s);
    let dsm = weighted_rows(resid, &lambda);
    finish(&tape, dsm, None, 0.0, x0.nrows(), &params)
}

fn draws_latent_dim(draws: &Draws) -> usize {
    match &draws.latent {
        LatentDraw::Noise(m) | LatentDraw::Fixed(m) => m.ncols(),
    }
}

/// Clean-data encoder moments at `t = 0` on the tape.
fn clean_moments_tape<'t>(
    encoder: &TimeEncoder,
    params: &[Var<'t>],
    x0: Var<'t>,
) -> Result<crate::models::TapeMoments<'t>> {
    let n = x0.shape().0;
    encoder.moments_tape(params, x0, &vec![0.0; n])
}

/// Conditional denoising objective of the jointly trained baseline: a
/// conditional score network `s(x_t, z, t)` fed with latents from an encoder
/// of the clean data, plus `β` times the encoder's KL.
///
/// With [`LatentMode::Mean`] the encoder is used deterministically and the
/// latent noise in `draws` is ignored. Gradients are the network's
/// parameters followed by the encoder's.
#[allow(clippy::too_many_arguments)]
pub fn cde_loss(
    net: &ConditionalNet,
    encoder: &TimeEncoder,
    x0: &Mat,
    spec: &SdeSpec,
    weighting: WeightingKind,
    beta: f64,
    mode: LatentMode,
    draws: &Draws,
) -> Result<Loss> {
    check_beta(beta)?;
    draws.check(x0, encoder.latent_dim())?;
    let (xt, target) = diffuse(spec, x0, draws)?;
    let lambda = lambdas(weighting, spec, &draws.t)?;
    let tape = Tape::new();
    let net_p = net.net.leaves(&tape);
    let enc_p = encoder.net.leaves(&tape);
    let m = clean_moments_tape(encoder, &enc_p, tape.constant(x0.clone()))?;
    let z = match (&draws.latent, mode) {
        (LatentDraw::Fixed(z), _) => tape.constant(z.clone()),
        (LatentDraw::Noise(_), LatentMode::Mean) => m.mu,
        (LatentDraw::Noise(e), LatentMode::Sample) => {
            m.mu.add(m.log_sigma.exp().mul(tape.constant(e.clone())))
        }
    };
    let s = net.eval_tape(&net_p, tape.constant(xt), z, &draws.t)?;
    let dsm = weighted_rows(tape.constant(target).sub(s), &lambda);
    let kl = kl_rows(m.mu, m.log_sigma);
    let wrt: Vec<Var> = net_p.into_iter().chain(enc_p).collect();
    finish(&tape, dsm, Some(kl), beta, x0.nrows(), &wrt)
}

/// The ScoreVAE encoder objective with likelihood weighting:
/// `E[½ g² ‖∇ ln p(x_t|x_0) − s_prior(x_t) − ∇ₓ ln q_t(z|x_t)‖²] + β KL`,
/// with `z` reparameterized from `q_0(z | x_0)`.
///
/// The prior is frozen; gradients follow the encoder's parameter order.
pub fn scorevae_loss(
    encoder: &TimeEncoder,
    prior: &dyn PriorScore,
    x0: &Mat,
    spec: &SdeSpec,
    beta: f64,
    draws: &Draws,
) -> Result<Loss> {
    check_beta(beta)?;
    draws.check(x0, encoder.latent_dim())?;
    let (xt, target) = diffuse(spec, x0, draws)?;
    let lambda = lambdas(WeightingKind::Likelihood, spec, &draws.t)?;
    let prior_s = prior.prior_score(&xt, &draws.t)?;
    let tape = Tape::new();
    let params = encoder.net.leaves(&tape);
    let m = clean_moments_tape(encoder, &params, tape.constant(x0.clone()))?;
    let z = match &draws.latent {
        LatentDraw::Noise(e) => m.mu.add(m.log_sigma.exp().mul(tape.constant(e.clone()))),
        LatentDraw::Fixed(z) => tape.constant(z.clone()),
    };
    let enc_s = encoder.score_tape(&params, z, tape.constant(xt), &draws.t)?;
    let resid = tape.constant(target - prior_s).sub(enc_s);
    let dsm = weighted_rows(resid, &lambda);
    let kl = kl_rows(m.mu, m.log_sigma);
    finish(&tape, dsm, Some(kl), beta, x0.nrows(), &params)
}

/// The ScoreVAE objective with a residual corrector added to the composed
/// score. Encoder and prior are frozen; gradients follow the corrector's
/// parameter order. The KL term is reported but carries no gradient.
pub fn corrector_loss(
    corrector: &ConditionalNet,
    encoder: &TimeEncoder,
    prior: &dyn PriorScore,
    x0: &Mat,
    spec: &SdeSpec,
    beta: f64,
    draws: &Draws,
) -> Result<Loss> {
    check_beta(beta)?;
    draws.check(x0, encoder.latent_dim())?;
    let (xt, target) = diffuse(spec, x0, draws)?;
    let lambda = lambdas(WeightingKind::Likelihood, spec, &draws.t)?;
    let (mu, sigma) = encoder.encode(x0, &vec![0.0; x0.nrows()])?;
    let z = match &draws.latent {
        LatentDraw::Noise(e) => &mu + &(&sigma * e),
        LatentDraw::Fixed(z) => z.clone(),
    };
    let frozen = target - prior.prior_score(&xt, &draws.t)? - encoder.encoder_score(&z, &xt, &draws.t)?;
    let kl: Vec<f64> = (0..mu.nrows())
        .map(|i| {
            kl_diag_gaussian(
                mu.row(i).as_slice().expect("row-major"),
                sigma.row(i).as_slice().expect("row-major"),
            )
        })
        .collect::<Result<_>>()?;
    let tape = Tape::new();
    let params = corrector.net.leaves(&tape);
    let c = corrector.eval_tape(&params, tape.constant(xt), tape.constant(z), &draws.t)?;
    let dsm = weighted_rows(tape.constant(frozen).sub(c), &lambda);
    let kl = tape.constant(Mat::from_shape_vec((kl.len(), 1), kl).expect("column"));
    finish(&tape, dsm, Some(kl), beta, x0.nrows(), &params)
}

/// β-ELBO of a Gaussian VAE with unit output variance, up to its additive
/// constant: `½ ‖x − d(z)‖² + β KL`. The encoder is evaluated at `t = 0`.
///
/// Gradients are the encoder's parameters followed by the decoder's.
pub fn vae_beta_elbo(
    encoder: &TimeEncoder,
    decoder: &VaeDecoder,
    x0: &Mat,
    beta: f64,
    latent_noise: &Mat,
) -> Result<Loss> {
    check_beta(beta)?;
    let n = x0.nrows();
    if n == 0 || latent_noise.dim() != (n, encoder.latent_dim()) {
        return Err(Error::shape(
            "latent noise",
            format!("{:?}", (n, encoder.latent_dim())),
            format!("{:?}", latent_noise.dim()),
        ));
    }
    let tape = Tape::new();
    let enc_p = encoder.net.leaves(&tape);
    let dec_p = decoder.net.leaves(&tape);
    let x = tape.constant(x0.clone());
    let m = clean_moments_tape(encoder, &enc_p, x)?;
    let z = m
        .mu
        .add(m.log_sigma.exp().mul(tape.constant(latent_noise.clone())));
    let recon = decoder.decode_tape(&dec_p, z)?;
    let err = x.sub(recon).square().sum_cols().scale(0.5);
    let kl = kl_rows(m.mu, m.log_sigma);
    let wrt: Vec<Var> = enc_p.into_iter().chain(dec_p).collect();
    finish(&tape, err, Some(kl), beta, n, &wrt)
}

/// Monte Carlo estimate of the variational lower bound on `ln p(x_0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundEstimate {
    pub value: f64,
    pub std_err: f64,
    /// Closed-form KL of `q_0(z | x_0)` to the standard-normal latent prior.
    pub kl: f64,
    pub n_mc: usize,
}

/// One draw of the time integrand of the bound:
/// `½ g² ‖∇ ln p(x_t|x_0)‖² − ½ g² ‖∇ ln p(x_t|x_0) − s‖² + ∇·f`.
pub fn bound_integrand(spec: &SdeSpec, t: f64, kernel_score: &[f64], model_score: &[f64]) -> Result<f64> {
    let g2 = spec.beta(t)?;
    // ‖u‖² − ‖u − s‖² = s·(2u − s), which avoids cancelling two large terms
    let cross: f64 = kernel_score
        .iter()
        .zip(model_score)
        .map(|(u, s)| s * (2.0 * u - s))
        .sum();
    Ok(0.5 * g2 * cross + spec.divergence_drift(t)?)
}

/// Lower bound on `ln p(x_0)` for a single data point under the composed
/// model `prior + encoder`, with `z ~ q_0(z | x_0)` and a standard-normal
/// latent prior:
///
/// ```text
/// E_z[ E ln π(x_T) + ∫ E[½g²‖∇ln p(x_t|x_0)‖² − ½g²‖∇ln p(x_t|x_0) − s(x_t,z,t)‖² + ∇·f] dt ] − KL
/// ```
///
/// The time integral runs over `[t_eps, T]` with one uniform `t` per draw.
pub fn likelihood_bound<R: Rng + ?Sized>(
    encoder: &dyn LatentPosterior,
    prior: &dyn PriorScore,
    x0: &[f64],
    spec: &SdeSpec,
    n_mc: usize,
    t_eps: f64,
    rng: &mut R,
) -> Result<BoundEstimate> {
    if n_mc == 0 {
        return Err(Error::Config("the bound needs at least one draw".into()));
    }
    if x0.len() != spec.dim {
        return Err(Error::shape("bound data point", spec.dim, x0.len()));
    }
    let x0_row = Mat::from_shape_vec((1, spec.dim), x0.to_vec()).expect("row");
    let (mu, sigma) = encoder.clean_moments(&x0_row)?;
    let kl = kl_diag_gaussian(
        mu.row(0).as_slice().expect("row-major"),
        sigma.row(0).as_slice().expect("row-major"),
    )?;
    let k = encoder.latent_dim();
    let x0s = Mat::from_shape_fn((n_mc, spec.dim), |(_, j)| x0[j]);
    let u = standard_normal(rng, n_mc, k);
    let z = Mat::from_shape_fn((n_mc, k), |(i, j)| mu[[0, j]] + sigma[[0, j]] * u[[i, j]]);
    let t = uniform(rng, n_mc, t_eps, spec.t_end);
    let eps = standard_normal(rng, n_mc, spec.dim);
    let xt = perturb_with_noise(spec, &x0s, &t, &eps)?;
    let kernel = transition_score(spec, &xt, &x0s, &t)?;
    let s = prior.prior_score(&xt, &t)? + encoder.posterior_score(&z, &xt, &t)?;
    let end = vec![spec.t_end; n_mc];
    let eps_end = standard_normal(rng, n_mc, spec.dim);
    let x_end = perturb_with_noise(spec, &x0s, &end, &eps_end)?;
    let log_pi = prior_logdensity(&x_end);
    let span = spec.t_end - t_eps;
    let mut values = Vec::with_capacity(n_mc);
    for i in 0..n_mc {
        let integrand = bound_integrand(
            spec,
            t[i],
            kernel.row(i).as_slice().expect("row-major"),
            s.row(i).as_slice().expect("row-major"),
        )?;
        values.push(log_pi[i] + span * integrand);
    }
    ensure_finite(values.iter(), || "likelihood bound draws".to_string())?;
    let n = n_mc as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if n_mc > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(BoundEstimate {
        value: mean - kl,
        std_err: (var / n).sqrt(),
        kl,
        n_mc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{Activation, Mlp, NetSpec};
    use crate::oracle::{sigma_points, AnalyticEncoder, AnalyticPrior, GaussianWorld};
    use crate::random::seeded;
    use nalgebra::{DMatrix, DVector};
    use ndarray::{array, s, Array2};

    fn scaled_output(mut net: Mlp, c: f64) -> Mlp {
        let n = net.params().len();
        net.params_mut()[n - 2].mapv_inplace(|v| v * c);
        net.params_mut()[n - 1].mapv_inplace(|v| v * c);
        net
    }

    fn small_encoder(rng: &mut impl Rng, d: usize, k: usize, tf: usize) -> TimeEncoder {
        let spec = NetSpec::dense(d, &[6], 2 * k, Activation::Gelu, tf).unwrap();
        TimeEncoder::new(scaled_output(Mlp::init(spec, rng), 0.3)).unwrap()
    }

    fn small_score(rng: &mut impl Rng, d: usize) -> ScoreModel {
        let spec = NetSpec::dense(d, &[6], d, Activation::Gelu, 2).unwrap();
        ScoreModel::new(Mlp::init(spec, rng)).unwrap()
    }

    fn small_cond(rng: &mut impl Rng, d: usize, k: usize) -> ConditionalNet {
        let spec = NetSpec::dense(d + k, &[6], d, Activation::Gelu, 2).unwrap();
        ConditionalNet::new(Mlp::init(spec, rng), d).unwrap()
    }

    /// Central differences of `f` over every entry of every tensor.
    fn fd_grads(params: &[Mat], h: f64, mut f: impl FnMut(&[Mat]) -> f64) -> Vec<Mat> {
        let mut work = params.to_vec();
        let mut out = Vec::new();
        for p in 0..params.len() {
            let mut g = Mat::zeros(params[p].dim());
            for idx in 0..params[p].len() {
                let (r, c) = (idx / params[p].ncols(), idx % params[p].ncols());
                let orig = work[p][[r, c]];
                work[p][[r, c]] = orig + h;
                let up = f(&work);
                work[p][[r, c]] = orig - h;
                let dn = f(&work);
                work[p][[r, c]] = orig;
                g[[r, c]] = (up - dn) / (2.0 * h);
            }
            out.push(g);
        }
        out
    }

    fn with_params(net: &Mlp, p: &[Mat]) -> Mlp {
        Mlp::from_params(net.spec().clone(), p.to_vec()).unwrap()
    }

    #[test]
    fn kl_closed_form_values() {
        assert_eq!(kl_diag_gaussian(&[0.0], &[1.0]).unwrap(), 0.0);
        assert!((kl_diag_gaussian(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5).abs() < 1e-15);
        let v = kl_diag_gaussian(&[0.0], &[2.0]).unwrap();
        assert!((v - (3.0 - 4f64.ln()) / 2.0).abs() < 1e-15);
        assert!((v - 0.806_85).abs() < 1e-5);
        assert!(matches!(
            kl_diag_gaussian(&[0.0], &[0.0]),
            Err(Error::Domain { .. })
        ));
        assert!(kl_diag_gaussian(&[0.0], &[-1.0]).is_err());
    }

    #[test]
    fn kl_matches_monte_carlo() {
        let mut rng = seeded(0);
        for _ in 0..5 {
            let mu = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let sd = [rng.random_range(0.3..2.0), rng.random_range(0.3..2.0)];
            let n = 100_000;
            let e = standard_normal(&mut rng, n, 2);
            let vals: Vec<f64> = (0..n)
                .map(|i| {
                    (0..2)
                        .map(|j| {
                            let z = mu[j] + sd[j] * e[[i, j]];
                            // ln q − ln p
                            -0.5 * e[[i, j]].powi(2) - sd[j].ln() + 0.5 * z * z
                        })
                        .sum()
                })
                .collect();
            let m = vals.iter().sum::<f64>() / n as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            let se = (v / n as f64).sqrt();
            let exact = kl_diag_gaussian(&mu, &sd).unwrap();
            assert!((m - exact).abs() < 3.0 * se, "{m} vs {exact} (se {se})");
        }
    }

    #[test]
    fn weighted_residual_hand_value() {
        let target = array![[0.2, 0.0]];
        let pred = array![[0.0, 0.0]];
        assert!((weighted_sq_residual(&target, &pred, &[10.0])[0] - 0.2).abs() < 1e-15);
        assert_eq!(weighted_sq_residual(&target, &target, &[10.0])[0], 0.0);
    }

    #[test]
    fn weightings() {
        let spec = SdeSpec::standard(1);
        assert_eq!(WeightingKind::Likelihood.lambda(&spec, 0.5).unwrap(), spec.beta(0.5).unwrap());
        let s = spec.perturb_params(0.5).unwrap().sigma;
        assert_eq!(WeightingKind::Simple.lambda(&spec, 0.5).unwrap(), s * s);
        for t in [1e-3, 0.3, 1.0] {
            assert!(WeightingKind::Simple.lambda(&spec, t).unwrap() > 0.0);
        }
    }

    #[test]
    fn dsm_loss_matches_plain_evaluation() {
        let mut rng = seeded(1);
        let spec = SdeSpec::standard(2);
        let model = small_score(&mut rng, 2);
        let x0 = standard_normal(&mut rng, 16, 2);
        let draws = Draws::sample(&mut rng, 16, 0, &spec, T_EPS);
        let loss = dsm_loss(&model, &x0, &spec, WeightingKind::Simple, &draws).unwrap();
        let (xt, target) = diffuse(&spec, &x0, &draws).unwrap();
        let pred = model.score(&xt, &draws.t).unwrap();
        let lam = lambdas(WeightingKind::Simple, &spec, &draws.t).unwrap();
        let plain: f64 = weighted_sq_residual(&target, &pred, &lam).iter().sum::<f64>() / 16.0;
        assert!((loss.report.total - plain).abs() < 1e-12 * plain.max(1.0));
        assert!(loss.report.dsm_term >= 0.0);
        assert_eq!(loss.report.kl_term, 0.0);
        assert_eq!(loss.report.n_samples, 16);
    }

    #[test]
    fn empty_batch_and_bad_beta_are_rejected() {
        let mut rng = seeded(2);
        let spec = SdeSpec::standard(2);
        let model = small_score(&mut rng, 2);
        let draws = Draws::sample(&mut rng, 0, 0, &spec, T_EPS);
        assert!(dsm_loss(&model, &Mat::zeros((0, 2)), &spec, WeightingKind::Simple, &draws).is_err());
        let enc = small_encoder(&mut rng, 2, 1, 2);
        let draws = Draws::sample(&mut rng, 3, 1, &spec, T_EPS);
        let x0 = standard_normal(&mut rng, 3, 2);
        assert!(scorevae_loss(&enc, &model, &x0, &spec, -0.1, &draws).is_err());
    }

    #[test]
    fn dsm_gradient_matches_finite_differences() {
        let mut rng = seeded(3);
        let spec = SdeSpec::standard(2);
        let model = small_score(&mut rng, 2);
        let x0 = standard_normal(&mut rng, 8, 2);
        let draws = Draws::sample(&mut rng, 8, 0, &spec, 0.05);
        let loss = dsm_loss(&model, &x0, &spec, WeightingKind::Likelihood, &draws).unwrap();
        let fd = fd_grads(model.net.params(), 1e-5, |p| {
            let m = ScoreModel::new(with_params(&model.net, p)).unwrap();
            dsm_loss(&m, &x0, &spec, WeightingKind::Likelihood, &draws)
                .unwrap()
                .report
                .total
        });
        let err = crate::ndiff::relative_error(&loss.grads, &fd, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn cde_without_latent_dependence_is_dsm() {
        let mut rng = seeded(4);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        // same weights, with zero rows for the latent inputs
        let pw = prior.net.params();
        let mut w0 = Array2::zeros((2 + 1 + 4, 6));
        w0.slice_mut(s![..2, ..]).assign(&pw[0].slice(s![..2, ..]));
        w0.slice_mut(s![3.., ..]).assign(&pw[0].slice(s![2.., ..]));
        let cspec = NetSpec::dense(3, &[6], 2, Activation::Gelu, 2).unwrap();
        let cond = ConditionalNet::new(
            Mlp::from_params(cspec, vec![w0, pw[1].clone(), pw[2].clone(), pw[3].clone()]).unwrap(),
            2,
        )
        .unwrap();
        let enc = small_encoder(&mut rng, 2, 1, 0);
        let x0 = standard_normal(&mut rng, 10, 2);
        let draws = Draws::sample(&mut rng, 10, 1, &spec, T_EPS);
        let a = dsm_loss(&prior, &x0, &spec, WeightingKind::Simple, &draws).unwrap();
        let b = cde_loss(&cond, &enc, &x0, &spec, WeightingKind::Simple, 0.0, LatentMode::Sample, &draws)
            .unwrap();
        assert!((a.report.total - b.report.total).abs() < 1e-12 * a.report.total);
        // encoder gradient vanishes apart from the (β = 0) KL
        let n_net = cond.net.params().len();
        assert!(b.grads[n_net..].iter().all(|g| g.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn cde_gradient_matches_finite_differences() {
        let mut rng = seeded(5);
        let spec = SdeSpec::standard(2);
        let cond = small_cond(&mut rng, 2, 2);
        let enc = small_encoder(&mut rng, 2, 2, 0);
        let x0 = standard_normal(&mut rng, 6, 2);
        let draws = Draws::sample(&mut rng, 6, 2, &spec, 0.05);
        let loss = cde_loss(&cond, &enc, &x0, &spec, WeightingKind::Simple, 0.3, LatentMode::Sample, &draws)
            .unwrap();
        let all: Vec<Mat> = cond.net.params().iter().chain(enc.net.params()).cloned().collect();
        let n_net = cond.net.params().len();
        let fd = fd_grads(&all, 1e-5, |p| {
            let c = ConditionalNet::new(with_params(&cond.net, &p[..n_net]), 2).unwrap();
            let e = TimeEncoder::new(with_params(&enc.net, &p[n_net..])).unwrap();
            cde_loss(&c, &e, &x0, &spec, WeightingKind::Simple, 0.3, LatentMode::Sample, &draws)
                .unwrap()
                .report
                .total
        });
        let err = crate::ndiff::relative_error(&loss.grads, &fd, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn scorevae_beta_enters_linearly() {
        let mut rng = seeded(6);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        let enc = small_encoder(&mut rng, 2, 1, 2);
        let x0 = standard_normal(&mut rng, 12, 2);
        let draws = Draws::sample(&mut rng, 12, 1, &spec, T_EPS);
        let a = scorevae_loss(&enc, &prior, &x0, &spec, 0.01, &draws).unwrap().report;
        let b = scorevae_loss(&enc, &prior, &x0, &spec, 0.02, &draws).unwrap().report;
        assert_eq!(a.dsm_term, b.dsm_term);
        assert_eq!(a.kl_term, b.kl_term);
        let kl_a = a.total - a.dsm_term;
        let kl_b = b.total - b.dsm_term;
        assert!((kl_b - 2.0 * kl_a).abs() < 1e-12 * kl_b.abs().max(1e-300));
        assert!(a.kl_term > 0.0);
    }

    #[test]
    fn blind_encoder_reduces_scorevae_to_prior_dsm() {
        let mut rng = seeded(7);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        let enc = TimeEncoder::linear(&Mat::zeros((1, 2)), &[0.4], &[-0.3]).unwrap();
        let x0 = standard_normal(&mut rng, 12, 2);
        let draws = Draws::sample(&mut rng, 12, 1, &spec, T_EPS);
        let a = scorevae_loss(&enc, &prior, &x0, &spec, 0.0, &draws).unwrap().report;
        let b = dsm_loss(&prior, &x0, &spec, WeightingKind::Likelihood, &draws).unwrap().report;
        assert!((a.total - b.total).abs() < 1e-12 * b.total);
    }

    #[test]
    fn scorevae_gradient_matches_finite_differences() {
        let mut rng = seeded(8);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        for _ in 0..5 {
            let enc = small_encoder(&mut rng, 2, 2, 2);
            let x0 = standard_normal(&mut rng, 6, 2);
            let draws = Draws::sample(&mut rng, 6, 2, &spec, 0.05);
            let loss = scorevae_loss(&enc, &prior, &x0, &spec, 0.5, &draws).unwrap();
            let fd = fd_grads(enc.net.params(), 1e-5, |p| {
                let e = TimeEncoder::new(with_params(&enc.net, p)).unwrap();
                scorevae_loss(&e, &prior, &x0, &spec, 0.5, &draws).unwrap().report.total
            });
            let err = crate::ndiff::relative_error(&loss.grads, &fd, 1e-6);
            assert!(err < 1e-4, "{err}");
        }
    }

    #[test]
    fn zero_corrector_reproduces_scorevae_loss() {
        let mut rng = seeded(9);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        let enc = small_encoder(&mut rng, 2, 1, 2);
        let corr = ConditionalNet::init(
            NetSpec::dense(3, &[6], 2, Activation::Gelu, 2).unwrap(),
            2,
            &mut rng,
        )
        .unwrap();
        let x0 = standard_normal(&mut rng, 12, 2);
        let draws = Draws::sample(&mut rng, 12, 1, &spec, T_EPS);
        let a = scorevae_loss(&enc, &prior, &x0, &spec, 0.01, &draws).unwrap().report;
        let b = corrector_loss(&corr, &enc, &prior, &x0, &spec, 0.01, &draws).unwrap();
        assert!((a.total - b.report.total).abs() < 1e-10 * a.total);
        assert!((a.kl_term - b.report.kl_term).abs() < 1e-12);
        assert_eq!(b.grads.len(), corr.net.params().len());
    }

    #[test]
    fn corrector_gradient_matches_finite_differences() {
        let mut rng = seeded(10);
        let spec = SdeSpec::standard(2);
        let prior = small_score(&mut rng, 2);
        let enc = small_encoder(&mut rng, 2, 1, 2);
        let corr = small_cond(&mut rng, 2, 1);
        let x0 = standard_normal(&mut rng, 6, 2);
        let draws = Draws::sample(&mut rng, 6, 1, &spec, 0.05);
        let loss = corrector_loss(&corr, &enc, &prior, &x0, &spec, 0.01, &draws).unwrap();
        let fd = fd_grads(corr.net.params(), 1e-5, |p| {
            let c = ConditionalNet::new(with_params(&corr.net, p), 2).unwrap();
            corrector_loss(&c, &enc, &prior, &x0, &spec, 0.01, &draws)
                .unwrap()
                .report
                .total
        });
        let err = crate::ndiff::relative_error(&loss.grads, &fd, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vae_elbo_values() {
        let spec = NetSpec::dense(2, &[], 2, Activation::Identity, 0).unwrap();
        let id = VaeDecoder::new(
            Mlp::from_params(spec.clone(), vec![Array2::eye(2), Mat::zeros((1, 2))]).unwrap(),
        )
        .unwrap();
        // mean encoder is the identity with tiny σ
        let enc = TimeEncoder::linear(&Array2::eye(2), &[0.0, 0.0], &[-7.0, -7.0]).unwrap();
        let x = array![[1.0, 1.0]];
        let zero_noise = Mat::zeros((1, 2));
        let perfect = vae_beta_elbo(&enc, &id, &x, 0.0, &zero_noise).unwrap();
        assert_eq!(perfect.report.total, 0.0);
        let zero = VaeDecoder::new(Mlp::zeros(spec)).unwrap();
        let r = vae_beta_elbo(&enc, &zero, &x, 0.0, &zero_noise).unwrap();
        assert!((r.report.total - 1.0).abs() < 1e-15);
        let r1 = vae_beta_elbo(&enc, &zero, &x, 0.1, &zero_noise).unwrap().report;
        let r2 = vae_beta_elbo(&enc, &zero, &x, 0.2, &zero_noise).unwrap().report;
        assert!(((r2.total - r2.dsm_term) - 2.0 * (r1.total - r1.dsm_term)).abs() < 1e-12);
    }

    #[test]
    fn vae_gradient_matches_finite_differences() {
        let mut rng = seeded(11);
        let enc = small_encoder(&mut rng, 3, 2, 0);
        let dec = VaeDecoder::new(Mlp::init(
            NetSpec::dense(2, &[5], 3, Activation::Gelu, 0).unwrap(),
            &mut rng,
        ))
        .unwrap();
        let x0 = standard_normal(&mut rng, 5, 3);
        let e = standard_normal(&mut rng, 5, 2);
        let loss = vae_beta_elbo(&enc, &dec, &x0, 0.2, &e).unwrap();
        let all: Vec<Mat> = enc.net.params().iter().chain(dec.net.params()).cloned().collect();
        let ne = enc.net.params().len();
        let fd = fd_grads(&all, 1e-5, |p| {
            let en = TimeEncoder::new(with_params(&enc.net, &p[..ne])).unwrap();
            let de = VaeDecoder::new(with_params(&dec.net, &p[ne..])).unwrap();
            vae_beta_elbo(&en, &de, &x0, 0.2, &e).unwrap().report.total
        });
        let err = crate::ndiff::relative_error(&loss.grads, &fd, 1e-6);
        assert!(err < 1e-4, "{err}");
    }

    /// Exact-expectation draws: sigma points over the
    /// independent Gaussians `(x_0, u, ε)`, with `z = A x_0 + b + s u`.
    fn exact_draws(w: &GaussianWorld) -> (Mat, Mat, Mat, Mat) {
        let (d, k) = (w.data_dim(), w.latent_dim());
        let n = 2 * d + k;
        let mut mean = DVector::zeros(n);
        mean.rows_mut(0, d).copy_from(&w.mean);
        let mut cov = DMatrix::identity(n, n);
        cov.view_mut((0, 0), (d, d)).copy_from(&w.cov);
        let pts = sigma_points(&mean, &cov).unwrap();
        let x0 = pts.slice(s![.., ..d]).to_owned();
        let u = pts.slice(s![.., d..d + k]).to_owned();
        let eps = pts.slice(s![.., d + k..]).to_owned();
        let z = Mat::from_shape_fn((pts.nrows(), k), |(i, j)| {
            (0..d).map(|c| w.enc_matrix[(j, c)] * x0[[i, c]]).sum::<f64>()
                + w.enc_bias[j]
                + w.enc_std * u[[i, j]]
        });
        (x0, u, eps, z)
    }

    #[test]
    fn analytic_optimal_encoder_is_stationary_for_scorevae() {
        let mut rng = seeded(12);
        for _ in 0..5 {
            let w = GaussianWorld::random(&mut rng, 2, 1, SdeSpec::standard(2)).unwrap();
            let t = rng.random_range(0.1..0.9);
            let post = w.optimal_encoder(t).unwrap();
            let gain = Mat::from_shape_fn((1, 2), |(_, j)| post.gain[(0, j)]);
            let enc = TimeEncoder::linear(&gain, &[post.offset[0]], &[0.5 * post.cov[(0, 0)].ln()])
                .unwrap();
            let (x0, _, eps, z) = exact_draws(&w);
            let n = x0.nrows();
            let draws = Draws {
                t: vec![t; n],
                noise: eps,
                latent: LatentDraw::Fixed(z),
            };
            let prior = AnalyticPrior(&w);
            let loss = scorevae_loss(&enc, &prior, &x0, &w.spec, 0.0, &draws).unwrap();
            let norm: f64 = loss.grads.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
            assert!(norm < 1e-4, "gradient norm {norm}");
        }
    }

    #[test]
    fn analytic_conditional_score_attains_the_irreducible_cde_loss() {
        let mut rng = seeded(13);
        for _ in 0..5 {
            let w = GaussianWorld::random(&mut rng, 2, 1, SdeSpec::standard(2)).unwrap();
            let t = rng.random_range(0.1..0.9);
            let (a, sig) = {
                let k = w.spec.perturb_params(t).unwrap();
                (k.a, k.sigma)
            };
            // p(x_t | z) = N(a m + G (z − μ_z), Σc): score is linear in (x, z)
            let zero_z = DVector::zeros(1);
            let (mean0, cov_c) = w.conditional_gaussian(&zero_z, t).unwrap();
            let (mean1, _) = w.conditional_gaussian(&DVector::from_element(1, 1.0), t).unwrap();
            let g = &mean1 - &mean0;
            let prec = cov_c.clone().try_inverse().unwrap();
            // s = −P x + P g z + P mean0 ; network computes [x, z] W + b
            let mut wmat = Mat::zeros((3, 2));
            for j in 0..2 {
                for c in 0..2 {
                    wmat[[c, j]] = -prec[(j, c)];
                }
                wmat[[2, j]] = (&prec * &g)[j];
            }
            let pb = &prec * &mean0;
            let bias = Mat::from_shape_fn((1, 2), |(_, j)| pb[j]);
            let spec = NetSpec::dense(3, &[], 2, Activation::Identity, 0).unwrap();
            let net = ConditionalNet::new(Mlp::from_params(spec, vec![wmat, bias]).unwrap(), 2).unwrap();
            let enc = TimeEncoder::linear(
                &Mat::from_shape_fn((1, 2), |(_, j)| w.enc_matrix[(0, j)]),
                &[w.enc_bias[0]],
                &[w.enc_std.ln()],
            )
            .unwrap();
            let (x0, u, eps, _) = exact_draws(&w);
            let n = x0.nrows();
            let draws = Draws {
                t: vec![t; n],
                noise: eps,
                latent: LatentDraw::Noise(u),
            };
            let loss = cde_loss(&net, &enc, &x0, &w.spec, WeightingKind::Likelihood, 0.0, LatentMode::Sample, &draws)
                .unwrap();
            let lam = w.spec.beta(t).unwrap();
            let constant = 0.5 * lam * (2.0 / (sig * sig) - prec.trace());
            assert!(
                (loss.report.dsm_term - constant).abs() < 1e-9 * constant,
                "{} vs {constant} (a = {a})",
                loss.report.dsm_term
            );
            let n_net = net.net.params().len();
            let norm: f64 = loss.grads[..n_net]
                .iter()
                .flat_map(|g| g.iter())
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            assert!(norm < 1e-6, "gradient norm {norm}");
        }
    }

    #[test]
    fn bound_integrand_divergence_term() {
        let spec = SdeSpec::standard(3);
        let t = 0.4;
        let v = bound_integrand(&spec, t, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!((v - (-0.5 * spec.beta(t).unwrap() * 3.0)).abs() < 1e-14);
        // perfect model: ½ g² ‖u‖² + ∇·f
        let u = [1.0, -2.0, 0.5];
        let v = bound_integrand(&spec, t, &u, &u).unwrap();
        let expect = 0.5 * spec.beta(t).unwrap() * 5.25 + spec.divergence_drift(t).unwrap();
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn analytic_bound_is_tight() {
        let mut rng = seeded(14);
        let w = GaussianWorld::random_standard_latent(&mut rng, 2, 1, SdeSpec::standard(2)).unwrap();
        let x0 = w.sample_data(&mut rng, 1).unwrap();
        let x0v: Vec<f64> = x0.iter().copied().collect();
        let exact = w.log_density(&DVector::from_vec(x0v.clone())).unwrap();
        let est = likelihood_bound(
            &AnalyticEncoder(&w),
            &AnalyticPrior(&w),
            &x0v,
            &w.spec,
            40_000,
            T_EPS,
            &mut rng,
        )
        .unwrap();
        assert!(est.value <= exact + 3.0 * est.std_err, "{est:?} vs {exact}");
        assert!(exact - est.value < 0.1, "{est:?} vs {exact}");
    }

    #[test]
    fn bound_estimates_agree_across_seeds() {
        let mut rng = seeded(15);
        let w = GaussianWorld::random_standard_latent(&mut rng, 2, 2, SdeSpec::standard(2)).unwrap();
        let x0: Vec<f64> = w.sample_data(&mut rng, 1).unwrap().iter().copied().collect();
        let a = likelihood_bound(&AnalyticEncoder(&w), &AnalyticPrior(&w), &x0, &w.spec, 10_000, T_EPS, &mut seeded(1))
            .unwrap();
        let b = likelihood_bound(&AnalyticEncoder(&w), &AnalyticPrior(&w), &x0, &w.spec, 10_000, T_EPS, &mut seeded(2))
            .unwrap();
        let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
        assert!((a.value - b.value).abs() < 3.0 * se);
        assert!(likelihood_bound(&AnalyticEncoder(&w), &AnalyticPrior(&w), &x0, &w.spec, 0, T_EPS, &mut rng).is_err());
    }
}
