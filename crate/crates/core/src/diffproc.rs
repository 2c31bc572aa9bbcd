//! Variance-preserving forward diffusion, its Gaussian perturbation kernel,
//! the standard-normal prior, and Euler–Maruyama integration of the
//! reverse-time SDE.
//!
//! The forward process is `dx = -½β(t)x dt + √β(t) dw` with a linear
//! schedule `β(t) = β_min + (t/T)(β_max − β_min)`. Its kernel is
//! `p(x_t | x_0) = N(a(t)·x_0, σ(t)²I)` with `a = exp(-B/2)`,
//! `σ² = 1 − exp(-B)` and `B(t) = ∫₀ᵗ β`.

use crate::error::ensure_finite;
use crate::ndiff::Mat;
use crate::random::standard_normal;
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Parameters of the variance-preserving forward process.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_end: f64,
    pub dim: usize,
}

impl SdeSpec {
    pub fn new(beta_min: f64, beta_max: f64, t_end: f64, dim: usize) -> Result<Self> {
        let spec = Self {
            beta_min,
            beta_max,
            t_end,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `β ∈ [0.1, 20]` over `t ∈ [0, 1]`.
    pub fn standard(dim: usize) -> Self {
        Self {
            beta_min: 0.1,
            beta_max: 20.0,
            t_end: 1.0,
            dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta_min > 0.0 && self.beta_min <= self.beta_max && self.beta_max.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 < beta_min <= beta_max, got ({}, {})",
                self.beta_min, self.beta_max
            )));
        }
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::Config(format!("t_end must be positive, got {}", self.t_end)));
        }
        if self.dim == 0 {
            return Err(Error::Config("state dimension must be at least 1".into()));
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if (0.0..=self.t_end).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                what: "t",
                value: t,
                domain: format!("[0, {}]", self.t_end),
            })
        }
    }

    fn check_dim(&self, context: &'static str, x: &Mat) -> Result<()> {
        if x.ncols() == self.dim {
            Ok(())
        } else {
            Err(Error::shape(context, self.dim, x.ncols()))
        }
    }

    /// Noise rate `β(t)`.
    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_unchecked(t))
    }

    fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + (t / self.t_end) * (self.beta_max - self.beta_min)
    }

    /// `B(t) = ∫₀ᵗ β(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        self.check_time(t)?;
        Ok(self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.t_end)
    }

    /// Diffusion coefficient `g(t) = √β(t)`.
    pub fn diffusion(&self, t: f64) -> Result<f64> {
        Ok(self.beta(t)?.sqrt())
    }

    /// Signal scale and noise level of `p(x_t | x_0)`.
    pub fn perturb_params(&self, t: f64) -> Result<KernelParams> {
        let b = self.integrated_beta(t)?;
        Ok(KernelParams {
            a: (-0.5 * b).exp(),
            sigma: (-(-b).exp_m1()).sqrt(),
        })
    }

    /// `∇·f(x, t) = −½β(t)·dim`, independent of `x`.
    pub fn divergence_drift(&self, t: f64) -> Result<f64> {
        Ok(-0.5 * self.beta(t)? * self.dim as f64)
    }
}

/// `p(x_t | x_0) = N(a·x_0, σ²I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelParams {
    pub a: f64,
    pub sigma: f64,
}

/// Draws `x_t = a·x_0 + σ·ε` row-wise, each row at its own time.
pub fn sample_perturbed<R: Rng + ?Sized>(
    spec: &SdeSpec,
    x0: &Mat,
    t: &[f64],
    rng: &mut R,
) -> Result<Mat> {
    let noise = standard_normal(rng, x0.nrows(), x0.ncols());
    perturb_with_noise(spec, x0, t, &noise)
}

/// `x_t = a(t)·x_0 + σ(t)·noise` row-wise.
pub fn perturb_with_noise(spec: &SdeSpec, x0: &Mat, t: &[f64], noise: &Mat) -> Result<Mat> {
    spec.check_dim("perturbed state", x0)?;
    check_rows("time per row", x0.nrows(), t.len())?;
    ensure_finite(x0.iter(), || "clean state".into())?;
    let mut out = x0.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let k = spec.perturb_params(t[i])?;
        row.zip_mut_with(&noise.row(i), |x, &e| *x = k.a * *x + k.sigma * e);
    }
    Ok(out)
}

/// Score of the perturbation kernel, `−(x_t − a·x_0)/σ²`, row-wise.
pub fn transition_score(spec: &SdeSpec, x_t: &Mat, x0: &Mat, t: &[f64]) -> Result<Mat> {
    spec.check_dim("perturbed state", x_t)?;
    if x_t.dim() != x0.dim() {
        return Err(Error::shape(
            "transition score",
            format!("{:?}", x_t.dim()),
            format!("{:?}", x0.dim()),
        ));
    }
    check_rows("time per row", x_t.nrows(), t.len())?;
    let mut out = Mat::zeros(x_t.dim());
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let k = spec.perturb_params(t[i])?;
        if k.sigma == 0.0 {
            return Err(Error::Singular(format!(
                "transition score at t = {} where the kernel has zero variance",
                t[i]
            )));
        }
        let inv_var = 1.0 / (k.sigma * k.sigma);
        for j in 0..row.len() {
            row[j] = -(x_t[[i, j]] - k.a * x0[[i, j]]) * inv_var;
        }
    }
    Ok(out)
}

/// Row-wise `ln N(x; 0, I)`.
pub fn prior_logdensity(x: &Mat) -> Vec<f64> {
    let d = x.ncols() as f64;
    x.rows()
        .into_iter()
        .map(|r| -0.5 * (r.dot(&r) + d * (2.0 * PI).ln()))
        .collect()
}

/// One reverse-time Euler–Maruyama step from `t` to `t − dt`:
/// `x' = x − [f(x,t) − g²·score]dt + g√dt·ε`.
///
/// With `rng = None` the noise term is dropped.
pub fn reverse_step_em<R: Rng + ?Sized>(
    spec: &SdeSpec,
    x: &Mat,
    t: f64,
    dt: f64,
    score: &Mat,
    rng: Option<&mut R>,
) -> Result<Mat> {
    if !(dt > 0.0 && dt <= t) {
        return Err(Error::Domain {
            what: "dt",
            value: dt,
            domain: format!("(0, {t}]"),
        });
    }
    if x.dim() != score.dim() {
        return Err(Error::shape(
            "reverse step score",
            format!("{:?}", x.dim()),
            format!("{:?}", score.dim()),
        ));
    }
    ensure_finite(x.iter(), || format!("reverse step state at t = {t}"))?;
    ensure_finite(score.iter(), || format!("reverse step score at t = {t}"))?;
    let beta = spec.beta(t)?;
    // x - (-½βx - β s)dt = x(1 + ½β dt) + β dt s
    let mut next = x * (1.0 + 0.5 * beta * dt) + &(score * (beta * dt));
    if let Some(rng) = rng {
        let noise = standard_normal(rng, x.nrows(), x.ncols());
        next.scaled_add((beta * dt).sqrt(), &noise);
    }
    Ok(next)
}

/// Discretization of the reverse-time integration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerSettings {
    pub n_steps: usize,
    /// Integration stops here instead of at 0.
    pub t_eps: f64,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            n_steps: 1000,
            t_eps: 1e-3,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self, spec: &SdeSpec) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        if !(self.t_eps > 0.0 && self.t_eps < spec.t_end) {
            return Err(Error::Config(format!(
                "t_eps must lie in (0, {}), got {}",
                spec.t_end, self.t_eps
            )));
        }
        Ok(())
    }
}

/// Draws `n_samples` states from the prior and integrates the reverse SDE
/// from `T` down to `t_eps` with the supplied score field.
pub fn integrate_reverse<F, R>(
    score_field: F,
    spec: &SdeSpec,
    n_samples: usize,
    settings: SamplerSettings,
    rng: &mut R,
) -> Result<Mat>
where
    F: FnMut(&Mat, f64) -> Result<Mat>,
    R: Rng + ?Sized,
{
    let x_end = standard_normal(rng, n_samples, spec.dim);
    integrate_reverse_from(score_field, spec, x_end, settings, rng)
}

/// As [`integrate_reverse`], starting from a given state at time `T`.
pub fn integrate_reverse_from<F, R>(
    mut score_field: F,
    spec: &SdeSpec,
    x_end: Mat,
    settings: SamplerSettings,
    rng: &mut R,
) -> Result<Mat>
where
    F: FnMut(&Mat, f64) -> Result<Mat>,
    R: Rng + ?Sized,
{
    settings.validate(spec)?;
    spec.check_dim("initial reverse state", &x_end)?;
    let dt = (spec.t_end - settings.t_eps) / settings.n_steps as f64;
    let mut x = x_end;
    for step in 0..settings.n_steps {
        let t = spec.t_end - step as f64 * dt;
        let score = score_field(&x, t)?;
        if score.iter().any(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "score field at step {step} (t = {t:.6})"
            )));
        }
        x = reverse_step_em(spec, &x, t, dt.min(t), &score, Some(&mut *rng))?;
    }
    Ok(x)
}

fn check_rows(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::shape(context, expected, actual))
    }
}
