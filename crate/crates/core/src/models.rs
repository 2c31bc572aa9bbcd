//! The parameterized components: unconditional score model, time-dependent
//! Gaussian encoder, residual corrector, and the Gaussian VAE decoder.

use crate::compose::{LatentPosterior, PriorScore, ScoreCorrection};
use crate::diffproc::SdeSpec;
use crate::error::ensure_finite;
use crate::ndiff::{Activation, Mat, Mlp, NetSpec, Tape, Var};
use crate::random::standard_normal;
use crate::{Error, Result};
use rand::Rng;
use std::f64::consts::PI;

/// Clamp range for the encoder's log standard deviation.
pub const LOG_SIGMA_MIN: f64 = -7.0;
pub const LOG_SIGMA_MAX: f64 = 2.0;

/// Post-processing of a score-type network's output.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum OutputScale {
    /// The network output is the score.
    #[default]
    Raw,
    /// The output is divided by the perturbation std `σ(t)`, so the network
    /// predicts a noise-sized quantity and the score may grow like `1/σ`.
    InverseSigma(SdeSpec),
}

impl OutputScale {
    /// Per-row multipliers, or `None` for [`OutputScale::Raw`].
    pub fn factors(&self, t: &[f64]) -> Result<Option<Vec<f64>>> {
        let OutputScale::InverseSigma(spec) = self else {
            return Ok(None);
        };
        t.iter()
            .map(|&t| {
                let s = spec.perturb_params(t)?.sigma;
                if s > 0.0 {
                    Ok(1.0 / s)
                } else {
                    Err(Error::Domain {
                        what: "t",
                        value: t,
                        domain: "times with σ(t) > 0".into(),
                    })
                }
            })
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    fn apply(&self, mut out: Mat, t: &[f64]) -> Result<Mat> {
        if let Some(f) = self.factors(t)? {
            for (mut row, f) in out.rows_mut().into_iter().zip(f) {
                row *= f;
            }
        }
        Ok(out)
    }

    fn apply_tape<'t>(&self, out: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        Ok(match self.factors(t)? {
            Some(f) => out.scale_rows(&f),
            None => out,
        })
    }
}

/// How a latent is taken from `q_0(z | x_0)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LatentMode {
    /// `z = μ + σ ⊙ ε`.
    #[default]
    Sample,
    /// `z = μ`.
    Mean,
}

fn check_finite(m: &Mat, what: &str) -> Result<()> {
    ensure_finite(m.iter(), || what.to_string())
}

/// Unconditional score network `s(x_t, t) ≈ ∇ ln p_t(x_t)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreModel {
    pub net: Mlp,
    pub output: OutputScale,
}

impl ScoreModel {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.spec().input_width() != net.spec().output_width() {
            return Err(Error::shape(
                "score model output",
                net.spec().input_width(),
                net.spec().output_width(),
            ));
        }
        if net.spec().time_features == 0 {
            return Err(Error::Config("a score model needs time features".into()));
        }
        Ok(Self {
            net,
            output: OutputScale::Raw,
        })
    }

    pub fn with_output(mut self, output: OutputScale) -> Self {
        self.output = output;
        self
    }

    /// Randomly initialized with a zeroed output layer.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init(spec, rng).with_zero_output())
    }

    pub fn dim(&self) -> usize {
        self.net.spec().input_width()
    }

    pub fn score(&self, x_t: &Mat, t: &[f64]) -> Result<Mat> {
        let s = self.output.apply(self.net.forward(x_t, Some(t))?, t)?;
        check_finite(&s, "score model output")?;
        Ok(s)
    }

    pub fn score_tape<'t>(&self, params: &[Var<'t>], x_t: Var<'t>, t: &[f64]) -> Result<Var<'t>> {
        let out = self.net.forward_tape(params, x_t, Some(t))?;
        self.output.apply_tape(out, t)
    }
}

impl PriorScore for ScoreModel {
    fn prior_score(&self, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.score(x, t)
    }
}

/// Mean and clamped log-std of `q_t(z | x_t)` on a tape.
pub struct TapeMoments<'t> {
    pub mu: Var<'t>,
    pub log_sigma: Var<'t>,
}

/// Time-dependent diagonal Gaussian encoder
/// `q_t(z | x_t) = N(μ(x_t, t), diag σ(x_t, t)²)`.
///
/// The network emits `[μ, log σ]`; `log σ` is clamped to
/// [`LOG_SIGMA_MIN`]`..=`[`LOG_SIGMA_MAX`]. With `time_features = 0` the
/// encoder ignores time, which is how the baselines' encoders are built.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEncoder {
    pub net: Mlp,
}

impl TimeEncoder {
    pub fn new(net: Mlp) -> Result<Self> {
        if !net.spec().output_width().is_multiple_of(2) {
            return Err(Error::shape(
                "encoder output (mean and log-std halves)",
                "an even width",
                net.spec().output_width(),
            ));
        }
        Ok(Self { net })
    }

    /// Randomly initialized with a zeroed output layer, so training starts
    /// from `q = N(0, I)` with no dependence on the input.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init(spec, rng).with_zero_output())
    }

    /// Time-independent encoder with `μ = A x + b` (`A` is latent × data)
    /// and a constant `log σ`.
    pub fn linear(a: &Mat, b: &[f64], log_sigma: &[f64]) -> Result<Self> {
        let (k, d) = a.dim();
        if b.len() != k || log_sigma.len() != k {
            return Err(Error::shape(
                "linear encoder offsets",
                k,
                format!("{} and {}", b.len(), log_sigma.len()),
            ));
        }
        let spec = NetSpec::dense(d, &[], 2 * k, Activation::Identity, 0)?;
        let mut w = Mat::zeros((d, 2 * k));
        w.slice_mut(ndarray::s![.., ..k]).assign(&a.t());
        let mut bias = Mat::zeros((1, 2 * k));
        for j in 0..k {
            bias[[0, j]] = b[j];
            bias[[0, k + j]] = log_sigma[j];
        }
        Self::new(Mlp::from_params(spec, vec![w, bias])?)
    }

    pub fn data_dim(&self) -> usize {
        self.net.spec().input_width()
    }

    pub fn latent_dim(&self) -> usize {
        self.net.spec().output_width() / 2
    }

    pub fn is_time_dependent(&self) -> bool {
        self.net.spec().time_features > 0
    }

    fn time_arg<'a>(&self, t: &'a [f64]) -> Option<&'a [f64]> {
        self.is_time_dependent().then_some(t)
    }

    /// `(μ, σ)` row-wise.
    pub fn encode(&self, x_t: &Mat, t: &[f64]) -> Result<(Mat, Mat)> {
        let out = self.net.forward(x_t, self.time_arg(t))?;
        check_finite(&out, "encoder output")?;
        let k = self.latent_dim();
        let mu = out.slice(ndarray::s![.., ..k]).to_owned();
        let sigma = out
            .slice(ndarray::s![.., k..])
            .mapv(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX).exp());
        Ok((mu, sigma))
    }

    pub fn moments_tape<'t>(
        &self,
        params: &[Var<'t>],
        x_t: Var<'t>,
        t: &[f64],
    ) -> Result<TapeMoments<'t>> {
        let out = self.net.forward_tape(params, x_t, self.time_arg(t))?;
        let k = self.latent_dim();
        Ok(TapeMoments {
            mu: out.slice_cols(0, k),
            log_sigma: out.slice_cols(k, 2 * k).clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX),
        })
    }

    /// Row-wise `ln q_t(z | x_t)` as an `n×1` column.
    pub fn log_density_tape<'t>(
        &self,
        params: &[Var<'t>],
        z: Var<'t>,
        x_t: Var<'t>,
        t: &[f64],
    ) -> Result<Var<'t>> {
        if z.shape() != (x_t.shape().0, self.latent_dim()) {
            return Err(Error::shape(
                "latent batch",
                format!("{:?}", (x_t.shape().0, self.latent_dim())),
                format!("{:?}", z.shape()),
            ));
        }
        let m = self.moments_tape(params, x_t, t)?;
        Ok(gaussian_log_density_tape(z, m.mu, m.log_sigma))
    }

    /// `∇_{x_t} ln q_t(z | x_t)` on the tape, differentiable again.
    pub fn score_tape<'t>(
        &self,
        params: &[Var<'t>],
        z: Var<'t>,
        x_t: Var<'t>,
        t: &[f64],
    ) -> Result<Var<'t>> {
        let tape = x_t.tape();
        let total = self.log_density_tape(params, z, x_t, t)?.sum_all();
        Ok(tape.gradient(total, &[x_t])[0])
    }

    /// Row-wise `ln q_t(z | x_t)`.
    pub fn encoder_logdensity(&self, z: &Mat, x_t: &Mat, t: &[f64]) -> Result<Vec<f64>> {
        let (mu, sigma) = self.encode(x_t, t)?;
        if z.dim() != mu.dim() {
            return Err(Error::shape(
                "latent batch",
                format!("{:?}", mu.dim()),
                format!("{:?}", z.dim()),
            ));
        }
        Ok(diag_gaussian_logdensity(z, &mu, &sigma))
    }

    /// `∇_{x_t} ln q_t(z | x_t)` row-wise, by reverse-mode differentiation.
    pub fn encoder_score(&self, z: &Mat, x_t: &Mat, t: &[f64]) -> Result<Mat> {
        let tape = Tape::new();
        let params = self.net.constants(&tape);
        let x = tape.constant(x_t.clone());
        let s = self.score_tape(&params, tape.constant(z.clone()), x, t)?;
        let out = (*s.value()).clone();
        check_finite(&out, "encoder score")?;
        Ok(out)
    }

    /// Reparameterized draw from `q_0(z | x_0)`.
    pub fn sample_latent<R: Rng + ?Sized>(
        &self,
        x0: &Mat,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<Mat> {
        let (mu, sigma) = self.encode(x0, &vec![0.0; x0.nrows()])?;
        Ok(reparameterize(&mu, &sigma, mode, rng))
    }
}

impl LatentPosterior for TimeEncoder {
    fn latent_dim(&self) -> usize {
        TimeEncoder::latent_dim(self)
    }

    fn posterior_score(&self, z: &Mat, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.encoder_score(z, x, t)
    }

    fn clean_moments(&self, x0: &Mat) -> Result<(Mat, Mat)> {
        self.encode(x0, &vec![0.0; x0.nrows()])
    }
}

/// `μ + σ ⊙ ε` (or `μ` in mean mode).
pub fn reparameterize<R: Rng + ?Sized>(mu: &Mat, sigma: &Mat, mode: LatentMode, rng: &mut R) -> Mat {
    match mode {
        LatentMode::Mean => mu.clone(),
        LatentMode::Sample => {
            let eps = standard_normal(rng, mu.nrows(), mu.ncols());
            mu + &(sigma * &eps)
        }
    }
}

/// Row-wise `Σᵢ −(zᵢ−μᵢ)²/(2σᵢ²) − ln σᵢ − ½ ln 2π`.
pub fn diag_gaussian_logdensity(z: &Mat, mu: &Mat, sigma: &Mat) -> Vec<f64> {
    let half_log_2pi = 0.5 * (2.0 * PI).ln();
    (0..z.nrows())
        .map(|i| {
            (0..z.ncols())
                .map(|j| {
                    let (d, s) = (z[[i, j]] - mu[[i, j]], sigma[[i, j]]);
                    -d * d / (2.0 * s * s) - s.ln() - half_log_2pi
                })
                .sum()
        })
        .collect()
}

/// Tape version of [`diag_gaussian_logdensity`] parameterized by `log σ`.
pub fn gaussian_log_density_tape<'t>(z: Var<'t>, mu: Var<'t>, log_sigma: Var<'t>) -> Var<'t> {
    let (n, k) = z.shape();
    let inv_var = log_sigma.scale(-2.0).exp();
    z.sub(mu)
        .square()
        .mul(inv_var)
        .scale(-0.5)
        .sub(log_sigma)
        .sum_cols()
        .add_const(Mat::from_elem((n, 1), -0.5 * k as f64 * (2.0 * PI).ln()))
}

/// Network over `(x_t, z, t)` producing a data-space vector. Serves both as
/// the residual corrector and as the baseline's conditional score model.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalNet {
    pub net: Mlp,
    pub output: OutputScale,
    latent_dim: usize,
}

/// Residual added on top of the composed score.
pub type Corrector = ConditionalNet;

impl ConditionalNet {
    pub fn new(net: Mlp, data_dim: usize) -> Result<Self> {
        let spec = net.spec();
        if spec.output_width() != data_dim || spec.input_width() <= data_dim {
            return Err(Error::shape(
                "conditional network (input = data + latent, output = data)",
                format!("input > {data_dim}, output {data_dim}"),
                format!("input {}, output {}", spec.input_width(), spec.output_width()),
            ));
        }
        let latent_dim = spec.input_width() - data_dim;
        Ok(Self {
            net,
            output: OutputScale::Raw,
            latent_dim,
        })
    }

    pub fn with_output(mut self, output: OutputScale) -> Self {
        self.output = output;
        self
    }

    /// Randomly initialized with a zeroed output layer.
    pub fn init<R: Rng + ?Sized>(spec: NetSpec, data_dim: usize, rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init(spec, rng).with_zero_output(), data_dim)
    }

    pub fn data_dim(&self) -> usize {
        self.net.spec().output_width()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    fn time_arg<'a>(&self, t: &'a [f64]) -> Option<&'a [f64]> {
        (self.net.spec().time_features > 0).then_some(t)
    }

    pub fn eval(&self, x_t: &Mat, z: &Mat, t: &[f64]) -> Result<Mat> {
        if x_t.nrows() != z.nrows() {
            return Err(Error::shape("latent rows", x_t.nrows(), z.nrows()));
        }
        let input = ndarray::concatenate(ndarray::Axis(1), &[x_t.view(), z.view()])
            .expect("rows checked");
        let out = self.output.apply(self.net.forward(&input, self.time_arg(t))?, t)?;
        check_finite(&out, "conditional network output")?;
        Ok(out)
    }

    pub fn eval_tape<'t>(
        &self,
        params: &[Var<'t>],
        x_t: Var<'t>,
        z: Var<'t>,
        t: &[f64],
    ) -> Result<Var<'t>> {
        let out = self
            .net
            .forward_tape(params, x_t.concat_cols(z), self.time_arg(t))?;
        self.output.apply_tape(out, t)
    }
}

impl ScoreCorrection for ConditionalNet {
    fn correction(&self, x: &Mat, z: &Mat, t: &[f64]) -> Result<Mat> {
        self.eval(x, z, t)
    }
}

/// Gaussian VAE decoder mean `d(z)`; the output covariance is the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct VaeDecoder {
    pub net: Mlp,
}

impl VaeDecoder {
    pub fn new(net: Mlp) -> Result<Self> {
        if net.spec().time_features != 0 {
            return Err(Error::Config("the VAE decoder takes no time input".into()));
        }
        Ok(Self { net })
    }

    pub fn init<R: Rng + ?Sized>(spec: NetSpec, rng: &mut R) -> Result<Self> {
        Self::new(Mlp::init(spec, rng))
    }

    pub fn vae_decode(&self, z: &Mat) -> Result<Mat> {
        let out = self.net.forward(z, None)?;
        check_finite(&out, "decoder output")?;
        Ok(out)
    }

    pub fn decode_tape<'t>(&self, params: &[Var<'t>], z: Var<'t>) -> Result<Var<'t>> {
        self.net.forward_tape(params, z, None)
    }
}
