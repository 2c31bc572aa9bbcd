//! Bayes-rule score composition.
//!
//! The conditional score used for decoding is assembled from parts that are
//! trained separately:
//!
//! ```text
//! s(x_t, z, t) = s_prior(x_t, t) + ∇ₓ ln q_t(z | x_t) [+ c(x_t, z, t)]
//! ```
//!
//! Reconstruction draws `z` from the encoder at `t = 0`, starts the reverse
//! SDE from the standard-normal prior at `T`, and integrates with the
//! composed field.

use crate::diffproc::{integrate_reverse, SamplerSettings, SdeSpec};
use crate::models::{reparameterize, LatentMode};
use crate::ndiff::Mat;
use crate::{Error, Result};
use rand::Rng;

/// Approximates `∇ ln p_t(x)`.
pub trait PriorScore {
    fn prior_score(&self, x: &Mat, t: &[f64]) -> Result<Mat>;
}

/// A latent posterior `q_t(z | x_t)`.
pub trait LatentPosterior {
    fn latent_dim(&self) -> usize;

    /// `∇ₓ ln q_t(z | x)`, row-wise.
    fn posterior_score(&self, z: &Mat, x: &Mat, t: &[f64]) -> Result<Mat>;

    /// Mean and per-dimension std of the diagonal `q_0(z | x_0)`.
    fn clean_moments(&self, x0: &Mat) -> Result<(Mat, Mat)>;
}

/// Additive residual on top of the composed score.
pub trait ScoreCorrection {
    fn correction(&self, x: &Mat, z: &Mat, t: &[f64]) -> Result<Mat>;
}

/// Draws latents for a batch of clean inputs.
pub fn encode_latents<E, R>(encoder: &E, x0: &Mat, mode: LatentMode, rng: &mut R) -> Result<Mat>
where
    E: LatentPosterior + ?Sized,
    R: Rng + ?Sized,
{
    let (mu, sigma) = encoder.clean_moments(x0)?;
    Ok(reparameterize(&mu, &sigma, mode, rng))
}

/// A frozen prior, an encoder, and an optional corrector.
#[derive(Clone, Copy)]
pub struct ComposedScore<'a> {
    pub prior: &'a dyn PriorScore,
    pub encoder: &'a dyn LatentPosterior,
    pub corrector: Option<&'a dyn ScoreCorrection>,
}

impl<'a> ComposedScore<'a> {
    pub fn new(prior: &'a dyn PriorScore, encoder: &'a dyn LatentPosterior) -> Self {
        Self {
            prior,
            encoder,
            corrector: None,
        }
    }

    pub fn with_corrector(mut self, corrector: &'a dyn ScoreCorrection) -> Self {
        self.corrector = Some(corrector);
        self
    }

    /// `s_prior + ∇ₓ ln q_t(z | x) (+ c)` row-wise.
    pub fn conditional_score(&self, x_t: &Mat, z: &Mat, t: &[f64]) -> Result<Mat> {
        if z.nrows() != x_t.nrows() || z.ncols() != self.encoder.latent_dim() {
            return Err(Error::shape(
                "condition latents",
                format!("{:?}", (x_t.nrows(), self.encoder.latent_dim())),
                format!("{:?}", z.dim()),
            ));
        }
        let mut s = self.prior.prior_score(x_t, t)?;
        s += &self.encoder.posterior_score(z, x_t, t)?;
        if let Some(c) = self.corrector {
            s += &c.correction(x_t, z, t)?;
        }
        Ok(s)
    }

    /// Runs the conditional reverse SDE for fixed latents, one row each.
    pub fn decode<R: Rng + ?Sized>(
        &self,
        spec: &SdeSpec,
        z: &Mat,
        settings: SamplerSettings,
        rng: &mut R,
    ) -> Result<Mat> {
        let n = z.nrows();
        integrate_reverse(
            |x, t| self.conditional_score(x, z, &vec![t; n]),
            spec,
            n,
            settings,
            rng,
        )
    }

    /// Encodes `x0` at `t = 0` and decodes the latents back.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        spec: &SdeSpec,
        x0: &Mat,
        settings: SamplerSettings,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<Reconstruction> {
        let z = encode_latents(self.encoder, x0, mode, rng)?;
        let x = self.decode(spec, &z, settings, rng)?;
        Ok(Reconstruction { z, x })
    }
}

/// Latents and the reconstructions decoded from them.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub z: Mat,
    pub x: Mat,
}
