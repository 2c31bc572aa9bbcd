//! A linear-Gaussian world in which every score has a closed form.
//!
//! Data `x_0 ~ N(m, C)`, latent `z | x_0 ~ N(A x_0 + b, s² I)`, and the
//! variance-preserving kernel `x_t | x_0 ~ N(a x_0, σ² I)`. The pair
//! `(x_t, z)` is then jointly Gaussian with
//!
//! ```text
//! Σx = a²C + σ²I      Σz = A C Aᵀ + s²I      Cov(z, x_t) = K = a A C
//! ```
//!
//! so the marginal, posterior and conditional scores are all linear in
//! their arguments. [`GaussianWorld::conditional_score`] is computed from
//! `p(x_t | z)` directly, never by summing the other two, which keeps the
//! Bayes-identity checks meaningful.

use crate::compose::{LatentPosterior, PriorScore};
use crate::diffproc::SdeSpec;
use crate::ndiff::Mat;
use crate::random::standard_normal;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use std::f64::consts::PI;

/// Largest data or latent dimension accepted.
pub const MAX_WORLD_DIM: usize = 4;
/// Worlds whose covariances exceed this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e8;

#[derive(Clone, Debug)]
pub struct GaussianWorld {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub enc_matrix: DMatrix<f64>,
    pub enc_bias: DVector<f64>,
    pub enc_std: f64,
    pub spec: SdeSpec,
}

/// `N(gain·x + offset, cov)` over the latent, as a function of `x`.
#[derive(Clone, Debug)]
pub struct LinearGaussian {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub cov: DMatrix<f64>,
}

fn inverse_spd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "{what} has eigenvalues in [{lo:e}, {hi:e}]"
        )));
    }
    sym.cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Singular(format!("{what} is not positive definite")))
}

fn gaussian_logdensity(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("covariance is not positive definite".into()))?;
    let diff = x - mean;
    let sol = chol.solve(&diff);
    let logdet: f64 = chol.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    Ok(-0.5 * (diff.dot(&sol) + logdet + x.len() as f64 * (2.0 * PI).ln()))
}

fn row(m: &Mat, i: usize) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.row(i).iter().copied())
}

fn random_matrix<R: Rng + ?Sized>(rng: &mut R, r: usize, c: usize) -> DMatrix<f64> {
    let m = standard_normal(rng, r, c);
    DMatrix::from_fn(r, c, |i, j| m[[i, j]])
}

impl GaussianWorld {
    pub fn new(
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        enc_matrix: DMatrix<f64>,
        enc_bias: DVector<f64>,
        enc_std: f64,
        spec: SdeSpec,
    ) -> Result<Self> {
        let d = mean.len();
        let k = enc_bias.len();
        if d == 0 || d > MAX_WORLD_DIM || k == 0 || k > MAX_WORLD_DIM {
            return Err(Error::Config(format!(
                "world dimensions ({d}, {k}) must lie in 1..={MAX_WORLD_DIM}"
            )));
        }
        if cov.shape() != (d, d) || enc_matrix.shape() != (k, d) || spec.dim != d {
            return Err(Error::shape(
                "gaussian world",
                format!("cov {d}x{d}, encoder {k}x{d}, sde dim {d}"),
                format!(
                    "cov {:?}, encoder {:?}, sde dim {}",
                    cov.shape(),
                    enc_matrix.shape(),
                    spec.dim
                ),
            ));
        }
        if (&cov - cov.transpose()).abs().max() > 1e-12 * (1.0 + cov.abs().max()) {
            return Err(Error::Config("data covariance is not symmetric".into()));
        }
        if !(enc_std > 0.0) {
            return Err(Error::Config(format!("encoder std must be positive, got {enc_std}")));
        }
        inverse_spd(&cov, "data covariance")?;
        Ok(Self {
            mean,
            cov,
            enc_matrix,
            enc_bias,
            enc_std,
            spec,
        })
    }

    /// A random well-conditioned world with data dim `d` and latent dim `k`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, d: usize, k: usize, spec: SdeSpec) -> Result<Self> {
        let l = random_matrix(rng, d, d) * 0.6;
        let cov = &l * l.transpose() + DMatrix::identity(d, d) * 0.3;
        let mean = DVector::from_iterator(d, standard_normal(rng, 1, d).iter().map(|v| 0.5 * v));
        let a = random_matrix(rng, k, d);
        let b = DVector::from_iterator(k, standard_normal(rng, 1, k).iter().map(|v| 0.3 * v));
        let s = rng.random_range(0.3..1.2);
        Self::new(mean, (&cov + cov.transpose()) * 0.5, a, b, s, SdeSpec { dim: d, ..spec })
    }

    /// A random world whose latent marginal is exactly `N(0, I)`, so the
    /// standard-normal latent prior of the bound is the true one.
    pub fn random_standard_latent<R: Rng + ?Sized>(
        rng: &mut R,
        d: usize,
        k: usize,
        spec: SdeSpec,
    ) -> Result<Self> {
        let base = Self::random(rng, d, k, spec)?;
        let s: f64 = rng.random_range(0.2..0.8);
        // A = sqrt(1 − s²)·G^{-1/2}·B with G = B C Bᵀ gives A C Aᵀ = (1 − s²)I.
        let b = base.enc_matrix.clone();
        let g = &b * &base.cov * b.transpose();
        let eig = ((&g + g.transpose()) * 0.5).symmetric_eigen();
        if eig.eigenvalues.iter().any(|&v| v <= 1e-8) {
            return Err(Error::Singular("latent projection is rank deficient".into()));
        }
        let inv_sqrt = &eig.eigenvectors
            * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
            * eig.eigenvectors.transpose();
        let a = inv_sqrt * b * (1.0 - s * s).sqrt();
        let bias = -(&a * &base.mean);
        Self::new(base.mean, base.cov, a, bias, s, base.spec)
    }

    pub fn data_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.enc_bias.len()
    }

    fn kernel(&self, t: f64) -> Result<(f64, f64)> {
        let k = self.spec.perturb_params(t)?;
        Ok((k.a, k.sigma))
    }

    /// `Σx(t) = a²C + σ²I`.
    pub fn marginal_cov(&self, t: f64) -> Result<DMatrix<f64>> {
        let (a, s) = self.kernel(t)?;
        let d = self.data_dim();
        Ok(&self.cov * (a * a) + DMatrix::identity(d, d) * (s * s))
    }

    pub fn latent_mean(&self) -> DVector<f64> {
        &self.enc_matrix * &self.mean + &self.enc_bias
    }

    pub fn latent_cov(&self) -> DMatrix<f64> {
        let k = self.latent_dim();
        &self.enc_matrix * &self.cov * self.enc_matrix.transpose()
            + DMatrix::identity(k, k) * self.enc_std.powi(2)
    }

    /// `∇ ln p_t(x) = −Σx⁻¹(x − a m)`.
    pub fn marginal_score(&self, x: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
        let (a, _) = self.kernel(t)?;
        let inv = inverse_spd(&self.marginal_cov(t)?, "diffused data covariance")?;
        Ok(-(inv * (x - &self.mean * a)))
    }

    /// Exact `p(z | x_t)` as a linear-Gaussian map of `x_t`.
    pub fn optimal_encoder(&self, t: f64) -> Result<LinearGaussian> {
        let (a, _) = self.kernel(t)?;
        let sx_inv = inverse_spd(&self.marginal_cov(t)?, "diffused data covariance")?;
        let cross = &self.enc_matrix * &self.cov * a;
        let gain = &cross * &sx_inv;
        let cov = self.latent_cov() - &gain * cross.transpose();
        let offset = self.latent_mean() - &gain * (&self.mean * a);
        Ok(LinearGaussian {
            gain,
            offset,
            cov: (&cov + cov.transpose()) * 0.5,
        })
    }

    /// `∇ₓ ln p(z | x_t) = Mᵀ S⁻¹ (z − (A m + b) − M(x − a m))`.
    pub fn posterior_score(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        let post = self.optimal_encoder(t)?;
        let s_inv = inverse_spd(&post.cov, "latent posterior covariance")?;
        let resid = z - (&post.gain * x + &post.offset);
        Ok(post.gain.transpose() * s_inv * resid)
    }

    /// Moments of `p(x_t | z)`, from the joint Gaussian directly.
    pub fn conditional_gaussian(
        &self,
        z: &DVector<f64>,
        t: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (a, _) = self.kernel(t)?;
        let sz_inv = inverse_spd(&self.latent_cov(), "latent covariance")?;
        let cross = &self.enc_matrix * &self.cov * a;
        let mean = &self.mean * a + cross.transpose() * &sz_inv * (z - self.latent_mean());
        let cov = self.marginal_cov(t)? - cross.transpose() * sz_inv * &cross;
        Ok((mean, (&cov + cov.transpose()) * 0.5))
    }

    /// `∇ₓ ln p(x_t | z)`.
    pub fn conditional_score(
        &self,
        z: &DVector<f64>,
        x: &DVector<f64>,
        t: f64,
    ) -> Result<DVector<f64>> {
        let (mean, cov) = self.conditional_gaussian(z, t)?;
        let inv = inverse_spd(&cov, "conditional covariance")?;
        Ok(-(inv * (x - mean)))
    }

    /// `ln N(x_0; m, C)`.
    pub fn log_density(&self, x0: &DVector<f64>) -> Result<f64> {
        gaussian_logdensity(x0, &self.mean, &self.cov)
    }

    /// `ln p_t(x)` of the diffused marginal.
    pub fn marginal_log_density(&self, x: &DVector<f64>, t: f64) -> Result<f64> {
        let (a, _) = self.kernel(t)?;
        gaussian_logdensity(x, &(&self.mean * a), &self.marginal_cov(t)?)
    }

    /// `n` draws of `x_0`, one per row.
    pub fn sample_data<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Mat> {
        let chol = self
            .cov
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Singular("data covariance".into()))?;
        let l = chol.l();
        let d = self.data_dim();
        let eps = standard_normal(rng, n, d);
        Ok(Mat::from_shape_fn((n, d), |(i, j)| {
            self.mean[j] + (0..=j).map(|c| l[(j, c)] * eps[[i, c]]).sum::<f64>()
        }))
    }

    /// `z ~ N(A x_0 + b, s²I)` row-wise.
    pub fn sample_latent<R: Rng + ?Sized>(&self, rng: &mut R, x0: &Mat) -> Mat {
        let eps = standard_normal(rng, x0.nrows(), self.latent_dim());
        let mut z = Mat::zeros((x0.nrows(), self.latent_dim()));
        for i in 0..x0.nrows() {
            let mu = &self.enc_matrix * row(x0, i) + &self.enc_bias;
            for j in 0..self.latent_dim() {
                z[[i, j]] = mu[j] + self.enc_std * eps[[i, j]];
            }
        }
        z
    }

    /// Applies a row-vector function across a batch.
    fn map_rows(
        &self,
        x: &Mat,
        t: &[f64],
        mut f: impl FnMut(usize, &DVector<f64>, f64) -> Result<DVector<f64>>,
    ) -> Result<Mat> {
        if x.ncols() != self.data_dim() {
            return Err(Error::shape("world state", self.data_dim(), x.ncols()));
        }
        if t.len() != x.nrows() {
            return Err(Error::shape("time per row", x.nrows(), t.len()));
        }
        let mut out = Mat::zeros(x.dim());
        for (i, &ti) in t.iter().enumerate() {
            let v = f(i, &row(x, i), ti)?;
            out.row_mut(i).iter_mut().zip(v.iter()).for_each(|(o, v)| *o = *v);
        }
        Ok(out)
    }

    /// Batched [`Self::marginal_score`].
    pub fn marginal_score_batch(&self, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.map_rows(x, t, |_, x, t| self.marginal_score(x, t))
    }

    /// Batched [`Self::posterior_score`].
    pub fn posterior_score_batch(&self, z: &Mat, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.map_rows(x, t, |i, x, t| self.posterior_score(&row(z, i), x, t))
    }

    /// Batched [`Self::conditional_score`].
    pub fn conditional_score_batch(&self, z: &Mat, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.map_rows(x, t, |i, x, t| self.conditional_score(&row(z, i), x, t))
    }
}

/// The world's exact marginal score, usable wherever a prior model is.
pub struct AnalyticPrior<'w>(pub &'w GaussianWorld);

impl PriorScore for AnalyticPrior<'_> {
    fn prior_score(&self, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.0.marginal_score_batch(x, t)
    }
}

/// The world's exact latent posterior, usable wherever an encoder is.
///
/// At `t = 0` it is the diagonal Gaussian `N(A x_0 + b, s²I)`; at `t > 0`
/// its score uses the full posterior covariance.
pub struct AnalyticEncoder<'w>(pub &'w GaussianWorld);

impl LatentPosterior for AnalyticEncoder<'_> {
    fn latent_dim(&self) -> usize {
        self.0.latent_dim()
    }

    fn posterior_score(&self, z: &Mat, x: &Mat, t: &[f64]) -> Result<Mat> {
        self.0.posterior_score_batch(z, x, t)
    }

    fn clean_moments(&self, x0: &Mat) -> Result<(Mat, Mat)> {
        let w = self.0;
        if x0.ncols() != w.data_dim() {
            return Err(Error::shape("world state", w.data_dim(), x0.ncols()));
        }
        let k = w.latent_dim();
        let mut mu = Mat::zeros((x0.nrows(), k));
        for i in 0..x0.nrows() {
            let m = &w.enc_matrix * row(x0, i) + &w.enc_bias;
            mu.row_mut(i).iter_mut().zip(m.iter()).for_each(|(o, v)| *o = *v);
        }
        Ok((mu, Mat::from_elem((x0.nrows(), k), w.enc_std)))
    }
}

/// `2n` equally weighted points reproducing the mean and covariance of
/// `N(mean, cov)` exactly, so averages over them give exact expectations of
/// polynomials up to degree three.
pub fn sigma_points(mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<Mat> {
    let n = mean.len();
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("sigma-point covariance".into()))?;
    let l = chol.l() * (n as f64).sqrt();
    let mut pts = Mat::zeros((2 * n, n));
    for i in 0..n {
        for j in 0..n {
            pts[[2 * i, j]] = mean[j] + l[(j, i)];
            pts[[2 * i + 1, j]] = mean[j] - l[(j, i)];
        }
    }
    Ok(pts)
}

/// Least-squares fit `y ≈ gain·x + offset` over paired rows.
///
/// The returned `cov` is the residual covariance of the fit.
pub fn fit_linear_field(x: &Mat, y: &Mat) -> Result<LinearGaussian> {
    let (n, d) = x.dim();
    if y.nrows() != n {
        return Err(Error::shape("regression rows", n, y.nrows()));
    }
    let k = y.ncols();
    if n <= d + 1 {
        return Err(Error::Config(format!(
            "{n} rows cannot determine a {d}-dimensional affine fit"
        )));
    }
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let target = DMatrix::from_fn(n, k, |i, j| y[[i, j]]);
    let gram = design.transpose() * &design;
    let coef = gram
        .cholesky()
        .ok_or_else(|| Error::Singular("regression design is rank deficient".into()))?
        .solve(&(design.transpose() * &target));
    let resid = &target - &design * &coef;
    let cov = resid.transpose() * &resid / (n - d - 1) as f64;
    Ok(LinearGaussian {
        gain: coef.rows(0, d).transpose(),
        offset: coef.row(d).transpose(),
        cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{central_difference, relative_error};
    use crate::random::seeded;
    use nalgebra::{dmatrix, dvector};

    fn spec(d: usize) -> SdeSpec {
        SdeSpec::standard(d)
    }

    /// t with a = 0.5 under the standard schedule.
    fn t_half() -> f64 {
        let b = 2.0 * 2f64.ln();
        (-0.1 + (0.01 + 4.0 * 9.95 * b).sqrt()) / (2.0 * 9.95)
    }

    fn scalar_world(c: f64, a: f64, s: f64) -> GaussianWorld {
        GaussianWorld::new(
            dvector![0.0],
            dmatrix![c],
            dmatrix![a],
            dvector![0.0],
            s,
            spec(1),
        )
        .unwrap()
    }

    #[test]
    fn unit_world_score_is_minus_x_at_every_time() {
        let w = GaussianWorld::new(
            DVector::zeros(3),
            DMatrix::identity(3, 3),
            DMatrix::identity(2, 3),
            DVector::zeros(2),
            1.0,
            spec(3),
        )
        .unwrap();
        let x = dvector![0.3, -1.2, 2.0];
        for &t in &[0.0, 0.01, 0.4, 1.0] {
            let s = w.marginal_score(&x, t).unwrap();
            assert!((s + &x).amax() < 1e-12);
        }
    }

    #[test]
    fn marginal_score_at_zero_is_data_score() {
        let mut rng = seeded(1);
        let w = GaussianWorld::random(&mut rng, 3, 2, spec(3)).unwrap();
        let x = dvector![0.1, 0.2, -0.4];
        let s = w.marginal_score(&x, 0.0).unwrap();
        let expect = -(w.cov.clone().try_inverse().unwrap() * (&x - &w.mean));
        assert!((s - expect).amax() < 1e-10);
    }

    #[test]
    fn marginal_score_hand_instance() {
        let w = scalar_world(4.0, 1.0, 1.0);
        let s = w.marginal_score(&dvector![1.75], t_half()).unwrap();
        assert!((s[0] + 1.0).abs() < 1e-10);
    }

    #[test]
    fn marginal_score_matches_log_density_gradient() {
        let mut rng = seeded(2);
        for _ in 0..20 {
            let w = GaussianWorld::random(&mut rng, 3, 2, spec(3)).unwrap();
            let t = rng.random_range(0.0..1.0);
            let x = standard_normal(&mut rng, 1, 3);
            let fd = central_difference(&x, 1e-5, |p| {
                w.marginal_log_density(&row(p, 0), t).unwrap()
            });
            let exact = w.marginal_score_batch(&x, &[t]).unwrap();
            assert!(relative_error(&[exact], &[fd], 1e-12) < 1e-8);
        }
    }

    #[test]
    fn uninformative_encoder_has_zero_posterior_score() {
        let w = scalar_world(2.0, 0.0, 1.0);
        let s = w.posterior_score(&dvector![0.7], &dvector![1.3], 0.4).unwrap();
        assert_eq!(s[0], 0.0);
        let c = w.conditional_score(&dvector![0.7], &dvector![1.3], 0.4).unwrap();
        let m = w.marginal_score(&dvector![1.3], 0.4).unwrap();
        assert!((c - m).amax() < 1e-14);
    }

    #[test]
    fn posterior_score_hand_instance() {
        // t = 0, m = 0, C = 1, A = 1, b = 0, s = 1: z | x ~ N(x, 1), score z − x.
        let w = scalar_world(1.0, 1.0, 1.0);
        for (z, x) in [(0.5, 2.0), (-1.0, 0.3), (2.0, 2.0)] {
            let s = w.posterior_score(&dvector![z], &dvector![x], 0.0).unwrap();
            assert!((s[0] - (z - x)).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_score_vanishes_as_signal_dies() {
        let w = scalar_world(1.0, 1.0, 0.5);
        let mut prev = f64::INFINITY;
        for &t in &[0.2, 0.5, 0.8, 1.0] {
            let g = w.optimal_encoder(t).unwrap().gain[(0, 0)].abs();
            assert!(g < prev);
            prev = g;
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn bayes_identity_on_random_worlds() {
        let mut rng = seeded(3);
        for _ in 0..200 {
            let d = rng.random_range(1..=MAX_WORLD_DIM);
            let k = rng.random_range(1..=MAX_WORLD_DIM);
            let w = GaussianWorld::random(&mut rng, d, k, spec(d)).unwrap();
            let t = rng.random_range(0.0..1.0);
            let x = row(&standard_normal(&mut rng, 1, d), 0);
            let z = row(&standard_normal(&mut rng, 1, k), 0);
            let lhs = w.conditional_score(&z, &x, t).unwrap();
            let rhs = w.marginal_score(&x, t).unwrap() + w.posterior_score(&z, &x, t).unwrap();
            assert!((lhs - rhs).amax() < 1e-9);
        }
    }

    #[test]
    fn conditional_score_sharpens_as_encoder_noise_shrinks() {
        let x = dvector![0.8];
        let z = dvector![0.2];
        let mut prev = 0.0;
        for &s in &[1.0, 0.3, 0.1, 0.03] {
            let w = scalar_world(1.0, 1.0, s);
            let mag = w.conditional_score(&z, &x, 0.0).unwrap()[0].abs();
            assert!(mag > prev);
            prev = mag;
        }
        // at t = 0 the conditional variance is s²/(1 + s²) for C = A = 1
        let s: f64 = 0.03;
        let var = s * s / (1.0 + s * s);
        let w = scalar_world(1.0, 1.0, s);
        let got = w.conditional_score(&z, &x, 0.0).unwrap()[0];
        let mean = 0.2 / (1.0 + s * s);
        assert!((got + (0.8 - mean) / var).abs() < 1e-6 * (0.8 - mean).abs() / var);
    }

    #[test]
    fn optimal_encoder_at_time_zero_is_the_encoder() {
        let w = GaussianWorld::new(
            DVector::zeros(2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2),
            DVector::zeros(2),
            1.0,
            spec(2),
        )
        .unwrap();
        let e = w.optimal_encoder(0.0).unwrap();
        assert!((e.gain - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!((e.cov - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert!(e.offset.amax() < 1e-12);
    }

    #[test]
    fn optimal_encoder_of_blind_encoder() {
        let w = GaussianWorld::new(
            dvector![0.5, -0.5],
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            dvector![0.1, 0.2],
            0.7,
            spec(2),
        )
        .unwrap();
        let e = w.optimal_encoder(0.3).unwrap();
        assert_eq!(e.gain.amax(), 0.0);
        assert!((e.cov - DMatrix::identity(2, 2) * 0.49).amax() < 1e-14);
    }

    #[test]
    fn optimal_encoder_respects_latent_permutation() {
        let mut rng = seeded(8);
        let w = GaussianWorld::random(&mut rng, 3, 2, spec(3)).unwrap();
        let mut swapped = w.clone();
        swapped.enc_matrix.swap_rows(0, 1);
        swapped.enc_bias.swap_rows(0, 1);
        let e = w.optimal_encoder(0.35).unwrap();
        let f = swapped.optimal_encoder(0.35).unwrap();
        let p = dmatrix![0.0, 1.0; 1.0, 0.0];
        assert!((&p * &e.gain - f.gain).amax() < 1e-12);
        assert!((&p * &e.offset - f.offset).amax() < 1e-12);
        assert!((&p * &e.cov * &p - f.cov).amax() < 1e-12);
    }

    #[test]
    fn standard_latent_world_has_unit_latent_marginal() {
        let mut rng = seeded(5);
        for d in 1..=4 {
            for k in 1..=d {
                let w = GaussianWorld::random_standard_latent(&mut rng, d, k, spec(d)).unwrap();
                assert!(w.latent_mean().amax() < 1e-12);
                assert!((w.latent_cov() - DMatrix::identity(k, k)).amax() < 1e-10);
            }
        }
    }

    #[test]
    fn rejects_bad_worlds() {
        let bad_cov = GaussianWorld::new(
            dvector![0.0, 0.0],
            dmatrix![1.0, 0.0; 0.0, 1e-10],
            DMatrix::identity(1, 2),
            dvector![0.0],
            1.0,
            spec(2),
        );
        assert!(matches!(bad_cov, Err(Error::Singular(_))));
        let bad_s = GaussianWorld::new(
            dvector![0.0],
            dmatrix![1.0],
            dmatrix![1.0],
            dvector![0.0],
            0.0,
            spec(1),
        );
        assert!(bad_s.is_err());
        let too_big = GaussianWorld::new(
            DVector::zeros(5),
            DMatrix::identity(5, 5),
            DMatrix::identity(1, 5),
            dvector![0.0],
            1.0,
            spec(5),
        );
        assert!(too_big.is_err());
    }

    #[test]
    fn sigma_points_reproduce_moments() {
        let mean = dvector![0.5, -1.0, 2.0];
        let l = dmatrix![1.0, 0.0, 0.0; 0.3, 0.7, 0.0; -0.2, 0.4, 0.5];
        let cov = &l * l.transpose();
        let p = sigma_points(&mean, &cov).unwrap();
        let n = p.nrows() as f64;
        for j in 0..3 {
            let m = p.column(j).sum() / n;
            assert!((m - mean[j]).abs() < 1e-14);
            for k in 0..3 {
                let c = (0..p.nrows())
                    .map(|i| (p[[i, j]] - mean[j]) * (p[[i, k]] - mean[k]))
                    .sum::<f64>()
                    / n;
                assert!((c - cov[(j, k)]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn linear_fit_recovers_noiseless_map() {
        let mut rng = seeded(21);
        let x = standard_normal(&mut rng, 50, 3);
        let g = dmatrix![1.0, -2.0, 0.5; 0.0, 0.3, 1.0];
        let y = Mat::from_shape_fn((50, 2), |(i, j)| {
            (0..3).map(|c| g[(j, c)] * x[[i, c]]).sum::<f64>() + [0.7, -0.1][j]
        });
        let fit = fit_linear_field(&x, &y).unwrap();
        assert!((&fit.gain - &g).abs().max() < 1e-12);
        assert!((fit.offset[0] - 0.7).abs() < 1e-12 && (fit.offset[1] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn optimal_encoder_matches_regression_of_latent_on_state() {
        let mut rng = seeded(22);
        let w = GaussianWorld::random(&mut rng, 2, 1, spec(2)).unwrap();
        let t = 0.4;
        let n = 1_000_000;
        let x0 = w.sample_data(&mut rng, n).unwrap();
        let z = w.sample_latent(&mut rng, &x0);
        let xt = crate::diffproc::sample_perturbed(&w.spec, &x0, &vec![t; n], &mut rng).unwrap();
        let fit = fit_linear_field(&xt, &z).unwrap();
        let post = w.optimal_encoder(t).unwrap();
        // standard errors of the regression coefficients
        let sx = w.marginal_cov(t).unwrap();
        let sx_inv = sx.clone().try_inverse().unwrap();
        let resid_var = post.cov[(0, 0)];
        for j in 0..2 {
            let se = (resid_var * sx_inv[(j, j)] / n as f64).sqrt();
            assert!((fit.gain[(0, j)] - post.gain[(0, j)]).abs() < 4.0 * se);
        }
        let rel = (fit.cov[(0, 0)] - resid_var).abs() / resid_var;
        assert!(rel < 4.0 * (2.0 / n as f64).sqrt(), "{rel}");
        let mean_se = (resid_var / n as f64).sqrt() * 3.0;
        let pred = &post.gain * (&w.mean * w.spec.perturb_params(t).unwrap().a) + &post.offset;
        let got = &fit.gain * (&w.mean * w.spec.perturb_params(t).unwrap().a) + &fit.offset;
        assert!((pred[0] - got[0]).abs() < 4.0 * mean_se);
    }
}
