//! Reconstruction, sampling and the L2 metric.

use super::train::{DiffDecoder, Vae};
use crate::compose::{encode_latents, ComposedScore};
use crate::diffproc::{integrate_reverse, SamplerSettings, SdeSpec};
use crate::models::{ConditionalNet, LatentMode, ScoreModel, TimeEncoder};
use crate::ndiff::Mat;
use crate::random::stream;
use crate::{Error, Result};
use ndarray::{concatenate, s, Axis};
use rand::Rng;
use std::fmt::Write as _;

/// Rows handled by one random stream during parallel reconstruction.
pub const CHUNK_ROWS: usize = 64;

/// A trained reconstruction pipeline.
#[derive(Clone, Copy, Debug)]
pub enum Method<'a> {
    Vae(&'a Vae),
    ScoreVae {
        prior: &'a ScoreModel,
        encoder: &'a TimeEncoder,
        corrector: Option<&'a ConditionalNet>,
    },
    DiffDecoder(&'a DiffDecoder),
}

impl Method<'_> {
    /// Total number of trained parameters involved.
    pub fn param_count(&self) -> usize {
        let count = |m: &crate::ndiff::Mlp| m.spec().param_count();
        match self {
            Method::Vae(v) => count(&v.encoder.net) + count(&v.decoder.net),
            Method::ScoreVae {
                prior,
                encoder,
                corrector,
            } => count(&prior.net) + count(&encoder.net) + corrector.map_or(0, |c| count(&c.net)),
            Method::DiffDecoder(d) => count(&d.net.net) + count(&d.encoder.net),
        }
    }

    /// Encodes `x0` and decodes it back. `mode` selects sampled or mean
    /// latents; the DiffDecoder trained with β = 0 always uses its mean.
    pub fn reconstruct<R: Rng + ?Sized>(
        &self,
        spec: &SdeSpec,
        x0: &Mat,
        settings: SamplerSettings,
        mode: LatentMode,
        rng: &mut R,
    ) -> Result<Mat> {
        match *self {
            Method::Vae(v) => {
                let z = encode_latents(&v.encoder, x0, mode, rng)?;
                v.decoder.vae_decode(&z)
            }
            Method::ScoreVae {
                prior,
                encoder,
                corrector,
            } => {
                let mut cs = ComposedScore::new(prior, encoder);
                if let Some(c) = corrector {
                    cs = cs.with_corrector(c);
                }
                Ok(cs.reconstruct(spec, x0, settings, mode, rng)?.x)
            }
            Method::DiffDecoder(d) => {
                let mode = if d.latent == LatentMode::Mean { LatentMode::Mean } else { mode };
                let z = encode_latents(&d.encoder, x0, mode, rng)?;
                let n = z.nrows();
                integrate_reverse(|x, t| d.net.eval(x, &z, &vec![t; n]), spec, n, settings, rng)
            }
        }
    }

    /// Reconstruction in fixed chunks of [`CHUNK_ROWS`], each with its own
    /// stream derived from `seed`, spread over `threads` workers. The result
    /// depends on `seed` only, not on the thread count.
    pub fn reconstruct_parallel(
        &self,
        spec: &SdeSpec,
        x0: &Mat,
        settings: SamplerSettings,
        mode: LatentMode,
        seed: u64,
        threads: usize,
    ) -> Result<Mat>
    where
        Self: Sync,
    {
        let n_chunks = x0.nrows().div_ceil(CHUNK_ROWS);
        let chunk = |c: usize| -> Result<Mat> {
            let rows = x0.slice(s![c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(x0.nrows()), ..]);
            self.reconstruct(spec, &rows.to_owned(), settings, mode, &mut stream(seed, c as u64))
        };
        let threads = threads.max(1).min(n_chunks.max(1));
        let mut parts: Vec<Option<Result<Mat>>> = (0..n_chunks).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let chunk = &chunk;
                    scope.spawn(move || {
                        (w..n_chunks)
                            .step_by(threads)
                            .map(|c| (c, chunk(c)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (c, r) in h.join().expect("reconstruction worker panicked") {
                    parts[c] = Some(r);
                }
            }
        });
        let parts: Vec<Mat> = parts
            .into_iter()
            .map(|p| p.expect("every chunk ran"))
            .collect::<Result<_>>()?;
        if parts.is_empty() {
            return Ok(Mat::zeros((0, x0.ncols())));
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(concatenate(Axis(0), &views).expect("equal widths"))
    }
}

/// Unconditional samples from the prior's reverse SDE.
pub fn sample_prior<R: Rng + ?Sized>(
    prior: &ScoreModel,
    spec: &SdeSpec,
    n: usize,
    settings: SamplerSettings,
    rng: &mut R,
) -> Result<Mat> {
    integrate_reverse(|x, t| prior.score(x, &vec![t; x.nrows()]), spec, n, settings, rng)
}

/// Euclidean norm of each row difference.
pub fn l2_per_sample(a: &Mat, b: &Mat) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "reconstruction",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    Ok(a.rows()
        .into_iter()
        .zip(b.rows())
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt())
        .collect())
}

/// One line of the metric table.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub method: String,
    pub l2: f64,
    pub std_err: f64,
    pub n: usize,
    pub params: usize,
}

impl MetricRow {
    pub fn from_errors(method: impl Into<String>, errors: &[f64], params: usize) -> Self {
        let n = errors.len();
        let mean = errors.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            method: method.into(),
            l2: mean,
            std_err: (var / n.max(1) as f64).sqrt(),
            n,
            params,
        }
    }
}

/// Mean per-sample L2 of one method on a test set.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    name: &str,
    method: &Method<'_>,
    spec: &SdeSpec,
    test: &Mat,
    settings: SamplerSettings,
    mode: LatentMode,
    seed: u64,
    threads: usize,
) -> Result<(MetricRow, Mat)> {
    let recon = method.reconstruct_parallel(spec, test, settings, mode, seed, threads)?;
    let errs = l2_per_sample(test, &recon)?;
    Ok((MetricRow::from_errors(name, &errs, method.param_count()), recon))
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["method", "l2", "std_err", "n", "params"])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            format!("{:.6}", r.l2),
            format!("{:.6}", r.std_err),
            r.n.to_string(),
            r.params.to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("ascii"))
}

/// Aligned text table, one row per method.
pub fn metrics_table(rows: &[MetricRow]) -> String {
    let width = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>9}  {:>9}  {:>8}", "Method", "L2", "± s.e.", "params");
    let _ = writeln!(out, "{}", "-".repeat(width + 34));
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>8}",
            r.method, r.l2, r.std_err, r.params
        );
    }
    out
}
