//! The command-line workflows, operating on one output directory.
//!
//! | command            | reads                         | writes                                        |
//! |--------------------|-------------------------------|-----------------------------------------------|
//! | `train-prior`      |                               | `prior.ckpt`, `prior_loss.csv`                |
//! | `train-encoder`    | `prior.ckpt`                  | `encoder.ckpt`, `encoder_loss.csv`            |
//! | `train-corrector`  | `prior.ckpt`, `encoder.ckpt`  | `corrector.ckpt`, `corrector_loss.csv`        |
//! | `train-vae`        |                               | `vae.ckpt`, `vae_loss.csv`                    |
//! | `train-diffdecoder`|                               | `diffdecoder.ckpt`, `diffdecoder_beta0.ckpt` and their loss curves |
//! | `reconstruct`      | the method's checkpoints      | `original.*`, `reconstruction_<method>.*`     |
//! | `sample`           | `prior.ckpt`                  | `samples.*`                                   |
//! | `eval`             | every checkpoint present      | `metrics.csv`, `metrics.txt`                  |
//! | `oracle-check`     |                               | `oracle_check.txt`                            |
//!
//! Every command also writes the resolved configuration to `config.toml`.
//! `*` is `pgm` for image data and `csv` for point data.

use super::checkpoint::Checkpoint;
use super::config::{Component, ExperimentConfig};
use super::emit;
use super::eval::{metrics_csv, metrics_table, sample_prior, Method};
use super::pipeline::evaluate_methods;
use super::train::{
    corrector_from, diffdecoder_from, encoder_from, prior_from, train_corrector,
    train_diffdecoder, train_encoder, train_prior, train_vae, vae_from, DiffDecoder, LossRow, Vae,
};
use crate::compose::ComposedScore;
use crate::models::{ConditionalNet, LatentMode, ScoreModel, TimeEncoder};
use crate::oracle::{AnalyticEncoder, AnalyticPrior, GaussianWorld};
use crate::random::{seeded, stream, uniform};
use crate::{Error, Mat, Result};
use nalgebra::DVector;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

/// A reconstruction pipeline selectable on the command line.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    ScoreVae,
    ScoreVaePlus,
    Vae,
    DiffDecoder,
    DiffDecoderBeta0,
}

impl MethodKind {
    pub const ALL: [MethodKind; 5] = [
        MethodKind::Vae,
        MethodKind::ScoreVae,
        MethodKind::ScoreVaePlus,
        MethodKind::DiffDecoder,
        MethodKind::DiffDecoderBeta0,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::ScoreVae => "scorevae",
            MethodKind::ScoreVaePlus => "scorevae+",
            MethodKind::Vae => "vae",
            MethodKind::DiffDecoder => "diffdecoder",
            MethodKind::DiffDecoderBeta0 => "diffdecoder-beta0",
        }
    }

    fn label(self, beta: f64) -> String {
        match self {
            MethodKind::ScoreVae => "ScoreVAE".into(),
            MethodKind::ScoreVaePlus => "ScoreVAE+".into(),
            MethodKind::Vae => "VAE".into(),
            MethodKind::DiffDecoder => format!("DiffDecoder (β={beta})"),
            MethodKind::DiffDecoderBeta0 => "DiffDecoder (β=0)".into(),
        }
    }

    fn files(self) -> &'static [&'static str] {
        match self {
            MethodKind::ScoreVae => &[PRIOR, ENCODER],
            MethodKind::ScoreVaePlus => &[PRIOR, ENCODER, CORRECTOR],
            MethodKind::Vae => &[VAE],
            MethodKind::DiffDecoder => &[DIFFDECODER],
            MethodKind::DiffDecoderBeta0 => &[DIFFDECODER_BETA0],
        }
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|m| m.name()).collect();
                Error::Config(format!("unknown method '{s}', expected one of {}", names.join(", ")))
            })
    }
}

const PRIOR: &str = "prior.ckpt";
const ENCODER: &str = "encoder.ckpt";
const CORRECTOR: &str = "corrector.ckpt";
const VAE: &str = "vae.ckpt";
const DIFFDECODER: &str = "diffdecoder.ckpt";
const DIFFDECODER_BETA0: &str = "diffdecoder_beta0.ckpt";

/// What a command run produced.
#[derive(Clone, Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    /// Human-readable summary for the terminal.
    pub summary: String,
}

/// The shared state of one invocation.
pub struct Workspace {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Workspace {
    /// Creates the output directory and records the resolved config.
    pub fn open(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("config.toml"), cfg.to_toml())?;
        Ok(Self {
            cfg,
            out: out.to_path_buf(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load(&self, name: &str) -> Result<Checkpoint> {
        let p = self.path(name);
        if !p.exists() {
            return Err(Error::Format(format!(
                "{} not found; train that component first",
                p.display()
            )));
        }
        Checkpoint::load(&p)
    }

    fn save(&self, name: &str, ckpt: &Checkpoint, curve: &[LossRow], out: &mut Outcome) -> Result<()> {
        let p = self.path(name);
        ckpt.save(&p)?;
        let curve_path = p.with_file_name(format!("{}_loss.csv", name.trim_end_matches(".ckpt")));
        emit::write_loss_csv(&curve_path, curve)?;
        let last = curve.last().map_or(f64::NAN, |r| r.total);
        let _ = writeln!(
            out.summary,
            "{}: {} iterations, final loss {last:.5}, {} parameters -> {}",
            ckpt.component.name(),
            ckpt.iteration,
            ckpt.param_count(),
            p.display()
        );
        out.files.extend([p, curve_path]);
        Ok(())
    }

    fn latent_mode(&self) -> LatentMode {
        if self.cfg.eval.mean_latent {
            LatentMode::Mean
        } else {
            LatentMode::Sample
        }
    }

    pub fn train(&self, c: Component) -> Result<Outcome> {
        let (train, _) = self.cfg.datasets()?;
        let mut out = Outcome::default();
        match c {
            Component::Prior => {
                let t = train_prior(&self.cfg, &train)?;
                self.save(PRIOR, &t.checkpoint, &t.curve, &mut out)?;
            }
            Component::Encoder => {
                let prior = prior_from(&self.load(PRIOR)?)?;
                let t = train_encoder(&self.cfg, &train, &prior)?;
                self.save(ENCODER, &t.checkpoint, &t.curve, &mut out)?;
            }
            Component::Corrector => {
                let prior = prior_from(&self.load(PRIOR)?)?;
                let enc = encoder_from(&self.load(ENCODER)?)?;
                let t = train_corrector(&self.cfg, &train, &prior, &enc)?;
                self.save(CORRECTOR, &t.checkpoint, &t.curve, &mut out)?;
            }
            Component::Vae => {
                let t = train_vae(&self.cfg, &train)?;
                self.save(VAE, &t.checkpoint, &t.curve, &mut out)?;
            }
            Component::DiffDecoder => {
                let t = train_diffdecoder(&self.cfg, &train)?;
                self.save(DIFFDECODER, &t.checkpoint, &t.curve, &mut out)?;
                if self.cfg.beta > 0.0 {
                    let mut zero = self.cfg.clone();
                    zero.beta = 0.0;
                    let t = train_diffdecoder(&zero, &train)?;
                    self.save(DIFFDECODER_BETA0, &t.checkpoint, &t.curve, &mut out)?;
                }
            }
        }
        Ok(out)
    }

    /// Reconstructs the test split with one method.
    pub fn reconstruct(&self, method: MethodKind) -> Result<Outcome> {
        let (_, test) = self.cfg.datasets()?;
        let models = Loaded::load(self, &[method])?;
        let m = models.method(method).expect("loaded");
        let spec = self.cfg.sde_spec(test.dim())?;
        let x = m.reconstruct_parallel(
            &spec,
            &test.samples,
            self.cfg.sampler_settings(),
            self.latent_mode(),
            self.cfg.eval.seed,
            self.cfg.eval.threads,
        )?;
        let mut out = Outcome::default();
        let orig = emit::emit_states(&self.path("original"), &test.samples, test.image_shape)?;
        let rec = emit::emit_states(
            &self.path(&format!("reconstruction_{}", method.name())),
            &x,
            test.image_shape,
        )?;
        let _ = writeln!(out.summary, "{} test samples reconstructed -> {}", x.nrows(), rec.display());
        out.files.extend([orig, rec]);
        Ok(out)
    }

    /// Unconditional samples from the prior, as many as the test split.
    pub fn sample(&self) -> Result<Outcome> {
        let (_, test) = self.cfg.datasets()?;
        let prior = prior_from(&self.load(PRIOR)?)?;
        let spec = self.cfg.sde_spec(test.dim())?;
        let x = sample_prior(
            &prior,
            &spec,
            test.len(),
            self.cfg.sampler_settings(),
            &mut stream(self.cfg.eval.seed, 0),
        )?;
        let path = emit::emit_states(&self.path("samples"), &x, test.image_shape)?;
        Ok(Outcome {
            summary: format!("{} samples -> {}\n", x.nrows(), path.display()),
            files: vec![path],
        })
    }

    /// L2 table over every method whose checkpoints are present.
    pub fn eval(&self) -> Result<Outcome> {
        let (_, test) = self.cfg.datasets()?;
        let available: Vec<MethodKind> = MethodKind::ALL
            .into_iter()
            .filter(|m| m.files().iter().all(|f| self.path(f).exists()))
            .collect();
        if available.is_empty() {
            return Err(Error::Format(format!(
                "no checkpoints in {}; run a train-* command first",
                self.out.display()
            )));
        }
        let models = Loaded::load(self, &available)?;
        let methods: Vec<(String, Method<'_>)> = available
            .iter()
            .map(|&m| (m.label(self.cfg.beta), models.method(m).expect("loaded")))
            .collect();
        let rows = evaluate_methods(&self.cfg, &test, &methods)?;
        let table = format!(
            "{}\ntest samples: {}, dataset std: {:.4}, mean-predictor L2: {:.4}\n",
            metrics_table(&rows),
            test.len(),
            test.pooled_std(),
            test.mean_baseline_l2()
        );
        let csv_path = self.path("metrics.csv");
        let txt_path = self.path("metrics.txt");
        std::fs::write(&csv_path, metrics_csv(&rows)?)?;
        std::fs::write(&txt_path, &table)?;
        Ok(Outcome {
            files: vec![csv_path, txt_path],
            summary: table,
        })
    }

    /// Checks the Bayes identity and the composed score on random
    /// linear-Gaussian worlds. Fails with a numeric error beyond `1e-9`.
    pub fn oracle_check(&self, n_worlds: usize) -> Result<Outcome> {
        let report = oracle_check(self.cfg.seed, n_worlds)?;
        let path = self.path("oracle_check.txt");
        let text = report.to_string();
        std::fs::write(&path, &text)?;
        if !report.passed() {
            return Err(Error::Tolerance(format!(
                "oracle errors exceed {ORACLE_TOL:e}\n{text}"
            )));
        }
        Ok(Outcome {
            files: vec![path],
            summary: text,
        })
    }
}

struct Loaded {
    prior: Option<ScoreModel>,
    encoder: Option<TimeEncoder>,
    corrector: Option<ConditionalNet>,
    vae: Option<Vae>,
    diffdecoder: Option<DiffDecoder>,
    diffdecoder_beta0: Option<DiffDecoder>,
}

impl Loaded {
    fn load(ws: &Workspace, methods: &[MethodKind]) -> Result<Self> {
        let needs = |f: &str| methods.iter().any(|m| m.files().contains(&f));
        let opt = |f: &str| -> Result<Option<Checkpoint>> {
            if needs(f) {
                ws.load(f).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            prior: opt(PRIOR)?.map(|c| prior_from(&c)).transpose()?,
            encoder: opt(ENCODER)?.map(|c| encoder_from(&c)).transpose()?,
            corrector: opt(CORRECTOR)?.map(|c| corrector_from(&c)).transpose()?,
            vae: opt(VAE)?.map(|c| vae_from(&c)).transpose()?,
            diffdecoder: opt(DIFFDECODER)?
                .map(|c| diffdecoder_from(&c, ws.cfg.beta))
                .transpose()?,
            diffdecoder_beta0: opt(DIFFDECODER_BETA0)?
                .map(|c| diffdecoder_from(&c, 0.0))
                .transpose()?,
        })
    }

    fn method(&self, m: MethodKind) -> Option<Method<'_>> {
        Some(match m {
            MethodKind::ScoreVae | MethodKind::ScoreVaePlus => Method::ScoreVae {
                prior: self.prior.as_ref()?,
                encoder: self.encoder.as_ref()?,
                corrector: match m {
                    MethodKind::ScoreVaePlus => Some(self.corrector.as_ref()?),
                    _ => None,
                },
            },
            MethodKind::Vae => Method::Vae(self.vae.as_ref()?),
            MethodKind::DiffDecoder => Method::DiffDecoder(self.diffdecoder.as_ref()?),
            MethodKind::DiffDecoderBeta0 => Method::DiffDecoder(self.diffdecoder_beta0.as_ref()?),
        })
    }
}

pub const ORACLE_TOL: f64 = 1e-9;

/// Worst-case errors found by [`oracle_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReport {
    pub worlds: usize,
    /// Max absolute error of prior + posterior against the conditional score.
    pub bayes_abs: f64,
    /// Max relative error of the composed score against the conditional score.
    pub composed_rel: f64,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.bayes_abs < ORACLE_TOL && self.composed_rel < ORACLE_TOL
    }
}

impl std::fmt::Display for OracleReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "worlds: {}", self.worlds)?;
        writeln!(f, "bayes identity max abs error: {:.3e}", self.bayes_abs)?;
        writeln!(f, "composed score max rel error: {:.3e}", self.composed_rel)?;
        writeln!(f, "result: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// One random `(x, z, t)` per world, dimensions up to 4.
pub fn oracle_check(seed: u64, n_worlds: usize) -> Result<OracleReport> {
    use rand::Rng;
    let mut rng = seeded(seed);
    let (mut bayes_abs, mut composed_rel) = (0.0f64, 0.0f64);
    for _ in 0..n_worlds {
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=4);
        let spec = crate::diffproc::SdeSpec::standard(d);
        let w = GaussianWorld::random(&mut rng, d, k, spec)?;
        let t = uniform(&mut rng, 1, 1e-3, 1.0)[0];
        let x = DVector::from_iterator(d, (0..d).map(|_| rng.random_range(-3.0..3.0)));
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.random_range(-3.0..3.0)));
        let exact = w.conditional_score(&z, &x, t)?;
        let sum = w.marginal_score(&x, t)? + w.posterior_score(&z, &x, t)?;
        bayes_abs = bayes_abs.max((sum - &exact).amax());
        let (prior, enc) = (AnalyticPrior(&w), AnalyticEncoder(&w));
        let composed = ComposedScore::new(&prior, &enc).conditional_score(
            &Mat::from_shape_vec((1, d), x.iter().copied().collect()).expect("row"),
            &Mat::from_shape_vec((1, k), z.iter().copied().collect()).expect("row"),
            &[t],
        )?;
        let diff = composed.iter().zip(exact.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        composed_rel = composed_rel.max(diff.sqrt() / exact.norm().max(1e-300));
    }
    Ok(OracleReport {
        worlds: n_worlds,
        bayes_abs,
        composed_rel,
    })
}
