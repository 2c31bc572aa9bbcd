use scorevae::harness::ExperimentConfig;
use std::path::Path;
use std::process::{Command, Output};

fn scorevae(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scorevae"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.optimizer.n_iters = 30;
    cfg.optimizer.batch_size = 32;
    cfg.data.n_train = 128;
    cfg.data.n_test = 16;
    cfg.sampler.n_steps = 20;
    for net in [
        &mut cfg.nets.prior,
        &mut cfg.nets.encoder,
        &mut cfg.nets.corrector,
        &mut cfg.nets.conditional,
        &mut cfg.nets.baseline_encoder,
        &mut cfg.nets.vae_decoder,
    ] {
        net.hidden = vec![8];
    }
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path.display().to_string()
}

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &tiny());
    for cmd in ["train-prior", "train-encoder", "train-corrector", "train-vae", "train-diffdecoder", "sample", "eval"] {
        let out = scorevae(dir.path(), &[cmd, "--config", &cfg, "--out", "run", "--seed", "7"]);
        assert_eq!(code(&out), 0, "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = scorevae(dir.path(), &["reconstruct", "--method", "scorevae+", "--config", &cfg, "--out", "run", "--seed", "7", "--mean-latent"]);
    assert_eq!(code(&out), 0);
    let run = dir.path().join("run");
    for f in ["prior.ckpt", "diffdecoder_beta0.ckpt", "metrics.csv", "samples.csv", "reconstruction_scorevae+.csv", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let written = ExperimentConfig::load(&run.join("config.toml")).unwrap();
    assert!(written.eval.mean_latent);
    assert_eq!(written.seed, 7);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("method,l2,std_err,n,params"));
    assert_eq!(metrics.lines().count(), 6);
}

#[test]
fn oracle_check_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = scorevae(dir.path(), &["oracle-check", "--worlds", "50", "--out", "o"]);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8_lossy(&out.stdout).contains("PASS"));
}

#[test]
fn config_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "beta = \"lots\"\n").unwrap();
    let out = scorevae(dir.path(), &["train-prior", "--config", "bad.toml"]);
    assert_eq!(code(&out), 2);
    let out = scorevae(dir.path(), &["train-prior", "--config", "absent.toml"]);
    assert_eq!(code(&out), 2);
    let mut cfg = tiny();
    cfg.beta = -1.0;
    let p = write_config(dir.path(), &cfg);
    assert_eq!(code(&scorevae(dir.path(), &["train-vae", "--config", &p])), 2);
    let out = scorevae(dir.path(), &["reconstruct", "--method", "pca"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn divergence_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.optimizer.learning_rate = 1e300;
    cfg.optimizer.grad_clip = 0.0;
    let p = write_config(dir.path(), &cfg);
    let out = scorevae(dir.path(), &["train-prior", "--config", &p]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn missing_or_corrupt_checkpoints_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    let p = write_config(dir.path(), &tiny());
    assert_eq!(code(&scorevae(dir.path(), &["train-encoder", "--config", &p])), 4);
    assert_eq!(code(&scorevae(dir.path(), &["eval", "--config", &p])), 4);
    std::fs::write(dir.path().join("out/prior.ckpt"), b"not a checkpoint").unwrap();
    assert_eq!(code(&scorevae(dir.path(), &["sample", "--config", &p])), 4);
}
