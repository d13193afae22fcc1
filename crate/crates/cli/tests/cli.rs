use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rlseg_core::baselines::AcquisitionScorer;
use rlseg_core::config::{desk, RunConfig};
use rlseg_core::dataset::SplitSizes;
use rlseg_core::learner::ConvergenceConfig;
use rlseg_core::runner::SourceConfig;

fn rlseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlseg"))
        .args(args)
        .env_remove("RLSEG_OUT")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Desk layout shrunk to a few seconds of compute, keeping U, H, B and DQN.
fn tiny() -> RunConfig {
    let mut cfg = desk();
    cfg.name = "tiny".into();
    let g = &mut cfg.benchmark.generator;
    g.num_images = 30;
    g.height = 24;
    g.width = 24;
    cfg.benchmark.splits = SplitSizes { train: 8, eval: 10, reward: 6, state: 2 };
    cfg.benchmark.test_images = 6;
    cfg.benchmark.source = SourceConfig { num_images: 12, signature_shift: 1.0, seed: 5 };
    cfg.learner.hidden = vec![8];
    cfg.pretrain = ConvergenceConfig { patience: 1, max_epochs: 4 };
    cfg.features.unlabeled_sample = 20;
    cfg.agent.k = 3;
    cfg.agent.pool_size = 4;
    cfg.agent.batch_size = 4;
    cfg.agent.qnet.state_hidden = [8, 8, 8, 4];
    cfg.agent.qnet.action_hidden = [8, 8, 4];
    cfg.policy.budget = 9;
    cfg.policy.episodes = 2;
    cfg.evaluation.budgets = vec![6, 12];
    cfg.evaluation.final_training = ConvergenceConfig { patience: 1, max_epochs: 4 };
    cfg.evaluation.methods.truncate(4);
    for m in &mut cfg.evaluation.methods {
        match &mut m.scorer {
            AcquisitionScorer::Uniform { pool_size } | AcquisitionScorer::Entropy { pool_size } => *pool_size = 12,
            AcquisitionScorer::Bald { pool_size, passes } => {
                *pool_size = 12;
                *passes = 3;
            }
            AcquisitionScorer::Dqn { pool_size } => *pool_size = 4,
        }
    }
    cfg.validate().unwrap();
    cfg
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("tiny.toml");
    fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
    path
}

/// Relative path to contents for every file under `dir`.
fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_twice_gives_identical_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny());
    let cfg = cfg.to_str().unwrap();
    for out in ["a", "b"] {
        let o = rlseg(&["gen", "--config", cfg, "--out", tmp.path().join(out).to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (a, b) = (tree(&tmp.path().join("a/tiny")), tree(&tmp.path().join("b/tiny")));
    assert!(a.iter().any(|(p, _)| p.ends_with("splits.json")));
    assert_eq!(a, b);
}

#[test]
fn compare_writes_one_curve_row_per_method_seed_and_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let path = write_config(tmp.path(), &cfg);
    let o = Command::new(env!("CARGO_BIN_EXE_rlseg"))
        .args(["--jobs", "2", "compare", "--config", path.to_str().unwrap()])
        .env("RLSEG_OUT", tmp.path().join("runs"))
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("runs/tiny");
    let curves = fs::read_to_string(run.join("curves.csv")).unwrap();
    let rows = curves.lines().count() - 1;
    assert_eq!(rows, 4 * cfg.evaluation.seeds.len() * cfg.evaluation.budgets.len());
    assert_eq!(cfg.evaluation.seeds.len(), 5);
    for f in ["manifest.json", "config.toml", "learner.bin", "summary.csv", "policy.csv", "curves.svg"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    // The run directory alone regenerates identical CSVs.
    let before = fs::read(run.join("summary.csv")).unwrap();
    fs::remove_file(run.join("summary.csv")).unwrap();
    let o = rlseg(&["report", run.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(run.join("summary.csv")).unwrap(), before);
    assert_eq!(fs::read_to_string(run.join("curves.csv")).unwrap(), curves);
}

#[test]
fn seed_flag_names_the_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.policy.episodes = 1;
    let path = write_config(tmp.path(), &cfg);
    let o = rlseg(&["train-policy", "--config", path.to_str().unwrap(), "--seed", "4", "--out", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let run = tmp.path().join("tiny-seed4");
    assert!(run.join("agent.bin").exists() && run.join("learner.bin").exists());
    let returns = fs::read_to_string(run.join("returns.csv")).unwrap();
    assert_eq!(returns.lines().count(), 2);
    let written = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(written.evaluation.seeds, vec![4]);
}

#[test]
fn report_on_fixture_matches_goldens() {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/table1");
    let tmp = tempfile::tempdir().unwrap();
    fs::copy(fixture.join("manifest.json"), tmp.path().join("manifest.json")).unwrap();
    let o = rlseg(&["report", tmp.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for e in fs::read_dir(fixture.join("golden")).unwrap() {
        let golden = e.unwrap().path();
        let name = golden.file_name().unwrap();
        assert_eq!(fs::read(tmp.path().join(name)).unwrap(), fs::read(&golden).unwrap(), "{name:?}");
    }
}

#[test]
fn invalid_config_fails_with_the_field_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.policy.budget = 0;
    let path = write_config(tmp.path(), &cfg);
    let o = rlseg(&["gen", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("policy.budget"), "{}", stderr(&o));

    let text = tiny().to_toml_string().unwrap().replace("[policy]", "[policy]\nbogus = 1");
    fs::write(&path, text).unwrap();
    let o = rlseg(&["gen", "--config", path.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));

    let o = rlseg(&["gen", "--config", "no-such-preset"]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn report_rejects_missing_or_foreign_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let o = rlseg(&["report", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());

    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/table1/manifest.json");
    let text = fs::read_to_string(fixture).unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    fs::write(tmp.path().join("manifest.json"), text).unwrap();
    let o = rlseg(&["report", tmp.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("99"), "{}", stderr(&o));
}

#[test]
fn presets_print_parseable_toml() {
    for name in rlseg_core::config::PRESETS {
        let o = rlseg(&["preset", name]);
        assert!(o.status.success());
        let cfg = RunConfig::from_toml_str(&String::from_utf8(o.stdout).unwrap()).unwrap();
        assert_eq!(Some(cfg), RunConfig::preset(name));
    }
    assert!(!rlseg(&["preset", "nope"]).status.success());
}
