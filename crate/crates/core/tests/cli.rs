use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pii::data::{save_dataset, write_matrix_csv, FitResult};
use pii::identification::FiniteModel;
use pii::simulation::LinearGaussian;

fn pii(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pii")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    fs::write(&p, body).unwrap();
    p
}

fn run_ok(sub: &str, cfg: &Path, extra: &[&str]) -> Output {
    let mut args = vec![sub, "--config", cfg.to_str().unwrap()];
    args.extend_from_slice(extra);
    let out = pii(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// 50 rows, one covariate, ten outcomes of which four are controls.
fn small_data(dir: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    let dgp = LinearGaussian {
        n: 50,
        d: 1,
        r: 2,
        p: 10,
        n_controls: 4,
        nonnull_prob: 0.3,
        effect_size: 1.0,
        confounding: 0.5,
        noise_sd: 1.0,
    };
    let inst = dgp.generate(3, 0).unwrap();
    let (x, y, c, u) = (dir.join("x.csv"), dir.join("y.csv"), dir.join("controls.txt"), dir.join("u.csv"));
    save_dataset(&inst.dataset, &x, &y, Some(&c)).unwrap();
    write_matrix_csv(&u, &["u0".into(), "u1".into()], &inst.u).unwrap();
    (x, y, c, u)
}

fn files_section(x: &Path, y: &Path, c: &Path) -> String {
    format!("x = {:?}\ny = {:?}\ncontrols = {:?}\n", x, y, c)
}

#[test]
fn unknown_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[simulate]\nn = 50\np = 10\nn_controls = 4\nreplications = 1\nmax_dept = 3\n",
    );
    let out = pii(&["simulate", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_dept"));
}

#[test]
fn missing_section_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "seed = 1\n");
    let out = pii(&["fit", "--config", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn fit_then_test_on_small_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, c, _) = small_data(dir.path());
    let fit_dir = dir.path().join("fit");
    let cfg = write_config(
        dir.path(),
        &format!(
            "out_dir = {:?}\n[fit]\n{}embed = {{ method = \"pca\", rank = 2 }}\n[fit.options]\nlink = \"identity\"\nx_learner = {{ model = {{ kind = \"ols\" }} }}\ny_learner = {{ model = {{ kind = \"ols\" }} }}\n",
            fit_dir,
            files_section(&x, &y, &c)
        ),
    );
    run_ok("fit", &cfg, &[]);
    let fit = FitResult::read_json(&fit_dir.join("fit.json")).unwrap();
    assert_eq!((fit.d(), fit.p()), (1, 10));
    assert_eq!(fit.controls().len(), 4);
    assert!(fit_dir.join("resolved_config.toml").exists());

    let test_dir = dir.path().join("test");
    let cfg = write_config(
        dir.path(),
        &format!("out_dir = {:?}\n[test]\nfit = {:?}\n", test_dir, fit_dir.join("fit.json")),
    );
    run_ok("test", &cfg, &[]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(test_dir.join("test_report.json")).unwrap()).unwrap();
    assert!(report.is_object());
    assert!(test_dir.join("test_report.csv").exists());
}

#[test]
fn identify_recovers_the_binary_model() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("model.json");
    fs::write(&model, serde_json::to_string(&FiniteModel::binary_example()).unwrap()).unwrap();
    let cfg = write_config(dir.path(), &format!("out_dir = {:?}\n[identify]\nmodel = {:?}\n", dir.path(), model));
    run_ok("identify", &cfg, &[]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("identification.json")).unwrap()).unwrap();
    assert!(v["max_counterfactual_error"].as_f64().unwrap() < 1e-10);
}

#[test]
fn diagnose_fwl_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let (x, y, c, u) = small_data(dir.path());
    let cfg = write_config(
        dir.path(),
        &format!(
            "out_dir = {:?}\n[diagnose]\ncheck = \"fwl\"\n[diagnose.files]\n{}u = {:?}\n",
            dir.path(),
            files_section(&x, &y, &c),
            u
        ),
    );
    run_ok("diagnose", &cfg, &[]);
    let v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("diagnose.json")).unwrap()).unwrap();
    assert_eq!(v["check"], "fwl");
    assert!(v["max_coef_gap"].as_f64().unwrap() < 1e-8);
}

#[test]
fn simulate_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"seed = 5
[simulate]
n = 120
p = 30
r = 3
n_controls = 10
replications = 3
methods = ["glm_naive", "pii_true_u", "pii_est_u"]
[simulate.learners]
link = "logit"
x_learner = { model = { kind = "random_forest", n_trees = 4, max_depth = 3 } }
y_learner = { model = { kind = "random_forest", n_trees = 4, max_depth = 3 } }
outer_learner = { model = { kind = "random_forest", n_trees = 4, max_depth = 3 } }
n_folds = 2
"#,
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_ok("simulate", &cfg, &["--out", a.to_str().unwrap(), "--threads", "1"]);
    run_ok("simulate", &cfg, &["--out", b.to_str().unwrap(), "--threads", "3"]);
    for f in ["sim_report.json", "sim_report.csv"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_override_changes_the_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[simulate]\nn = 60\np = 12\nr = 2\nn_controls = 4\nreplications = 1\nmethods = [\"glm_naive\"]\n",
    );
    run_ok("simulate", &cfg, &["--out", dir.path().to_str().unwrap(), "--seed-override", "77"]);
    let snap = fs::read_to_string(dir.path().join("resolved_config.toml")).unwrap();
    assert!(snap.contains("seed = 77"), "{snap}");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            pii::config::RunConfig::load(&path, None).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            n += 1;
        }
    }
    assert!(n >= 4);
}

#[test]
fn readme_fit_example_parses() {
    let readme = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../README.md")).unwrap();
    let start = readme.find("```toml\n").unwrap() + 8;
    let body = &readme[start..start + readme[start..].find("```").unwrap()];
    let cfg = pii::config::RunConfig::parse(body, None).unwrap();
    assert_eq!(cfg.fit.unwrap().embed.unwrap().preprocessing.len(), 2);
}
