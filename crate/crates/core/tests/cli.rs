use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use paircfr::cli::Manifest;
use paircfr::trainer::TrainHistory;
use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_paircfr"));
    c.env_remove("PAIRCFR_SEED");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/cad_32.tsv")
}

fn small_theorems(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(
        &p,
        "[theorems]\nn_pairs = 20000\nn_mc = 20000\nce_pair_instances = 100\ncl_pair_instances = 20\ngradcheck_instances = 10\n",
    )
    .unwrap();
    p
}

fn check_manifest(dir: &Path) -> Manifest {
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.path)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&bytes)), f.sha256, "{}", f.path);
        assert_eq!(bytes.len() as u64, f.bytes);
    }
    assert!(m.files.iter().any(|f| f.path == "effective_config.toml"));
    m
}

#[test]
fn verify_theorems_default_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["verify-theorems"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rep: paircfr::theorems::TheoremReport =
        serde_json::from_str(&fs::read_to_string(out.join("theorems.json")).unwrap()).unwrap();
    assert!(rep.results.len() >= 6);
    assert!(rep.all_passed);
    assert!(out.join("theorems.txt").exists());
    check_manifest(&out);
}

#[test]
fn tight_monte_carlo_tolerance_fails_the_gate() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_theorems(tmp.path());
    let out = tmp.path().join("run");
    let o = run(&["verify-theorems", "--config", cfg.to_str().unwrap(), "--mc-tolerance", "1e-12"], &out);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("cl_pair_expectation"), "{}", stderr(&o));
    assert_eq!(check_manifest(&out).exit_code, 2);
}

#[test]
fn zero_tau_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["verify-theorems", "--tau", "0"], &out);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("tau"));
    assert!(!out.exists(), "nothing runs before validation");

    let cfg = tmp.path().join("tau.toml");
    fs::write(&cfg, "[theorems]\ntau = 0.0\n").unwrap();
    assert_eq!(code(&run(&["verify-theorems", "--config", cfg.to_str().unwrap()], &out)), 1);
}

#[test]
fn parse_and_config_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    assert_eq!(code(&run(&["no-such-command"], &out)), 1);
    assert_eq!(code(&run(&["train", "--seed", "abc"], &out)), 1);
    assert_eq!(code(&run(&["train", "--config", "/nonexistent/cfg.toml"], &out)), 1);
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "[experiment.train]\nbatch_size = 1\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", bad.to_str().unwrap()], &out)), 1);
    let unknown = tmp.path().join("unknown.toml");
    fs::write(&unknown, "speed = 3\n").unwrap();
    assert_eq!(code(&run(&["train", "--config", unknown.to_str().unwrap()], &out)), 1);
    assert_eq!(code(&run(&["ingest", "--input", "/nonexistent.tsv"], &out)), 1);
    let o = bin().arg("--help").output().unwrap();
    assert_eq!(code(&o), 0);
}

#[test]
fn generate_writes_dataset_and_sidecar() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.toml");
    fs::write(&cfg, "[generate]\nn_pairs = 50\nood = [\"spurious_flip\"]\nood_size = 20\n").unwrap();
    let out = tmp.path().join("run");
    let o = run(&["generate", "--config", cfg.to_str().unwrap(), "--seed", "3"], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = paircfr::feature_model::PairedDataset::load(&out.join("dataset.tsv")).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.provenance().seed, 3);
    assert!(out.join("dataset.json").exists());
    assert!(out.join("ood_spurious_flip.tsv").exists());
    let m = check_manifest(&out);
    assert!(m.files.iter().any(|f| f.path == "dataset.json"));
}

#[test]
fn ingest_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let o = run(&["ingest", "--input", fixture().to_str().unwrap()], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let ds = paircfr::feature_model::PairedDataset::load(&out.join("dataset.tsv")).unwrap();
    assert_eq!(ds.groups().len(), 32);
    check_manifest(&out);
}

fn fixture_config(dir: &Path) -> PathBuf {
    let p = dir.join("text.toml");
    fs::write(
        &p,
        format!(
            r#"[experiment]
seeds = [0]
ood = []

[experiment.train]
batch_size = 8
optimizer = {{ kind = "adam_w", lr = 0.01, beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01 }}

[experiment.data]
kind = "text"
path = "{}"
schema = {{ text_columns = ["text"], label_column = "label", pair_id_column = "pair_id", role_column = "role", label_table = {{ Negative = 0, Positive = 1 }} }}
featurizer = {{ dim = 16384, ngram_orders = [1, 2], normalization = "l2", seed = 0 }}
"#,
            fixture().display()
        ),
    )
    .unwrap();
    p
}

#[test]
fn train_on_text_fixture_is_fast_and_reproducible_from_echo() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = fixture_config(tmp.path());
    let out = tmp.path().join("run");
    let start = Instant::now();
    let o = run(&["train", "--config", cfg.to_str().unwrap()], &out);
    assert!(start.elapsed() < Duration::from_secs(10));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist: TrainHistory = serde_json::from_str(&fs::read_to_string(out.join("history_0.json")).unwrap()).unwrap();
    assert!(hist.stopping_epoch >= 1);
    assert!(out.join("model_0.json").exists());
    check_manifest(&out);

    let echo = out.join("effective_config.toml");
    let again = tmp.path().join("again");
    let o = run(&["train", "--config", echo.to_str().unwrap()], &again);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["report.json", "history_0.json", "model_0.json", "effective_config.toml"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_env_is_overridden_by_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("gen.toml");
    fs::write(&cfg, "seed = 1\n[generate]\nn_pairs = 4\n").unwrap();
    let seed_of = |out: &Path| {
        paircfr::feature_model::PairedDataset::load(&out.join("dataset.tsv"))
            .unwrap()
            .provenance()
            .seed
    };
    let a = tmp.path().join("a");
    run(&["generate", "--config", cfg.to_str().unwrap()], &a);
    assert_eq!(seed_of(&a), 1);
    let b = tmp.path().join("b");
    bin()
        .env("PAIRCFR_SEED", "8")
        .args(["generate", "--config", cfg.to_str().unwrap(), "--out", b.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(seed_of(&b), 8);
    let c = tmp.path().join("c");
    bin()
        .env("PAIRCFR_SEED", "8")
        .args(["generate", "--config", cfg.to_str().unwrap(), "--seed", "9", "--out", c.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(seed_of(&c), 9);
}

#[test]
fn sweep_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("sweep.toml");
    fs::write(
        &cfg,
        "[experiment]\nseeds = [0, 1]\nood = [\"edited_null\"]\nood_size = 100\n[experiment.data]\nkind = \"synthetic\"\nn_pairs = 100\nspec = { layout = { dim_r1 = 1, dim_r2 = 1, dim_s = 1 }, mu_r1 = [1.0], mu_r2 = [1.0], mu_s = [1.0], sigma_r1 = [[1.0]], sigma_r2 = [[1.0]], sigma_s = [[1.0]] }\n[sweep]\nlambda = [0.0, 0.5]\n",
    )
    .unwrap();
    let runs = tmp.path().join("runs");
    let o = run(&["sweep", "--config", cfg.to_str().unwrap(), "--threads", "2"], &runs.join("sweep"));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(runs.join("sweep/sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * (2 + 2));

    let rendered = tmp.path().join("rendered");
    let o = bin()
        .args(["report", "--from", runs.to_str().unwrap(), "--out", rendered.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let md = fs::read_to_string(rendered.join("report.md")).unwrap();
    assert!(md.contains("ood_edited_null"));
    assert!(rendered.join("plot_sweep_sweep.tsv").exists());
}

#[test]
fn report_on_empty_directory_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["report", "--from", tmp.path().to_str().unwrap(), "--out", tmp.path().join("r").to_str().unwrap()])
        .output()
        .unwrap();
    assert_ne!(code(&o), 0);
    assert!(stderr(&o).contains("no reports found"));
}

#[test]
fn gradcheck_command() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("g.toml");
    fs::write(&cfg, "[gradcheck]\ninstances = 5\n").unwrap();
    let out = tmp.path().join("run");
    let o = run(&["gradcheck", "--config", cfg.to_str().unwrap()], &out);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(out.join("gradcheck.json").exists());
    fs::write(&cfg, "[gradcheck]\ninstances = 5\ntolerance = 0.0\n").unwrap();
    assert_eq!(code(&run(&["gradcheck", "--config", cfg.to_str().unwrap()], &out)), 2);
}
