use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const TINY: &str = r#"
seed = 3

[data]
train_episodes = 20
eval_episodes = 20

[model]
hidden = 16

[train]
epochs = 2
save_every = 1

[diagnose]
observations = 2
score_samples = 22
"#;

fn slotlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slotlab"))
        .args(args)
        .env_remove("SLOTLAB_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slotlab(args);
    assert!(
        out.status.success(),
        "slotlab {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fail(args: &[&str]) -> String {
    let out = slotlab(args);
    assert!(!out.status.success(), "slotlab {args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("lab.toml");
        fs::write(&path, config).unwrap();
        let out = tmp.path().join("run");
        Self { config: path, out, _tmp: tmp }
    }

    fn args<'a>(&'a self, cmd: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec![cmd, "-c", self.config.to_str().unwrap(), "--out", self.out.to_str().unwrap()];
        v.extend_from_slice(extra);
        v
    }

    fn ok(&self, cmd: &str, extra: &[&str]) -> String {
        ok(&self.args(cmd, extra))
    }

    fn fail(&self, cmd: &str, extra: &[&str]) -> String {
        fail(&self.args(cmd, extra))
    }
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

fn contains(haystack: &[u8], needle: &str) -> bool {
    haystack.windows(needle.len()).any(|w| w == needle.as_bytes())
}

fn pipeline(run: &Run) {
    run.ok("generate", &[]);
    run.ok("train", &[]);
    run.ok("eval", &[]);
    run.ok("diagnose", &[]);
}

fn csv_rows(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn pipeline_reruns_are_byte_identical_and_stamped() {
    let a = Run::new(TINY);
    let b = Run::new(TINY);
    pipeline(&a);
    pipeline(&b);
    let (ta, tb) = (tree(&a.out), tree(&b.out));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs between reruns", path.display());
    }
    for name in [
        "data/train.sltd",
        "data/eval.sltd",
        "model/checkpoint.sltc",
        "model/epoch_0002.sltc",
        "model/losses.csv",
        "eval/metrics.toml",
        "eval/metrics.csv",
    ] {
        assert!(ta.contains_key(Path::new(name)), "missing {name}");
    }

    let metrics: toml::Table = toml::from_str(std::str::from_utf8(&ta[Path::new("eval/metrics.toml")]).unwrap()).unwrap();
    let hash = metrics["provenance"]["config_hash"].as_str().unwrap().to_string();
    assert_eq!(hash.len(), 16);
    let stamped: Vec<&PathBuf> = ta.keys().collect();
    assert!(stamped.iter().any(|p| p.extension().is_some_and(|e| e == "pgm")));
    assert!(stamped.iter().any(|p| p.ends_with("update_matrix.csv")));
    for path in stamped {
        let bytes = &ta[path];
        assert!(contains(bytes, &hash), "{} lacks the config hash", path.display());
        assert!(contains(bytes, "seed = 3"), "{} lacks the seed", path.display());
        assert!(contains(bytes, "kind = \"iid\""), "{} lacks the split", path.display());
    }

    // Moving the output root does not change the hash.
    let diag = ta.keys().find(|p| p.starts_with("diagnose")).unwrap();
    assert!(diag.to_string_lossy().contains(&format!("iid-k0-{}", &hash[..8])));
}

#[test]
fn infeasible_split_writes_nothing() {
    let run = Run::new(TINY);
    let err = run.fail("generate", &["--split", "extrapolation_color", "--k", "7"]);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error[infeasible-split]: "), "{err}");
    assert!(!run.out.join("data").exists() || tree(&run.out).is_empty());
}

#[test]
fn bad_inputs_report_a_category() {
    let run = Run::new(TINY);
    assert!(run.fail("generate", &["--set", "train.epochz=3"]).starts_with("error[config]"));
    assert!(run.fail("generate", &["--set", "eval.horizons=[11]"]).starts_with("error[config]"));
    assert!(run.fail("train", &[]).starts_with("error[io]"));
}

#[test]
fn env_mismatch_is_refused() {
    let run = Run::new(TINY);
    run.ok("generate", &[]);
    let err = run.fail("train", &["--env", "blocks"]);
    assert!(err.starts_with("error[mismatch]"), "{err}");
    run.ok("train", &[]);
    let err = run.fail("eval", &["--env", "blocks"]);
    assert!(err.starts_with("error[mismatch]") && err.contains("shapes"), "{err}");
    let err = run.fail("eval", &["--env", "three_body"]);
    assert!(err.starts_with("error[mismatch]"), "{err}");
}

#[test]
fn sweep_covers_kinds_by_k_by_horizon() {
    let run = Run::new(TINY);
    run.ok("generate", &[]);
    run.ok("train", &[]);
    let table = run.ok("eval", &["--sweep"]);
    let rows = csv_rows(&table);
    let mut kinds: Vec<&str> = rows.iter().map(|r| r[2].as_str()).collect();
    kinds.dedup();
    // Every kind trained on the default assignment, each once, in fixed order.
    assert_eq!(kinds, ["new_conjunction", "extrapolation_color", "extrapolation_shape"]);
    assert_eq!(rows.len(), kinds.len() * 5 * 3);
    let order: Vec<(usize, usize)> = rows.iter().map(|r| (r[3].parse().unwrap(), r[4].parse().unwrap())).collect();
    let expected: Vec<(usize, usize)> = (1..=5).flat_map(|k| [1, 5, 10].map(|h| (k, h))).collect();
    for chunk in order.chunks(15) {
        assert_eq!(chunk, expected.as_slice());
    }
    let file = fs::read_to_string(run.out.join("eval/sweep.csv")).unwrap();
    assert_eq!(csv_rows(&file), rows);

    let one = run.ok("eval", &["--sweep", "--set", r#"eval.sweep_kinds=["extrapolation_shape"]"#]);
    assert_eq!(csv_rows(&one).len(), 15);
    let err = run.fail("eval", &["--sweep", "--set", r#"eval.sweep_kinds=["new_dimension_shape_train"]"#]);
    assert!(err.starts_with("error[mismatch]"), "{err}");
}

#[test]
fn autoencoder_baseline_trains_and_evaluates() {
    let run = Run::new(TINY);
    run.ok("generate", &[]);
    let out = run.ok("train", &["--model", "ae"]);
    assert!(out.starts_with("trained epochs 1..2 "), "{out}");
    let table = run.ok("eval", &["--model", "ae"]);
    let rows = csv_rows(&table);
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r[1] == "ae"));
    let diag = run.ok("diagnose", &["--model", "ae"]);
    assert!(diag.contains("factorization n/a"), "{diag}");
}

fn losses(run: &Run) -> Vec<f64> {
    let text = fs::read_to_string(run.out.join("model/losses.csv")).unwrap();
    csv_rows(&text).iter().map(|r| r[1].parse().unwrap()).collect()
}

#[test]
fn resumed_training_continues_the_curve() {
    let whole = Run::new(TINY);
    whole.ok("generate", &[]);
    whole.ok("train", &["--epochs", "6"]);

    let split = Run::new(TINY);
    split.ok("generate", &[]);
    split.ok("train", &["--epochs", "3"]);
    let out = split.ok("train", &["--epochs", "6", "--resume"]);
    assert!(out.starts_with("trained epochs 4..6 "), "{out}");

    let (a, b) = (losses(&whole), losses(&split));
    assert_eq!(a.len(), 6);
    assert_eq!(a, b);
    assert!(b[3] <= 1.1 * b[2], "loss jumped from {} to {} on resume", b[2], b[3]);
    assert_eq!(
        fs::read(whole.out.join("model/checkpoint.sltc")).unwrap(),
        fs::read(split.out.join("model/checkpoint.sltc")).unwrap()
    );
}

#[test]
fn output_root_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_slotlab"))
        .args(["generate", "--set", "data.train_episodes=2", "--set", "data.eval_episodes=2"])
        .env("SLOTLAB_OUT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("data/train.sltd").exists());
    assert!(root.join("data/eval.manifest.toml").exists());
}

#[test]
fn smoke_run_fits_the_budget() {
    let run = Run::new("[data]\ntrain_episodes = 100\neval_episodes = 100\n\n[train]\nepochs = 10\n");
    let start = Instant::now();
    run.ok("generate", &[]);
    let out = run.ok("train", &[]);
    let elapsed = start.elapsed();
    assert!(out.starts_with("trained epochs 1..10 "), "{out}");
    assert!(elapsed < Duration::from_secs(300), "smoke run took {elapsed:?}");
    let l = losses(&run);
    assert!(l[9] < l[0], "{l:?}");
}
