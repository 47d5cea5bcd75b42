use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xaiseg::autodiff::Tensor;
use xaiseg::model::ModelParams;

fn xaiseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xaiseg")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "n_volumes=4\ndepth=4\nheight=32\nwidth=32\nradius_min=6\nradius_max=8\n";

/// Writes a spec and generates a dataset, returning the manifest path.
fn dataset(dir: &Path, spec: &str, seed: &str) -> PathBuf {
    let spec_path = dir.join("spec.txt");
    std::fs::write(&spec_path, spec).unwrap();
    let out = dir.join("data");
    let o = xaiseg(&["phantom", "--spec", s(&spec_path), "--out", s(&out), "--seed", seed]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.txt")
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn phantom_writes_manifest_and_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let m = dataset(a.path(), SMALL, "5");
    dataset(b.path(), SMALL, "5");
    let text = std::fs::read_to_string(&m).unwrap();
    assert!(text.starts_with("# xaiseg "));
    assert!(text.contains("# seed=5\n"));
    for line in text.lines().filter(|l| !l.starts_with('#')) {
        let f: Vec<&str> = line.split_whitespace().collect();
        for p in &f[4..] {
            assert!(m.parent().unwrap().join(p).exists(), "{p}");
        }
    }
    assert_eq!(read_dir_bytes(&a.path().join("data")), read_dir_bytes(&b.path().join("data")));
}

#[test]
fn bad_spec_names_the_field() {
    let d = tempfile::tempdir().unwrap();
    let spec = d.path().join("spec.txt");
    std::fs::write(&spec, "radius_min=4\nradius_max=8\neasy.wall_min=5\neasy.wall_max=6\n").unwrap();
    let o = xaiseg(&["phantom", "--spec", s(&spec), "--out", s(&d.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("wall"));

    std::fs::write(&spec, "radius_mni=4\n").unwrap();
    let o = xaiseg(&["phantom", "--spec", s(&spec), "--out", s(&d.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("radius_mni"));
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let missing = d.path().join("nope.txt");
    let o = xaiseg(&["train-pairs", "--data", s(&missing), "--out", s(&d.path().join("p.bin"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_epochs_write_initial_checkpoints() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), SMALL, "1");
    let p = d.path().join("p.bin");
    let o = xaiseg(&["train-pairs", "--data", s(&m), "--out", s(&p), "--epochs", "0", "--seed", "4"]);
    assert!(o.status.success());
    assert_eq!(xaiseg::pairnet::PairNet::read(&p).unwrap(), PipeNet::pipe_net(xaiseg::pairnet::PairNet::init(4).params.rounded()));

    let model = d.path().join("m.bin");
    let o = xaiseg(&[
        "train", "--data", s(&m), "--pairnet", s(&p), "--target", "wall", "--out", s(&model), "--epochs", "0", "--seed", "6",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(ModelParams::read(&model).unwrap().params, ModelParams::init(6).params.rounded());
}

trait PipeNet {
    fn pipe_net(self) -> xaiseg::pairnet::PairNet;
}

impl PipeNet for xaiseg::nn::ParamSet {
    fn pipe_net(self) -> xaiseg::pairnet::PairNet {
        xaiseg::pairnet::PairNet::from_params(self).unwrap()
    }
}

#[test]
fn pair_classifier_learns_phantom_pairs() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(
        d.path(),
        "n_volumes=16\nsplit=0.75\ndepth=8\nheight=32\nwidth=32\nradius_min=6\nradius_max=9\ndrift=1.5\ncomplex_fraction=0\n",
        "2",
    );
    let p = d.path().join("p.bin");
    let o = xaiseg(&["train-pairs", "--data", s(&m), "--out", s(&p), "--epochs", "25", "--seed", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let acc: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("held-out accuracy: "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(acc >= 0.95, "{out}");
    let hist = std::fs::read_to_string(d.path().join("p.bin.csv")).unwrap();
    assert!(hist.contains("epoch,loss,accuracy\n") && hist.contains("# target=wall\n"));
}

#[test]
fn train_smoke_run_has_finite_losses() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), SMALL, "1");
    let p = d.path().join("p.bin");
    assert!(xaiseg(&["train-pairs", "--data", s(&m), "--out", s(&p), "--epochs", "1"]).status.success());
    let model = d.path().join("m.bin");
    let o = xaiseg(&["train", "--data", s(&m), "--pairnet", s(&p), "--target", "lumen", "--out", s(&model), "--epochs", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rep = std::fs::read_to_string(d.path().join("m.bin.csv")).unwrap();
    assert!(rep.contains("# lambda_div=0.2\n"));
    let rows: Vec<&str> = rep.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 2);
    for row in rows {
        for v in row.split(',').skip(2) {
            assert!(v.parse::<f64>().unwrap().is_finite(), "{row}");
        }
    }

    let o = xaiseg(&["train", "--data", s(&m), "--pairnet", s(&p), "--target", "neither", "--out", s(&model)]);
    assert_eq!(o.status.code(), Some(2));
}

fn summary(csv: &str, tier: &str) -> Vec<f64> {
    let line = csv.lines().find(|l| l.starts_with(&format!("{tier},"))).unwrap();
    line.split(',').skip(1).map(|v| v.parse().unwrap()).collect()
}

#[test]
fn eval_oracle_and_empty_predictions() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), "n_volumes=4\nsplit=0.5\ndepth=3\nheight=32\nwidth=32\nradius_min=6\nradius_max=8\n", "1");
    let out = d.path().join("e.csv");
    let o = xaiseg(&["eval", "--model", "oracle", "--data", s(&m), "--target", "wall", "--out", s(&out)]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    assert_eq!(summary(&csv, "all"), vec![6.0, 100.0, 0.0, 100.0, 0.0, 0.0, 0.0]);

    // tier filter keeps only manifest-tagged volumes
    let o = xaiseg(&["eval", "--model", "oracle", "--data", s(&m), "--target", "wall", "--tier", "complex", "--out", s(&out)]);
    assert!(o.status.success());
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| l.starts_with("vol0")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').nth(2) == Some("complex")));
    assert!(!csv.contains("\ngeneral,"));

    // a model whose decoder bias drowns every logit predicts nothing
    let mut mp = ModelParams::init(0);
    let last = 19;
    let shape = mp.params.tensors[last].shape;
    mp.params.tensors[last] = Tensor::filled(shape, -60.0);
    let ckpt = d.path().join("empty.bin");
    mp.write(&ckpt).unwrap();
    let o = xaiseg(&["eval", "--model", s(&ckpt), "--data", s(&m), "--target", "lumen", "--kappa", "0", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    for r in csv.lines().filter(|l| l.starts_with("vol0")) {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!((f[3], f[4]), ("0", "0"), "{r}");
        assert!(f[6].contains("hd95_sentinel"));
    }
}

#[test]
fn probe_oracle_rows_and_determinism() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), "n_volumes=2\nsplit=0.5\ndepth=4\nheight=32\nwidth=32\nradius_min=6\nradius_max=8\n", "3");
    let (a, b) = (d.path().join("a.csv"), d.path().join("b.csv"));
    let ov = d.path().join("ov");
    for out in [&a, &b] {
        let o = xaiseg(&[
            "probe", "--model", "oracle", "--data", s(&m), "--target", "wall", "--r", "1", "--out", s(out), "--overlays", s(&ov),
            "--worst-k", "2",
        ]);
        assert!(o.status.success());
    }
    let csv = std::fs::read_to_string(&a).unwrap();
    assert_eq!(csv, std::fs::read_to_string(&b).unwrap());
    let header = csv.lines().position(|l| l.starts_with("slice_id,")).unwrap();
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(header + 1)
        .take_while(|l| !l.starts_with('#'))
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for r in rows {
        let foi: f64 = r[2].parse().unwrap();
        let leak: f64 = r[4].parse().unwrap();
        assert!((foi - 1.0).abs() < 1e-6 && leak < 1e-9);
    }
    assert_eq!(std::fs::read_dir(&ov).unwrap().count(), 6);
}

#[test]
fn probe_single_slice_has_no_correlation() {
    let d = tempfile::tempdir().unwrap();
    let m = dataset(d.path(), "n_volumes=1\nsplit=0\ndepth=1\nheight=32\nwidth=32\nradius_min=6\nradius_max=8\n", "3");
    let out = d.path().join("p.csv");
    let o = xaiseg(&["probe", "--model", "oracle", "--data", s(&m), "--target", "lumen", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.contains("# spearman_jsd_err absent: undefined_for_input"));
    assert!(!csv.lines().any(|l| l.starts_with("spearman")));
}

#[test]
fn verify_suites() {
    let o = xaiseg(&["verify", "--n", "10"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS ")));
    assert_eq!(xaiseg(&["verify", "--suite", "nope"]).status.code(), Some(2));
}
