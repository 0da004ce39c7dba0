use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use siamcd::tensor::scdt;
use siamcd::Tensor;
use tempfile::TempDir;

fn siamcd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_siamcd"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = siamcd(args, cwd);
    assert_eq!(
        out.status.code(),
        Some(0),
        "siamcd {}: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

const TINY: &str = "model.encoder_filters=4,8\ntrain.learning_rate=0.01\ntrain.batch_size=4\n";

/// A small synthetic dataset plus a model trained on it, shared by the tests.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        fs::write(d.join("tiny.cfg"), TINY).unwrap();
        ok(
            &[
                "synth",
                "--out",
                "data",
                "--count",
                "10",
                "--size",
                "32",
                "--test-count",
                "2",
                "--seed",
                "4",
            ],
            d,
        );
        ok(
            &[
                "train", "--data", "data", "--config", "tiny.cfg", "--steps", "200", "--out", "m.ckpt", "--quiet",
            ],
            d,
        );
        Fixture { dir }
    })
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for e in fs::read_dir(&p).unwrap() {
            let e = e.unwrap().path();
            if e.is_dir() {
                stack.push(e);
            } else {
                files.push((
                    e.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&e).unwrap(),
                ));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn help_lists_flags_with_defaults() {
    let d = tempfile::tempdir().unwrap();
    for (sub, needles) in [
        ("synth", &["--count", "[default: 16]", "--format", "[default: png]"][..]),
        (
            "glimpse",
            &[
                "--u",
                "[default: 0.1]",
                "[default: 0.5]",
                "[default: 2]",
                "--export-masks",
            ][..],
        ),
        (
            "train",
            &[
                "--variant",
                "[default: diff]",
                "--gated",
                "[default: true]",
                "--config",
                "--set",
            ][..],
        ),
        ("eval", &["--threshold", "[default: 0.5]", "--oracle", "--sweep"][..]),
        ("infer", &["--t1", "--t2", "--out", "[default: 0.5]"][..]),
    ] {
        let help = ok(&[sub, "--help"], d.path());
        for n in needles {
            assert!(help.contains(n), "{sub} --help lacks {n}:\n{help}");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(siamcd(&["train", "--bogus"], d.path()).status.code(), Some(1));
    assert_eq!(siamcd(&["frobnicate"], d.path()).status.code(), Some(1));
    fs::write(d.path().join("bad.cfg"), "model.depth=3\n").unwrap();
    let out = siamcd(&["synth", "--out", "x", "--config", "bad.cfg"], d.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.depth"));
    assert!(!d.path().join("x").exists());
    let out = siamcd(&["synth", "--out", "x", "--set", "train.steps=lots"], d.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn glimpse_is_pure_and_records_parameters() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let data = f.path("data");
    let data = data.to_str().unwrap();
    ok(&["glimpse", "--in", data, "--out", "g1", "--export-masks"], d.path());
    ok(&["glimpse", "--in", data, "--out", "g2", "--export-masks"], d.path());
    let (a, b) = (read_all(&d.path().join("g1")), read_all(&d.path().join("g2")));
    assert_eq!(a, b);
    assert_eq!(
        fs::read_to_string(d.path().join("g1/glimpse.txt")).unwrap(),
        "u=0.1\ns=0.5\nd=2\n"
    );
    assert!(a.iter().any(|(n, _)| n == "masks/a_y_32.scdt"));
    assert_eq!(
        fs::read(d.path().join("g1/train.txt")).unwrap(),
        fs::read(f.path("data/train.txt")).unwrap()
    );
    // labels are copied untouched
    assert_eq!(
        fs::read(d.path().join("g1/s0003/label.png")).unwrap(),
        fs::read(f.path("data/s0003/label.png")).unwrap()
    );
}

#[test]
fn missing_label_names_the_sample() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--out",
            "data",
            "--count",
            "3",
            "--size",
            "16",
            "--test-count",
            "0",
        ],
        d.path(),
    );
    fs::remove_file(d.path().join("data/s0001/label.png")).unwrap();
    let out = siamcd(&["glimpse", "--in", "data", "--out", "g"], d.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("s0001"));
    assert!(!d.path().join("g").exists());
    assert_eq!(fs::read_dir(d.path()).unwrap().count(), 1, "no staging leftovers");
}

#[test]
fn fixed_seed_training_is_byte_identical() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    let data = f.path("data");
    let data = data.to_str().unwrap();
    for out in ["a.ckpt", "b.ckpt"] {
        ok(
            &[
                "train", "--data", data, "--config", "tiny.cfg", "--steps", "6", "--seed", "11", "--out", out,
                "--quiet",
            ],
            d.path(),
        );
    }
    assert_eq!(
        fs::read(d.path().join("a.ckpt")).unwrap(),
        fs::read(d.path().join("b.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(d.path().join("a.ckpt.log.csv")).unwrap(),
        fs::read(d.path().join("b.ckpt.log.csv")).unwrap()
    );
    let log = fs::read_to_string(d.path().join("a.ckpt.log.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "step,loss,recall,f1,precision,accuracy");
    assert_eq!(log.lines().count(), 7);
}

#[test]
fn non_finite_input_aborts_with_code_three() {
    let d = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--out",
            "data",
            "--count",
            "2",
            "--size",
            "16",
            "--test-count",
            "0",
            "--format",
            "scdt",
        ],
        d.path(),
    );
    let p = d.path().join("data/s0000/t1.scdt");
    let t = scdt::read(&p).unwrap();
    let mut v = t.to_vec();
    v[5] = f32::NAN;
    scdt::write(&p, &Tensor::new(t.shape(), v).unwrap()).unwrap();
    fs::write(d.path().join("tiny.cfg"), TINY).unwrap();
    let out = siamcd(
        &[
            "train", "--data", "data", "--config", "tiny.cfg", "--steps", "3", "--out", "m.ckpt",
        ],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step 1"));
    assert!(!d.path().join("m.ckpt").exists());
    assert!(!d.path().join("m.ckpt.log.csv").exists());
}

fn parse_csv(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(String::from).collect()).collect()
}

#[test]
fn oracle_eval_is_perfect_and_csv_matches_table() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let data = f.path("data");
    let stdout = ok(
        &["eval", "--oracle", "--data", data.to_str().unwrap(), "--out", "o"],
        d.path(),
    );
    let csv = parse_csv(&fs::read_to_string(d.path().join("o.csv")).unwrap());
    assert_eq!(csv[0].join(","), "network,u,s,d,Recall,F1,Precision,Accuracy");
    assert_eq!(csv[1][4..], ["100.00", "100.00", "100.00", "100.00"]);
    let printed: Vec<Vec<&str>> = stdout.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(printed[0], csv[0]);
    assert_eq!(printed[1], csv[1]);
    let tiles = parse_csv(&fs::read_to_string(d.path().join("o_tiles.csv")).unwrap());
    assert_eq!(tiles.len(), 1 + 2);
}

#[test]
fn eval_round_trips_and_sweep_is_monotone() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let (ckpt, data) = (f.path("m.ckpt"), f.path("data"));
    let stdout = ok(
        &[
            "eval",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--split",
            "all",
            "--sweep",
            "0.1,0.3,0.5,0.7,0.9",
            "--out",
            "r",
        ],
        d.path(),
    );
    let csv = parse_csv(&fs::read_to_string(d.path().join("r.csv")).unwrap());
    assert_eq!(csv[1][..4], ["FC-Siam-diff-Att", "-", "-", "-"]);
    let row: Vec<&str> = stdout.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(row, csv[1]);
    for v in &csv[1][4..] {
        let x: f64 = v.parse().unwrap();
        assert!((0.0..=100.0).contains(&x));
    }
    let sweep = parse_csv(&fs::read_to_string(d.path().join("r_sweep.csv")).unwrap());
    let positives: Vec<u64> = sweep[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(positives.len(), 5);
    assert!(positives.windows(2).all(|w| w[0] >= w[1]), "{positives:?}");
    let tiles = parse_csv(&fs::read_to_string(d.path().join("r_tiles.csv")).unwrap());
    let tp: u64 = tiles[1..].iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
    let fp: u64 = tiles[1..].iter().map(|r| r[2].parse::<u64>().unwrap()).sum();
    assert_eq!(tp + fp, positives[2], "tiles at 0.5 sum to the sweep row at 0.5");
}

#[test]
fn eval_rejects_mismatched_geometry() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    ok(
        &[
            "synth",
            "--out",
            "data",
            "--count",
            "2",
            "--size",
            "32",
            "--test-count",
            "0",
            "--format",
            "scdt",
        ],
        d.path(),
    );
    for id in ["s0000", "s0001"] {
        for img in ["t1", "t2"] {
            let p = d.path().join(format!("data/{id}/{img}.scdt"));
            let t = scdt::read(&p).unwrap();
            scdt::write(&p, &t.slice_channels(0, 1).unwrap()).unwrap();
        }
    }
    let ckpt = f.path("m.ckpt");
    let out = siamcd(
        &["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", "data", "--out", "r"],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("channels"));
    assert!(!d.path().join("r.csv").exists());
}

#[test]
fn infer_writes_both_maps() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let ckpt = f.path("m.ckpt");
    let (t1, t2) = (f.path("data/s0002/t1.png"), f.path("data/s0002/t2.png"));
    let args = |out: &'static str| {
        vec![
            "infer".to_string(),
            "--ckpt".into(),
            ckpt.display().to_string(),
            "--t1".into(),
            t1.display().to_string(),
            "--t2".into(),
            t2.display().to_string(),
            "--out".into(),
            out.into(),
        ]
    };
    let run = |out| ok(&args(out).iter().map(String::as_str).collect::<Vec<_>>(), d.path());
    run("a");
    run("b");
    assert_eq!(
        fs::read(d.path().join("a.scdt")).unwrap(),
        fs::read(d.path().join("b.scdt")).unwrap()
    );
    assert_eq!(
        fs::read(d.path().join("a.png")).unwrap(),
        fs::read(d.path().join("b.png")).unwrap()
    );
    let png = image::open(d.path().join("a.png")).unwrap().to_luma8();
    assert_eq!(png.dimensions(), (32, 32));
    assert!(png.pixels().all(|p| p[0] == 0 || p[0] == 255));
    let prob = scdt::read(d.path().join("a.scdt")).unwrap();
    assert_eq!(prob.shape(), &[1, 32, 32]);
    for (p, px) in prob.data().iter().zip(png.pixels()) {
        assert_eq!(*p >= 0.5, px[0] == 255);
    }
}

#[test]
fn identical_inputs_give_a_near_empty_map() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    let ckpt = f.path("m.ckpt");
    let t1 = f.path("data/s0005/t1.png");
    ok(
        &[
            "infer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--t1",
            t1.to_str().unwrap(),
            "--t2",
            t1.to_str().unwrap(),
            "--out",
            "same",
        ],
        d.path(),
    );
    let png = image::open(d.path().join("same.png")).unwrap().to_luma8();
    let changed = png.pixels().filter(|p| p[0] == 255).count();
    assert!(changed * 20 < 32 * 32, "{changed} changed pixels");
}

#[test]
fn infer_rejects_size_mismatch() {
    let f = fixture();
    let d = tempfile::tempdir().unwrap();
    scdt::write(d.path().join("small.scdt"), &Tensor::<f32>::zeros(&[3, 16, 16])).unwrap();
    let ckpt = f.path("m.ckpt");
    let t1 = f.path("data/s0000/t1.png");
    let out = siamcd(
        &[
            "infer",
            "--ckpt",
            ckpt.to_str().unwrap(),
            "--t1",
            t1.to_str().unwrap(),
            "--t2",
            "small.scdt",
            "--out",
            "x",
        ],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(!d.path().join("x.scdt").exists() && !d.path().join("x.png").exists());
}

#[test]
fn checkpoint_of_the_wrong_kind_is_a_data_error() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("junk.ckpt"), b"not a checkpoint").unwrap();
    scdt::write(d.path().join("a.scdt"), &Tensor::<f32>::zeros(&[3, 16, 16])).unwrap();
    let out = siamcd(
        &[
            "infer",
            "--ckpt",
            "junk.ckpt",
            "--t1",
            "a.scdt",
            "--t2",
            "a.scdt",
            "--out",
            "x",
        ],
        d.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synthetic_quickstart_is_quick() {
    let d = tempfile::tempdir().unwrap();
    fs::write(
        d.path().join("tiny.cfg"),
        "model.encoder_filters=4,8,16\ntrain.learning_rate=0.01\n",
    )
    .unwrap();
    let start = std::time::Instant::now();
    ok(&["synth", "--out", "data", "--count", "16"], d.path());
    ok(
        &[
            "train", "--data", "data", "--config", "tiny.cfg", "--steps", "300", "--out", "m.ckpt", "--quiet",
        ],
        d.path(),
    );
    let took = start.elapsed();
    assert!(took.as_secs() < 300, "quickstart took {took:?}");
}
