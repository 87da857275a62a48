//! End-to-end checks of the `posedist` subcommands on a small benchmark.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use posedist::splat::{save_ply, GaussianScene};
use posedist_cli::{run_from_args, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL};
use tempfile::TempDir;

const CAMERAS: usize = 40;

struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    ckpt: PathBuf,
}

impl Fixture {
    fn data(&self) -> &Path {
        &self.data
    }

    fn ckpt(&self) -> &Path {
        &self.ckpt
    }
}

fn toy_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs/toy.toml")
        .display()
        .to_string()
}

fn run(args: &[&str]) -> i32 {
    let cfg = toy_config();
    let mut argv = vec!["posedist", "--config", cfg.as_str()];
    argv.extend_from_slice(args);
    run_from_args(argv)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let (bench, data, train) = (root.join("bench"), root.join("data"), root.join("train"));
        let cams = CAMERAS.to_string();
        assert_eq!(
            run(&["make-benchmark", "--cameras", &cams, "--out", p(&bench)]),
            0
        );
        let manifest = bench.join("manifest.toml");
        assert_eq!(
            run(&["ingest", "--manifest", p(&manifest), "--out", p(&data)]),
            0
        );
        let train_args = [
            "--set",
            "train.total_steps=40",
            "--set",
            "train.hidden_dim=32",
            "--set",
            "train.warmup_steps=5",
            "train",
            "--dataset",
            p(&data),
            "--out",
            p(&train),
        ];
        assert_eq!(run(&train_args), 0);
        Fixture {
            ckpt: train.join("model.ckpt"),
            data,
            _dir: dir,
        }
    })
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn ids(path: &Path) -> Vec<String> {
    read(path)
        .lines()
        .map(str::to_string)
        .filter(|l| !l.is_empty())
        .collect()
}

fn pose_rows(path: &Path) -> Vec<(String, Vec<f64>)> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|rec| {
            let rec = rec.unwrap();
            (
                rec[0].to_string(),
                (1..8).map(|i| rec[i].parse().unwrap()).collect(),
            )
        })
        .collect()
}

#[test]
fn ingest_splits_partition_the_records() {
    let f = fixture();
    let train = ids(&f.data().join("train.txt"));
    let val = ids(&f.data().join("val.txt"));
    assert_eq!(val.len(), 4);
    assert_eq!(train.len() + val.len(), CAMERAS);
    let all: BTreeSet<_> = train.iter().chain(&val).collect();
    assert_eq!(all.len(), CAMERAS);
    let filter = read(&f.data().join("filter.csv"));
    assert!(filter.lines().count() > CAMERAS);
}

#[test]
fn sample_writes_unit_quaternions_and_repeats() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let code = run(&[
            "sample",
            "--checkpoint",
            p(f.ckpt()),
            "--dataset",
            p(f.data()),
            "--split",
            "val",
            "-m",
            "100",
            "--out",
            p(out),
        ]);
        assert_eq!(code, 0);
    }
    let rows = pose_rows(&a.join("samples.csv"));
    assert_eq!(rows.len(), 4 * 100);
    for (_, pose) in &rows {
        let n: f64 = pose[..4].iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9, "quaternion norm {n}");
    }
    assert_eq!(read(&a.join("samples.csv")), read(&b.join("samples.csv")));
}

#[test]
fn effective_config_reproduces_a_run() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let code = run(&[
        "--seed",
        "11",
        "sample",
        "--checkpoint",
        p(f.ckpt()),
        "--dataset",
        p(f.data()),
        "--split",
        "val",
        "-m",
        "5",
        "--out",
        p(&a),
    ]);
    assert_eq!(code, 0);
    let b = dir.path().join("b");
    let eff = a.join("effective.toml");
    let code = run_from_args([
        "posedist",
        "--config",
        p(&eff),
        "sample",
        "--checkpoint",
        p(f.ckpt()),
        "--dataset",
        p(f.data()),
        "--split",
        "val",
        "-m",
        "5",
        "--out",
        p(&b),
    ]);
    assert_eq!(code, 0);
    assert_eq!(read(&a.join("samples.csv")), read(&b.join("samples.csv")));
}

#[test]
fn eval_of_ground_truth_scores_every_sample() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let val: BTreeSet<_> = ids(&f.data().join("val.txt")).into_iter().collect();
    let gt = dir.path().join("gt.csv");
    let mut w = csv::Writer::from_path(&gt).unwrap();
    let mut r = csv::Reader::from_path(f.data().join("poses.csv")).unwrap();
    w.write_record(r.headers().unwrap()).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        if val.contains(&rec[0]) {
            w.write_record(&rec).unwrap();
        }
    }
    w.flush().unwrap();
    let out = dir.path().join("ev");
    let samples = format!("gt={}", p(&gt));
    assert_eq!(
        run(&[
            "eval",
            "--dataset",
            p(f.data()),
            "--samples",
            &samples,
            "--out",
            p(&out)
        ]),
        0
    );
    let mut r = csv::Reader::from_path(out.join("report.csv")).unwrap();
    let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
    let ks: Vec<f64> = rows.iter().map(|r| r[1].parse().unwrap()).collect();
    assert_eq!(ks, vec![5.0, 10.0, 15.0]);
    for row in &rows {
        assert_eq!(&row[0], "gt");
        assert_eq!(row[3].parse::<f64>().unwrap(), 1.0);
    }
}

fn sample_val(f: &Fixture, out: &Path) {
    let code = run(&[
        "sample",
        "--checkpoint",
        p(f.ckpt()),
        "--dataset",
        p(f.data()),
        "--split",
        "val",
        "-m",
        "10",
        "--out",
        p(out),
    ]);
    assert_eq!(code, 0);
}

#[test]
fn refine_with_empty_subset_is_identity() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let s = dir.path().join("s");
    sample_val(f, &s);
    let out = dir.path().join("r");
    let samples = s.join("samples.csv");
    let code = run(&[
        "--set",
        "refine.subset_fraction=0.0",
        "refine",
        "--dataset",
        p(f.data()),
        "--samples",
        p(&samples),
        "--granularity",
        "long",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(pose_rows(&out.join("samples.csv")), pose_rows(&samples));
    assert_eq!(read(&out.join("outcomes.jsonl")), "");
}

#[test]
fn refine_unreachable_gate_passes_poses_through_untouched() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let s = dir.path().join("s");
    sample_val(f, &s);
    let samples = s.join("samples.csv");
    let gate = [
        "--set",
        "refine.tau1=1.5",
        "--set",
        "refine.tau2=1.5",
        "--set",
        "refine.subset_fraction=1.0",
    ];

    let kept = dir.path().join("kept");
    let mut args = gate.to_vec();
    args.extend([
        "--set",
        "refine.keep_rejected=true",
        "refine",
        "--dataset",
        p(f.data()),
    ]);
    args.extend([
        "--samples",
        p(&samples),
        "--granularity",
        "long",
        "--out",
        p(&kept),
    ]);
    assert_eq!(run(&args), 0);
    assert_eq!(pose_rows(&kept.join("samples.csv")), pose_rows(&samples));
    let log = read(&kept.join("outcomes.jsonl"));
    assert_eq!(log.lines().count(), 40);
    assert!(log
        .lines()
        .all(|l| l.contains("\"accepted\":false") && l.contains("\"iters\":0")));

    let dropped = dir.path().join("dropped");
    let mut args = gate.to_vec();
    args.extend(["refine", "--dataset", p(f.data()), "--samples", p(&samples)]);
    args.extend(["--granularity", "long", "--out", p(&dropped)]);
    assert_eq!(run(&args), 0);
    assert!(pose_rows(&dropped.join("samples.csv")).is_empty());
}

#[test]
fn render_of_an_empty_scene_is_background() {
    let dir = TempDir::new().unwrap();
    let scene = dir.path().join("empty.ply");
    save_ply(&scene, &GaussianScene::default()).unwrap();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    for out in [&a, &b] {
        let code = run(&[
            "render",
            "--scene",
            p(&scene),
            "--pose",
            "1,0,0,0,0,0,-5",
            "--out",
            p(out),
        ]);
        assert_eq!(code, 0);
    }
    let bytes = std::fs::read(&a).unwrap();
    let header = b"P6\n224 224\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert_eq!(bytes.len(), header.len() + 224 * 224 * 3);
    assert!(bytes[header.len()..].iter().all(|&v| v == 0));
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn render_picks_a_pose_by_id() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("view.png");
    let (scene, poses) = (f.data().join("scene.ply"), f.data().join("poses.csv"));
    let id = pose_rows(&poses)[0].0.clone();
    let code = run(&[
        "render",
        "--scene",
        p(&scene),
        "--poses",
        p(&poses),
        "--id",
        &id,
        "--width",
        "32",
        "--height",
        "24",
        "--out",
        p(&out),
    ]);
    assert_eq!(code, 0);
    assert_eq!(&std::fs::read(&out).unwrap()[1..4], b"PNG");
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let f = fixture();
    let dir = TempDir::new().unwrap();
    let out = |name: &str| dir.path().join(name).display().to_string();
    let (ckpt, data) = (p(f.ckpt()).to_string(), p(f.data()).to_string());

    let mut codes = BTreeMap::new();
    codes.insert(
        "unknown caption id",
        run(&[
            "sample",
            "--checkpoint",
            &ckpt,
            "--dataset",
            &data,
            "--caption",
            "nope",
            "--out",
            &out("c"),
        ]),
    );
    codes.insert(
        "missing checkpoint",
        run(&[
            "sample",
            "--checkpoint",
            &out("none.ckpt"),
            "--dataset",
            &data,
            "--split",
            "val",
            "--out",
            &out("m"),
        ]),
    );
    codes.insert(
        "unknown config key",
        run(&[
            "--set",
            "train.nope=1",
            "sample",
            "--checkpoint",
            &ckpt,
            "--split",
            "val",
            "--out",
            &out("k"),
        ]),
    );
    codes.insert("unknown flag", run(&["sample", "--bogus"]));
    codes.insert(
        "bad granularity",
        run(&[
            "sample",
            "--checkpoint",
            &ckpt,
            "--dataset",
            &data,
            "--split",
            "val",
            "--granularity",
            "huge",
            "--out",
            &out("g"),
        ]),
    );
    codes.insert(
        "diverging training",
        run(&[
            "--set",
            "train.learning_rate=1e300",
            "--set",
            "train.total_steps=20",
            "--set",
            "train.warmup_steps=1",
            "train",
            "--dataset",
            &data,
            "--out",
            &out("t"),
        ]),
    );
    codes.insert("help", run_from_args(["posedist", "--help"]));

    let expected = BTreeMap::from([
        ("unknown caption id", EXIT_DATA),
        ("missing checkpoint", EXIT_DATA),
        ("unknown config key", EXIT_CONFIG),
        ("unknown flag", EXIT_CONFIG),
        ("bad granularity", EXIT_CONFIG),
        ("diverging training", EXIT_NUMERICAL),
        ("help", 0),
    ]);
    assert_eq!(codes, expected);
}
