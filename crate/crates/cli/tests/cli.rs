use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use textrec_core::io::{GrayImage, Manifest};

const SMALL: &[&str] = &[
    "synth.samples = 8",
    "synth.max_len = 3",
    "train.warmup = 100",
    "train.steps = 400",
];

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_textrec"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn textrec")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Trained {
    dir: PathBuf,
    ckpt: PathBuf,
    manifest: PathBuf,
}

/// One small model trained through the binary and shared by every test.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli-shared");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let cfg = dir.join("small.cfg");
        std::fs::write(&cfg, SMALL.join("\n")).unwrap();
        let data = dir.join("data");
        ok(&["synth", "--config", s(&cfg), "--out", s(&data)]);
        let ckpt = dir.join("model.ckpt");
        let manifest = data.join("manifest.tsv");
        ok(&["train", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&ckpt)]);
        Trained { dir, ckpt, manifest }
    })
}

fn first_image(t: &Trained) -> (PathBuf, String) {
    let m = Manifest::read(&t.manifest).unwrap();
    let e = &m.entries[0];
    (m.resolve(e), e.label.clone())
}

#[test]
fn usage_and_input_errors_exit_2() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--out", "x"]).status.code(), Some(2));
    assert_eq!(run(&["recognize", "--ckpt", "/nonexistent", "--image", "/nonexistent"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.ckpt");
    let code = run(&["train", "--synthetic", "--out", s(&out), "--set", "model.cbi=p_q"]).status.code();
    assert_eq!(code, Some(2));
    let code = run(&["train", "--synthetic", "--out", s(&out), "--set", "model.e_dim=63"]).status.code();
    assert_eq!(code, Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--synthetic",
        "--out",
        s(&dir.path().join("m.ckpt")),
        "--steps",
        "4",
        "--set",
        "synth.samples=4",
        "--set",
        "train.lr_scale=1e30",
    ]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite loss"));
}

#[test]
fn trained_model_fits_its_data() {
    let t = trained();
    let acc = ok(&["eval", "--ckpt", s(&t.ckpt), "--data", s(&t.manifest)]);
    assert_eq!(acc.trim(), "1.0000");
    let greedy = ok(&["eval", "--ckpt", s(&t.ckpt), "--data", s(&t.manifest), "--beam", "1"]);
    assert_eq!(greedy.trim(), "1.0000");
    let log = std::fs::read_to_string(t.ckpt.with_extension("csv")).unwrap();
    assert!(log.starts_with("step,lr,loss\n"));
    assert!(log.lines().last().unwrap().ends_with(",1.0000"));
}

#[test]
fn recognize_prints_the_label() {
    let t = trained();
    let (img, label) = first_image(t);
    assert_eq!(ok(&["recognize", "--ckpt", s(&t.ckpt), "--image", s(&img)]).trim(), label);
    assert_eq!(ok(&["recognize", "--ckpt", s(&t.ckpt), "--image", s(&img), "--beam", "1"]).trim(), label);
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let go = |name: &str| {
        let p = dir.path().join(name);
        ok(&["train", "--synthetic", "--out", s(&p), "--steps", "5", "--seed", "4", "--set", "synth.samples=6"]);
        std::fs::read(p).unwrap()
    };
    assert_eq!(go("a.ckpt"), go("b.ckpt"));
}

fn read_csv(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn export_attention_layout() {
    let t = trained();
    let (img, _) = first_image(t);
    let out = t.dir.join("attn");
    let text = ok(&["export-attention", "--ckpt", s(&t.ckpt), "--image", s(&img), "--out", s(&out)]);
    let steps = text.trim().chars().count() + 1;
    for k in 1..=steps {
        let heat = GrayImage::read(&out.join(format!("step_{k:02}.pgm"))).unwrap();
        assert_eq!((heat.width, heat.height), (8, 2));
    }
    assert!(!out.join(format!("step_{:02}.pgm", steps + 1)).exists());
    let visual = read_csv(&out.join("visual.csv"));
    assert_eq!(visual.len(), steps);
    for row in &visual {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
    }
    let aff = read_csv(&out.join("affinity.csv"));
    assert_eq!(aff.len(), steps);
    for (i, row) in aff.iter().enumerate() {
        assert_eq!(row.len(), steps);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-4);
        assert!(row[i + 1..].iter().all(|&v| v < 1e-6));
    }
}

#[test]
fn augment_is_deterministic_and_sweep_covers_ladder() {
    let t = trained();
    let a = t.dir.join("aug_a");
    let b = t.dir.join("aug_b");
    for out in [&a, &b] {
        ok(&["augment", "--in", s(&t.manifest), "--out", s(out), "--mode", "ca", "--intensity", "3", "--seed", "5"]);
    }
    let ma = std::fs::read_to_string(a.join("manifest.tsv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("manifest.tsv")).unwrap());
    let m = Manifest::read(&a.join("manifest.tsv")).unwrap();
    for e in &m.entries {
        assert_eq!(std::fs::read(a.join(&e.rel)).unwrap(), std::fs::read(b.join(&e.rel)).unwrap());
    }
    let bad = run(&["augment", "--in", s(&t.manifest), "--out", s(&a), "--mode", "xx", "--intensity", "3"]);
    assert_eq!(bad.status.code(), Some(2));
    let bad = run(&["augment", "--in", s(&t.manifest), "--out", s(&a), "--mode", "ha", "--intensity", "7"]);
    assert_eq!(bad.status.code(), Some(2));

    let ladder = t.dir.join("ladder");
    ok(&["augment", "--in", s(&t.manifest), "--out", s(&ladder), "--ladder"]);
    let table = ok(&["sweep", "--ckpt", s(&t.ckpt), "--raw", s(&t.manifest), "--ladder", s(&ladder), "--beam", "1"]);
    let lines: Vec<&str> = table.lines().collect();
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header.len(), 13);
    assert_eq!(header[0], "raw");
    assert_eq!(header[1], "ha1");
    assert_eq!(header[12], "ca6");
    let values: Vec<f64> = lines[1].split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(values[0], 1.0);
    assert!(values.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn ablate_with_custom_grid() {
    let dir = tempfile::tempdir().unwrap();
    let grid = dir.path().join("grid.txt");
    ok(&["ablate", "--write-grid", "--out", s(&grid)]);
    assert_eq!(std::fs::read_to_string(&grid).unwrap().lines().count(), 1 + 18);
    let small = dir.path().join("grid_small.txt");
    std::fs::write(&small, "t a model.fusion=add\nt b model.mdcdp_layers=1\n").unwrap();
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "synth.samples = 4\n").unwrap();
    let csv = dir.path().join("out.csv");
    ok(&["ablate", "--grid", s(&small), "--config", s(&cfg), "--steps", "3", "--out", s(&csv)]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with('#') && lines[0].contains("not comparable"));
    assert_eq!(lines.len(), 4);
    assert!(lines[2].starts_with("t,a,") && lines[3].starts_with("t,b,"));
    std::fs::write(&small, "t a model.wings=2\n").unwrap();
    let code = run(&["ablate", "--grid", s(&small), "--out", s(&csv)]).status.code();
    assert_eq!(code, Some(2));
}
