use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = "\
generate.n_scenes = 2
generate.seed = 7
scene.depth_noise_sigma = 0.002
camera.fx = 260
camera.fy = 260
camera.cx = 159.5
camera.cy = 119.5
camera.width = 320
camera.height = 240
";

fn boxfit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boxfit"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn without_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| {
            let mut f: Vec<&str> = l.split(',').collect();
            f.remove(6);
            f.join(",") + "\n"
        })
        .collect()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("c.txt"), CONFIG).unwrap();
    let o = boxfit(
        dir.path(),
        &["--config", "c.txt", "generate", "--out", "ds"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

#[test]
fn generate_estimate_eval_roundtrip() {
    let dir = setup();
    let d = dir.path();
    let manifest = fs::read_to_string(d.join("ds/manifest.txt")).unwrap();
    assert_eq!(manifest, "scene_0000 7\nscene_0001 8\n");

    let again = boxfit(d, &["--config", "c.txt", "generate", "--out", "ds2"]);
    assert_eq!(code(&again), 0);
    for f in ["depth.png", "mask.png", "gt.txt", "camera.txt"] {
        let a = fs::read(d.join("ds/scene_0001").join(f)).unwrap();
        let b = fs::read(d.join("ds2/scene_0001").join(f)).unwrap();
        assert_eq!(a, b, "{f}");
    }

    let o = boxfit(
        d,
        &[
            "--config",
            "c.txt",
            "estimate",
            "ds",
            "--out",
            "r1",
            "--render-overlays",
            "--predictions",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = boxfit(
        d,
        &[
            "--config", "c.txt", "--jobs", "2", "estimate", "ds", "--out", "r2",
        ],
    );
    assert_eq!(code(&o), 0);
    let r1 = fs::read_to_string(d.join("r1/results.csv")).unwrap();
    let r2 = fs::read_to_string(d.join("r2/results.csv")).unwrap();
    assert_eq!(r1.lines().count(), 3);
    assert_eq!(without_timing(&r1), without_timing(&r2));
    assert_eq!(
        fs::read(d.join("r1/trace.csv")).unwrap(),
        fs::read(d.join("r2/trace.csv")).unwrap()
    );
    assert!(d.join("r1/scene_0000/overlay.png").is_file());
    let pred = fs::read_to_string(d.join("r1/scene_0000/pred.txt")).unwrap();
    assert_eq!(pred.split_whitespace().count(), 16);

    let o = boxfit(d, &["eval", "r1/results.csv"]);
    assert_eq!(code(&o), 0);
    let table = String::from_utf8(o.stdout).unwrap();
    assert!(table.starts_with("metric,precision\ninstances,2\n"));
    assert!(table.contains("iou@0.50,"));
}

#[test]
fn provided_masks_skip_segmentation() {
    let dir = setup();
    let d = dir.path();
    let o = boxfit(
        d,
        &[
            "--config",
            "c.txt",
            "estimate",
            "ds/scene_0000",
            "--out",
            "r",
            "--mask-in",
            "ds/scene_0000/mask.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let trace = fs::read_to_string(d.join("r/trace.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().skip(1).collect();
    assert!(!rows.is_empty());
    assert!(rows.iter().all(|l| l.ends_with(",provided")));

    let o = boxfit(
        d,
        &[
            "--config",
            "c.txt",
            "estimate",
            "ds/scene_0000",
            "--out",
            "s",
        ],
    );
    assert_eq!(code(&o), 0);
    let trace = fs::read_to_string(d.join("s/trace.csv")).unwrap();
    assert!(trace.lines().skip(1).all(|l| l.ends_with(",segmenter")));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.txt"), "scene.dims_range = 0.5,0.1\n").unwrap();
    let o = boxfit(d, &["--config", "bad.txt", "generate", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("scene.dims_range"));
    assert_eq!(
        code(&boxfit(d, &["--set", "nope=1", "generate", "--out", "x"])),
        2
    );

    assert_eq!(code(&boxfit(d, &["estimate", "missing", "--out", "r"])), 3);

    fs::create_dir(d.join("empty")).unwrap();
    assert_eq!(code(&boxfit(d, &["estimate", "empty", "--out", "r"])), 0);
    assert_eq!(code(&boxfit(d, &["eval", "r/results.csv"])), 4);
    assert_eq!(
        code(&boxfit(d, &["ablate", "empty", "--which", "early-stop"])),
        4
    );

    fs::write(d.join("bad.csv"), "header\nnot,a,row\n").unwrap();
    assert_eq!(code(&boxfit(d, &["eval", "bad.csv"])), 3);

    assert_eq!(
        code(&boxfit(d, &["ablate", "empty", "--which", "bogus"])),
        2
    );
}
