//! End-to-end runs of the `wrnet` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wrnet::dataio::{load_flow, load_frame, FrameFormat};
use wrnet::warp::extrapolate;
use wrnet::Tvl1Params;

fn wrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wrnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes a synthetic sequence and returns its directory.
fn synth(dir: &Path, velocity: (f32, f32), frames: usize, drift: f32) -> PathBuf {
    let spec = dir.join("spec.json");
    fs::write(
        &spec,
        format!(
            r#"{{"width": 48, "height": 40, "velocity": [{}, {}], "brightness_drift": {drift}, "seed": 4}}"#,
            velocity.0, velocity.1
        ),
    )
    .unwrap();
    let out = dir.join("seq");
    let o = wrnet(&[
        "synth",
        s(&spec),
        s(&out),
        "--frames",
        &frames.to_string(),
        "--format",
        "rawf32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

fn frame(dir: &Path, k: usize) -> PathBuf {
    dir.join(format!("frame_{k:03}.f32"))
}

fn raw(p: &Path) -> Vec<u32> {
    load_frame(p, FrameFormat::Rawf32)
        .unwrap()
        .data()
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

#[test]
fn flow_of_a_shifted_pair_matches_the_shift() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (2.0, -1.0), 3, 0.0);
    let out = dir.path().join("f.flo");
    let o = wrnet(&["flow", s(&frame(&seq, 0)), s(&frame(&seq, 1)), s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let f = load_flow(&out).unwrap();
    let n = f.u().len() as f32;
    let (mu, mv) = (f.u().iter().sum::<f32>() / n, f.v().iter().sum::<f32>() / n);
    assert!(
        (mu - 2.0).abs() < 0.1 && (mv + 1.0).abs() < 0.1,
        "mean flow ({mu}, {mv})"
    );

    let o = wrnet(&["flow", s(&frame(&seq, 0)), s(&frame(&seq, 0)), s(&out)]);
    assert_eq!(code(&o), 0);
    let f = load_flow(&out).unwrap();
    assert!(f.mean_magnitude() < 1e-3, "{}", f.mean_magnitude());
}

#[test]
fn missing_input_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("f.flo");
    let o = wrnet(&["flow", "/no/such/a.pgm", "/no/such/b.pgm", s(&out)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!out.exists());
    assert!(
        fs::read_dir(dir.path()).unwrap().next().is_none(),
        "no temporaries left"
    );
}

#[test]
fn interp_writes_one_frame_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (1.5, 0.5), 3, 0.0);
    let pattern = dir.path().join("mid_{i}.f32");
    let (a, b) = (frame(&seq, 0), frame(&seq, 2));
    let o = wrnet(&[
        "interp",
        s(&a),
        s(&b),
        s(&pattern),
        "--alpha",
        "0",
        "--alpha",
        "0.5",
        "--format",
        "rawf32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (out0, out1) = (dir.path().join("mid_1.f32"), dir.path().join("mid_2.f32"));
    assert_eq!(raw(&out0), raw(&a), "alpha 0 reproduces the first input");
    assert!(out1.exists());
    assert!(!dir.path().join("mid_3.f32").exists());

    // Several outputs need a placeholder.
    let o = wrnet(&[
        "interp",
        s(&a),
        s(&b),
        s(&dir.path().join("x.f32")),
        "--alpha",
        "0.2",
        "--alpha",
        "0.4",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = wrnet(&["interp", s(&a), s(&b), s(&pattern), "--alpha", "1.5"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
}

#[test]
fn extrapolate_rollout_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (1.0, 0.0), 3, 0.0);
    let (a, b) = (frame(&seq, 0), frame(&seq, 1));
    let pattern = dir.path().join("next_{i}.f32");
    let o = wrnet(&[
        "extrapolate",
        s(&a),
        s(&b),
        s(&pattern),
        "--steps",
        "3",
        "--format",
        "rawf32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for i in 1..=3 {
        let f = load_frame(
            &dir.path().join(format!("next_{i}.f32")),
            FrameFormat::Rawf32,
        )
        .unwrap();
        assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    let single = dir.path().join("one.f32");
    let o = wrnet(&[
        "extrapolate",
        s(&a),
        s(&b),
        s(&single),
        "--format",
        "rawf32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let fa = load_frame(&a, FrameFormat::Rawf32).unwrap();
    let fb = load_frame(&b, FrameFormat::Rawf32).unwrap();
    let direct = extrapolate(&fa, &fb, 1.0, &Tvl1Params::default()).unwrap();
    let direct: Vec<u32> = direct.data().iter().map(|v| v.to_bits()).collect();
    assert_eq!(raw(&single), direct);
}

const TRAIN_FLAGS: &[&str] = &[
    "--steps",
    "4",
    "--batch-size",
    "2",
    "--crop",
    "16x16",
    "--embed-channels",
    "4",
    "--enc-levels",
    "2",
    "--base-channels",
    "4",
    "--attention-downsample",
    "2",
    "--seed",
    "5",
    "--lr",
    "0.001",
];

#[test]
fn train_is_deterministic_and_eval_gates_methods() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (2.0, 1.0), 5, 0.02);
    let manifest = seq.join("manifest.json");

    let mut histories = Vec::new();
    for name in ["a.json", "b.json"] {
        let ckpt = dir.path().join(name);
        let mut args = vec!["train", s(&manifest), s(&ckpt)];
        args.extend_from_slice(TRAIN_FLAGS);
        let o = wrnet(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(ckpt.with_extension("bin").exists());
        let h: serde_json::Value =
            serde_json::from_slice(&fs::read(ckpt.with_extension("loss.json")).unwrap()).unwrap();
        assert_eq!(h["loss"].as_array().unwrap().len(), 4);
        histories.push(h);
    }
    assert_eq!(histories[0], histories[1]);

    let report = dir.path().join("report.json");
    let o = wrnet(&["eval", s(&manifest), s(&report)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    let methods: Vec<&str> = r["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|row| row["method"].as_str().unwrap())
        .collect();
    assert_eq!(methods.len(), 2, "{methods:?}");
    assert!(report.with_extension("txt").exists());

    let ckpt = dir.path().join("a.json");
    let o = wrnet(&["eval", s(&manifest), s(&report), "--checkpoint", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_slice(&fs::read(&report).unwrap()).unwrap();
    assert_eq!(r["rows"].as_array().unwrap().len(), 3);
    // The architecture came from the checkpoint and is echoed in the header.
    assert!(stderr(&o).contains("embed-channels = 4"), "{}", stderr(&o));

    let o = wrnet(&[
        "eval",
        s(&manifest),
        s(&report),
        "--checkpoint",
        s(&ckpt),
        "--embed-channels",
        "8",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn diverging_training_exits_with_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (2.0, 1.0), 4, 0.02);
    let ckpt = dir.path().join("m.json");
    let manifest = seq.join("manifest.json");
    let mut args = vec![
        "train",
        s(&manifest),
        s(&ckpt),
        "--lr",
        "1e300",
        "--steps",
        "20",
    ];
    args.extend_from_slice(&TRAIN_FLAGS[4..12]);
    let o = wrnet(&args);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(!ckpt.exists());
}

#[test]
fn header_replays_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth(dir.path(), (1.0, 1.0), 3, 0.0);
    let (a, b) = (frame(&seq, 0), frame(&seq, 2));
    let first = dir.path().join("first.f32");
    let o = wrnet(&[
        "interp",
        s(&a),
        s(&b),
        s(&first),
        "--lambda",
        "0.2",
        "--alpha",
        "0.3",
        "--format",
        "rawf32",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let header: String = stderr(&o)
        .lines()
        .filter(|l| l.starts_with('#') || l.contains(" = "))
        .map(|l| format!("{l}\n"))
        .collect();
    assert!(
        header.contains("lambda = 0.2") && header.contains("alpha = 0.3"),
        "{header}"
    );

    let cfg = dir.path().join("replay.cfg");
    fs::write(&cfg, &header).unwrap();
    let second = dir.path().join("second.f32");
    let o = wrnet(&["interp", s(&a), s(&b), s(&second), "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(raw(&first), raw(&second));
}

#[test]
fn usage_and_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = wrnet(&["flow", "a", "b", "c", "--no-such-flag"]);
    assert_eq!(code(&o), 1);
    let o = wrnet(&["flow", "a", "b", "c", "--tau", "abc"]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    let o = wrnet(&[]);
    assert_eq!(code(&o), 1);

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "seed = 1\nwarp-speed = 9\n").unwrap();
    let o = wrnet(&["flow", "a", "b", "c", "--config", s(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("warp-speed"), "{}", stderr(&o));
}

#[test]
fn help_lists_every_flag() {
    let o = wrnet(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for key in [
        "config",
        "seed",
        "tau",
        "lambda",
        "theta",
        "alpha",
        "steps",
        "checkpoint",
        "crop",
        "format",
        "batch-size",
        "lr",
        "mode",
        "frames",
        "embed-channels",
        "enc-levels",
        "base-channels",
        "attention-downsample",
        "residual-output",
        "attention-roles",
        "warps-per-level",
        "iters-per-warp",
        "stop-epsilon",
        "pyramid-factor",
        "pyramid-min-dim",
        "median-filter",
        "intensity-scale",
    ] {
        assert!(
            text.contains(&format!("--{key}")),
            "--{key} missing from help"
        );
    }
    for sub in ["flow", "interp", "extrapolate", "train", "eval", "synth"] {
        assert!(text.contains(sub), "{sub} missing from help");
    }
}
