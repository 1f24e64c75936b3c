mod common;

use std::path::Path;
use std::process::Command;

use tpde::checkpoint::Checkpoint;
use tpde::editing;
use tpde::imageio;
use tpde::renderer::Camera;

fn tpde(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_tpde"))
        .args(args)
        .env("TPDE_THREADS", "1")
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tpde(&[]).status.code(), Some(1));
    assert_eq!(tpde(&["render", "--yaw", "0"]).status.code(), Some(1));
    assert_eq!(tpde(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tpde(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.tpde");
    let out = dir.path().join("r");
    let o = tpde(&["render", "--checkpoint", s(&missing), "--latent", "scene_0", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));

    let ck = dir.path().join("tiny.tpde");
    common::tiny_checkpoint().save(&ck).unwrap();
    let o = tpde(&["render", "--checkpoint", s(&ck), "--latent", "nobody", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = tpde(&["gradcheck", "--trials", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn render_swap_and_turntable_write_files() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.tpde");
    common::tiny_checkpoint().save(&ck).unwrap();
    let prefix = dir.path().join("out/view");
    let o = tpde(&[
        "render", "--checkpoint", s(&ck), "--latent", "scene_1", "--yaw", "-0.2", "--width", "24", "--height", "16",
        "--out", s(&prefix),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let (w, h, _) = imageio::read_rgb_png(&dir.path().join("out/view_rgb.png")).unwrap();
    assert_eq!((w, h), (24, 16));
    assert_eq!(imageio::read_depth_bin(&dir.path().join("out/view_depth.bin"), 24 * 16).unwrap().len(), 384);

    let swap = dir.path().join("swap");
    let o = tpde(&["swap", "--checkpoint", s(&ck), "--geo", "scene_0", "--app", "scene_1", "--width", "16", "--height", "16", "--out", s(&swap)]);
    assert_eq!(o.status.code(), Some(0));
    let own = dir.path().join("own");
    tpde(&["render", "--checkpoint", s(&ck), "--latent", "scene_0", "--width", "16", "--height", "16", "--out", s(&own)]);
    let d_swap = imageio::read_depth_bin(&dir.path().join("swap_depth.bin"), 256).unwrap();
    let d_own = imageio::read_depth_bin(&dir.path().join("own_depth.bin"), 256).unwrap();
    assert_eq!(d_swap, d_own, "swapping appearance keeps depth");

    let frames = dir.path().join("frames");
    let o = tpde(&["turntable", "--checkpoint", s(&ck), "--latent", "scene_0", "--frames", "3", "--size", "16", "--out", s(&frames)]);
    assert_eq!(o.status.code(), Some(0));
    for i in 0..3 {
        assert!(frames.join(format!("frame_{i:03}.png")).exists());
    }
}

#[test]
fn render_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("tiny.tpde");
    common::tiny_checkpoint().save(&ck).unwrap();
    let read = |name: &str| {
        let prefix = dir.path().join(name);
        tpde(&["render", "--checkpoint", s(&ck), "--latent", "scene_0", "--width", "16", "--height", "16", "--out", s(&prefix)]);
        ["_rgb.png", "_mask.png", "_depth.bin"]
            .map(|suf| std::fs::read(dir.path().join(format!("{name}{suf}"))).unwrap())
    };
    assert_eq!(read("a"), read("b"));
}

#[test]
fn scene_gen_then_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = tpde(&["scene-gen", "--out", s(&data), "--count", "3", "--views", "2", "--resolution", "16", "--samples", "8"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, serde_json::to_string(&common::tiny_config()).unwrap()).unwrap();
    let ck = dir.path().join("fit.tpde");
    let o = tpde(&["fit", "--data", s(&data), "--config", s(&cfg), "--iterations", "3", "--out", s(&ck), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let loaded = Checkpoint::load(&ck).unwrap();
    assert_eq!(loaded.latents.len(), 3);
    let rows = tpde::training::read_loss_csv(&dir.path().join("fit.tpde.losses.csv")).unwrap();
    assert_eq!(rows.len(), 3);
}

/// Painting nothing new leaves the rendering where it was. The latent itself
/// may still drift: soft class probabilities keep a small cross-entropy
/// gradient that Adam follows along directions the render barely sees.
#[test]
fn edit_with_the_current_mask_is_a_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    tpde(&["scene-gen", "--out", s(&data), "--count", "3", "--views", "4", "--resolution", "16", "--samples", "16"]);
    let cfg = dir.path().join("cfg.json");
    let train = tpde::training::TrainConfig {
        iterations: 200,
        samples_per_ray: 16,
        pixel_stride: 1,
        ..common::tiny_config()
    };
    std::fs::write(&cfg, serde_json::to_string(&train).unwrap()).unwrap();
    let ck_path = dir.path().join("fit.tpde");
    let o = tpde(&["fit", "--data", s(&data), "--config", s(&cfg), "--out", s(&ck_path), "--quiet"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let ck = Checkpoint::load(&ck_path).unwrap();
    let cam = Camera::new(0.0, 0.0, 3.0, 16, 16);
    let before = editing::render_latent(&ck, "scene_0", &cam).unwrap();
    let mask_path = dir.path().join("mask.png");
    imageio::write_mask_png(&mask_path, 16, 16, &before.argmax_mask()).unwrap();
    let out = dir.path().join("edited.tpde");
    let trace = dir.path().join("trace.csv");
    let o = tpde(&[
        "edit", "--checkpoint", s(&ck_path), "--latent", "scene_0", "--mask", s(&mask_path), "--out", s(&out), "--name", "same",
        "--trace", s(&trace),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));

    let edited = Checkpoint::load(&out).unwrap();
    assert_eq!(edited.model.named_tensors().len(), ck.model.named_tensors().len());
    let after = editing::render_latent(&edited, "same", &cam).unwrap();
    let flipped = before.argmax_mask().iter().zip(after.argmax_mask()).filter(|(a, b)| **a != *b).count();
    assert!(flipped <= 3, "{flipped} mask pixels changed");
    let rgb_change = before.rgb.iter().zip(&after.rgb).map(|(a, b)| (a - b).abs()).sum::<f32>() / before.rgb.len() as f32;
    assert!(rgb_change < 0.02, "mean rgb change {rgb_change}");
    let text = std::fs::read_to_string(&trace).unwrap();
    let losses: Vec<f64> = text.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), tpde::editing::DEFAULT_EDIT_STEPS);
    assert!(losses.last().unwrap() <= losses.first().unwrap());
}

#[test]
fn in_process_run_reports_codes() {
    assert_eq!(tpde_cli::run(["tpde", "gradcheck", "--trials", "1", "--json"]), 0);
    assert_eq!(tpde_cli::run(["tpde", "fit"]), 1);
}
