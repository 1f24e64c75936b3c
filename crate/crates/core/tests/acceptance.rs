//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Runs without the libtest harness so the lines always print.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tpde::autodiff::{sample_weights, Tensor};
use tpde::checkpoint::Checkpoint;
use tpde::editing::{self, EditRequest};
use tpde::gradcheck;
use tpde::losses::{self, HistogramMode, LossWeights};
use tpde::netmodels::{Model, ModelConfig};
use tpde::renderer::{render_image, Camera, RenderOutput, RenderSettings};
use tpde::scenes::{self, Dataset, DatasetOptions, SceneRanges, HAIR};
use tpde::training::{self, LossRow, TrainConfig, Trainer};
use tpde::triplane::{self, TriPlane};

struct Outcome {
    name: &'static str,
    passed: bool,
    detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> tpde::Result<(bool, String)>) -> Outcome {
    let t = Instant::now();
    let (passed, detail) = match f() {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    let o = Outcome {
        name,
        passed,
        detail: format!("{detail} [{:.1}s]", t.elapsed().as_secs_f64()),
    };
    println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
    o
}

fn l1(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.len() as f64
}

fn color_dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

struct Fit {
    ckpt: Checkpoint,
    init: Checkpoint,
    rows: Vec<LossRow>,
    elapsed: Duration,
}

fn run_fit(ds: &Dataset, cfg: &TrainConfig) -> tpde::Result<Fit> {
    let init = Trainer::new(cfg.clone(), ds.scene_count())?.into_checkpoint();
    let t = Instant::now();
    let (ckpt, rows) = training::fit(ds, cfg)?;
    Ok(Fit {
        ckpt,
        init,
        rows,
        elapsed: t.elapsed(),
    })
}

fn no_fit(e: &str) -> tpde::Error {
    tpde::Error::InvalidArgument(format!("smoke fit unavailable: {e}"))
}

fn front() -> Camera {
    Camera::new(0.0, 0.0, 3.0, 64, 64)
}

/// Mean per-class color distance reduction over ordered scene pairs,
/// whether every swap kept depth bit-identical, and the mean hair color
/// distance after the swap.
fn transfer(ck: &Checkpoint, scenes: usize) -> tpde::Result<(f64, bool, f64)> {
    let cam = front();
    let (mut reductions, mut depth_ok, mut hair) = (Vec::new(), true, Vec::new());
    for g in 0..scenes {
        for a in 0..scenes {
            if g == a {
                continue;
            }
            let (gi, ai) = (format!("scene_{g}"), format!("scene_{a}"));
            let own = editing::render_latent(ck, &gi, &cam)?;
            let reference = editing::render_latent(ck, &ai, &cam)?;
            let swapped = editing::apply_appearance(ck, &gi, &ai, &cam)?;
            depth_ok &= own.depth == swapped.depth;
            let mask = own.argmax_mask();
            let target = editing::class_mean_colors(&reference, &reference.argmax_mask());
            let before = editing::class_mean_colors(&own, &mask);
            let after = editing::class_mean_colors(&swapped, &mask);
            if let (Some(pre), Some(post)) = (
                editing::class_color_distance(&before, &target),
                editing::class_color_distance(&after, &target),
            ) {
                if pre > 0.0 {
                    reductions.push(1.0 - post / pre);
                }
            }
            let h = HAIR as usize;
            if let (Some(s), Some(r)) = (after[h], target[h]) {
                hair.push(color_dist(s, r));
            }
        }
    }
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok((mean(&reductions), depth_ok, mean(&hair)))
}

fn main() {
    let mut results = Vec::new();

    results.push(check("gradient suite (every op, rel err < 1e-3, >= 100 trials, < 2 min)", || {
        let r = gradcheck::run_suite(gradcheck::SUITE_TRIALS, 0)?;
        let ok = r.passed() && r.elapsed < Duration::from_secs(120);
        Ok((ok, format!("{} ops, worst rel err {:.2e}, {:.1}s", r.cases.len(), r.worst(), r.elapsed.as_secs_f64())))
    }));

    results.push(check("AdaIN round trip and normalized statistics", || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (c, n) = (8, 16);
        let plane = |rng: &mut ChaCha8Rng| {
            let scale: f64 = rng.random_range(0.2..3.0);
            let shift: f64 = rng.random_range(-2.0..2.0);
            Tensor::<f64>::new([c, n, n], (0..c * n * n).map(|_| shift + scale * rng.random_range(-1.0..1.0)).collect())
        };
        let tp = TriPlane::new([plane(&mut rng)?, plane(&mut rng)?, plane(&mut rng)?])?;
        let stats = triplane::compute_stats(&tp, triplane::DEFAULT_STATS_EPS)?;
        let normalized = triplane::normalize(&tp, &stats)?;
        let back = triplane::denormalize(&normalized, &stats)?;
        let round = tp.max_abs_diff(&back);
        let ns = triplane::compute_stats(&normalized.0, triplane::DEFAULT_STATS_EPS)?;
        let flat = ns.to_flat();
        let half = flat.len() / 2;
        let mu = flat[..half].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let sd = flat[half..].iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        Ok((
            round < 1e-5 && mu < 1e-4 && sd < 1e-3,
            format!("round trip {round:.2e}, max |mu| {mu:.2e}, max |sigma-1| {sd:.2e}"),
        ))
    }));

    results.push(check("disentanglement invariant (10 latents x 5 appearances, < 1 min)", || {
        let t = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = Model::init(ModelConfig::default(), &mut rng)?;
        let dim = model.config.latent_dim;
        let latent = |rng: &mut ChaCha8Rng| {
            Tensor::new([dim], (0..dim).map(|_| rng.random_range(-1.5f32..1.5)).collect())
        };
        let apps: Vec<_> = (0..5)
            .map(|_| latent(&mut rng).and_then(|w| model.appearance_of(&w)))
            .collect::<tpde::Result<_>>()?;
        let cam = Camera::new(0.2, -0.1, 3.0, 24, 24);
        let settings = RenderSettings {
            samples_per_ray: 24,
            ..RenderSettings::default()
        };
        let mut mismatches = 0;
        for _ in 0..10 {
            let w = latent(&mut rng)?;
            let base = render_image(&model, &w, &apps[0], &cam, &settings)?;
            let base_mask = base.argmax_mask();
            for s in &apps[1..] {
                let out = render_image(&model, &w, s, &cam, &settings)?;
                if out.alpha != base.alpha || out.depth != base.depth || out.argmax_mask() != base_mask {
                    mismatches += 1;
                }
            }
        }
        let el = t.elapsed();
        Ok((
            mismatches == 0 && el < Duration::from_secs(60),
            format!("{mismatches} mismatching renders of 40, {:.1}s", el.as_secs_f64()),
        ))
    }));

    results.push(check("rendering oracle (slab alpha, weight partition)", || {
        let mut worst_alpha = 0.0f64;
        for sl in [0.01f64, 0.1, 1.0, 10.0] {
            let len = 0.37;
            let (w, t) = sample_weights(&[sl / len], &[1.0, 1.0 + len])?;
            worst_alpha = worst_alpha.max((w[0] - (1.0 - (-sl).exp())).abs());
            worst_alpha = worst_alpha.max((w[0] + t - 1.0).abs());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst_sum = 0.0f64;
        for _ in 0..200 {
            let m = rng.random_range(2..64);
            let sigma: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..30.0)).collect();
            let mut edges = vec![rng.random_range(0.0..2.0)];
            for _ in 0..m {
                let e = *edges.last().unwrap() + rng.random_range(1e-3..0.2);
                edges.push(e);
            }
            let (w, t) = sample_weights(&sigma, &edges)?;
            worst_sum = worst_sum.max((w.iter().sum::<f64>() + t - 1.0).abs());
        }
        Ok((
            worst_alpha < 1e-4 && worst_sum < 1e-5,
            format!("slab alpha err {worst_alpha:.2e}, partition err {worst_sum:.2e}"),
        ))
    }));

    results.push(check("loss arithmetic (36 from unit terms, sim constants, identical batch 0)", || {
        let w = LossWeights::default();
        let total = w.reconstruction(1.0, 1.0, 1.0, 1.0);
        let constants = w.sim == 15.0 && w.batch == 3 && w.anchor == 1;
        let (side, classes) = (8, scenes::NUM_CLASSES);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sem = vec![0.0f32; side * side * classes];
        for px in sem.chunks_mut(classes) {
            let raw: Vec<f32> = (0..classes).map(|_| rng.random_range(0.01f32..1.0)).collect();
            let z: f32 = raw.iter().sum();
            px.iter_mut().zip(&raw).for_each(|(p, r)| *p = r / z);
        }
        let out = RenderOutput {
            width: side,
            height: side,
            classes,
            rgb: (0..side * side * 3).map(|_| rng.random_range(0.0f32..1.0)).collect(),
            depth: vec![2.0; side * side],
            sem_probs: sem,
            alpha: vec![1.0; side * side],
        };
        let batch = vec![out.clone(), out.clone(), out];
        let sim = losses::part_histogram_loss(&batch, &w, HistogramMode::PerLabel)?;
        Ok((
            total == 36.0 && constants && sim == 0.0,
            format!("recon total {total}, lambda5 {} B {} k {}, identical-batch sim {sim}", w.sim, w.batch, w.anchor),
        ))
    }));

    let ds = scenes::generate_dataset(&SceneRanges::default(), 3, &DatasetOptions::default())
        .expect("smoke dataset generation");
    let cfg = TrainConfig::default();
    let main_fit = run_fit(&ds, &cfg);

    results.push(check("smoke training (3 scenes, 64x64, 48 spp, 300 iterations, < 15 min)", || {
        let fit = main_fit.as_ref().map_err(|e| no_fit(&e.to_string()))?;
        let at50 = fit.rows[50].total;
        let tail = &fit.rows[fit.rows.len() - 50..];
        let tail_mean = tail.iter().map(|r| r.total).sum::<f64>() / 50.0;
        let mut ratios = Vec::new();
        for s in 0..ds.scene_count() {
            let id = format!("scene_{s}");
            let (mut before, mut after) = (0.0, 0.0);
            for r in ds.records_of(s) {
                before += l1(&editing::render_latent(&fit.init, &id, &r.camera)?.rgb, &r.rgb);
                after += l1(&editing::render_latent(&fit.ckpt, &id, &r.camera)?.rgb, &r.rgb);
            }
            ratios.push(after / before);
        }
        let ok = tail_mean < at50 && ratios.iter().all(|&r| r < 0.5) && fit.elapsed < Duration::from_secs(900);
        Ok((
            ok,
            format!(
                "total at step 50 {at50:.3}, final-50 mean {tail_mean:.3}, per-scene L1 ratios {:.3?}, fit {:.0}s",
                ratios,
                fit.elapsed.as_secs_f64()
            ),
        ))
    }));

    let transfer_on = match &main_fit {
        Ok(f) => transfer(&f.ckpt, ds.scene_count()).map_err(|e| e.to_string()),
        Err(e) => Err(e.to_string()),
    };
    results.push(check("appearance transfer (>= 50% color distance reduction, depth bit-identical)", || {
        let (red, depth_ok, _) = transfer_on.clone().map_err(|e| no_fit(&e))?;
        Ok((red >= 0.5 && depth_ok, format!("mean reduction {:.1}%, depth identical {depth_ok}", red * 100.0)))
    }));

    results.push(check("hair edit (CE < 50% of initial, outside change < 0.05, checkpoint unchanged, <= 5 min)", || {
        let fit = main_fit.as_ref().map_err(|e| no_fit(&e.to_string()))?;
        let ck = &fit.ckpt;
        let before_bytes = ck.to_bytes()?;
        let cam = front();
        let current = editing::render_latent(ck, "scene_0", &cam)?.argmax_mask();
        let mut bigger = ds.meta.scenes[0].clone();
        bigger.hair_cap_angle += 0.5;
        let grow = scenes::oracle_render(&bigger, &cam, 48, ds.meta.background)?.argmax_mask();
        let target = editing::paint_hair(&current, &current, &grow);
        let painted = target.iter().zip(&current).filter(|(a, b)| a != b).count();
        let t = Instant::now();
        let trace = editing::optimize_edit(ck, &EditRequest::new("scene_0", cam, target), |_, _| {})?;
        let el = t.elapsed();
        let ce0 = trace.steps.first().map(|s| s.ce).unwrap_or(f64::NAN);
        let ce1 = trace.steps.last().map(|s| s.ce).unwrap_or(f64::NAN);
        let outside = editing::outside_change(&trace.before, &trace.after, &trace.region);
        let unchanged = ck.to_bytes()? == before_bytes;
        Ok((
            ce1 < 0.5 * ce0 && outside < 0.05 && unchanged && el <= Duration::from_secs(300),
            format!(
                "{painted} px painted, CE {ce0:.4} -> {ce1:.4}, outside change {outside:.4}, checkpoint unchanged {unchanged}, {:.0}s",
                el.as_secs_f64()
            ),
        ))
    }));

    results.push(check("ablation direction (sim off transfers worse, whole-image hair match worse)", || {
        let (on, _, hair_on) = transfer_on.clone().map_err(|e| no_fit(&e))?;
        let off_fit = run_fit(&ds, &TrainConfig { sim_loss: false, ..cfg.clone() })?;
        let (off, _, _) = transfer(&off_fit.ckpt, ds.scene_count())?;
        let whole_fit = run_fit(&ds, &TrainConfig { histogram: HistogramMode::WholeImage, ..cfg.clone() })?;
        let (_, _, hair_whole) = transfer(&whole_fit.ckpt, ds.scene_count())?;
        Ok((
            off < on && hair_whole > hair_on,
            format!(
                "reduction sim on {:.1}% vs off {:.1}%; hair color distance per-label {hair_on:.4} vs whole-image {hair_whole:.4}",
                on * 100.0,
                off * 100.0
            ),
        ))
    }));

    results.push(check("determinism (fit and render byte-identical under fixed seeds)", || {
        let small = scenes::generate_dataset(
            &SceneRanges::default(),
            3,
            &DatasetOptions {
                views_per_scene: 2,
                resolution: 32,
                samples_per_ray: 16,
                ..DatasetOptions::default()
            },
        )?;
        let cfg = TrainConfig {
            iterations: 6,
            resolution: 32,
            samples_per_ray: 16,
            seed: 42,
            ..TrainConfig::default()
        };
        let (a, _) = training::fit(&small, &cfg)?;
        let (b, _) = training::fit(&small, &cfg)?;
        let fit_same = a.to_bytes()? == b.to_bytes()?;
        let cam = Camera::new(0.3, 0.1, 3.0, 32, 32);
        let ra = editing::render_latent(&a, "scene_1", &cam)?;
        let rb = editing::render_latent(&b, "scene_1", &cam)?;
        let bits = |o: &RenderOutput| -> Vec<u32> {
            o.rgb.iter().chain(&o.depth).chain(&o.sem_probs).map(|v| v.to_bits()).collect()
        };
        let render_same = bits(&ra) == bits(&rb);
        Ok((fit_same && render_same, format!("checkpoints identical {fit_same}, renders identical {render_same}")))
    }));

    let failed: Vec<_> = results.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    println!("{} of {} acceptance criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
