//! Finite-difference verification of every differentiable operation, run as
//! a batch of random trials per op in 64-bit precision.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, CompositeConsts, Graph, Tensor, Var};
use crate::error::Result;
use crate::losses;
use crate::netmodels::{Model, ModelConfig};
use crate::triplane::{self, TriPlaneVars};

pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOL: f64 = 1e-3;
pub const SUITE_TRIALS: usize = 100;

type Objective = Box<dyn Fn(&mut Graph<f64>, Var) -> Result<Var>>;

/// One trial: the point to differentiate at and the scalar objective.
pub struct Trial {
    pub x: Tensor<f64>,
    pub f: Objective,
}

/// A named family of trials.
pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Result<Trial>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
    pub tol: f64,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    /// One line per op plus a summary.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            s.push_str(&format!(
                "{:<28} trials {:>4}  max rel err {:.3e}  {}\n",
                c.name,
                c.trials,
                c.max_rel_err,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        s.push_str(&format!(
            "{} ops, worst {:.3e}, tol {:.0e}, {:.1}s: {}\n",
            self.cases.len(),
            self.worst(),
            self.tol,
            self.elapsed.as_secs_f64(),
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        s
    }
}

fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Values in `[-2, 2]` at least `gap` away from zero.
fn away_from_zero(rng: &mut impl Rng, shape: &[usize], gap: f64) -> Result<Tensor<f64>> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(gap..2.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Grid coordinates in `[-1.2, 1.2]` kept clear of the texel lines and the
/// clamp boundary, where bilinear sampling has kinks.
fn grid_coords(rng: &mut impl Rng, k: usize, r: usize) -> Result<Tensor<f64>> {
    let step = 2.0 / (r - 1) as f64;
    let mut data = Vec::with_capacity(2 * k);
    while data.len() < 2 * k {
        let v: f64 = rng.random_range(-1.2..1.2);
        let nearest = ((v + 1.0) / step).round() * step - 1.0;
        if (v - nearest).abs() > 1e-3 && (v.abs() - 1.0).abs() > 1e-3 {
            data.push(v);
        }
    }
    Tensor::new([k, 2], data)
}

/// `Σ y ⊙ r` for a fixed random `r`, so every output element contributes a
/// distinct weight.
fn contract(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = uniform(&mut rng, g.shape(y), -1.0, 1.0)?;
    let rv = g.constant(r);
    let p = g.mul(y, rv)?;
    Ok(g.sum(p))
}

fn unary_trial(
    rng: &mut ChaCha8Rng,
    x: Tensor<f64>,
    op: impl Fn(&mut Graph<f64>, Var) -> Var + 'static,
) -> Result<Trial> {
    let seed = rng.random();
    Ok(Trial {
        x,
        f: Box::new(move |g, x| {
            let y = op(g, x);
            contract(g, y, seed)
        }),
    })
}

macro_rules! unary_case {
    ($name:literal, $op:ident) => {
        Case {
            name: $name,
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.$op(x))
            },
        }
    };
}

/// Trial for a two-input op, differentiating `lhs` or `rhs` with the other
/// held constant.
fn pair_trial(
    rng: &mut ChaCha8Rng,
    x: Tensor<f64>,
    other: Tensor<f64>,
    wrt_lhs: bool,
    op: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var> + 'static,
) -> Result<Trial> {
    let seed = rng.random();
    Ok(Trial {
        x,
        f: Box::new(move |g, x| {
            let o = g.constant(other.clone());
            let y = if wrt_lhs { op(g, x, o)? } else { op(g, o, x)? };
            contract(g, y, seed)
        }),
    })
}

fn binary_case(rng: &mut ChaCha8Rng, which: usize, broadcast: bool, wrt_lhs: bool) -> Result<Trial> {
    let full = [3usize, 4];
    let (ls, rs): (&[usize], &[usize]) = if broadcast { (&full, &full[1..]) } else { (&full, &full) };
    let lhs = uniform(rng, ls, -2.0, 2.0)?;
    let rhs = if which == 3 {
        away_from_zero(rng, rs, 0.5)?
    } else {
        uniform(rng, rs, -2.0, 2.0)?
    };
    let (x, other) = if wrt_lhs { (lhs, rhs) } else { (rhs, lhs) };
    pair_trial(rng, x, other, wrt_lhs, move |g, a, b| match which {
        0 => g.add(a, b),
        1 => g.sub(a, b),
        2 => g.mul(a, b),
        _ => g.div(a, b),
    })
}

fn matmul_case(rng: &mut ChaCha8Rng, n: usize, wrt_lhs: bool) -> Result<Trial> {
    let a = uniform(rng, &[3, 4], -2.0, 2.0)?;
    let b = uniform(rng, &[4, n], -2.0, 2.0)?;
    let (x, other) = if wrt_lhs { (a, b) } else { (b, a) };
    pair_trial(rng, x, other, wrt_lhs, |g, a, b| g.matmul(a, b))
}

fn composite_consts(rng: &mut impl Rng, p: usize, m: usize) -> CompositeConsts<f64> {
    let mut edges = Vec::with_capacity(p * (m + 1));
    let mut t_samples = Vec::with_capacity(p * m);
    for _ in 0..p {
        let mut t = rng.random_range(1.0..2.0);
        edges.push(t);
        for _ in 0..m {
            let next = t + rng.random_range(0.1..0.5);
            t_samples.push(0.5 * (t + next));
            edges.push(next);
            t = next;
        }
    }
    let t_far = edges.chunks(m + 1).map(|e| e[m] + 0.5).collect();
    CompositeConsts {
        edges,
        t_samples,
        t_far,
        background: [rng.random(), rng.random(), rng.random()],
    }
}

/// Differentiates composite input `which`: sigma, color or logits.
fn composite_case(rng: &mut ChaCha8Rng, which: usize) -> Result<Trial> {
    let (p, m, n) = (2, 4, 3);
    let sigma = uniform(rng, &[p, m], 0.0, 2.0)?;
    let color = uniform(rng, &[p, m, 3], 0.0, 1.0)?;
    let logits = uniform(rng, &[p, m, n], -2.0, 2.0)?;
    let consts = composite_consts(rng, p, m);
    let inputs = [sigma, color, logits];
    let x = inputs[which].clone();
    let seed = rng.random();
    Ok(Trial {
        x,
        f: Box::new(move |g, x| {
            let vs: Vec<Var> = (0..3)
                .map(|i| if i == which { x } else { g.constant(inputs[i].clone()) })
                .collect();
            let y = g.composite(vs[0], vs[1], vs[2], consts.clone())?;
            contract(g, y, seed)
        }),
    })
}

fn histogram_case(rng: &mut ChaCha8Rng, wrt_image: bool) -> Result<Trial> {
    let img = uniform(rng, &[6, 3], 0.0, 1.0)?;
    let mask = uniform(rng, &[6], 0.1, 1.0)?;
    let (x, other) = if wrt_image { (img, mask) } else { (mask, img) };
    pair_trial(rng, x, other, wrt_image, |g, a, b| g.soft_histogram(a, b, losses::HISTOGRAM_BINS))
}

fn channel_case(rng: &mut ChaCha8Rng, standardize: bool, which: usize) -> Result<Trial> {
    let x = uniform(rng, &[2, 3, 3], -2.0, 2.0)?;
    let p = uniform(rng, &[2], -2.0, 2.0)?;
    let q = uniform(rng, &[2], 0.5, 2.0)?;
    let inputs = [x, p, q];
    let seed = rng.random();
    Ok(Trial {
        x: inputs[which].clone(),
        f: Box::new(move |g, v| {
            let vs: Vec<Var> = (0..3)
                .map(|i| if i == which { v } else { g.constant(inputs[i].clone()) })
                .collect();
            let y = if standardize {
                g.channel_standardize(vs[0], vs[1], vs[2])?
            } else {
                g.channel_affine(vs[0], vs[2], vs[1])?
            };
            contract(g, y, seed)
        }),
    })
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        latent_dim: 3,
        generator_hidden: 5,
        channels: 2,
        resolution: 4,
        decoder_hidden: 4,
        ..ModelConfig::default()
    }
}

/// The whole render path from a latent: generator, statistics,
/// normalization, both decoders and compositing.
fn render_from_latent(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let cfg = tiny_model_config();
    let model = Model::init(cfg.clone(), rng)?;
    let w = uniform(rng, &[cfg.latent_dim], -2.0, 2.0)?;
    let (p, m) = (2, 4);
    let pts = uniform(rng, &[p * m, 3], -0.9, 0.9)?;
    let consts = composite_consts(rng, p, m);
    let seed = rng.random();
    Ok(Trial {
        x: w,
        f: Box::new(move |g, w| {
            let bm = model.bind(g, false);
            let field = bm.latent_field(g, w)?;
            let pv = g.constant(pts.clone());
            let (density, logits) = bm.geometry_at(g, &field.normalized, pv)?;
            let color = bm.color_at(g, &field.normalized, &field.stats, pv)?;
            let sigma = g.reshape(density, [p, m])?;
            let color = g.reshape(color, [p, m, 3])?;
            let logits = g.reshape(logits, [p, m, model.config.classes])?;
            let out = g.composite(sigma, color, logits, consts.clone())?;
            contract(g, out, seed)
        }),
    })
}

fn planes_case(rng: &mut ChaCha8Rng, denormalize: bool) -> Result<Trial> {
    let x = uniform(rng, &[3, 2, 3, 3], -2.0, 2.0)?;
    let target = triplane::AppearanceStats {
        mean: [0, 1, 2].map(|_| uniform(rng, &[2], -1.0, 1.0).unwrap()),
        std: [0, 1, 2].map(|_| uniform(rng, &[2], 0.5, 2.0).unwrap()),
    };
    let seed = rng.random();
    Ok(Trial {
        x,
        f: Box::new(move |g, x| {
            let mut planes = [x; 3];
            for (i, p) in planes.iter_mut().enumerate() {
                *p = g.slice(x, i * 18, [2, 3, 3])?;
            }
            let tp = TriPlaneVars { planes };
            let stats = triplane::stats_vars(g, &tp, triplane::DEFAULT_STATS_EPS)?;
            let mut out = triplane::normalize_vars(g, &tp, &stats)?;
            if denormalize {
                let sv = triplane::StatsVars::constant(g, &target);
                out = triplane::denormalize_vars(g, &out, &sv)?;
            }
            let mut acc = contract(g, out.planes[0], seed)?;
            for (i, p) in out.planes.iter().enumerate().skip(1) {
                let c = contract(g, *p, seed + i as u64)?;
                acc = g.add(acc, c)?;
            }
            Ok(acc)
        }),
    })
}

fn hellinger_case(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let norm = |t: Tensor<f64>| {
        let k = t.shape()[1];
        let mut d = t.into_data();
        for row in d.chunks_mut(k) {
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        Tensor::new([3, k], d)
    };
    let a = norm(uniform(rng, &[3, 5], 0.1, 1.0)?)?;
    let b = norm(uniform(rng, &[3, 5], 0.1, 1.0)?)?;
    Ok(Trial {
        x: a,
        f: Box::new(move |g, x| {
            let bv = g.constant(b.clone());
            losses::hellinger_vars(g, x, bv)
        }),
    })
}

fn cross_entropy_case(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let probs = uniform(rng, &[4, 3], 0.05, 1.0)?;
    let target = uniform(rng, &[4, 3], 0.0, 1.0)?;
    Ok(Trial {
        x: probs,
        f: Box::new(move |g, x| {
            let t = g.constant(target.clone());
            losses::cross_entropy_vars(g, t, x)
        }),
    })
}

fn perceptual_case(rng: &mut ChaCha8Rng) -> Result<Trial> {
    let a = uniform(rng, &[8, 8, 3], 0.0, 1.0)?;
    let b = uniform(rng, &[8, 8, 3], 0.0, 1.0)?;
    Ok(Trial {
        x: a,
        f: Box::new(move |g, x| {
            let bv = g.constant(b.clone());
            losses::perceptual_vars(g, x, bv)
        }),
    })
}

/// Every checked operation.
pub fn cases() -> Vec<Case> {
    vec![
        unary_case!("neg", neg),
        unary_case!("exp", exp),
        unary_case!("softplus", softplus),
        unary_case!("sigmoid", sigmoid),
        unary_case!("tanh", tanh),
        unary_case!("square", square),
        Case {
            name: "log",
            make: |rng| {
                let x = uniform(rng, &[3, 4], 0.1, 2.0)?;
                unary_trial(rng, x, |g, x| g.log(x))
            },
        },
        Case {
            name: "sqrt",
            make: |rng| {
                let x = uniform(rng, &[3, 4], 0.1, 2.0)?;
                unary_trial(rng, x, |g, x| g.sqrt(x))
            },
        },
        Case {
            name: "relu",
            make: |rng| {
                let x = away_from_zero(rng, &[3, 4], 1e-3)?;
                unary_trial(rng, x, |g, x| g.relu(x))
            },
        },
        Case {
            name: "abs",
            make: |rng| {
                let x = away_from_zero(rng, &[3, 4], 1e-3)?;
                unary_trial(rng, x, |g, x| g.abs(x))
            },
        },
        Case {
            name: "add_scalar",
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.add_scalar(x, 0.7))
            },
        },
        Case {
            name: "mul_scalar",
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.mul_scalar(x, -1.3))
            },
        },
        Case { name: "add (lhs)", make: |r| binary_case(r, 0, false, true) },
        Case { name: "add (rhs, broadcast)", make: |r| binary_case(r, 0, true, false) },
        Case { name: "sub (lhs)", make: |r| binary_case(r, 1, false, true) },
        Case { name: "sub (rhs)", make: |r| binary_case(r, 1, false, false) },
        Case { name: "sub (rhs, broadcast)", make: |r| binary_case(r, 1, true, false) },
        Case { name: "mul (lhs)", make: |r| binary_case(r, 2, false, true) },
        Case { name: "mul (rhs, broadcast)", make: |r| binary_case(r, 2, true, false) },
        Case { name: "div (lhs)", make: |r| binary_case(r, 3, false, true) },
        Case { name: "div (rhs)", make: |r| binary_case(r, 3, false, false) },
        Case { name: "div (rhs, broadcast)", make: |r| binary_case(r, 3, true, false) },
        Case { name: "div (lhs, broadcast)", make: |r| binary_case(r, 3, true, true) },
        Case {
            name: "sum",
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                Ok(Trial { x, f: Box::new(|g, x| {
                    let s = g.sum(x);
                    Ok(g.square(s))
                }) })
            },
        },
        Case {
            name: "mean",
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                Ok(Trial { x, f: Box::new(|g, x| {
                    let s = g.mean(x);
                    Ok(g.square(s))
                }) })
            },
        },
        Case {
            name: "sum_last_axis",
            make: |rng| {
                let x = uniform(rng, &[3, 4], -2.0, 2.0)?;
                let seed = rng.random();
                Ok(Trial { x, f: Box::new(move |g, x| {
                    let s = g.sum_last_axis(x)?;
                    contract(g, s, seed)
                }) })
            },
        },
        Case { name: "matmul (lhs)", make: |r| matmul_case(r, 5, true) },
        Case { name: "matmul (rhs)", make: |r| matmul_case(r, 5, false) },
        Case { name: "matmul wide (lhs)", make: |r| matmul_case(r, 17, true) },
        Case { name: "matmul wide (rhs)", make: |r| matmul_case(r, 17, false) },
        Case {
            name: "reshape",
            make: |rng| {
                let x = uniform(rng, &[2, 6], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.reshape(x, [3, 4]).unwrap())
            },
        },
        Case {
            name: "slice",
            make: |rng| {
                let x = uniform(rng, &[20], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.slice(x, 3, [2, 5]).unwrap())
            },
        },
        Case {
            name: "select_columns",
            make: |rng| {
                let x = uniform(rng, &[3, 5], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.select_columns(x, &[4, 0, 2, 4]).unwrap())
            },
        },
        Case {
            name: "grid_sample (plane)",
            make: |rng| {
                let plane = uniform(rng, &[2, 4, 4], -2.0, 2.0)?;
                let coords = grid_coords(rng, 5, 4)?;
                pair_trial(rng, plane, coords, true, |g, p, c| g.grid_sample(p, c))
            },
        },
        Case {
            name: "grid_sample (coords)",
            make: |rng| {
                let plane = uniform(rng, &[2, 4, 4], -2.0, 2.0)?;
                let coords = grid_coords(rng, 5, 4)?;
                pair_trial(rng, coords, plane, false, |g, p, c| g.grid_sample(p, c))
            },
        },
        Case {
            name: "channel_mean",
            make: |rng| {
                let x = uniform(rng, &[2, 3, 3], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.channel_mean(x).unwrap())
            },
        },
        Case {
            name: "channel_std",
            make: |rng| {
                let x = uniform(rng, &[2, 3, 3], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.channel_std(x, 1e-8).unwrap())
            },
        },
        Case { name: "channel_standardize (x)", make: |r| channel_case(r, true, 0) },
        Case { name: "channel_standardize (mean)", make: |r| channel_case(r, true, 1) },
        Case { name: "channel_standardize (std)", make: |r| channel_case(r, true, 2) },
        Case { name: "channel_affine (x)", make: |r| channel_case(r, false, 0) },
        Case { name: "channel_affine (shift)", make: |r| channel_case(r, false, 1) },
        Case { name: "channel_affine (scale)", make: |r| channel_case(r, false, 2) },
        Case { name: "composite (sigma)", make: |r| composite_case(r, 0) },
        Case { name: "composite (color)", make: |r| composite_case(r, 1) },
        Case { name: "composite (logits)", make: |r| composite_case(r, 2) },
        Case { name: "soft_histogram (image)", make: |r| histogram_case(r, true) },
        Case { name: "soft_histogram (mask)", make: |r| histogram_case(r, false) },
        Case {
            name: "blur_down",
            make: |rng| {
                let x = uniform(rng, &[6, 5, 2], -2.0, 2.0)?;
                unary_trial(rng, x, |g, x| g.blur_down(x).unwrap())
            },
        },
        Case { name: "plane normalize", make: |r| planes_case(r, false) },
        Case { name: "plane denormalize", make: |r| planes_case(r, true) },
        Case { name: "hellinger", make: hellinger_case },
        Case { name: "cross_entropy", make: cross_entropy_case },
        Case { name: "perceptual", make: perceptual_case },
        Case { name: "render from latent", make: render_from_latent },
    ]
}

/// Runs `trials` random trials of every case.
pub fn run_suite(trials: usize, seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut reports = Vec::new();
    for (i, case) in cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            let t = (case.make)(&mut rng)?;
            let r = grad_check(&t.f, &t.x, SUITE_STEP, SUITE_TOL)?;
            worst = worst.max(r.max_rel_err);
        }
        reports.push(CaseReport {
            name: case.name.to_string(),
            trials,
            max_rel_err: worst,
            passed: worst < SUITE_TOL,
        });
    }
    Ok(SuiteReport {
        cases: reports,
        tol: SUITE_TOL,
        elapsed: start.elapsed(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let r = run_suite(3, 11).unwrap();
        assert!(r.passed(), "{}", r.to_text());
    }

    #[test]
    fn grid_coords_avoid_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = grid_coords(&mut rng, 200, 4).unwrap();
        for &v in c.data() {
            assert!((v.abs() - 1.0).abs() > 1e-3);
            let u = (v + 1.0) * 1.5;
            assert!((u - u.round()).abs() > 1e-3 || v.abs() > 1.0);
        }
    }
}
