//! Tri-plane scene representation and the per-channel statistics used to
//! split it into a normalized geometry part and an appearance code.
//!
//! A point `(x, y, z)` reads plane `xy` at `(x, y)`, plane `xz` at `(x, z)` and
//! plane `yz` at `(y, z)`; the three bilinear samples are summed.

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Result};

/// Plane order used everywhere: xy, xz, yz.
pub const PLANE_NAMES: [&str; 3] = ["xy", "xz", "yz"];

/// Point coordinates read by each plane, as (column axis, row axis).
pub const PLANE_AXES: [[usize; 2]; 3] = [[0, 1], [0, 2], [1, 2]];

pub const DEFAULT_STATS_EPS: f64 = 1e-8;

/// Three `C × R × R` feature planes.
#[derive(Clone, Debug, PartialEq)]
pub struct TriPlane<T: Real = f32> {
    planes: [Tensor<T>; 3],
}

impl<T: Real> TriPlane<T> {
    pub fn new(planes: [Tensor<T>; 3]) -> Result<Self> {
        let s = planes[0].shape().to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(invalid(format!("tri-plane planes must be C×R×R, got {s:?}")));
        }
        for p in &planes {
            if p.shape() != s.as_slice() {
                return Err(invalid(format!(
                    "tri-plane planes disagree in shape: {s:?} vs {:?}",
                    p.shape()
                )));
            }
            if !p.all_finite() {
                return Err(invalid("tri-plane contains non-finite values"));
            }
        }
        Ok(Self { planes })
    }

    pub fn constant(channels: usize, resolution: usize, v: T) -> Self {
        let p = Tensor::full([channels, resolution, resolution], v);
        Self {
            planes: [p.clone(), p.clone(), p],
        }
    }

    pub fn planes(&self) -> &[Tensor<T>; 3] {
        &self.planes
    }

    pub fn into_planes(self) -> [Tensor<T>; 3] {
        self.planes
    }

    pub fn channels(&self) -> usize {
        self.planes[0].shape()[0]
    }

    pub fn resolution(&self) -> usize {
        self.planes[0].shape()[1]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.planes
            .iter()
            .zip(&other.planes)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// Plane-wise sum; sampling is linear in plane values.
    pub fn add(&self, other: &Self) -> Result<Self> {
        let sum = |a: &Tensor<T>, b: &Tensor<T>| {
            Tensor::new(
                a.shape().to_vec(),
                a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect(),
            )
        };
        Self::new([
            sum(&self.planes[0], &other.planes[0])?,
            sum(&self.planes[1], &other.planes[1])?,
            sum(&self.planes[2], &other.planes[2])?,
        ])
    }
}

/// A tri-plane whose planes have been standardized channelwise.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedTriPlane<T: Real = f32>(pub TriPlane<T>);

impl<T: Real> NormalizedTriPlane<T> {
    pub fn planes(&self) -> &[Tensor<T>; 3] {
        self.0.planes()
    }
}

/// Per-plane, per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceStats<T: Real = f32> {
    pub mean: [Tensor<T>; 3],
    pub std: [Tensor<T>; 3],
}

impl<T: Real> AppearanceStats<T> {
    pub fn channels(&self) -> usize {
        self.mean[0].numel()
    }

    /// Flattened as `[mean_xy, mean_xz, mean_yz, std_xy, std_xz, std_yz]`.
    pub fn to_flat(&self) -> Vec<T> {
        self.mean
            .iter()
            .chain(&self.std)
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn from_flat(channels: usize, flat: &[T]) -> Result<Self> {
        if flat.len() != 6 * channels {
            return Err(invalid(format!(
                "appearance stats need {} values, got {}",
                6 * channels,
                flat.len()
            )));
        }
        let part = |i: usize| Tensor::new([channels], flat[i * channels..(i + 1) * channels].to_vec());
        let stats = Self {
            mean: [part(0)?, part(1)?, part(2)?],
            std: [part(3)?, part(4)?, part(5)?],
        };
        if stats.std.iter().any(|s| s.data().iter().any(|&v| v <= T::zero())) {
            return Err(invalid("appearance std must be positive"));
        }
        Ok(stats)
    }
}

/// Graph handles for a tri-plane.
#[derive(Clone, Copy, Debug)]
pub struct TriPlaneVars {
    pub planes: [Var; 3],
}

/// Graph handles for appearance statistics.
#[derive(Clone, Copy, Debug)]
pub struct StatsVars {
    pub mean: [Var; 3],
    pub std: [Var; 3],
}

impl TriPlaneVars {
    pub fn constant<T: Real>(g: &mut Graph<T>, tp: &TriPlane<T>) -> Self {
        Self {
            planes: tp.planes.clone().map(|p| g.constant(p)),
        }
    }

    pub fn leaf<T: Real>(g: &mut Graph<T>, tp: &TriPlane<T>) -> Self {
        Self {
            planes: tp.planes.clone().map(|p| g.leaf(p)),
        }
    }

    pub fn value<T: Real>(&self, g: &Graph<T>) -> TriPlane<T> {
        TriPlane {
            planes: self.planes.map(|v| g.value(v).clone()),
        }
    }
}

impl StatsVars {
    pub fn constant<T: Real>(g: &mut Graph<T>, s: &AppearanceStats<T>) -> Self {
        Self {
            mean: s.mean.clone().map(|t| g.constant(t)),
            std: s.std.clone().map(|t| g.constant(t)),
        }
    }

    pub fn leaf<T: Real>(g: &mut Graph<T>, s: &AppearanceStats<T>) -> Self {
        Self {
            mean: s.mean.clone().map(|t| g.leaf(t)),
            std: s.std.clone().map(|t| g.leaf(t)),
        }
    }

    pub fn value<T: Real>(&self, g: &Graph<T>) -> AppearanceStats<T> {
        AppearanceStats {
            mean: self.mean.map(|v| g.value(v).clone()),
            std: self.std.map(|v| g.value(v).clone()),
        }
    }
}

/// Sums the bilinear samples of the three planes at `points` (`[K, 3]`),
/// giving `[K, C]`.
pub fn sample_vars<T: Real>(g: &mut Graph<T>, tp: &TriPlaneVars, points: Var) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (plane, axes) in tp.planes.iter().zip(PLANE_AXES) {
        let coords = g.select_columns(points, &axes)?;
        let s = g.grid_sample(*plane, coords)?;
        acc = Some(match acc {
            None => s,
            Some(a) => g.add(a, s)?,
        });
    }
    Ok(acc.expect("three planes"))
}

pub fn stats_vars<T: Real>(g: &mut Graph<T>, tp: &TriPlaneVars, eps: f64) -> Result<StatsVars> {
    let mut mean = Vec::with_capacity(3);
    let mut std = Vec::with_capacity(3);
    for &p in &tp.planes {
        mean.push(g.channel_mean(p)?);
        std.push(g.channel_std(p, eps)?);
    }
    Ok(StatsVars {
        mean: [mean[0], mean[1], mean[2]],
        std: [std[0], std[1], std[2]],
    })
}

pub fn normalize_vars<T: Real>(g: &mut Graph<T>, tp: &TriPlaneVars, stats: &StatsVars) -> Result<TriPlaneVars> {
    let mut out = [tp.planes[0]; 3];
    for i in 0..3 {
        out[i] = g.channel_standardize(tp.planes[i], stats.mean[i], stats.std[i])?;
    }
    Ok(TriPlaneVars { planes: out })
}

pub fn denormalize_vars<T: Real>(
    g: &mut Graph<T>,
    ntp: &TriPlaneVars,
    target: &StatsVars,
) -> Result<TriPlaneVars> {
    let mut out = [ntp.planes[0]; 3];
    for i in 0..3 {
        out[i] = g.channel_affine(ntp.planes[i], target.std[i], target.mean[i])?;
    }
    Ok(TriPlaneVars { planes: out })
}

fn check_points<T: Real>(points: &Tensor<T>) -> Result<()> {
    if points.shape().len() != 2 || points.shape()[1] != 3 {
        return Err(invalid(format!("points must be [K, 3], got {:?}", points.shape())));
    }
    if !points.all_finite() {
        return Err(invalid("points must be finite"));
    }
    Ok(())
}

/// Feature of each point: the sum of its three plane samples.
pub fn project_and_sample<T: Real>(tp: &TriPlane<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    check_points(points)?;
    let mut g = Graph::new();
    let tv = TriPlaneVars::constant(&mut g, tp);
    let pv = g.constant(points.clone());
    let f = sample_vars(&mut g, &tv, pv)?;
    Ok(g.value(f).clone())
}

pub fn compute_stats<T: Real>(tp: &TriPlane<T>, eps: f64) -> Result<AppearanceStats<T>> {
    if eps <= 0.0 {
        return Err(invalid("stats eps must be positive"));
    }
    let mut g = Graph::new();
    let tv = TriPlaneVars::constant(&mut g, tp);
    Ok(stats_vars(&mut g, &tv, eps)?.value(&g))
}

pub fn normalize<T: Real>(tp: &TriPlane<T>, stats: &AppearanceStats<T>) -> Result<NormalizedTriPlane<T>> {
    let mut g = Graph::new();
    let tv = TriPlaneVars::constant(&mut g, tp);
    let sv = StatsVars::constant(&mut g, stats);
    Ok(NormalizedTriPlane(normalize_vars(&mut g, &tv, &sv)?.value(&g)))
}

pub fn denormalize<T: Real>(ntp: &NormalizedTriPlane<T>, target: &AppearanceStats<T>) -> Result<TriPlane<T>> {
    if target.std.iter().any(|s| s.data().iter().any(|&v| v <= T::zero())) {
        return Err(invalid("denormalize target std must be positive"));
    }
    let mut g = Graph::new();
    let tv = TriPlaneVars::constant(&mut g, &ntp.0);
    let sv = StatsVars::constant(&mut g, target);
    Ok(denormalize_vars(&mut g, &tv, &sv)?.value(&g))
}
