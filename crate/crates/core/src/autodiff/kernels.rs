//! Forward and backward loops for the fused graph operations.

use super::tensor::{Real, Tensor};
use crate::error::{invalid, Result};

// ------------------------------------------------------------------- matmul

/// Below this many output columns the row-times-row (dot) form beats the
/// broadcast-accumulate form.
const NARROW: usize = 16;

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .fold(T::zero(), |s, (&x, &y)| s + x * y);
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv = *yv + a * xv;
    }
}

fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// `A · B` for row-major `A: m×k`, `B: k×n`.
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    let mut c = vec![T::zero(); m * n];
    if n < NARROW {
        let bt = transpose(b, k, n);
        for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for (cv, bcol) in crow.iter_mut().zip(bt.chunks_exact(k)) {
                *cv = dot(arow, bcol);
            }
        }
    } else {
        for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
            for (&av, brow) in arow.iter().zip(b.chunks_exact(n)) {
                axpy(crow, av, brow);
            }
        }
    }
    c
}

/// `G · Bᵀ`
pub(crate) fn matmul_grad_lhs<T: Real>(g: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut d = vec![T::zero(); m * k];
    if n < NARROW {
        let bt = transpose(b, k, n);
        for (grow, drow) in g.chunks_exact(n).zip(d.chunks_exact_mut(k)) {
            for (&gv, bcol) in grow.iter().zip(bt.chunks_exact(k)) {
                axpy(drow, gv, bcol);
            }
        }
    } else {
        for (grow, drow) in g.chunks_exact(n).zip(d.chunks_exact_mut(k)) {
            for (dv, brow) in drow.iter_mut().zip(b.chunks_exact(n)) {
                *dv = dot(grow, brow);
            }
        }
    }
    debug_assert_eq!(g.len(), m * n);
    d
}

/// `Aᵀ · G`
pub(crate) fn matmul_grad_rhs<T: Real>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    if n < NARROW {
        // Accumulate the transpose so the inner loop runs over k.
        let mut dt = vec![T::zero(); n * k];
        for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
            for (&gv, drow) in grow.iter().zip(dt.chunks_exact_mut(k)) {
                axpy(drow, gv, arow);
            }
        }
        debug_assert_eq!(a.len(), m * k);
        return transpose(&dt, n, k);
    }
    let mut d = vec![T::zero(); k * n];
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)) {
        for (&av, drow) in arow.iter().zip(d.chunks_exact_mut(n)) {
            axpy(drow, av, grow);
        }
    }
    d
}

// -------------------------------------------------------------- grid sample

/// Texel index, fractional offset and whether the coordinate was inside
/// `[-1, 1]` (outside coordinates are clamped and carry no gradient).
#[inline]
fn texel<T: Real>(x: T, r: usize) -> (usize, T, bool) {
    let one = T::one();
    let inside = x >= -one && x <= one;
    let xc = x.max(-one).min(one);
    let u = (xc + one) * T::c(0.5) * T::c((r - 1) as f64);
    let i0 = u.floor().to_usize().unwrap_or(0).min(r - 2);
    (i0, u - T::c(i0 as f64), inside)
}

pub(crate) fn grid_sample_forward<T: Real>(plane: &Tensor<T>, coords: &Tensor<T>) -> Tensor<T> {
    let (c, r) = (plane.shape()[0], plane.shape()[1]);
    let k = coords.shape()[0];
    let p = plane.data();
    let q = coords.data();
    let rr = r * r;
    let mut out = vec![T::zero(); k * c];
    for i in 0..k {
        let (x0, fx, _) = texel(q[2 * i], r);
        let (y0, fy, _) = texel(q[2 * i + 1], r);
        let one = T::one();
        let w00 = (one - fx) * (one - fy);
        let w01 = fx * (one - fy);
        let w10 = (one - fx) * fy;
        let w11 = fx * fy;
        let base = y0 * r + x0;
        let orow = &mut out[i * c..(i + 1) * c];
        for (ch, o) in orow.iter_mut().enumerate() {
            let pl = &p[ch * rr..];
            *o = w00 * pl[base] + w01 * pl[base + 1] + w10 * pl[base + r] + w11 * pl[base + r + 1];
        }
    }
    Tensor::from_parts(vec![k, c], out)
}

pub(crate) fn grid_sample_backward<T: Real>(
    plane: &Tensor<T>,
    coords: &Tensor<T>,
    g: &Tensor<T>,
    want_plane: bool,
    want_coords: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (c, r) = (plane.shape()[0], plane.shape()[1]);
    let k = coords.shape()[0];
    let p = plane.data();
    let q = coords.data();
    let gd = g.data();
    let rr = r * r;
    let half_span = T::c(0.5 * (r - 1) as f64);
    let mut dp = want_plane.then(|| vec![T::zero(); p.len()]);
    let mut dc = want_coords.then(|| vec![T::zero(); q.len()]);
    for i in 0..k {
        let (x0, fx, in_x) = texel(q[2 * i], r);
        let (y0, fy, in_y) = texel(q[2 * i + 1], r);
        let one = T::one();
        let base = y0 * r + x0;
        let grow = &gd[i * c..(i + 1) * c];
        if let Some(dp) = dp.as_mut() {
            let w00 = (one - fx) * (one - fy);
            let w01 = fx * (one - fy);
            let w10 = (one - fx) * fy;
            let w11 = fx * fy;
            for (ch, &gv) in grow.iter().enumerate() {
                let d = &mut dp[ch * rr..];
                d[base] += w00 * gv;
                d[base + 1] += w01 * gv;
                d[base + r] += w10 * gv;
                d[base + r + 1] += w11 * gv;
            }
        }
        if let Some(dc) = dc.as_mut() {
            let (mut gx, mut gy) = (T::zero(), T::zero());
            for (ch, &gv) in grow.iter().enumerate() {
                let pl = &p[ch * rr..];
                let (p00, p01, p10, p11) = (pl[base], pl[base + 1], pl[base + r], pl[base + r + 1]);
                gx += gv * ((one - fy) * (p01 - p00) + fy * (p11 - p10));
                gy += gv * ((one - fx) * (p10 - p00) + fx * (p11 - p01));
            }
            if in_x {
                dc[2 * i] = gx * half_span;
            }
            if in_y {
                dc[2 * i + 1] = gy * half_span;
            }
        }
    }
    (
        dp.map(|d| Tensor::from_parts(plane.shape().to_vec(), d)),
        dc.map(|d| Tensor::from_parts(coords.shape().to_vec(), d)),
    )
}

// ------------------------------------------------------- channel statistics

fn channel_split<T: Real>(x: &Tensor<T>) -> (usize, usize) {
    let c = x.shape()[0];
    (c, x.numel() / c)
}

pub(crate) fn channel_mean<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (c, n) = channel_split(x);
    let inv = T::c(1.0 / n as f64);
    let data = x.data().chunks(n).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
    Tensor::from_parts(vec![c], data)
}

pub(crate) fn channel_mean_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (_, n) = channel_split(x);
    let inv = T::c(1.0 / n as f64);
    Tensor::from_fn(x.shape().to_vec(), |i| g.data()[i / n] * inv)
}

pub(crate) fn channel_std<T: Real>(x: &Tensor<T>, eps: T) -> Tensor<T> {
    let (c, n) = channel_split(x);
    let inv = T::c(1.0 / n as f64);
    let data = x
        .data()
        .chunks(n)
        .map(|ch| {
            let mu = ch.iter().copied().sum::<T>() * inv;
            let var = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv;
            (var + eps).sqrt()
        })
        .collect();
    Tensor::from_parts(vec![c], data)
}

pub(crate) fn channel_std_backward<T: Real>(x: &Tensor<T>, std: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let (_, n) = channel_split(x);
    let inv = T::c(1.0 / n as f64);
    let mut out = Vec::with_capacity(x.numel());
    for (ci, ch) in x.data().chunks(n).enumerate() {
        let mu = ch.iter().copied().sum::<T>() * inv;
        let s = std.data()[ci];
        let k = g.data()[ci] * inv / s;
        out.extend(ch.iter().map(|&v| (v - mu) * k));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

pub(crate) fn channel_standardize<T: Real>(x: &Tensor<T>, mean: &Tensor<T>, std: &Tensor<T>) -> Tensor<T> {
    let (_, n) = channel_split(x);
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let c = i / n;
        (x.data()[i] - mean.data()[c]) / std.data()[c]
    })
}

pub(crate) fn channel_standardize_backward<T: Real>(
    x: &Tensor<T>,
    mean: &Tensor<T>,
    std: &Tensor<T>,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, n) = channel_split(x);
    let mut dx = vec![T::zero(); x.numel()];
    let mut dm = vec![T::zero(); c];
    let mut ds = vec![T::zero(); c];
    for ci in 0..c {
        let s = std.data()[ci];
        let (mut sm, mut ss) = (T::zero(), T::zero());
        for i in ci * n..(ci + 1) * n {
            let gi = g.data()[i];
            dx[i] = gi / s;
            sm += gi;
            ss += gi * out.data()[i];
        }
        dm[ci] = -sm / s;
        ds[ci] = -ss / s;
    }
    let _ = mean;
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], dm),
        Tensor::from_parts(vec![c], ds),
    )
}

pub(crate) fn channel_affine<T: Real>(x: &Tensor<T>, scale: &Tensor<T>, shift: &Tensor<T>) -> Tensor<T> {
    let (_, n) = channel_split(x);
    Tensor::from_fn(x.shape().to_vec(), |i| {
        let c = i / n;
        x.data()[i] * scale.data()[c] + shift.data()[c]
    })
}

pub(crate) fn channel_affine_backward<T: Real>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (c, n) = channel_split(x);
    let mut dx = vec![T::zero(); x.numel()];
    let mut da = vec![T::zero(); c];
    let mut db = vec![T::zero(); c];
    for ci in 0..c {
        let a = scale.data()[ci];
        for i in ci * n..(ci + 1) * n {
            let gi = g.data()[i];
            dx[i] = gi * a;
            da[ci] += gi * x.data()[i];
            db[ci] += gi;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), dx),
        Tensor::from_parts(vec![c], da),
        Tensor::from_parts(vec![c], db),
    )
}

// ---------------------------------------------------------------- composite

/// Column layout of a composite output row for `n` classes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CompositeLayout {
    pub classes: usize,
}

impl CompositeLayout {
    pub const RGB: usize = 0;
    pub const DEPTH: usize = 3;
    pub const SEM: usize = 4;

    pub fn alpha(self) -> usize {
        Self::SEM + self.classes
    }

    pub fn width(self) -> usize {
        Self::SEM + self.classes + 1
    }
}

pub fn composite_layout(classes: usize) -> CompositeLayout {
    CompositeLayout { classes }
}

/// Per-ray constants of the quadrature.
#[derive(Clone, Debug)]
pub struct CompositeConsts<T> {
    /// `P × (M + 1)` bin edges, strictly increasing per ray.
    pub edges: Vec<T>,
    /// `P × M` ray parameter credited to each sample in the depth estimate.
    pub t_samples: Vec<T>,
    /// `P` depth assigned to residual transmittance.
    pub t_far: Vec<T>,
    pub background: [T; 3],
}

impl<T: Real> CompositeConsts<T> {
    pub(crate) fn validate(&self, p: usize, m: usize) -> Result<()> {
        if self.edges.len() != p * (m + 1) || self.t_samples.len() != p * m || self.t_far.len() != p {
            return Err(invalid(format!(
                "composite constants sized for the wrong ray count (P={p}, M={m})"
            )));
        }
        for (ray, e) in self.edges.chunks(m + 1).enumerate() {
            if e.windows(2).any(|w| !(w[1] > w[0])) {
                return Err(invalid(format!("composite bin edges of ray {ray} are not strictly increasing")));
            }
        }
        Ok(())
    }
}

#[inline]
fn softmax_into<T: Real>(logits: &[T], out: &mut [T]) {
    let mx = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - mx).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o = *o / z;
    }
}

/// Per-sample weights and the transmittance after each sample for one ray.
#[inline]
fn ray_weights<T: Real>(sigma: &[T], edges: &[T], w: &mut [T], t_after: &mut [T]) -> T {
    let mut trans = T::one();
    for i in 0..sigma.len() {
        let delta = edges[i + 1] - edges[i];
        let keep = (-sigma[i] * delta).exp();
        w[i] = trans * (T::one() - keep);
        trans = trans * keep;
        t_after[i] = trans;
    }
    trans
}

/// Per-sample weights of one ray with bin `edges` (`sigma.len() + 1` of
/// them) and the transmittance left after the last sample.
pub fn sample_weights<T: Real>(sigma: &[T], edges: &[T]) -> Result<(Vec<T>, T)> {
    if edges.len() != sigma.len() + 1 {
        return Err(invalid("one more bin edge than samples expected"));
    }
    let mut w = vec![T::zero(); sigma.len()];
    let mut t_after = vec![T::zero(); sigma.len()];
    let t_final = ray_weights(sigma, edges, &mut w, &mut t_after);
    Ok((w, t_final))
}

pub(crate) fn composite_forward<T: Real>(
    sigma: &Tensor<T>,
    color: &Tensor<T>,
    logits: &Tensor<T>,
    k: &CompositeConsts<T>,
) -> Tensor<T> {
    let (p, m) = (sigma.shape()[0], sigma.shape()[1]);
    let n = logits.shape()[2];
    let layout = composite_layout(n);
    let width = layout.width();
    let mut out = vec![T::zero(); p * width];
    let mut w = vec![T::zero(); m];
    let mut t_after = vec![T::zero(); m];
    let mut probs = vec![T::zero(); n];
    for ray in 0..p {
        let s = &sigma.data()[ray * m..(ray + 1) * m];
        let edges = &k.edges[ray * (m + 1)..(ray + 1) * (m + 1)];
        let t_final = ray_weights(s, edges, &mut w, &mut t_after);
        let row = &mut out[ray * width..(ray + 1) * width];
        for i in 0..m {
            let c = &color.data()[(ray * m + i) * 3..(ray * m + i) * 3 + 3];
            for ch in 0..3 {
                row[CompositeLayout::RGB + ch] += w[i] * c[ch];
            }
            row[CompositeLayout::DEPTH] += w[i] * k.t_samples[ray * m + i];
            let l = &logits.data()[(ray * m + i) * n..(ray * m + i + 1) * n];
            softmax_into(l, &mut probs);
            for cls in 0..n {
                row[CompositeLayout::SEM + cls] += w[i] * probs[cls];
            }
        }
        for ch in 0..3 {
            row[CompositeLayout::RGB + ch] += t_final * k.background[ch];
        }
        row[CompositeLayout::DEPTH] += t_final * k.t_far[ray];
        row[CompositeLayout::SEM] += t_final;
        row[layout.alpha()] = T::one() - t_final;
    }
    Tensor::from_parts(vec![p, width], out)
}

pub(crate) fn composite_backward<T: Real>(
    sigma: &Tensor<T>,
    color: &Tensor<T>,
    logits: &Tensor<T>,
    k: &CompositeConsts<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (p, m) = (sigma.shape()[0], sigma.shape()[1]);
    let n = logits.shape()[2];
    let layout = composite_layout(n);
    let width = layout.width();
    let mut ds = vec![T::zero(); p * m];
    let mut dc = vec![T::zero(); p * m * 3];
    let mut dl = vec![T::zero(); p * m * n];
    let mut w = vec![T::zero(); m];
    let mut t_after = vec![T::zero(); m];
    let mut e = vec![T::zero(); m];
    let mut probs = vec![T::zero(); n];
    for ray in 0..p {
        let s = &sigma.data()[ray * m..(ray + 1) * m];
        let edges = &k.edges[ray * (m + 1)..(ray + 1) * (m + 1)];
        let t_final = ray_weights(s, edges, &mut w, &mut t_after);
        let grow = &g.data()[ray * width..(ray + 1) * width];
        let g_rgb = &grow[CompositeLayout::RGB..CompositeLayout::RGB + 3];
        let g_depth = grow[CompositeLayout::DEPTH];
        let g_sem = &grow[CompositeLayout::SEM..CompositeLayout::SEM + n];
        let g_alpha = grow[layout.alpha()];

        for i in 0..m {
            let idx = ray * m + i;
            let c = &color.data()[idx * 3..idx * 3 + 3];
            let l = &logits.data()[idx * n..(idx + 1) * n];
            softmax_into(l, &mut probs);
            let mut ei = g_depth * k.t_samples[idx] + g_alpha;
            for ch in 0..3 {
                ei += g_rgb[ch] * c[ch];
                dc[idx * 3 + ch] = w[i] * g_rgb[ch];
            }
            let mut pu = T::zero();
            for cls in 0..n {
                ei += g_sem[cls] * probs[cls];
                pu += probs[cls] * g_sem[cls];
            }
            for cls in 0..n {
                dl[idx * n + cls] = w[i] * probs[cls] * (g_sem[cls] - pu);
            }
            e[i] = ei;
        }
        let e_final = g_rgb
            .iter()
            .zip(&k.background)
            .map(|(&a, &b)| a * b)
            .sum::<T>()
            + g_depth * k.t_far[ray]
            + g_sem[0];
        // suffix = Σ_{i>m} w_i e_i + T_final e_final
        let mut suffix = t_final * e_final;
        for i in (0..m).rev() {
            let delta = edges[i + 1] - edges[i];
            ds[ray * m + i] = delta * (t_after[i] * e[i] - suffix);
            suffix += w[i] * e[i];
        }
    }
    (
        Tensor::from_parts(sigma.shape().to_vec(), ds),
        Tensor::from_parts(color.shape().to_vec(), dc),
        Tensor::from_parts(logits.shape().to_vec(), dl),
    )
}

// ------------------------------------------------------------ soft histogram

/// Width of the inverse-quadratic kernel for `bins` bins over `[0, 1]`.
pub(crate) fn histogram_tau(bins: usize) -> f64 {
    1.0 / bins as f64
}

#[inline]
fn bin_center<T: Real>(j: usize, bins: usize) -> T {
    T::c((j as f64 + 0.5) / bins as f64)
}

/// Row sums below this fall back to a uniform row.
pub(crate) const HISTOGRAM_GUARD: f64 = 1e-8;

fn raw_histogram<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, bins: usize) -> Vec<T> {
    let inv_tau = T::c(1.0 / histogram_tau(bins));
    let mut raw = vec![T::zero(); 3 * bins];
    for (px, &mw) in image.data().chunks(3).zip(mask.data()) {
        if mw == T::zero() {
            continue;
        }
        for ch in 0..3 {
            let v = px[ch];
            for j in 0..bins {
                let d = (v - bin_center::<T>(j, bins)) * inv_tau;
                raw[ch * bins + j] += mw / (T::one() + d * d);
            }
        }
    }
    raw
}

pub(crate) fn soft_histogram_forward<T: Real>(image: &Tensor<T>, mask: &Tensor<T>, bins: usize) -> Tensor<T> {
    let raw = raw_histogram(image, mask, bins);
    let mut out = vec![T::zero(); 3 * bins];
    for ch in 0..3 {
        let row = &raw[ch * bins..(ch + 1) * bins];
        let s: T = row.iter().copied().sum();
        for j in 0..bins {
            out[ch * bins + j] = if s > T::c(HISTOGRAM_GUARD) {
                row[j] / s
            } else {
                T::c(1.0 / bins as f64)
            };
        }
    }
    Tensor::from_parts(vec![3, bins], out)
}

pub(crate) fn soft_histogram_backward<T: Real>(
    image: &Tensor<T>,
    mask: &Tensor<T>,
    bins: usize,
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let raw = raw_histogram(image, mask, bins);
    // Gradient with respect to the unnormalized bins.
    let mut graw = vec![T::zero(); 3 * bins];
    for ch in 0..3 {
        let row = &raw[ch * bins..(ch + 1) * bins];
        let s: T = row.iter().copied().sum();
        if s <= T::c(HISTOGRAM_GUARD) {
            continue;
        }
        let o = &out.data()[ch * bins..(ch + 1) * bins];
        let gg = &g.data()[ch * bins..(ch + 1) * bins];
        let dot: T = o.iter().zip(gg).map(|(&a, &b)| a * b).sum();
        for j in 0..bins {
            graw[ch * bins + j] = (gg[j] - dot) / s;
        }
    }
    let inv_tau = T::c(1.0 / histogram_tau(bins));
    let mut di = vec![T::zero(); image.numel()];
    let mut dm = vec![T::zero(); mask.numel()];
    for (p, (px, &mw)) in image.data().chunks(3).zip(mask.data()).enumerate() {
        let mut gm = T::zero();
        for ch in 0..3 {
            let v = px[ch];
            let mut gv = T::zero();
            for j in 0..bins {
                let gr = graw[ch * bins + j];
                let d = (v - bin_center::<T>(j, bins)) * inv_tau;
                let kern = T::one() / (T::one() + d * d);
                gm += gr * kern;
                // dκ/dv = -2 d κ² / τ
                gv += gr * (-T::c(2.0) * d * kern * kern * inv_tau);
            }
            di[p * 3 + ch] = gv * mw;
        }
        dm[p] = gm;
    }
    (
        Tensor::from_parts(image.shape().to_vec(), di),
        Tensor::from_parts(mask.shape().to_vec(), dm),
    )
}

// --------------------------------------------------------------- blur + down

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub(crate) fn blur_down_shape(shape: &[usize]) -> Vec<usize> {
    vec![shape[0].div_ceil(2), shape[1].div_ceil(2), shape[2]]
}

pub(crate) fn blur_down_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let os = blur_down_shape(x.shape());
    let (ho, wo) = (os[0], os[1]);
    let k: [T; 5] = BINOMIAL5.map(T::c);
    let mut out = vec![T::zero(); ho * wo * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let o = &mut out[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (a, &ka) in k.iter().enumerate() {
                let y = clamp_index(2 * oy as isize + a as isize - 2, h);
                for (b, &kb) in k.iter().enumerate() {
                    let xx = clamp_index(2 * ox as isize + b as isize - 2, w);
                    let wgt = ka * kb;
                    let src = &x.data()[(y * w + xx) * c..(y * w + xx + 1) * c];
                    for (ov, &sv) in o.iter_mut().zip(src) {
                        *ov += wgt * sv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(os, out)
}

pub(crate) fn blur_down_backward<T: Real>(in_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (g.shape()[0], g.shape()[1]);
    let k: [T; 5] = BINOMIAL5.map(T::c);
    let mut d = vec![T::zero(); h * w * c];
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &g.data()[(oy * wo + ox) * c..(oy * wo + ox + 1) * c];
            for (a, &ka) in k.iter().enumerate() {
                let y = clamp_index(2 * oy as isize + a as isize - 2, h);
                for (b, &kb) in k.iter().enumerate() {
                    let xx = clamp_index(2 * ox as isize + b as isize - 2, w);
                    let wgt = ka * kb;
                    let dst = &mut d[(y * w + xx) * c..(y * w + xx + 1) * c];
                    for (dv, &gv) in dst.iter_mut().zip(go) {
                        *dv += wgt * gv;
                    }
                }
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bilinear_center_of_two_by_two() {
        let plane = Tensor::<f64>::from_f64([1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let coords = Tensor::<f64>::from_f64([1, 2], &[0.0, 0.0]).unwrap();
        let out = grid_sample_forward(&plane, &coords);
        // Direct bilinear formula: 0.25 * (0 + 1 + 2 + 3).
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn bilinear_corners_and_clamp() {
        let plane = Tensor::<f64>::from_f64([1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        let coords =
            Tensor::<f64>::from_f64([4, 2], &[-1.0, -1.0, 1.0, -1.0, 1.0, 1.0, -3.0, 7.0]).unwrap();
        let out = grid_sample_forward(&plane, &coords);
        assert_eq!(out.data(), &[0.0, 1.0, 3.0, 2.0]);
    }

    #[test]
    fn channel_stats_of_small_channel() {
        let x = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(channel_mean(&x).data(), &[2.5]);
        let s = channel_std(&x, 0.0).item();
        assert!((s - 1.25f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        let x = Tensor::<f64>::full([5, 7, 3], 0.3);
        let y = blur_down_forward(&x);
        assert_eq!(y.shape(), &[3, 4, 3]);
        assert!(y.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn composite_rejects_non_monotone_edges() {
        let k = CompositeConsts::<f32> {
            edges: vec![0.0, 1.0, 1.0],
            t_samples: vec![0.5, 1.0],
            t_far: vec![1.0],
            background: [0.5; 3],
        };
        assert!(k.validate(1, 2).is_err());
    }
}
