//! Reconstruction, part-histogram similarity and editing objectives.
//!
//! Each loss is built once as a graph function over [`RenderVars`]; the
//! tensor-level functions evaluate the same graph in `f64` for inspection and
//! tests.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::renderer::{RenderOutput, RenderVars};

pub const HISTOGRAM_BINS: usize = 16;
/// Added to probabilities inside the cross-entropy logarithm.
pub const CE_GUARD: f64 = 1e-8;
/// Soft-mask mass a class needs in the anchor view to get a histogram
/// weight.
pub const CLASS_PRESENCE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub ce: f64,
    pub depth: f64,
    pub sim: f64,
    /// Records per similarity batch.
    pub batch: usize,
    /// 1-based position of the anchor whose appearance the batch shares.
    pub anchor: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 15.0,
            perceptual: 15.0,
            ce: 1.0,
            depth: 5.0,
            sim: 15.0,
            batch: 3,
            anchor: 1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ls = [self.l1, self.perceptual, self.ce, self.depth, self.sim];
        if ls.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(invalid("loss weights must be finite and non-negative"));
        }
        if self.batch == 0 || self.anchor == 0 || self.anchor > self.batch {
            return Err(invalid(format!(
                "anchor {} must lie in 1..={} (batch size)",
                self.anchor, self.batch
            )));
        }
        Ok(())
    }

    pub fn reconstruction(&self, l1: f64, perceptual: f64, ce: f64, depth: f64) -> f64 {
        self.l1 * l1 + self.perceptual * perceptual + self.ce * ce + self.depth * depth
    }
}

/// Supervision for one view, laid out like the rendered pixels.
#[derive(Clone, Debug)]
pub struct ReconTarget<T: Real = f32> {
    /// `[H, W, 3]`
    pub rgb: Tensor<T>,
    /// `[P, N]`
    pub one_hot: Tensor<T>,
    /// `[P]`
    pub depth: Tensor<T>,
}

impl<T: Real> ReconTarget<T> {
    /// Gathers `pixels` of full-image buffers into a `height × width` target.
    pub fn gather(
        rgb: &[f32],
        mask: &[u8],
        depth: &[f32],
        classes: usize,
        pixels: &[usize],
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(invalid("pixel list does not match the target size"));
        }
        let n = pixels.len();
        let mut c = Vec::with_capacity(n * 3);
        let mut oh = vec![T::zero(); n * classes];
        let mut d = Vec::with_capacity(n);
        for (i, &p) in pixels.iter().enumerate() {
            c.extend((0..3).map(|k| T::c(rgb[3 * p + k] as f64)));
            let cls = mask[p] as usize;
            if cls >= classes {
                return Err(invalid(format!("mask class {cls} out of range")));
            }
            oh[i * classes + cls] = T::one();
            d.push(T::c(depth[p] as f64));
        }
        Ok(Self {
            rgb: Tensor::new([height, width, 3], c)?,
            one_hot: Tensor::new([n, classes], oh)?,
            depth: Tensor::new([n], d)?,
        })
    }
}

/// Unweighted reconstruction terms.
#[derive(Clone, Copy, Debug)]
pub struct ReconVars {
    pub l1: Var,
    pub perceptual: Var,
    pub ce: Var,
    pub depth: Var,
}

impl ReconVars {
    pub fn weighted<T: Real>(&self, g: &mut Graph<T>, w: &LossWeights) -> Result<Var> {
        let a = g.mul_scalar(self.l1, w.l1);
        let b = g.mul_scalar(self.perceptual, w.perceptual);
        let c = g.mul_scalar(self.ce, w.ce);
        let d = g.mul_scalar(self.depth, w.depth);
        let ab = g.add(a, b)?;
        let cd = g.add(c, d)?;
        g.add(ab, cd)
    }
}

fn mean_abs_diff<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// `-mean_p Σ_i target_i · log(prob_i + guard)` over `[P, N]` inputs.
pub fn cross_entropy_vars<T: Real>(g: &mut Graph<T>, target: Var, probs: Var) -> Result<Var> {
    let lp = g.add_scalar(probs, CE_GUARD);
    let lp = g.log(lp);
    let t = g.mul(target, lp)?;
    let per_pixel = g.sum_last_axis(t)?;
    let m = g.mean(per_pixel);
    Ok(g.neg(m))
}

/// Mean L1 over a three-level pyramid of `[H, W, 3]` images.
pub fn perceptual_vars<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::ShapeMismatch {
            op: "perceptual",
            lhs: g.shape(a).to_vec(),
            rhs: g.shape(b).to_vec(),
        });
    }
    // Blur and decimation are linear, so the pyramid of the difference is
    // the difference of the pyramids.
    let mut d = g.sub(a, b)?;
    let mut total = None;
    for level in 0..3 {
        if level > 0 {
            d = g.blur_down(d)?;
        }
        let ad = g.abs(d);
        let m = g.mean(ad);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(g.mul_scalar(total.unwrap(), 1.0 / 3.0))
}

pub fn reconstruction_vars<T: Real>(g: &mut Graph<T>, pred: &RenderVars, target: &ReconTarget<T>) -> Result<ReconVars> {
    let p = pred.pixels();
    if target.rgb.shape() != [pred.height, pred.width, 3] || target.depth.shape() != [p] {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: vec![pred.height, pred.width],
            rhs: target.rgb.shape().to_vec(),
        });
    }
    if target.one_hot.shape() != g.shape(pred.sem) {
        return Err(Error::ShapeMismatch {
            op: "reconstruction_loss",
            lhs: g.shape(pred.sem).to_vec(),
            rhs: target.one_hot.shape().to_vec(),
        });
    }
    let rgb = g.constant(target.rgb.clone());
    let oh = g.constant(target.one_hot.clone());
    let depth = g.constant(target.depth.clone());
    Ok(ReconVars {
        l1: mean_abs_diff(g, pred.rgb, rgb)?,
        perceptual: perceptual_vars(g, pred.rgb, rgb)?,
        ce: cross_entropy_vars(g, oh, pred.sem)?,
        depth: mean_abs_diff(g, pred.depth, depth)?,
    })
}

/// Normalized `[3, K]` histogram of `rgb` (`[H, W, 3]` or `[P, 3]`) weighted
/// by `mask` (`[P]`).
pub fn histogram_vars<T: Real>(g: &mut Graph<T>, rgb: Var, mask: Var) -> Result<Var> {
    let n = g.shape(rgb).iter().product::<usize>() / 3;
    let flat = g.reshape(rgb, [n, 3])?;
    g.soft_histogram(flat, mask, HISTOGRAM_BINS)
}

/// Mean over channel rows of `‖√a − √b‖ / √2`.
pub fn hellinger_vars<T: Real>(g: &mut Graph<T>, a: Var, b: Var) -> Result<Var> {
    let sa = g.sqrt(a);
    let sb = g.sqrt(b);
    let d = g.sub(sa, sb)?;
    let d2 = g.square(d);
    let rows = g.sum_last_axis(d2)?;
    let norms = g.sqrt(rows);
    let m = g.mean(norms);
    Ok(g.mul_scalar(m, std::f64::consts::FRAC_1_SQRT_2))
}

/// Uniform weights over classes whose soft mass in the anchor's `[P, N]`
/// probabilities reaches [`CLASS_PRESENCE`]; uniform over all classes if
/// none does.
pub fn class_weights<T: Real>(anchor_probs: &Tensor<T>) -> Vec<f64> {
    let n = *anchor_probs.shape().last().unwrap();
    let mut mass = vec![0.0; n];
    for row in anchor_probs.data().chunks(n) {
        for (m, v) in mass.iter_mut().zip(row) {
            *m += v.as_f64();
        }
    }
    let present: Vec<bool> = mass.iter().map(|&m| m >= CLASS_PRESENCE).collect();
    let count = present.iter().filter(|&&p| p).count();
    if count == 0 {
        return vec![1.0 / n as f64; n];
    }
    present.iter().map(|&p| if p { 1.0 / count as f64 } else { 0.0 }).collect()
}

/// Which masks gate the similarity histograms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistogramMode {
    #[default]
    PerLabel,
    WholeImage,
}

/// `λ5 · Σ_i w_i Σ_{j≠k} L_h(H(rgb_j ⊙ M_i^j), H(rgb_k ⊙ M_i^k))` over a
/// batch rendered with the anchor's appearance. `anchor` is 0-based here.
pub fn part_histogram_vars<T: Real>(
    g: &mut Graph<T>,
    batch: &[RenderVars],
    anchor: usize,
    class_weights: &[f64],
    mode: HistogramMode,
    lambda: f64,
) -> Result<Var> {
    if batch.len() < 2 {
        return Err(invalid("part histogram loss needs a batch of at least two renders"));
    }
    if anchor >= batch.len() {
        return Err(invalid("anchor index outside the batch"));
    }
    let mut total: Option<Var> = None;
    let mut push = |g: &mut Graph<T>, v: Var| -> Result<()> {
        total = Some(match total {
            None => v,
            Some(t) => g.add(t, v)?,
        });
        Ok(())
    };
    match mode {
        HistogramMode::WholeImage => {
            let hk = {
                let ones = g.constant(Tensor::ones([batch[anchor].pixels()]));
                histogram_vars(g, batch[anchor].rgb, ones)?
            };
            for (j, r) in batch.iter().enumerate() {
                if j == anchor {
                    continue;
                }
                let ones = g.constant(Tensor::ones([r.pixels()]));
                let hj = histogram_vars(g, r.rgb, ones)?;
                let d = hellinger_vars(g, hj, hk)?;
                push(g, d)?;
            }
        }
        HistogramMode::PerLabel => {
            let classes = g.shape(batch[anchor].sem)[1];
            if class_weights.len() != classes {
                return Err(invalid("one class weight per class expected"));
            }
            let mask_of = |g: &mut Graph<T>, r: &RenderVars, i: usize| -> Result<Var> {
                let col = g.select_columns(r.sem, &[i])?;
                g.reshape(col, [r.pixels()])
            };
            for (i, &w) in class_weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                let mk = mask_of(g, &batch[anchor], i)?;
                let hk = histogram_vars(g, batch[anchor].rgb, mk)?;
                for (j, r) in batch.iter().enumerate() {
                    if j == anchor {
                        continue;
                    }
                    let mj = mask_of(g, r, i)?;
                    let hj = histogram_vars(g, r.rgb, mj)?;
                    let d = hellinger_vars(g, hj, hk)?;
                    let d = g.mul_scalar(d, w);
                    push(g, d)?;
                }
            }
        }
    }
    let t = match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    };
    Ok(g.mul_scalar(t, lambda))
}

/// Editing objective: perceptual + MSE outside the region `r`, plus
/// cross-entropy against the target mask everywhere.
///
/// `keep` is `1 − r` broadcast to `[H, W, 3]`.
pub fn editing_vars<T: Real>(
    g: &mut Graph<T>,
    edited: &RenderVars,
    original_rgb: &Tensor<T>,
    target_one_hot: &Tensor<T>,
    keep: &Tensor<T>,
) -> Result<Var> {
    let shape = [edited.height, edited.width, 3];
    if original_rgb.shape() != shape || keep.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "editing_loss",
            lhs: shape.to_vec(),
            rhs: original_rgb.shape().to_vec(),
        });
    }
    let masked: Vec<T> = original_rgb.data().iter().zip(keep.data()).map(|(&a, &b)| a * b).collect();
    let orig = g.constant(Tensor::new(shape, masked)?);
    let keep = g.constant(keep.clone());
    let e = g.mul(edited.rgb, keep)?;
    let perc = perceptual_vars(g, e, orig)?;
    let d = g.sub(e, orig)?;
    let d2 = g.square(d);
    let mse = g.mean(d2);
    let oh = g.constant(target_one_hot.clone());
    let ce = cross_entropy_vars(g, oh, edited.sem)?;
    let s = g.add(perc, mse)?;
    g.add(s, ce)
}

// ------------------------------------------------------------ tensor level

/// A normalized `[3, K]` histogram and the mask mass behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct HistogramFeature {
    pub bins: Tensor<f64>,
    pub total_weight: f64,
}

impl HistogramFeature {
    pub fn row(&self, channel: usize) -> &[f64] {
        let k = self.bins.shape()[1];
        &self.bins.data()[channel * k..(channel + 1) * k]
    }
}

/// Histogram of `P × 3` pixel values weighted by `mask` (`P`).
pub fn soft_histogram(rgb: &[f32], mask: &[f32]) -> Result<HistogramFeature> {
    if rgb.len() != 3 * mask.len() || mask.is_empty() {
        return Err(invalid("soft_histogram needs 3 color values per mask weight"));
    }
    if mask.iter().any(|&m| !(m >= 0.0)) {
        return Err(invalid("mask weights must be non-negative"));
    }
    let mut g = Graph::<f64>::new();
    let img = g.constant(Tensor::from_f64([mask.len(), 3], &rgb.iter().map(|&v| v as f64).collect::<Vec<_>>())?);
    let m = g.constant(Tensor::from_f64([mask.len()], &mask.iter().map(|&v| v as f64).collect::<Vec<_>>())?);
    let h = g.soft_histogram(img, m, HISTOGRAM_BINS)?;
    Ok(HistogramFeature {
        bins: g.value(h).clone(),
        total_weight: mask.iter().map(|&v| v as f64).sum(),
    })
}

pub fn hellinger_distance(a: &HistogramFeature, b: &HistogramFeature) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(a.bins.clone());
    let y = g.constant(b.bins.clone());
    let d = hellinger_vars(&mut g, x, y)?;
    Ok(g.value(d).item())
}

fn image_tensor(o: &RenderOutput) -> Result<Tensor<f64>> {
    Tensor::new([o.height, o.width, 3], o.rgb.iter().map(|&v| v as f64).collect())
}

/// Pyramid L1 between two `H × W × 3` images.
pub fn perceptual_substitute(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let x = g.constant(a.cast());
    let y = g.constant(b.cast());
    let p = perceptual_vars(&mut g, x, y)?;
    Ok(g.value(p).item())
}

/// Reconstruction terms of one rendered view.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReconBreakdown {
    pub l1: f64,
    pub perceptual: f64,
    pub ce: f64,
    pub depth: f64,
    pub total: f64,
}

/// Places a [`RenderOutput`] into a fresh graph as constants.
pub fn render_constants<T: Real>(g: &mut Graph<T>, o: &RenderOutput) -> Result<RenderVars> {
    let p = o.pixels();
    let cast = |v: &[f32]| v.iter().map(|&x| T::c(x as f64)).collect::<Vec<T>>();
    let rgb = g.constant(Tensor::new([o.height, o.width, 3], cast(&o.rgb))?);
    let depth = g.constant(Tensor::new([p], cast(&o.depth))?);
    let sem = g.constant(Tensor::new([p, o.classes], cast(&o.sem_probs))?);
    let alpha = g.constant(Tensor::new([p], cast(&o.alpha))?);
    Ok(RenderVars {
        height: o.height,
        width: o.width,
        rgb,
        depth,
        sem,
        alpha,
    })
}

/// Scores a render against full-resolution ground truth.
pub fn reconstruction_loss(
    pred: &RenderOutput,
    rgb: &[f32],
    mask: &[u8],
    depth: &[f32],
    weights: &LossWeights,
) -> Result<ReconBreakdown> {
    let p = pred.pixels();
    if rgb.len() != 3 * p || mask.len() != p || depth.len() != p {
        return Err(invalid(format!(
            "ground truth does not match the {}x{} render",
            pred.height, pred.width
        )));
    }
    let mut g = Graph::<f64>::new();
    let pv = render_constants(&mut g, pred)?;
    let all: Vec<usize> = (0..p).collect();
    let target = ReconTarget::gather(rgb, mask, depth, pred.classes, &all, pred.height, pred.width)?;
    let r = reconstruction_vars(&mut g, &pv, &target)?;
    let (l1, perceptual, ce, d) = (
        g.value(r.l1).item(),
        g.value(r.perceptual).item(),
        g.value(r.ce).item(),
        g.value(r.depth).item(),
    );
    Ok(ReconBreakdown {
        l1,
        perceptual,
        ce,
        depth: d,
        total: weights.reconstruction(l1, perceptual, ce, d),
    })
}

/// Similarity loss over rendered outputs; `weights.anchor` picks the anchor.
pub fn part_histogram_loss(batch: &[RenderOutput], weights: &LossWeights, mode: HistogramMode) -> Result<f64> {
    if batch.len() < 2 {
        return Err(invalid("part histogram loss needs a batch of at least two renders"));
    }
    let k = weights.anchor.checked_sub(1).filter(|&k| k < batch.len());
    let k = k.ok_or_else(|| invalid("anchor index outside the batch"))?;
    let mut g = Graph::<f64>::new();
    let vars = batch
        .iter()
        .map(|o| render_constants(&mut g, o))
        .collect::<Result<Vec<_>>>()?;
    let anchor_probs = g.value(vars[k].sem).clone();
    let cw = class_weights(&anchor_probs);
    let l = part_histogram_vars(&mut g, &vars, k, &cw, mode, weights.sim)?;
    Ok(g.value(l).item())
}

/// `1 − r` as an `[H, W, 3]` tensor.
pub fn keep_mask<T: Real>(region: &[bool], height: usize, width: usize) -> Result<Tensor<T>> {
    if region.len() != height * width {
        return Err(invalid("region does not match the image size"));
    }
    let data = region
        .iter()
        .flat_map(|&r| [if r { T::zero() } else { T::one() }; 3])
        .collect();
    Tensor::new([height, width, 3], data)
}

pub fn one_hot<T: Real>(mask: &[u8], classes: usize) -> Result<Tensor<T>> {
    let mut data = vec![T::zero(); mask.len() * classes];
    for (i, &c) in mask.iter().enumerate() {
        if c as usize >= classes {
            return Err(invalid(format!("mask class {c} out of range")));
        }
        data[i * classes + c as usize] = T::one();
    }
    Tensor::new([mask.len(), classes], data)
}

pub fn editing_loss(edited: &RenderOutput, original: &RenderOutput, target_mask: &[u8], region: &[bool]) -> Result<f64> {
    if (edited.width, edited.height) != (original.width, original.height) {
        return Err(invalid("edited and original renders differ in size"));
    }
    let mut g = Graph::<f64>::new();
    let ev = render_constants(&mut g, edited)?;
    let keep = keep_mask(region, edited.height, edited.width)?;
    let oh = one_hot(target_mask, edited.classes)?;
    let l = editing_vars(&mut g, &ev, &image_tensor(original)?, &oh, &keep)?;
    Ok(g.value(l).item())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn render(w: usize, h: usize, rgb: Vec<f32>, sem: Vec<f32>, classes: usize) -> RenderOutput {
        RenderOutput {
            width: w,
            height: h,
            classes,
            rgb,
            depth: vec![2.0; w * h],
            sem_probs: sem,
            alpha: vec![1.0; w * h],
        }
    }

    fn one_hot_probs(mask: &[u8], n: usize) -> Vec<f32> {
        one_hot::<f32>(mask, n).unwrap().into_data()
    }

    #[test]
    fn perfect_reconstruction_is_near_zero() {
        let mask = vec![1u8, 2, 0, 5];
        let rgb = vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.3, 0.3, 0.3];
        let r = render(2, 2, rgb.clone(), one_hot_probs(&mask, 6), 6);
        let b = reconstruction_loss(&r, &rgb, &mask, &r.depth.clone(), &LossWeights::default()).unwrap();
        assert!(b.total < 1e-6, "{b:?}");
    }

    #[test]
    fn unit_terms_total_thirty_six() {
        assert_eq!(LossWeights::default().reconstruction(1.0, 1.0, 1.0, 1.0), 36.0);
    }

    #[test]
    fn uniform_probs_give_ln_n() {
        let mask = vec![3u8; 4];
        let r = render(2, 2, vec![0.5; 12], vec![1.0 / 6.0; 24], 6);
        let b = reconstruction_loss(&r, &r.rgb.clone(), &mask, &r.depth.clone(), &LossWeights::default()).unwrap();
        assert!((b.ce - 6f64.ln()).abs() < 1e-6, "{}", b.ce);
    }

    #[test]
    fn perceptual_constant_offset() {
        let a = Tensor::full([8, 8, 3], 0.2f32);
        let b = Tensor::full([8, 8, 3], 0.45f32);
        assert!((perceptual_substitute(&a, &b).unwrap() - 0.25).abs() < 1e-6);
        assert_eq!(perceptual_substitute(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn empty_mask_histogram_is_uniform() {
        let h = soft_histogram(&[0.3; 12], &[0.0; 4]).unwrap();
        assert_eq!(h.total_weight, 0.0);
        for c in 0..3 {
            for &v in h.row(c) {
                assert!((v - 1.0 / 16.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn histogram_peaks_at_the_value_bin() {
        let center = (5.0 + 0.5) / 16.0;
        let h = soft_histogram(&[center as f32; 30], &[1.0; 10]).unwrap();
        // Oracle: κ at integer bin offsets j − 5, normalized.
        let kappa: Vec<f64> = (0..16).map(|j| 1.0 / (1.0 + ((j as f64 - 5.0) as f64).powi(2))).collect();
        let s: f64 = kappa.iter().sum();
        for c in 0..3 {
            let row = h.row(c);
            for j in 0..16 {
                assert!((row[j] - kappa[j] / s).abs() < 1e-6);
            }
            let best = (0..16).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
            assert_eq!(best, 5);
        }
    }

    #[test]
    fn histogram_is_mask_scale_invariant() {
        let rgb: Vec<f32> = (0..30).map(|i| (i as f32 * 0.037) % 1.0).collect();
        let m: Vec<f32> = (0..10).map(|i| 0.1 * i as f32).collect();
        let m2: Vec<f32> = m.iter().map(|v| 2.0 * v).collect();
        let a = soft_histogram(&rgb, &m).unwrap();
        let b = soft_histogram(&rgb, &m2).unwrap();
        assert!(a.bins.max_abs_diff(&b.bins) < 1e-12);
        assert!((b.total_weight - 2.0 * a.total_weight).abs() < 1e-5);
    }

    fn feature(rows: [&[f64]; 3]) -> HistogramFeature {
        let k = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        HistogramFeature {
            bins: Tensor::new([3, k], data).unwrap(),
            total_weight: 1.0,
        }
    }

    #[test]
    fn hellinger_examples() {
        let a = feature([&[1.0, 0.0]; 3]);
        let b = feature([&[0.0, 1.0]; 3]);
        assert_eq!(hellinger_distance(&a, &a).unwrap(), 0.0);
        assert!((hellinger_distance(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c = feature([&[0.5, 0.5]; 3]);
        let expect = std::f64::consts::FRAC_1_SQRT_2 * ((0.5f64.sqrt() - 1.0).powi(2) + 0.5).sqrt();
        assert!((hellinger_distance(&c, &a).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.5412).abs() < 1e-4);
    }

    #[test]
    fn identical_batch_has_zero_similarity_loss() {
        let mask = vec![1u8, 2, 2, 0];
        let r = render(2, 2, (0..12).map(|i| i as f32 / 12.0).collect(), one_hot_probs(&mask, 6), 6);
        let l = part_histogram_loss(&[r.clone(), r.clone(), r], &LossWeights::default(), HistogramMode::PerLabel).unwrap();
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let r = render(1, 1, vec![0.0; 3], one_hot_probs(&[0], 6), 6);
        assert!(part_histogram_loss(&[r], &LossWeights::default(), HistogramMode::PerLabel).is_err());
    }

    #[test]
    fn single_class_half_distance_scales_by_lambda() {
        // The λ5 scaling: one weighted class, one non-anchor pair with a
        // known distance d gives λ5·d.
        let mut g = Graph::<f64>::new();
        let mk = |g: &mut Graph<f64>, v: f32| {
            render_constants(g, &render(1, 2, vec![v; 6], one_hot_probs(&[1, 1], 6), 6)).unwrap()
        };
        let a = mk(&mut g, 0.2);
        let b = mk(&mut g, 0.8);
        let mut w = vec![0.0; 6];
        w[1] = 1.0;
        let l = part_histogram_vars(&mut g, &[a, b], 0, &w, HistogramMode::PerLabel, 15.0).unwrap();
        let l = g.value(l).item();
        let ha = soft_histogram(&[0.2; 6], &[1.0; 2]).unwrap();
        let hb = soft_histogram(&[0.8; 6], &[1.0; 2]).unwrap();
        let d = hellinger_distance(&hb, &ha).unwrap();
        assert!((l - 15.0 * d).abs() < 1e-9);
        assert!(d > 0.0);
    }

    #[test]
    fn class_weights_cover_present_classes() {
        let probs = one_hot::<f64>(&[1, 1, 2, 2, 0, 0], 6).unwrap();
        let w = class_weights(&probs);
        assert_eq!(w, vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0]);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn editing_loss_examples() {
        let mask = vec![1u8, 2, 3, 0];
        let probs = one_hot_probs(&mask, 6);
        let a = render(2, 2, vec![0.4; 12], probs.clone(), 6);
        assert!(editing_loss(&a, &a, &mask, &[false; 4]).unwrap() < 1e-4);

        let b = render(2, 2, vec![0.5; 12], probs.clone(), 6);
        let l = editing_loss(&b, &a, &mask, &[false; 4]).unwrap();
        // Perceptual term is 0.1, MSE is 0.01, CE ≈ 0.
        assert!((l - 0.11).abs() < 1e-6, "{l}");

        let l_all = editing_loss(&b, &a, &[0, 0, 0, 0], &[true; 4]).unwrap();
        let ce_only = -(1e-8f64).ln() * 3.0 / 4.0;
        assert!((l_all - ce_only).abs() < 1e-3, "{l_all} vs {ce_only}");
    }
}
