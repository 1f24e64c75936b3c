//! Mask-guided editing: optimize an offset `δw` on a latent so its rendered
//! semantic mask follows a painted target, with the networks and the
//! original appearance statistics held fixed. Also appearance transfer
//! between latents.

use crate::autodiff::{Graph, Tensor};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::losses;
use crate::netmodels::{LatentEntry, Model, Provenance};
use crate::renderer::{self, Camera, RayBatch, RenderOutput, RenderSettings, RenderVars};
use crate::scenes::HAIR;
use crate::training::{adam_step, AdamConfig, AdamState};
use crate::triplane::{AppearanceStats, StatsVars};

pub const DEFAULT_DILATION: usize = 5;
pub const DEFAULT_EDIT_STEPS: usize = 200;
pub const DEFAULT_EDIT_LR: f64 = 0.02;

fn offset(w: &Tensor, delta: &Tensor) -> Result<Tensor> {
    if w.shape() != delta.shape() {
        return Err(Error::ShapeMismatch {
            op: "latent offset",
            lhs: w.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    Tensor::new(w.shape().to_vec(), w.data().iter().zip(delta.data()).map(|(a, b)| a + b).collect())
}

/// Pixels where the masks differ, dilated by a `(2d+1)²` square.
pub fn compute_region(original: &[u8], edited: &[u8], width: usize, height: usize, dilation: usize) -> Result<Vec<bool>> {
    if original.len() != width * height || edited.len() != original.len() {
        return Err(invalid("masks must both be width x height"));
    }
    let mut region = vec![false; original.len()];
    for (i, (a, b)) in original.iter().zip(edited).enumerate() {
        if a == b {
            continue;
        }
        let (r, c) = (i / width, i % width);
        for rr in r.saturating_sub(dilation)..=(r + dilation).min(height - 1) {
            let row = &mut region[rr * width..(rr + 1) * width];
            row[c.saturating_sub(dilation)..=(c + dilation).min(width - 1)].fill(true);
        }
    }
    Ok(region)
}

/// A painted target for one latent seen from one camera.
#[derive(Clone, Debug)]
pub struct EditRequest {
    pub latent_id: String,
    pub camera: Camera,
    /// `H·W` class ids.
    pub edited_mask: Vec<u8>,
    pub steps: usize,
    pub lr: f64,
    pub dilation: usize,
    pub region_override: Option<Vec<bool>>,
}

impl EditRequest {
    pub fn new(latent_id: impl Into<String>, camera: Camera, edited_mask: Vec<u8>) -> Self {
        Self {
            latent_id: latent_id.into(),
            camera,
            edited_mask,
            steps: DEFAULT_EDIT_STEPS,
            lr: DEFAULT_EDIT_LR,
            dilation: DEFAULT_DILATION,
            region_override: None,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        self.camera.validate()?;
        let p = self.camera.pixels();
        if self.edited_mask.len() != p {
            return Err(invalid(format!(
                "edited mask has {} pixels, camera has {p}",
                self.edited_mask.len()
            )));
        }
        if let Some(&c) = self.edited_mask.iter().find(|&&c| c as usize >= classes) {
            return Err(invalid(format!("edited mask class {c} is not below {classes}")));
        }
        if self.steps == 0 {
            return Err(invalid("edit needs at least one step"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("edit learning rate must be positive"));
        }
        if let Some(r) = &self.region_override {
            if r.len() != p {
                return Err(invalid("region override does not match the camera"));
            }
        }
        Ok(())
    }
}

/// One optimization step, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EditStep {
    pub step: usize,
    pub loss: f64,
    pub ce: f64,
    /// Mean absolute RGB change against the original render outside the
    /// region.
    pub outside_change: f64,
}

#[derive(Clone, Debug)]
pub struct EditTrace {
    pub steps: Vec<EditStep>,
    pub delta: Tensor,
    pub region: Vec<bool>,
    pub before: RenderOutput,
    pub after: RenderOutput,
}

impl EditTrace {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["step", "loss", "ce", "outside_change"])?;
        for s in &self.steps {
            w.write_record([
                s.step.to_string(),
                s.loss.to_string(),
                s.ce.to_string(),
                s.outside_change.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Mean absolute RGB difference over pixels outside `region`; 0 when the
/// region covers everything.
pub fn outside_change(a: &RenderOutput, b: &RenderOutput, region: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, &inside) in region.iter().enumerate() {
        if inside {
            continue;
        }
        for k in 0..3 {
            sum += (a.rgb[3 * i + k] - b.rgb[3 * i + k]).abs() as f64;
        }
        n += 3;
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Optimizes `δw` for geometry latent `w` with appearance frozen at `stats`.
/// `progress` sees each step and the render it was measured on.
#[allow(clippy::too_many_arguments)]
pub fn optimize_latent_edit(
    model: &Model,
    w: &Tensor,
    stats: &AppearanceStats,
    camera: &Camera,
    edited_mask: &[u8],
    region_override: Option<&[bool]>,
    steps: usize,
    lr: f64,
    dilation: usize,
    settings: &RenderSettings,
    mut progress: impl FnMut(&EditStep, &RenderOutput),
) -> Result<EditTrace> {
    let classes = model.config.classes;
    let (h, wd) = (camera.height, camera.width);
    let before = renderer::render_image(model, w, stats, camera, settings)?;
    let region = match region_override {
        Some(r) => r.to_vec(),
        None => compute_region(&before.argmax_mask(), edited_mask, wd, h, dilation)?,
    };
    let keep = losses::keep_mask::<f32>(&region, h, wd)?;
    let target = losses::one_hot::<f32>(edited_mask, classes)?;
    let original_rgb = Tensor::new([h, wd, 3], before.rgb.clone())?;
    let pixels: Vec<usize> = (0..camera.pixels()).collect();
    let batch = RayBatch::<f32>::new(camera, &pixels, settings)?;

    let mut delta = Tensor::zeros([model.config.latent_dim]);
    let mut adam = AdamState::new(
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        },
        [&delta],
    );
    let mut trace = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut g = Graph::<f32>::new();
        let bm = model.bind(&mut g, false);
        let base = g.constant(w.clone());
        let dv = g.leaf(delta.clone());
        let wv = g.add(base, dv)?;
        let field = bm.latent_field(&mut g, wv)?;
        let frozen = StatsVars::constant(&mut g, stats);
        let pts = g.constant(batch.points.clone());
        let geo = renderer::geometry_for_batch(&mut g, &bm, &field.normalized, &batch, pts)?;
        let color = renderer::color_for_batch(&mut g, &bm, &field.normalized, &frozen, &batch, pts)?;
        let out = renderer::composite_batch(&mut g, &geo, color, &batch)?;
        let rv = RenderVars::from_composite(&mut g, out, h, wd, classes)?;
        let tv = g.constant(target.clone());
        let ce = losses::cross_entropy_vars(&mut g, tv, rv.sem)?;
        let loss = losses::editing_vars(&mut g, &rv, &original_rgb, &target, &keep)?;

        let current = RenderOutput::from_rows(g.value(out).data(), wd, h, classes)?;
        let rec = EditStep {
            step,
            loss: g.value(loss).item() as f64,
            ce: g.value(ce).item() as f64,
            outside_change: outside_change(&current, &before, &region),
        };
        if !rec.loss.is_finite() {
            return Err(Error::NonFinite(format!("editing loss at step {step}")));
        }
        progress(&rec, &current);
        trace.push(rec);

        let mut grads = g.backward(loss)?;
        let gd = grads.take(dv);
        adam_step(&mut [&mut delta], &[&gd], &mut adam)?;
    }
    let edited_w = offset(w, &delta)?;
    let after = renderer::render_image(model, &edited_w, stats, camera, settings)?;
    Ok(EditTrace {
        steps: trace,
        delta,
        region,
        before,
        after,
    })
}

/// Runs `request` against a checkpoint. The checkpoint is not modified; the
/// caller decides whether to keep the result.
pub fn optimize_edit(
    ckpt: &Checkpoint,
    request: &EditRequest,
    progress: impl FnMut(&EditStep, &RenderOutput),
) -> Result<EditTrace> {
    request.validate(ckpt.model.config.classes)?;
    let w = &ckpt.latents.get(&request.latent_id)?.w;
    let stats = ckpt.model.appearance_of(w)?;
    optimize_latent_edit(
        &ckpt.model,
        w,
        &stats,
        &request.camera,
        &request.edited_mask,
        request.region_override.as_deref(),
        request.steps,
        request.lr,
        request.dilation,
        &ckpt.render_settings(),
        progress,
    )
}

/// Folds edits over one latent: each starts where the last ended, and all
/// keep the original latent's appearance statistics. Returns the final
/// latent (unchanged for an empty list) and one trace per request.
pub fn edit_sequence(ckpt: &Checkpoint, latent_id: &str, requests: &[EditRequest]) -> Result<(Tensor, Vec<EditTrace>)> {
    if let Some(r) = requests.iter().find(|r| r.latent_id != latent_id) {
        return Err(invalid(format!("edit targets '{}' inside a sequence on '{latent_id}'", r.latent_id)));
    }
    let mut w = ckpt.latents.get(latent_id)?.w.clone();
    let stats = ckpt.model.appearance_of(&w)?;
    let settings = ckpt.render_settings();
    let mut traces = Vec::with_capacity(requests.len());
    for r in requests {
        r.validate(ckpt.model.config.classes)?;
        let t = optimize_latent_edit(
            &ckpt.model,
            &w,
            &stats,
            &r.camera,
            &r.edited_mask,
            r.region_override.as_deref(),
            r.steps,
            r.lr,
            r.dilation,
            &settings,
            |_, _| {},
        )?;
        w = offset(&w, &t.delta)?;
        traces.push(t);
    }
    Ok((w, traces))
}

/// Appends `base + delta` to the checkpoint's latent table as an edited
/// latent and returns its id.
pub fn commit_edit(ckpt: &mut Checkpoint, base_id: &str, delta: &Tensor) -> Result<String> {
    let w = offset(&ckpt.latents.get(base_id)?.w, delta)?;
    let id = ckpt.latents.fresh_id(&format!("{base_id}_edit"));
    ckpt.latents.insert(LatentEntry {
        id: id.clone(),
        w,
        provenance: Provenance::Edited,
    })?;
    Ok(id)
}

/// Renders `geo_id`'s geometry with the appearance statistics of `app_id`.
pub fn apply_appearance(ckpt: &Checkpoint, geo_id: &str, app_id: &str, camera: &Camera) -> Result<RenderOutput> {
    let w_geo = &ckpt.latents.get(geo_id)?.w;
    let w_app = &ckpt.latents.get(app_id)?.w;
    let stats = ckpt.model.appearance_of(w_app)?;
    renderer::render_image(&ckpt.model, w_geo, &stats, camera, &ckpt.render_settings())
}

/// Plain render of one latent with its own appearance.
pub fn render_latent(ckpt: &Checkpoint, id: &str, camera: &Camera) -> Result<RenderOutput> {
    apply_appearance(ckpt, id, id, camera)
}

/// Mean rendered color of each class under `mask`; `None` for classes with
/// no pixels.
pub fn class_mean_colors(render: &RenderOutput, mask: &[u8]) -> Vec<Option<[f64; 3]>> {
    let mut sums = vec![([0.0f64; 3], 0usize); render.classes];
    for (i, &c) in mask.iter().enumerate() {
        let (s, n) = &mut sums[c as usize];
        for k in 0..3 {
            s[k] += render.rgb[3 * i + k] as f64;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(s, n)| (n > 0).then(|| s.map(|v| v / n as f64)))
        .collect()
}

/// Mean Euclidean distance between per-class mean colors over the
/// foreground classes present in both, or `None` if there are none.
pub fn class_color_distance(a: &[Option<[f64; 3]>], b: &[Option<[f64; 3]>]) -> Option<f64> {
    let d: Vec<f64> = a
        .iter()
        .zip(b)
        .skip(1)
        .filter_map(|(x, y)| {
            let (x, y) = ((*x)?, (*y)?);
            Some(x.iter().zip(&y).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        })
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Paints `grow` into `mask` as hair wherever `grow` says hair and
/// `reference` does not: a hand-style edit that only adds hair.
pub fn paint_hair(mask: &[u8], reference: &[u8], grow: &[u8]) -> Vec<u8> {
    mask.iter()
        .zip(reference)
        .zip(grow)
        .map(|((&m, &r), &g)| if g == HAIR && r != HAIR { HAIR } else { m })
        .collect()
}
