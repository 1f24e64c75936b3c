//! Adam, the two-phase training step, dataset fitting and loss logs.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{invalid, Error, Result};
use crate::losses::{self, HistogramMode, LossWeights, ReconTarget};
use crate::netmodels::{DecoderMode, LatentEntry, LatentField, LatentTable, Model, ModelConfig, Provenance};
use crate::renderer::{self, RayBatch, RenderSettings, RenderVars};
use crate::scenes::{ClassTable, Dataset, Record};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 0.002,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// Moments for a list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new<'a>(config: AdamConfig, params: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
        Self {
            config,
            v: m.clone(),
            m,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(invalid(format!(
            "adam_step: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
    }
    state.t += 1;
    let c = state.config;
    let bc1 = 1.0 - c.beta1.powi(state.t as i32);
    let bc2 = 1.0 - c.beta2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            let gj = gj as f64;
            let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
            let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
            m[j] = mj as f32;
            v[j] = vj as f32;
            let step = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Records per step (B).
    pub batch: usize,
    /// 1-based anchor (k) whose appearance the batch is re-rendered with.
    pub anchor: usize,
    /// Ground-truth resolution; must match the dataset.
    pub resolution: usize,
    pub samples_per_ray: usize,
    /// Each step renders every `pixel_stride`-th row and column from a
    /// random offset.
    pub pixel_stride: usize,
    pub stratified: bool,
    pub seed: u64,
    pub weights: LossWeights,
    pub histogram: HistogramMode,
    pub sim_loss: bool,
    /// Fraction of `iterations` over which the similarity weight ramps
    /// linearly from 0 to its full value; 0 applies it fully from step 0.
    #[serde(default)]
    pub sim_warmup: f64,
    pub model: ModelConfig,
    pub adam: AdamConfig,
    pub latent_init_std: f64,
    pub background: [f32; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 300,
            batch: 3,
            anchor: 1,
            resolution: 64,
            samples_per_ray: 48,
            pixel_stride: 2,
            stratified: true,
            seed: 0,
            weights: LossWeights::default(),
            histogram: HistogramMode::PerLabel,
            sim_loss: true,
            sim_warmup: 1.0,
            model: ModelConfig::default(),
            adam: AdamConfig::default(),
            latent_init_std: 1.0,
            background: [0.5; 3],
        }
    }
}

impl TrainConfig {
    /// Fraction of the similarity weight applied at `step`.
    pub fn sim_ramp(&self, step: usize) -> f64 {
        let span = self.sim_warmup * self.iterations as f64;
        if span <= 0.0 {
            1.0
        } else {
            ((step + 1) as f64 / span).min(1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let w = LossWeights {
            batch: self.batch,
            anchor: self.anchor,
            ..self.weights
        };
        w.validate()?;
        if self.sim_loss && self.batch < 2 {
            return Err(invalid("the similarity loss needs a batch of at least 2"));
        }
        if self.samples_per_ray < 2 || self.pixel_stride == 0 || self.resolution == 0 {
            return Err(invalid("samples_per_ray >= 2, pixel_stride >= 1 and resolution >= 1 required"));
        }
        if !(0.0..=1.0).contains(&self.sim_warmup) {
            return Err(invalid("sim_warmup must lie in [0, 1]"));
        }
        if self.pixel_stride > self.resolution {
            return Err(invalid("pixel_stride exceeds the resolution"));
        }
        if !(self.latent_init_std >= 0.0) || !(self.adam.lr > 0.0) {
            return Err(invalid("latent_init_std must be >= 0 and lr > 0"));
        }
        Ok(())
    }

    pub fn with_decoder(mut self, decoder: DecoderMode) -> Self {
        self.model.decoder = decoder;
        self
    }
}

/// Losses of one step; `l1`..`sim` are unweighted means, `total` is the
/// weighted objective at full similarity weight. During the similarity
/// warm-up the minimized surrogate weights `sim` lower than `total` does.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub l1: f64,
    pub perc: f64,
    pub ce: f64,
    pub depth: f64,
    pub sim: f64,
    pub total: f64,
}

impl LossRow {
    pub fn is_finite(&self) -> bool {
        [self.l1, self.perc, self.ce, self.depth, self.sim, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn write_loss_csv(path: &Path, rows: &[LossRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_loss_csv(path: &Path) -> Result<Vec<LossRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Per-step randomness: pixel sub-grid offset and jitter seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepSample {
    pub offset: (usize, usize),
    pub jitter_seed: u64,
}

/// What a step measured, beyond the loss row.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub row: LossRow,
    /// Depth of each record rendered with its own appearance.
    pub own_depth: Vec<Vec<f32>>,
    /// Depth of each record rendered with the anchor's appearance (empty when
    /// the similarity loss is off).
    pub swapped_depth: Vec<Vec<f32>>,
}

/// Parameters, latents and optimizer state of a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub latents: LatentTable,
    model_adam: AdamState,
    latent_adam: Vec<AdamState>,
    step: usize,
}

fn latent_id(scene: usize) -> String {
    format!("scene_{scene}")
}

impl Trainer {
    /// Fresh model and one latent per scene, all drawn from `config.seed`.
    pub fn new(config: TrainConfig, scenes: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::init(config.model.clone(), &mut rng)?;
        let normal = Normal::new(0.0, config.latent_init_std.max(f64::MIN_POSITIVE)).unwrap();
        let mut latents = LatentTable::new();
        for s in 0..scenes {
            let d = config.model.latent_dim;
            let w: Vec<f32> = (0..d)
                .map(|_| {
                    if config.latent_init_std == 0.0 {
                        0.0
                    } else {
                        normal.sample(&mut rng) as f32
                    }
                })
                .collect();
            latents.insert(LatentEntry {
                id: latent_id(s),
                w: Tensor::new([d], w)?,
                provenance: Provenance::Fitted,
            })?;
        }
        let model_adam = AdamState::new(config.adam, model.named_tensors().into_iter().map(|(_, t)| t));
        let latent_adam = latents
            .entries()
            .iter()
            .map(|e| AdamState::new(config.adam, [&e.w]))
            .collect();
        Ok(Self {
            config,
            model,
            latents,
            model_adam,
            latent_adam,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// Latent table index serving `record`.
    fn latent_of(&self, record: &Record) -> Result<usize> {
        self.latents.index_of(&latent_id(record.scene))
    }

    /// One optimization step on `records` (the first `anchor` is 1-based
    /// into this slice).
    pub fn train_step(&mut self, records: &[&Record], sample: StepSample) -> Result<StepReport> {
        let cfg = self.config.clone();
        if records.len() != cfg.batch {
            return Err(invalid(format!("expected {} records, got {}", cfg.batch, records.len())));
        }
        let classes = cfg.model.classes;
        let k = cfg.anchor - 1;
        let settings = RenderSettings {
            samples_per_ray: cfg.samples_per_ray,
            stratified: cfg.stratified,
            seed: sample.jitter_seed,
            background: cfg.background,
        };

        let mut g = Graph::<f32>::new();
        let bm = self.model.bind(&mut g, true);

        // One leaf and one generated field per distinct latent.
        let mut latent_slots: Vec<(usize, Var, LatentField)> = Vec::new();
        let mut field_of = Vec::with_capacity(records.len());
        for r in records {
            let li = self.latent_of(r)?;
            let slot = match latent_slots.iter().position(|s| s.0 == li) {
                Some(p) => p,
                None => {
                    let w = g.leaf(self.latents.entries()[li].w.clone());
                    let f = bm.latent_field(&mut g, w)?;
                    latent_slots.push((li, w, f));
                    latent_slots.len() - 1
                }
            };
            field_of.push(slot);
        }

        // Phase 1: every record with its own appearance.
        let mut batches = Vec::with_capacity(records.len());
        let mut geos = Vec::with_capacity(records.len());
        let mut own = Vec::with_capacity(records.len());
        let mut recon_sum: Option<Var> = None;
        let mut terms = [0.0f64; 4];
        for (j, r) in records.iter().enumerate() {
            if r.camera.width != cfg.resolution || r.camera.height != cfg.resolution {
                return Err(invalid("record resolution differs from the training resolution"));
            }
            let (px, h, w) = renderer::strided_pixels(&r.camera, cfg.pixel_stride, sample.offset.0, sample.offset.1);
            let batch = RayBatch::<f32>::new(&r.camera, &px, &settings)?;
            let field = &latent_slots[field_of[j]].2;
            let pts = g.constant(batch.points.clone());
            let geo = renderer::geometry_for_batch(&mut g, &bm, &field.normalized, &batch, pts)?;
            let color = renderer::color_for_batch(&mut g, &bm, &field.normalized, &field.stats, &batch, pts)?;
            let out = renderer::composite_batch(&mut g, &geo, color, &batch)?;
            let rv = RenderVars::from_composite(&mut g, out, h, w, classes)?;
            let target = ReconTarget::<f32>::gather(&r.rgb, &r.mask, &r.depth, classes, &px, h, w)?;
            let rt = losses::reconstruction_vars(&mut g, &rv, &target)?;
            for (acc, v) in terms.iter_mut().zip([rt.l1, rt.perceptual, rt.ce, rt.depth]) {
                *acc += g.value(v).item() as f64 / records.len() as f64;
            }
            let weighted = rt.weighted(&mut g, &cfg.weights)?;
            recon_sum = Some(match recon_sum {
                None => weighted,
                Some(s) => g.add(s, weighted)?,
            });
            batches.push((batch, pts, h, w));
            geos.push(geo);
            own.push(rv);
        }
        let recon = g.mul_scalar(recon_sum.unwrap(), 1.0 / records.len() as f64);

        // Phase 2: everyone re-rendered with the anchor's appearance.
        let mut swapped_depth = Vec::new();
        let mut sim_value = 0.0;
        let total = if cfg.sim_loss {
            let anchor_stats = latent_slots[field_of[k]].2.stats;
            let mut swapped = Vec::with_capacity(records.len());
            for j in 0..records.len() {
                if j == k {
                    swapped.push(own[k]);
                    continue;
                }
                let (batch, pts, h, w) = &batches[j];
                let field = &latent_slots[field_of[j]].2;
                let color = renderer::color_for_batch(&mut g, &bm, &field.normalized, &anchor_stats, batch, *pts)?;
                let out = renderer::composite_batch(&mut g, &geos[j], color, batch)?;
                swapped.push(RenderVars::from_composite(&mut g, out, *h, *w, classes)?);
            }
            let cw = match cfg.histogram {
                HistogramMode::PerLabel => losses::class_weights(g.value(own[k].sem)),
                HistogramMode::WholeImage => Vec::new(),
            };
            let sim = losses::part_histogram_vars(&mut g, &swapped, k, &cw, cfg.histogram, 1.0)?;
            sim_value = g.value(sim).item() as f64;
            swapped_depth = swapped.iter().map(|s| g.value(s.depth).data().to_vec()).collect();
            let weighted = g.mul_scalar(sim, cfg.weights.sim * cfg.sim_ramp(self.step));
            g.add(recon, weighted)?
        } else {
            recon
        };

        let recon_value = g.value(recon).item() as f64;
        let total_value = if cfg.sim_loss {
            recon_value + cfg.weights.sim * sim_value
        } else {
            recon_value
        };
        if !g.value(total).item().is_finite() || !total_value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.step)));
        }
        let mut grads = g.backward(total)?;

        let params = bm.param_vars();
        let param_grads: Vec<Tensor> = params.iter().map(|&v| grads.take(v)).collect();
        {
            let mut tensors = self.model.tensors_mut();
            let grefs: Vec<&Tensor> = param_grads.iter().collect();
            adam_step(&mut tensors, &grefs, &mut self.model_adam)?;
        }
        for (li, wv, _) in &latent_slots {
            let gw = grads.take(*wv);
            let entry = self.latents.entry_mut(*li);
            adam_step(&mut [&mut entry.w], &[&gw], &mut self.latent_adam[*li])?;
        }

        let row = LossRow {
            step: self.step,
            l1: terms[0],
            perc: terms[1],
            ce: terms[2],
            depth: terms[3],
            sim: sim_value,
            total: total_value,
        };
        self.step += 1;
        Ok(StepReport {
            row,
            own_depth: own.iter().map(|o| g.value(o.depth).data().to_vec()).collect(),
            swapped_depth,
        })
    }

    /// Draws the next batch: distinct scenes where possible, a random view
    /// of each.
    pub fn sample_batch<'d>(&self, dataset: &'d Dataset, rng: &mut impl Rng) -> Result<Vec<&'d Record>> {
        let scenes = dataset.scene_count();
        let mut order: Vec<usize> = (0..scenes).collect();
        order.shuffle(rng);
        let mut picks: Vec<usize> = order.into_iter().take(self.config.batch).collect();
        while picks.len() < self.config.batch {
            picks.push(rng.random_range(0..scenes));
        }
        picks
            .into_iter()
            .map(|s| {
                let views: Vec<&Record> = dataset.records_of(s).collect();
                if views.is_empty() {
                    return Err(invalid(format!("scene {s} has no records")));
                }
                Ok(views[rng.random_range(0..views.len())])
            })
            .collect()
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        Checkpoint {
            model: self.model,
            latents: self.latents,
            train: Some(self.config),
            classes: ClassTable::default(),
        }
    }
}

/// Trains on `dataset` for `config.iterations` steps, calling `progress`
/// after each.
pub fn fit_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut progress: impl FnMut(&LossRow),
) -> Result<(Checkpoint, Vec<LossRow>)> {
    if dataset.records.is_empty() {
        return Err(invalid("cannot fit an empty dataset"));
    }
    if dataset.meta.resolution != config.resolution {
        return Err(invalid(format!(
            "dataset resolution {} differs from the configured {}",
            dataset.meta.resolution, config.resolution
        )));
    }
    let mut trainer = Trainer::new(config.clone(), dataset.scene_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(7);
    let mut rows = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let batch = trainer.sample_batch(dataset, &mut rng)?;
        let sample = StepSample {
            offset: (
                rng.random_range(0..config.pixel_stride),
                rng.random_range(0..config.pixel_stride),
            ),
            jitter_seed: rng.random(),
        };
        let report = trainer.train_step(&batch, sample)?;
        progress(&report.row);
        rows.push(report.row);
    }
    Ok((trainer.into_checkpoint(), rows))
}

pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<LossRow>)> {
    fit_with(dataset, config, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_is_signed_lr() {
        let mut p = Tensor::from_f64([2], &[1.0, -1.0]).unwrap();
        let g = Tensor::from_f64([2], &[0.3, -4.0]).unwrap();
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        // β1 = 0: m̂ = g, v̂ = g², step = lr·g/(|g| + eps).
        let lr = 0.002;
        let e0 = 1.0 - lr * 0.3 / (0.3 + 1e-8);
        let e1 = -1.0 + lr * 4.0 / (4.0 + 1e-8);
        assert!((p.data()[0] as f64 - e0).abs() < 1e-6);
        assert!((p.data()[1] as f64 - e1).abs() < 1e-6);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn sim_weight_ramps_to_full() {
        let c = TrainConfig {
            iterations: 100,
            sim_warmup: 0.5,
            ..TrainConfig::default()
        };
        assert!((c.sim_ramp(0) - 0.02).abs() < 1e-12);
        assert!((c.sim_ramp(24) - 0.5).abs() < 1e-12);
        assert_eq!(c.sim_ramp(49), 1.0);
        assert_eq!(c.sim_ramp(99), 1.0);
        let off = TrainConfig {
            sim_warmup: 0.0,
            ..c.clone()
        };
        assert_eq!(off.sim_ramp(0), 1.0);
        assert!(TrainConfig { sim_warmup: 1.5, ..c }.validate().is_err());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_f64([3], &[0.5, 0.1, -2.0]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros([3]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_rejects_mismatched_shapes() {
        let mut p = Tensor::zeros([3]);
        let g = Tensor::zeros([2]);
        let mut st = AdamState::new(AdamConfig::default(), [&p]);
        assert!(adam_step(&mut [&mut p], &[&g], &mut st).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut p = Tensor::from_f64([2], &[0.2, 0.4]).unwrap();
            let mut st = AdamState::new(AdamConfig::default(), [&p]);
            for i in 0..5 {
                let g = Tensor::from_f64([2], &[i as f64 - 2.0, 0.5]).unwrap();
                adam_step(&mut [&mut p], &[&g], &mut st).unwrap();
            }
            p
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let c = TrainConfig {
            batch: 1,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            anchor: 4,
            ..TrainConfig::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch: 1,
            anchor: 1,
            sim_loss: false,
            ..TrainConfig::default()
        };
        c.validate().unwrap();
    }
}
