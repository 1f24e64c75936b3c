//! Latent-conditioned tri-plane generator and the two decoders of the
//! Controllable Appearance Module (CAM).
//!
//! Geometry (density and semantic logits) is decoded from the *normalized*
//! tri-plane only. Color is decoded from the normalized tri-plane after it has
//! been denormalized with an arbitrary set of appearance statistics, so the
//! appearance code can be swapped without touching geometry.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::triplane::{
    denormalize_vars, normalize_vars, sample_vars, stats_vars, AppearanceStats, StatsVars, TriPlane,
    TriPlaneVars,
};

/// Which network predicts semantic logits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// The geometry decoder emits density and logits together.
    #[default]
    Unified,
    /// Ablation: density-only geometry decoder plus a second semantic MLP.
    Separate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub generator_hidden: usize,
    pub channels: usize,
    pub resolution: usize,
    pub decoder_hidden: usize,
    pub classes: usize,
    /// Added to the raw density output before the softplus.
    pub density_bias: f64,
    pub stats_eps: f64,
    pub decoder: DecoderMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 64,
            generator_hidden: 256,
            channels: 8,
            resolution: 32,
            decoder_hidden: 64,
            classes: crate::scenes::NUM_CLASSES,
            density_bias: -1.0,
            stats_eps: crate::triplane::DEFAULT_STATS_EPS,
            decoder: DecoderMode::Unified,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0
            || self.generator_hidden == 0
            || self.channels == 0
            || self.decoder_hidden == 0
            || self.classes < 2
        {
            return Err(invalid("model dimensions must be positive (and at least two classes)"));
        }
        if self.resolution < 2 {
            return Err(invalid("plane resolution must be at least 2"));
        }
        if !(self.stats_eps > 0.0) {
            return Err(invalid("stats_eps must be positive"));
        }
        Ok(())
    }

    pub fn plane_len(&self) -> usize {
        self.channels * self.resolution * self.resolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Softplus,
    Relu,
    Sigmoid,
}

/// `x · W + b` followed by an activation. `W` is `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Normal weights with variance `1/in` (`2/in` ahead of a ReLU), zero
    /// biases.
    pub fn init(rng: &mut impl Rng, dims: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(dims.len(), activations.len() + 1);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| {
                let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0f32, (gain / d[0] as f32).sqrt()).unwrap();
                Layer {
                    weight: Tensor::from_fn([d[0], d[1]], |_| normal.sample(rng)),
                    bias: Tensor::zeros([d[1]]),
                    activation,
                }
            })
            .collect();
        Self { layers }
    }

    /// Zero weights, zero biases.
    pub fn zeros(dims: &[usize], activations: &[Activation]) -> Self {
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, &activation)| Layer {
                weight: Tensor::zeros([d[0], d[1]]),
                bias: Tensor::zeros([d[1]]),
                activation,
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weight.shape()[1] != pair[1].weight.shape()[0] {
                return Err(Error::ShapeMismatch {
                    op: "mlp layer chain",
                    lhs: pair[0].weight.shape().to_vec(),
                    rhs: pair[1].weight.shape().to_vec(),
                });
            }
            let _ = i;
        }
        for l in &self.layers {
            if l.bias.shape() != [l.weight.shape()[1]] {
                return Err(Error::ShapeMismatch {
                    op: "mlp bias",
                    lhs: l.weight.shape().to_vec(),
                    rhs: l.bias.shape().to_vec(),
                });
            }
            if !l.weight.all_finite() || !l.bias.all_finite() {
                return Err(Error::NonFinite("mlp parameters".into()));
            }
        }
        Ok(())
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundMlp {
        let mut put = |t: &Tensor| {
            let t = t.cast::<T>();
            if trainable {
                g.leaf(t)
            } else {
                g.constant(t)
            }
        };
        BoundMlp {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias), l.activation))
                .collect(),
        }
    }
}

/// An MLP whose parameters live in a graph.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<(Var, Var, Activation)>,
}

impl BoundMlp {
    /// `x` is `[K, in]`; returns `[K, out]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let mut h = x;
        for &(w, b, act) in &self.layers {
            let z = g.matmul(h, w)?;
            let z = g.add(z, b)?;
            h = match act {
                Activation::Identity => z,
                Activation::Tanh => g.tanh(z),
                Activation::Softplus => g.softplus(z),
                Activation::Relu => g.relu(z),
                Activation::Sigmoid => g.sigmoid(z),
            };
        }
        Ok(h)
    }

    pub fn vars(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|&(w, b, _)| [w, b])
    }
}

/// All network parameters of the engine.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `D -> H (tanh) -> 3·C·R·R (linear)`
    pub generator: MlpParams,
    /// `C -> 64 (relu) -> 1 + N`, or `-> 1` in separate mode.
    pub geometry: MlpParams,
    /// `C -> 64 (relu) -> 3 (sigmoid)`
    pub appearance: MlpParams,
    /// `C -> 64 (relu) -> N`; only in separate mode.
    pub semantic: Option<MlpParams>,
}

fn layer_shapes(config: &ModelConfig) -> [(Vec<usize>, Vec<Activation>); 4] {
    use Activation::*;
    let c = config.channels;
    let hid = config.decoder_hidden;
    let geo_out = match config.decoder {
        DecoderMode::Unified => 1 + config.classes,
        DecoderMode::Separate => 1,
    };
    [
        (
            vec![config.latent_dim, config.generator_hidden, 3 * config.plane_len()],
            vec![Tanh, Identity],
        ),
        (vec![c, hid, geo_out], vec![Relu, Identity]),
        (vec![c, hid, 3], vec![Relu, Sigmoid]),
        (vec![c, hid, config.classes], vec![Relu, Identity]),
    ]
}

impl Model {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [gen, geo, app, sem] = layer_shapes(&config);
        let generator = MlpParams::init(rng, &gen.0, &gen.1);
        let geometry = MlpParams::init(rng, &geo.0, &geo.1);
        let appearance = MlpParams::init(rng, &app.0, &app.1);
        let semantic = (config.decoder == DecoderMode::Separate).then(|| MlpParams::init(rng, &sem.0, &sem.1));
        Ok(Self {
            config,
            generator,
            geometry,
            appearance,
            semantic,
        })
    }

    /// Every parameter zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let [gen, geo, app, sem] = layer_shapes(&config);
        Ok(Self {
            generator: MlpParams::zeros(&gen.0, &gen.1),
            geometry: MlpParams::zeros(&geo.0, &geo.1),
            appearance: MlpParams::zeros(&app.0, &app.1),
            semantic: (config.decoder == DecoderMode::Separate).then(|| MlpParams::zeros(&sem.0, &sem.1)),
            config,
        })
    }

    fn mlps(&self) -> Vec<(&'static str, &MlpParams)> {
        let mut v = vec![
            ("generator", &self.generator),
            ("geometry", &self.geometry),
            ("appearance", &self.appearance),
        ];
        if let Some(s) = &self.semantic {
            v.push(("semantic", s));
        }
        v
    }

    /// Parameters in a fixed order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (name, mlp) in self.mlps() {
            for (i, l) in mlp.layers.iter().enumerate() {
                out.push((format!("{name}.{i}.weight"), &l.weight));
                out.push((format!("{name}.{i}.bias"), &l.bias));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        let mut mlps = vec![&mut self.generator, &mut self.geometry, &mut self.appearance];
        if let Some(s) = self.semantic.as_mut() {
            mlps.push(s);
        }
        for mlp in mlps {
            for l in mlp.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out
    }

    /// Rebuilds a model of `config` from named tensors.
    pub fn from_named(config: ModelConfig, mut lookup: impl FnMut(&str) -> Result<Tensor>) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let names: Vec<(String, Vec<usize>)> = model
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in names.into_iter().zip(model.tensors_mut()) {
            let t = lookup(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    op: "model parameter",
                    lhs: shape,
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t;
        }
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        for (_, m) in self.mlps() {
            m.validate()?;
        }
        Ok(())
    }

    pub fn bind<T: Real>(&self, g: &mut Graph<T>, trainable: bool) -> BoundModel {
        BoundModel {
            config: self.config.clone(),
            generator: self.generator.bind(g, trainable),
            geometry: self.geometry.bind(g, trainable),
            appearance: self.appearance.bind(g, trainable),
            semantic: self.semantic.as_ref().map(|s| s.bind(g, trainable)),
        }
    }

    /// Binds only the decoders; the returned model cannot generate planes.
    pub fn bind_decoders<T: Real>(&self, g: &mut Graph<T>) -> BoundModel {
        BoundModel {
            config: self.config.clone(),
            generator: BoundMlp { layers: Vec::new() },
            geometry: self.geometry.bind(g, false),
            appearance: self.appearance.bind(g, false),
            semantic: self.semantic.as_ref().map(|s| s.bind(g, false)),
        }
    }

    fn check_latent<T: Real>(&self, w: &Tensor<T>) -> Result<()> {
        if w.shape() != [self.config.latent_dim] {
            return Err(Error::ShapeMismatch {
                op: "latent",
                lhs: vec![self.config.latent_dim],
                rhs: w.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn generate_triplane(&self, w: &Tensor) -> Result<TriPlane> {
        self.check_latent(w)?;
        let mut g = Graph::<f32>::new();
        let bm = self.bind(&mut g, false);
        let wv = g.constant(w.clone());
        let tp = bm.generate(&mut g, wv)?;
        Ok(tp.value(&g))
    }

    /// Appearance code of a latent: statistics of its generated tri-plane.
    pub fn appearance_of(&self, w: &Tensor) -> Result<AppearanceStats> {
        let tp = self.generate_triplane(w)?;
        crate::triplane::compute_stats(&tp, self.config.stats_eps)
    }

    pub fn decode_geometry(&self, features: &Tensor) -> Result<GeometrySamples> {
        let mut g = Graph::<f32>::new();
        let bm = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let (d, l) = bm.decode_geometry(&mut g, f)?;
        Ok(GeometrySamples {
            density: g.value(d).clone(),
            logits: g.value(l).clone(),
        })
    }

    pub fn decode_appearance(&self, features: &Tensor) -> Result<AppearanceSamples> {
        let mut g = Graph::<f32>::new();
        let bm = self.bind(&mut g, false);
        let f = g.constant(features.clone());
        let c = bm.appearance.forward(&mut g, f)?;
        Ok(AppearanceSamples {
            color: g.value(c).clone(),
        })
    }

    /// Semantic logits from the ablation's standalone semantic decoder.
    pub fn baseline_separate_semantic_decoder(&self, features: &Tensor) -> Result<Tensor> {
        let sem = self
            .semantic
            .as_ref()
            .ok_or_else(|| invalid("model was built with the unified decoder"))?;
        let mut g = Graph::<f32>::new();
        let bound = sem.bind(&mut g, false);
        let f = g.constant(features.clone());
        let l = bound.forward(&mut g, f)?;
        Ok(g.value(l).clone())
    }

    /// Full CAM evaluation at `points` (`[K, 3]`): geometry from `w_geo`'s
    /// normalized tri-plane, color from that tri-plane denormalized with
    /// `stats_app`.
    pub fn cam_forward(
        &self,
        w_geo: &Tensor,
        stats_app: &AppearanceStats,
        points: &Tensor,
    ) -> Result<(GeometrySamples, AppearanceSamples)> {
        self.check_latent(w_geo)?;
        let mut g = Graph::<f32>::new();
        let bm = self.bind(&mut g, false);
        let wv = g.constant(w_geo.clone());
        let field = bm.latent_field(&mut g, wv)?;
        let sv = StatsVars::constant(&mut g, stats_app);
        let pv = g.constant(points.clone());
        let (d, l) = bm.geometry_at(&mut g, &field.normalized, pv)?;
        let c = bm.color_at(&mut g, &field.normalized, &sv, pv)?;
        Ok((
            GeometrySamples {
                density: g.value(d).clone(),
                logits: g.value(l).clone(),
            },
            AppearanceSamples {
                color: g.value(c).clone(),
            },
        ))
    }
}

/// Density `[K]` (non-negative) and semantic logits `[K, N]` for `K` points.
#[derive(Clone, Debug, PartialEq)]
pub struct GeometrySamples<T: Real = f32> {
    pub density: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Colors `[K, 3]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AppearanceSamples<T: Real = f32> {
    pub color: Tensor<T>,
}

/// A generated tri-plane together with its statistics and normalized form.
#[derive(Clone, Copy, Debug)]
pub struct LatentField {
    pub planes: TriPlaneVars,
    pub stats: StatsVars,
    pub normalized: TriPlaneVars,
}

/// A [`Model`] bound into a graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub generator: BoundMlp,
    pub geometry: BoundMlp,
    pub appearance: BoundMlp,
    pub semantic: Option<BoundMlp>,
}

impl BoundModel {
    /// Parameter handles in the same order as [`Model::tensors_mut`].
    pub fn param_vars(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.generator.vars().collect();
        v.extend(self.geometry.vars());
        v.extend(self.appearance.vars());
        if let Some(s) = &self.semantic {
            v.extend(s.vars());
        }
        v
    }

    /// `w` (`[D]`) to three `[C, R, R]` planes.
    pub fn generate<T: Real>(&self, g: &mut Graph<T>, w: Var) -> Result<TriPlaneVars> {
        let d = self.config.latent_dim;
        if g.shape(w) != [d] {
            return Err(Error::ShapeMismatch {
                op: "generate_triplane",
                lhs: vec![d],
                rhs: g.shape(w).to_vec(),
            });
        }
        if self.generator.layers.is_empty() {
            return Err(invalid("generator is not bound in this graph"));
        }
        let row = g.reshape(w, [1, d])?;
        let out = self.generator.forward(g, row)?;
        let (c, r) = (self.config.channels, self.config.resolution);
        let n = self.config.plane_len();
        let mut planes = [out; 3];
        for (i, p) in planes.iter_mut().enumerate() {
            *p = g.slice(out, i * n, [c, r, r])?;
        }
        Ok(TriPlaneVars { planes })
    }

    pub fn latent_field<T: Real>(&self, g: &mut Graph<T>, w: Var) -> Result<LatentField> {
        let planes = self.generate(g, w)?;
        let stats = stats_vars(g, &planes, self.config.stats_eps)?;
        let normalized = normalize_vars(g, &planes, &stats)?;
        Ok(LatentField {
            planes,
            stats,
            normalized,
        })
    }

    /// Features `[K, C]` to (density `[K]`, logits `[K, N]`).
    pub fn decode_geometry<T: Real>(&self, g: &mut Graph<T>, features: Var) -> Result<(Var, Var)> {
        let out = self.geometry.forward(g, features)?;
        let raw = g.select_columns(out, &[0])?;
        let k = g.shape(raw)[0];
        let raw = g.reshape(raw, [k])?;
        let shifted = g.add_scalar(raw, self.config.density_bias);
        let density = g.softplus(shifted);
        let logits = match &self.semantic {
            None => {
                let cols: Vec<usize> = (1..=self.config.classes).collect();
                g.select_columns(out, &cols)?
            }
            Some(sem) => sem.forward(g, features)?,
        };
        Ok((density, logits))
    }

    /// Geometry at `points` from a normalized tri-plane.
    pub fn geometry_at<T: Real>(&self, g: &mut Graph<T>, normalized: &TriPlaneVars, points: Var) -> Result<(Var, Var)> {
        let f = sample_vars(g, normalized, points)?;
        self.decode_geometry(g, f)
    }

    /// Color `[K, 3]` at `points` from a normalized tri-plane denormalized with
    /// `stats_app`.
    pub fn color_at<T: Real>(
        &self,
        g: &mut Graph<T>,
        normalized: &TriPlaneVars,
        stats_app: &StatsVars,
        points: Var,
    ) -> Result<Var> {
        let planes = denormalize_vars(g, normalized, stats_app)?;
        let f = sample_vars(g, &planes, points)?;
        self.appearance.forward(g, f)
    }
}

/// Where a latent came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Fitted,
    Edited,
    Imported,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentEntry {
    pub id: String,
    pub w: Tensor,
    pub provenance: Provenance,
}

/// Named latents, all of the same dimension.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LatentTable {
    entries: Vec<LatentEntry>,
}

impl LatentTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[LatentEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.id.clone()).collect()
    }

    pub fn get(&self, id: &str) -> Result<&LatentEntry> {
        self.entries
            .iter()
            .find(|e| e.id == id)
            .ok_or_else(|| Error::MissingLatent(id.to_string()))
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.entries
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| Error::MissingLatent(id.to_string()))
    }

    pub fn entry_mut(&mut self, index: usize) -> &mut LatentEntry {
        &mut self.entries[index]
    }

    pub fn insert(&mut self, entry: LatentEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.w.shape() != entry.w.shape() {
                return Err(Error::ShapeMismatch {
                    op: "latent table insert",
                    lhs: first.w.shape().to_vec(),
                    rhs: entry.w.shape().to_vec(),
                });
            }
        }
        if !entry.w.all_finite() {
            return Err(Error::NonFinite(format!("latent '{}'", entry.id)));
        }
        if self.entries.iter().any(|e| e.id == entry.id) {
            return Err(invalid(format!("latent id '{}' already exists", entry.id)));
        }
        self.entries.push(entry);
        Ok(())
    }

    /// An id of the form `{base}` or `{base}_{n}` not yet in the table.
    pub fn fresh_id(&self, base: &str) -> String {
        if self.get(base).is_err() {
            return base.to_string();
        }
        (1..)
            .map(|n| format!("{base}_{n}"))
            .find(|id| self.get(id).is_err())
            .unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_dim: 4,
            generator_hidden: 8,
            channels: 3,
            resolution: 4,
            decoder_hidden: 6,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_generator_with_bias_gives_constant_planes() {
        let cfg = tiny_config();
        let mut m = Model::zeros(cfg.clone()).unwrap();
        let n = 3 * cfg.plane_len();
        m.generator.layers[1].bias = Tensor::from_fn([n], |i| (i / cfg.plane_len()) as f32 + 0.5);
        let w = Tensor::from_fn([4], |i| i as f32);
        let tp = m.generate_triplane(&w).unwrap();
        for (i, p) in tp.planes().iter().enumerate() {
            assert!(p.data().iter().all(|&v| v == i as f32 + 0.5));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(tiny_config(), &mut rng).unwrap();
        let w = Tensor::from_fn([4], |i| 0.3 * i as f32 - 0.4);
        assert_eq!(m.generate_triplane(&w).unwrap(), m.generate_triplane(&w).unwrap());
    }

    #[test]
    fn latent_dimension_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::init(tiny_config(), &mut rng).unwrap();
        assert!(m.generate_triplane(&Tensor::zeros([5])).is_err());
    }

    #[test]
    fn zero_decoders() {
        let m = Model::zeros(tiny_config()).unwrap();
        let f = Tensor::zeros([2, 3]);
        let geo = m.decode_geometry(&f).unwrap();
        let expect = crate::autodiff::Tensor::<f64>::scalar(-1.0f64);
        let sp = (1.0 + expect.item().exp()).ln() as f32;
        assert!(geo.density.data().iter().all(|&d| (d - sp).abs() < 1e-6));
        assert!((sp - 0.3133).abs() < 1e-4);
        assert!(geo.logits.data().iter().all(|&l| l == 0.0));
        let app = m.decode_appearance(&f).unwrap();
        assert!(app.color.data().iter().all(|&c| c == 0.5));
    }

    #[test]
    fn decoder_ranges_hold_for_extreme_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Model::init(tiny_config(), &mut rng).unwrap();
        let f = Tensor::from_fn([50, 3], |i| ((i * 37 % 101) as f32 - 50.0) * 0.5);
        let geo = m.decode_geometry(&f).unwrap();
        assert!(geo.density.data().iter().all(|&d| d >= 0.0));
        let app = m.decode_appearance(&f).unwrap();
        assert!(app.color.data().iter().all(|&c| (0.0..=1.0).contains(&c)));
    }

    #[test]
    fn separate_decoder_wiring() {
        let cfg = ModelConfig {
            decoder: DecoderMode::Separate,
            ..tiny_config()
        };
        let zeros = Model::zeros(cfg.clone()).unwrap();
        let f = Tensor::zeros([3, 3]);
        let l = zeros.baseline_separate_semantic_decoder(&f).unwrap();
        assert!(l.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = Model::init(cfg, &mut rng).unwrap();
        assert_eq!(m.geometry.output_dim(), 1);
        let f = Tensor::from_fn([3, 3], |i| i as f32 * 0.1);
        let geo = m.decode_geometry(&f).unwrap();
        assert_eq!(geo.logits, m.baseline_separate_semantic_decoder(&f).unwrap());

        let unified = Model::init(tiny_config(), &mut rng).unwrap();
        assert!(unified.semantic.is_none());
        assert!(unified.baseline_separate_semantic_decoder(&f).is_err());
    }

    #[test]
    fn latent_table_rejects_duplicates_and_bad_dims() {
        let mut t = LatentTable::new();
        let e = |id: &str, d: usize| LatentEntry {
            id: id.into(),
            w: Tensor::zeros([d]),
            provenance: Provenance::Fitted,
        };
        t.insert(e("a", 4)).unwrap();
        assert!(t.insert(e("a", 4)).is_err());
        assert!(t.insert(e("b", 5)).is_err());
        assert_eq!(t.fresh_id("a"), "a_1");
        assert!(matches!(t.get("zzz"), Err(Error::MissingLatent(_))));
    }
}
