//! Procedural semantic heads with an analytic density / class / albedo
//! oracle, and the multi-view datasets rendered from them.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{invalid, Error, Result};
use crate::imageio;
use crate::renderer::{sample_pose, Camera, PoseDistribution, RayBatch, RenderOutput, RenderSettings};

pub const NUM_CLASSES: usize = 6;
pub const BACKGROUND: u8 = 0;
pub const SKIN: u8 = 1;
pub const HAIR: u8 = 2;
pub const EYES: u8 = 3;
pub const NOSE: u8 = 4;
pub const MOUTH: u8 = 5;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["background", "skin", "hair", "eyes", "nose", "mouth"];

pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [0, 0, 0],
    [255, 204, 153],
    [102, 51, 0],
    [0, 0, 255],
    [255, 0, 0],
    [0, 255, 0],
];

/// Class ids, names and display colors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub names: Vec<String>,
    pub palette: Vec<[u8; 3]>,
}

impl Default for ClassTable {
    fn default() -> Self {
        Self {
            names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            palette: PALETTE.to_vec(),
        }
    }
}

impl ClassTable {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.names.len() != self.palette.len() || self.names.is_empty() {
            return Err(invalid("class table needs one palette color per class"));
        }
        if self.names[0] != "background" {
            return Err(invalid("class 0 must be background"));
        }
        Ok(())
    }
}

/// Index into [`SceneSpec::albedo`] for a foreground class.
pub fn albedo_slot(class: u8) -> Option<usize> {
    (1..NUM_CLASSES as u8).contains(&class).then(|| class as usize - 1)
}

/// Geometry and per-class albedo of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub head_rx: f64,
    pub head_ry: f64,
    pub head_rz: f64,
    pub hair_cap_angle: f64,
    pub hair_thickness: f64,
    pub eye_radius: f64,
    pub eye_spacing: f64,
    pub nose_size: f64,
    pub mouth_width: f64,
    pub mouth_height: f64,
    /// RGB per foreground class, in class order: skin, hair, eyes, nose, mouth.
    pub albedo: [[f64; 3]; NUM_CLASSES - 1],
    pub density_level: f64,
}

pub const DEFAULT_DENSITY: f64 = 50.0;

/// Bound on every coordinate of every part.
const CONTAINMENT: f64 = 0.9;

/// Direction the hair cap is centered on: up and toward the back.
fn hair_axis() -> [f64; 3] {
    let (s, c) = 0.5f64.sin_cos();
    [0.0, c, -s]
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("head_rx", self.head_rx), ("head_ry", self.head_ry), ("head_rz", self.head_rz)] {
            if !(v > 0.0) {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        // Zero disables a part.
        for (name, v) in [
            ("hair_cap_angle", self.hair_cap_angle),
            ("hair_thickness", self.hair_thickness),
            ("eye_radius", self.eye_radius),
            ("eye_spacing", self.eye_spacing),
            ("nose_size", self.nose_size),
            ("mouth_width", self.mouth_width),
            ("mouth_height", self.mouth_height),
            ("density_level", self.density_level),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.albedo.iter().flatten().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(invalid("albedo channels must lie in [0, 1]"));
        }
        let t = self.hair_thickness;
        let reach = [
            self.head_rx + t,
            self.head_ry + t,
            self.head_rz + t,
            self.eye_spacing / 2.0 + self.eye_radius,
            self.mouth_width / 2.0,
        ];
        if reach.iter().any(|&r| r > CONTAINMENT) || self.head_rz + self.eye_radius.max(self.nose_size) > CONTAINMENT {
            return Err(invalid("scene parts must stay inside [-0.9, 0.9]^3"));
        }
        if self.eye_spacing / 2.0 >= self.head_rx {
            return Err(invalid("eyes must sit on the face"));
        }
        Ok(())
    }

    fn surface_z(&self, x: f64, y: f64) -> f64 {
        let q = 1.0 - (x / self.head_rx).powi(2) - (y / self.head_ry).powi(2);
        self.head_rz * q.max(0.0).sqrt()
    }

    pub fn eye_centers(&self) -> [[f64; 3]; 2] {
        let (x, y) = (self.eye_spacing / 2.0, 0.15 * self.head_ry);
        let z = self.surface_z(x, y);
        [[-x, y, z], [x, y, z]]
    }

    pub fn nose_center(&self) -> [f64; 3] {
        let y = -0.1 * self.head_ry;
        [0.0, y, self.surface_z(0.0, y)]
    }

    pub fn mouth_center(&self) -> [f64; 3] {
        let y = -0.45 * self.head_ry;
        [0.0, y, self.surface_z(0.0, y)]
    }

    fn in_ellipsoid(p: [f64; 3], c: [f64; 3], r: [f64; 3]) -> bool {
        if r.iter().any(|&v| v <= 0.0) {
            return false;
        }
        (0..3).map(|i| ((p[i] - c[i]) / r[i]).powi(2)).sum::<f64>() <= 1.0
    }

    fn in_hair(&self, p: [f64; 3]) -> bool {
        let t = self.hair_thickness;
        if t <= 0.0 || self.hair_cap_angle <= 0.0 {
            return false;
        }
        let (rx, ry, rz) = (self.head_rx, self.head_ry, self.head_rz);
        let outer = Self::in_ellipsoid(p, [0.0; 3], [rx + t, ry + t, rz + t]);
        let inner = Self::in_ellipsoid(p, [0.0; 3], [rx - t, ry - t, rz - t]);
        if !outer || inner {
            return false;
        }
        let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        if n == 0.0 {
            return false;
        }
        let a = hair_axis();
        let cos = (p[0] * a[0] + p[1] * a[1] + p[2] * a[2]) / n;
        cos >= self.hair_cap_angle.cos()
    }

    /// Class at `p`, testing parts in priority order
    /// eyes > mouth > nose > hair > skin.
    pub fn class_at(&self, p: [f64; 3]) -> u8 {
        let e = self.eye_radius;
        if self.eye_centers().iter().any(|&c| Self::in_ellipsoid(p, c, [e; 3])) {
            return EYES;
        }
        let (mw, mh) = (self.mouth_width / 2.0, self.mouth_height / 2.0);
        if Self::in_ellipsoid(p, self.mouth_center(), [mw, mh, mh]) {
            return MOUTH;
        }
        if Self::in_ellipsoid(p, self.nose_center(), [self.nose_size; 3]) {
            return NOSE;
        }
        if self.in_hair(p) {
            return HAIR;
        }
        if Self::in_ellipsoid(p, [0.0; 3], [self.head_rx, self.head_ry, self.head_rz]) {
            return SKIN;
        }
        BACKGROUND
    }

    pub fn albedo_of(&self, class: u8) -> [f64; 3] {
        albedo_slot(class).map_or([0.0; 3], |i| self.albedo[i])
    }
}

/// Ground truth at a point: density, class and albedo.
pub fn oracle_query(scene: &SceneSpec, point: [f64; 3]) -> (f64, u8, [f64; 3]) {
    let class = scene.class_at(point);
    if class == BACKGROUND {
        (0.0, BACKGROUND, [0.0; 3])
    } else {
        (scene.density_level, class, scene.albedo_of(class))
    }
}

/// Logit gap that makes the compositor's softmax an exact one-hot.
const ONE_HOT_GAP: f64 = 1e4;

/// Renders the oracle with the same quadrature as the learned field
/// (bin midpoints, no jitter).
pub fn oracle_render(scene: &SceneSpec, cam: &Camera, samples_per_ray: usize, background: [f32; 3]) -> Result<RenderOutput> {
    cam.validate()?;
    let settings = RenderSettings {
        samples_per_ray,
        stratified: false,
        seed: 0,
        background,
    };
    let pixels: Vec<usize> = (0..cam.pixels()).collect();
    let chunks: Vec<Result<Vec<f64>>> = pixels
        .par_chunks(1024)
        .map(|chunk| {
            let batch = RayBatch::<f64>::new(cam, chunk, &settings)?;
            let (p, m, n) = (chunk.len(), samples_per_ray, NUM_CLASSES);
            let mut sigma = Vec::with_capacity(p * m);
            let mut color = Vec::with_capacity(p * m * 3);
            let mut logits = Vec::with_capacity(p * m * n);
            for pt in batch.points.data().chunks(3) {
                let (s, c, a) = oracle_query(scene, [pt[0], pt[1], pt[2]]);
                sigma.push(s);
                color.extend(a);
                logits.extend((0..n).map(|k| if k as u8 == c { 0.0 } else { -ONE_HOT_GAP }));
            }
            if let Some(hit) = &batch.hit {
                for (s, h) in sigma.iter_mut().zip(hit.data()) {
                    *s *= h;
                }
            }
            let mut g = Graph::<f64>::new();
            let s = g.constant(Tensor::new([p, m], sigma)?);
            let c = g.constant(Tensor::new([p, m, 3], color)?);
            let l = g.constant(Tensor::new([p, m, n], logits)?);
            let out = g.composite(s, c, l, batch.consts.clone())?;
            Ok(g.value(out).data().to_vec())
        })
        .collect();
    let mut rows = Vec::new();
    for c in chunks {
        rows.extend(c?);
    }
    RenderOutput::from_rows(&rows, cam.width, cam.height, NUM_CLASSES)
}

/// Uniform sampling ranges for every scene parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneRanges {
    pub head_rx: (f64, f64),
    pub head_ry: (f64, f64),
    pub head_rz: (f64, f64),
    pub hair_cap_angle: (f64, f64),
    pub hair_thickness: (f64, f64),
    pub eye_radius: (f64, f64),
    pub eye_spacing: (f64, f64),
    pub nose_size: (f64, f64),
    pub mouth_width: (f64, f64),
    pub mouth_height: (f64, f64),
    pub albedo: (f64, f64),
    pub density_level: f64,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            head_rx: (0.5, 0.6),
            head_ry: (0.6, 0.72),
            head_rz: (0.5, 0.6),
            hair_cap_angle: (0.9, 1.6),
            hair_thickness: (0.04, 0.10),
            eye_radius: (0.06, 0.09),
            eye_spacing: (0.30, 0.40),
            nose_size: (0.06, 0.10),
            mouth_width: (0.18, 0.28),
            mouth_height: (0.05, 0.08),
            albedo: (0.05, 0.95),
            density_level: DEFAULT_DENSITY,
        }
    }
}

impl SceneRanges {
    fn all(&self) -> [(&'static str, (f64, f64)); 11] {
        [
            ("head_rx", self.head_rx),
            ("head_ry", self.head_ry),
            ("head_rz", self.head_rz),
            ("hair_cap_angle", self.hair_cap_angle),
            ("hair_thickness", self.hair_thickness),
            ("eye_radius", self.eye_radius),
            ("eye_spacing", self.eye_spacing),
            ("nose_size", self.nose_size),
            ("mouth_width", self.mouth_width),
            ("mouth_height", self.mouth_height),
            ("albedo", self.albedo),
        ]
    }

    /// Checks bounds are ordered and that the extreme corner of the box
    /// still yields a valid scene.
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in self.all() {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(invalid(format!("range {name} = ({lo}, {hi}) is invalid")));
            }
        }
        if self.head_rx.0 <= 0.0 || self.head_ry.0 <= 0.0 || self.head_rz.0 <= 0.0 {
            return Err(invalid("head radii ranges must be positive"));
        }
        if self.albedo.1 > 1.0 {
            return Err(invalid("albedo range must lie in [0, 1]"));
        }
        let worst = SceneSpec {
            head_rx: self.head_rx.1,
            head_ry: self.head_ry.1,
            head_rz: self.head_rz.1,
            hair_cap_angle: self.hair_cap_angle.1,
            hair_thickness: self.hair_thickness.1,
            eye_radius: self.eye_radius.1,
            eye_spacing: self.eye_spacing.1,
            nose_size: self.nose_size.1,
            mouth_width: self.mouth_width.1,
            mouth_height: self.mouth_height.1,
            albedo: [[self.albedo.1; 3]; NUM_CLASSES - 1],
            density_level: self.density_level,
        };
        worst.validate()?;
        if self.eye_spacing.1 / 2.0 >= self.head_rx.0 {
            return Err(invalid("eye spacing range too wide for the narrowest head"));
        }
        Ok(())
    }
}

fn draw(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub fn sample_scene_params(rng: &mut impl Rng, ranges: &SceneRanges) -> Result<SceneSpec> {
    ranges.validate()?;
    let mut s = SceneSpec {
        head_rx: draw(rng, ranges.head_rx),
        head_ry: draw(rng, ranges.head_ry),
        head_rz: draw(rng, ranges.head_rz),
        hair_cap_angle: draw(rng, ranges.hair_cap_angle),
        hair_thickness: draw(rng, ranges.hair_thickness),
        eye_radius: draw(rng, ranges.eye_radius),
        eye_spacing: draw(rng, ranges.eye_spacing),
        nose_size: draw(rng, ranges.nose_size),
        mouth_width: draw(rng, ranges.mouth_width),
        mouth_height: draw(rng, ranges.mouth_height),
        albedo: [[0.0; 3]; NUM_CLASSES - 1],
        density_level: ranges.density_level,
    };
    for a in s.albedo.iter_mut().flatten() {
        *a = draw(rng, ranges.albedo);
    }
    Ok(s)
}

/// One rendered view with its supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub scene: usize,
    pub view: usize,
    pub camera: Camera,
    /// `H·W·3`
    pub rgb: Vec<f32>,
    /// `H·W` class ids
    pub mask: Vec<u8>,
    /// `H·W`
    pub depth: Vec<f32>,
}

impl Record {
    /// `H·W·N` one-hot floats of the mask.
    pub fn one_hot(&self, classes: usize) -> Vec<f32> {
        let mut out = vec![0.0; self.mask.len() * classes];
        for (i, &c) in self.mask.iter().enumerate() {
            out[i * classes + c as usize] = 1.0;
        }
        out
    }
}

/// Provenance stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub resolution: usize,
    pub views_per_scene: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub ranges: Option<SceneRanges>,
    pub poses: PoseDistribution,
    pub background: [f32; 3],
    pub scenes: Vec<SceneSpec>,
    /// `cameras[scene][view]`
    pub cameras: Vec<Vec<Camera>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<Record>,
}

/// Options for rendering a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetOptions {
    pub views_per_scene: usize,
    pub resolution: usize,
    pub samples_per_ray: usize,
    pub seed: u64,
    pub poses: PoseDistribution,
    pub background: [f32; 3],
}

impl Default for DatasetOptions {
    fn default() -> Self {
        Self {
            views_per_scene: 8,
            resolution: 64,
            samples_per_ray: 48,
            seed: 0,
            poses: PoseDistribution::default(),
            background: [0.5; 3],
        }
    }
}

/// Renders every scene from `views_per_scene` poses drawn from `seed`.
pub fn build_dataset(scenes: &[SceneSpec], opts: &DatasetOptions) -> Result<Dataset> {
    if scenes.is_empty() || opts.views_per_scene == 0 {
        return Err(invalid("a dataset needs at least one scene and one view"));
    }
    if opts.resolution == 0 {
        return Err(invalid("resolution must be positive"));
    }
    opts.poses.validate()?;
    for s in scenes {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(1);
    let cameras: Vec<Vec<Camera>> = scenes
        .iter()
        .map(|_| {
            (0..opts.views_per_scene)
                .map(|_| sample_pose(&mut rng, &opts.poses, opts.resolution, opts.resolution))
                .collect()
        })
        .collect();
    let mut records = Vec::with_capacity(scenes.len() * opts.views_per_scene);
    for (si, scene) in scenes.iter().enumerate() {
        for (vi, cam) in cameras[si].iter().enumerate() {
            let r = oracle_render(scene, cam, opts.samples_per_ray, opts.background)?;
            records.push(Record {
                scene: si,
                view: vi,
                camera: *cam,
                mask: r.argmax_mask(),
                rgb: r.rgb,
                depth: r.depth,
            });
        }
    }
    Ok(Dataset {
        meta: DatasetMeta {
            resolution: opts.resolution,
            views_per_scene: opts.views_per_scene,
            samples_per_ray: opts.samples_per_ray,
            seed: opts.seed,
            ranges: None,
            poses: opts.poses,
            background: opts.background,
            scenes: scenes.to_vec(),
            cameras,
        },
        records,
    })
}

/// Samples `count` scenes from `ranges` and renders them; a pure function
/// of its arguments.
pub fn generate_dataset(ranges: &SceneRanges, count: usize, opts: &DatasetOptions) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let scenes = (0..count)
        .map(|_| sample_scene_params(&mut rng, ranges))
        .collect::<Result<Vec<_>>>()?;
    let mut ds = build_dataset(&scenes, opts)?;
    ds.meta.ranges = Some(ranges.clone());
    Ok(ds)
}

impl Dataset {
    pub fn scene_count(&self) -> usize {
        self.meta.scenes.len()
    }

    pub fn records_of(&self, scene: usize) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.scene == scene)
    }

    /// Writes `meta.json` and `scene_{i}/view_{j}_{rgb.png,mask.png,depth.bin}`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let n = self.meta.resolution;
        for r in &self.records {
            let sd = dir.join(format!("scene_{}", r.scene));
            std::fs::create_dir_all(&sd)?;
            let stem = format!("view_{}", r.view);
            imageio::write_rgb_png(&sd.join(format!("{stem}_rgb.png")), n, n, &r.rgb)?;
            imageio::write_mask_png(&sd.join(format!("{stem}_mask.png")), n, n, &r.mask)?;
            imageio::write_depth_bin(&sd.join(format!("{stem}_depth.bin")), &r.depth)?;
        }
        Ok(())
    }

    /// Reads a directory written by [`Dataset::write`]. RGB comes back
    /// quantized to 8 bits.
    pub fn read(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        if meta.cameras.len() != meta.scenes.len() {
            return Err(Error::Format("meta.json: one camera list per scene expected".into()));
        }
        let n = meta.resolution;
        let mut records = Vec::new();
        for (si, cams) in meta.cameras.iter().enumerate() {
            let sd = dir.join(format!("scene_{si}"));
            for (vi, cam) in cams.iter().enumerate() {
                let stem = format!("view_{vi}");
                let (w, h, rgb) = imageio::read_rgb_png(&sd.join(format!("{stem}_rgb.png")))?;
                let (mw, mh, mask) = imageio::read_mask_png(&sd.join(format!("{stem}_mask.png")), NUM_CLASSES)?;
                if (w, h) != (n, n) || (mw, mh) != (n, n) {
                    return Err(Error::Format(format!("{}: image size differs from meta.json", sd.display())));
                }
                let depth = imageio::read_depth_bin(&sd.join(format!("{stem}_depth.bin")), n * n)?;
                records.push(Record {
                    scene: si,
                    view: vi,
                    camera: *cam,
                    rgb,
                    mask,
                    depth,
                });
            }
        }
        Ok(Self { meta, records })
    }
}
