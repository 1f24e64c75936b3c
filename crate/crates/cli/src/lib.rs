//! Command line dispatch and the HTTP service for `tpde`.

pub mod server;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use tpde::checkpoint::{self, Checkpoint};
use tpde::editing::{self, EditRequest};
use tpde::gradcheck;
use tpde::imageio;
use tpde::losses::HistogramMode;
use tpde::renderer::{Camera, RenderOutput};
use tpde::scenes::{self, DatasetOptions, SceneRanges};
use tpde::training::{self, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Env var capping the number of render threads.
pub const THREADS_ENV: &str = "TPDE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tpde", version, about = "Disentangled tri-plane radiance fields")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a procedural dataset of rendered scenes.
    SceneGen(SceneGenArgs),
    /// Fit a model and per-scene latents to a dataset.
    Fit(FitArgs),
    /// Render one latent from one pose.
    Render(RenderArgs),
    /// Render numbered frames sweeping yaw.
    Turntable(TurntableArgs),
    /// Render one latent's geometry with another's appearance.
    Swap(SwapArgs),
    /// Optimize a latent toward a painted semantic mask.
    Edit(EditArgs),
    /// Run the finite-difference check over every differentiable op.
    Gradcheck(GradcheckArgs),
    /// Serve the HTTP API over a checkpoint.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SceneGenArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file of parameter ranges; defaults apply when omitted.
    #[arg(long)]
    pub ranges: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub views: usize,
    #[arg(long, default_value_t = 64)]
    pub resolution: usize,
    #[arg(long, default_value_t = 48)]
    pub samples: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum HistogramArg {
    PerLabel,
    WholeImage,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Dataset directory written by `scene-gen`.
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON training config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the part-based histogram loss.
    #[arg(long)]
    pub no_sim: bool,
    #[arg(long, value_enum)]
    pub histogram: Option<HistogramArg>,
    /// Per-step loss CSV (defaults to `<out>.losses.csv`).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args, Clone)]
pub struct PoseArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
}

impl PoseArgs {
    pub fn camera(&self) -> Camera {
        Camera::new(self.yaw, self.pitch, self.radius, self.width, self.height)
    }
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub latent: String,
    #[command(flatten)]
    pub pose: PoseArgs,
    /// Output prefix; writes `<out>_rgb.png`, `_mask.png`, `_depth.png`, `_depth.bin`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TurntableArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub latent: String,
    #[arg(long, default_value_t = 12)]
    pub frames: usize,
    /// Half-width of the yaw sweep in radians.
    #[arg(long, default_value_t = std::f64::consts::FRAC_PI_4)]
    pub sweep: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Output directory for `frame_000.png`, ...
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SwapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Latent supplying geometry.
    #[arg(long)]
    pub geo: String,
    /// Latent supplying appearance statistics.
    #[arg(long)]
    pub app: String,
    #[command(flatten)]
    pub pose: PoseArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub latent: String,
    /// Painted class mask PNG (indexed or palette RGB); sets the image size.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub yaw: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub pitch: f64,
    #[arg(long, default_value_t = 3.0)]
    pub radius: f64,
    #[arg(long, default_value_t = editing::DEFAULT_EDIT_STEPS)]
    pub steps: usize,
    #[arg(long, default_value_t = editing::DEFAULT_EDIT_LR)]
    pub lr: f64,
    #[arg(long, default_value_t = editing::DEFAULT_DILATION)]
    pub dilation: usize,
    /// Checkpoint to write with the edited latent appended (defaults to
    /// updating `--checkpoint` in place).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Id for the new latent (defaults to `<latent>_edit`).
    #[arg(long)]
    pub name: Option<String>,
    /// Per-step trace CSV (defaults to `<out>.edit.csv`).
    #[arg(long)]
    pub trace: Option<PathBuf>,
    /// Also write before/after renders with this prefix.
    #[arg(long)]
    pub renders: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::SUITE_TRIALS)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// Latent file for `persist` requests (defaults to `<checkpoint>.latents`);
    /// loaded at startup when present.
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    configure_threads();
    match dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}

fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

pub fn dispatch(cmd: Command) -> CmdResult {
    match cmd {
        Command::SceneGen(a) => scene_gen(a),
        Command::Fit(a) => fit(a),
        Command::Render(a) => render(a),
        Command::Turntable(a) => turntable(a),
        Command::Swap(a) => swap(a),
        Command::Edit(a) => edit(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Serve(a) => serve(a),
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn scene_gen(a: SceneGenArgs) -> CmdResult {
    let ranges = match &a.ranges {
        Some(p) => serde_json::from_str::<SceneRanges>(&std::fs::read_to_string(p)?)?,
        None => SceneRanges::default(),
    };
    let opts = DatasetOptions {
        views_per_scene: a.views,
        resolution: a.resolution,
        samples_per_ray: a.samples,
        seed: a.seed,
        ..DatasetOptions::default()
    };
    let ds = scenes::generate_dataset(&ranges, a.count, &opts)?;
    ds.write(&a.out)?;
    println!(
        "wrote {} scenes x {} views to {}",
        ds.scene_count(),
        a.views,
        a.out.display()
    );
    Ok(())
}

fn fit(a: FitArgs) -> CmdResult {
    let ds = scenes::Dataset::read(&a.data)?;
    let mut cfg = match &a.config {
        Some(p) => serde_json::from_str::<TrainConfig>(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if a.no_sim {
        cfg.sim_loss = false;
    }
    if let Some(h) = a.histogram {
        cfg.histogram = match h {
            HistogramArg::PerLabel => HistogramMode::PerLabel,
            HistogramArg::WholeImage => HistogramMode::WholeImage,
        };
    }
    cfg.resolution = ds.meta.resolution;
    let quiet = a.quiet;
    let every = (cfg.iterations / 20).max(1);
    let (ckpt, rows) = training::fit_with(&ds, &cfg, |r| {
        if !quiet && (r.step % every == 0 || r.step + 1 == cfg.iterations) {
            eprintln!(
                "step {:>5}  total {:.4}  l1 {:.4}  ce {:.4}  depth {:.4}  sim {:.4}",
                r.step, r.total, r.l1, r.ce, r.depth, r.sim
            );
        }
    })?;
    ckpt.save(&a.out)?;
    let csv = a.loss_csv.unwrap_or_else(|| with_suffix(&a.out, ".losses.csv"));
    training::write_loss_csv(&csv, &rows)?;
    println!("wrote {} and {}", a.out.display(), csv.display());
    Ok(())
}

/// Writes `<prefix>_rgb.png`, `_mask.png`, `_depth.png` and `_depth.bin`.
pub fn write_render(prefix: &Path, out: &RenderOutput, cam: &Camera) -> tpde::Result<()> {
    let (w, h) = (out.width, out.height);
    imageio::write_rgb_png(&with_suffix(prefix, "_rgb.png"), w, h, &out.rgb)?;
    imageio::write_mask_png(&with_suffix(prefix, "_mask.png"), w, h, &out.argmax_mask())?;
    imageio::write_depth_png(&with_suffix(prefix, "_depth.png"), w, h, &out.depth, cam.far_plane() as f32)?;
    imageio::write_depth_bin(&with_suffix(prefix, "_depth.bin"), &out.depth)?;
    Ok(())
}

fn ensure_parent(path: &Path) -> std::io::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => std::fs::create_dir_all(p),
        _ => Ok(()),
    }
}

fn render(a: RenderArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cam = a.pose.camera();
    let out = editing::render_latent(&ck, &a.latent, &cam)?;
    ensure_parent(&a.out)?;
    write_render(&a.out, &out, &cam)?;
    println!("wrote {}_{{rgb,mask,depth}}.png", a.out.display());
    Ok(())
}

fn turntable(a: TurntableArgs) -> CmdResult {
    if a.frames == 0 {
        return Err("turntable needs at least one frame".into());
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    std::fs::create_dir_all(&a.out)?;
    for i in 0..a.frames {
        let t = if a.frames == 1 {
            0.5
        } else {
            i as f64 / (a.frames - 1) as f64
        };
        let yaw = -a.sweep + 2.0 * a.sweep * t;
        let cam = Camera::new(yaw, a.pitch, a.radius, a.size, a.size);
        let out = editing::render_latent(&ck, &a.latent, &cam)?;
        imageio::write_rgb_png(&a.out.join(format!("frame_{i:03}.png")), a.size, a.size, &out.rgb)?;
    }
    println!("wrote {} frames to {}", a.frames, a.out.display());
    Ok(())
}

fn swap(a: SwapArgs) -> CmdResult {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cam = a.pose.camera();
    let out = editing::apply_appearance(&ck, &a.geo, &a.app, &cam)?;
    ensure_parent(&a.out)?;
    write_render(&a.out, &out, &cam)?;
    println!("wrote {}_{{rgb,mask,depth}}.png", a.out.display());
    Ok(())
}

fn edit(a: EditArgs) -> CmdResult {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let (w, h, mask) = imageio::read_mask_png(&a.mask, ck.model.config.classes)?;
    let mut req = EditRequest::new(a.latent.clone(), Camera::new(a.yaw, a.pitch, a.radius, w, h), mask);
    req.steps = a.steps;
    req.lr = a.lr;
    req.dilation = a.dilation;
    let every = (a.steps / 10).max(1);
    let trace = editing::optimize_edit(&ck, &req, |s, _| {
        if s.step % every == 0 {
            eprintln!("step {:>4}  loss {:.5}  ce {:.5}  outside {:.5}", s.step, s.loss, s.ce, s.outside_change);
        }
    })?;
    let id = match &a.name {
        Some(name) => {
            let base = ck.latents.get(&a.latent)?.w.clone();
            let w = tpde::autodiff::Tensor::new(
                base.shape().to_vec(),
                base.data().iter().zip(trace.delta.data()).map(|(x, d)| x + d).collect(),
            )?;
            ck.latents.insert(tpde::netmodels::LatentEntry {
                id: name.clone(),
                w,
                provenance: tpde::netmodels::Provenance::Edited,
            })?;
            name.clone()
        }
        None => editing::commit_edit(&mut ck, &a.latent, &trace.delta)?,
    };
    let out = a.out.unwrap_or_else(|| a.checkpoint.clone());
    ck.save(&out)?;
    let trace_path = a.trace.unwrap_or_else(|| with_suffix(&out, ".edit.csv"));
    trace.write_csv(&trace_path)?;
    if let Some(prefix) = &a.renders {
        ensure_parent(prefix)?;
        write_render(&with_suffix(prefix, "_before"), &trace.before, &req.camera)?;
        write_render(&with_suffix(prefix, "_after"), &trace.after, &req.camera)?;
    }
    let norm = |v: &[f32]| v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
    let base = norm(ck.latents.get(&a.latent)?.w.data());
    println!(
        "added latent '{id}' to {} (|delta| = {:.1}% of |w|); trace in {}",
        out.display(),
        100.0 * norm(trace.delta.data()) / base.max(f64::MIN_POSITIVE),
        trace_path.display()
    );
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CmdResult {
    let report = gradcheck::run_suite(a.trials, a.seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.to_text());
    }
    if report.passed() {
        Ok(())
    } else {
        Err(format!("gradient check failed (worst rel err {:.3e})", report.worst()).into())
    }
}

fn serve(a: ServeArgs) -> CmdResult {
    let mut ck = Checkpoint::load(&a.checkpoint)?;
    let sidecar = a.sidecar.unwrap_or_else(|| with_suffix(&a.checkpoint, ".latents"));
    if sidecar.exists() {
        for e in checkpoint::load_latents(&sidecar)?.entries() {
            if ck.latents.get(&e.id).is_err() {
                ck.latents.insert(e.clone())?;
            }
        }
    }
    let state = server::start(ck, Some(sidecar));
    let app = server::router(state);
    let addr = format!("{}:{}", a.host, a.port);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app).await
    })?;
    Ok(())
}
