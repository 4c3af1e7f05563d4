//! Subcommand implementations behind the `vlsplat` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use vlsplat::augment::{BlendOptions, RatioMode};
use vlsplat::eval::{eval_frames, evaluate, EvalMode};
use vlsplat::fusion::FusionKind;
use vlsplat::io::{
    feature_map_to_tensor, load_checkpoint, load_scene, save_checkpoint, write_png, write_png_rgb8,
    CameraSpec, Checkpoint, Scene, Tensor,
};
use vlsplat::query::{heatmap_rgb8, relevancy};
use vlsplat::raster::{indicator_opacity_histogram, rasterize, IndicatorMode};
use vlsplat::scene::Camera;
use vlsplat::synth::{generate_synthetic, SynthSpec};
use vlsplat::train::{init_cloud, train, write_trace_csv, LossRecord, TrainConfig, TrainState};

/// Bad command-line usage that clap cannot detect by itself.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Process exit code for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<vlsplat::Error>() {
            return match e {
                vlsplat::Error::Numeric(_) => EXIT_NUMERIC,
                _ => EXIT_DATA,
            };
        }
    }
    EXIT_DATA
}

#[derive(Debug, Parser)]
#[command(
    name = "vlsplat",
    version,
    about = "Color + language Gaussian splatting"
)]
pub struct Cli {
    /// Random seed shared by every stochastic step.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for rasterization (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Single-threaded, fixed-order execution.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic labeled scene.
    Generate(GenerateArgs),
    /// Train a scene and write a checkpoint plus loss trace.
    Train(TrainArgs),
    /// Render color, relevancy heatmaps and the indicator histogram.
    Render(RenderArgs),
    /// Score a checkpoint against scene annotations.
    Eval(EvalArgs),
    /// Train and evaluate a grid of variants.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

impl FromStr for Size {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s.split_once(['x', 'X']).ok_or("expected WxH")?;
        let width: usize = w.parse().map_err(|_| format!("bad width '{w}'"))?;
        let height: usize = h.parse().map_err(|_| format!("bad height '{h}'"))?;
        if width == 0 || height == 0 {
            return Err("size must be positive".into());
        }
        Ok(Size { width, height })
    }
}

#[derive(Clone, Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub objects: usize,
    #[arg(long, default_value_t = 12)]
    pub views: usize,
    #[arg(long, default_value = "64x64")]
    pub size: Size,
    /// Add translucent glare patches above the objects.
    #[arg(long)]
    pub glare: bool,
}

/// Which parts of view blending are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlendSetting {
    Full,
    NoRot,
    NoTrans,
    NoSsim,
    Off,
}

impl FromStr for BlendSetting {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "full" => BlendSetting::Full,
            "no-rot" => BlendSetting::NoRot,
            "no-trans" => BlendSetting::NoTrans,
            "no-ssim" => BlendSetting::NoSsim,
            "off" => BlendSetting::Off,
            _ => return Err(format!("unknown blend setting '{s}'")),
        })
    }
}

impl BlendSetting {
    pub fn options(self) -> Option<BlendOptions> {
        let full = BlendOptions::default();
        match self {
            BlendSetting::Full => Some(full),
            BlendSetting::NoRot => Some(BlendOptions {
                rotation: false,
                ..full
            }),
            BlendSetting::NoTrans => Some(BlendOptions {
                translation: false,
                ..full
            }),
            BlendSetting::NoSsim => Some(BlendOptions {
                ssim_weight: false,
                ..full
            }),
            BlendSetting::Off => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BlendSetting::Full => "full",
            BlendSetting::NoRot => "no-rot",
            BlendSetting::NoTrans => "no-trans",
            BlendSetting::NoSsim => "no-ssim",
            BlendSetting::Off => "off",
        }
    }
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    s.parse().map_err(|e: vlsplat::Error| e.to_string())
}

fn parse_indicator(s: &str) -> Result<IndicatorMode, String> {
    s.parse().map_err(|e: vlsplat::Error| e.to_string())
}

fn parse_ratio(s: &str) -> Result<RatioMode, String> {
    s.parse().map_err(|e: vlsplat::Error| e.to_string())
}

/// Training knobs shared by `train` and `ablate`.
#[derive(Clone, Debug, Args)]
pub struct TrainOptions {
    #[arg(long, default_value_t = 15000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1.2)]
    pub lambda: f64,
    /// self | none | mlp1 | cross
    #[arg(long, default_value = "self", value_parser = parse_fusion)]
    pub fusion: FusionKind,
    /// learned | opacity | fixed:κ
    #[arg(long, default_value = "learned", value_parser = parse_indicator)]
    pub indicator: IndicatorMode,
    /// full | no-rot | no-trans | no-ssim | off
    #[arg(long, default_value = "full")]
    pub blend: BlendSetting,
    /// beta | uniform | gauss | fixed:κ
    #[arg(long, default_value = "beta", value_parser = parse_ratio)]
    pub ratio: RatioMode,
}

#[derive(Clone, Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Checkpoint directory to write.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub opts: TrainOptions,
    /// Also write a checkpoint every N iterations (under OUT/iter_NNNNNN).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Loss trace path (default: OUT/loss.csv).
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// `frame:i` (needs --scene) or a camera JSON file.
    #[arg(long)]
    pub camera: String,
    /// Scene providing frame cameras and query embeddings.
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Output path prefix.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalKind {
    Segment,
    Localize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum FrameSet {
    /// Held-out frames, or all annotated frames if none are held out.
    Test,
    All,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value = "segment")]
    pub mode: EvalKind,
    /// Per-query relevancy threshold; without it segmentation uses argmax.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "test")]
    pub frames: FrameSet,
    /// Also write the metrics JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// `AXIS` preset (indicator, ratio, fusion, blend) or `AXIS=v1,v2,...`;
    /// several axes are separated by `;`.
    #[arg(long)]
    pub grid: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Settings shared by every variant; the grid overrides one axis at a time.
    #[command(flatten)]
    pub opts: TrainOptions,
}

/// Flags that apply to every command.
#[derive(Clone, Copy, Debug)]
pub struct Globals {
    pub seed: u64,
    pub deterministic: bool,
}

pub fn configure_threads(threads: Option<usize>, deterministic: bool) -> anyhow::Result<()> {
    let n = if deterministic { Some(1) } else { threads };
    if let Some(n) = n {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    configure_threads(cli.threads, cli.deterministic)?;
    let g = Globals {
        seed: cli.seed,
        deterministic: cli.deterministic,
    };
    match cli.command {
        Command::Generate(a) => {
            let path = cmd_generate(&a, g)?;
            println!("{}", path.display());
        }
        Command::Train(a) => {
            let last = cmd_train(&a, g)?;
            if let Some(r) = last {
                println!(
                    "iter {} L1 {} L2 {} Lb {} total {}",
                    r.iter, r.losses.l1, r.losses.l2, r.losses.lb, r.losses.total
                );
            }
            println!("{}", a.out.display());
        }
        Command::Render(a) => {
            for p in cmd_render(&a)? {
                println!("{}", p.display());
            }
        }
        Command::Eval(a) => {
            let report = cmd_eval(&a)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Ablate(a) => {
            cmd_ablate(&a, g)?;
            println!("{}", a.out.display());
        }
    }
    Ok(())
}

pub fn cmd_generate(a: &GenerateArgs, g: Globals) -> anyhow::Result<PathBuf> {
    let spec = SynthSpec {
        n_objects: a.objects,
        width: a.size.width,
        height: a.size.height,
        n_views: a.views,
        seed: g.seed,
        glare: a.glare,
        ..SynthSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    Ok(generate_synthetic(&spec, &a.out)?)
}

pub fn train_config(o: &TrainOptions, g: Globals) -> TrainConfig {
    let mut cfg = TrainConfig {
        lambda: o.lambda,
        iterations: o.iters,
        seed: g.seed,
        fusion: o.fusion,
        indicator: o.indicator,
        blend: o.blend.options(),
        ratio: o.ratio,
        ..TrainConfig::default()
    };
    cfg.raster.parallel = !g.deterministic;
    cfg
}

/// Initial state for `scene`: its initialization points when present,
/// otherwise random points in the unit cube.
pub fn initial_state(scene: &Scene, cfg: &TrainConfig) -> anyhow::Result<TrainState> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(3);
    let (pts, cols) = match scene.init_points()? {
        Some(pc) => pc,
        None => {
            let pts: Vec<[f64; 3]> = (0..500)
                .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                .collect();
            let cols = vec![[0.5; 3]; pts.len()];
            (pts, cols)
        }
    };
    let cloud = init_cloud(&pts, Some(&cols), scene.manifest.d_f, &mut rng)?;
    Ok(TrainState::initial(cloud, cfg))
}

/// Train on `scene`; checkpoints go under `ckpt_dir` when the interval is set.
pub fn train_scene(
    scene: &Scene,
    cfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
) -> anyhow::Result<(TrainState, Vec<LossRecord>)> {
    let state = initial_state(scene, cfg)?;
    let dataset = scene.train_dataset();
    let (state, trace) = train(&dataset, state, cfg, |st, _| match ckpt_dir {
        Some(dir) => save_checkpoint(
            &Checkpoint {
                config: cfg.clone(),
                state: st.clone(),
            },
            &dir.join(format!("iter_{:06}", st.iteration)),
        ),
        None => Ok(()),
    })?;
    Ok((state, trace))
}

pub fn cmd_train(a: &TrainArgs, g: Globals) -> anyhow::Result<Option<LossRecord>> {
    let scene = load_scene(&a.scene)?;
    let mut cfg = train_config(&a.opts, g);
    cfg.checkpoint_interval = a.checkpoint_every;
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let (state, trace) = train_scene(&scene, &cfg, Some(&a.out))?;
    save_checkpoint(&Checkpoint { config: cfg, state }, &a.out)?;
    let csv = a.loss_csv.clone().unwrap_or_else(|| a.out.join("loss.csv"));
    let file = fs::File::create(&csv).with_context(|| format!("creating {}", csv.display()))?;
    write_trace_csv(&trace, std::io::BufWriter::new(file))
        .with_context(|| format!("writing {}", csv.display()))?;
    Ok(trace.last().copied())
}

fn resolve_camera(spec: &str, scene: Option<&Scene>) -> anyhow::Result<Camera> {
    if let Some(i) = spec.strip_prefix("frame:") {
        let i: usize = i
            .parse()
            .map_err(|_| usage(format!("bad frame index '{i}'")))?;
        let scene = scene.ok_or_else(|| usage("--camera frame:i needs --scene"))?;
        let s = scene.samples.get(i).ok_or_else(|| {
            vlsplat::Error::InvalidParameter(format!(
                "frame {i} does not exist (scene has {})",
                scene.samples.len()
            ))
        })?;
        return Ok(s.camera.clone());
    }
    let path = Path::new(spec);
    let bytes = fs::read(path).map_err(|e| vlsplat::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let cam: CameraSpec = serde_json::from_slice(&bytes).map_err(|e| vlsplat::Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(cam.to_camera()?)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn file_safe(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Returns the written paths.
pub fn cmd_render(a: &RenderArgs) -> anyhow::Result<Vec<PathBuf>> {
    let ck = load_checkpoint(&a.ckpt)?;
    let scene = a.scene.as_deref().map(load_scene).transpose()?;
    let cam = resolve_camera(&a.camera, scene.as_ref())?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let st = &ck.state;
    let out = rasterize(
        &st.cloud,
        &cam,
        &st.fusion,
        ck.config.indicator,
        &ck.config.raster,
    );
    let mut written = Vec::new();

    let p = with_suffix(&a.out, "_color.png");
    write_png(&p, &out.color)?;
    written.push(p);
    let p = with_suffix(&a.out, "_features.mgst");
    feature_map_to_tensor(&out.semantics)?.write(&p)?;
    written.push(p);

    if let Some(scene) = scene.as_ref().filter(|s| s.manifest.eval.is_some()) {
        let queries = scene.queries()?;
        let rel = relevancy(&out.semantics, &queries)?;
        let p = with_suffix(&a.out, "_relevancy.mgst");
        Tensor::f32(
            vec![cam.height, cam.width, queries.len()],
            rel.probs.clone(),
        )?
        .write(&p)?;
        written.push(p);
        for (q, label) in queries.labels.iter().enumerate() {
            let p = with_suffix(&a.out, &format!("_heat_{}.png", file_safe(label)));
            write_png_rgb8(&p, cam.width, cam.height, &heatmap_rgb8(&rel.channel(q)?))?;
            written.push(p);
        }
    }

    let p = with_suffix(&a.out, "_hist.csv");
    let mut w = std::io::BufWriter::new(
        fs::File::create(&p).with_context(|| format!("creating {}", p.display()))?,
    );
    writeln!(w, "bin_lo,bin_hi,count")?;
    for (lo, hi, n) in indicator_opacity_histogram(&st.cloud, 256) {
        writeln!(w, "{lo},{hi},{n}")?;
    }
    w.flush()?;
    written.push(p);
    Ok(written)
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub mode: &'static str,
    pub threshold: Option<f64>,
    pub frames: Vec<usize>,
    pub miou: Option<f64>,
    pub localization_accuracy: Option<f64>,
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<EvalReport> {
    let ck = load_checkpoint(&a.ckpt)?;
    let scene = load_scene(&a.scene)?;
    let frames = match a.frames {
        FrameSet::Test => eval_frames(&scene)?,
        FrameSet::All => scene.eval()?.frames.iter().map(|f| f.frame).collect(),
    };
    let mode = match a.mode {
        EvalKind::Segment => EvalMode::Segment {
            threshold: a.threshold,
        },
        EvalKind::Localize => EvalMode::Localize,
    };
    let st = &ck.state;
    let m = evaluate(
        &st.cloud,
        &st.fusion,
        ck.config.indicator,
        &ck.config.raster,
        &scene,
        &frames,
        mode,
    )?;
    let report = EvalReport {
        mode: match a.mode {
            EvalKind::Segment => "segment",
            EvalKind::Localize => "localize",
        },
        threshold: a.threshold,
        frames,
        miou: m.miou,
        localization_accuracy: m.localization_accuracy,
    };
    if let Some(p) = &a.out {
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        fs::write(p, bytes).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(report)
}

/// One variant of an ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub axis: String,
    pub value: String,
}

/// Expand a grid spec into variants.
pub fn parse_grid(spec: &str) -> anyhow::Result<Vec<Variant>> {
    let mut out = Vec::new();
    for part in spec.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (axis, values): (&str, Vec<&str>) = match part.split_once('=') {
            Some((a, v)) => (
                a.trim(),
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .collect(),
            ),
            None => (
                part,
                match part {
                    "indicator" => vec!["learned", "opacity", "fixed:0.5", "fixed:1.0"],
                    "ratio" => vec![
                        "fixed:0.5",
                        "fixed:0.75",
                        "fixed:1.0",
                        "uniform",
                        "gauss",
                        "beta",
                    ],
                    "fusion" => vec!["none", "mlp1", "cross", "self"],
                    "blend" => vec!["off", "no-rot", "no-trans", "no-ssim", "full"],
                    other => return Err(usage(format!("unknown grid preset '{other}'"))),
                },
            ),
        };
        if !["indicator", "ratio", "fusion", "blend"].contains(&axis) {
            return Err(usage(format!("unknown grid axis '{axis}'")));
        }
        for v in values {
            out.push(Variant {
                axis: axis.to_string(),
                value: v.to_string(),
            });
        }
    }
    if out.is_empty() {
        return Err(usage("ablation grid is empty"));
    }
    Ok(out)
}

fn apply_variant(o: &TrainOptions, v: &Variant) -> anyhow::Result<TrainOptions> {
    let mut o = o.clone();
    let bad = |e: String| usage(format!("{}={}: {e}", v.axis, v.value));
    match v.axis.as_str() {
        "indicator" => o.indicator = parse_indicator(&v.value).map_err(bad)?,
        "ratio" => o.ratio = parse_ratio(&v.value).map_err(bad)?,
        "fusion" => o.fusion = parse_fusion(&v.value).map_err(bad)?,
        "blend" => o.blend = v.value.parse().map_err(bad)?,
        other => return Err(usage(format!("unknown grid axis '{other}'"))),
    }
    Ok(o)
}

/// Result row of one ablation variant.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub miou: Option<f64>,
    pub localization_accuracy: Option<f64>,
    pub final_loss: Option<f64>,
}

/// Train and evaluate one configuration on `scene`.
pub fn train_and_score(
    scene: &Scene,
    cfg: &TrainConfig,
) -> anyhow::Result<(Option<f64>, Option<f64>, Option<f64>)> {
    let (state, trace) = train_scene(scene, cfg, None)?;
    let frames = eval_frames(scene)?;
    let seg = evaluate(
        &state.cloud,
        &state.fusion,
        cfg.indicator,
        &cfg.raster,
        scene,
        &frames,
        EvalMode::Segment { threshold: None },
    )?;
    let loc = evaluate(
        &state.cloud,
        &state.fusion,
        cfg.indicator,
        &cfg.raster,
        scene,
        &frames,
        EvalMode::Localize,
    )?;
    Ok((
        seg.miou,
        loc.localization_accuracy,
        trace.last().map(|r| r.losses.total),
    ))
}

pub fn cmd_ablate(a: &AblateArgs, g: Globals) -> anyhow::Result<Vec<AblationRow>> {
    let variants = parse_grid(&a.grid)?;
    let options: Vec<TrainOptions> = variants
        .iter()
        .map(|v| apply_variant(&a.opts, v))
        .collect::<anyhow::Result<_>>()?;
    let scene = load_scene(&a.scene)?;
    scene.eval()?;
    let mut rows = Vec::new();
    for (v, o) in variants.iter().zip(&options) {
        log::info!("ablation {}={}", v.axis, v.value);
        let cfg = train_config(o, g);
        let (miou, loc, loss) = train_and_score(&scene, &cfg)?;
        rows.push(AblationRow {
            axis: v.axis.clone(),
            variant: v.value.clone(),
            miou,
            localization_accuracy: loc,
            final_loss: loss,
        });
    }
    let mut w =
        csv::Writer::from_path(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
