//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 runtime failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use uaom_core::eval::{make_synthetic_pair, procedural_scene, random_homography, ModalityGap};
use uaom_core::features::Detector;
use uaom_core::matching::MatchSet;
use uaom_core::network::{Layer, NetworkModel};

use crate::container::load_container;
use crate::error::{Error, Result};
use crate::imageio::{load_png_gray, save_png_gray};
use crate::nnfio::encode_nnf;
use crate::pipeline::{evaluate_pair, prepare, transfer, Settings};
use crate::render::{render_keypoints, render_matches, render_nnf_flow};
use crate::report::{load_manifest, records_csv, run_manifest, write_json, RecordJson, DEFAULT_RUNS};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub const WEIGHTS_DIR_ENV: &str = "UAOM_WEIGHTS_DIR";
pub const BACKBONE_FILE: &str = "backbone.uaom";
pub const DESCRIPTOR_FILE: &str = "descriptor.uaom";

#[derive(Debug, Parser)]
#[command(name = "uaom", version, about = "Acoustic/optical image matching with attribute transfer")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Attribute transfer between two images; writes both latents.
    Transfer(PairArgs),
    /// Full matching pipeline on one pair.
    Match(MatchArgs),
    /// Averaged evaluation over a manifest of pairs.
    Eval(EvalArgs),
    /// Summarize and self-check a weight container.
    InspectWeights { path: PathBuf },
    /// Detect keypoints and draw them.
    InspectKeypoints(KeypointArgs),
    /// Write synthetic modality-gap pairs and a manifest for them.
    MakeSynthetic(SyntheticArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelKind {
    Homography,
    Affine,
}

/// Knobs shared by the pipeline commands. Unset values keep defaults.
#[derive(Debug, Clone, Args)]
pub struct PipelineArgs {
    /// Backbone container (default: $UAOM_WEIGHTS_DIR/backbone.uaom).
    #[arg(long)]
    pub weights_path: Option<PathBuf>,
    /// Descriptor container (default: $UAOM_WEIGHTS_DIR/descriptor.uaom).
    #[arg(long)]
    pub desc_weights_path: Option<PathBuf>,
    #[arg(long)]
    pub ratio: Option<f32>,
    #[arg(long)]
    pub ransac_thresh_px: Option<f64>,
    #[arg(long)]
    pub ransac_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub geometric_model: Option<ModelKind>,
    #[arg(long)]
    pub dedup_radius: Option<f32>,
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub max_side: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Content weights for levels 4,3,2,1.
    #[arg(long, value_parser = parse_list::<f32, 4>)]
    pub alpha: Option<[f32; 4]>,
    #[arg(long)]
    pub weight_kappa: Option<f32>,
    #[arg(long)]
    pub weight_tau: Option<f32>,
    /// Patch radius for levels 1..5.
    #[arg(long, value_parser = parse_list::<usize, 5>)]
    pub patch_radius: Option<[usize; 5]>,
    #[arg(long)]
    pub pm_iterations: Option<usize>,
    #[arg(long)]
    pub pm_search_samples: Option<usize>,
    /// Random search radius cap for levels 1..5, 0 is unbounded.
    #[arg(long, value_parser = parse_list::<usize, 5>)]
    pub search_radius: Option<[usize; 5]>,
    #[arg(long)]
    pub deconv_iterations: Option<usize>,
    #[arg(long)]
    pub deconv_step: Option<f32>,
    #[arg(long)]
    pub max_kp: Option<usize>,
    #[arg(long)]
    pub detect_threshold: Option<f32>,
    #[arg(long)]
    pub affine_shape: bool,
    /// `off` zeroes every reported time so outputs are byte-reproducible.
    #[arg(long, value_enum, default_value = "on")]
    pub timing: Toggle,
}

/// Parses exactly `N` comma separated values.
fn parse_list<T, const N: usize>(s: &str) -> std::result::Result<[T; N], String>
where
    T: std::str::FromStr + Copy + Default,
    T::Err: std::fmt::Display,
{
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != N {
        return Err(format!("expected {N} comma separated values, got {}", parts.len()));
    }
    let mut out = [T::default(); N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.parse().map_err(|e| format!("{p:?}: {e}"))?;
    }
    Ok(out)
}

impl PipelineArgs {
    pub fn settings(&self) -> Result<Settings> {
        let mut s = Settings::default();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { s.$f = v; } )* };
        }
        take!(
            ratio, ransac_thresh_px, ransac_iters, dedup_radius, levels, max_side, seed,
            weight_kappa, weight_tau, pm_iterations, pm_search_samples, deconv_iterations,
            deconv_step, max_kp, detect_threshold
        );
        if let Some(m) = self.geometric_model {
            s.geometric_model = match m {
                ModelKind::Homography => "homography".into(),
                ModelKind::Affine => "affine".into(),
            };
        }
        if let Some(a) = self.alpha {
            s.alpha = a;
        }
        if let Some(r) = self.patch_radius {
            s.patch_radius = r;
        }
        if let Some(r) = self.search_radius {
            s.search_radius = r;
        }
        s.affine_shape = self.affine_shape;
        s.timing = self.timing == Toggle::On;
        s.validate()?;
        Ok(s)
    }

    fn resolve(explicit: &Option<PathBuf>, file: &str, what: &str) -> Result<PathBuf> {
        if let Some(p) = explicit {
            return Ok(p.clone());
        }
        match std::env::var_os(WEIGHTS_DIR_ENV) {
            Some(dir) => Ok(Path::new(&dir).join(file)),
            None => Err(Error::Config(format!(
                "no {what} weights: pass --{}-path or set {WEIGHTS_DIR_ENV}",
                if what == "backbone" { "weights" } else { "desc-weights" }
            ))),
        }
    }

    pub fn backbone_path(&self) -> Result<PathBuf> {
        Self::resolve(&self.weights_path, BACKBONE_FILE, "backbone")
    }

    pub fn descriptor_path(&self) -> Result<PathBuf> {
        Self::resolve(&self.desc_weights_path, DESCRIPTOR_FILE, "descriptor")
    }
}

#[derive(Debug, Clone, Args)]
pub struct PairArgs {
    #[arg(long)]
    pub image_a: PathBuf,
    #[arg(long)]
    pub image_b: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct MatchArgs {
    #[command(flatten)]
    pub pair: PairArgs,
    #[arg(long, default_value = "pair")]
    pub pair_id: String,
    /// Also run and report matching without transfer.
    #[arg(long)]
    pub baseline: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub baseline: bool,
    #[command(flatten)]
    pub pipeline: PipelineArgs,
}

#[derive(Debug, Clone, Args)]
pub struct KeypointArgs {
    #[arg(long)]
    pub image: PathBuf,
    /// Overlay PNG to write.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub max_kp: Option<usize>,
    #[arg(long)]
    pub detect_threshold: Option<f32>,
    #[arg(long)]
    pub affine_shape: bool,
    #[arg(long, default_value_t = 448)]
    pub max_side: usize,
}

#[derive(Debug, Clone, Args)]
pub struct SyntheticArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub count: usize,
    #[arg(long, default_value_t = 192)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corner perturbation of the ground-truth homography, as a fraction
    /// of the image side.
    #[arg(long, default_value_t = 0.08)]
    pub strength: f64,
    #[arg(long)]
    pub gamma: Option<f32>,
    #[arg(long, allow_hyphen_values = true)]
    pub contrast: Option<f32>,
    #[arg(long)]
    pub speckle: Option<f32>,
    #[arg(long)]
    pub blur: Option<f32>,
    #[arg(long, default_value_t = DEFAULT_RUNS)]
    pub runs: usize,
}

/// What every run writes next to its outputs.
#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    command: &'a str,
    version: &'a str,
    inputs: Vec<PathBuf>,
    weights_path: Option<PathBuf>,
    desc_weights_path: Option<PathBuf>,
    out_dir: &'a Path,
    settings: Option<&'a Settings>,
    #[serde(skip_serializing_if = "Option::is_none")]
    synthetic: Option<serde_json::Value>,
}

fn echo(
    command: &str,
    out_dir: &Path,
    inputs: Vec<PathBuf>,
    weights: Option<(&Path, &Path)>,
    settings: Option<&Settings>,
) -> Result<()> {
    let e = ConfigEcho {
        command,
        version: env!("CARGO_PKG_VERSION"),
        inputs,
        weights_path: weights.map(|w| w.0.to_path_buf()),
        desc_weights_path: weights.map(|w| w.1.to_path_buf()),
        out_dir,
        settings,
        synthetic: None,
    };
    write_json(&e, &out_dir.join("config.json"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_net(path: &Path) -> Result<NetworkModel> {
    Ok(load_container(path)?.model)
}

struct Loaded {
    settings: Settings,
    backbone_path: PathBuf,
    desc_path: PathBuf,
    backbone: NetworkModel,
    desc: NetworkModel,
}

fn load_pipeline(p: &PipelineArgs) -> Result<Loaded> {
    let settings = p.settings()?;
    let backbone_path = p.backbone_path()?;
    let desc_path = p.descriptor_path()?;
    let backbone = load_net(&backbone_path)?;
    let desc = load_net(&desc_path)?;
    uaom_core::features::check_descriptor_contract(&desc).map_err(|e| {
        Error::Config(format!("{}: {e}", desc_path.display()))
    })?;
    Ok(Loaded {
        settings,
        backbone_path,
        desc_path,
        backbone,
        desc,
    })
}

fn cmd_transfer(a: &PairArgs) -> Result<()> {
    let l = load_pipeline(&a.pipeline)?;
    let img_a = load_png_gray(&a.image_a)?;
    let img_b = load_png_gray(&a.image_b)?;
    create_dir(&a.out_dir)?;
    echo(
        "transfer",
        &a.out_dir,
        vec![a.image_a.clone(), a.image_b.clone()],
        Some((&l.backbone_path, &l.desc_path)),
        Some(&l.settings),
    )?;
    let pa = prepare(&img_a, l.settings.max_side)?;
    let pb = prepare(&img_b, l.settings.max_side)?;
    let tr = transfer(&pa.work, &pb.work, &l.backbone, &l.settings)?;
    let out = &tr.output;
    save_png_gray(&out.latent_a, a.out_dir.join("latent_a.png"))?;
    save_png_gray(&out.latent_b, a.out_dir.join("latent_b.png"))?;
    for (name, field) in [("phi_ab", &out.phi_ab), ("phi_ba", &out.phi_ba)] {
        let bin = a.out_dir.join(format!("{name}.nnf"));
        fs::write(&bin, encode_nnf(field)).map_err(|e| Error::io(&bin, e))?;
        let png = a.out_dir.join(format!("{name}_flow.png"));
        fs::write(&png, render_nnf_flow(field)).map_err(|e| Error::io(&png, e))?;
    }
    let r = &out.report;
    let sidecar = json!({
        "settings": l.settings,
        "working_size_a": [pa.work.height(), pa.work.width()],
        "working_size_b": [pb.work.height(), pb.work.width()],
        "level_costs": r.level_costs.iter().map(|(lvl, ab, ba)| json!({
            "level": lvl, "cost_ab": ab, "cost_ba": ba
        })).collect::<Vec<_>>(),
        "weight_means": r.weight_means.iter().map(|(lvl, wa, wb)| json!({
            "level": lvl, "mean_a": wa, "mean_b": wb
        })).collect::<Vec<_>>(),
        "deconv_traces": r.deconv_traces.iter().map(|(lvl, side, t)| json!({
            "level": lvl,
            "side": side.to_string(),
            "objective": t.objective,
            "rejected_steps": t.rejected_steps,
            "final_step": t.final_step,
        })).collect::<Vec<_>>(),
        "stages": tr.stages,
        "transfer_s": tr.seconds,
    });
    write_json(&sidecar, &a.out_dir.join("transfer.json"))
}

#[derive(Serialize)]
struct MatchLine<'a> {
    idx_a: usize,
    idx_b: usize,
    pt_a: [f32; 2],
    pt_b: [f32; 2],
    dist: f32,
    ratio: f32,
    inlier: bool,
    origin: &'a str,
}

pub fn matches_jsonl(set: &MatchSet) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for (m, &inlier) in set.matches.iter().zip(&set.inlier_flags) {
        let line = MatchLine {
            idx_a: m.idx_a,
            idx_b: m.idx_b,
            pt_a: m.pt_a,
            pt_b: m.pt_b,
            dist: m.dist,
            ratio: m.ratio,
            inlier,
            origin: m.origin.as_str(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.push(b'\n');
    }
    Ok(out)
}

fn cmd_match(a: &MatchArgs) -> Result<()> {
    let p = &a.pair;
    let l = load_pipeline(&p.pipeline)?;
    let img_a = load_png_gray(&p.image_a)?;
    let img_b = load_png_gray(&p.image_b)?;
    create_dir(&p.out_dir)?;
    echo(
        "match",
        &p.out_dir,
        vec![p.image_a.clone(), p.image_b.clone()],
        Some((&l.backbone_path, &l.desc_path)),
        Some(&l.settings),
    )?;
    let out = evaluate_pair(&img_a, &img_b, &l.backbone, &l.desc, &l.settings, &a.pair_id, a.baseline)?;
    let path = p.out_dir.join("matches.jsonl");
    fs::write(&path, matches_jsonl(&out.matches)?).map_err(|e| Error::io(&path, e))?;
    render_matches(
        &out.prepared_a.original,
        &out.prepared_b.original,
        &out.matches,
        p.out_dir.join("matches.png"),
    )?;
    let mut records = vec![RecordJson::from(&out.record)];
    if let Some((r, set)) = &out.raw {
        records.push(RecordJson::from(r));
        let path = p.out_dir.join("matches_raw.jsonl");
        fs::write(&path, matches_jsonl(set)?).map_err(|e| Error::io(&path, e))?;
    }
    write_json(
        &json!({ "records": records, "stages": out.stages }),
        &p.out_dir.join("record.json"),
    )?;
    let r = &out.record;
    println!(
        "{}: gm {} inl {} ma {:.2}{}",
        r.pair_id,
        r.gm,
        r.inl,
        r.ma,
        if r.degenerate { " (degenerate)" } else { "" }
    );
    Ok(())
}

/// Returns whether at least one entry succeeded.
fn cmd_eval(a: &EvalArgs) -> Result<bool> {
    let l = load_pipeline(&a.pipeline)?;
    let entries = load_manifest(&a.manifest)?;
    create_dir(&a.out_dir)?;
    echo(
        "eval",
        &a.out_dir,
        vec![a.manifest.clone()],
        Some((&l.backbone_path, &l.desc_path)),
        Some(&l.settings),
    )?;
    let report = run_manifest(&entries, &l.backbone, &l.desc, &l.settings, a.baseline);
    let csv_path = a.out_dir.join("eval.csv");
    fs::write(&csv_path, records_csv(report.records())?).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&report, &a.out_dir.join("eval.json"))?;
    for e in &report.entries {
        match &e.error {
            Some(err) => eprintln!("{}: failed: {err}", e.pair_id),
            None => {
                for r in &e.records {
                    println!("{} {}: gm {} inl {} ma {:.2}", r.pair_id, r.method, r.gm, r.inl, r.ma);
                }
            }
        }
    }
    Ok(report.succeeded() > 0)
}

fn cmd_inspect_weights(path: &Path) -> Result<()> {
    let c = load_container(path)?;
    let m = &c.model;
    let spec = m.input_spec();
    let mut out = std::io::stdout().lock();
    let mut w = |s: String| {
        let _ = writeln!(out, "{s}");
    };
    w(format!("{}", path.display()));
    w(format!(
        "input: {} channel(s), mean {:?}, std {:?}",
        spec.channels, spec.mean, spec.std
    ));
    for layer in m.layers() {
        w(match layer {
            Layer::Conv { name, spec } => format!(
                "  {name}: conv {}x{} {} -> {}, stride {}, pad {}{}",
                spec.kernel_h,
                spec.kernel_w,
                spec.in_channels,
                spec.out_channels,
                spec.stride,
                spec.padding,
                if spec.has_relu { ", relu" } else { "" }
            ),
            Layer::MaxPool { name } => format!("  {name}: max pool 2x2"),
        });
    }
    let taps: Vec<&str> = m.taps().iter().map(|t| t.label.as_str()).collect();
    w(format!("taps: {}", taps.join(", ")));
    w(format!("output channels: {}, unit norm: {}", m.output_channels(), m.unit_norm_output()));
    if let Some(seed) = c.header.fixture_seed {
        w(format!("fixture seed: {seed}"));
    }
    match c.references.len() {
        0 => w("no reference activations".into()),
        n => w(format!("{n} reference activation(s) verified")),
    }
    Ok(())
}

fn cmd_inspect_keypoints(a: &KeypointArgs) -> Result<()> {
    let img = load_png_gray(&a.image)?;
    let p = prepare(&img, a.max_side)?;
    let mut det = uaom_core::features::HessianDetector {
        affine_shape: a.affine_shape,
        ..Default::default()
    };
    if let Some(k) = a.max_kp {
        det.max_kp = k;
    }
    if let Some(t) = a.detect_threshold {
        det.threshold = t;
    }
    let kps = det.detect(&p.work);
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(&a.out, render_keypoints(&p.work, &kps)).map_err(|e| Error::io(&a.out, e))?;
    println!("{} keypoints", kps.len());
    Ok(())
}

fn cmd_make_synthetic(a: &SyntheticArgs) -> Result<()> {
    if a.size < uaom_core::network::MIN_PYRAMID_SIDE || a.runs == 0 {
        return Err(Error::Config(format!(
            "size must be at least {} and runs positive",
            uaom_core::network::MIN_PYRAMID_SIDE
        )));
    }
    let mut gap = ModalityGap::default();
    if let Some(v) = a.gamma {
        gap.gamma = v;
    }
    if let Some(v) = a.contrast {
        gap.contrast = v;
    }
    if let Some(v) = a.speckle {
        gap.speckle_sigma = v;
    }
    if let Some(v) = a.blur {
        gap.blur = v;
    }
    create_dir(&a.out_dir)?;
    let e = ConfigEcho {
        command: "make-synthetic",
        version: env!("CARGO_PKG_VERSION"),
        inputs: vec![],
        weights_path: None,
        desc_weights_path: None,
        out_dir: &a.out_dir,
        settings: None,
        synthetic: Some(json!({
            "count": a.count,
            "size": a.size,
            "seed": a.seed,
            "strength": a.strength,
            "gamma": gap.gamma,
            "contrast": gap.contrast,
            "speckle": gap.speckle_sigma,
            "blur": gap.blur,
            "runs": a.runs,
        })),
    };
    write_json(&e, &a.out_dir.join("config.json"))?;
    let mut entries = Vec::new();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        let pair = synthetic_pair(a.size, seed, a.strength, &gap)?;
        let (fa, fb) = (format!("pair_{i:02}_a.png"), format!("pair_{i:02}_b.png"));
        save_png_gray(&pair.a, a.out_dir.join(&fa))?;
        save_png_gray(&pair.b, a.out_dir.join(&fb))?;
        let h = pair.ground_truth;
        entries.push(json!({
            "pair_id": format!("synthetic_{i:02}"),
            "path_a": fa,
            "path_b": fb,
            "expected_transform": (0..3).map(|r| (0..3).map(|c| h[(r, c)]).collect::<Vec<_>>()).collect::<Vec<_>>(),
            "runs": a.runs,
        }));
    }
    write_json(&entries, &a.out_dir.join("manifest.json"))?;
    println!("{} pairs in {}", a.count, a.out_dir.display());
    Ok(())
}

/// The seeded synthetic pair used by `make-synthetic`.
pub fn synthetic_pair(
    size: usize,
    seed: u64,
    strength: f64,
    gap: &ModalityGap,
) -> Result<uaom_core::eval::SyntheticPair> {
    let base = procedural_scene(size, size, seed);
    let h = random_homography(size, size, strength, seed ^ 0x5eed);
    Ok(make_synthetic_pair(&base, &h, gap, seed.wrapping_mul(31).wrapping_add(7))?)
}

/// Maps an error to its exit code.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config() {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(j) = cli.jobs {
        if j == 0 {
            eprintln!("error: --jobs must be positive");
            return EXIT_USAGE;
        }
        // fails only if a pool already exists, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(j).build_global();
    }
    let result = match &cli.command {
        Command::Transfer(a) => cmd_transfer(a).map(|_| true),
        Command::Match(a) => cmd_match(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectWeights { path } => cmd_inspect_weights(path).map(|_| true),
        Command::InspectKeypoints(a) => cmd_inspect_keypoints(a).map(|_| true),
        Command::MakeSynthetic(a) => cmd_make_synthetic(a).map(|_| true),
    };
    match result {
        Ok(true) => EXIT_OK,
        Ok(false) => {
            eprintln!("error: no manifest entry succeeded");
            EXIT_RUNTIME
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` and runs; clap usage errors exit with code 2.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
