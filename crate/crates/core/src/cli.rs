//! Command-line front end: subcommands, run configuration and manifests.
//!
//! Every subcommand that writes files writes them into `--out` together with
//! a `manifest.json` listing the effective configuration and SHA-256 digests
//! of inputs and outputs. Machine-readable results go to stdout as JSON;
//! progress and errors go to stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::camera::Pose;
use crate::colorize::{colorize_flow, colorize_map};
use crate::crossloss::{evaluate, LossKind};
use crate::error::{Error, Result};
use crate::gradcheck::{run_suite, CheckOptions, GradReport};
use crate::grid::ScalarMap;
use crate::io::{self, CameraDoc};
use crate::loss::{LossConfig, LossState, NEXT, PREV};
use crate::occlusion::occlusion_from_flow;
use crate::refine::{refine, write_trajectory_csv, PosePerturbation, RefineConfig, RefineLoss, RefineOutcome};
use crate::synthworld::{
    self, gradcheck_state, moving_object_scene, render, rigid_scene, write_scene_dir, SceneSpec,
};

/// Exit status when a requested check fails.
pub const EXIT_CHECK_FAILED: i32 = 1;
/// Exit status on invalid input, configuration or I/O failure.
pub const EXIT_ERROR: i32 = 2;

pub const MANIFEST: &str = "manifest.json";

/// Settings read from `--config`; command-line flags override them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub loss: LossConfig,
    pub refine: RefineConfig,
    pub gradcheck: CheckOptions,
    pub perturb: PosePerturbation,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => io::read_structured(p)?,
            None => RunConfig::default(),
        };
        cfg.loss.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Parser)]
#[command(name = "geoloss", version, about = "Occlusion-aware cross-weighted losses for depth, pose and flow")]
pub struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "GEOLOSS_THREADS")]
    pub threads: Option<usize>,
    /// TOML or JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic scene directory from a scene spec or a preset.
    Synth(SynthArgs),
    /// Evaluate one loss on a scene directory.
    EvalLoss(EvalArgs),
    /// Occlusion map of a backward flow file.
    Occlusion(OcclusionArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Recover the source poses of a scene from a perturbed start.
    Refine(RefineArgs),
    /// Colorize the maps of a scene directory, or a single PFM/FLO file.
    Visualize(VisualizeArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Rigid,
    MovingObject,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene spec (JSON or TOML); omit to use --preset.
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, conflicts_with = "spec")]
    pub preset: Option<Preset>,
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    #[arg(long, default_value_t = 96)]
    pub height: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LossArg {
    Op,
    Ap,
    S,
    Total,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Op => LossKind::Op,
            LossArg::Ap => LossKind::Ap,
            LossArg::S => LossKind::S,
            LossArg::Total => LossKind::Total,
        }
    }
}

/// Loss overrides shared by the commands that evaluate losses.
#[derive(Debug, Args)]
pub struct LossOverrides {
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Set every task weight to 1.
    #[arg(long)]
    pub no_gating: bool,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_eo: Option<f64>,
    #[arg(long)]
    pub lambda_ed: Option<f64>,
}

impl LossOverrides {
    fn apply(&self, cfg: &mut LossConfig) {
        if let Some(v) = self.threshold {
            cfg.threshold = v;
        }
        if self.no_gating {
            cfg.gating = false;
        }
        if let Some(v) = self.lambda_s {
            cfg.lambda_s = v;
        }
        if let Some(v) = self.lambda_eo {
            cfg.lambda_eo = v;
        }
        if let Some(v) = self.lambda_ed {
            cfg.lambda_ed = v;
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub scene: PathBuf,
    #[arg(long, value_enum, default_value = "total")]
    pub loss: LossArg,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: LossOverrides,
}

#[derive(Debug, Args)]
pub struct OcclusionArgs {
    /// Backward flow (source to target) in FLO format.
    pub flow: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Scene directory; omit to use the built-in 64x48 check scene.
    pub scene: Option<PathBuf>,
    /// Seed of the built-in check scene.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub subsample: Option<usize>,
    /// Multiplies every analytic gradient (negative control).
    #[arg(long, hide = true)]
    pub inject_scale: Option<f64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: LossOverrides,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    pub scene: PathBuf,
    /// `ROT_DEG,TRANS_PCT[,SEED]`; `0,0` starts at the scene poses.
    #[arg(long)]
    pub perturb: Option<String>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, value_enum)]
    pub loss: Option<RefineLossArg>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Run with gating on and off and report both trajectories.
    #[arg(long)]
    pub ablation: bool,
    #[arg(long, short)]
    pub out: PathBuf,
    #[command(flatten)]
    pub overrides: LossOverrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RefineLossArg {
    Ap,
    Total,
}

#[derive(Debug, Args)]
pub struct VisualizeArgs {
    /// Scene directory, `.pfm` map or `.flo` flow.
    pub input: PathBuf,
    #[arg(long, short)]
    pub out: PathBuf,
}

/// Record of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub threads: Option<usize>,
    pub config: Value,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn digests(paths: &[PathBuf], base: Option<&Path>) -> Result<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let shown = base.and_then(|b| p.strip_prefix(b).ok()).unwrap_or(p);
            Ok(FileDigest {
                path: shown.display().to_string(),
                sha256: sha256_file(p)?,
            })
        })
        .collect()
}

/// Files of a scene directory, in name order.
fn dir_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.is_file() && p.file_name().is_some_and(|n| n != MANIFEST) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

struct Run {
    command: &'static str,
    threads: Option<usize>,
    start: Instant,
    out: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Run {
    fn new(command: &'static str, threads: Option<usize>, out: Option<&Path>) -> Result<Self> {
        if let Some(dir) = out {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        Ok(Run {
            command,
            threads,
            start: Instant::now(),
            out: out.map(Path::to_path_buf),
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn out_path(&mut self, name: &str) -> PathBuf {
        let p = self.out.as_ref().expect("command has an output directory").join(name);
        self.outputs.push(p.clone());
        p
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.out_path(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    }

    fn finish(self, config: Value) -> Result<()> {
        let Some(dir) = &self.out else {
            return Ok(());
        };
        let manifest = RunManifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            threads: self.threads,
            config,
            inputs: digests(&self.inputs, None)?,
            outputs: digests(&self.outputs, Some(dir))?,
            wall_time_s: self.start.elapsed().as_secs_f64(),
        };
        let p = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&p, text + "\n").map_err(|e| Error::io(&p, e))
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("config serializes")
}

fn print_json(v: &Value) {
    use std::io::Write;
    let text = serde_json::to_string_pretty(v).expect("json serializes");
    // a closed pipe (e.g. `| head`) is not an error of the command
    let _ = writeln!(std::io::stdout().lock(), "{text}");
}

/// Outcome of a subcommand: JSON for stdout and whether its checks passed.
pub struct Report {
    pub json: Value,
    pub pass: bool,
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main_entry() -> i32 {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            print_json(&report.json);
            if report.pass {
                0
            } else {
                EXIT_CHECK_FAILED
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Report> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config("--threads must be >= 1".into()));
        }
        // fails only when a pool already exists (repeated calls in one process)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let mut inputs = Vec::new();
    if let Some(p) = &cli.config {
        inputs.push(p.clone());
    }
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, cli.threads, inputs),
        Command::EvalLoss(a) => cmd_eval_loss(a, cfg, cli.threads, inputs),
        Command::Occlusion(a) => cmd_occlusion(a, cli.threads, inputs),
        Command::Gradcheck(a) => cmd_gradcheck(a, cfg, cli.threads, inputs),
        Command::Refine(a) => cmd_refine(a, cfg, cli.threads, inputs),
        Command::Visualize(a) => cmd_visualize(a, cli.threads, inputs),
    }
}

fn cmd_synth(a: &SynthArgs, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    let mut run = Run::new("synth", threads, Some(&a.out))?;
    run.inputs = inputs;
    let spec: SceneSpec = match (&a.spec, a.preset) {
        (Some(p), _) => {
            run.inputs.push(p.clone());
            io::read_structured(p)?
        }
        (None, Some(Preset::Rigid)) => rigid_scene(a.width, a.height, a.seed),
        (None, Some(Preset::MovingObject)) => moving_object_scene(a.width, a.height, a.seed),
        (None, None) => return Err(Error::Config("synth needs a scene spec file or --preset".into())),
    };
    eprintln!("rendering {}x{} scene", spec.width, spec.height);
    let truth = render(&spec)?;
    run.outputs = write_scene_dir(&truth, &a.out)?;
    let object_pixels = truth.object_mask.data().iter().filter(|&&v| v > 0.5).count();
    let json = json!({
        "command": "synth",
        "out": a.out.display().to_string(),
        "width": truth.width(),
        "height": truth.height(),
        "files": run.outputs.iter().filter_map(|p| p.file_name()).map(|n| n.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "consistency_residual": truth.consistency_residual,
        "object_pixels": object_pixels,
    });
    run.finish(json!({ "spec": to_value(&spec) }))?;
    Ok(Report { json, pass: true })
}

/// Writes `map` as `<stem>.pfm` plus a colorized `<stem>.ppm`.
fn write_map_pair(run: &mut Run, map: &ScalarMap, stem: &str) -> Result<(PathBuf, PathBuf)> {
    let pfm = run.out_path(&format!("{stem}.pfm"));
    io::write_pfm(&map.to_image(), &pfm)?;
    let ppm = run.out_path(&format!("{stem}.ppm"));
    io::write_ppm(&colorize_map(map)?, &ppm)?;
    Ok((pfm, ppm))
}

/// Scene files `kind` reads; float image copies replace their PPM originals.
fn scene_inputs(dir: &Path, kind: LossKind) -> Vec<PathBuf> {
    synthworld::required_files(kind)
        .into_iter()
        .map(|f| {
            let copy = dir.join(f.replace(".ppm", ".pfm"));
            if f.ends_with(".ppm") && copy.exists() {
                copy
            } else {
                dir.join(f)
            }
        })
        .filter(|p| p.exists())
        .collect()
}

fn cmd_eval_loss(a: &EvalArgs, mut cfg: RunConfig, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    a.overrides.apply(&mut cfg.loss);
    cfg.loss.validate()?;
    let kind = LossKind::from(a.loss);
    let state = synthworld::read_scene_dir(&a.scene, kind)?;
    let mut run = Run::new("eval-loss", threads, Some(&a.out))?;
    run.inputs = inputs;
    run.inputs.extend(scene_inputs(&a.scene, kind));
    let bundle = evaluate(&state, &cfg.loss, kind, false)?;
    let (pfm, ppm) = write_map_pair(&mut run, &bundle.per_pixel, &format!("loss_{}", kind.name()))?;
    let json = json!({
        "command": "eval-loss",
        "loss": kind.name(),
        "value": bundle.value,
        "per_pixel": pfm.display().to_string(),
        "colorized": ppm.display().to_string(),
        "flags": to_value(&bundle.flags),
    });
    run.finish(json!({ "loss": kind.name(), "loss_config": to_value(&cfg.loss) }))?;
    Ok(Report { json, pass: true })
}

fn cmd_occlusion(a: &OcclusionArgs, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    let flow = io::read_flo(&a.flow)?;
    let mut run = Run::new("occlusion", threads, Some(&a.out))?;
    run.inputs = inputs;
    run.inputs.push(a.flow.clone());
    let occ = occlusion_from_flow(&flow, flow.width(), flow.height());
    let map = occ.as_map();
    let (pfm, ppm) = write_map_pair(&mut run, map, "occlusion")?;
    let occluded = map.data().iter().filter(|&&v| v < 0.5).count();
    let json = json!({
        "command": "occlusion",
        "width": map.width(),
        "height": map.height(),
        "occluded_fraction": occluded as f64 / map.len() as f64,
        "map": pfm.display().to_string(),
        "colorized": ppm.display().to_string(),
    });
    run.finish(json!({}))?;
    Ok(Report { json, pass: true })
}

fn cmd_gradcheck(a: &GradcheckArgs, mut cfg: RunConfig, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    a.overrides.apply(&mut cfg.loss);
    cfg.loss.validate()?;
    let opts = &mut cfg.gradcheck;
    if let Some(v) = a.tol {
        opts.tol = v;
    }
    if let Some(v) = a.h {
        opts.h = v;
    }
    if let Some(v) = a.subsample {
        opts.subsample = v;
    }
    if let Some(v) = a.inject_scale {
        opts.analytic_scale = v;
    }
    if !(opts.h > 0.0 && opts.tol >= 0.0) {
        return Err(Error::Config(format!("need h > 0 and tol >= 0, got h = {}, tol = {}", opts.h, opts.tol)));
    }
    let mut run = Run::new("gradcheck", threads, a.out.as_deref())?;
    run.inputs = inputs;
    let state = match &a.scene {
        Some(dir) => {
            run.inputs.extend(scene_inputs(dir, LossKind::Total));
            synthworld::read_scene_dir(dir, LossKind::Total)?
        }
        None => gradcheck_state(a.seed)?,
    };
    let reports: Vec<GradReport> = run_suite(&state, &cfg.loss, &cfg.gradcheck)?;
    for r in &reports {
        eprintln!(
            "{:<18} max rel {:.3e} ({})",
            r.name,
            r.max_rel_err,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let pass = reports.iter().all(|r| r.pass);
    let json = to_value(&reports);
    if a.out.is_some() {
        run.write_text("gradcheck.json", &(serde_json::to_string_pretty(&json).expect("json") + "\n"))?;
    }
    run.finish(json!({
        "scene": a.scene.as_ref().map(|p| p.display().to_string()),
        "seed": a.seed,
        "gradcheck": to_value(&cfg.gradcheck),
        "loss_config": to_value(&cfg.loss),
    }))?;
    Ok(Report { json, pass })
}

/// Parses `ROT_DEG,TRANS_PCT[,SEED]`.
pub fn parse_perturbation(text: &str, base: PosePerturbation) -> Result<PosePerturbation> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("--perturb expects ROT_DEG,TRANS_PCT[,SEED], got {text:?}"));
    if !(2..=3).contains(&parts.len()) {
        return Err(bad());
    }
    let mut p = base;
    p.rotation_deg = parts[0].parse().map_err(|_| bad())?;
    p.translation_pct = parts[1].parse().map_err(|_| bad())?;
    if let Some(s) = parts.get(2) {
        p.seed = s.parse().map_err(|_| bad())?;
    }
    if !(p.rotation_deg >= 0.0 && p.translation_pct >= 0.0) {
        return Err(bad());
    }
    Ok(p)
}

fn pose_json(k: &crate::camera::Intrinsics, poses: &[Pose; 2]) -> Value {
    json!({
        "prev": to_value(&CameraDoc::new(k, &poses[PREV])),
        "next": to_value(&CameraDoc::new(k, &poses[NEXT])),
    })
}

fn outcome_json(state: &LossState, out: &RefineOutcome) -> Value {
    let last = out.final_point();
    json!({
        "stop": to_value(&out.stop),
        "iterations": last.iteration,
        "iterations_used": out.iterations_used,
        "restarted": out.restarted,
        "loss": last.loss,
        "grad_norm": last.grad_norm,
        "error": to_value(&last.error),
        "poses": pose_json(&state.intrinsics, &out.state.poses()),
    })
}

fn cmd_refine(a: &RefineArgs, mut cfg: RunConfig, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    a.overrides.apply(&mut cfg.loss);
    if let Some(text) = &a.perturb {
        cfg.perturb = parse_perturbation(text, cfg.perturb)?;
    }
    if let Some(n) = a.iterations {
        cfg.refine.iterations = n;
    }
    if let Some(n) = a.warmup {
        cfg.refine.warmup_iterations = n;
    }
    if let Some(l) = a.loss {
        cfg.refine.loss = match l {
            RefineLossArg::Ap => RefineLoss::Ap,
            RefineLossArg::Total => RefineLoss::Total,
        };
    }
    cfg.refine.loss_config = cfg.loss;
    cfg.refine.validate()?;
    let kind = cfg.refine.loss.kind();
    let truth_state = synthworld::read_scene_dir(&a.scene, kind)?;
    let mut run = Run::new("refine", threads, Some(&a.out))?;
    run.inputs = inputs;
    run.inputs.extend(scene_inputs(&a.scene, kind));
    let truth = truth_state.poses();
    let start = truth_state.with_poses(cfg.perturb.apply(&truth)?);
    let variants: Vec<(&str, bool)> = if a.ablation {
        vec![("gated", true), ("ungated", false)]
    } else {
        vec![("", cfg.loss.gating)]
    };
    let mut results = serde_json::Map::new();
    let mut scores = Vec::new();
    for (name, gating) in variants {
        let mut rc = cfg.refine.clone();
        rc.loss_config.gating = gating;
        eprintln!("refining{}{}", if name.is_empty() { "" } else { " " }, name);
        let out = refine(&start, &rc, Some(&truth))?;
        let suffix = if name.is_empty() { String::new() } else { format!("_{name}") };
        let csv = run.out_path(&format!("trajectory{suffix}.csv"));
        let mut buf = Vec::new();
        write_trajectory_csv(&out.trajectory, &mut buf).map_err(|e| Error::io(&csv, e))?;
        fs::write(&csv, buf).map_err(|e| Error::io(&csv, e))?;
        let summary = outcome_json(&start, &out);
        run.write_text(
            &format!("final_pose{suffix}.json"),
            &(serde_json::to_string_pretty(&summary).expect("json") + "\n"),
        )?;
        if let Some(e) = out.final_point().error {
            scores.push(e.score());
        }
        results.insert(if name.is_empty() { "result".into() } else { name.to_string() }, summary);
    }
    let mut json = json!({
        "command": "refine",
        "perturbation": to_value(&cfg.perturb),
        "start_poses": pose_json(&start.intrinsics, &start.poses()),
    });
    let obj = json.as_object_mut().expect("object");
    obj.extend(results);
    if a.ablation {
        obj.insert("gated_better".into(), json!(scores[0] < scores[1]));
    }
    run.finish(json!({
        "perturb": to_value(&cfg.perturb),
        "refine": to_value(&cfg.refine),
        "loss_config": to_value(&cfg.loss),
        "ablation": a.ablation,
    }))?;
    Ok(Report { json, pass: true })
}

fn cmd_visualize(a: &VisualizeArgs, threads: Option<usize>, inputs: Vec<PathBuf>) -> Result<Report> {
    let mut run = Run::new("visualize", threads, Some(&a.out))?;
    run.inputs = inputs;
    let sources: Vec<PathBuf> = if a.input.is_dir() {
        dir_files(&a.input)?
            .into_iter()
            .filter(|p| {
                let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                name.ends_with(".flo") || (name.ends_with(".pfm") && !is_image_copy(&name))
            })
            .collect()
    } else {
        vec![a.input.clone()]
    };
    if sources.is_empty() {
        return Err(Error::MissingInput(format!("no .pfm or .flo files in {}", a.input.display())));
    }
    let mut written = Vec::new();
    for src in &sources {
        run.inputs.push(src.clone());
        let stem = src.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("");
        let img = match ext {
            "flo" => colorize_flow(&io::read_flo(src)?)?,
            "pfm" => {
                let grid = io::read_pfm(src)?;
                if grid.channels() == 3 {
                    grid
                } else {
                    colorize_map(&grid.to_scalar_map()?)?
                }
            }
            other => return Err(Error::Format(format!("cannot visualize .{other} files: {}", src.display()))),
        };
        let p = run.out_path(&format!("{stem}.ppm"));
        io::write_ppm(&img, &p)?;
        written.push(p.display().to_string());
    }
    let json = json!({ "command": "visualize", "files": written });
    run.finish(json!({ "input": a.input.display().to_string() }))?;
    Ok(Report { json, pass: true })
}

fn is_image_copy(name: &str) -> bool {
    name == synthworld::TARGET_PFM || synthworld::SOURCE_PFM.contains(&name)
}
