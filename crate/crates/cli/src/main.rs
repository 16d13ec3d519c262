//! `vidinsert` command-line tool.
//!
//! Every stage reads and writes a run directory, so the staged commands
//! (`compose`, `stage1`, `stage2`, `eval`) reproduce `run` exactly.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tracing_subscriber::EnvFilter;
use vidinsert_core::geometry::{generate_trajectory, BBox, BoxDelta};
use vidinsert_core::io::{load_clip, read_json, save_clip, write_json_atomic, TrajectorySpec};
use vidinsert_core::pipeline::{
    ablate, default_output_dir, load_partitions, make_dataset_case, new_manifest, prepare,
    record_output, run_prepared, save_partitions, write_synthetic_case, CasePaths, Composed, Mode,
    Prepared, RunConfig, Sweep, ALIGN_DIR, COARSE_DIR, COPY_DIR, LATENTS_DIR, MASKS_DIR,
};
use vidinsert_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "vidinsert",
    version,
    about = "Insert an object into a video along a box trajectory"
)]
struct Cli {
    /// Log progress to stderr (RUST_LOG takes precedence).
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a trajectory file from an initial box and per-frame deltas.
    Trajgen(TrajgenArgs),
    /// Paste the object along the trajectory; writes copy/ and masks/.
    Compose {
        #[command(flatten)]
        case: CaseArgs,
    },
    /// Build the coarse clip from copy/ and masks/; writes coarse/.
    Stage1(Stage1Cmd),
    /// Align the coarse clip with the video backend; writes align/.
    Stage2(Stage2Cmd),
    /// Score a predicted clip against a case.
    Eval(EvalArgs),
    /// Run every stage and write a manifest.
    Run(RunCmd),
    /// Run a parameter sweep.
    Ablate(AblateCmd),
    /// Write a case directory in the canonical layout.
    MakeCase(MakeCaseArgs),
}

#[derive(Args, Debug, Clone)]
struct CaseArgs {
    /// Run configuration JSON; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Case directory in the canonical layout.
    #[arg(long)]
    case: Option<PathBuf>,
    #[arg(long)]
    case_id: Option<String>,
    /// Output directory (default: $VIDINSERT_OUTPUT_ROOT/<case id>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
struct NoiseArgs {
    #[arg(long)]
    sigma1: Option<f64>,
    #[arg(long)]
    sigma2: Option<f64>,
}

#[derive(Args, Debug, Clone, Default)]
struct Stage1Args {
    /// Coarse-clip mode: pn (pixel noise) or ln (latent noise).
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    /// Grid steps inverted before injecting (default: all).
    #[arg(long)]
    invert_steps: Option<usize>,
    /// Invert under the object prompt instead of unconditionally.
    #[arg(long)]
    conditional_inversion: bool,
    /// Fail if a frame has an empty interaction area.
    #[arg(long)]
    strict: bool,
    /// Write stage-1 latents under latents/.
    #[arg(long)]
    dump_latents: bool,
    #[arg(long)]
    image_backend: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct Stage2Args {
    #[arg(long)]
    inject_feature: Option<usize>,
    #[arg(long)]
    inject_sattn: Option<usize>,
    #[arg(long)]
    inject_tattn: Option<usize>,
    /// Weight of recorded activations (1 replaces).
    #[arg(long)]
    blend: Option<f64>,
    #[arg(long)]
    video_backend: Option<String>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalOpts {
    #[arg(long)]
    embedder: Option<String>,
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long)]
    logit_scale: Option<f64>,
}

#[derive(Args, Debug)]
struct Stage1Cmd {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    s1: Stage1Args,
    /// Object prompt.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug)]
struct Stage2Cmd {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    s2: Stage2Args,
    /// Alignment prompt.
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct RunOverrides {
    #[command(flatten)]
    noise: NoiseArgs,
    #[command(flatten)]
    s1: Stage1Args,
    #[command(flatten)]
    s2: Stage2Args,
    #[command(flatten)]
    eval: EvalOpts,
    #[arg(long)]
    object_prompt: Option<String>,
    #[arg(long)]
    align_prompt: Option<String>,
    #[arg(long)]
    stage1_steps: Option<usize>,
    #[arg(long)]
    stage2_steps: Option<usize>,
}

#[derive(Args, Debug)]
struct RunCmd {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    over: RunOverrides,
}

#[derive(Args, Debug)]
struct AblateCmd {
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    over: RunOverrides,
    /// Sweep JSON: {"grid": {...}} or {"points": [...]}.
    #[arg(long)]
    sweep: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 2)]
    jobs: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Directory of predicted frames.
    #[arg(long)]
    pred: PathBuf,
    #[command(flatten)]
    case: CaseArgs,
    #[command(flatten)]
    opts: EvalOpts,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrajgenArgs {
    /// Initial box as x0,y0,w,h.
    #[arg(long, value_parser = parse_bbox)]
    init: BBox,
    #[arg(long)]
    frames: usize,
    #[arg(long)]
    width: u32,
    #[arg(long)]
    height: u32,
    /// Per-frame delta dx,dy[,dw,dh]; give once to repeat it, or frames-1 times.
    #[arg(long = "delta", value_parser = parse_delta, allow_hyphen_values = true)]
    deltas: Vec<BoxDelta>,
    /// Output file (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MakeCaseArgs {
    /// Case directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Write the bundled synthetic case.
    #[arg(long, conflicts_with_all = ["background", "object", "object_mask", "trajectory", "prompts"])]
    synthetic: bool,
    /// Directory of background frames.
    #[arg(long, required_unless_present = "synthetic")]
    background: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    object: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    object_mask: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    trajectory: Option<PathBuf>,
    #[arg(long, required_unless_present = "synthetic")]
    prompts: Option<PathBuf>,
}

fn parse_ints(s: &str) -> std::result::Result<Vec<i64>, String> {
    s.split(',')
        .map(|p| p.trim().parse::<i64>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn parse_bbox(s: &str) -> std::result::Result<BBox, String> {
    match parse_ints(s)?.as_slice() {
        &[x, y, w, h] if x >= 0 && y >= 0 && w >= 0 && h >= 0 => {
            Ok(BBox::new(x as u32, y as u32, w as u32, h as u32))
        }
        _ => Err("expected x0,y0,w,h with non-negative integers".into()),
    }
}

fn parse_delta(s: &str) -> std::result::Result<BoxDelta, String> {
    let v = parse_ints(s)?;
    let get = |i: usize| v.get(i).copied().unwrap_or(0) as i32;
    if v.len() != 2 && v.len() != 4 {
        return Err("expected dx,dy or dx,dy,dw,dh".into());
    }
    Ok(BoxDelta {
        dx: get(0),
        dy: get(1),
        dw: get(2),
        dh: get(3),
    })
}

impl CaseArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(dir) = &self.case {
            cfg.case = CasePaths::from_case_dir(dir);
            if let Some(name) = dir.file_name().and_then(|n| n.to_str()) {
                cfg.case_id = name.to_string();
            }
        }
        if let Some(id) = &self.case_id {
            cfg.case_id = id.clone();
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if cfg.output_dir.as_os_str().is_empty() {
            cfg.output_dir = default_output_dir(&cfg.case_id);
        }
        Ok(cfg)
    }
}

impl NoiseArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.sigma1 {
            cfg.noise.sigma1 = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.noise.sigma2 = v;
        }
    }
}

impl Stage1Args {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if let Some(s) = self.seed {
            cfg.noise.seed = s;
            cfg.latent.seed = s;
        }
        if self.invert_steps.is_some() {
            cfg.latent.invert_steps = self.invert_steps;
        }
        cfg.latent.conditional_inversion |= self.conditional_inversion;
        cfg.latent.strict |= self.strict;
        cfg.dump_latents |= self.dump_latents;
        if let Some(b) = &self.image_backend {
            cfg.image_backend = b.clone();
        }
    }
}

impl Stage2Args {
    fn apply(&self, cfg: &mut RunConfig) {
        let inj = &mut cfg.injection;
        if let Some(v) = self.inject_feature {
            inj.feature_steps = v;
        }
        if let Some(v) = self.inject_sattn {
            inj.spatial_attn_steps = v;
        }
        if let Some(v) = self.inject_tattn {
            inj.temporal_attn_steps = v;
        }
        if let Some(v) = self.blend {
            inj.blend = v;
        }
        if let Some(b) = &self.video_backend {
            cfg.video_backend = b.clone();
        }
    }
}

impl EvalOpts {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(e) = &self.embedder {
            cfg.embedder = e.clone();
        }
        if self.library.is_some() {
            cfg.library = self.library.clone();
        }
        if let Some(s) = self.logit_scale {
            cfg.logit_scale = s;
        }
    }
}

impl RunOverrides {
    fn apply(&self, cfg: &mut RunConfig) {
        self.noise.apply(cfg);
        self.s1.apply(cfg);
        self.s2.apply(cfg);
        self.eval.apply(cfg);
        if self.object_prompt.is_some() {
            cfg.object_prompt = self.object_prompt.clone();
        }
        if self.align_prompt.is_some() {
            cfg.align_prompt = self.align_prompt.clone();
        }
        if let Some(s) = self.stage1_steps {
            cfg.latent.steps = s;
        }
        if let Some(s) = self.stage2_steps {
            cfg.injection.total_steps = s;
        }
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

fn write_stage_manifest(
    prep: &Prepared,
    started: Instant,
    stage: &str,
    outputs: &[(&str, &str)],
) -> Result<()> {
    let out = &prep.cfg.output_dir;
    let mut m = new_manifest(prep, started)?;
    for (key, name) in outputs {
        record_output(&mut m, out, key, name)?;
    }
    m.write(&out.join(format!("manifest.{stage}.json")))
}

fn cmd_trajgen(a: &TrajgenArgs) -> Result<()> {
    let traj = generate_trajectory(a.init, &a.deltas, a.frames, a.width, a.height)?;
    let spec = TrajectorySpec::from_sequence(&traj);
    match &a.out {
        Some(p) => write_json_atomic(p, &spec),
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&spec).expect("spec serializes")
            );
            Ok(())
        }
    }
}

fn cmd_compose(case: &CaseArgs) -> Result<()> {
    let started = Instant::now();
    let prep = prepare(&case.config()?)?;
    let out = &prep.cfg.output_dir;
    let composed = staged("compose", prep.compose())?;
    staged("compose", save_clip(&composed.copy, &out.join(COPY_DIR)))?;
    staged(
        "compose",
        save_partitions(&composed.partitions, &out.join(MASKS_DIR)),
    )?;
    write_stage_manifest(
        &prep,
        started,
        "compose",
        &[("copy", COPY_DIR), ("masks", MASKS_DIR)],
    )?;
    println!("{}", out.join(COPY_DIR).display());
    Ok(())
}

fn load_composed(out: &Path) -> Result<Composed> {
    let copy = load_clip(&out.join(COPY_DIR))?;
    let partitions = load_partitions(&out.join(MASKS_DIR))?;
    if partitions.len() != copy.len() {
        return Err(Error::Validation(format!(
            "{} mask frames for {} copy frames",
            partitions.len(),
            copy.len()
        )));
    }
    Ok(Composed { copy, partitions })
}

fn cmd_stage1(c: &Stage1Cmd) -> Result<()> {
    let started = Instant::now();
    let mut cfg = c.case.config()?;
    c.noise.apply(&mut cfg);
    c.s1.apply(&mut cfg);
    if c.prompt.is_some() {
        cfg.object_prompt = c.prompt.clone();
    }
    if let Some(s) = c.steps {
        cfg.latent.steps = s;
    }
    let prep = prepare(&cfg)?;
    let out = &prep.cfg.output_dir;
    let composed = load_composed(out)?;
    let latents = prep.cfg.dump_latents.then(|| out.join(LATENTS_DIR));
    let coarse = staged("stage1", prep.coarse(&composed, latents.as_deref()))?;
    staged("stage1", save_clip(&coarse, &out.join(COARSE_DIR)))?;
    write_stage_manifest(&prep, started, "stage1", &[("coarse", COARSE_DIR)])?;
    println!("{}", out.join(COARSE_DIR).display());
    Ok(())
}

fn cmd_stage2(c: &Stage2Cmd) -> Result<()> {
    let started = Instant::now();
    let mut cfg = c.case.config()?;
    c.s2.apply(&mut cfg);
    if c.prompt.is_some() {
        cfg.align_prompt = c.prompt.clone();
    }
    if let Some(s) = c.steps {
        cfg.injection.total_steps = s;
    }
    let prep = prepare(&cfg)?;
    let out = &prep.cfg.output_dir;
    let copy = load_clip(&out.join(COPY_DIR))?;
    let coarse = load_clip(&out.join(COARSE_DIR))?;
    let aligned = staged("stage2", prep.align(&copy, &coarse))?;
    staged("stage2", save_clip(&aligned, &out.join(ALIGN_DIR)))?;
    write_stage_manifest(&prep, started, "stage2", &[("align", ALIGN_DIR)])?;
    println!("{}", out.join(ALIGN_DIR).display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut cfg = a.case.config()?;
    a.opts.apply(&mut cfg);
    let prep = prepare(&cfg)?;
    let pred = load_clip(&a.pred)?;
    let composed = staged("compose", prep.compose())?;
    let report = staged("eval", prep.evaluate(&pred, &composed.copy))?;
    if let Some(p) = &a.report {
        report.write(p)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    );
    Ok(())
}

fn cmd_run(c: &RunCmd) -> Result<()> {
    let started = Instant::now();
    let mut cfg = c.case.config()?;
    c.over.apply(&mut cfg);
    let prep = prepare(&cfg)?;
    let m = run_prepared(&prep, started)?;
    if let Some(r) = &m.metrics {
        let adv = r.mean.adv_viclip.map_or("-".into(), |v| format!("{v:.4}"));
        println!(
            "clip_i {:.3}  clip_t {:.3}  dino {:.4}  adv_viclip {adv}",
            r.mean.clip_i, r.mean.clip_t, r.mean.dino
        );
    }
    println!("{}", prep.cfg.output_dir.display());
    Ok(())
}

fn cmd_ablate(c: &AblateCmd) -> Result<()> {
    let mut cfg = c.case.config()?;
    c.over.apply(&mut cfg);
    let sweep: Sweep = read_json(&c.sweep)?;
    let summary = ablate(&cfg, &sweep, c.jobs)?;
    print!("{}", summary.table());
    Ok(())
}

fn cmd_make_case(a: &MakeCaseArgs) -> Result<()> {
    if a.synthetic {
        write_synthetic_case(&a.out)?;
    } else {
        let need = |p: &Option<PathBuf>| p.clone().expect("required by clap");
        let background = load_clip(&need(&a.background))?;
        let asset = vidinsert_core::compositor::ObjectAsset::new(
            vidinsert_core::io::load_png(&need(&a.object))?,
            vidinsert_core::io::load_mask(&need(&a.object_mask))?,
        )?;
        let traj = TrajectorySpec::load(&need(&a.trajectory))?;
        let prompts = read_json(&need(&a.prompts))?;
        make_dataset_case(&a.out, &background, &asset, &traj, &prompts)?;
    }
    println!("{}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = if cli.verbose { "info" } else { "warn" };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Trajgen(a) => cmd_trajgen(a),
        Command::Compose { case } => cmd_compose(case),
        Command::Stage1(c) => cmd_stage1(c),
        Command::Stage2(c) => cmd_stage2(c),
        Command::Eval(a) => cmd_eval(a),
        Command::Run(c) => cmd_run(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::MakeCase(a) => cmd_make_case(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_validation() { 2 } else { 3 })
        }
    }
}
