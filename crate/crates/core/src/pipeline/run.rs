use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::config::{Mode, RunConfig, PLUGINS_ENV};
use crate::compositor::{make_copy_sequence, ObjectAsset};
use crate::diffusion::{create_backend, BackendRole, Condition, DiffusionBackend, PluginRegistry};
use crate::error::{Error, Result};
use crate::frame::Clip;
use crate::geometry::{BinaryMask, RegionPartition, TrajectorySequence};
use crate::io::{
    hash_dir, hash_file, load_clip, load_mask, load_masks, load_png, read_json, save_clip,
    save_latents, save_masks, sha256_hex, write_json_atomic, CasePrompts, TrajectorySpec,
};
use crate::metrics::{
    create_embedder, evaluate_case, CaseInputs, Embedder, MetricConfig, MetricReport, PromptEntry,
    PromptLibrary,
};
use crate::pixel_noise;
use crate::stage1::run_ln_inj_detailed;
use crate::stage2::run_d_inv;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const COPY_DIR: &str = "copy";
pub const COARSE_DIR: &str = "coarse";
pub const ALIGN_DIR: &str = "align";
pub const MASKS_DIR: &str = "masks";
pub const LATENTS_DIR: &str = "latents";
pub const REPORT_FILE: &str = "report.json";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Reads the plugin registry named by `VIDINSERT_PLUGINS`, if any.
pub fn load_registry() -> Result<PluginRegistry> {
    match std::env::var_os(PLUGINS_ENV) {
        Some(p) => PluginRegistry::load(Path::new(&p)),
        None => Ok(PluginRegistry::default()),
    }
}

/// Decoded inputs of one case.
#[derive(Debug, Clone)]
pub struct LoadedCase {
    pub background: Clip,
    pub asset: ObjectAsset,
    pub trajectory: TrajectorySequence,
    pub prompts: Option<CasePrompts>,
}

/// Output of the compositing step.
#[derive(Debug, Clone)]
pub struct Composed {
    pub copy: Clip,
    pub partitions: Vec<RegionPartition>,
}

/// A validated configuration with its inputs loaded and backends resolved.
pub struct Prepared {
    pub cfg: RunConfig,
    pub case: LoadedCase,
    pub object_prompt: String,
    pub align_prompt: String,
    pub library: Option<PromptLibrary>,
    image_backend: Option<Box<dyn DiffusionBackend>>,
    video_backend: Box<dyn DiffusionBackend>,
    embedder: Box<dyn Embedder>,
}

impl std::fmt::Debug for Prepared {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Prepared")
            .field("case_id", &self.cfg.case_id)
            .field("video_backend", &self.video_backend.id())
            .finish_non_exhaustive()
    }
}

pub fn load_case(cfg: &RunConfig) -> Result<LoadedCase> {
    let background = load_clip(&cfg.case.background)?;
    let asset = ObjectAsset::new(
        load_png(&cfg.case.object)?,
        load_mask(&cfg.case.object_mask)?,
    )?;
    let trajectory = TrajectorySpec::load(&cfg.case.trajectory)?.resolve()?;
    if trajectory.len() != background.len() {
        return Err(Error::Validation(format!(
            "trajectory has {} boxes for {} background frames",
            trajectory.len(),
            background.len()
        )));
    }
    if trajectory.frame_dims() != background.dims() {
        return Err(Error::Validation(format!(
            "trajectory frame size {:?} differs from background {:?}",
            trajectory.frame_dims(),
            background.dims()
        )));
    }
    let prompts = match &cfg.case.prompts {
        Some(p) => Some(read_json::<CasePrompts>(p)?),
        None => None,
    };
    Ok(LoadedCase {
        background,
        asset,
        trajectory,
        prompts,
    })
}

/// Validates `cfg`, loads the case and resolves backends. Every error from
/// here is a configuration or input problem.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let registry = load_registry()?;
    let case = load_case(cfg)?;

    let from_file = |f: fn(&CasePrompts) -> &String| {
        case.prompts
            .as_ref()
            .map(|p| f(p).clone())
            .filter(|s| !s.trim().is_empty())
    };
    let object_prompt = cfg
        .object_prompt
        .clone()
        .or_else(|| from_file(|p| &p.object_prompt));
    let align_prompt = cfg
        .align_prompt
        .clone()
        .or_else(|| from_file(|p| &p.align_prompt))
        .ok_or_else(|| Error::Validation("no alignment prompt given".into()))?;
    let object_prompt = match (cfg.mode, object_prompt) {
        (_, Some(p)) => p,
        (Mode::Ln, None) => return Err(Error::Validation("no object prompt given".into())),
        (Mode::Pn, None) => String::new(),
    };

    let library = match &cfg.library {
        Some(p) => Some(PromptLibrary::load(p)?),
        None => case
            .prompts
            .as_ref()
            .filter(|p| !p.optimal.trim().is_empty() && !p.fake.trim().is_empty())
            .map(|p| {
                PromptLibrary::new(vec![PromptEntry {
                    case_id: cfg.case_id.clone(),
                    optimal: p.optimal.clone(),
                    fake: p.fake.clone(),
                }])
            })
            .transpose()?,
    };
    if let Some(lib) = &library {
        if lib.get(&cfg.case_id).is_none() {
            return Err(Error::MissingCase(cfg.case_id.clone()));
        }
    }

    let image_backend = match cfg.mode {
        Mode::Ln => Some(create_backend(
            &cfg.image_backend,
            BackendRole::Image,
            &registry,
        )?),
        Mode::Pn => None,
    };
    let video_backend = create_backend(&cfg.video_backend, BackendRole::Video, &registry)?;
    let embedder = create_embedder(&cfg.embedder, &registry)?;

    Ok(Prepared {
        cfg: cfg.clone(),
        case,
        object_prompt,
        align_prompt,
        library,
        image_backend,
        video_backend,
        embedder,
    })
}

impl Prepared {
    pub fn compose(&self) -> Result<Composed> {
        let (copy, partitions) = make_copy_sequence(
            &self.case.asset,
            &self.case.background,
            &self.case.trajectory,
        )?;
        Ok(Composed { copy, partitions })
    }

    /// Produces the coarse clip. Stage-1 latents are dumped into
    /// `latents_dir` when given.
    pub fn coarse(&self, composed: &Composed, latents_dir: Option<&Path>) -> Result<Clip> {
        match self.cfg.mode {
            Mode::Pn => pixel_noise::inject(&composed.copy, &composed.partitions, &self.cfg.noise),
            Mode::Ln => {
                let backend = self
                    .image_backend
                    .as_deref()
                    .expect("image backend resolved for ln mode");
                let out = run_ln_inj_detailed(
                    &composed.copy,
                    &composed.partitions,
                    &Condition::text(&self.object_prompt),
                    backend,
                    &self.cfg.latent,
                )?;
                if let Some(dir) = latents_dir {
                    let hash = backend.schedule().subsample(self.cfg.latent.steps)?.hash();
                    save_latents(dir, "inverted", &out.inverted, Some(hash.clone()))?;
                    save_latents(dir, "start", &out.start, Some(hash))?;
                }
                Ok(out.clip)
            }
        }
    }

    pub fn align(&self, copy: &Clip, coarse: &Clip) -> Result<Clip> {
        run_d_inv(
            copy,
            coarse,
            &Condition::text(&self.align_prompt),
            self.video_backend.as_ref(),
            &self.cfg.injection,
        )
    }

    pub fn evaluate(&self, pred: &Clip, copy: &Clip) -> Result<MetricReport> {
        let object_image = self.case.asset.reference_crop()?;
        let inputs = CaseInputs {
            case_id: &self.cfg.case_id,
            pred,
            reference: copy,
            prompt: &self.align_prompt,
            trajectory: &self.case.trajectory,
            object_image: &object_image,
            library: self.library.as_ref(),
        };
        let metrics = evaluate_case(&inputs, self.embedder.as_ref(), self.cfg.logit_scale)?;
        Ok(MetricReport::new(
            MetricConfig {
                embedder: self.embedder.id().to_string(),
                logit_scale: self.cfg.logit_scale,
            },
            vec![metrics],
        ))
    }

    pub fn image_backend_id(&self) -> Option<&str> {
        self.image_backend.as_deref().map(|b| b.id())
    }

    pub fn video_backend_id(&self) -> &str {
        self.video_backend.id()
    }

    /// Content hashes of every input file.
    pub fn input_hashes(&self) -> Result<BTreeMap<String, String>> {
        let c = &self.cfg.case;
        let mut out = BTreeMap::new();
        out.insert("background".into(), hash_dir(&c.background)?);
        out.insert("object".into(), hash_file(&c.object)?);
        out.insert("object_mask".into(), hash_file(&c.object_mask)?);
        out.insert("trajectory".into(), hash_file(&c.trajectory)?);
        if let Some(p) = &c.prompts {
            out.insert("prompts".into(), hash_file(p)?);
        }
        if let Some(p) = &self.cfg.library {
            out.insert("library".into(), hash_file(p)?);
        }
        Ok(out)
    }
}

/// Writes trajectory, object and interaction masks under `dir`.
pub fn save_partitions(partitions: &[RegionPartition], dir: &Path) -> Result<()> {
    let traj: Vec<BinaryMask> = partitions.iter().map(RegionPartition::trajectory).collect();
    let obj: Vec<BinaryMask> = partitions.iter().map(|p| p.object.clone()).collect();
    let ia: Vec<BinaryMask> = partitions.iter().map(|p| p.interaction.clone()).collect();
    save_masks(&traj, &dir.join("trajectory"))?;
    save_masks(&obj, &dir.join("object"))?;
    save_masks(&ia, &dir.join("interaction"))
}

pub fn load_partitions(dir: &Path) -> Result<Vec<RegionPartition>> {
    let obj = load_masks(&dir.join("object"))?;
    let ia = load_masks(&dir.join("interaction"))?;
    if obj.len() != ia.len() {
        return Err(Error::mismatch("mask sequences", obj.len(), ia.len()));
    }
    obj.into_iter()
        .zip(ia)
        .map(|(object, interaction)| {
            let union = BinaryMask::from_fn(object.width(), object.height(), |x, y| {
                object.get(x, y) || interaction.get(x, y)
            });
            let p = RegionPartition {
                background: union.complement(),
                interaction,
                object,
            };
            p.check()?;
            Ok(p)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRecord {
    /// Relative to the run's output directory.
    pub path: String,
    pub hash: String,
}

/// Record of one run: what went in, what came out, and how to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub case_id: String,
    pub config_hash: String,
    pub config: RunConfig,
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub backends: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, OutputRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricReport>,
    pub wall_clock_secs: f64,
    pub created_unix: u64,
}

impl RunManifest {
    /// Hash over the reproducible part of the manifest: parameters, input
    /// and output contents, seeds and backends. Timing, locations and the
    /// tool version are excluded.
    pub fn content_hash(&self) -> String {
        let outputs: BTreeMap<&String, &String> =
            self.outputs.iter().map(|(k, v)| (k, &v.hash)).collect();
        let value = serde_json::json!({
            "config_hash": self.config_hash,
            "inputs": self.inputs,
            "seeds": self.seeds,
            "backends": self.backends,
            "outputs": outputs,
        });
        sha256_hex(&serde_json::to_vec(&value).expect("manifest serializes"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json_atomic(path, self)
    }
}

/// Starts a manifest for `prep`; outputs are added by the caller.
pub fn new_manifest(prep: &Prepared, started: Instant) -> Result<RunManifest> {
    let cfg = &prep.cfg;
    let mut seeds = BTreeMap::new();
    match cfg.mode {
        Mode::Pn => seeds.insert("pixel_noise".into(), cfg.noise.seed),
        Mode::Ln => seeds.insert("latent_noise".into(), cfg.latent.seed),
    };
    let mut backends = BTreeMap::new();
    if let Some(id) = prep.image_backend_id() {
        backends.insert("image".into(), id.to_string());
    }
    backends.insert("video".into(), prep.video_backend_id().to_string());
    backends.insert("embedder".into(), prep.embedder.id().to_string());
    Ok(RunManifest {
        tool_version: TOOL_VERSION.into(),
        case_id: cfg.case_id.clone(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        inputs: prep.input_hashes()?,
        seeds,
        backends,
        outputs: BTreeMap::new(),
        metrics: None,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        created_unix: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    })
}

/// Hashes `name` under `out` (file or directory) into the manifest.
pub fn record_output(manifest: &mut RunManifest, out: &Path, key: &str, name: &str) -> Result<()> {
    let p = out.join(name);
    let hash = if p.is_dir() {
        hash_dir(&p)?
    } else {
        hash_file(&p)?
    };
    manifest.outputs.insert(
        key.into(),
        OutputRecord {
            path: name.into(),
            hash,
        },
    );
    Ok(())
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Runs the full pipeline and persists every intermediate. Errors from
/// validation come back unwrapped; failures while computing are wrapped
/// with the stage name and leave earlier outputs on disk.
pub fn run_case(cfg: &RunConfig) -> Result<RunManifest> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    run_prepared(&prep, started)
}

pub fn run_prepared(prep: &Prepared, started: Instant) -> Result<RunManifest> {
    let out: PathBuf = prep.cfg.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    tracing::info!(case = %prep.cfg.case_id, out = %out.display(), "run started");

    let composed = staged("compose", prep.compose())?;
    staged("compose", save_clip(&composed.copy, &out.join(COPY_DIR)))?;
    staged(
        "compose",
        save_partitions(&composed.partitions, &out.join(MASKS_DIR)),
    )?;

    let latents = prep.cfg.dump_latents.then(|| out.join(LATENTS_DIR));
    let coarse = staged("stage1", prep.coarse(&composed, latents.as_deref()))?;
    staged("stage1", save_clip(&coarse, &out.join(COARSE_DIR)))?;

    let aligned = staged("stage2", prep.align(&composed.copy, &coarse))?;
    staged("stage2", save_clip(&aligned, &out.join(ALIGN_DIR)))?;

    let report = staged("eval", prep.evaluate(&aligned, &composed.copy))?;
    staged("eval", report.write(&out.join(REPORT_FILE)))?;

    let mut manifest = new_manifest(prep, started)?;
    for (key, name) in [
        ("copy", COPY_DIR),
        ("coarse", COARSE_DIR),
        ("align", ALIGN_DIR),
        ("masks", MASKS_DIR),
        ("report", REPORT_FILE),
    ] {
        record_output(&mut manifest, &out, key, name)?;
    }
    if prep.cfg.dump_latents {
        record_output(&mut manifest, &out, "latents", LATENTS_DIR)?;
    }
    manifest.metrics = Some(report);
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    manifest.write(&out.join(MANIFEST_FILE))?;
    tracing::info!(secs = manifest.wall_clock_secs, "run finished");
    Ok(manifest)
}
