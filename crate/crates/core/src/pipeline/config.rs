use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_json, sha256_hex};
use crate::metrics::{DEFAULT_LOGIT_SCALE, TOY_EMBEDDER};
use crate::pixel_noise::NoiseConfig;
use crate::stage1::LnInjConfig;
use crate::stage2::InjectionSchedule;

pub const OUTPUT_ROOT_ENV: &str = "VIDINSERT_OUTPUT_ROOT";
pub const PLUGINS_ENV: &str = "VIDINSERT_PLUGINS";
pub const DEFAULT_BACKEND: &str = "toy-linear";

/// How the coarse clip is produced from the copy clip.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Pixel noise blended into the interaction and object regions.
    Pn,
    /// Latent noise injection with an image backend.
    #[default]
    Ln,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pn" => Ok(Mode::Pn),
            "ln" => Ok(Mode::Ln),
            other => Err(Error::Validation(format!("unknown mode `{other}` (pn|ln)"))),
        }
    }
}

/// Input files of one case.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CasePaths {
    /// Directory of `frame_####.png` files.
    pub background: PathBuf,
    pub object: PathBuf,
    pub object_mask: PathBuf,
    pub trajectory: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompts: Option<PathBuf>,
}

impl CasePaths {
    /// Paths of the canonical case layout under `dir`.
    pub fn from_case_dir(dir: &Path) -> Self {
        let prompts = dir.join("prompts.json");
        Self {
            background: dir.join("background"),
            object: dir.join("object.png"),
            object_mask: dir.join("object_mask.png"),
            trajectory: dir.join("trajectory.json"),
            prompts: prompts.exists().then_some(prompts),
        }
    }

    pub fn check_exist(&self) -> Result<()> {
        let required = [
            ("background", &self.background),
            ("object image", &self.object),
            ("object mask", &self.object_mask),
            ("trajectory", &self.trajectory),
        ];
        for (what, p) in required
            .into_iter()
            .chain(self.prompts.iter().map(|p| ("prompts", p)))
        {
            if !p.exists() {
                return Err(Error::Validation(format!(
                    "{what} file {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }
}

/// Everything one run needs. Loaded from a single JSON file; CLI flags
/// override individual fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub case_id: String,
    pub case: CasePaths,
    pub mode: Mode,
    pub noise: NoiseConfig,
    pub latent: LnInjConfig,
    /// Overrides `object_prompt` from the prompts file.
    pub object_prompt: Option<String>,
    /// Overrides `align_prompt` from the prompts file.
    pub align_prompt: Option<String>,
    pub injection: InjectionSchedule,
    pub image_backend: String,
    pub video_backend: String,
    pub embedder: String,
    pub logit_scale: f64,
    /// Prompt library for the adversarial score; defaults to the case's own
    /// optimal/fake pair.
    pub library: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Also write stage-1 latents as raw dumps.
    pub dump_latents: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            case_id: "case".into(),
            case: CasePaths::default(),
            mode: Mode::default(),
            noise: NoiseConfig::default(),
            latent: LnInjConfig::default(),
            object_prompt: None,
            align_prompt: None,
            injection: InjectionSchedule::default(),
            image_backend: DEFAULT_BACKEND.into(),
            video_backend: DEFAULT_BACKEND.into(),
            embedder: TOY_EMBEDDER.into(),
            logit_scale: DEFAULT_LOGIT_SCALE,
            library: None,
            output_dir: PathBuf::new(),
            dump_latents: false,
        }
    }
}

impl RunConfig {
    /// Default parameters for the case laid out under `case_dir`.
    pub fn for_case_dir(case_dir: &Path, output_dir: &Path) -> Self {
        let case_id = case_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("case")
            .to_string();
        Self {
            case_id,
            case: CasePaths::from_case_dir(case_dir),
            output_dir: output_dir.to_path_buf(),
            ..Default::default()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }

    /// Checks parameters and input paths without touching file contents.
    pub fn validate(&self) -> Result<()> {
        self.case.check_exist()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Validation("output directory is not set".into()));
        }
        match self.mode {
            Mode::Pn => self.noise.validate()?,
            Mode::Ln => {
                self.latent.depth()?;
            }
        }
        self.injection.validate()?;
        if !(self.logit_scale.is_finite() && self.logit_scale > 0.0) {
            return Err(Error::Validation(format!(
                "logit scale must be positive, got {}",
                self.logit_scale
            )));
        }
        if let Some(lib) = &self.library {
            if !lib.exists() {
                return Err(Error::Validation(format!(
                    "prompt library {} does not exist",
                    lib.display()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the parameters. File locations are left out; input
    /// contents are hashed separately in the manifest.
    pub fn hash(&self) -> String {
        let mut params = self.clone();
        params.case = CasePaths::default();
        params.library = None;
        params.output_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&params).expect("config serializes");
        sha256_hex(&bytes)
    }
}

/// `$VIDINSERT_OUTPUT_ROOT/<case_id>`, or `runs/<case_id>` when unset.
pub fn default_output_dir(case_id: &str) -> PathBuf {
    let root = std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(case_id)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"mode":"pn","noise":{"sigma1":0.2,"sigma2":0.0,"seed":4}}"#)
                .unwrap();
        assert_eq!(cfg.mode, Mode::Pn);
        assert_eq!(cfg.noise.sigma1, 0.2);
        assert_eq!(cfg.injection, InjectionSchedule::default());
        assert_eq!(cfg.latent.steps, 50);
    }

    #[test]
    fn hash_ignores_locations_but_not_parameters() {
        let a = RunConfig::for_case_dir(Path::new("/x/case1"), Path::new("/out/a"));
        let mut b = RunConfig::for_case_dir(Path::new("/y/case1"), Path::new("/out/b"));
        assert_eq!(a.hash(), b.hash());
        b.noise.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn missing_trajectory_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        for f in ["object.png", "object_mask.png"] {
            std::fs::write(dir.path().join(f), b"").unwrap();
        }
        std::fs::create_dir(dir.path().join("background")).unwrap();
        let cfg = RunConfig::for_case_dir(dir.path(), &dir.path().join("out"));
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("trajectory")));
        assert!(err.is_validation());
    }
}
