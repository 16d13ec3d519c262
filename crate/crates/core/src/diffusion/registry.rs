//! Backend lookup by name, plus the plugin registry file that declares
//! external adapters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::backend::DiffusionBackend;
use super::toy::{BackendRole, ToyBackend, DEFAULT_CONSTANT};
use crate::error::{Error, Result};

pub const TOY_BACKENDS: [&str; 4] = ["toy-zero", "toy-const", "toy-linear", "toy-replay"];
pub const DEFAULT_REPLAY_SEED: u64 = 17;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterKind {
    Backend,
    Embedder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterEntry {
    pub id: String,
    pub kind: AdapterKind,
    #[serde(default)]
    pub description: String,
    /// Where the adapter implementation lives (library path, command, URL).
    #[serde(default)]
    pub entry: String,
}

/// External adapters known to this installation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PluginRegistry {
    pub adapters: Vec<AdapterEntry>,
}

impl PluginRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn find(&self, id: &str, kind: AdapterKind) -> Option<&AdapterEntry> {
        self.adapters.iter().find(|a| a.id == id && a.kind == kind)
    }

    /// Resolves an `external:<id>` name. Adapters are declared here but not
    /// linked into the core build, so a registered id reports
    /// [`Error::AdapterUnavailable`].
    pub(crate) fn resolve_external(&self, name: &str, kind: AdapterKind) -> Error {
        let id = name.trim_start_matches("external:");
        match self.find(id, kind) {
            Some(_) => Error::AdapterUnavailable(id.to_string()),
            None => match kind {
                AdapterKind::Backend => Error::UnknownBackend(name.to_string()),
                AdapterKind::Embedder => Error::UnknownEmbedder(name.to_string()),
            },
        }
    }
}

/// Instantiates a backend by name for the given role.
pub fn create_backend(
    name: &str,
    role: BackendRole,
    registry: &PluginRegistry,
) -> Result<Box<dyn DiffusionBackend>> {
    Ok(match name {
        "toy-zero" => Box::new(ToyBackend::zero()),
        "toy-const" => Box::new(ToyBackend::constant(DEFAULT_CONSTANT)),
        "toy-linear" => Box::new(ToyBackend::linear(role)),
        "toy-replay" => Box::new(ToyBackend::replay(DEFAULT_REPLAY_SEED)),
        n if n.starts_with("external:") => {
            return Err(registry.resolve_external(n, AdapterKind::Backend))
        }
        n => return Err(Error::UnknownBackend(n.to_string())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_names_resolve() {
        let reg = PluginRegistry::default();
        for name in TOY_BACKENDS {
            let b = create_backend(name, BackendRole::Video, &reg).unwrap();
            assert_eq!(b.id(), name);
        }
        assert!(matches!(
            create_backend("sdxl", BackendRole::Image, &reg),
            Err(Error::UnknownBackend(_))
        ));
    }

    #[test]
    fn external_adapters_go_through_registry() {
        let reg: PluginRegistry = serde_json::from_str(
            r#"{"adapters":[{"id":"i2v","kind":"backend","entry":"libi2v.so"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            create_backend("external:i2v", BackendRole::Video, &reg),
            Err(Error::AdapterUnavailable(_))
        ));
        assert!(matches!(
            create_backend("external:nope", BackendRole::Video, &reg),
            Err(Error::UnknownBackend(_))
        ));
    }
}
