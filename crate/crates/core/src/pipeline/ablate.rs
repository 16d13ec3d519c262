use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{prepare, run_prepared, RunManifest};
use crate::error::{Error, Result};
use crate::io::{write_atomic, write_json_atomic};
use crate::metrics::MetricMeans;

/// One sweep point; unset fields keep the base configuration's value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepPoint {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma1: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spatial_attn_steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub temporal_attn_steps: Option<usize>,
}

impl SweepPoint {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.sigma1 {
            cfg.noise.sigma1 = v;
        }
        if let Some(v) = self.sigma2 {
            cfg.noise.sigma2 = v;
        }
        if let Some(v) = self.feature_steps {
            cfg.injection.feature_steps = v;
        }
        if let Some(v) = self.spatial_attn_steps {
            cfg.injection.spatial_attn_steps = v;
        }
        if let Some(v) = self.temporal_attn_steps {
            cfg.injection.temporal_attn_steps = v;
        }
        cfg
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.sigma1 {
            parts.push(format!("sigma1={v}"));
        }
        if let Some(v) = self.sigma2 {
            parts.push(format!("sigma2={v}"));
        }
        if let Some(v) = self.feature_steps {
            parts.push(format!("feature={v}"));
        }
        if let Some(v) = self.spatial_attn_steps {
            parts.push(format!("sattn={v}"));
        }
        if let Some(v) = self.temporal_attn_steps {
            parts.push(format!("tattn={v}"));
        }
        if parts.is_empty() {
            "base".into()
        } else {
            parts.join(",")
        }
    }
}

/// Values per axis; empty axes are not swept.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepAxes {
    pub sigma1: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub feature_steps: Vec<usize>,
    pub spatial_attn_steps: Vec<usize>,
    pub temporal_attn_steps: Vec<usize>,
}

/// `{"grid": {...}}` for a cartesian product or `{"points": [...]}` for an
/// explicit list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sweep {
    Grid(SweepAxes),
    Points(Vec<SweepPoint>),
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl Sweep {
    pub fn points(&self) -> Result<Vec<SweepPoint>> {
        let points = match self {
            Sweep::Points(p) => p.clone(),
            Sweep::Grid(a) => {
                let empty = a.sigma1.is_empty()
                    && a.sigma2.is_empty()
                    && a.feature_steps.is_empty()
                    && a.spatial_attn_steps.is_empty()
                    && a.temporal_attn_steps.is_empty();
                if empty {
                    return Err(Error::Validation("sweep grid has no axes".into()));
                }
                let mut out = Vec::new();
                for s1 in axis(&a.sigma1) {
                    for s2 in axis(&a.sigma2) {
                        for f in axis(&a.feature_steps) {
                            for sa in axis(&a.spatial_attn_steps) {
                                for ta in axis(&a.temporal_attn_steps) {
                                    out.push(SweepPoint {
                                        sigma1: s1,
                                        sigma2: s2,
                                        feature_steps: f,
                                        spatial_attn_steps: sa,
                                        temporal_attn_steps: ta,
                                    });
                                }
                            }
                        }
                    }
                }
                out
            }
        };
        if points.is_empty() {
            return Err(Error::Validation("sweep has no points".into()));
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub run: String,
    pub label: String,
    pub point: SweepPoint,
    pub config_hash: String,
    pub manifest_hash: String,
    pub metrics: Option<MetricMeans>,
}

#[derive(Debug, Clone)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
    pub manifests: Vec<RunManifest>,
}

impl AblationSummary {
    pub fn table(&self) -> String {
        let mut out = String::from("run\tlabel\tclip_i\tclip_t\tdino\tadv_viclip\n");
        for r in &self.rows {
            let m = r.metrics.clone().unwrap_or_default();
            let adv = m.adv_viclip.map_or("-".to_string(), |v| format!("{v:.4}"));
            out.push_str(&format!(
                "{}\t{}\t{:.3}\t{:.3}\t{:.4}\t{}\n",
                r.run, r.label, m.clip_i, m.clip_t, m.dino, adv
            ));
        }
        out
    }
}

pub fn run_dir_name(index: usize) -> String {
    format!("run_{index:03}")
}

/// Runs every sweep point on a pool of `jobs` workers. Each run writes into
/// `<base output>/run_###`; `summary.json` and `summary.tsv` land in the base
/// output directory. All points are validated before any run starts.
pub fn ablate(base: &RunConfig, sweep: &Sweep, jobs: usize) -> Result<AblationSummary> {
    let points = sweep.points()?;
    let root = base.output_dir.clone();
    let prepared = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut cfg = p.apply(base);
            cfg.output_dir = root.join(run_dir_name(i));
            prepare(&cfg)
        })
        .collect::<Result<Vec<_>>>()?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("cannot build worker pool: {e}")))?;
    let manifests = pool.install(|| {
        prepared
            .par_iter()
            .map(|p| run_prepared(p, std::time::Instant::now()))
            .collect::<Result<Vec<_>>>()
    })?;

    let rows = points
        .iter()
        .zip(&manifests)
        .enumerate()
        .map(|(i, (p, m))| AblationRow {
            run: run_dir_name(i),
            label: p.label(),
            point: p.clone(),
            config_hash: m.config_hash.clone(),
            manifest_hash: m.content_hash(),
            metrics: m.metrics.as_ref().map(|r| r.mean.clone()),
        })
        .collect();
    let summary = AblationSummary { rows, manifests };
    write_summary(&summary, &root)?;
    Ok(summary)
}

fn write_summary(summary: &AblationSummary, root: &Path) -> Result<()> {
    write_json_atomic(&root.join("summary.json"), &summary.rows)?;
    write_atomic(&root.join("summary.tsv"), summary.table().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_cartesian() {
        let s = Sweep::Grid(SweepAxes {
            sigma1: vec![0.1, 0.2, 0.3],
            feature_steps: vec![0, 5],
            ..Default::default()
        });
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1].feature_steps, Some(5));
        assert_eq!(pts[1].sigma1, Some(0.1));
        assert_eq!(pts[5].label(), "sigma1=0.3,feature=5");
    }

    #[test]
    fn empty_sweeps_are_rejected() {
        assert!(Sweep::Grid(SweepAxes::default()).points().is_err());
        assert!(Sweep::Points(vec![]).points().is_err());
    }

    #[test]
    fn sweep_json_forms() {
        let g: Sweep = serde_json::from_str(r#"{"grid":{"sigma2":[0.0,0.1]}}"#).unwrap();
        assert_eq!(g.points().unwrap().len(), 2);
        let p: Sweep =
            serde_json::from_str(r#"{"points":[{"feature_steps":3},{"temporal_attn_steps":1}]}"#)
                .unwrap();
        let pts = p.points().unwrap();
        let cfg = pts[1].apply(&RunConfig::default());
        assert_eq!(cfg.injection.temporal_attn_steps, 1);
        assert_eq!(cfg.injection.feature_steps, 5);
    }
}
