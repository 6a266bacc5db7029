//! Run configuration: config files, command-line overrides, graph sources.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};

use meshplan::graph::{self, MlpConfig, OpGraph, TransformerConfig};
use meshplan::mesh::{ClusterDoc, ClusterMesh};
use meshplan::orchestrate::Schedule;

/// A cluster given inline or as a path to a TOML/JSON file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ClusterSource {
    Path(PathBuf),
    Inline(ClusterDoc),
}

/// Everything a run may read from a config file. Command-line flags take
/// precedence over file values.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub graph: Option<PathBuf>,
    pub builder: Option<String>,
    pub cluster: Option<ClusterSource>,
    pub b: Option<u64>,
    pub b_list: Option<Vec<u64>>,
    pub layers: Option<usize>,
    pub delta: Option<f64>,
    /// Seconds.
    pub epsilon: Option<f64>,
    pub schedule: Option<String>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub out: Option<PathBuf>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

/// Reads a TOML or JSON document, chosen by file extension.
pub fn read_doc<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if is_json(path) {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

impl RunConfig {
    /// Loads a config file. Relative `graph`, `cluster` and `out` paths in it
    /// are taken relative to the file's own directory.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(p) = path else { return Ok(RunConfig::default()) };
        let mut cfg: RunConfig = read_doc(p)?;
        let base = p.parent().unwrap_or(Path::new(""));
        let rebase = |q: &mut PathBuf| {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        };
        cfg.graph.as_mut().map(rebase);
        cfg.out.as_mut().map(rebase);
        if let Some(ClusterSource::Path(q)) = cfg.cluster.as_mut() {
            rebase(q);
        }
        Ok(cfg)
    }

    /// Fills unset fields from `other`, leaving set fields alone.
    pub fn or(self, other: RunConfig) -> RunConfig {
        RunConfig {
            graph: self.graph.or(other.graph),
            builder: self.builder.or(other.builder),
            cluster: self.cluster.or(other.cluster),
            b: self.b.or(other.b),
            b_list: self.b_list.or(other.b_list),
            layers: self.layers.or(other.layers),
            delta: self.delta.or(other.delta),
            epsilon: self.epsilon.or(other.epsilon),
            schedule: self.schedule.or(other.schedule),
            seed: self.seed.or(other.seed),
            workers: self.workers.or(other.workers),
            out: self.out.or(other.out),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.graph, &self.builder) {
            (Some(_), Some(_)) => bail!("give exactly one graph source: --graph or --builder, not both"),
            (None, None) => bail!("no graph source: pass --graph FILE or --builder SPEC"),
            _ => {}
        }
        if let Some(e) = self.epsilon {
            ensure!(e >= 0.0 && e.is_finite(), "epsilon must be a finite value >= 0, got {e}");
        }
        if let Some(d) = self.delta {
            ensure!(d >= 0.0 && d.is_finite(), "delta must be a finite value >= 0, got {d}");
        }
        ensure!(self.b != Some(0), "B must be >= 1");
        if let Some(list) = &self.b_list {
            ensure!(!list.is_empty() && list.iter().all(|&b| b >= 1), "every B in the list must be >= 1");
        }
        ensure!(self.layers != Some(0), "layer count must be >= 1");
        self.schedule()?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<Schedule> {
        match &self.schedule {
            Some(s) => s.parse().map_err(|e: String| anyhow!(e)),
            None => Ok(Schedule::OneFOneB),
        }
    }

    pub fn cluster(&self) -> Result<ClusterMesh> {
        let doc = match &self.cluster {
            Some(ClusterSource::Path(p)) => read_doc::<ClusterDoc>(p)?,
            Some(ClusterSource::Inline(d)) => d.clone(),
            None => bail!("no cluster given: pass --cluster FILE or set [cluster] in the config"),
        };
        Ok(ClusterMesh::try_from(doc)?)
    }

    pub fn graph(&self) -> Result<OpGraph> {
        if let Some(p) = &self.graph {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            return graph::parse(&bytes).with_context(|| format!("parsing graph {}", p.display()));
        }
        let spec = self.builder.as_deref().ok_or_else(|| anyhow!("no graph source"))?;
        build_from_spec(spec, self.seed.unwrap_or(0))
    }

    /// Human-readable name of the graph source.
    pub fn source(&self) -> String {
        match (&self.graph, &self.builder) {
            (Some(p), _) => p.display().to_string(),
            (None, Some(b)) => b.clone(),
            _ => String::new(),
        }
    }
}

/// Builds a graph from `name:key=value,...`, e.g.
/// `mlp:layers=4,batch=16,hidden=64,backward=true`,
/// `transformer:blocks=2,batch=4,seq=8,hidden=16,heads=2` or
/// `random:nodes=12`.
pub fn build_from_spec(spec: &str, seed: u64) -> Result<OpGraph> {
    let (name, args) = spec.split_once(':').unwrap_or((spec, ""));
    let mut kv = Vec::new();
    for part in args.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part.split_once('=').ok_or_else(|| anyhow!("builder argument {part:?} is not key=value"))?;
        kv.push((k.trim().to_string(), v.trim().to_string()));
    }
    let mut take = |key: &str, default: u64| -> Result<u64> {
        match kv.iter().position(|(k, _)| k == key) {
            Some(i) => {
                let (_, v) = kv.remove(i);
                v.parse().with_context(|| format!("builder argument {key}={v} is not an integer"))
            }
            None => Ok(default),
        }
    };
    let graph = match name {
        "mlp" => {
            let mut cfg = MlpConfig::new(take("layers", 2)?, take("batch", 8)?, take("hidden", 4)?);
            cfg.elem_bytes = take("elem_bytes", 4)? as u32;
            cfg.backward = take_bool(&mut kv, "backward")?;
            graph::build_mlp_with(cfg)?
        }
        "transformer" => {
            let mut cfg = TransformerConfig::new(take("blocks", 1)?, take("batch", 2)?, take("seq", 4)?, take("hidden", 8)?, take("heads", 2)?);
            cfg.elem_bytes = take("elem_bytes", 4)? as u32;
            cfg.backward = take_bool(&mut kv, "backward")?;
            graph::build_transformer_with(cfg)?
        }
        "random" => {
            let nodes = take("nodes", 8)? as usize;
            let seed = take("seed", seed)?;
            graph::random_graph(seed, nodes)?
        }
        other => bail!("unknown builder {other:?}; expected mlp, transformer or random"),
    };
    if let Some((k, _)) = kv.first() {
        bail!("unknown argument {k:?} for builder {name}");
    }
    Ok(graph)
}

fn take_bool(kv: &mut Vec<(String, String)>, key: &str) -> Result<bool> {
    match kv.iter().position(|(k, _)| k == key) {
        Some(i) => {
            let (_, v) = kv.remove(i);
            v.parse().with_context(|| format!("builder argument {key}={v} is not true/false"))
        }
        None => Ok(false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builder_specs() {
        assert_eq!(build_from_spec("mlp:layers=2,batch=8,hidden=4", 0).unwrap().len(), 7);
        assert!(build_from_spec("mlp:layers=2,backward=true", 0).unwrap().has_backward());
        assert!(build_from_spec("mlp:depth=2", 0).is_err());
        assert!(build_from_spec("conv", 0).is_err());
        assert_eq!(build_from_spec("random:nodes=6", 3).unwrap(), build_from_spec("random:nodes=6,seed=3", 9).unwrap());
    }

    #[test]
    fn exactly_one_graph_source() {
        let mut c = RunConfig { builder: Some("mlp".into()), ..Default::default() };
        assert!(c.validate().is_ok());
        c.graph = Some("g.json".into());
        assert!(c.validate().is_err());
        c.builder = None;
        c.graph = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn inline_cluster_in_toml() {
        let c: RunConfig = toml::from_str(
            "builder = 'mlp'\nb = 2\n[cluster]\nhosts = 1\ndevices_per_host = 2\nintra_bw = 1e9\ninter_bw = 1e8\n",
        )
        .unwrap();
        let mesh = c.cluster().unwrap();
        assert_eq!(mesh.num_devices(), 2);
        assert_eq!(mesh.device_memory, u64::MAX);
    }
}
