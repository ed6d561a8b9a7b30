//! Run configuration files.
//!
//! A run is described by one JSON object. Fields are read one at a time so
//! that every error names the field it concerns. Relative paths resolve
//! against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::backend::{load_backend, Backend, BackendConfig, BackendKind};
use crate::dataset::{load_dataset, Dataset};
use crate::enumerate::{EquivalenceConfig, GrammarConfig};
use crate::metrics::MetricKind;
use crate::oracle::{SynthesisConfig, TierConfig};

pub const DEFAULT_BUDGET_SECS: f64 = 60.0;

const KNOWN_FIELDS: [&str; 14] = [
    "dataset",
    "metric",
    "grammar",
    "tiers",
    "equivalence",
    "budget_secs",
    "max_candidates",
    "max_generations",
    "backend",
    "workers",
    "seed",
    "timing",
    "classwise",
    "output_dir",
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: invalid JSON: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

impl ConfigError {
    pub fn field(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Field {
            field: field.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub synthesis: SynthesisConfig,
    /// `None` falls back to the dataset's stub model, if it names one.
    pub backend: Option<BackendConfig>,
    /// Synthesize one expression per predicted class.
    pub classwise: bool,
    pub output_dir: Option<PathBuf>,
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn typed<T: DeserializeOwned>(obj: &Map<String, Value>, field: &str) -> Result<Option<T>, ConfigError> {
    match obj.get(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => T::deserialize(v)
            .map(Some)
            .map_err(|e| ConfigError::field(field, e.to_string())),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn parse_grammar(v: &Value) -> Result<GrammarConfig, ConfigError> {
    let g = match v {
        Value::String(name) => GrammarConfig::named(name)
            .ok_or_else(|| ConfigError::field("grammar", format!("unknown grammar `{name}` (expected G1 or G2)")))?,
        other => GrammarConfig::deserialize(other).map_err(|e| ConfigError::field("grammar", e.to_string()))?,
    };
    g.validate().map_err(|m| ConfigError::field("grammar", m))?;
    Ok(g)
}

impl RunConfig {
    /// Parses a config object. `base` is the directory relative paths are
    /// resolved against.
    pub fn from_value(v: &Value, base: &Path) -> Result<Self, ConfigError> {
        let obj = v
            .as_object()
            .ok_or_else(|| ConfigError::field("<root>", "config must be a JSON object"))?;
        if let Some(unknown) = obj.keys().find(|k| !KNOWN_FIELDS.contains(&k.as_str())) {
            return Err(ConfigError::field(unknown.as_str(), "unknown field"));
        }
        let dataset: PathBuf =
            typed(obj, "dataset")?.ok_or_else(|| ConfigError::field("dataset", "required field is missing"))?;
        let metric: String = typed(obj, "metric")?.ok_or_else(|| ConfigError::field("metric", "required field is missing"))?;
        let metric: MetricKind = metric.parse().map_err(|m: String| ConfigError::field("metric", m))?;
        let grammar = match obj.get("grammar") {
            None | Some(Value::Null) => GrammarConfig::g2(),
            Some(v) => parse_grammar(v)?,
        };
        let budget_secs: f64 = typed(obj, "budget_secs")?.unwrap_or(DEFAULT_BUDGET_SECS);
        if !(budget_secs > 0.0 && budget_secs.is_finite()) {
            return Err(ConfigError::field("budget_secs", "budget must be a positive number of seconds"));
        }
        let mut synthesis = SynthesisConfig::new(metric, grammar, Duration::from_secs_f64(budget_secs));
        if let Some(t) = typed::<TierConfig>(obj, "tiers")? {
            if t.subset_sizes.windows(2).any(|w| w[0] >= w[1]) || t.subset_sizes.contains(&0) {
                return Err(ConfigError::field("tiers", "subset_sizes must be positive and strictly increasing"));
            }
            synthesis.tiers = t;
        }
        if let Some(e) = typed::<EquivalenceConfig>(obj, "equivalence")? {
            if !(e.tolerance > 0.0) {
                return Err(ConfigError::field("equivalence", "tolerance must be > 0"));
            }
            synthesis.equivalence = e;
        }
        synthesis.max_candidates = typed(obj, "max_candidates")?;
        synthesis.max_generations = typed(obj, "max_generations")?;
        synthesis.workers = typed(obj, "workers")?.unwrap_or_else(default_workers);
        if synthesis.workers == 0 {
            return Err(ConfigError::field("workers", "must be >= 1"));
        }
        synthesis.seed = typed(obj, "seed")?.unwrap_or(0);
        synthesis.timing = typed(obj, "timing")?.unwrap_or(true);
        let mut backend: Option<BackendConfig> = typed(obj, "backend")?;
        if let Some(b) = &mut backend {
            if b.batch_size == 0 {
                return Err(ConfigError::field("backend", "batch_size must be >= 1"));
            }
            match &mut b.kind {
                BackendKind::Onnx { path } => *path = resolve(base, path),
                BackendKind::Stub { spec_path } => *spec_path = resolve(base, spec_path),
                BackendKind::Remote { .. } => {}
            }
        }
        Ok(Self {
            dataset: resolve(base, &dataset),
            synthesis,
            backend,
            classwise: typed(obj, "classwise")?.unwrap_or(false),
            output_dir: typed::<PathBuf>(obj, "output_dir")?.map(|p| resolve(base, &p)),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let v: Value = serde_json::from_str(&text).map_err(|source| ConfigError::Json {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_value(&v, path.parent().unwrap_or_else(|| Path::new(".")))
    }

    /// Loads the dataset and opens the backend. Without an explicit backend
    /// the dataset's stub model is used when there is one.
    pub fn open(&self) -> Result<(Dataset, Option<Arc<dyn Backend>>), ConfigError> {
        let ds = load_dataset(&self.dataset).map_err(|e| ConfigError::field("dataset", e.to_string()))?;
        let backend = open_backend(self.backend.as_ref(), &ds)?;
        Ok((ds, backend))
    }
}

/// Opens `cfg`, or the dataset's stub model when `cfg` is `None`.
pub fn open_backend(cfg: Option<&BackendConfig>, ds: &Dataset) -> Result<Option<Arc<dyn Backend>>, ConfigError> {
    let cfg = match (cfg, &ds.stub_model) {
        (Some(c), _) => c.clone(),
        (None, Some(spec)) => BackendConfig::stub(spec),
        (None, None) => return Ok(None),
    };
    load_backend(&cfg, ds.image_dims)
        .map(Some)
        .map_err(|e| ConfigError::field("backend", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> &'static Path {
        Path::new("/cfg")
    }

    #[test]
    fn minimal_config_gets_defaults() {
        let c = RunConfig::from_value(&json!({"dataset": "d/manifest.json", "metric": "mgt"}), base()).unwrap();
        assert_eq!(c.dataset, PathBuf::from("/cfg/d/manifest.json"));
        assert_eq!(c.synthesis.metric, MetricKind::MGt);
        assert_eq!(c.synthesis.grammar, GrammarConfig::g2());
        assert_eq!(c.synthesis.budget, Duration::from_secs(60));
        assert_eq!(c.synthesis.tiers, TierConfig::default());
        assert!(c.backend.is_none());
        assert!(!c.classwise);
    }

    #[test]
    fn full_config() {
        let c = RunConfig::from_value(
            &json!({
                "dataset": "/abs/manifest.json",
                "metric": "deletion:5",
                "grammar": {"terminals": ["Grads", "AblScores"], "unary_rules": ["ReLU"], "binary_rules": ["Add"]},
                "tiers": {"subset_sizes": [10, 20], "stratified_by_class": false},
                "equivalence": {"mode": "metric", "tolerance": 1e-4},
                "budget_secs": 2.5,
                "max_candidates": 7,
                "backend": {"kind": "stub", "spec_path": "m/spec.json", "batch_size": 4},
                "workers": 2,
                "seed": 9,
                "timing": false
            }),
            base(),
        )
        .unwrap();
        assert_eq!(c.dataset, PathBuf::from("/abs/manifest.json"));
        assert_eq!(c.synthesis.metric, MetricKind::Deletion(Some(5)));
        assert_eq!(c.synthesis.grammar.terminals.len(), 2);
        assert_eq!(c.synthesis.tiers.subset_sizes, vec![10, 20]);
        assert_eq!(c.synthesis.equivalence.tolerance, 1e-4);
        assert_eq!(c.synthesis.budget, Duration::from_millis(2500));
        assert_eq!((c.synthesis.max_candidates, c.synthesis.workers, c.synthesis.seed), (Some(7), 2, 9));
        assert!(!c.synthesis.timing);
        let b = c.backend.unwrap();
        assert_eq!(b.kind, BackendKind::Stub { spec_path: "/cfg/m/spec.json".into() });
        assert_eq!(b.batch_size, 4);
    }

    fn field_of(v: Value) -> String {
        match RunConfig::from_value(&v, base()).unwrap_err() {
            ConfigError::Field { field, .. } => field,
            other => panic!("{other}"),
        }
    }

    #[test]
    fn errors_name_their_field() {
        assert_eq!(field_of(json!({"metric": "mgt"})), "dataset");
        assert_eq!(field_of(json!({"dataset": "x"})), "metric");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "bogus"})), "metric");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "grammar": "G3"})), "grammar");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "budget_secs": 0})), "budget_secs");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "tiers": {"subset_sizes": [5, 5]}})), "tiers");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "workers": "two"})), "workers");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "backend": {"kind": "gpu"}})), "backend");
        assert_eq!(field_of(json!({"dataset": "x", "metric": "sch", "colour": 1})), "colour");
        assert_eq!(field_of(json!({"dataset": 3, "metric": "sch"})), "dataset");
    }

    #[test]
    fn missing_dataset_is_a_dataset_error() {
        let c = RunConfig::from_value(&json!({"dataset": "/nonexistent/manifest.json", "metric": "sch"}), base()).unwrap();
        match c.open() {
            Err(ConfigError::Field { field, .. }) => assert_eq!(field, "dataset"),
            other => panic!("{:?}", other.map(|_| ())),
        }
    }
}
