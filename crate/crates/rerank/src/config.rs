//! Pipeline configuration: one JSON document, unknown keys rejected.

use std::path::{Path, PathBuf};

use rerank_core::aggregate::DbaWeights;
use rerank_core::diffusion::DiffusionParams;
use rerank_core::eval::ApDenominator;
use rerank_core::fusion::FusionParams;
use rerank_core::kreciprocal::{CandidateMode, KReciprocalParams, NeighborPool};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Feature files of one model: one path per TTA view, queries and gallery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelInput {
    pub name: String,
    pub query_views: Vec<PathBuf>,
    pub gallery_views: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub enabled: bool,
    pub r: usize,
    pub whiten: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        Self { enabled: false, r: 256, whiten: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DbaWeightMode {
    #[default]
    Linear,
    Uniform,
}

impl From<DbaWeightMode> for DbaWeights {
    fn from(m: DbaWeightMode) -> Self {
        match m {
            DbaWeightMode::Linear => DbaWeights::Linear,
            DbaWeightMode::Uniform => DbaWeights::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DbaConfig {
    pub enabled: bool,
    pub k: usize,
    pub weights: DbaWeightMode,
}

impl Default for DbaConfig {
    fn default() -> Self {
        Self { enabled: false, k: 10, weights: DbaWeightMode::Linear }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AqeConfig {
    pub enabled: bool,
    pub k: usize,
}

impl Default for AqeConfig {
    fn default() -> Self {
        Self { enabled: false, k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregateConfig {
    /// Average all views of a model; when off only the first view is used.
    pub tta: bool,
    /// Model names to ensemble; empty means every model.
    pub ensemble: Vec<String>,
    pub pca: PcaConfig,
    pub dba: DbaConfig,
    pub aqe: AqeConfig,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self { tta: true, ensemble: Vec::new(), pca: PcaConfig::default(), dba: DbaConfig::default(), aqe: AqeConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnConfig {
    /// Query rows per similarity block.
    pub block_rows: usize,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { block_rows: 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Candidates {
    Full,
    Top(usize),
}

impl From<Candidates> for CandidateMode {
    fn from(c: Candidates) -> Self {
        match c {
            Candidates::Full => CandidateMode::Full,
            Candidates::Top(n) => CandidateMode::Top(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    #[default]
    Pooled,
    GalleryOnly,
}

impl From<PoolMode> for NeighborPool {
    fn from(m: PoolMode) -> Self {
        match m {
            PoolMode::Pooled => NeighborPool::Pooled,
            PoolMode::GalleryOnly => NeighborPool::GalleryOnly,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub enabled: bool,
    pub k1: usize,
    pub k2: usize,
    pub lambda_value: f64,
    pub candidates: Candidates,
    pub pool: PoolMode,
}

impl Default for RerankConfig {
    fn default() -> Self {
        let p = KReciprocalParams::default();
        Self { enabled: true, k1: p.k1, k2: p.k2, lambda_value: p.lambda_value, candidates: Candidates::Top(1000), pool: PoolMode::Pooled }
    }
}

impl RerankConfig {
    pub fn params(&self) -> KReciprocalParams {
        KReciprocalParams { k1: self.k1, k2: self.k2, lambda_value: self.lambda_value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub enabled: bool,
    pub kd: usize,
    pub n_trunc: usize,
    pub alpha: f64,
    pub gamma_exp: f64,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let p = DiffusionParams::default();
        Self {
            enabled: true,
            kd: p.kd,
            n_trunc: p.n_trunc,
            alpha: p.alpha,
            gamma_exp: p.gamma_exp,
            cg_tol: p.cg_tol,
            cg_max_iter: p.cg_max_iter,
        }
    }
}

impl DiffusionConfig {
    pub fn params(&self) -> DiffusionParams {
        DiffusionParams {
            kd: self.kd,
            n_trunc: self.n_trunc,
            alpha: self.alpha,
            gamma_exp: self.gamma_exp,
            cg_tol: self.cg_tol,
            cg_max_iter: self.cg_max_iter,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub lambda: f64,
    pub top_k: usize,
    pub normalize_before_fuse: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        let p = FusionParams::default();
        Self { lambda: p.lambda, top_k: p.top_k, normalize_before_fuse: p.normalize_before_fuse }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenominatorMode {
    #[default]
    MinRelevantK,
    Relevant,
}

impl From<DenominatorMode> for ApDenominator {
    fn from(m: DenominatorMode) -> Self {
        match m {
            DenominatorMode::MinRelevantK => ApDenominator::MinRelevantK,
            DenominatorMode::Relevant => ApDenominator::Relevant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub denominator: DenominatorMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { k: 100, denominator: DenominatorMode::MinRelevantK }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub models: Vec<ModelInput>,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    pub output_dir: PathBuf,
    #[serde(default = "yes")]
    pub normalize_on_load: bool,
    #[serde(default)]
    pub aggregate: AggregateConfig,
    #[serde(default)]
    pub knn: KnnConfig,
    #[serde(default)]
    pub rerank: RerankConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub fusion: FusionConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Worker threads; `None` defers to the command line, `RERANK_WORKERS`, then available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn yes() -> bool {
    true
}

impl PipelineConfig {
    /// A configuration with every field at its default.
    pub fn new(models: Vec<ModelInput>, output_dir: PathBuf) -> Self {
        Self {
            models,
            labels: None,
            output_dir,
            normalize_on_load: true,
            aggregate: AggregateConfig::default(),
            knn: KnnConfig::default(),
            rerank: RerankConfig::default(),
            diffusion: DiffusionConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            workers: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new("")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for m in &mut self.models {
            m.query_views.iter_mut().for_each(fix);
            m.gallery_views.iter_mut().for_each(fix);
        }
        if let Some(l) = &mut self.labels {
            fix(l);
        }
        fix(&mut self.output_dir);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `key.path=value` overrides. The value is parsed as JSON and
    /// taken as a plain string when that fails.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
            set_path(&mut doc, key, value)?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    /// Models entering the ensemble, in config order.
    pub fn ensemble_models(&self) -> Vec<&ModelInput> {
        let wanted = &self.aggregate.ensemble;
        self.models.iter().filter(|m| wanted.is_empty() || wanted.contains(&m.name)).collect()
    }

    pub fn fusion_params(&self) -> FusionParams {
        FusionParams {
            lambda: self.fusion.lambda,
            top_k: self.fusion.top_k,
            d_max_fill: self.rerank.params().d_max(),
            s_min_fill: 0.0,
            normalize_before_fuse: self.fusion.normalize_before_fuse,
        }
    }

    /// Parameter ranges and cross-field consistency, without touching the filesystem.
    pub fn validate_params(&self) -> Result<()> {
        let cfg = |e: rerank_core::Error| Error::Config(e.to_string());
        if self.models.is_empty() {
            return Err(Error::Config("at least one model is required".into()));
        }
        let mut names = std::collections::HashSet::new();
        for m in &self.models {
            if !names.insert(m.name.as_str()) {
                return Err(Error::Config(format!("duplicate model name {:?}", m.name)));
            }
            if m.query_views.is_empty() || m.query_views.len() != m.gallery_views.len() {
                return Err(Error::Config(format!(
                    "model {:?}: need the same non-zero number of query and gallery views, got {} and {}",
                    m.name,
                    m.query_views.len(),
                    m.gallery_views.len()
                )));
            }
        }
        for name in &self.aggregate.ensemble {
            if !names.contains(name.as_str()) {
                return Err(Error::Config(format!("ensemble names unknown model {name:?}")));
            }
        }
        let a = &self.aggregate;
        if a.pca.enabled && a.pca.r == 0 {
            return Err(Error::Config("pca.r must be at least 1".into()));
        }
        if a.dba.enabled && a.dba.k == 0 {
            return Err(Error::Config("dba.k must be at least 1".into()));
        }
        if a.aqe.enabled && a.aqe.k == 0 {
            return Err(Error::Config("aqe.k must be at least 1".into()));
        }
        if self.knn.block_rows == 0 {
            return Err(Error::Config("knn.block_rows must be at least 1".into()));
        }
        if self.rerank.enabled {
            self.rerank.params().validate().map_err(cfg)?;
            if self.rerank.candidates == Candidates::Top(0) {
                return Err(Error::Config("rerank candidate count must be at least 1".into()));
            }
        }
        if self.diffusion.enabled {
            self.diffusion.params().validate().map_err(cfg)?;
        }
        self.fusion_params().validate().map_err(cfg)?;
        if self.eval.k == 0 {
            return Err(Error::Config("eval.k must be at least 1".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Full validation: parameters plus existence of every input file.
    pub fn validate(&self) -> Result<()> {
        self.validate_params()?;
        let inputs = self.models.iter().flat_map(|m| m.query_views.iter().chain(&m.gallery_views)).chain(&self.labels);
        for p in inputs {
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert((*part).to_owned(), value);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| Error::Config(format!("{key}: {part:?} is not an index")))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| Error::Config(format!("{key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Null => {
                *cur = Value::Object(Default::default());
                let Value::Object(map) = cur else { unreachable!() };
                if last {
                    map.insert((*part).to_owned(), value);
                    return Ok(());
                }
                map.entry(*part).or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(Error::Config(format!("{key}: {part:?} is not inside an object"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}
