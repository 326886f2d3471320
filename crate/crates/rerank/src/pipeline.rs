//! End-to-end runner: load, aggregate, score, fuse, rank, evaluate, persist.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rerank_core::aggregate::{aqe_expand, dba_augment, ensemble_features, pca_fit, pca_transform, tta_aggregate};
use rerank_core::diffusion::{build_affinity, diffuse_queries};
use rerank_core::eval::{map_at_k, MapReport};
use rerank_core::fusion::{fuse_scores, rank_topk, RankedResult};
use rerank_core::kreciprocal::{candidate_sets, kreciprocal_rerank};
use rerank_core::metricspace::{knn_search_blocked, knn_self_excluded};
use rerank_core::{FeatureMatrix, LabelMap, NeighborTable, SparseRowMatrix};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{ModelInput, PipelineConfig};
use crate::error::{Error, Result, StageContext};
use crate::formats;

pub const QUERY_FEATURES: &str = "query.feat";
pub const GALLERY_FEATURES: &str = "gallery.feat";
pub const PCA_MODEL: &str = "pca.pcam";
pub const INITIAL_KNN: &str = "initial_knn.nbrt";
pub const DIFFUSION_SCORES: &str = "diffusion.sprw";
pub const RERANK_DISTANCES: &str = "rerank.sprw";
pub const FUSED_SCORES: &str = "fused.sprw";
pub const SUBMISSION: &str = "submission.csv";
pub const PER_QUERY_AP: &str = "per_query_ap.csv";
pub const MANIFEST: &str = "manifest.json";

/// Emits one JSON object per line on stderr.
#[derive(Debug, Clone, Copy, Default)]
pub struct Logger {
    pub quiet: bool,
}

impl Logger {
    pub fn stage(&self, stage: &str, seconds: f64, shapes: Value) {
        if !self.quiet {
            eprintln!("{}", json!({ "stage": stage, "wall_seconds": seconds, "shapes": shapes }));
        }
    }
}

pub fn shape_of(m: &FeatureMatrix) -> Value {
    json!([m.rows(), m.dim()])
}

pub fn sparse_shape(m: &SparseRowMatrix) -> Value {
    json!({ "rows": m.rows(), "cols": m.cols(), "nnz": m.nnz() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArtifactDigest {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: PipelineConfig,
    /// Artifacts in the order they were written, names relative to the output dir.
    pub artifacts: Vec<ArtifactDigest>,
    pub timings: Vec<StageTiming>,
    pub map_at_k: Option<f64>,
    /// mAP of the plain cosine ranking of the same (aggregated) features.
    pub baseline_map_at_k: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub results: Vec<RankedResult>,
    pub report: Option<MapReport>,
    pub baseline: Option<MapReport>,
    pub manifest: Manifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Recomputes every digest in a manifest; returns the names that no longer match.
pub fn verify_manifest(output_dir: &Path) -> Result<Vec<String>> {
    let path = output_dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    let mut bad = Vec::new();
    for a in &manifest.artifacts {
        let p = output_dir.join(&a.name);
        if !p.is_file() || sha256_file(&p)? != a.sha256 {
            bad.push(a.name.clone());
        }
    }
    Ok(bad)
}

/// Runs `f` on a dedicated rayon pool with `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// `--workers`, then `RERANK_WORKERS`, then available parallelism.
pub fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    let from_env = match std::env::var("RERANK_WORKERS") {
        Ok(v) => Some(v.trim().parse::<usize>().map_err(|_| Error::Config(format!("RERANK_WORKERS={v:?} is not a count")))?),
        Err(_) => None,
    };
    let n = flag
        .or(from_env)
        .or(config)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if n == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    Ok(n)
}

/// Loads every view of one model, normalizing when asked, and aggregates them.
pub fn load_model_side(views: &[PathBuf], normalize: bool, tta: bool) -> Result<FeatureMatrix> {
    let views = if tta { views } else { &views[..1] };
    let mats = views
        .iter()
        .map(|p| {
            let m = formats::load_features(p)?;
            if normalize {
                m.l2_normalize().map_err(|e| Error::format(p, e.to_string()))
            } else {
                Ok(m)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if mats.len() == 1 {
        return Ok(mats.into_iter().next().unwrap());
    }
    Ok(tta_aggregate(&mats)?)
}

/// Sparse matrix holding each query's kNN similarities.
pub fn neighbors_to_sparse(t: &NeighborTable, cols: usize) -> Result<SparseRowMatrix> {
    let rows = (0..t.rows())
        .map(|i| {
            let mut r: Vec<(u32, f32)> = t.row_indices(i).iter().copied().zip(t.row_sims(i).iter().copied()).collect();
            r.sort_unstable_by_key(|e| e.0);
            r
        })
        .collect();
    Ok(SparseRowMatrix::from_rows(cols, rows)?)
}

/// Retrieval universe for evaluation: the given gallery ids, or every labelled
/// id that is not a query.
pub fn gallery_universe(labels: &LabelMap, query_ids: &[String], gallery_ids: Option<&[String]>) -> Vec<String> {
    match gallery_ids {
        Some(g) => g.to_vec(),
        None => {
            let queries: std::collections::HashSet<&str> = query_ids.iter().map(String::as_str).collect();
            labels.iter().filter(|(id, _)| !queries.contains(id)).map(|(id, _)| id.to_owned()).collect()
        }
    }
}

struct Run<'a> {
    dir: &'a Path,
    log: Logger,
    artifacts: Vec<ArtifactDigest>,
    timings: Vec<StageTiming>,
}

impl Run<'_> {
    fn record(&mut self, name: &str) -> Result<()> {
        let path = self.dir.join(name);
        let bytes = std::fs::metadata(&path).map_err(|e| Error::io(&path, e))?.len();
        self.artifacts.retain(|a| a.name != name);
        self.artifacts.push(ArtifactDigest { name: name.to_owned(), bytes, sha256: sha256_file(&path)? });
        Ok(())
    }

    fn timed<T>(&mut self, stage: &'static str, f: impl FnOnce() -> Result<T>, shapes: impl FnOnce(&T) -> Value) -> Result<T> {
        let start = Instant::now();
        let out = f().stage(stage)?;
        let seconds = start.elapsed().as_secs_f64();
        self.log.stage(stage, seconds, shapes(&out));
        self.timings.push(StageTiming { stage: stage.to_owned(), seconds });
        Ok(out)
    }
}

fn load_models(cfg: &PipelineConfig, models: &[&ModelInput]) -> Result<(FeatureMatrix, FeatureMatrix)> {
    let mut qs = Vec::with_capacity(models.len());
    let mut gs = Vec::with_capacity(models.len());
    for m in models {
        qs.push(load_model_side(&m.query_views, cfg.normalize_on_load, cfg.aggregate.tta)?);
        gs.push(load_model_side(&m.gallery_views, cfg.normalize_on_load, cfg.aggregate.tta)?);
    }
    if qs.len() == 1 {
        return Ok((qs.pop().unwrap(), gs.pop().unwrap()));
    }
    Ok((ensemble_features(&qs)?, ensemble_features(&gs)?))
}

/// Executes the configured pipeline and writes every artifact under `output_dir`.
pub fn run_pipeline(cfg: &PipelineConfig, log: Logger) -> Result<RunOutput> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut run = Run { dir, log, artifacts: Vec::new(), timings: Vec::new() };
    let total = Instant::now();

    let models = cfg.ensemble_models();
    let (mut q, mut g) = run.timed("load", || load_models(cfg, &models), |(q, g)| json!({ "query": shape_of(q), "gallery": shape_of(g) }))?;

    let agg = &cfg.aggregate;
    if agg.pca.enabled {
        let (model, pq, pg) = run.timed(
            "pca",
            || {
                let model = pca_fit(&g, agg.pca.r, agg.pca.whiten)?;
                let pq = pca_transform(&q, &model)?;
                let pg = pca_transform(&g, &model)?;
                formats::save_pca(&model, &dir.join(PCA_MODEL))?;
                Ok((model, pq, pg))
            },
            |(_, pq, pg)| json!({ "query": shape_of(pq), "gallery": shape_of(pg) }),
        )?;
        drop(model);
        run.record(PCA_MODEL)?;
        (q, g) = (pq, pg);
    }
    if agg.dba.enabled {
        g = run.timed(
            "dba",
            || {
                let nbrs = knn_self_excluded(&g, agg.dba.k)?;
                Ok(dba_augment(&g, &nbrs, agg.dba.k, agg.dba.weights.into())?)
            },
            |g| json!({ "gallery": shape_of(g) }),
        )?;
    }
    if agg.aqe.enabled {
        q = run.timed(
            "aqe",
            || {
                let nbrs = knn_search_blocked(&q, &g, agg.aqe.k, cfg.knn.block_rows)?;
                Ok(aqe_expand(&q, &g, &nbrs, agg.aqe.k)?)
            },
            |q| json!({ "query": shape_of(q) }),
        )?;
    }
    run.timed(
        "save_features",
        || {
            formats::save_features(&q, &dir.join(QUERY_FEATURES))?;
            formats::save_features(&g, &dir.join(GALLERY_FEATURES))
        },
        |_| json!({}),
    )?;
    run.record(QUERY_FEATURES)?;
    run.record(GALLERY_FEATURES)?;

    let fusion = cfg.fusion_params();
    let width = fusion.top_k.min(g.rows());
    let initial = run.timed(
        "knn",
        || {
            let t = knn_search_blocked(&q, &g, width, cfg.knn.block_rows)?;
            formats::save_neighbors(&t, &dir.join(INITIAL_KNN))?;
            Ok(t)
        },
        |t| json!({ "rows": t.rows(), "k": t.k() }),
    )?;
    run.record(INITIAL_KNN)?;

    let s = if cfg.diffusion.enabled {
        let p = cfg.diffusion.params();
        let s = run.timed(
            "diffusion",
            || {
                let graph = build_affinity(&g, &p)?;
                let s = diffuse_queries(&q, &g, &graph, &p)?;
                formats::save_sparse(&s, &dir.join(DIFFUSION_SCORES))?;
                Ok(s)
            },
            sparse_shape,
        )?;
        run.record(DIFFUSION_SCORES)?;
        Some(s)
    } else {
        None
    };

    let d = if cfg.rerank.enabled {
        let d = run.timed(
            "rerank",
            || {
                let cands = candidate_sets(&q, &g, cfg.rerank.candidates.into())?;
                let d = kreciprocal_rerank(&q, &g, &cfg.rerank.params(), &cands, cfg.rerank.pool.into())?;
                formats::save_sparse(&d, &dir.join(RERANK_DISTANCES))?;
                Ok(d)
            },
            sparse_shape,
        )?;
        run.record(RERANK_DISTANCES)?;
        Some(d)
    } else {
        None
    };

    let fused = run.timed(
        "fuse",
        || {
            let fused = if s.is_none() && d.is_none() {
                neighbors_to_sparse(&initial, g.rows())?
            } else {
                let empty = || SparseRowMatrix::from_rows(g.rows(), vec![Vec::new(); q.rows()]);
                let s = match &s {
                    Some(s) => s.clone(),
                    None => empty()?,
                };
                let d = match &d {
                    Some(d) => d.clone(),
                    None => empty()?,
                };
                fuse_scores(&s, &d, &fusion)?
            };
            formats::save_sparse(&fused, &dir.join(FUSED_SCORES))?;
            Ok(fused)
        },
        sparse_shape,
    )?;
    run.record(FUSED_SCORES)?;

    let results = run.timed(
        "topk",
        || {
            let r = rank_topk(&fused, q.ids(), g.ids(), &fusion)?;
            formats::write_submission(&r, &dir.join(SUBMISSION))?;
            Ok(r)
        },
        |r: &Vec<RankedResult>| json!({ "queries": r.len(), "top_k": fusion.top_k }),
    )?;
    run.record(SUBMISSION)?;

    let (report, baseline) = match &cfg.labels {
        Some(path) => {
            let (report, baseline) = run.timed(
                "eval",
                || {
                    let labels = formats::load_labels(path)?;
                    let k = cfg.eval.k;
                    let denom = cfg.eval.denominator.into();
                    let report = map_at_k(&results, &labels, g.ids(), k, denom)?;
                    let raw = rank_topk(&neighbors_to_sparse(&initial, g.rows())?, q.ids(), g.ids(), &fusion)?;
                    let baseline = map_at_k(&raw, &labels, g.ids(), k, denom)?;
                    formats::save_per_query_ap(&report.per_query, &dir.join(PER_QUERY_AP))?;
                    Ok((report, baseline))
                },
                |(r, b)| json!({ "map_at_k": r.map, "baseline_map_at_k": b.map, "k": cfg.eval.k }),
            )?;
            run.record(PER_QUERY_AP)?;
            (Some(report), Some(baseline))
        }
        None => (None, None),
    };

    run.timings.push(StageTiming { stage: "total".into(), seconds: total.elapsed().as_secs_f64() });
    let manifest = Manifest {
        config: cfg.clone(),
        artifacts: run.artifacts,
        timings: run.timings,
        map_at_k: report.as_ref().map(|r| r.map),
        baseline_map_at_k: baseline.as_ref().map(|r| r.map),
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e)).stage("manifest")?;
    Ok(RunOutput { results, report, baseline, manifest })
}
