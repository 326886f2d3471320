use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rerank::config::{Candidates, DbaWeightMode, DenominatorMode, PipelineConfig, PoolMode};
use rerank::error::{Error, Result};
use rerank::formats;
use rerank::gradcheck::run_gradcheck;
use rerank::pipeline::{self, gallery_universe, resolve_workers, shape_of, sparse_shape, with_workers, Logger};
use rerank::synthetic::{fixture_config, generate_synthetic, write_synthetic, SyntheticSpec};
use rerank_core::aggregate::{aqe_expand, dba_augment, ensemble_features, pca_fit, pca_transform, tta_aggregate};
use rerank_core::diffusion::{build_affinity, diffuse_queries, DiffusionParams};
use rerank_core::eval::map_at_k;
use rerank_core::fusion::{fuse_scores, rank_topk, FusionParams, RankedResult};
use rerank_core::kreciprocal::{candidate_sets, kreciprocal_rerank, KReciprocalParams};
use rerank_core::metricspace::{knn_search_blocked, knn_self_excluded};
use rerank_core::SparseRowMatrix;
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(name = "rerank", version, about = "Retrieval post-processing: aggregation, re-ranking, diffusion, fusion and evaluation")]
struct Cli {
    /// Worker threads (default: RERANK_WORKERS, then available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Suppress JSON stage logs on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded clustered dataset with labels and a matching pipeline config.
    GenSynthetic(GenSynthetic),
    /// L2-normalize every row of a feature file.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Average TTA views of the same images, then L2-normalize.
    Tta {
        #[arg(long, num_args = 1.., required = true)]
        views: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Sum per-model features, then L2-normalize.
    Ensemble {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Fit PCA on the gallery (or load a model) and project query and gallery.
    Pca(PcaCmd),
    /// Database-side augmentation of gallery features.
    Dba {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long, default_value = "linear", value_parser = parse_enum::<DbaWeightMode>)]
        weights: DbaWeightMode,
        #[arg(long)]
        output: PathBuf,
    },
    /// Average query expansion against the gallery.
    Aqe {
        #[arg(long)]
        query: PathBuf,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Exact top-k cosine neighbors.
    Knn {
        /// Query features; omit to search the gallery against itself, excluding self.
        #[arg(long)]
        query: Option<PathBuf>,
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 1024)]
        block_rows: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// k-reciprocal distance matrix D over each query's candidates.
    RerankKr(RerankCmd),
    /// Diffusion similarity matrix S.
    Diffuse(DiffuseCmd),
    /// S - lambda * D over the union of defined entries.
    Fuse(FuseCmd),
    /// Top-K ranking of a score matrix, written as a submission CSV.
    Topk {
        #[arg(long)]
        scores: PathBuf,
        /// Query feature file (its `.ids` sidecar names the rows).
        #[arg(long)]
        query: PathBuf,
        /// Gallery feature file (its `.ids` sidecar names the columns).
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long, default_value_t = 100)]
        top_k: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// mAP@K of a submission against labels.
    Eval(EvalCmd),
    /// Run the full pipeline from a JSON config.
    Run(RunCmd),
    /// Training-loss utilities.
    Losses {
        #[command(subcommand)]
        command: LossesCommand,
    },
}

#[derive(Args)]
struct GenSynthetic {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 20)]
    per_class_gallery: usize,
    #[arg(long, default_value_t = 5)]
    per_class_queries: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.35)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct PcaCmd {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = 256)]
    r: usize,
    #[arg(long)]
    whiten: bool,
    /// Apply this saved model instead of fitting one.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Receives `pca.pcam`, `query.feat` and `gallery.feat`.
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct RerankCmd {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = KReciprocalParams::default().k1)]
    k1: usize,
    #[arg(long, default_value_t = KReciprocalParams::default().k2)]
    k2: usize,
    #[arg(long, default_value_t = KReciprocalParams::default().lambda_value)]
    lambda_value: f64,
    /// `full` or a number of top cosine candidates per query.
    #[arg(long, default_value = "1000", value_parser = parse_candidates)]
    candidates: Candidates,
    #[arg(long, default_value = "pooled", value_parser = parse_enum::<PoolMode>)]
    pool: PoolMode,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct DiffuseCmd {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    gallery: PathBuf,
    #[arg(long, default_value_t = DiffusionParams::default().kd)]
    kd: usize,
    #[arg(long, default_value_t = DiffusionParams::default().n_trunc)]
    n_trunc: usize,
    #[arg(long, default_value_t = DiffusionParams::default().alpha)]
    alpha: f64,
    #[arg(long, default_value_t = DiffusionParams::default().gamma_exp)]
    gamma_exp: f64,
    #[arg(long, default_value_t = DiffusionParams::default().cg_tol)]
    cg_tol: f64,
    #[arg(long, default_value_t = DiffusionParams::default().cg_max_iter)]
    cg_max_iter: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct FuseCmd {
    /// Diffusion similarities; absent entries count as 0.
    #[arg(long)]
    s: Option<PathBuf>,
    /// Re-ranking distances; absent entries count as d_max.
    #[arg(long)]
    d: Option<PathBuf>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Re-ranking weight that produced D; sets d_max.
    #[arg(long, default_value_t = KReciprocalParams::default().lambda_value)]
    lambda_value: f64,
    #[arg(long)]
    normalize_before_fuse: bool,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct EvalCmd {
    #[arg(long)]
    submission: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "min_relevant_k", value_parser = parse_enum::<DenominatorMode>)]
    denominator: DenominatorMode,
    /// Gallery feature file defining the retrieval universe; default is every labelled non-query id.
    #[arg(long)]
    gallery: Option<PathBuf>,
    /// Write `query_id,ap` rows here.
    #[arg(long)]
    per_query: Option<PathBuf>,
}

#[derive(Args)]
struct RunCmd {
    #[arg(long)]
    config: PathBuf,
    /// Override a config field, e.g. `--set diffusion.alpha=0.9`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Print the effective config and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Subcommand)]
enum LossesCommand {
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_enum<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_candidates(s: &str) -> std::result::Result<Candidates, String> {
    if s == "full" {
        return Ok(Candidates::Full);
    }
    s.parse().map(Candidates::Top).map_err(|_| format!("expected `full` or a count, got {s:?}"))
}

fn empty_scores(rows: usize, cols: usize) -> Result<SparseRowMatrix> {
    Ok(SparseRowMatrix::from_rows(cols, vec![Vec::new(); rows])?)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json serializes"));
}

fn execute(cli: Cli) -> Result<()> {
    let log = Logger { quiet: cli.quiet };
    let start = Instant::now();
    let done = |stage: &str, shapes: serde_json::Value| log.stage(stage, start.elapsed().as_secs_f64(), shapes);
    match cli.command {
        Command::GenSynthetic(a) => {
            let spec = SyntheticSpec {
                classes: a.classes,
                per_class_gallery: a.per_class_gallery,
                per_class_queries: a.per_class_queries,
                dim: a.dim,
                noise_sigma: a.noise_sigma,
                seed: a.seed,
            };
            let data = generate_synthetic(&spec)?;
            write_synthetic(&data, &a.out_dir)?;
            let cfg_path = a.out_dir.join("config.json");
            let text = fixture_config(&spec).to_json() + "\n";
            std::fs::write(&cfg_path, text).map_err(|e| Error::io(&cfg_path, e))?;
            done("gen-synthetic", json!({ "query": shape_of(&data.query), "gallery": shape_of(&data.gallery) }));
        }
        Command::Normalize { input, output } => {
            let m = formats::load_features(&input)?.l2_normalize()?;
            formats::save_features(&m, &output)?;
            done("normalize", json!({ "features": shape_of(&m) }));
        }
        Command::Tta { views, output } => {
            let mats = views.iter().map(|p| formats::load_features(p)).collect::<Result<Vec<_>>>()?;
            let m = tta_aggregate(&mats)?;
            formats::save_features(&m, &output)?;
            done("tta", json!({ "views": mats.len(), "features": shape_of(&m) }));
        }
        Command::Ensemble { inputs, output } => {
            let mats = inputs.iter().map(|p| formats::load_features(p)).collect::<Result<Vec<_>>>()?;
            let m = ensemble_features(&mats)?;
            formats::save_features(&m, &output)?;
            done("ensemble", json!({ "models": mats.len(), "features": shape_of(&m) }));
        }
        Command::Pca(a) => {
            let q = formats::load_features(&a.query)?;
            let g = formats::load_features(&a.gallery)?;
            let model = match &a.model {
                Some(p) => formats::load_pca(p)?,
                None => pca_fit(&g, a.r, a.whiten)?,
            };
            let (pq, pg) = (pca_transform(&q, &model)?, pca_transform(&g, &model)?);
            formats::save_pca(&model, &a.out_dir.join(pipeline::PCA_MODEL))?;
            formats::save_features(&pq, &a.out_dir.join(pipeline::QUERY_FEATURES))?;
            formats::save_features(&pg, &a.out_dir.join(pipeline::GALLERY_FEATURES))?;
            done("pca", json!({ "query": shape_of(&pq), "gallery": shape_of(&pg) }));
        }
        Command::Dba { gallery, k, weights, output } => {
            let g = formats::load_features(&gallery)?;
            let nbrs = knn_self_excluded(&g, k)?;
            let m = dba_augment(&g, &nbrs, k, weights.into())?;
            formats::save_features(&m, &output)?;
            done("dba", json!({ "gallery": shape_of(&m) }));
        }
        Command::Aqe { query, gallery, k, output } => {
            let (q, g) = (formats::load_features(&query)?, formats::load_features(&gallery)?);
            let nbrs = knn_search_blocked(&q, &g, k, 1024)?;
            let m = aqe_expand(&q, &g, &nbrs, k)?;
            formats::save_features(&m, &output)?;
            done("aqe", json!({ "query": shape_of(&m) }));
        }
        Command::Knn { query, gallery, k, block_rows, output } => {
            let g = formats::load_features(&gallery)?;
            if block_rows == 0 {
                return Err(Error::Config("block_rows must be at least 1".into()));
            }
            let t = match &query {
                Some(q) => knn_search_blocked(&formats::load_features(q)?, &g, k, block_rows)?,
                None => knn_self_excluded(&g, k)?,
            };
            formats::save_neighbors(&t, &output)?;
            done("knn", json!({ "rows": t.rows(), "k": t.k() }));
        }
        Command::RerankKr(a) => {
            let (q, g) = (formats::load_features(&a.query)?, formats::load_features(&a.gallery)?);
            let p = KReciprocalParams { k1: a.k1, k2: a.k2, lambda_value: a.lambda_value };
            let cands = candidate_sets(&q, &g, a.candidates.into())?;
            let d = kreciprocal_rerank(&q, &g, &p, &cands, a.pool.into())?;
            formats::save_sparse(&d, &a.output)?;
            done("rerank-kr", sparse_shape(&d));
        }
        Command::Diffuse(a) => {
            let (q, g) = (formats::load_features(&a.query)?, formats::load_features(&a.gallery)?);
            let p = DiffusionParams {
                kd: a.kd,
                n_trunc: a.n_trunc,
                alpha: a.alpha,
                gamma_exp: a.gamma_exp,
                cg_tol: a.cg_tol,
                cg_max_iter: a.cg_max_iter,
            };
            let graph = build_affinity(&g, &p)?;
            let s = diffuse_queries(&q, &g, &graph, &p)?;
            formats::save_sparse(&s, &a.output)?;
            done("diffuse", sparse_shape(&s));
        }
        Command::Fuse(a) => {
            let s = a.s.as_deref().map(formats::load_sparse).transpose()?;
            let d = a.d.as_deref().map(formats::load_sparse).transpose()?;
            let (rows, cols) = match (&s, &d) {
                (Some(m), _) | (None, Some(m)) => (m.rows(), m.cols()),
                (None, None) => return Err(Error::Config("fuse needs at least one of --s and --d".into())),
            };
            let rr = KReciprocalParams { lambda_value: a.lambda_value, ..Default::default() };
            let p = FusionParams { lambda: a.lambda, d_max_fill: rr.d_max(), normalize_before_fuse: a.normalize_before_fuse, ..Default::default() };
            let s = match s {
                Some(s) => s,
                None => empty_scores(rows, cols)?,
            };
            let d = match d {
                Some(d) => d,
                None => empty_scores(rows, cols)?,
            };
            let f = fuse_scores(&s, &d, &p)?;
            formats::save_sparse(&f, &a.output)?;
            done("fuse", sparse_shape(&f));
        }
        Command::Topk { scores, query, gallery, top_k, output } => {
            let m = formats::load_sparse(&scores)?;
            let qids = formats::load_ids(&formats::ids_path(&query))?;
            let gids = formats::load_ids(&formats::ids_path(&gallery))?;
            let p = FusionParams { top_k, ..Default::default() };
            let r = rank_topk(&m, &qids, &gids, &p)?;
            formats::write_submission(&r, &output)?;
            done("topk", json!({ "queries": r.len(), "top_k": top_k }));
        }
        Command::Eval(a) => {
            let rows = formats::load_submission(&a.submission)?;
            let labels = formats::load_labels(&a.labels)?;
            let results: Vec<RankedResult> = rows
                .into_iter()
                .map(|r| RankedResult { query_id: r.query_id, entries: r.gallery_ids.into_iter().map(|g| (g, 0.0)).collect() })
                .collect();
            let qids: Vec<String> = results.iter().map(|r| r.query_id.clone()).collect();
            let gids = a.gallery.as_deref().map(|p| formats::load_ids(&formats::ids_path(p))).transpose()?;
            let universe = gallery_universe(&labels, &qids, gids.as_deref());
            let report = map_at_k(&results, &labels, &universe, a.k, a.denominator.into())?;
            if let Some(p) = &a.per_query {
                formats::save_per_query_ap(&report.per_query, p)?;
            }
            println!("mAP@{} = {:.5}", a.k, report.map);
            done("eval", json!({ "queries": results.len(), "gallery": universe.len() }));
        }
        Command::Run(a) => {
            let mut cfg = PipelineConfig::load(&a.config)?.apply_overrides(&a.overrides)?;
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            if a.print_config {
                println!("{}", cfg.to_json());
                return Ok(());
            }
            let workers = resolve_workers(cli.workers, cfg.workers)?;
            let out = with_workers(workers, || pipeline::run_pipeline(&cfg, log))??;
            let mut summary = json!({
                "output_dir": cfg.output_dir,
                "queries": out.results.len(),
                "workers": workers,
            });
            if let Some(r) = &out.report {
                summary["map_at_k"] = json!(r.map);
                summary["k"] = json!(cfg.eval.k);
            }
            if let Some(b) = &out.baseline {
                summary["baseline_map_at_k"] = json!(b.map);
            }
            print_json(&summary);
        }
        Command::Losses { command: LossesCommand::Gradcheck { instances, seed } } => {
            if instances == 0 {
                return Err(Error::Config("instances must be at least 1".into()));
            }
            let report = run_gradcheck(instances, seed)?;
            print_json(&serde_json::to_value(&report).expect("report serializes"));
            if !report.passed() {
                return Err(Error::Stage {
                    stage: "gradcheck",
                    source: Box::new(Error::Core(rerank_core::Error::Numeric("gradient check failed".into()))),
                });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let workers = match resolve_workers(cli.workers, None) {
        Ok(w) => w,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let is_run = matches!(cli.command, Command::Run(_));
    // `run` sizes its own pool after reading the config
    let result = if is_run { execute(cli) } else { with_workers(workers, || execute(cli)).and_then(|r| r) };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.to_string(), "exit_code": e.exit_code() }));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
