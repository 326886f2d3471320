//! Seeded clustered embedding generator for tests and demos.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rerank_core::FeatureMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Candidates, ModelInput, PipelineConfig};
use crate::error::{Error, Result};
use crate::formats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class_gallery: usize,
    pub per_class_queries: usize,
    pub dim: usize,
    /// Per-coordinate standard deviation of the noise added to the class center.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 5, per_class_gallery: 20, per_class_queries: 5, dim: 64, noise_sigma: 0.35, seed: 42 }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("dim {} must be at least 2", self.dim)));
        }
        if self.classes == 0 || self.per_class_gallery == 0 || self.per_class_queries == 0 {
            return Err(Error::Config("class and per-class counts must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!("noise_sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub query: FeatureMatrix,
    pub gallery: FeatureMatrix,
    /// `(id, label)` for gallery items then queries.
    pub labels: Vec<(String, String)>,
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

fn unit(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= n);
}

/// Class centers first, then gallery members class by class, then queries
/// class by class. Ids are `g<class>_<i>` / `q<class>_<i>`, labels `c<class>`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| loop {
            let mut v = gaussian(&mut rng, spec.dim);
            if v.iter().any(|x| *x != 0.0) {
                unit(&mut v);
                break v;
            }
        })
        .collect();
    let mut labels = Vec::new();
    let mut members = |prefix: &str, per: usize, rng: &mut ChaCha8Rng| -> Result<FeatureMatrix> {
        let mut rows = Vec::with_capacity(spec.classes * per);
        let mut ids = Vec::with_capacity(spec.classes * per);
        for (c, center) in centers.iter().enumerate() {
            for i in 0..per {
                let noise = gaussian(rng, spec.dim);
                let mut v: Vec<f64> = center.iter().zip(&noise).map(|(c, n)| c + spec.noise_sigma * n).collect();
                unit(&mut v);
                rows.push(v);
                let id = format!("{prefix}{c}_{i}");
                labels.push((id.clone(), format!("c{c}")));
                ids.push(id);
            }
        }
        Ok(FeatureMatrix::from_rows_f64(&rows, ids)?)
    };
    let gallery = members("g", spec.per_class_gallery, &mut rng)?;
    let query = members("q", spec.per_class_queries, &mut rng)?;
    Ok(SyntheticData { query, gallery, labels })
}

#[derive(Debug, Clone)]
pub struct SyntheticFiles {
    pub query: PathBuf,
    pub gallery: PathBuf,
    pub labels: PathBuf,
}

/// Writes `query.feat`, `gallery.feat` (with id sidecars) and `labels.csv` into `dir`.
pub fn write_synthetic(data: &SyntheticData, dir: &Path) -> Result<SyntheticFiles> {
    let files = SyntheticFiles { query: dir.join("query.feat"), gallery: dir.join("gallery.feat"), labels: dir.join("labels.csv") };
    formats::save_features(&data.query, &files.query)?;
    formats::save_features(&data.gallery, &files.gallery)?;
    formats::save_labels(data.labels.iter().map(|(a, b)| (a.as_str(), b.as_str())), &files.labels)?;
    Ok(files)
}

/// Pipeline configuration for a generated dataset, with desk-scale
/// hyperparameters (kd 8, full diffusion subgraph, k1 10, k2 3, full
/// candidates, mAP@10). Paths are relative to the dataset directory.
pub fn fixture_config(spec: &SyntheticSpec) -> PipelineConfig {
    let model = ModelInput { name: "synthetic".into(), query_views: vec!["query.feat".into()], gallery_views: vec!["gallery.feat".into()] };
    let mut cfg = PipelineConfig::new(vec![model], "out".into());
    cfg.labels = Some("labels.csv".into());
    cfg.rerank.k1 = 10;
    cfg.rerank.k2 = 3;
    cfg.rerank.candidates = Candidates::Full;
    cfg.diffusion.kd = 8;
    cfg.diffusion.n_trunc = spec.classes * spec.per_class_gallery;
    cfg.eval.k = 10;
    cfg
}
