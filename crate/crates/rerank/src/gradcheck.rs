//! Finite-difference check of every analytic loss gradient on random instances.

use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rerank_core::losses::{
    arcface_loss, arcface_loss_unchecked, circle_loss, circle_loss_with_weights, circle_weights, kd_distill_loss,
    ArcFaceParams, CircleParams, KdParams, LossGrad,
};
use serde::Serialize;

use crate::error::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum `1 - |cos theta_y|` for generated ArcFace instances.
pub const SINGULAR_MARGIN: f64 = 1e-3;

#[derive(Debug, Clone, Serialize)]
pub struct LossCheck {
    pub loss: &'static str,
    pub instances: usize,
    /// Worst normwise relative error over all instances.
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub checks: Vec<LossCheck>,
    pub seconds: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + STEP;
            let fp = f(&xp);
            xp[i] = orig - STEP;
            let fm = f(&xp);
            xp[i] = orig;
            (fp - fm) / (2.0 * STEP)
        })
        .collect()
}

/// `max_i |a_i - n_i| / max_i max(|a_i|, |n_i|)`, zero when both vanish.
pub fn normwise_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

fn check_arcface(rng: &mut ChaCha8Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=4usize);
        let classes = rng.random_range(2..=6usize);
        let dim = rng.random_range(3..=8usize);
        let p = ArcFaceParams { margin: rng.random_range(0.0..0.5), scale: rng.random_range(1.0..32.0) };
        let w = unit_rows(rng, classes, dim);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        // cos(acos(c) + m) is singular at c = -1; keep target angles a step-resolvable distance away
        let e = loop {
            let e = unit_rows(rng, n, dim);
            let clear = labels.iter().enumerate().all(|(i, &y)| {
                let c: f64 = e[i * dim..(i + 1) * dim].iter().zip(&w[y * dim..(y + 1) * dim]).map(|(a, b)| a * b).sum();
                1.0 - c.abs() > SINGULAR_MARGIN
            });
            if clear {
                break e;
            }
        };
        let analytic: LossGrad = arcface_loss(&e, &w, dim, &labels, &p)?.into();
        let mut x = e.clone();
        x.extend_from_slice(&w);
        let ne = e.len();
        let f = |v: &[f64]| arcface_loss_unchecked(&v[..ne], &v[ne..], dim, &labels, &p).map_or(f64::NAN, |o| o.loss);
        worst = worst.max(normwise_error(&analytic.grad, &central_diff(f, &x)));
    }
    Ok(worst)
}

fn check_circle(rng: &mut ChaCha8Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let np = rng.random_range(1..=5usize);
        let nn = rng.random_range(1..=8usize);
        let p = CircleParams { relaxation_m: rng.random_range(0.05..0.5), gamma: rng.random_range(1.0..64.0) };
        let sp = uniform(rng, np, -1.0, 1.0);
        let sn = uniform(rng, nn, -1.0, 1.0);
        let analytic: LossGrad = circle_loss(&sp, &sn, &p)?.into();
        // pair weights are detached, so they stay fixed under perturbation
        let (ap, an) = circle_weights(&sp, &sn, &p);
        let mut x = sp.clone();
        x.extend_from_slice(&sn);
        let f = |v: &[f64]| circle_loss_with_weights(&v[..np], &v[np..], &ap, &an, &p).loss;
        worst = worst.max(normwise_error(&analytic.grad, &central_diff(f, &x)));
    }
    Ok(worst)
}

fn check_kd(rng: &mut ChaCha8Rng, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let n = rng.random_range(1..=4usize);
        let classes = rng.random_range(2..=10usize);
        let p = KdParams {
            temperature: rng.random_range(0.5..6.0),
            kd_weight: rng.random_range(0.0..2.0),
            ce_weight: rng.random_range(0.0..2.0),
        };
        let s = uniform(rng, n * classes, -5.0, 5.0);
        let t = uniform(rng, n * classes, -5.0, 5.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let out = kd_distill_loss(&s, &t, &labels, classes, &p)?;
        let f = |v: &[f64]| kd_distill_loss(v, &t, &labels, classes, &p).map_or(f64::NAN, |o| o.loss);
        worst = worst.max(normwise_error(&out.grad_student, &central_diff(f, &s)));
    }
    Ok(worst)
}

/// Runs `instances` random cases per loss (ArcFace, Circle, KD).
pub fn run_gradcheck(instances: usize, seed: u64) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::with_capacity(3);
    for (loss, worst) in [
        ("arcface", check_arcface(&mut rng, instances)?),
        ("circle", check_circle(&mut rng, instances)?),
        ("kd", check_kd(&mut rng, instances)?),
    ] {
        checks.push(LossCheck { loss, instances, max_rel_error: worst, passed: worst <= TOLERANCE });
    }
    Ok(GradcheckReport { checks, seconds: start.elapsed().as_secs_f64() })
}
