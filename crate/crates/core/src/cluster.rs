//! Diagonal-covariance Gaussian mixture clustering of normalized trajectories.
//!
//! Each restart seeds its means with k-means++ and runs EM until the relative
//! log-likelihood improvement drops below `tol`. The restart with the highest
//! final log-likelihood wins (ties go to the earliest restart).

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajcore::ResponseCategory;

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAX_REINITS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub k: usize,
    pub n_init: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { k: 5, n_init: 10, max_iter: 500, tol: 1e-6, seed: 0, variance_floor: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmModel {
    pub k: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub variances: Vec<Vec<f64>>,
    /// Total data log-likelihood under these parameters.
    pub log_likelihood: f64,
    pub seed: u64,
    pub n_iter: usize,
    pub converged: bool,
}

/// Per-restart log-likelihood histories, one value per EM iteration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitTrace {
    pub restarts: Vec<Vec<f64>>,
    pub best_restart: usize,
}

impl GmmModel {
    fn log_component(&self, c: usize, x: &[f64]) -> f64 {
        let mut acc = self.weights[c].ln();
        for ((&xi, &m), &v) in x.iter().zip(&self.means[c]).zip(&self.variances[c]) {
            acc -= 0.5 * (LN_2PI + v.ln() + (xi - m) * (xi - m) / v);
        }
        acc
    }

    /// Fills `out` with normalized responsibilities and returns the log-density of `x`.
    fn posterior(&self, x: &[f64], out: &mut [f64]) -> f64 {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.log_component(c, x);
        }
        let m = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for o in out.iter_mut() {
            *o = (*o - m).exp();
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
        m + s.ln()
    }

    pub fn responsibilities(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Dimension { expected: self.dim, got: x.len() });
        }
        let mut r = vec![0.0; self.k];
        self.posterior(x, &mut r);
        Ok(r)
    }
}

fn validate_data(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data.first().map(Vec::len).ok_or_else(|| Error::InsufficientData("no data".into()))?;
    if dim == 0 {
        return Err(Error::Shape("zero-dimensional data".into()));
    }
    for row in data {
        if row.len() != dim {
            return Err(Error::Dimension { expected: dim, got: row.len() });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidTrajectory("non-finite value in clustering data".into()));
        }
    }
    Ok(dim)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: each new center is drawn with probability proportional to squared distance.
pub fn kmeans_plus_plus(data: &[Vec<f64>], k: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.push(data[pick].clone());
        for (i, x) in data.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(x, &centers[centers.len() - 1]));
        }
    }
    centers
}

struct Restart {
    model: GmmModel,
    trace: Vec<f64>,
}

fn global_variance(data: &[Vec<f64>], dim: usize, floor: f64) -> Vec<f64> {
    let n = data.len() as f64;
    (0..dim)
        .map(|j| {
            let m = data.iter().map(|r| r[j]).sum::<f64>() / n;
            (data.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n).max(floor)
        })
        .collect()
}

fn run_restart(data: &[Vec<f64>], dim: usize, cfg: &GmmConfig, seed: u64) -> Result<Restart> {
    let n = data.len();
    let k = cfg.k;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init_var = global_variance(data, dim, cfg.variance_floor);
    let mut model = GmmModel {
        k,
        dim,
        weights: vec![1.0 / k as f64; k],
        means: kmeans_plus_plus(data, k, &mut rng),
        variances: vec![init_var.clone(); k],
        log_likelihood: f64::NEG_INFINITY,
        seed,
        n_iter: 0,
        converged: false,
    };
    let min_weight = 1.0 / (10.0 * n as f64);
    let mut reinits = 0;
    let mut trace: Vec<f64> = Vec::new();
    let mut resp = vec![vec![0.0; k]; n];

    for iter in 0..cfg.max_iter {
        // E-step
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            ll += model.posterior(x, r);
        }
        model.log_likelihood = ll;
        model.n_iter = iter;
        if let Some(&prev) = trace.last() {
            if (ll - prev) / prev.abs().max(f64::MIN_POSITIVE) < cfg.tol {
                trace.push(ll);
                model.converged = true;
                break;
            }
        }
        trace.push(ll);

        // M-step
        for c in 0..k {
            let nk: f64 = resp.iter().map(|r| r[c]).sum();
            model.weights[c] = nk / n as f64;
            if nk <= 0.0 {
                continue;
            }
            // Accumulate around a reference row so identical points reproduce exactly.
            let reference = &data[0];
            for j in 0..dim {
                let shift = data.iter().zip(&resp).map(|(x, r)| r[c] * (x[j] - reference[j])).sum::<f64>() / nk;
                let mean = reference[j] + shift;
                let var = data.iter().zip(&resp).map(|(x, r)| r[c] * (x[j] - mean).powi(2)).sum::<f64>() / nk;
                model.means[c][j] = mean;
                model.variances[c][j] = var.max(cfg.variance_floor);
            }
        }

        let degenerate: Vec<usize> = (0..k).filter(|&c| model.weights[c] < min_weight).collect();
        if !degenerate.is_empty() {
            if reinits == MAX_REINITS {
                return Err(Error::Degenerate(format!(
                    "restart seed {seed}: components {degenerate:?} collapsed after {MAX_REINITS} re-initializations"
                )));
            }
            reinits += 1;
            for &c in &degenerate {
                model.means[c] = data[rng.random_range(0..n)].clone();
                model.variances[c] = init_var.clone();
                model.weights[c] = 1.0 / k as f64;
            }
            let s: f64 = model.weights.iter().sum();
            model.weights.iter_mut().for_each(|w| *w /= s);
            // Re-initialization starts a new monotone EM run.
            trace.clear();
        }
    }
    Ok(Restart { model, trace })
}

pub fn fit_gmm(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<GmmModel> {
    fit_gmm_traced(data, cfg).map(|(m, _)| m)
}

/// Fits the mixture and returns the log-likelihood history of every successful restart.
pub fn fit_gmm_traced(data: &[Vec<f64>], cfg: &GmmConfig) -> Result<(GmmModel, FitTrace)> {
    let dim = validate_data(data)?;
    if cfg.k == 0 || cfg.n_init == 0 || cfg.max_iter == 0 {
        return Err(Error::Config(format!("invalid mixture configuration {cfg:?}")));
    }
    if data.len() <= cfg.k {
        return Err(Error::InsufficientData(format!("{} rows for {} components", data.len(), cfg.k)));
    }
    let mut best: Option<GmmModel> = None;
    let mut trace = FitTrace::default();
    let mut last_err = None;
    for r in 0..cfg.n_init {
        let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(r as u64);
        match run_restart(data, dim, cfg, seed) {
            Ok(run) => {
                let better = best.as_ref().is_none_or(|b| run.model.log_likelihood > b.log_likelihood);
                if better {
                    trace.best_restart = trace.restarts.len();
                    best = Some(run.model);
                }
                trace.restarts.push(run.trace);
            }
            Err(e) => {
                log::warn!("mixture restart {r} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(mut m) => {
            m.seed = cfg.seed;
            Ok((m, trace))
        }
        None => Err(last_err.unwrap_or_else(|| Error::Degenerate("no restart succeeded".into()))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub cluster: usize,
    pub responsibilities: Vec<f64>,
}

/// Posterior responsibilities and hard labels (argmax, ties to the lowest index).
pub fn assign(model: &GmmModel, data: &[Vec<f64>]) -> Result<Vec<ClusterAssignment>> {
    data.iter()
        .map(|x| {
            let responsibilities = model.responsibilities(x)?;
            let mut cluster = 0;
            for (c, &r) in responsibilities.iter().enumerate() {
                if r > responsibilities[cluster] {
                    cluster = c;
                }
            }
            Ok(ClusterAssignment { cluster, responsibilities })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    pub cluster: usize,
    pub size: usize,
    /// Mean normalized volume at t0..t6 (t0 is 1).
    pub mean_trajectory: Vec<f64>,
    /// Members per t6 category, in CR, PR, SD, PD order.
    pub t6_histogram: [u64; 4],
}

/// Mean trajectories and t6 response distributions per non-empty cluster.
///
/// `data` rows hold the normalized t1..t6 values used for clustering.
pub fn cluster_profiles(
    model: &GmmModel,
    data: &[Vec<f64>],
    assignments: &[ClusterAssignment],
    t6: &[ResponseCategory],
) -> Result<Vec<ClusterProfile>> {
    if data.len() != assignments.len() || data.len() != t6.len() {
        return Err(Error::Shape(format!(
            "{} rows, {} assignments, {} categories",
            data.len(),
            assignments.len(),
            t6.len()
        )));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, a) in assignments.iter().enumerate() {
        members.entry(a.cluster).or_default().push(i);
    }
    let mut out = Vec::new();
    for c in 0..model.k {
        let Some(idx) = members.get(&c) else {
            log::warn!("cluster {c} has no members; profile omitted");
            continue;
        };
        let mut mean = vec![0.0; model.dim + 1];
        mean[0] = 1.0;
        let mut hist = [0u64; 4];
        for &i in idx {
            for (j, v) in data[i].iter().enumerate() {
                mean[j + 1] += v / idx.len() as f64;
            }
            hist[t6[i].index()] += 1;
        }
        out.push(ClusterProfile { cluster: c, size: idx.len(), mean_trajectory: mean, t6_histogram: hist });
    }
    Ok(out)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must have equal length");
    let n = a.len() as f64;
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut ra: BTreeMap<usize, f64> = BTreeMap::new();
    let mut rb: BTreeMap<usize, f64> = BTreeMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1.0;
        *ra.entry(x).or_default() += 1.0;
        *rb.entry(y).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&v| choose2(v)).sum();
    let sa: f64 = ra.values().map(|&v| choose2(v)).sum();
    let sb: f64 = rb.values().map(|&v| choose2(v)).sum();
    let expected = sa * sb / choose2(n);
    let max = 0.5 * (sa + sb);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
