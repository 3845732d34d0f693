//! Cross-validation protocol, ROC AUC with bootstrap intervals and paired permutation tests.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boost::{self, GbdtConfig};
use crate::error::{Error, Result};
use crate::featspace::{standardize_apply, standardize_fit, FeatureMatrix, MAX_HORIZON};
use crate::tgat::{self, TrainConfig, TrainMode};
use crate::trajcore::{LesionKey, ResponseCategory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Task {
    CrVsNoncr,
    RespVsNonresp,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::CrVsNoncr => "CR_VS_NONCR",
            Task::RespVsNonresp => "RESP_VS_NONRESP",
        }
    }

    pub fn is_positive(self, c: ResponseCategory) -> bool {
        match self {
            Task::CrVsNoncr => c == ResponseCategory::CR,
            Task::RespVsNonresp => matches!(c, ResponseCategory::CR | ResponseCategory::PR),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cr" | "cr_vs_noncr" => Ok(Task::CrVsNoncr),
            "resp" | "resp_vs_nonresp" => Ok(Task::RespVsNonresp),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected cr or resp)"))),
        }
    }
}

pub fn make_targets(t6: &[Option<ResponseCategory>], task: Task) -> Result<Vec<bool>> {
    t6.iter()
        .enumerate()
        .map(|(i, c)| {
            c.map(|c| task.is_positive(c))
                .ok_or_else(|| Error::InsufficientData(format!("lesion {i} has no t6 category")))
        })
        .collect()
}

pub fn prevalence(labels: &[bool]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().filter(|&&y| y).count() as f64 / labels.len() as f64
}

fn check_scored(labels: &[bool], scores: &[f64]) -> Result<(usize, usize)> {
    if labels.len() != scores.len() {
        return Err(Error::Shape(format!("{} labels, {} scores", labels.len(), scores.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Degenerate(format!("score {s}")));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("AUC undefined with {pos} positives and {neg} negatives")));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: share of (positive, negative) pairs ordered correctly, ties counting one half.
pub fn auc(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the positive rank sum keeps mid-ranks integral.
    let mut rank_sum2: u128 = 0;
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            end += 1;
        }
        let mid2 = (start + 1 + end) as u128;
        let p = idx[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        rank_sum2 += p * mid2;
        start = end;
    }
    let (pos, neg) = (pos as u128, neg as u128);
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg) as f64)
}

/// ROC curve points (FPR, TPR) from the highest threshold down, one point per distinct score.
pub fn roc_curve(labels: &[bool], scores: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_scored(labels, scores)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut start = 0;
    while start < idx.len() {
        let mut end = start;
        while end < idx.len() && scores[idx[end]] == scores[idx[start]] {
            if labels[idx[end]] {
                tp += 1;
            } else {
                fp += 1;
            }
            end += 1;
        }
        pts.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
        start = end;
    }
    Ok(pts)
}

pub fn auc_trapezoid(labels: &[bool], scores: &[f64]) -> Result<f64> {
    let pts = roc_curve(labels, scores)?;
    Ok(pts.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum())
}

/// Linearly interpolated quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile 95% interval of the AUC over `n_boot` resamples with replacement.
pub fn bootstrap_ci(labels: &[bool], scores: &[f64], n_boot: usize, seed: u64) -> Result<(f64, f64)> {
    check_scored(labels, scores)?;
    if n_boot == 0 {
        return Err(Error::Config("n_boot must be positive".into()));
    }
    let n = labels.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(n_boot);
    let mut bl = vec![false; n];
    let mut bs = vec![0.0; n];
    while stats.len() < n_boot {
        for k in 0..n {
            let i = rng.random_range(0..n);
            bl[k] = labels[i];
            bs[k] = scores[i];
        }
        match auc(&bl, &bs) {
            Ok(a) => stats.push(a),
            Err(Error::SingleClass(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    stats.sort_by(f64::total_cmp);
    Ok((quantile_sorted(&stats, 0.025), quantile_sorted(&stats, 0.975)))
}

/// Paired permutation test on |AUC_a − AUC_b|, swapping the two scores of each lesion with probability ½.
pub fn permutation_test(labels: &[bool], scores_a: &[f64], scores_b: &[f64], n_perm: usize, seed: u64) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::Shape(format!("{} vs {} paired scores", scores_a.len(), scores_b.len())));
    }
    let observed = (auc(labels, scores_a)? - auc(labels, scores_b)?).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pa = scores_a.to_vec();
    let mut pb = scores_b.to_vec();
    let mut hits = 0usize;
    for _ in 0..n_perm {
        for i in 0..labels.len() {
            let swap: bool = rng.random();
            (pa[i], pb[i]) = if swap { (scores_b[i], scores_a[i]) } else { (scores_a[i], scores_b[i]) };
        }
        let stat = (auc(labels, &pa)? - auc(labels, &pb)?).abs();
        if stat >= observed {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (n_perm + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub n_folds: usize,
    pub seed: u64,
    pub grouped: bool,
    /// Fold index per row, aligned with the input keys.
    pub assignments: Vec<usize>,
}

impl FoldPlan {
    /// Stratified folds; with `grouped`, all lesions of a patient share a fold.
    ///
    /// Groups are shuffled, ordered by how unbalanced their own labels are,
    /// then each goes to the fold minimizing the spread of per-class shares
    /// across folds.
    pub fn new(keys: &[LesionKey], labels: &[bool], n_folds: usize, seed: u64, grouped: bool) -> Result<FoldPlan> {
        if keys.len() != labels.len() {
            return Err(Error::Shape(format!("{} keys, {} labels", keys.len(), labels.len())));
        }
        if n_folds < 2 {
            return Err(Error::Config(format!("need at least 2 folds, got {n_folds}")));
        }
        let mut by_group: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, k) in keys.iter().enumerate() {
            let g = if grouped { k.patient_id.clone() } else { k.to_string() };
            by_group.entry(g).or_default().push(i);
        }
        if by_group.len() < n_folds {
            return Err(Error::InsufficientData(format!("{} groups for {n_folds} folds", by_group.len())));
        }
        // (rows, [negatives, positives]) per group
        let mut groups: Vec<(Vec<usize>, [usize; 2])> = by_group
            .into_values()
            .map(|rows| {
                let pos = rows.iter().filter(|&&i| labels[i]).count();
                let counts = [rows.len() - pos, pos];
                (rows, counts)
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        groups.shuffle(&mut rng);
        groups.sort_by_key(|(_, c)| std::cmp::Reverse(c[0].abs_diff(c[1])));

        let totals = [0, 1].map(|c| groups.iter().map(|(_, g)| g[c]).sum::<usize>().max(1) as f64);
        let spread = |fill: &[[usize; 2]]| -> f64 {
            (0..2)
                .map(|c| {
                    let shares: Vec<f64> = fill.iter().map(|f| f[c] as f64 / totals[c]).collect();
                    let m = shares.iter().sum::<f64>() / shares.len() as f64;
                    shares.iter().map(|s| (s - m).powi(2)).sum::<f64>()
                })
                .sum()
        };
        let mut fill = vec![[0usize; 2]; n_folds];
        let mut assignments = vec![0; keys.len()];
        for (rows, g) in &groups {
            let mut best = 0;
            let mut best_key = (f64::INFINITY, usize::MAX);
            for f in 0..n_folds {
                let mut trial = fill.clone();
                trial[f][0] += g[0];
                trial[f][1] += g[1];
                let key = (spread(&trial), fill[f][0] + fill[f][1]);
                if key.0 < best_key.0 - 1e-15 || ((key.0 - best_key.0).abs() <= 1e-15 && key.1 < best_key.1) {
                    best = f;
                    best_key = key;
                }
            }
            fill[best][0] += g[0];
            fill[best][1] += g[1];
            for &i in rows {
                assignments[i] = best;
            }
        }
        Ok(FoldPlan { n_folds, seed, grouped, assignments })
    }

    pub fn test_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] == fold).collect()
    }

    pub fn train_rows(&self, fold: usize) -> Vec<usize> {
        (0..self.assignments.len()).filter(|&i| self.assignments[i] != fold).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Gbdt,
    GatSpecific,
    GatGeneral,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Gbdt, Method::GatSpecific, Method::GatGeneral];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Gbdt => "GBDT",
            Method::GatSpecific => "GAT_SPECIFIC",
            Method::GatGeneral => "GAT_GENERAL",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "gbdt" => Ok(Method::Gbdt),
            "gat-specific" => Ok(Method::GatSpecific),
            "gat-general" => Ok(Method::GatGeneral),
            _ => Err(Error::Config(format!("unknown method `{s}` (expected gbdt, gat-specific or gat-general)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    pub n_folds: usize,
    pub grouped: bool,
    pub horizons: Vec<usize>,
    pub n_boot: usize,
    pub n_perm: usize,
    pub seed: u64,
    /// Worker threads for independent folds; 0 means available parallelism.
    /// Runtime-only: results do not depend on it.
    #[serde(skip)]
    pub threads: usize,
    pub gbdt: GbdtConfig,
    /// Graph model settings; the mode is set per method.
    pub gat: TrainConfig,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            n_folds: 5,
            grouped: true,
            horizons: (0..=MAX_HORIZON).collect(),
            n_boot: 1000,
            n_perm: 1000,
            seed: 0,
            threads: 0,
            gbdt: GbdtConfig::default(),
            gat: TrainConfig::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h > MAX_HORIZON) {
            return Err(Error::Config(format!("horizons {:?} must be a non-empty subset of 0..={MAX_HORIZON}", self.horizons)));
        }
        if self.n_boot == 0 {
            return Err(Error::Config("n_boot must be positive".into()));
        }
        self.gbdt.validate()?;
        self.gat.validate()
    }

    fn workers(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredLesion {
    pub key: LesionKey,
    pub label: bool,
    pub score: f64,
    pub fold: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub task: Task,
    pub method: Method,
    pub horizon: usize,
    /// Test-fold predictions pooled over folds, in row order.
    pub pooled: Vec<ScoredLesion>,
    pub auc: f64,
    pub ci95: (f64, f64),
    #[serde(skip)]
    pub elapsed: Duration,
}

impl EvalOutcome {
    pub fn labels(&self) -> Vec<bool> {
        self.pooled.iter().map(|s| s.label).collect()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.pooled.iter().map(|s| s.score).collect()
    }
}

/// Receives the rows each fold's standardization is fitted on.
pub trait FitObserver: Sync {
    fn standardization_fit(&self, fold: usize, rows: &[usize]);
}

pub struct NoObserver;

impl FitObserver for NoObserver {
    fn standardization_fit(&self, _: usize, _: &[usize]) {}
}

fn derived_seed(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(master ^ 0x9E37_79B9_7F4A_7C15, |acc, &p| {
        acc.wrapping_mul(0x100_0000_01B3).wrapping_add(p.wrapping_add(1).wrapping_mul(0xBF58_476D_1CE4_E5B9))
    })
}

/// Maps `f` over `0..n` on up to `workers` threads; results come back in index order.
fn parallel_map<T: Send>(n: usize, workers: usize, f: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let workers = workers.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&f).collect();
    }
    let mut slots: Vec<Option<T>> = (0..n).map(|_| None).collect();
    std::thread::scope(|s| {
        let f = &f;
        let chunks: Vec<_> = slots.chunks_mut(n.div_ceil(workers)).enumerate().collect();
        let step = n.div_ceil(workers);
        for (c, chunk) in chunks {
            s.spawn(move || {
                for (k, slot) in chunk.iter_mut().enumerate() {
                    *slot = Some(f(c * step + k));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("worker filled slot")).collect()
}

type FoldScores = BTreeMap<usize, Vec<f64>>;

fn score_fold(
    matrix: &FeatureMatrix,
    labels: &[bool],
    plan: &FoldPlan,
    fold: usize,
    method: Method,
    cfg: &ProtocolConfig,
    observer: &dyn FitObserver,
) -> Result<FoldScores> {
    let train_rows = plan.train_rows(fold);
    let test_rows = plan.test_rows(fold);
    observer.standardization_fit(fold, &train_rows);
    let params = standardize_fit(matrix, &train_rows)?;
    let std = standardize_apply(&params, matrix)?;
    let train_labels: Vec<bool> = train_rows.iter().map(|&i| labels[i]).collect();
    let mut out = FoldScores::new();

    match method {
        Method::Gbdt => {
            for &h in &cfg.horizons {
                let m = std.truncate_horizon(h);
                let x_train: Vec<Vec<f64>> = train_rows.iter().map(|&i| m.values[i].clone()).collect();
                let x_test: Vec<Vec<f64>> = test_rows.iter().map(|&i| m.values[i].clone()).collect();
                let gcfg = GbdtConfig { seed: derived_seed(cfg.seed, &[0, fold as u64, h as u64]), ..cfg.gbdt };
                let model = boost::fit(&x_train, &train_labels, &gcfg)?;
                out.insert(h, boost::predict_proba(&model, &x_test)?);
            }
        }
        Method::GatSpecific | Method::GatGeneral => {
            let graphs = tgat::graphs_from_matrix(&std, labels, MAX_HORIZON)?;
            let train_graphs: Vec<_> = train_rows.iter().map(|&i| graphs[i].clone()).collect();
            let test_graphs: Vec<_> = test_rows.iter().map(|&i| graphs[i].clone()).collect();
            if method == Method::GatGeneral {
                let tcfg = TrainConfig {
                    mode: TrainMode::General,
                    seed: derived_seed(cfg.seed, &[1, fold as u64]),
                    ..cfg.gat
                };
                let (model, _) = tgat::train(&train_graphs, &tcfg)?;
                for &h in &cfg.horizons {
                    out.insert(h, tgat::predict(&model, &test_graphs, h)?);
                }
            } else {
                for &h in &cfg.horizons {
                    let tcfg = TrainConfig {
                        mode: TrainMode::TimeSpecific { horizon: h },
                        seed: derived_seed(cfg.seed, &[2, fold as u64, h as u64]),
                        ..cfg.gat
                    };
                    let (model, _) = tgat::train(&train_graphs, &tcfg)?;
                    out.insert(h, tgat::predict(&model, &test_graphs, h)?);
                }
            }
        }
    }
    Ok(out)
}

/// Runs fold-wise standardization, training and pooled scoring for one method.
///
/// `matrix` must hold per-time-point blocks up to the largest requested horizon.
pub fn run_protocol(
    matrix: &FeatureMatrix,
    labels: &[bool],
    task: Task,
    method: Method,
    cfg: &ProtocolConfig,
) -> Result<Vec<EvalOutcome>> {
    let plan = FoldPlan::new(&matrix.rows, labels, cfg.n_folds, cfg.seed, cfg.grouped)?;
    run_protocol_with(matrix, labels, task, method, cfg, &plan, &NoObserver)
}

pub fn run_protocol_with(
    matrix: &FeatureMatrix,
    labels: &[bool],
    task: Task,
    method: Method,
    cfg: &ProtocolConfig,
    plan: &FoldPlan,
    observer: &dyn FitObserver,
) -> Result<Vec<EvalOutcome>> {
    cfg.validate()?;
    if labels.len() != matrix.n_rows() || plan.assignments.len() != matrix.n_rows() {
        return Err(Error::Shape(format!(
            "{} rows, {} labels, {} fold assignments",
            matrix.n_rows(),
            labels.len(),
            plan.assignments.len()
        )));
    }
    let start = Instant::now();
    let per_fold = parallel_map(plan.n_folds, cfg.workers(), |fold| {
        score_fold(matrix, labels, plan, fold, method, cfg, observer)
    });
    let per_fold: Vec<FoldScores> = per_fold.into_iter().collect::<Result<_>>()?;
    let elapsed = start.elapsed();

    let mut outcomes = Vec::with_capacity(cfg.horizons.len());
    for &h in &cfg.horizons {
        let mut pooled: Vec<Option<ScoredLesion>> = vec![None; matrix.n_rows()];
        for (fold, scores) in per_fold.iter().enumerate() {
            for (&i, &s) in plan.test_rows(fold).iter().zip(&scores[&h]) {
                pooled[i] = Some(ScoredLesion { key: matrix.rows[i].clone(), label: labels[i], score: s, fold });
            }
        }
        let pooled: Vec<ScoredLesion> = pooled.into_iter().map(|s| s.expect("each row is tested once")).collect();
        let l: Vec<bool> = pooled.iter().map(|s| s.label).collect();
        let sc: Vec<f64> = pooled.iter().map(|s| s.score).collect();
        let a = auc(&l, &sc)?;
        let ci = bootstrap_ci(&l, &sc, cfg.n_boot, derived_seed(cfg.seed, &[3, method as u64, h as u64]))?;
        outcomes.push(EvalOutcome { task, method, horizon: h, pooled, auc: a, ci95: ci, elapsed });
    }
    Ok(outcomes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub horizon: usize,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: Method,
    pub cells: Vec<ReportCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTest {
    pub horizon: usize,
    pub method_a: Method,
    pub method_b: Method,
    pub p_value: f64,
}

/// A published clinical result kept for orientation; synthetic runs are not expected to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValue {
    pub task: Task,
    pub method: Method,
    pub horizon: usize,
    pub auc: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub reproducible: bool,
}

/// (AUC, CI low, CI high) at t0..t5.
type ReferenceRow = (Task, Method, [(f64, f64, f64); 6]);

#[rustfmt::skip]
const REFERENCE_TABLE: [ReferenceRow; 6] = [
    (Task::CrVsNoncr, Method::GatGeneral, [(0.70, 0.66, 0.73), (0.88, 0.86, 0.90), (0.91, 0.89, 0.93), (0.94, 0.92, 0.95), (0.96, 0.95, 0.97), (0.98, 0.98, 0.99)]),
    (Task::CrVsNoncr, Method::GatSpecific, [(0.76, 0.73, 0.79), (0.88, 0.86, 0.91), (0.92, 0.89, 0.93), (0.94, 0.92, 0.95), (0.97, 0.95, 0.98), (0.98, 0.97, 0.99)]),
    (Task::CrVsNoncr, Method::Gbdt, [(0.77, 0.74, 0.81), (0.90, 0.88, 0.92), (0.93, 0.91, 0.95), (0.95, 0.93, 0.96), (0.97, 0.96, 0.98), (0.99, 0.98, 0.99)]),
    (Task::RespVsNonresp, Method::GatGeneral, [(0.58, 0.54, 0.62), (0.78, 0.74, 0.81), (0.81, 0.79, 0.84), (0.84, 0.82, 0.87), (0.87, 0.85, 0.89), (0.90, 0.88, 0.92)]),
    (Task::RespVsNonresp, Method::GatSpecific, [(0.61, 0.57, 0.66), (0.78, 0.76, 0.81), (0.82, 0.79, 0.84), (0.85, 0.82, 0.87), (0.87, 0.85, 0.89), (0.90, 0.88, 0.92)]),
    (Task::RespVsNonresp, Method::Gbdt, [(0.61, 0.57, 0.65), (0.82, 0.79, 0.85), (0.87, 0.85, 0.89), (0.90, 0.88, 0.92), (0.93, 0.92, 0.95), (0.97, 0.96, 0.98)]),
];

pub fn reference_values(task: Task) -> Vec<ReferenceValue> {
    REFERENCE_TABLE
        .iter()
        .filter(|(t, _, _)| *t == task)
        .flat_map(|&(task, method, cells)| {
            cells.into_iter().enumerate().map(move |(horizon, (auc, ci_lo, ci_hi))| ReferenceValue {
                task,
                method,
                horizon,
                auc,
                ci_lo,
                ci_hi,
                reproducible: false,
            })
        })
        .collect()
}

/// Methods × horizons table with pairwise p-values and the clinical reference footer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub n_lesions: usize,
    pub prevalence: f64,
    pub rows: Vec<ReportRow>,
    pub p_values: Vec<PairwiseTest>,
    pub reference: Vec<ReferenceValue>,
}

pub fn build_report(task: Task, outcomes: &[EvalOutcome], cfg: &ProtocolConfig) -> Result<EvalReport> {
    let mut by_method: BTreeMap<Method, BTreeMap<usize, &EvalOutcome>> = BTreeMap::new();
    for o in outcomes {
        if o.task != task {
            return Err(Error::Conflict(format!("outcome for {} in a {} report", o.task.as_str(), task.as_str())));
        }
        by_method.entry(o.method).or_default().insert(o.horizon, o);
    }
    let first = outcomes.first().ok_or_else(|| Error::InsufficientData("no outcomes to report".into()))?;
    let rows = by_method
        .iter()
        .map(|(&method, hs)| ReportRow {
            method,
            cells: hs
                .values()
                .map(|o| ReportCell { horizon: o.horizon, auc: o.auc, ci_lo: o.ci95.0, ci_hi: o.ci95.1 })
                .collect(),
        })
        .collect();

    let methods: Vec<Method> = by_method.keys().copied().collect();
    let mut p_values = Vec::new();
    for (ia, &a) in methods.iter().enumerate() {
        for &b in &methods[ia + 1..] {
            for (&h, oa) in &by_method[&a] {
                let Some(ob) = by_method[&b].get(&h) else { continue };
                if oa.pooled.iter().map(|s| &s.key).ne(ob.pooled.iter().map(|s| &s.key)) {
                    return Err(Error::Alignment(format!("{} and {} scored different lesions", a.as_str(), b.as_str())));
                }
                let seed = derived_seed(cfg.seed, &[4, a as u64, b as u64, h as u64]);
                let p = permutation_test(&oa.labels(), &oa.scores(), &ob.scores(), cfg.n_perm, seed)?;
                p_values.push(PairwiseTest { horizon: h, method_a: a, method_b: b, p_value: p });
            }
        }
    }
    let labels = first.labels();
    Ok(EvalReport {
        task,
        n_lesions: labels.len(),
        prevalence: prevalence(&labels),
        rows,
        p_values,
        reference: reference_values(task),
    })
}

impl EvalReport {
    /// Flat table: one line per method and horizon.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["task", "method", "horizon", "auc", "ci_lo", "ci_hi"])?;
        for row in &self.rows {
            for c in &row.cells {
                w.write_record([
                    self.task.as_str().to_string(),
                    row.method.as_str().to_string(),
                    format!("t0:t{}", c.horizon),
                    format!("{:.6}", c.auc),
                    format!("{:.6}", c.ci_lo),
                    format!("{:.6}", c.ci_hi),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_p_values_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["task", "horizon", "method_a", "method_b", "p_value"])?;
        for p in &self.p_values {
            w.write_record([
                self.task.as_str().to_string(),
                format!("t0:t{}", p.horizon),
                p.method_a.as_str().to_string(),
                p.method_b.as_str().to_string(),
                format!("{:.6}", p.p_value),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(labels: &[bool], scores: &[f64]) -> f64 {
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..labels.len() {
            for j in 0..labels.len() {
                if labels[i] && !labels[j] {
                    n += 1.0;
                    s += if scores[i] > scores[j] {
                        1.0
                    } else if scores[i] == scores[j] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        s / n
    }

    #[test]
    fn targets() {
        use ResponseCategory::*;
        let c = [Some(CR), Some(PR), Some(SD), Some(PD)];
        assert_eq!(make_targets(&c, Task::CrVsNoncr).unwrap(), vec![true, false, false, false]);
        assert_eq!(make_targets(&c, Task::RespVsNonresp).unwrap(), vec![true, true, false, false]);
        assert!(make_targets(&[Some(CR), None], Task::CrVsNoncr).is_err());
    }

    #[test]
    fn auc_examples() {
        let l = [false, false, true, true];
        assert_eq!(auc(&l, &[0.1, 0.4, 0.35, 0.8]).unwrap(), 0.75);
        assert_eq!(auc(&l, &[0.1, 0.2, 0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(auc(&l, &[0.5; 4]).unwrap(), 0.5);
        assert!(matches!(auc(&[true, true], &[0.1, 0.2]), Err(Error::SingleClass(_))));
        assert_eq!(brute_auc(&l, &[0.1, 0.4, 0.35, 0.8]), 0.75);
    }

    #[test]
    fn auc_matches_trapezoid_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.random_range(2..40);
            let mut l: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            l[0] = true;
            l[1] = false;
            let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..5) as f64).collect();
            let a = auc(&l, &s).unwrap();
            assert!((a - auc_trapezoid(&l, &s).unwrap()).abs() < 1e-12);
            assert!((a - brute_auc(&l, &s)).abs() < 1e-12);
        }
    }

    #[test]
    fn quantiles_interpolate() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&s, 0.0), 1.0);
        assert_eq!(quantile_sorted(&s, 0.5), 2.5);
        assert_eq!(quantile_sorted(&s, 1.0), 4.0);
    }

    #[test]
    fn permutation_identical_scores() {
        let l = [true, false, true, false, true];
        let s = [0.9, 0.1, 0.4, 0.5, 0.3];
        assert_eq!(permutation_test(&l, &s, &s, 200, 1).unwrap(), 1.0);
    }

    #[test]
    fn folds_are_grouped_and_stratified() {
        let mut keys = Vec::new();
        let mut labels = Vec::new();
        for p in 0..40 {
            for l in 0..(1 + p % 4) {
                keys.push(LesionKey { patient_id: format!("P{p}"), lesion_id: format!("L{l}") });
                labels.push((p + l) % 3 == 0);
            }
        }
        let plan = FoldPlan::new(&keys, &labels, 5, 3, true).unwrap();
        let mut fold_of: BTreeMap<&str, usize> = BTreeMap::new();
        for (k, &f) in keys.iter().zip(&plan.assignments) {
            assert_eq!(*fold_of.entry(&k.patient_id).or_insert(f), f);
        }
        let global = prevalence(&labels);
        for f in 0..5 {
            let rows = plan.test_rows(f);
            assert!(!rows.is_empty());
            let p = prevalence(&rows.iter().map(|&i| labels[i]).collect::<Vec<_>>());
            assert!((p - global).abs() <= 0.1, "fold {f} prevalence {p} vs {global}");
        }
        assert_eq!(plan, FoldPlan::new(&keys, &labels, 5, 3, true).unwrap());
    }

    #[test]
    fn parallel_map_preserves_order() {
        assert_eq!(parallel_map(10, 3, |i| i * i), (0..10).map(|i| i * i).collect::<Vec<_>>());
        assert_eq!(parallel_map(2, 8, |i| i), vec![0, 1]);
        assert!(parallel_map(0, 4, |i| i).is_empty());
    }

    #[test]
    fn reference_footer_is_flagged() {
        let r = reference_values(Task::CrVsNoncr);
        assert_eq!(r.len(), 18);
        let classic = r.iter().find(|v| v.method == Method::Gbdt && v.horizon == 1).unwrap();
        assert_eq!((classic.auc, classic.ci_lo, classic.ci_hi), (0.90, 0.88, 0.92));
        assert!(r.iter().all(|v| !v.reproducible));
    }
}
