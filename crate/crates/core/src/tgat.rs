//! Temporal lesion graphs and a single-layer graph-attention classifier.
//!
//! Each node is one grid time point. Edges point from every node to every
//! earlier node (plus a self-loop) and carry the time gap in units of 360
//! days. A node attends over its out-neighbours:
//!
//! ```text
//! z_i   = Wᵀ x_i
//! e_ij  = LeakyReLU(a_srcᵀ z_i + a_dstᵀ z_j + a_delta · delta_ij)
//! α_ij  = softmax_j(e_ij)
//! h_i   = ELU(Σ_j α_ij z_j)
//! p     = σ(head_wᵀ mean_i(h_i) + head_b)
//! ```

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalstat::auc;
use crate::featspace::{ColumnOrigin, FeatureMatrix, MAX_HORIZON};
use crate::resample::GRID_SPACING_DAYS;

/// Time deltas are expressed in units of the one-year grid horizon.
pub const DELTA_SCALE_DAYS: f64 = 360.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub time_index: usize,
    pub day: u32,
    pub features: Vec<f64>,
}

/// Directed edge from a later node to an earlier one (or itself); indices are node positions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub src: usize,
    pub dst: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub label: bool,
    pub horizon: usize,
}

impl TemporalGraph {
    pub fn input_dim(&self) -> usize {
        self.nodes.first().map_or(0, |n| n.features.len())
    }

    pub fn temporal_edge_count(&self) -> usize {
        self.edges.iter().filter(|e| e.src != e.dst).count()
    }

    /// Subgraph of the nodes t0..t`horizon`, rebuilt with the same edge rule.
    pub fn crop(&self, horizon: usize) -> Result<TemporalGraph> {
        if horizon > self.horizon {
            return Err(Error::InsufficientData(format!(
                "graph covers t0..t{}, horizon t{horizon} requested",
                self.horizon
            )));
        }
        let mut nodes: Vec<GraphNode> = self.nodes.iter().filter(|n| n.time_index <= horizon).cloned().collect();
        nodes.sort_by_key(|n| n.time_index);
        Ok(TemporalGraph { edges: past_edges(&nodes), nodes, label: self.label, horizon })
    }
}

fn past_edges(nodes: &[GraphNode]) -> Vec<GraphEdge> {
    let mut edges = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for (j, b) in nodes.iter().enumerate() {
            if a.time_index >= b.time_index {
                edges.push(GraphEdge { src: i, dst: j, delta: (a.day as f64 - b.day as f64) / DELTA_SCALE_DAYS });
            }
        }
    }
    edges
}

/// Builds the fully connected, past-directed graph over t0..tN.
///
/// Node k carries `point_features[k]` followed by the clinical vector.
pub fn build_graph(point_features: &[Vec<f64>], clinical: &[f64], label: bool) -> Result<TemporalGraph> {
    let Some(first) = point_features.first() else {
        return Err(Error::InsufficientData("graph needs at least t0".into()));
    };
    if point_features.len() > MAX_HORIZON + 1 {
        return Err(Error::Config(format!("{} time points exceed t0..t{MAX_HORIZON}", point_features.len())));
    }
    let d = first.len();
    let mut nodes = Vec::with_capacity(point_features.len());
    for (k, f) in point_features.iter().enumerate() {
        if f.len() != d {
            return Err(Error::Dimension { expected: d, got: f.len() });
        }
        let mut features = f.clone();
        features.extend_from_slice(clinical);
        nodes.push(GraphNode { time_index: k, day: GRID_SPACING_DAYS * k as u32, features });
    }
    Ok(TemporalGraph { edges: past_edges(&nodes), horizon: nodes.len() - 1, nodes, label })
}

/// One graph per matrix row, using the per-time-point blocks up to `horizon` and the clinical block.
pub fn graphs_from_matrix(matrix: &FeatureMatrix, labels: &[bool], horizon: usize) -> Result<Vec<TemporalGraph>> {
    if labels.len() != matrix.n_rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), matrix.n_rows())));
    }
    let mut point_cols: Vec<Vec<usize>> = vec![Vec::new(); horizon + 1];
    let mut clinical_cols = Vec::new();
    for (j, c) in matrix.columns.iter().enumerate() {
        match c.origin {
            ColumnOrigin::TimePoint(k) if k <= horizon => point_cols[k].push(j),
            ColumnOrigin::TimePoint(_) => {}
            ColumnOrigin::Clinical => clinical_cols.push(j),
        }
    }
    if point_cols.iter().any(|c| c.len() != point_cols[0].len() || c.is_empty()) {
        return Err(Error::Shape(format!("matrix lacks per-time-point blocks up to t{horizon}")));
    }
    matrix
        .values
        .iter()
        .zip(labels)
        .map(|(row, &label)| {
            let points: Vec<Vec<f64>> = point_cols.iter().map(|cols| cols.iter().map(|&j| row[j]).collect()).collect();
            let clinical: Vec<f64> = clinical_cols.iter().map(|&j| row[j]).collect();
            build_graph(&points, &clinical, label)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Trained and served on graphs cropped to t0..t`horizon`.
    TimeSpecific { horizon: usize },
    /// Trained on randomly cropped graphs; serves every horizon.
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatParams {
    pub input_dim: usize,
    pub hidden: usize,
    /// `input_dim × hidden`, row-major.
    pub w: Vec<Vec<f64>>,
    /// Source features, target features, then the edge delta weight (2·hidden + 1).
    pub attn: Vec<f64>,
    pub leaky_slope: f64,
    pub head_w: Vec<f64>,
    pub head_b: f64,
    pub mode: Option<TrainMode>,
}

impl GatParams {
    pub fn zeros(input_dim: usize, hidden: usize) -> Self {
        Self {
            input_dim,
            hidden,
            w: vec![vec![0.0; hidden]; input_dim],
            attn: vec![0.0; 2 * hidden + 1],
            leaky_slope: 0.2,
            head_w: vec![0.0; hidden],
            head_b: 0.0,
            mode: None,
        }
    }

    /// Glorot-uniform weights, zero head bias.
    pub fn init(input_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_dim, hidden);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let bw = glorot(input_dim, hidden);
        for row in &mut p.w {
            for v in row.iter_mut() {
                *v = rng.random_range(-bw..bw);
            }
        }
        let ba = glorot(2 * hidden + 1, 1);
        for v in &mut p.attn {
            *v = rng.random_range(-ba..ba);
        }
        let bh = glorot(hidden, 1);
        for v in &mut p.head_w {
            *v = rng.random_range(-bh..bh);
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.input_dim * self.hidden + self.attn.len() + self.head_w.len() + 1
    }

    /// Trainable parameters in a fixed order: W (row-major), attention, head weights, head bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for row in &self.w {
            out.extend_from_slice(row);
        }
        out.extend_from_slice(&self.attn);
        out.extend_from_slice(&self.head_w);
        out.push(self.head_b);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params(), "parameter vector length");
        let mut it = flat.iter().copied();
        for row in &mut self.w {
            for v in row.iter_mut() {
                *v = it.next().unwrap();
            }
        }
        for v in &mut self.attn {
            *v = it.next().unwrap();
        }
        for v in &mut self.head_w {
            *v = it.next().unwrap();
        }
        self.head_b = it.next().unwrap();
    }

    fn check(&self, g: &TemporalGraph) -> Result<()> {
        if g.nodes.is_empty() {
            return Err(Error::InsufficientData("graph without nodes".into()));
        }
        for n in &g.nodes {
            if n.features.len() != self.input_dim {
                return Err(Error::Dimension { expected: self.input_dim, got: n.features.len() });
            }
        }
        if self.w.len() != self.input_dim
            || self.w.iter().any(|r| r.len() != self.hidden)
            || self.attn.len() != 2 * self.hidden + 1
            || self.head_w.len() != self.hidden
        {
            return Err(Error::Shape("inconsistent attention parameter shapes".into()));
        }
        if let Some(e) = g.edges.iter().find(|e| e.src >= g.nodes.len() || e.dst >= g.nodes.len()) {
            return Err(Error::Shape(format!("edge {e:?} references a missing node")));
        }
        Ok(())
    }
}

struct Neighbor {
    node: usize,
    delta: f64,
    score: f64,
    alpha: f64,
}

struct Forward {
    /// Node storage positions ordered by time index.
    order: Vec<usize>,
    z: Vec<Vec<f64>>,
    neighbors: Vec<Vec<Neighbor>>,
    pre: Vec<Vec<f64>>,
    readout: Vec<f64>,
    logit: f64,
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

fn elu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_forward(p: &GatParams, g: &TemporalGraph) -> Result<Forward> {
    p.check(g)?;
    let n = g.nodes.len();
    let h = p.hidden;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (g.nodes[i].time_index, i));

    let z: Vec<Vec<f64>> = g
        .nodes
        .iter()
        .map(|node| {
            let mut out = vec![0.0; h];
            for (x, row) in node.features.iter().zip(&p.w) {
                for (o, w) in out.iter_mut().zip(row) {
                    *o += x * w;
                }
            }
            out
        })
        .collect();

    let (a_src, rest) = p.attn.split_at(h);
    let (a_dst, a_delta) = rest.split_at(h);
    let src_term: Vec<f64> = z.iter().map(|zi| dot(a_src, zi)).collect();
    let dst_term: Vec<f64> = z.iter().map(|zj| dot(a_dst, zj)).collect();

    let mut neighbors: Vec<Vec<Neighbor>> = (0..n).map(|_| Vec::new()).collect();
    for e in &g.edges {
        let score = src_term[e.src] + dst_term[e.dst] + a_delta[0] * e.delta;
        neighbors[e.src].push(Neighbor { node: e.dst, delta: e.delta, score, alpha: 0.0 });
    }
    let rank: Vec<usize> = {
        let mut r = vec![0; n];
        for (pos, &i) in order.iter().enumerate() {
            r[i] = pos;
        }
        r
    };

    let mut pre = vec![vec![0.0; h]; n];
    let mut readout = vec![0.0; h];
    for &i in &order {
        let nb = &mut neighbors[i];
        if nb.is_empty() {
            return Err(Error::Shape(format!("node {i} has no outgoing edges")));
        }
        nb.sort_by_key(|x| rank[x.node]);
        let logits: Vec<f64> = nb.iter().map(|x| leaky(x.score, p.leaky_slope)).collect();
        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = exps.iter().sum();
        for (x, e) in nb.iter_mut().zip(&exps) {
            x.alpha = e / s;
            for (u, zj) in pre[i].iter_mut().zip(&z[x.node]) {
                *u += x.alpha * zj;
            }
        }
        for (r, u) in readout.iter_mut().zip(&pre[i]) {
            *r += elu(*u) / n as f64;
        }
    }
    let logit = dot(&p.head_w, &readout) + p.head_b;
    Ok(Forward { order, z, neighbors, pre, readout, logit })
}

/// Probability and attention matrix `α[i][j]` (zero where no edge exists), indexed by node position.
pub fn forward(params: &GatParams, g: &TemporalGraph) -> Result<(f64, Vec<Vec<f64>>)> {
    let f = run_forward(params, g)?;
    let n = g.nodes.len();
    let mut att = vec![vec![0.0; n]; n];
    for (i, nb) in f.neighbors.iter().enumerate() {
        for x in nb {
            att[i][x.node] += x.alpha;
        }
    }
    Ok((sigmoid(f.logit), att))
}

/// Weighted binary cross-entropy from a logit, computed without forming log(p).
pub fn weighted_bce(logit: f64, label: bool, weight: f64) -> f64 {
    let softplus = if logit > 0.0 { logit + (-logit).exp().ln_1p() } else { logit.exp().ln_1p() };
    weight * (softplus - if label { logit } else { 0.0 })
}

pub fn loss(params: &GatParams, g: &TemporalGraph, class_weight: f64) -> Result<f64> {
    let f = run_forward(params, g)?;
    Ok(weighted_bce(f.logit, g.label, class_weight))
}

/// Loss and exact gradient of the weighted binary cross-entropy with respect to every trainable parameter.
pub fn backward(params: &GatParams, g: &TemporalGraph, class_weight: f64) -> Result<(f64, GatParams)> {
    let f = run_forward(params, g)?;
    let n = g.nodes.len();
    let h = params.hidden;
    let y = if g.label { 1.0 } else { 0.0 };
    let mut grad = GatParams::zeros(params.input_dim, h);
    grad.leaky_slope = params.leaky_slope;

    let d_logit = class_weight * (sigmoid(f.logit) - y);
    grad.head_b = d_logit;
    for (gw, r) in grad.head_w.iter_mut().zip(&f.readout) {
        *gw = d_logit * r;
    }

    let (a_src, rest) = params.attn.split_at(h);
    let (a_dst, _) = rest.split_at(h);
    let mut dz = vec![vec![0.0; h]; n];
    let mut d_attn = vec![0.0; 2 * h + 1];

    for &i in &f.order {
        let du: Vec<f64> = (0..h).map(|c| d_logit * params.head_w[c] / n as f64 * elu_grad(f.pre[i][c])).collect();
        let nb = &f.neighbors[i];
        let d_alpha: Vec<f64> = nb.iter().map(|x| dot(&du, &f.z[x.node])).collect();
        let mean_d_alpha: f64 = nb.iter().zip(&d_alpha).map(|(x, da)| x.alpha * da).sum();
        for (x, da) in nb.iter().zip(&d_alpha) {
            for (dzj, u) in dz[x.node].iter_mut().zip(&du) {
                *dzj += x.alpha * u;
            }
            let d_logit_e = x.alpha * (da - mean_d_alpha);
            let d_score = d_logit_e * if x.score > 0.0 { 1.0 } else { params.leaky_slope };
            for c in 0..h {
                d_attn[c] += d_score * f.z[i][c];
                d_attn[h + c] += d_score * f.z[x.node][c];
                dz[i][c] += d_score * a_src[c];
                dz[x.node][c] += d_score * a_dst[c];
            }
            d_attn[2 * h] += d_score * x.delta;
        }
    }
    grad.attn = d_attn;
    for (node, dzi) in g.nodes.iter().zip(&dz) {
        for (grow, xv) in grad.w.iter_mut().zip(&node.features) {
            for (gv, d) in grow.iter_mut().zip(dzi) {
                *gv += xv * d;
            }
        }
    }
    Ok((weighted_bce(f.logit, g.label, class_weight), grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub hidden: usize,
    pub lr0: f64,
    pub restart_period: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub mode: TrainMode,
    pub val_fraction: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            hidden: 16,
            lr0: 1e-4,
            restart_period: 50,
            max_epochs: 1000,
            patience: 20,
            mode: TrainMode::General,
            val_fraction: 0.2,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hidden > 0
            && self.lr0 > 0.0
            && self.restart_period > 0
            && self.max_epochs > 0
            && self.batch_size > 0
            && self.val_fraction > 0.0
            && self.val_fraction < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid attention training configuration {self:?}")));
        }
        if let TrainMode::TimeSpecific { horizon } = self.mode {
            if horizon > MAX_HORIZON {
                return Err(Error::Config(format!("horizon {horizon} exceeds t{MAX_HORIZON}")));
            }
        }
        Ok(())
    }

    /// Cosine-annealed rate with warm restarts every `restart_period` epochs.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        let t = (epoch % self.restart_period) as f64;
        self.lr0 * (1.0 + (std::f64::consts::PI * t / self.restart_period as f64).cos()) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["epoch", "lr", "train_loss", "val_loss", "val_auc"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.lr.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_auc.map(|v| v.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            theta[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Stratified split of sample indices into (train, validation).
pub fn stratified_split(labels: &[bool], val_fraction: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [false, true] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let mut n_val = (val_fraction * idx.len() as f64).round() as usize;
        if idx.len() >= 2 {
            n_val = n_val.clamp(1, idx.len() - 1);
        } else {
            n_val = 0;
        }
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

fn balanced_weights(labels: &[bool]) -> Result<(f64, f64)> {
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass(format!("{pos} positive, {neg} negative training graphs")));
    }
    let n = labels.len() as f64;
    Ok((n / (2.0 * neg as f64), n / (2.0 * pos as f64)))
}

fn horizons_for(mode: TrainMode) -> Vec<usize> {
    match mode {
        TrainMode::TimeSpecific { horizon } => vec![horizon],
        TrainMode::General => (0..=MAX_HORIZON).collect(),
    }
}

fn evaluate_split(
    params: &GatParams,
    graphs: &[TemporalGraph],
    idx: &[usize],
    horizons: &[usize],
    weights: (f64, f64),
) -> Result<(f64, Option<f64>)> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut auc_sum = 0.0;
    let mut auc_count = 0usize;
    for &h in horizons {
        let mut labels = Vec::with_capacity(idx.len());
        let mut scores = Vec::with_capacity(idx.len());
        for &i in idx {
            let g = graphs[i].crop(h.min(graphs[i].horizon))?;
            let f = run_forward(params, &g)?;
            let w = if g.label { weights.1 } else { weights.0 };
            total += weighted_bce(f.logit, g.label, w);
            count += 1;
            labels.push(g.label);
            scores.push(f.logit);
        }
        if let Ok(a) = auc(&labels, &scores) {
            auc_sum += a;
            auc_count += 1;
        }
    }
    let auc = (auc_count > 0).then(|| auc_sum / auc_count as f64);
    Ok((total / count.max(1) as f64, auc))
}

/// Mini-batch Adam training with early stopping on a stratified validation split.
///
/// Returns the parameters of the epoch with the lowest validation loss.
pub fn train(graphs: &[TemporalGraph], cfg: &TrainConfig) -> Result<(GatParams, TrainLog)> {
    cfg.validate()?;
    let labels: Vec<bool> = graphs.iter().map(|g| g.label).collect();
    balanced_weights(&labels)?;
    let d = graphs[0].input_dim();
    if let Some(g) = graphs.iter().find(|g| g.input_dim() != d) {
        return Err(Error::Dimension { expected: d, got: g.input_dim() });
    }
    if let TrainMode::TimeSpecific { horizon } = cfg.mode {
        if let Some(g) = graphs.iter().find(|g| g.horizon < horizon) {
            return Err(Error::InsufficientData(format!("graph covers t0..t{}, training needs t{horizon}", g.horizon)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = stratified_split(&labels, cfg.val_fraction, &mut rng);
    let train_labels: Vec<bool> = train_idx.iter().map(|&i| labels[i]).collect();
    let weights = balanced_weights(&train_labels)?;
    let val_horizons = horizons_for(cfg.mode);

    let mut params = GatParams::init(d, cfg.hidden, &mut rng);
    params.mode = Some(cfg.mode);
    let mut theta = params.flatten();
    let mut adam = Adam::new(theta.len());
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut since_best = 0;
    let mut log = TrainLog::default();
    let mut order = train_idx.clone();

    for epoch in 0..cfg.max_epochs {
        let lr = cfg.learning_rate(epoch);
        order.shuffle(&mut rng);
        let crops: Vec<usize> = order
            .iter()
            .map(|&i| match cfg.mode {
                TrainMode::TimeSpecific { horizon } => horizon,
                TrainMode::General => rng.random_range(0..=MAX_HORIZON).min(graphs[i].horizon),
            })
            .collect();
        let mut epoch_loss = 0.0;
        for (batch, batch_crops) in order.chunks(cfg.batch_size).zip(crops.chunks(cfg.batch_size)) {
            let mut grad_sum = vec![0.0; theta.len()];
            for (&i, &h) in batch.iter().zip(batch_crops) {
                let g = graphs[i].crop(h)?;
                let w = if g.label { weights.1 } else { weights.0 };
                let (l, grad) = backward(&params, &g, w)?;
                epoch_loss += l;
                for (s, v) in grad_sum.iter_mut().zip(grad.flatten()) {
                    *s += v;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad_sum.iter_mut().for_each(|v| *v *= scale);
            adam.step(&mut theta, &grad_sum, lr);
            params.assign_flat(&theta);
        }
        let (val_loss, val_auc) = evaluate_split(&params, graphs, &val_idx, &val_horizons, weights)?;
        log.epochs.push(EpochLog { epoch, lr, train_loss: epoch_loss / order.len() as f64, val_loss, val_auc });
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            log.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best, log))
}

/// Probabilities for graphs cropped to t0..t`horizon`.
///
/// A time-specific model only serves the horizon it was trained on.
pub fn predict(params: &GatParams, graphs: &[TemporalGraph], horizon: usize) -> Result<Vec<f64>> {
    if let Some(TrainMode::TimeSpecific { horizon: trained }) = params.mode {
        if trained != horizon {
            return Err(Error::Config(format!(
                "time-specific model trained for t0..t{trained} cannot serve t0..t{horizon}"
            )));
        }
    }
    graphs
        .iter()
        .map(|g| {
            let cropped = g.crop(horizon)?;
            forward(params, &cropped).map(|(p, _)| p)
        })
        .collect()
}
