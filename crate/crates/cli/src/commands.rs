use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use bmtraj::boost::{self, GbdtModel};
use bmtraj::cluster::{assign, cluster_profiles, fit_gmm, ClusterProfile, GmmModel};
use bmtraj::evalstat::{build_report, run_protocol, EvalReport, Method, Task};
use bmtraj::featspace::{
    assemble, encode_clinical, standardize_apply, standardize_fit, ColumnMeta, FeatureMatrix, StandardizationParams,
};
use bmtraj::ingest::{
    parse_clinical_table, parse_trajectory_table, run_qc, write_clinical_table, write_flag_report,
    write_trajectory_table, ClinicalEntry,
};
use bmtraj::resample::{resample, write_resampled_normalized, write_resampled_volumes, ResampledTrajectory};
use bmtraj::synthgen::{generate, label_targets, write_labels, CohortLabels};
use bmtraj::tgat::{self, GatParams, TrainConfig, TrainMode};
use bmtraj::track::{build_trajectories, LabelVolume};
use bmtraj::{classify_trajectory, compute_flows, Error, LesionKey, LesionTrajectory, ResponseCategory, TransitionFlow};

use crate::config::{RunConfig, SCHEMA_VERSION};

/// Error envelope printed as `stage: message: context`.
#[derive(Debug)]
pub struct Failure {
    pub stage: &'static str,
    pub error: Error,
    pub context: String,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.stage, self.error, self.context)
    }
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        if self.error.is_io() {
            2
        } else {
            1
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

pub trait At<T> {
    fn at(self, stage: &'static str, context: impl fmt::Display) -> Outcome<T>;
}

impl<T, E: Into<Error>> At<T> for std::result::Result<T, E> {
    fn at(self, stage: &'static str, context: impl fmt::Display) -> Outcome<T> {
        self.map_err(|e| Failure { stage, error: e.into(), context: context.to_string() })
    }
}

fn required<'a>(stage: &'static str, path: &'a Option<PathBuf>, flag: &str) -> Outcome<&'a Path> {
    path.as_deref().ok_or_else(|| Failure {
        stage,
        error: Error::Config(format!("missing input `{flag}`")),
        context: "set it on the command line or in the config paths".into(),
    })
}

fn out_dir(stage: &'static str, cfg: &RunConfig) -> Outcome<PathBuf> {
    let dir = required(stage, &cfg.paths.out, "--out")?.to_path_buf();
    fs::create_dir_all(&dir).at(stage, dir.display())?;
    Ok(dir)
}

fn create(stage: &'static str, path: &Path) -> Outcome<BufWriter<File>> {
    File::create(path).map(BufWriter::new).at(stage, path.display())
}

fn write_json<T: Serialize>(stage: &'static str, path: &Path, value: &T) -> Outcome<()> {
    let mut w = create(stage, path)?;
    serde_json::to_writer_pretty(&mut w, value).at(stage, path.display())?;
    w.write_all(b"\n").and_then(|_| w.flush()).at(stage, path.display())
}

fn read_json<T: for<'de> Deserialize<'de>>(stage: &'static str, path: &Path) -> Outcome<T> {
    let f = File::open(path).at(stage, path.display())?;
    serde_json::from_reader(BufReader::new(f)).at(stage, path.display())
}

fn echo_config(stage: &'static str, cfg: &RunConfig, dir: &Path) -> Outcome<()> {
    write_json(stage, &dir.join(format!("{stage}_config.json")), cfg)
}

fn load_trajectories(stage: &'static str, cfg: &RunConfig) -> Outcome<Vec<LesionTrajectory>> {
    let path = required(stage, &cfg.paths.trajectories, "--trajectories")?;
    let f = File::open(path).at(stage, path.display())?;
    parse_trajectory_table(BufReader::new(f)).at(stage, path.display())
}

fn load_clinical(stage: &'static str, cfg: &RunConfig) -> Outcome<Vec<ClinicalEntry>> {
    match &cfg.paths.clinical {
        None => Ok(Vec::new()),
        Some(path) => {
            let f = File::open(path).at(stage, path.display())?;
            parse_clinical_table(BufReader::new(f)).at(stage, path.display())
        }
    }
}

fn resample_all(stage: &'static str, cfg: &RunConfig, trajs: &[LesionTrajectory]) -> Outcome<Vec<ResampledTrajectory>> {
    trajs.iter().map(|t| resample(t, cfg.resample).at(stage, t.key())).collect()
}

/// Categories at t1..t6 of each resampled trajectory.
fn classify_all(stage: &'static str, cfg: &RunConfig, res: &[ResampledTrajectory]) -> Outcome<Vec<Vec<ResponseCategory>>> {
    res.iter()
        .map(|r| {
            classify_trajectory(r, &cfg.criteria)
                .map(|c| c.into_iter().map(|(_, cat)| cat).collect())
                .at(stage, r.key())
        })
        .collect()
}

pub fn ingest(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "ingest";
    let trajs = load_trajectories(STAGE, cfg)?;
    let clinical = load_clinical(STAGE, cfg)?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("trajectories.csv");
    write_trajectory_table(create(STAGE, &path)?, &trajs).at(STAGE, path.display())?;
    if cfg.paths.clinical.is_some() {
        let path = dir.join("clinical.csv");
        write_clinical_table(create(STAGE, &path)?, &clinical).at(STAGE, path.display())?;
    }
    log::info!("{} lesions, {} clinical entries", trajs.len(), clinical.len());
    echo_config(STAGE, cfg, &dir)
}

pub fn qc(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "qc";
    let trajs = load_trajectories(STAGE, cfg)?;
    let dir = out_dir(STAGE, cfg)?;
    let outcome = run_qc(trajs, &cfg.cohort, &cfg.swing);
    let mut kept = outcome.kept;
    if cfg.include_flagged {
        kept.extend(outcome.rejected);
        kept.sort_by_key(LesionTrajectory::key);
    }
    log::info!("{} lesions kept, {} flagged", kept.len(), outcome.flags.len());
    let path = dir.join("trajectories.csv");
    write_trajectory_table(create(STAGE, &path)?, &kept).at(STAGE, path.display())?;
    let path = dir.join("qc_flags.csv");
    write_flag_report(create(STAGE, &path)?, &outcome.flags).at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

/// Reads `<day>.raw` / `<day>.json` pairs from the series directory.
fn load_series(stage: &'static str, dir: &Path) -> Outcome<Vec<(u32, LabelVolume)>> {
    let mut days = Vec::new();
    for entry in fs::read_dir(dir).at(stage, dir.display())? {
        let path = entry.at(stage, dir.display())?.path();
        if path.extension().is_some_and(|e| e == "raw") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let day: u32 = stem
                .parse()
                .map_err(|_| Error::Config(format!("volume file name `{stem}` is not a day number")))
                .at(stage, path.display())?;
            days.push(day);
        }
    }
    days.sort_unstable();
    days.iter()
        .map(|&d| {
            let raw = dir.join(format!("{d}.raw"));
            let sidecar = dir.join(format!("{d}.json"));
            LabelVolume::read(&raw, &sidecar).at(stage, raw.display()).map(|v| (d, v))
        })
        .collect()
}

pub fn track(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "track";
    let series_dir = required(STAGE, &cfg.paths.series, "--series")?;
    let series = load_series(STAGE, series_dir)?;
    let dir = out_dir(STAGE, cfg)?;
    let out = build_trajectories(&cfg.patient_id, &series, &cfg.track).at(STAGE, series_dir.display())?;
    let path = dir.join("trajectories.csv");
    write_trajectory_table(create(STAGE, &path)?, &out.trajectories).at(STAGE, path.display())?;
    let path = dir.join("new_lesions.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["day", "volume_mm3", "centroid_x_mm", "centroid_y_mm", "centroid_z_mm"]).at(STAGE, path.display())?;
    for n in &out.new_lesions {
        let c = n.centroid_mm;
        w.write_record([n.day.to_string(), n.volume_mm3.to_string(), c[0].to_string(), c[1].to_string(), c[2].to_string()])
            .at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;
    let path = dir.join("tracking_decisions.txt");
    let mut w = create(STAGE, &path)?;
    for d in &out.decisions {
        writeln!(w, "{d}").at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

pub fn resample_cmd(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "resample";
    let res = resample_all(STAGE, cfg, &load_trajectories(STAGE, cfg)?)?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("resampled_volumes.csv");
    write_resampled_volumes(create(STAGE, &path)?, &res).at(STAGE, path.display())?;
    let path = dir.join("resampled_normalized.csv");
    write_resampled_normalized(create(STAGE, &path)?, &res).at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

pub fn classify(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "classify";
    let res = resample_all(STAGE, cfg, &load_trajectories(STAGE, cfg)?)?;
    let cats = classify_all(STAGE, cfg, &res)?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("categories.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["patient_id", "lesion_id", "t1", "t2", "t3", "t4", "t5", "t6"]).at(STAGE, path.display())?;
    for (r, c) in res.iter().zip(&cats) {
        let mut rec = vec![r.patient_id.clone(), r.lesion_id.clone()];
        rec.extend(c.iter().map(|x| x.as_str().to_string()));
        w.write_record(&rec).at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

fn flows_for(stage: &'static str, cfg: &RunConfig, res: &[ResampledTrajectory]) -> Outcome<Vec<TransitionFlow>> {
    compute_flows(&classify_all(stage, cfg, res)?).at(stage, "transition flows")
}

fn write_flows_csv(stage: &'static str, path: &Path, flows: &[TransitionFlow]) -> Outcome<()> {
    let mut w = csv::Writer::from_writer(create(stage, path)?);
    w.write_record(["interval", "from", "to", "count"]).at(stage, path.display())?;
    for f in flows {
        for from in ResponseCategory::ALL {
            for to in ResponseCategory::ALL {
                let n = f.counts[from.index()][to.index()];
                w.write_record([
                    format!("t{}->t{}", f.interval_index, f.interval_index + 1),
                    from.to_string(),
                    to.to_string(),
                    n.to_string(),
                ])
                .at(stage, path.display())?;
            }
        }
    }
    w.flush().at(stage, path.display())
}

pub fn flows(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "flows";
    let res = resample_all(STAGE, cfg, &load_trajectories(STAGE, cfg)?)?;
    let flows = flows_for(STAGE, cfg, &res)?;
    let dir = out_dir(STAGE, cfg)?;
    write_flows_csv(STAGE, &dir.join("flows.csv"), &flows)?;
    write_json(STAGE, &dir.join("flows.json"), &flows)?;
    echo_config(STAGE, cfg, &dir)
}

struct Clustering {
    model: GmmModel,
    clusters: Vec<usize>,
    profiles: Vec<ClusterProfile>,
}

fn cluster_cohort(stage: &'static str, cfg: &RunConfig, res: &[ResampledTrajectory]) -> Outcome<Clustering> {
    let data: Vec<Vec<f64>> = res.iter().map(|r| r.normalized[1..].to_vec()).collect();
    let model = fit_gmm(&data, &cfg.gmm).at(stage, "mixture fit")?;
    let assignments = assign(&model, &data).at(stage, "cluster assignment")?;
    let t6: Vec<ResponseCategory> =
        classify_all(stage, cfg, res)?.into_iter().map(|c| *c.last().expect("six categories")).collect();
    let profiles = cluster_profiles(&model, &data, &assignments, &t6).at(stage, "cluster profiles")?;
    Ok(Clustering { clusters: assignments.iter().map(|a| a.cluster).collect(), model, profiles })
}

pub fn cluster(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "cluster";
    let res = resample_all(STAGE, cfg, &load_trajectories(STAGE, cfg)?)?;
    let c = cluster_cohort(STAGE, cfg, &res)?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("cluster_assignments.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["patient_id", "lesion_id", "cluster"]).at(STAGE, path.display())?;
    for (r, k) in res.iter().zip(&c.clusters) {
        w.write_record([r.patient_id.clone(), r.lesion_id.clone(), k.to_string()]).at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;
    write_json(STAGE, &dir.join("cluster_profiles.json"), &c.profiles)?;
    write_json(STAGE, &dir.join("gmm_model.json"), &c.model)?;
    echo_config(STAGE, cfg, &dir)
}

fn cohort_labels(stage: &'static str, cfg: &RunConfig, trajs: &[LesionTrajectory]) -> Outcome<CohortLabels> {
    label_targets(trajs, cfg.resample, &cfg.criteria).at(stage, "t6 targets")
}

pub fn features(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "features";
    let trajs = load_trajectories(STAGE, cfg)?;
    let clinical = load_clinical(STAGE, cfg)?;
    let res = resample_all(STAGE, cfg, &trajs)?;
    let keys: Vec<LesionKey> = res.iter().map(ResampledTrajectory::key).collect();
    let block = encode_clinical(&clinical, &keys).at(STAGE, "clinical encoding")?;
    let matrix = assemble(&res, Some(&block), cfg.horizon, &cfg.features).at(STAGE, "feature assembly")?;
    let labels = cohort_labels(STAGE, cfg, &trajs)?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("features.csv");
    matrix.write_csv(create(STAGE, &path)?).at(STAGE, path.display())?;
    write_json(STAGE, &dir.join("feature_columns.json"), &matrix.columns)?;
    let path = dir.join("targets.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["patient_id", "lesion_id", "t6", "cr", "resp"]).at(STAGE, path.display())?;
    for (i, k) in keys.iter().enumerate() {
        w.write_record([
            k.patient_id.clone(),
            k.lesion_id.clone(),
            labels.t6[i].to_string(),
            u8::from(labels.cr[i]).to_string(),
            u8::from(labels.resp[i]).to_string(),
        ])
        .at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

/// Reads the matrix and task labels written by `features`.
fn load_features(stage: &'static str, cfg: &RunConfig) -> Outcome<(FeatureMatrix, Vec<bool>)> {
    let dir = required(stage, &cfg.paths.features, "--features")?;
    let columns: Vec<ColumnMeta> = read_json(stage, &dir.join("feature_columns.json"))?;
    let path = dir.join("features.csv");
    let mut r = csv::Reader::from_path(&path).at(stage, path.display())?;
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.at(stage, path.display())?;
        if rec.len() != columns.len() + 2 {
            return Err(Error::Dimension { expected: columns.len() + 2, got: rec.len() }).at(stage, path.display());
        }
        rows.push(LesionKey { patient_id: rec[0].to_string(), lesion_id: rec[1].to_string() });
        let row: Result<Vec<f64>, _> = rec.iter().skip(2).map(str::parse::<f64>).collect();
        let row = row
            .map_err(|e| Error::Parse { row: line + 2, message: e.to_string() })
            .at(stage, path.display())?;
        values.push(row);
    }
    let path = dir.join("targets.csv");
    let mut r = csv::Reader::from_path(&path).at(stage, path.display())?;
    let column = match cfg.task {
        Task::CrVsNoncr => 3,
        Task::RespVsNonresp => 4,
    };
    let mut labels: BTreeMap<LesionKey, bool> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.at(stage, path.display())?;
        let key = LesionKey { patient_id: rec[0].to_string(), lesion_id: rec[1].to_string() };
        labels.insert(key, &rec[column] == "1");
    }
    let labels: Vec<bool> = rows
        .iter()
        .map(|k| labels.get(k).copied().ok_or_else(|| Error::Alignment(format!("no target for lesion {k}"))))
        .collect::<Result<_, _>>()
        .at(stage, path.display())?;
    Ok((FeatureMatrix { rows, columns, values }, labels))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum FittedModel {
    Gbdt { model: GbdtModel },
    Gat { params: GatParams },
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainedModel {
    schema_version: u32,
    task: Task,
    method: Method,
    horizon: usize,
    standardization: StandardizationParams,
    model: FittedModel,
}

pub fn train(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "train";
    let (matrix, labels) = load_features(STAGE, cfg)?;
    let all: Vec<usize> = (0..matrix.n_rows()).collect();
    let standardization = standardize_fit(&matrix, &all).at(STAGE, "standardization")?;
    let std = standardize_apply(&standardization, &matrix).at(STAGE, "standardization")?;
    let dir = out_dir(STAGE, cfg)?;
    let method = cfg.methods[0];
    let model = match method {
        Method::Gbdt => {
            let m = std.truncate_horizon(cfg.horizon);
            let gcfg = boost::GbdtConfig { seed: cfg.seed, ..cfg.protocol.gbdt };
            FittedModel::Gbdt { model: boost::fit(&m.values, &labels, &gcfg).at(STAGE, "boosting")? }
        }
        Method::GatSpecific | Method::GatGeneral => {
            let graphs = tgat::graphs_from_matrix(&std, &labels, cfg.horizon).at(STAGE, "graph construction")?;
            let mode = if method == Method::GatGeneral {
                TrainMode::General
            } else {
                TrainMode::TimeSpecific { horizon: cfg.horizon }
            };
            let tcfg = TrainConfig { mode, seed: cfg.seed, ..cfg.protocol.gat };
            let (params, log) = tgat::train(&graphs, &tcfg).at(STAGE, "graph attention training")?;
            let path = dir.join("train_log.csv");
            log.write_csv(create(STAGE, &path)?).at(STAGE, path.display())?;
            FittedModel::Gat { params }
        }
    };
    let trained = TrainedModel {
        schema_version: SCHEMA_VERSION,
        task: cfg.task,
        method,
        horizon: cfg.horizon,
        standardization,
        model,
    };
    write_json(STAGE, &dir.join("model.json"), &trained)?;
    echo_config(STAGE, cfg, &dir)
}

pub fn evaluate(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "evaluate";
    let (matrix, labels) = load_features(STAGE, cfg)?;
    let mut outcomes = Vec::new();
    for &method in &cfg.methods {
        log::info!("evaluating {} on {}", method.as_str(), cfg.task.as_str());
        outcomes.extend(run_protocol(&matrix, &labels, cfg.task, method, &cfg.protocol).at(STAGE, method.as_str())?);
    }
    let report = build_report(cfg.task, &outcomes, &cfg.protocol).at(STAGE, "report")?;
    let dir = out_dir(STAGE, cfg)?;
    write_json(STAGE, &dir.join("evaluation.json"), &report)?;
    let path = dir.join("evaluation.csv");
    report.write_csv(create(STAGE, &path)?).at(STAGE, path.display())?;
    let path = dir.join("p_values.csv");
    report.write_p_values_csv(create(STAGE, &path)?).at(STAGE, path.display())?;
    let path = dir.join("predictions.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["task", "method", "horizon", "patient_id", "lesion_id", "label", "score", "fold"])
        .at(STAGE, path.display())?;
    for o in &outcomes {
        for s in &o.pooled {
            w.write_record([
                o.task.as_str().to_string(),
                o.method.as_str().to_string(),
                o.horizon.to_string(),
                s.key.patient_id.clone(),
                s.key.lesion_id.clone(),
                u8::from(s.label).to_string(),
                s.score.to_string(),
                s.fold.to_string(),
            ])
            .at(STAGE, path.display())?;
        }
    }
    w.flush().at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

pub fn synth(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "synth";
    let cohort = generate(&cfg.synth).at(STAGE, "cohort generation")?;
    let dir = out_dir(STAGE, cfg)?;
    let path = dir.join("trajectories.csv");
    write_trajectory_table(create(STAGE, &path)?, &cohort.trajectories()).at(STAGE, path.display())?;
    let path = dir.join("clinical.csv");
    write_clinical_table(create(STAGE, &path)?, &cohort.clinical).at(STAGE, path.display())?;
    let path = dir.join("labels.csv");
    write_labels(create(STAGE, &path)?, &cohort).at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}

/// Everything `report` aggregates, in one document.
#[derive(Debug, Serialize, Deserialize)]
pub struct ReportBundle {
    pub schema_version: u32,
    pub settings: RunConfig,
    pub n_lesions: Option<usize>,
    pub flows: Vec<TransitionFlow>,
    pub clusters: Vec<ClusterProfile>,
    pub evaluations: Vec<EvalReport>,
}

pub fn report(cfg: &RunConfig) -> Outcome<()> {
    const STAGE: &str = "report";
    let mut bundle = ReportBundle {
        schema_version: SCHEMA_VERSION,
        settings: cfg.settings(),
        n_lesions: None,
        flows: Vec::new(),
        clusters: Vec::new(),
        evaluations: Vec::new(),
    };
    if cfg.paths.trajectories.is_some() {
        let res = resample_all(STAGE, cfg, &load_trajectories(STAGE, cfg)?)?;
        bundle.n_lesions = Some(res.len());
        bundle.flows = flows_for(STAGE, cfg, &res)?;
        bundle.clusters = cluster_cohort(STAGE, cfg, &res)?.profiles;
    }
    for path in &cfg.paths.evaluations {
        bundle.evaluations.push(read_json(STAGE, path)?);
    }
    if bundle.n_lesions.is_none() && bundle.evaluations.is_empty() {
        return Err(Error::Config("nothing to report".into())).at(STAGE, "pass --trajectories and/or --evaluation");
    }
    let dir = out_dir(STAGE, cfg)?;
    write_json(STAGE, &dir.join("report.json"), &bundle)?;
    write_flows_csv(STAGE, &dir.join("report_flows.csv"), &bundle.flows)?;

    let path = dir.join("report_clusters.csv");
    let mut w = csv::Writer::from_writer(create(STAGE, &path)?);
    w.write_record(["cluster", "size", "t0", "t1", "t2", "t3", "t4", "t5", "t6", "n_cr", "n_pr", "n_sd", "n_pd"])
        .at(STAGE, path.display())?;
    for p in &bundle.clusters {
        let mut rec = vec![p.cluster.to_string(), p.size.to_string()];
        rec.extend(p.mean_trajectory.iter().map(|v| format!("{v:.6}")));
        rec.extend(p.t6_histogram.iter().map(u64::to_string));
        w.write_record(&rec).at(STAGE, path.display())?;
    }
    w.flush().at(STAGE, path.display())?;

    let path = dir.join("report_table.csv");
    let mut table = Vec::new();
    let mut pvals = Vec::new();
    for (i, e) in bundle.evaluations.iter().enumerate() {
        let mut t = Vec::new();
        e.write_csv(&mut t).at(STAGE, path.display())?;
        let mut p = Vec::new();
        e.write_p_values_csv(&mut p).at(STAGE, path.display())?;
        // Keep only the first header.
        let skip = |buf: &[u8]| buf.iter().position(|&b| b == b'\n').map_or(buf.len(), |n| n + 1);
        table.extend_from_slice(if i == 0 { &t } else { &t[skip(&t)..] });
        pvals.extend_from_slice(if i == 0 { &p } else { &p[skip(&p)..] });
    }
    fs::write(&path, table).at(STAGE, path.display())?;
    let path = dir.join("report_p_values.csv");
    fs::write(&path, pvals).at(STAGE, path.display())?;
    echo_config(STAGE, cfg, &dir)
}
