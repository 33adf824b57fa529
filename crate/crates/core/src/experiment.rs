//! End-to-end runs: data, training loop, evaluation snapshots, analysis
//! dumps and checkpoints, all driven by an [`ExperimentConfig`].

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::analysis::{
    contribution_curves_matrix, coverage_csv, coverage_histogram, curves_csv, pca_csv, pca_project,
    positive_factor, uniformity_stat,
};
use crate::config::{DataSource, ExperimentConfig, NegativeKind};
use crate::data::{
    head_mid_tail_split, load_cifar100_bin, load_cifar10_bin, load_tcld, longtail_sizes, subsample_longtail,
    GroupPartition, LongTailDataset, SynthMixture,
};
use crate::encoder::{
    batch_tau, eval_features, forward, save_checkpoint, train_epoch, view_batch, EncoderParams, EpochStats,
    NegativeSource, OptimState, TrainSpec,
};
use crate::error::{Error, Result};
use crate::eval::{knn_report, linear_probe, EvalReport};
use crate::loss::similarity_against;
use crate::rng;
use crate::schedule::recommended_eval_epoch;

pub const METRICS_CSV_HEADER: &str = "epoch,tau,metric,scope,value";

#[derive(Debug, Clone)]
pub struct RunData {
    pub train: LongTailDataset,
    pub test: LongTailDataset,
    /// Head/mid/tail split of the training class sizes.
    pub partition: GroupPartition,
}

fn split_paths(s: &str) -> Vec<PathBuf> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty()).map(PathBuf::from).collect()
}

/// The synthetic train/test pair described by `data.*`.
pub fn synth_datasets(cfg: &ExperimentConfig) -> Result<(LongTailDataset, LongTailDataset)> {
    let d = &cfg.data;
    let mix = SynthMixture::new(d.num_classes, d.dim, d.class_separation, d.within_sigma, cfg.data_seed())?;
    Ok((mix.train_set(d.n_max, d.imbalance)?, mix.test_set(d.test_per_class)?))
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<RunData> {
    let d = &cfg.data;
    let (train, test) = match d.source {
        DataSource::Synth => synth_datasets(cfg)?,
        DataSource::Tcld => (load_tcld(Path::new(&d.train_path))?, load_tcld(Path::new(&d.test_path))?),
        DataSource::Cifar10 | DataSource::Cifar100 => {
            let (full, test) = if d.source == DataSource::Cifar10 {
                (load_cifar10_bin(&split_paths(&d.train_path))?, load_cifar10_bin(&split_paths(&d.test_path))?)
            } else {
                (load_cifar100_bin(Path::new(&d.train_path))?, load_cifar100_bin(Path::new(&d.test_path))?)
            };
            let sizes = longtail_sizes(full.num_classes(), d.n_max, d.imbalance)?;
            (subsample_longtail(&full, &sizes, cfg.data_seed())?, test)
        }
    };
    if train.num_classes() != test.num_classes() || train.dim() != test.dim() {
        return Err(Error::InvalidInput(format!(
            "train set has {} classes of width {}, test set {} of width {}",
            train.num_classes(),
            train.dim(),
            test.num_classes(),
            test.dim()
        )));
    }
    let partition = head_mid_tail_split(train.class_sizes())?;
    Ok(RunData { train, test, partition })
}

/// Evaluation results at one epoch.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub epoch: u64,
    pub tau: f64,
    pub report: EvalReport,
    /// Mean loss of the epoch just before the snapshot.
    pub train_loss: Option<f64>,
    /// Coverage CV of the projection embeddings, when analysis is on.
    pub coverage_cv: Option<f64>,
}

impl Snapshot {
    /// Rows in the `metrics.csv` layout, without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        let mut row = |metric: &str, scope: &str, v: f64| {
            out.push_str(&format!("{},{},{metric},{scope},{v}\n", self.epoch, self.tau));
        };
        for (metric, scope, v) in self.report.rows() {
            row(&metric, &scope, v);
        }
        if let Some(l) = self.train_loss {
            row("train_loss", "all", l);
        }
        if let Some(cv) = self.coverage_cv {
            row("coverage_cv", "all", cv);
        }
        out
    }
}

/// Model, optimiser and negatives for one run.
pub struct Trainer {
    pub params: EncoderParams,
    pub state: OptimState,
    pub negatives: NegativeSource,
    pub spec: TrainSpec,
}

impl Trainer {
    pub fn new(cfg: &ExperimentConfig, data: &RunData) -> Result<Self> {
        let e = &cfg.encoder;
        let mut head = e.head_hidden.clone();
        head.push(e.embed_dim);
        let params = EncoderParams::init(data.train.dim(), &e.hidden, &head, cfg.run.seed)?;
        let state = OptimState::new(
            &params,
            e.lr,
            e.warmup_epochs,
            cfg.run.epochs.max(1),
            e.weight_decay,
            e.sgd_momentum,
        )?;
        let negatives = match e.negatives {
            NegativeKind::InBatch => NegativeSource::in_batch(),
            NegativeKind::MomentumQueue => NegativeSource::momentum_queue(&params, e.queue_size, e.key_momentum)?,
        };
        let policy = cfg.augmentation()?;
        if policy.is_pixel() != matches!(cfg.data.source, DataSource::Cifar10 | DataSource::Cifar100) {
            return Err(Error::Config("augmentation mode does not match the data source".into()));
        }
        let spec = TrainSpec {
            schedule: cfg.schedule_config()?,
            coarse: cfg.coarse_config(data.train.class_sizes())?,
            policy,
            batch_size: e.batch_size,
            direction: cfg.direction(),
            seed: cfg.run.seed,
        };
        Ok(Self { params, state, negatives, spec })
    }

    pub fn train_epoch(&mut self, data: &RunData, epoch: u64) -> Result<EpochStats> {
        train_epoch(&data.train, &mut self.params, &mut self.state, &mut self.negatives, &self.spec, epoch)
    }
}

/// kNN and probe accuracies of `params` at `epoch`.
pub fn evaluate(cfg: &ExperimentConfig, data: &RunData, params: &EncoderParams) -> Result<EvalReport> {
    let train = eval_features(params, data.train.features())?;
    let test = eval_features(params, data.test.features())?;
    let mut report = knn_report(&train, data.train.labels(), &test, data.test.labels(), &cfg.eval.knn_k, &data.partition)?;
    for pc in cfg.probe_configs()? {
        let acc = linear_probe(&train, data.train.labels(), &test, data.test.labels(), &data.partition, &pc)?;
        report.push(pc.mode.metric_name(), acc);
    }
    Ok(report)
}

/// Analysis outputs of one snapshot, as CSV text keyed by file stem.
#[derive(Debug, Clone)]
pub struct AnalysisDump {
    pub coverage_cv: f64,
    pub files: Vec<(String, String)>,
}

/// Coverage of the training embeddings, contribution curves and positive
/// factors on a fixed subset of two-view pairs, and a PCA of the features.
pub fn analyze(cfg: &ExperimentConfig, data: &RunData, params: &EncoderParams, epoch: u64) -> Result<AnalysisDump> {
    let a = &cfg.analysis;
    let seed = cfg.run.seed;
    let z = forward(params, data.train.features())?.embeddings;
    let hist = coverage_histogram(&z, a.bins, seed)?;
    let coverage_cv = uniformity_stat(&hist);

    let n = data.train.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[rng::TAG_CURVES]));
    idx.truncate(a.curve_samples.min(n));
    idx.sort_unstable();
    let policy = cfg.augmentation()?;
    let z1 = forward(params, &view_batch(&data.train, &idx, &policy, seed, epoch, 0)?)?.embeddings;
    let z2 = forward(params, &view_batch(&data.train, &idx, &policy, seed, epoch, 1)?)?.embeddings;
    let s = similarity_against(&z1, &z2)?;
    let schedule = cfg.schedule_config()?;
    let curves = contribution_curves_matrix(&s, schedule.tau_at(epoch), a.curves)?;

    let labels: Vec<usize> = idx.iter().map(|&i| data.train.labels()[i]).collect();
    let spec = TrainSpec {
        schedule,
        coarse: cfg.coarse_config(data.train.class_sizes())?,
        policy,
        batch_size: cfg.encoder.batch_size,
        direction: cfg.direction(),
        seed,
    };
    let tau = batch_tau(&spec, &labels, epoch)?;
    let c = positive_factor(&s, &tau)?;
    let mut positives = String::from("index,label,s_ii,tau,c_ii\n");
    for (r, (&i, &l)) in idx.iter().zip(&labels).enumerate() {
        positives.push_str(&format!("{i},{l},{},{},{}\n", s.values()[(r, r)], tau.as_slice()[r], c[r]));
    }

    let feats = eval_features(params, data.train.features())?;
    let pca = pca_project(&feats, a.pca_components.min(feats.cols()))?;

    Ok(AnalysisDump {
        coverage_cv,
        files: vec![
            ("coverage".into(), coverage_csv(&hist)),
            ("curves".into(), curves_csv(&curves)),
            ("positive_factor".into(), positives),
            ("pca".into(), pca_csv(&pca, data.train.labels())),
        ],
    })
}

/// Evaluation plus (if enabled) analysis at `epoch`, writing analysis CSVs
/// under `analysis_dir` when given.
pub fn snapshot(
    cfg: &ExperimentConfig,
    data: &RunData,
    params: &EncoderParams,
    epoch: u64,
    train_loss: Option<f64>,
    analysis_dir: Option<&Path>,
) -> Result<Snapshot> {
    let report = evaluate(cfg, data, params)?;
    let coverage_cv = if cfg.analysis.enabled {
        let dump = analyze(cfg, data, params, epoch)?;
        if let Some(dir) = analysis_dir {
            write_analysis(dir, epoch, &dump)?;
        }
        Some(dump.coverage_cv)
    } else {
        None
    };
    Ok(Snapshot { epoch, tau: cfg.schedule_config()?.tau_at(epoch), report, train_loss, coverage_cv })
}

pub fn write_analysis(dir: &Path, epoch: u64, dump: &AnalysisDump) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (stem, text) in &dump.files {
        let path = dir.join(format!("{stem}_e{epoch}.csv"));
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// The checkpoint epoch of a periodic schedule, if the run is long enough.
pub fn recommended_epoch(cfg: &ExperimentConfig) -> Option<u64> {
    if !cfg.is_periodic() {
        return None;
    }
    recommended_eval_epoch(cfg.run.epochs, u64::from(cfg.schedule.period_t)).ok()
}

/// Epochs at which a run evaluates: 0, multiples of `eval_every`, the
/// recommended epoch and the last epoch.
pub fn snapshot_epochs(cfg: &ExperimentConfig) -> BTreeSet<u64> {
    let total = cfg.run.epochs;
    let mut set: BTreeSet<u64> = (0..=total).step_by(cfg.run.eval_every as usize).collect();
    set.insert(total);
    set.extend(recommended_epoch(cfg));
    set
}

pub fn checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("epoch_{epoch}.tclp"))
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub snapshots: Vec<Snapshot>,
    pub epochs: Vec<EpochStats>,
    pub recommended_epoch: Option<u64>,
    pub params: EncoderParams,
}

impl RunSummary {
    pub fn at(&self, epoch: u64) -> Option<&Snapshot> {
        self.snapshots.iter().find(|s| s.epoch == epoch)
    }

    pub fn last(&self) -> &Snapshot {
        self.snapshots.last().expect("a run always evaluates epoch 0")
    }
}

/// Trains for `run.epochs`, writing `config.resolved`, `metrics.csv`,
/// `train_log.csv`, `analysis/*_e{epoch}.csv` and checkpoints under
/// `run.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = cfg.run.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let resolved = out.join("config.resolved");
    fs::write(&resolved, cfg.to_resolved_text()).map_err(|e| Error::io(&resolved, e))?;

    let data = load_data(cfg)?;
    let mut trainer = Trainer::new(cfg, &data)?;
    let rec = recommended_epoch(cfg);
    let when = snapshot_epochs(cfg);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    let analysis_dir = out.join("analysis");

    let metrics_path = out.join("metrics.csv");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let log_path = out.join("train_log.csv");
    let mut log = String::from("epoch,tau,lr,loss,degenerate_rows\n");

    let mut snapshots = Vec::new();
    let mut epochs = Vec::new();
    let total = cfg.run.epochs;
    for epoch in 0..=total {
        if when.contains(&epoch) {
            let loss = epochs.last().map(|s: &EpochStats| s.mean_loss);
            let snap = snapshot(cfg, &data, &trainer.params, epoch, loss, Some(&analysis_dir))?;
            if epoch == 0 {
                writeln!(metrics, "{METRICS_CSV_HEADER}").map_err(|e| Error::io(&metrics_path, e))?;
            }
            metrics
                .write_all(snap.csv_rows().as_bytes())
                .and_then(|_| metrics.flush())
                .map_err(|e| Error::io(&metrics_path, e))?;
            snapshots.push(snap);
        }
        if Some(epoch) == rec || epoch == total {
            save_checkpoint(&trainer.params, &checkpoint_path(&out, epoch))?;
        }
        if epoch < total {
            let stats = trainer.train_epoch(&data, epoch)?;
            log.push_str(&format!(
                "{},{},{},{},{}\n",
                stats.epoch, stats.tau, stats.lr, stats.mean_loss, stats.degenerate_rows
            ));
            epochs.push(stats);
        }
    }
    fs::write(&log_path, log).map_err(|e| Error::io(&log_path, e))?;
    Ok(RunSummary { snapshots, epochs, recommended_epoch: rec, params: trainer.params })
}

/// One line per metric of the final snapshot.
pub fn summary_lines(summary: &RunSummary) -> Vec<String> {
    let last = summary.last();
    let mut lines: Vec<String> = last
        .report
        .iter()
        .map(|(name, acc)| {
            format!(
                "epoch {} {name}: all {:.4} head {:.4} mid {:.4} tail {:.4}",
                last.epoch, acc.overall, acc.group_means[0], acc.group_means[1], acc.group_means[2]
            )
        })
        .collect();
    if let Some(l) = last.train_loss {
        lines.push(format!("epoch {} train_loss: {l:.6}", last.epoch));
    }
    if let Some(cv) = last.coverage_cv {
        lines.push(format!("epoch {} coverage_cv: {cv:.4}", last.epoch));
    }
    lines
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(epochs: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::parse(&format!(
            "data.num_classes = 4\ndata.dim = 6\ndata.n_max = 20\ndata.imbalance = 4\ndata.test_per_class = 5\n\
             encoder.hidden = 8\nencoder.head_hidden = 8\nencoder.embed_dim = 4\nencoder.batch_size = 16\n\
             schedule.kind = cosine\nschedule.period_T = 4\neval.probe_epochs = 5\nanalysis.bins = 20\n\
             analysis.curve_samples = 8\nrun.epochs = {epochs}\nrun.eval_every = 2\n"
        ))
        .unwrap();
        cfg.run.output_dir = PathBuf::new();
        cfg
    }

    #[test]
    fn snapshot_schedule() {
        let mut cfg = small(10);
        cfg.run.eval_every = 4;
        assert_eq!(recommended_epoch(&cfg), Some(7));
        assert_eq!(snapshot_epochs(&cfg).into_iter().collect::<Vec<_>>(), vec![0, 4, 7, 8, 10]);
        cfg.run.epochs = 0;
        assert_eq!(snapshot_epochs(&cfg).into_iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn zero_epochs_only_evaluates_epoch_zero() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(0);
        cfg.run.output_dir = dir.path().to_path_buf();
        let summary = run_experiment(&cfg).unwrap();
        assert_eq!(summary.snapshots.len(), 1);
        let text = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(METRICS_CSV_HEADER));
        assert!(lines.all(|l| l.starts_with("0,")));
        assert!(checkpoint_path(dir.path(), 0).exists());
        assert!(dir.path().join("analysis/coverage_e0.csv").exists());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(Error::ConfigLine { line: 3, msg: String::new() }.exit_code(), 1);
        assert_eq!(Error::Parse { offset: 0, msg: String::new() }.exit_code(), 2);
        assert_eq!(Error::Divergence(String::new()).exit_code(), 3);
    }

    #[test]
    fn missing_data_file_is_a_data_error() {
        let mut cfg = small(4);
        cfg.data.source = DataSource::Tcld;
        cfg.data.train_path = "/nonexistent/train.tcld".into();
        cfg.data.test_path = "/nonexistent/test.tcld".into();
        assert_eq!(load_data(&cfg).unwrap_err().exit_code(), 2);
    }
}
