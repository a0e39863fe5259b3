//! End-to-end commands: training, retrieval evaluation and schedule export.
//! The command-line binary is a thin wrapper around these.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_dataset, write_dataset, Dataset, PkSampler, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_retrieval, RetrievalMetrics, SampleLabel};
use crate::model::{build_branched_model, train_step, BranchedModel};
use crate::schedules::{dump_schedules, format_sig, ScheduleTable};
use crate::tensor::Tensor;

/// Loss means over one epoch's steps and the rates applied during it.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub dcml: f64,
    pub lr_main: f64,
    pub lr_branches: Vec<f64>,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub model: BranchedModel,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Metrics log: `epoch,total,ce,triplet,dcml,lr_main,lr_b1..lr_bk`. Losses
/// have 10 significant digits; learning rates are written in shortest
/// round-trip form so they reproduce the schedule values exactly.
pub fn metrics_csv(records: &[EpochRecord]) -> String {
    let k = records.first().map_or(0, |r| r.lr_branches.len());
    let mut out = String::from("epoch,total,ce,triplet,dcml,lr_main");
    for b in 1..=k {
        let _ = write!(out, ",lr_b{b}");
    }
    out.push('\n');
    for r in records {
        let _ = write!(out, "{}", r.epoch);
        for v in [r.total, r.ce, r.triplet, r.dcml] {
            let _ = write!(out, ",{}", format_sig(v, 10));
        }
        let _ = write!(out, ",{:?}", r.lr_main);
        for lr in &r.lr_branches {
            let _ = write!(out, ",{lr:?}");
        }
        out.push('\n');
    }
    out
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => fs::create_dir_all(parent).map_err(|e| Error::io(parent, e)),
        None => Ok(()),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Dataset and split described by the config.
pub fn prepare_data(config: &RunConfig) -> Result<(Dataset, Split)> {
    let dataset = generate_dataset(&config.data.spec)?;
    let split = dataset.split(config.data.heldout_domain)?;
    Ok((dataset, split))
}

/// Trains in memory without touching the file system.
pub fn train_model(
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(BranchedModel, Vec<EpochRecord>)> {
    config.validate()?;
    let (dataset, split) = prepare_data(config)?;
    let mut model = build_branched_model(config.model_config(), config.model.seed)?;
    let mut optimizer = config.optimizer();
    let schedules = config.train_schedules();
    let loss = config.loss_config();
    let sampler = PkSampler::new(&dataset, &split.train);
    let (p, k) = (config.data.p, config.data.k);
    let steps = match config.schedules.steps_per_epoch {
        0 => split.train.len().div_ceil(p * k).max(1),
        s => s,
    };
    let mut rng = StdRng::seed_from_u64(
        config.model.seed ^ config.data.spec.seed.rotate_left(32) ^ 0x7f4a_7c15_9e37_79b9,
    );
    let mut records = Vec::with_capacity(config.schedules.epochs);
    for epoch in 0..config.schedules.epochs {
        let mut sums = [0.0; 4];
        let mut rates = None;
        for step_index in 0..steps {
            let indices = sampler.sample(&mut rng, p, k)?;
            let tokens = dataset.stack(&indices)?;
            let labels: Vec<usize> = indices.iter().map(|&i| dataset.samples[i].id).collect();
            let step = train_step(
                &mut model,
                &mut optimizer,
                &tokens,
                &labels,
                epoch,
                &schedules,
                &loss,
            )
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} (training diverged at step {step_index} of epoch {epoch})"
                )),
                other => other,
            })?;
            for (s, v) in sums
                .iter_mut()
                .zip([step.total, step.ce, step.triplet, step.dcml])
            {
                *s += v;
            }
            rates = Some(step.rates);
        }
        let rates = rates.expect("at least one step per epoch");
        let n = steps as f64;
        let record = EpochRecord {
            epoch,
            total: sums[0] / n,
            ce: sums[1] / n,
            triplet: sums[2] / n,
            dcml: sums[3] / n,
            lr_main: rates.main,
            lr_branches: rates.branches,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((model, records))
}

/// Trains, then writes the metrics log, the checkpoint and, if configured,
/// the dataset dump.
pub fn cmd_train(config: &RunConfig, on_epoch: impl FnMut(&EpochRecord)) -> Result<TrainReport> {
    config.validate()?;
    if !config.io.dataset_dump.as_os_str().is_empty() {
        let path = config.output_path(&config.io.dataset_dump);
        ensure_parent(&path)?;
        write_dataset(&path, &prepare_data(config)?.0)?;
    }
    let (model, epochs) = train_model(config, on_epoch)?;
    let metrics_path = config.output_path(&config.io.metrics_csv);
    write_file(&metrics_path, metrics_csv(&epochs).as_bytes())?;
    let checkpoint = config.output_path(&config.io.checkpoint);
    ensure_parent(&checkpoint)?;
    save_checkpoint(&checkpoint, model.params())?;
    Ok(TrainReport {
        epochs,
        model,
        checkpoint,
        metrics_csv: metrics_path,
    })
}

/// Retrieval results of one model on the two protocols.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Queries from the withheld domain against a gallery of the withheld
    /// domain plus the held-in test samples.
    pub heldout: RetrievalMetrics,
    /// Held-in test samples against themselves; `None` with a single
    /// source domain, where no cross-domain match exists.
    pub heldin: Option<RetrievalMetrics>,
}

/// Where features come from during evaluation.
#[derive(Clone, Copy, Debug)]
pub enum FeatureSource<'a> {
    Model(&'a BranchedModel),
    /// One-hot identity vectors: the upper bound of every metric.
    PerfectIdentity,
}

fn labels_of(dataset: &Dataset, indices: &[usize]) -> Vec<SampleLabel> {
    indices
        .iter()
        .map(|&i| SampleLabel {
            id: dataset.samples[i].id,
            domain: dataset.samples[i].domain,
        })
        .collect()
}

fn features_of(
    source: FeatureSource<'_>,
    config: &RunConfig,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Tensor> {
    match source {
        FeatureSource::Model(model) => {
            model.embed_samples(&dataset.stack(indices)?, config.model.fuse, 64)
        }
        FeatureSource::PerfectIdentity => {
            let classes = dataset.spec.num_ids;
            let mut data = vec![0.0; indices.len() * classes];
            for (row, &i) in indices.iter().enumerate() {
                data[row * classes + dataset.samples[i].id] = 1.0;
            }
            Tensor::new(vec![indices.len(), classes], data)
        }
    }
}

pub fn evaluate(config: &RunConfig, source: FeatureSource<'_>) -> Result<EvalReport> {
    let (dataset, split) = prepare_data(config)?;
    let gallery_idx: Vec<usize> = split
        .heldout
        .iter()
        .chain(&split.heldin_test)
        .copied()
        .collect();
    let gallery = features_of(source, config, &dataset, &gallery_idx)?;
    let gallery_labels = labels_of(&dataset, &gallery_idx);
    let n_out = split.heldout.len();
    let query = gallery.select_rows(&(0..n_out).collect::<Vec<_>>())?;
    let heldout = evaluate_retrieval(&query, &gallery_labels[..n_out], &gallery, &gallery_labels)?;
    let heldin = if dataset.spec.num_domains > 2 {
        let rows: Vec<usize> = (n_out..gallery_idx.len()).collect();
        let feats = gallery.select_rows(&rows)?;
        let labels = &gallery_labels[n_out..];
        Some(evaluate_retrieval(&feats, labels, &feats, labels)?)
    } else {
        None
    };
    Ok(EvalReport { heldout, heldin })
}

/// Loads the checkpoint into a model of the configured architecture and
/// evaluates it.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalReport> {
    config.validate()?;
    let mut model = build_branched_model(config.model_config(), config.model.seed)?;
    load_checkpoint(checkpoint, model.params_mut())?;
    evaluate(config, FeatureSource::Model(&model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleReport {
    pub table: ScheduleTable,
    /// Column maxima, main first.
    pub maxima: Vec<f64>,
    pub path: PathBuf,
}

/// Writes the per-epoch learning-rate table of the main schedule and every
/// PMoC branch.
pub fn cmd_schedule(config: &RunConfig, out_csv: &Path) -> Result<ScheduleReport> {
    config.validate()?;
    let table = dump_schedules(&config.branch_specs(), &config.main_schedule())?;
    write_file(out_csv, table.to_csv().as_bytes())?;
    Ok(ScheduleReport {
        maxima: table.column_max(),
        table,
        path: out_csv.to_path_buf(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> RunConfig {
        let mut c = RunConfig::desk();
        c.schedules.epochs = 3;
        c.schedules.periods = vec![3, 3, 1];
        c.schedules.steps_per_epoch = 2;
        c
    }

    #[test]
    fn logged_rates_match_schedules() {
        let c = quick();
        let (_, records) = train_model(&c, |_| {}).unwrap();
        let schedules = c.train_schedules();
        for r in &records {
            let rates = schedules.rates_at(r.epoch).unwrap();
            assert_eq!(r.lr_main, rates.main);
            assert_eq!(r.lr_branches, rates.branches);
        }
    }

    #[test]
    fn csv_rates_parse_back_exactly() {
        let c = quick();
        let (_, records) = train_model(&c, |_| {}).unwrap();
        let csv = metrics_csv(&records);
        let row: Vec<f64> = csv
            .lines()
            .nth(2)
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(row[5], records[1].lr_main);
        assert_eq!(&row[6..], &records[1].lr_branches[..]);
    }

    #[test]
    fn perfect_features_score_one() {
        let report = evaluate(&RunConfig::desk(), FeatureSource::PerfectIdentity).unwrap();
        assert_eq!(report.heldout.map, 1.0);
        assert_eq!(report.heldout.rank1, 1.0);
        let heldin = report.heldin.unwrap();
        assert_eq!(heldin.map, 1.0);
    }

    #[test]
    fn training_is_deterministic() {
        let c = quick();
        let (m1, r1) = train_model(&c, |_| {}).unwrap();
        let (m2, r2) = train_model(&c, |_| {}).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(m1.params(), m2.params());
    }
}
