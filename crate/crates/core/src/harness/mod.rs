//! Run configuration, metrics, experiment driver and CSV export.

mod config;
mod metrics;
mod run;

use std::fs;
use std::path::Path;

pub use config::{Mode, RunConfig};
pub use metrics::{compute_error_rate, compute_miou, Confusion};
pub use run::{
    measure_throughput, metric_name, run_experiment, run_mode, write_comparison, MetricsRecord,
    RoundRow, RunOutcome, Summary, Throughput, INSTANCE_COLUMNS,
};

use crate::error::{Error, Result};
use crate::model::{Model, Task};
use crate::source_trainer::{train_source, Checkpoint, SourceRun, SourceSample};
use crate::streams::{
    apply_corruption, derive_seed, source_scenes, write_manifest, CorruptionSpec, Domain,
};

/// Labelled clean scenes for source training.
pub fn source_dataset(cfg: &RunConfig) -> Result<Vec<SourceSample>> {
    let scenes = source_scenes(cfg.source_scenes, cfg.seed, &cfg.scene_config())?;
    Ok(scenes
        .into_iter()
        .map(|s| SourceSample {
            labels: s.labels_for(cfg.model.task, cfg.model.num_classes),
            image: s.image,
        })
        .collect())
}

pub fn train_from_config(cfg: &RunConfig) -> Result<SourceRun> {
    let model = Model::new(cfg.model.clone())?;
    train_source(&model, &source_dataset(cfg)?, &cfg.source_config())
}

/// Writes the stream manifest to `dir/manifest.csv`.
pub fn write_stream_manifest(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let spec = cfg.stream_spec();
    spec.validate()?;
    write_manifest(&spec.manifest(), &dir.join("manifest.csv"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub domain: Domain,
    pub instances: usize,
    pub metric: f64,
}

/// Frozen-model task metric on held-out scenes, clean and under each target corruption.
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    checkpoint: &Checkpoint,
    count: usize,
) -> Result<Vec<EvalRow>> {
    let model = Model::new(checkpoint.config.clone())?;
    let held_out = derive_seed(cfg.seed, 0xE7A1);
    let scenes = source_scenes(count, held_out, &cfg.scene_config())?;
    let classes = checkpoint.config.num_classes;
    let mut rows = Vec::new();
    for domain in std::iter::once(Domain::Clean).chain(cfg.domains.iter().copied()) {
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for (i, s) in scenes.iter().enumerate() {
            let spec = CorruptionSpec {
                kind: domain,
                severity: cfg.severity,
                seed: derive_seed(held_out, i as u64),
            };
            let image = apply_corruption(&s.image, &spec)?;
            preds.extend(model.predict_labels(&checkpoint.params, &image)?);
            gts.extend(s.labels_for(checkpoint.config.task, classes));
        }
        let metric = match checkpoint.config.task {
            Task::Segmentation => compute_miou(&preds, &gts, classes)?,
            Task::Classification => compute_error_rate(&preds, &gts)?,
        };
        rows.push(EvalRow {
            domain,
            instances: scenes.len(),
            metric,
        });
    }
    Ok(rows)
}

pub fn write_eval(rows: &[EvalRow], task: Task, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["domain", "instances", metric_name(task)])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.domain.to_string(),
            r.instances.to_string(),
            r.metric.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    /// Tiny model, short stream, two source epochs.
    fn quick() -> RunConfig {
        RunConfig {
            model: ModelConfig {
                image_size: 16,
                patch_size: 4,
                embed_dim: 16,
                depth: 1,
                heads: 2,
                num_classes: 5,
                adapter_dim: 4,
                ..ModelConfig::default()
            },
            per_domain: 3,
            rounds: 2,
            source_scenes: 8,
            epochs: 2,
            lr_tta: 1e-3,
            record_timing: false,
            ..RunConfig::default()
        }
    }

    fn checkpoint(cfg: &RunConfig) -> Checkpoint {
        train_from_config(cfg).unwrap().checkpoint
    }

    #[test]
    fn golden_instance_schema() {
        let cfg = quick();
        let dir = tempfile::tempdir().unwrap();
        let out = run_mode(&cfg, &checkpoint(&cfg), Mode::Hybrid).unwrap();
        let path = dir.path().join("instances.csv");
        out.write_instances(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,domain,round,decision,loss_seg,loss_rec,tau_before,tau_after,miou_instance,wall_ms"
        );
        let first: Vec<_> = lines.next().unwrap().split(',').collect();
        assert_eq!(&first[..4], &["0", "fog", "0", "FT"]);
        assert_eq!(first[6], "0");
        assert_eq!(first[9], "0");
        assert_eq!(text.lines().count(), 1 + 24);
    }

    #[test]
    fn forward_budget_per_mode() {
        let cfg = quick();
        let ck = checkpoint(&cfg);
        for mode in Mode::SINGLE {
            let out = run_mode(&cfg, &ck, mode).unwrap();
            let tp = measure_throughput(&out).unwrap();
            assert_eq!(
                tp.forwards_per_instance,
                mode.forwards_per_instance() as f64,
                "{mode}"
            );
            assert_eq!(out.forward_count, 24 * mode.forwards_per_instance());
        }
    }

    #[test]
    fn et_only_never_fires_ft() {
        let cfg = quick();
        let out = run_mode(&cfg, &checkpoint(&cfg), Mode::EtOnly).unwrap();
        assert!(out
            .records
            .iter()
            .all(|r| r.decision == Some(crate::ctta::Decision::Et)));
        assert_eq!(out.summary.ft_ratio, 0.0);
        assert!(out.rounds.iter().all(|r| r.ft_ratio == 0.0));
    }

    #[test]
    fn round_rows_recompute_from_records() {
        let cfg = quick();
        let out = run_mode(&cfg, &checkpoint(&cfg), Mode::Hybrid).unwrap();
        for row in out.rounds.iter().filter(|r| r.domain == "all") {
            let in_round: Vec<_> = out
                .records
                .iter()
                .filter(|r| r.round == row.round)
                .collect();
            let ft = in_round
                .iter()
                .filter(|r| r.decision == Some(crate::ctta::Decision::Ft))
                .count();
            assert_eq!(row.ft_count, ft);
            assert_eq!(row.ft_ratio, ft as f64 / in_round.len() as f64);
        }
        let total_ft: usize = out
            .rounds
            .iter()
            .filter(|r| r.domain == "all")
            .map(|r| r.ft_count)
            .sum();
        assert_eq!(total_ft, out.ft_count);
        assert_eq!(out.ft_count + out.et_count, out.records.len());
        assert!(out.rounds.iter().all(|r| (0.0..=1.0).contains(&r.metric)));
    }

    #[test]
    fn no_adapt_is_deterministic() {
        let mut cfg = quick();
        let ck = checkpoint(&cfg);
        cfg.mode = Mode::NoAdapt;
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        for d in [&a, &b] {
            cfg.out_dir = d.path().to_path_buf();
            run_experiment(&cfg, &ck).unwrap();
        }
        for f in ["instances.csv", "rounds.csv", "summary.csv"] {
            assert_eq!(
                fs::read(a.path().join(f)).unwrap(),
                fs::read(b.path().join(f)).unwrap(),
                "{f}"
            );
        }
    }

    #[test]
    fn all_mode_writes_comparison() {
        let mut cfg = quick();
        cfg.per_domain = 1;
        cfg.rounds = 1;
        cfg.mode = Mode::All;
        let dir = tempfile::tempdir().unwrap();
        cfg.out_dir = dir.path().to_path_buf();
        let outs = run_experiment(&cfg, &checkpoint(&cfg)).unwrap();
        assert_eq!(outs.len(), 4);
        let text = fs::read_to_string(dir.path().join("comparison.csv")).unwrap();
        let modes: Vec<_> = text
            .lines()
            .skip(1)
            .map(|l| l.split(',').next().unwrap())
            .collect();
        assert_eq!(modes, vec!["no-adapt", "hybrid", "ft-only", "et-only"]);
        assert!(dir.path().join("hybrid/instances.csv").exists());
        assert!(dir.path().join("config.txt").exists());
    }

    #[test]
    fn checkpoint_config_must_match() {
        let cfg = quick();
        let ck = checkpoint(&cfg);
        let mut other = cfg.clone();
        other.model.adapter_dim = 5;
        assert!(run_mode(&other, &ck, Mode::Hybrid).is_err());
    }

    #[test]
    fn eval_covers_clean_and_targets() {
        let cfg = quick();
        let rows = evaluate_checkpoint(&cfg, &checkpoint(&cfg), 4).unwrap();
        assert_eq!(rows.len(), 5);
        assert_eq!(rows[0].domain, Domain::Clean);
        assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.metric)));
    }
}
