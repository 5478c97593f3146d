use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::ctta::{AdaptationState, Decision, Policy};
use crate::error::{Error, Result};
use crate::model::Task;
use crate::source_trainer::Checkpoint;
use crate::streams::{build_stream, Domain};

use super::config::{Mode, RunConfig};
use super::metrics::{compute_error_rate, Confusion};

/// Per-instance CSV columns, in order.
pub const INSTANCE_COLUMNS: [&str; 10] = [
    "t",
    "domain",
    "round",
    "decision",
    "loss_seg",
    "loss_rec",
    "tau_before",
    "tau_after",
    "miou_instance",
    "wall_ms",
];

/// Task score accumulator: mIoU for segmentation, error rate for classification.
#[derive(Clone, Debug)]
enum Score {
    Seg(Confusion),
    Clf { wrong: usize, total: usize },
}

impl Score {
    fn new(task: Task, classes: usize) -> Self {
        match task {
            Task::Segmentation => Score::Seg(Confusion::new(classes)),
            Task::Classification => Score::Clf { wrong: 0, total: 0 },
        }
    }

    fn add(&mut self, preds: &[usize], gts: &[usize]) -> Result<()> {
        match self {
            Score::Seg(c) => c.add(preds, gts),
            Score::Clf { wrong, total } => {
                compute_error_rate(preds, gts)?;
                *wrong += preds.iter().zip(gts).filter(|(p, g)| p != g).count();
                *total += preds.len();
                Ok(())
            }
        }
    }

    fn value(&self) -> Result<f64> {
        match self {
            Score::Seg(c) => c.miou(),
            Score::Clf { wrong, total } if *total > 0 => Ok(*wrong as f64 / *total as f64),
            Score::Clf { .. } => Err(Error::InvalidArgument("metric over empty input".into())),
        }
    }
}

/// Name of the task metric column.
pub fn metric_name(task: Task) -> &'static str {
    match task {
        Task::Segmentation => "miou",
        Task::Classification => "error_rate",
    }
}

/// One stream instance as logged by the harness.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub t: usize,
    pub domain: Domain,
    pub round: usize,
    /// `None` in no-adapt mode and for quarantined instances.
    pub decision: Option<Decision>,
    pub quarantined: bool,
    pub loss_seg: Option<f64>,
    pub loss_rec: Option<f64>,
    pub tau_before: Option<f64>,
    pub tau_after: Option<f64>,
    /// Instance mIoU (segmentation) or accuracy (classification).
    pub miou_instance: f64,
    pub wall_ms: f64,
    /// Task metric over every instance of this domain so far.
    pub running_domain_metric: f64,
    /// FT share of the decided instances of the current round so far.
    pub round_ft_ratio: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    /// A domain name, or `all` for the whole round.
    pub domain: String,
    pub instances: usize,
    pub metric: f64,
    pub ft_count: usize,
    pub ft_ratio: f64,
    pub mean_wall_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub mode: Mode,
    pub instances: usize,
    /// Mean over (round, domain) segments of the task metric.
    pub mean_metric: f64,
    pub ft_ratio: f64,
    pub forwards: usize,
    pub skipped: usize,
    pub instances_per_sec: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub mode: Mode,
    pub task: Task,
    pub record_timing: bool,
    pub records: Vec<MetricsRecord>,
    pub rounds: Vec<RoundRow>,
    pub summary: Summary,
    /// Engine counters at the end of the run.
    pub forward_count: usize,
    pub ft_count: usize,
    pub et_count: usize,
    pub elapsed_s: f64,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })
}

fn write_rows(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

const SUMMARY_COLUMNS: [&str; 7] = [
    "mode",
    "instances",
    "mean_metric",
    "ft_ratio",
    "forwards",
    "skipped",
    "instances_per_sec",
];

fn summary_row(s: &Summary, timing: bool) -> Vec<String> {
    vec![
        s.mode.to_string(),
        s.instances.to_string(),
        s.mean_metric.to_string(),
        s.ft_ratio.to_string(),
        s.forwards.to_string(),
        s.skipped.to_string(),
        if timing {
            s.instances_per_sec.to_string()
        } else {
            "0".into()
        },
    ]
}

impl RunOutcome {
    fn wall(&self, ms: f64) -> String {
        if self.record_timing {
            ms.to_string()
        } else {
            "0".into()
        }
    }

    pub fn write_instances(&self, path: &Path) -> Result<()> {
        let rows = self.records.iter().map(|r| {
            let decision = match (r.decision, r.quarantined) {
                (Some(d), _) => d.to_string(),
                (None, true) => "skip".into(),
                (None, false) => "none".into(),
            };
            vec![
                r.t.to_string(),
                r.domain.to_string(),
                r.round.to_string(),
                decision,
                fmt_opt(r.loss_seg),
                fmt_opt(r.loss_rec),
                fmt_opt(r.tau_before),
                fmt_opt(r.tau_after),
                r.miou_instance.to_string(),
                self.wall(r.wall_ms),
            ]
        });
        write_rows(path, &INSTANCE_COLUMNS, rows)
    }

    pub fn write_rounds(&self, path: &Path) -> Result<()> {
        let header = [
            "round",
            "domain",
            "instances",
            metric_name(self.task),
            "ft_count",
            "ft_ratio",
            "mean_wall_ms",
        ];
        let rows = self.rounds.iter().map(|r| {
            vec![
                r.round.to_string(),
                r.domain.clone(),
                r.instances.to_string(),
                r.metric.to_string(),
                r.ft_count.to_string(),
                r.ft_ratio.to_string(),
                self.wall(r.mean_wall_ms),
            ]
        });
        write_rows(path, &header, rows)
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_rows(
            path,
            &SUMMARY_COLUMNS,
            [summary_row(&self.summary, self.record_timing)],
        )
    }

    /// Writes `instances.csv`, `rounds.csv` and `summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.write_instances(&dir.join("instances.csv"))?;
        self.write_rounds(&dir.join("rounds.csv"))?;
        self.write_summary(&dir.join("summary.csv"))
    }

    pub fn summary_line(&self) -> String {
        let s = &self.summary;
        format!(
            "{}: {} instances, mean {} {:.4}, ft_ratio {:.3}, {:.2} instances/s, {} forwards",
            s.mode,
            s.instances,
            metric_name(self.task),
            s.mean_metric,
            s.ft_ratio,
            s.instances_per_sec,
            s.forwards
        )
    }
}

/// Side-by-side summaries, one row per mode.
pub fn write_comparison(outcomes: &[RunOutcome], path: &Path) -> Result<()> {
    let rows = outcomes
        .iter()
        .map(|o| summary_row(&o.summary, o.record_timing));
    write_rows(path, &SUMMARY_COLUMNS, rows)
}

#[derive(Default)]
struct Segment {
    instances: usize,
    ft: usize,
    decided: usize,
    wall_ms: f64,
}

/// Streams the configured target sequence through one mode.
pub fn run_mode(cfg: &RunConfig, checkpoint: &Checkpoint, mode: Mode) -> Result<RunOutcome> {
    if mode == Mode::All {
        return Err(Error::InvalidArgument(
            "run_mode needs a single mode".into(),
        ));
    }
    if checkpoint.config != cfg.model {
        return Err(Error::InvalidArgument(
            "checkpoint model config differs from run config".into(),
        ));
    }
    let policy = mode.policy().unwrap_or(Policy::Hybrid);
    let mut state = AdaptationState::new(checkpoint, cfg.adapt_config(policy))?;
    let task = cfg.model.task;
    let classes = cfg.model.num_classes;
    let stream = build_stream(cfg.stream_spec())?;

    let mut records = Vec::with_capacity(stream.len());
    let mut seg_scores: BTreeMap<(usize, Domain), (Score, Segment)> = BTreeMap::new();
    let mut running: BTreeMap<Domain, Score> = BTreeMap::new();
    let mut round_seg: BTreeMap<usize, Segment> = BTreeMap::new();
    let start = Instant::now();

    for inst in stream {
        let inst = inst?;
        let input = inst.input();
        let (record_base, prediction) = if mode == Mode::NoAdapt {
            let t0 = Instant::now();
            let pred = state.predict_frozen(input)?;
            let wall = t0.elapsed().as_secs_f64() * 1e3;
            ((None, false, None, None, None, None, wall), pred)
        } else {
            let r = state.tta_step(input)?;
            let q = r.quarantined();
            let ok = |v: f64| (!q).then_some(v);
            (
                (
                    r.decision,
                    q,
                    ok(r.loss_seg),
                    ok(r.loss_rec),
                    Some(r.tau_before),
                    Some(r.tau_after),
                    r.wall_ms,
                ),
                r.prediction,
            )
        };
        let (decision, quarantined, loss_seg, loss_rec, tau_before, tau_after, wall_ms) =
            record_base;
        let gts = inst.ground_truth();
        let miou_instance = if quarantined {
            0.0
        } else {
            match task {
                Task::Segmentation => super::metrics::compute_miou(&prediction, gts, classes)?,
                Task::Classification => 1.0 - compute_error_rate(&prediction, gts)?,
            }
        };

        let key = (inst.round(), inst.domain());
        let (score, seg) = seg_scores
            .entry(key)
            .or_insert_with(|| (Score::new(task, classes), Segment::default()));
        let run_score = running
            .entry(inst.domain())
            .or_insert_with(|| Score::new(task, classes));
        if !quarantined {
            score.add(&prediction, gts)?;
            run_score.add(&prediction, gts)?;
        }
        let round = round_seg.entry(inst.round()).or_default();
        for s in [&mut *seg, &mut *round] {
            s.instances += 1;
            s.wall_ms += wall_ms;
            if let Some(d) = decision {
                s.decided += 1;
                s.ft += usize::from(d == Decision::Ft);
            }
        }
        let round_ft_ratio = if round.decided > 0 {
            round.ft as f64 / round.decided as f64
        } else {
            0.0
        };
        records.push(MetricsRecord {
            t: inst.t(),
            domain: inst.domain(),
            round: inst.round(),
            decision,
            quarantined,
            loss_seg,
            loss_rec,
            tau_before,
            tau_after,
            miou_instance,
            wall_ms,
            running_domain_metric: run_score.value().unwrap_or(0.0),
            round_ft_ratio,
        });
    }
    let elapsed_s = start.elapsed().as_secs_f64();

    let ratio = |s: &Segment| {
        if s.instances > 0 {
            s.ft as f64 / s.instances as f64
        } else {
            0.0
        }
    };
    let mut rounds = Vec::new();
    let mut segment_metrics = Vec::new();
    for (r, rs) in &round_seg {
        let mut in_round = Vec::new();
        for d in &cfg.domains {
            if let Some((score, seg)) = seg_scores.get(&(*r, *d)) {
                let m = score.value()?;
                in_round.push(m);
                rounds.push(RoundRow {
                    round: *r,
                    domain: d.to_string(),
                    instances: seg.instances,
                    metric: m,
                    ft_count: seg.ft,
                    ft_ratio: ratio(seg),
                    mean_wall_ms: seg.wall_ms / seg.instances as f64,
                });
            }
        }
        segment_metrics.extend(&in_round);
        rounds.push(RoundRow {
            round: *r,
            domain: "all".into(),
            instances: rs.instances,
            metric: in_round.iter().sum::<f64>() / in_round.len() as f64,
            ft_count: rs.ft,
            ft_ratio: ratio(rs),
            mean_wall_ms: rs.wall_ms / rs.instances as f64,
        });
    }

    let n = records.len();
    let summary = Summary {
        mode,
        instances: n,
        mean_metric: segment_metrics.iter().sum::<f64>() / segment_metrics.len() as f64,
        ft_ratio: state.ft_count as f64 / n as f64,
        forwards: state.forward_count,
        skipped: state.skipped,
        instances_per_sec: n as f64 / elapsed_s,
    };
    Ok(RunOutcome {
        mode,
        task,
        record_timing: cfg.record_timing,
        records,
        rounds,
        summary,
        forward_count: state.forward_count,
        ft_count: state.ft_count,
        et_count: state.et_count,
        elapsed_s,
    })
}

/// Runs the configured mode (or every mode) and writes all CSVs under `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig, checkpoint: &Checkpoint) -> Result<Vec<RunOutcome>> {
    cfg.echo(&cfg.out_dir)?;
    if cfg.mode != Mode::All {
        let out = run_mode(cfg, checkpoint, cfg.mode)?;
        out.write(&cfg.out_dir)?;
        return Ok(vec![out]);
    }
    let mut outs = Vec::new();
    for mode in Mode::SINGLE {
        let out = run_mode(cfg, checkpoint, mode)?;
        out.write(&cfg.out_dir.join(mode.to_string()))?;
        outs.push(out);
    }
    write_comparison(&outs, &cfg.out_dir.join("comparison.csv"))?;
    Ok(outs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Throughput {
    pub instances_per_sec: f64,
    pub forwards_per_instance: f64,
}

/// Wall-clock rate of a finished run; errors if the forward budget was not met.
pub fn measure_throughput(run: &RunOutcome) -> Result<Throughput> {
    let n = run.records.len();
    if n == 0 {
        return Err(Error::InvalidArgument("throughput of an empty run".into()));
    }
    let expected = run.mode.forwards_per_instance();
    if run.forward_count != expected * n {
        return Err(Error::InvalidArgument(format!(
            "{}: {} forwards over {} instances, expected {} per instance",
            run.mode, run.forward_count, n, expected
        )));
    }
    Ok(Throughput {
        instances_per_sec: n as f64 / run.elapsed_s,
        forwards_per_instance: run.forward_count as f64 / n as f64,
    })
}
