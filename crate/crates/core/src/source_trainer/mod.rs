//! Supervised multi-task training on the source domain: cross-entropy on the
//! task head plus masked L1 reconstruction, both computed from the masked
//! input, summed with unit weights.

mod checkpoint;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, MAGIC, VERSION};

use crate::diffmath::{Optimizer, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{BoundParams, GroupSet, Model, ParamStore, PatchMask};

/// Label value skipped by the cross-entropy.
pub const IGNORE_INDEX: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct SourceSample {
    pub image: Tensor,
    pub labels: Vec<usize>,
}

/// A non-empty batch of labeled source images.
#[derive(Clone, Debug)]
pub struct SourceBatch<'a> {
    samples: Vec<&'a SourceSample>,
}

impl<'a> SourceBatch<'a> {
    pub fn new(samples: Vec<&'a SourceSample>, model: &Model) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("empty source batch".into()));
        }
        let cfg = model.config();
        for s in &samples {
            if s.labels.len() != cfg.label_count() {
                return Err(Error::shape(
                    "source_batch",
                    format!(
                        "{} labels, model emits {}",
                        s.labels.len(),
                        cfg.label_count()
                    ),
                ));
            }
            if let Some(&bad) = s.labels.iter().find(|l| **l >= cfg.num_classes) {
                return Err(Error::LabelOutOfRange {
                    label: bad,
                    classes: cfg.num_classes,
                });
            }
        }
        Ok(SourceBatch { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scalar loss handles of one multi-task evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub seg: Var,
    pub rec: Var,
    pub logits: Var,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Losses {
    pub total: f64,
    pub seg: f64,
    pub rec: f64,
}

impl Losses {
    pub fn read(tape: &Tape, vars: &LossVars) -> Result<Self> {
        Ok(Losses {
            total: tape.value(vars.total).item()?,
            seg: tape.value(vars.seg).item()?,
            rec: tape.value(vars.rec).item()?,
        })
    }
}

/// Masks `image`, runs the student, and builds `seg + rec` against `targets`.
pub fn multitask_loss(
    model: &Model,
    tape: &mut Tape,
    params: &BoundParams,
    image: &Tensor,
    targets: &[usize],
    mask: &PatchMask,
) -> Result<LossVars> {
    let x = model.image(tape, image)?;
    let pass = model.student_pass(tape, x, mask, params)?;
    let seg = tape.cross_entropy(pass.logits, targets, IGNORE_INDEX)?;
    let pixel_mask = mask.pixel_mask(model.config())?;
    let rec = tape.l1_masked(pass.reconstruction, x, &pixel_mask)?;
    let total = tape.add(seg, rec)?;
    Ok(LossVars {
        total,
        seg,
        rec,
        logits: pass.logits,
    })
}

/// Stream id of the mask for image `index` of batch `step`.
fn mask_stream(step: u64, batch_size: usize, index: usize) -> u64 {
    step * batch_size as u64 + index as u64
}

/// One optimizer step over every group on the batch-mean multi-task loss.
pub fn source_step(
    model: &Model,
    batch: &SourceBatch<'_>,
    params: &mut ParamStore,
    optimizer: &mut Optimizer,
    lr: f64,
    seed: u64,
    step: u64,
) -> Result<Losses> {
    let cfg = model.config();
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let scale = 1.0 / batch.len() as f64;

    let mut seg_sum: Option<Var> = None;
    let mut rec_sum: Option<Var> = None;
    let evaluated: Result<()> = (|| {
        for (i, sample) in batch.samples.iter().enumerate() {
            let mask = PatchMask::sample(
                cfg.num_patches(),
                cfg.mask_ratio,
                seed,
                mask_stream(step, batch.len(), i),
            )?;
            let l = multitask_loss(
                model,
                &mut tape,
                &bound,
                &sample.image,
                &sample.labels,
                &mask,
            )?;
            seg_sum = Some(match seg_sum {
                Some(acc) => tape.add(acc, l.seg)?,
                None => l.seg,
            });
            rec_sum = Some(match rec_sum {
                Some(acc) => tape.add(acc, l.rec)?,
                None => l.rec,
            });
        }
        Ok(())
    })();
    let non_finite = |e: Error| {
        if e.is_non_finite() {
            Error::NonFiniteLoss {
                step: step as usize,
            }
        } else {
            e
        }
    };
    evaluated.map_err(non_finite)?;

    let seg = tape
        .scalar_mul(seg_sum.expect("non-empty batch"), scale)
        .map_err(non_finite)?;
    let rec = tape
        .scalar_mul(rec_sum.expect("non-empty batch"), scale)
        .map_err(non_finite)?;
    let total = tape.add(seg, rec).map_err(non_finite)?;
    tape.backward(total).map_err(non_finite)?;
    params.collect_grads(&tape, &bound)?;
    optimizer
        .step(params, GroupSet::all(), lr)
        .map_err(non_finite)?;
    Ok(Losses {
        total: tape.value(total).item()?,
        seg: tape.value(seg).item()?,
        rec: tape.value(rec).item()?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SourceConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Seeds parameter init, shuffling and masks.
    pub seed: u64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        SourceConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: Losses,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainingLog {
    /// CSV with columns `epoch,loss_total,loss_seg,loss_rec`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["epoch", "loss_total", "loss_seg", "loss_rec"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.losses.total.to_string(),
                e.losses.seg.to_string(),
                e.losses.rec.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Result of a source training run.
#[derive(Clone, Debug)]
pub struct SourceRun {
    pub checkpoint: Checkpoint,
    pub log: TrainingLog,
}

impl SourceRun {
    /// Writes `source.ckpt` and `train_log.csv` into `dir`.
    pub fn persist(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.checkpoint.save(&dir.join("source.ckpt"))?;
        self.log.write_csv(&dir.join("train_log.csv"))
    }
}

/// Trains from a fresh initialization for `cfg.epochs` shuffled passes.
pub fn train_source(
    model: &Model,
    dataset: &[SourceSample],
    cfg: &SourceConfig,
) -> Result<SourceRun> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty source dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mut params = model.init_params(cfg.seed);
    let mut optimizer = Optimizer::adam();
    let mut log = TrainingLog::default();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut acc = Losses {
            total: 0.0,
            seg: 0.0,
            rec: 0.0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = SourceBatch::new(chunk.iter().map(|&i| &dataset[i]).collect(), model)?;
            let l = source_step(
                model,
                &batch,
                &mut params,
                &mut optimizer,
                cfg.lr,
                cfg.seed,
                step,
            )?;
            acc.total += l.total;
            acc.seg += l.seg;
            acc.rec += l.rec;
            batches += 1;
            step += 1;
        }
        let n = batches as f64;
        log.epochs.push(EpochLog {
            epoch,
            losses: Losses {
                total: acc.total / n,
                seg: acc.seg / n,
                rec: acc.rec / n,
            },
        });
    }
    Ok(SourceRun {
        checkpoint: Checkpoint::new(model.config().clone(), params),
        log,
    })
}
