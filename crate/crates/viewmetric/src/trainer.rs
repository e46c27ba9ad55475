//! Training orchestration: identity-balanced batch sampling, the stepped
//! learning-rate schedule, and the loop joining model, loss, and optimizer.

use std::io::Write;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, Viewpoint};
use crate::error::{Error, Result};
use crate::loss::{training_loss, LossFlags, LossReport};
use crate::model::{adam_step, AdamState, EmbeddingModel};
use crate::predictor::PredictionSet;

/// Training objective variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Single branch, no viewpoint masks, plain batch-hard triplet loss.
    Baseline,
    /// Two branches with within-space and cross-space constraints.
    Vanet,
    VanetNoCross,
    VanetNoWithin,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Vanet,
        Variant::VanetNoCross,
        Variant::VanetNoWithin,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Vanet => "vanet",
            Variant::VanetNoCross => "vanet_no_cross",
            Variant::VanetNoWithin => "vanet_no_within",
        }
    }

    pub fn from_name(name: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Number of embedding branches the variant trains.
    pub fn default_branches(self) -> usize {
        match self {
            Variant::Baseline => 1,
            _ => 2,
        }
    }

    pub fn flags(self, use_ce: bool) -> LossFlags {
        match self {
            Variant::Baseline => LossFlags {
                within: true,
                cross: false,
                ce: use_ce,
            },
            Variant::Vanet => LossFlags {
                within: true,
                cross: true,
                ce: use_ce,
            },
            Variant::VanetNoCross => LossFlags {
                within: true,
                cross: false,
                ce: use_ce,
            },
            Variant::VanetNoWithin => LossFlags {
                within: false,
                cross: true,
                ce: use_ce,
            },
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Identities per batch (P).
    pub ids_per_batch: usize,
    /// Images per identity (K).
    pub imgs_per_id: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    /// Epochs at which the decay factor applies; strictly increasing.
    pub lr_decay_epochs: Vec<usize>,
    /// Triplet margin α.
    pub margin: f64,
    pub lambda_ce: f64,
    pub adam_epsilon: f64,
    pub variant: Variant,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            steps_per_epoch: 50,
            ids_per_batch: 8,
            imgs_per_id: 4,
            lr_initial: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![24, 48],
            margin: 0.5,
            lambda_ce: 1.0,
            adam_epsilon: 1e-8,
            variant: Variant::Vanet,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ids_per_batch < 2 {
            return Err(Error::config("ids_per_batch", "must be at least 2"));
        }
        if self.imgs_per_id < 2 {
            return Err(Error::config("imgs_per_id", "must be at least 2"));
        }
        if !(self.lr_initial.is_finite() && self.lr_initial > 0.0) {
            return Err(Error::config("lr_initial", "must be finite and positive"));
        }
        if !(self.lr_decay_factor.is_finite() && self.lr_decay_factor > 0.0) {
            return Err(Error::config("lr_decay_factor", "must be finite and positive"));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::config(
                "lr_decay_epochs",
                "must be strictly increasing",
            ));
        }
        if self.epochs > 0 {
            if let Some(&last) = self.lr_decay_epochs.last() {
                if last >= self.epochs {
                    return Err(Error::config(
                        "lr_decay_epochs",
                        "decay epochs must be smaller than epochs",
                    ));
                }
            }
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::config("margin", "must be finite and positive"));
        }
        if !(self.lambda_ce.is_finite() && self.lambda_ce >= 0.0) {
            return Err(Error::config("lambda_ce", "must be finite and non-negative"));
        }
        if !(self.adam_epsilon.is_finite() && self.adam_epsilon > 0.0) {
            return Err(Error::config("adam_epsilon", "must be finite and positive"));
        }
        Ok(())
    }
}

/// One sampled batch: dataset sample indices with their ids and ground-truth
/// viewpoints.
#[derive(Debug, Clone)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub ids: Vec<usize>,
    pub viewpoints: Vec<Viewpoint>,
}

/// Draw P distinct ids uniformly, then K images per id: without replacement
/// when the id has enough samples, with replacement otherwise.
pub fn sample_batch(
    ds: &Dataset,
    ids_per_batch: usize,
    imgs_per_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let n_ids = ds.n_ids();
    if n_ids < ids_per_batch {
        return Err(Error::config(
            "ids_per_batch",
            format!("dataset has {n_ids} ids, batch needs {ids_per_batch}"),
        ));
    }
    let by_id = ds.indices_by_id();
    let mut order: Vec<usize> = (0..n_ids).collect();
    for i in (1..n_ids).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut indices = Vec::with_capacity(ids_per_batch * imgs_per_id);
    for &id in order.iter().take(ids_per_batch) {
        let pool = &by_id[id];
        if pool.len() >= imgs_per_id {
            let mut picks: Vec<usize> = pool.clone();
            for i in (1..picks.len()).rev() {
                let j = rng.random_range(0..=i);
                picks.swap(i, j);
            }
            indices.extend_from_slice(&picks[..imgs_per_id]);
        } else {
            for _ in 0..imgs_per_id {
                indices.push(pool[rng.random_range(0..pool.len())]);
            }
        }
    }
    let ids = indices.iter().map(|&i| ds.samples[i].id).collect();
    let viewpoints = indices.iter().map(|&i| ds.samples[i].viewpoint).collect();
    Ok(Batch {
        indices,
        ids,
        viewpoints,
    })
}

/// Learning rate at an epoch: the initial rate decayed once per schedule
/// entry that is ≤ the epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::config(
            "epoch",
            format!("epoch {epoch} out of range 0..{}", cfg.epochs),
        ));
    }
    let decays = cfg.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
    Ok(cfg.lr_initial * cfg.lr_decay_factor.powi(decays as i32))
}

/// Per-step loss record in a training run.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub step: usize,
    pub report: LossReport,
}

/// Everything captured during a run: per-step loss reports, the learning
/// rate and wall-clock time per epoch.
#[derive(Debug, Clone, Default)]
pub struct RunHistory {
    pub steps: Vec<StepRecord>,
    pub epoch_lr: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
}

impl RunHistory {
    /// Per-step CSV: `step,L_s,L_d,L_cross,L_ce,L_total,valid_s,valid_d,valid_cross`.
    pub fn write_steps_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "step,L_s,L_d,L_cross,L_ce,L_total,valid_s,valid_d,valid_cross")?;
        for rec in &self.steps {
            let r = &rec.report;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                rec.step, r.l_s, r.l_d, r.l_cross, r.l_ce, r.l_total, r.valid_s, r.valid_d,
                r.valid_cross
            )?;
        }
        Ok(())
    }

    /// Per-epoch summary CSV with mean loss terms. Wall-clock timings stay
    /// in memory; artifacts must be byte-reproducible.
    pub fn write_epochs_csv(&self, w: &mut impl Write, steps_per_epoch: usize) -> Result<()> {
        writeln!(w, "epoch,lr,mean_L_s,mean_L_d,mean_L_cross,mean_L_ce,mean_L_total")?;
        for (epoch, lr) in self.epoch_lr.iter().enumerate() {
            let chunk = &self.steps[epoch * steps_per_epoch..(epoch + 1) * steps_per_epoch];
            let mean = |f: fn(&LossReport) -> f64| -> f64 {
                if chunk.is_empty() {
                    0.0
                } else {
                    chunk.iter().map(|s| f(&s.report)).sum::<f64>() / chunk.len() as f64
                }
            };
            let means = [
                mean(|r| r.l_s),
                mean(|r| r.l_d),
                mean(|r| r.l_cross),
                mean(|r| r.l_ce),
                mean(|r| r.l_total),
            ]
            .map(|v| v.to_string())
            .join(",");
            writeln!(w, "{epoch},{lr},{means}")?;
        }
        Ok(())
    }

    pub fn mean_total_over(&self, range: std::ops::Range<usize>) -> f64 {
        let slice = &self.steps[range];
        if slice.is_empty() {
            return 0.0;
        }
        slice.iter().map(|s| s.report.l_total).sum::<f64>() / slice.len() as f64
    }
}

/// Run the training loop: sample → forward → loss → backward → Adam, for
/// `epochs × steps_per_epoch` steps. Bit-reproducible for a fixed seed on
/// one platform.
pub fn train(
    ds: &Dataset,
    mut model: EmbeddingModel,
    preds: &PredictionSet,
    cfg: &TrainConfig,
) -> Result<(EmbeddingModel, RunHistory)> {
    cfg.validate()?;
    if preds.len() != ds.n_samples() {
        return Err(Error::DimensionMismatch {
            context: "viewpoint predictions".into(),
            expected: ds.n_samples(),
            found: preds.len(),
        });
    }
    match cfg.variant {
        Variant::Baseline => {
            if model.config.n_branches != 1 {
                return Err(Error::config(
                    "variant",
                    "baseline requires a single-branch model",
                ));
            }
        }
        _ => {
            if model.config.n_branches < 2 {
                return Err(Error::config(
                    "variant",
                    "viewpoint-aware variants require at least 2 branches",
                ));
            }
        }
    }
    if model.config.use_ce_head && model.config.n_classes != ds.n_ids() {
        return Err(Error::DimensionMismatch {
            context: "classifier head classes".into(),
            expected: ds.n_ids(),
            found: model.config.n_classes,
        });
    }

    let flags = cfg.variant.flags(model.config.use_ce_head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model, 0.9, 0.999, cfg.adam_epsilon);
    let mut history = RunHistory::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg)?;
        let started = Instant::now();
        for step_in_epoch in 0..cfg.steps_per_epoch {
            let step = epoch * cfg.steps_per_epoch + step_in_epoch;
            let batch = sample_batch(ds, cfg.ids_per_batch, cfg.imgs_per_id, &mut rng)?;
            let x = ds.feature_matrix(&batch.indices);
            let batch_preds: Vec<Viewpoint> =
                batch.indices.iter().map(|&i| preds.labels[i]).collect();
            let (report, grads) = training_loss(
                &model,
                &x,
                &batch_preds,
                &batch.ids,
                cfg.margin,
                cfg.lambda_ce,
                &flags,
            )?;
            if !report.is_finite() {
                return Err(Error::non_finite(format!("loss at step {step}")));
            }
            adam_step(&mut adam, &mut model, &grads, lr)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::non_finite(format!("gradient at step {step}")),
                    other => other,
                })?;
            history.steps.push(StepRecord { step, report });
        }
        history.epoch_lr.push(lr);
        history.epoch_seconds.push(started.elapsed().as_secs_f64());
    }

    Ok((model, history))
}
