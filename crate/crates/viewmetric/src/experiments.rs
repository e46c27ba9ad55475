//! Seeded end-to-end experiments: the four-variant ablation, the
//! viewpoint-prediction-error sweep, and the branch-granularity sweep.
//! Every experiment averages over master-seed-derived replicates and is a
//! pure function of (dataset, config).

use std::io::Write;

use crate::config::{ExperimentConfig, ReplicateSeeds};
use crate::data::{split_by_id, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    distance_histograms, embed_all, evaluate, EvalReport, EvalSpace, HistogramSet, TrialMetrics,
};
use crate::model::{init_model, EmbeddingModel};
use crate::predictor::{
    inject_errors, predict_viewpoints, train_viewpoint_classifier, PredictionSet,
    ViewpointClassifier,
};
use crate::trainer::{train, RunHistory, Variant};

/// Split, classifier, and predictions shared by every variant within one
/// replicate.
#[derive(Debug, Clone)]
pub struct ReplicateContext {
    pub train: Dataset,
    pub test: Dataset,
    pub clf: ViewpointClassifier,
    pub preds_train: PredictionSet,
    pub preds_test: PredictionSet,
    pub seeds: ReplicateSeeds,
}

/// Split the dataset by id and train the viewpoint classifier for one
/// replicate.
pub fn prepare_replicate(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    replicate: usize,
) -> Result<ReplicateContext> {
    let seeds = cfg.seed_plan().replicate(replicate);
    let (train_ds, test_ds) = split_by_id(ds, cfg.test_fraction, seeds.split())?;
    let clf = train_viewpoint_classifier(&train_ds, cfg.vp_epochs, cfg.vp_lr, seeds.vp_classifier())?;
    let preds_train = predict_viewpoints(&clf, &train_ds)?;
    let preds_test = predict_viewpoints(&clf, &test_ds)?;
    Ok(ReplicateContext {
        train: train_ds,
        test: test_ds,
        clf,
        preds_train,
        preds_test,
        seeds,
    })
}

/// Initialize and train one variant on a replicate's train split.
pub fn train_variant(
    ctx: &ReplicateContext,
    cfg: &ExperimentConfig,
    variant: Variant,
    n_branches: usize,
) -> Result<(EmbeddingModel, RunHistory)> {
    let model_cfg = cfg.model_config(n_branches, ctx.train.n_ids(), ctx.seeds.model_init());
    let model = init_model(&model_cfg)?;
    let train_cfg = cfg.train_config(variant, ctx.seeds.trainer());
    train(&ctx.train, model, &ctx.preds_train, &train_cfg)
}

fn eval_with(
    model: &EmbeddingModel,
    ctx: &ReplicateContext,
    cfg: &ExperimentConfig,
    preds_test: &PredictionSet,
) -> Result<(EvalReport, HistogramSet)> {
    let report = evaluate(model, &ctx.test, preds_test, cfg.trials, ctx.seeds.eval_trials())?;
    let emb = embed_all(model, &ctx.test)?;
    let space = EvalSpace {
        embeddings: &emb.embeddings,
        partition: &model.partition,
        preds: &preds_test.labels,
    };
    let histograms = distance_histograms(&space, &ctx.test, cfg.histogram_bins)?;
    Ok((report, histograms))
}

/// One variant's outcome on one replicate.
#[derive(Debug, Clone)]
pub struct ReplicateResult {
    pub replicate: usize,
    pub report: EvalReport,
    pub mean: TrialMetrics,
    pub histograms: HistogramSet,
}

/// One variant's outcomes across all replicates.
#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub replicates: Vec<ReplicateResult>,
}

impl VariantResult {
    fn mean_over_replicates(&self, get: impl Fn(&TrialMetrics) -> Option<f64>) -> Option<f64> {
        let values: Vec<f64> = self.replicates.iter().filter_map(|r| get(&r.mean)).collect();
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    pub fn top1(&self) -> f64 {
        self.mean_over_replicates(|m| Some(m.cmc[0])).unwrap_or(0.0)
    }

    pub fn top1_d(&self) -> Option<f64> {
        self.mean_over_replicates(|m| m.top1_d)
    }

    pub fn mean_metrics(&self) -> TrialMetrics {
        TrialMetrics {
            cmc: [
                self.mean_over_replicates(|m| Some(m.cmc[0])).unwrap_or(0.0),
                self.mean_over_replicates(|m| Some(m.cmc[1])).unwrap_or(0.0),
                self.mean_over_replicates(|m| Some(m.cmc[2])).unwrap_or(0.0),
            ],
            map: self.mean_over_replicates(|m| Some(m.map)).unwrap_or(0.0),
            top1_s: self.mean_over_replicates(|m| m.top1_s),
            top1_d: self.mean_over_replicates(|m| m.top1_d),
            top1_s_star: self.mean_over_replicates(|m| m.top1_s_star),
            top1_d_star: self.mean_over_replicates(|m| m.top1_d_star),
        }
    }

    pub fn mean_overlap(&self) -> f64 {
        self.replicates
            .iter()
            .map(|r| r.histograms.overlap)
            .sum::<f64>()
            / self.replicates.len().max(1) as f64
    }
}

/// The four-variant ablation.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub variants: Vec<VariantResult>,
}

impl AblationOutcome {
    pub fn get(&self, variant: Variant) -> &VariantResult {
        self.variants
            .iter()
            .find(|v| v.variant == variant)
            .expect("all variants present")
    }

    /// Comparison CSV: one row per variant with both the CMC/mAP family and
    /// the viewpoint-related family, averaged over replicates and trials.
    pub fn write_comparison_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "variant,top1,top5,top20,mAP,top1_s,top1_d,top1_s_star,top1_d_star"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for vr in &self.variants {
            let m = vr.mean_metrics();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                vr.variant,
                m.cmc[0],
                m.cmc[1],
                m.cmc[2],
                m.map,
                opt(m.top1_s),
                opt(m.top1_d),
                opt(m.top1_s_star),
                opt(m.top1_d_star)
            )?;
        }
        Ok(())
    }
}

/// Train and evaluate all four variants over the configured replicates.
pub fn run_ablation(ds: &Dataset, cfg: &ExperimentConfig) -> Result<AblationOutcome> {
    let mut variants: Vec<VariantResult> = Variant::ALL
        .iter()
        .map(|&variant| VariantResult {
            variant,
            replicates: Vec::new(),
        })
        .collect();
    for r in 0..cfg.replicates {
        let ctx = prepare_replicate(ds, cfg, r)?;
        for vr in &mut variants {
            let (model, _history) = train_variant(&ctx, cfg, vr.variant, vr.variant.default_branches())?;
            let (report, histograms) = eval_with(&model, &ctx, cfg, &ctx.preds_test)?;
            let mean = report.mean();
            vr.replicates.push(ReplicateResult {
                replicate: r,
                report,
                mean,
                histograms,
            });
        }
    }
    Ok(AblationOutcome { variants })
}

/// Top-1 accuracy of baseline and the viewpoint-aware model as the
/// viewpoint-prediction error rate σ grows.
#[derive(Debug, Clone)]
pub struct SigmaSweepOutcome {
    pub sigmas: Vec<f64>,
    /// Mean top-1 per σ, averaged over replicates.
    pub vanet_top1: Vec<f64>,
    pub baseline_top1: Vec<f64>,
    /// Per replicate, per σ.
    pub vanet_detail: Vec<Vec<f64>>,
    pub baseline_detail: Vec<Vec<f64>>,
}

impl SigmaSweepOutcome {
    /// CSV: `variant,sigma,top1`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "variant,sigma,top1")?;
        for (s, v) in self.sigmas.iter().zip(&self.baseline_top1) {
            writeln!(w, "baseline,{s},{v}")?;
        }
        for (s, v) in self.sigmas.iter().zip(&self.vanet_top1) {
            writeln!(w, "vanet,{s},{v}")?;
        }
        Ok(())
    }
}

/// Train baseline and the two-branch model once per replicate, then
/// evaluate each under predictions degraded to every σ. The models are
/// trained with clean predictions; σ degrades inference only, which gives
/// an exact, isolated error rate.
pub fn run_sigma_sweep(ds: &Dataset, cfg: &ExperimentConfig) -> Result<SigmaSweepOutcome> {
    if cfg.sigmas.is_empty() {
        return Err(Error::config("sigmas", "sweep needs at least one value"));
    }
    let mut vanet_detail = Vec::new();
    let mut baseline_detail = Vec::new();
    for r in 0..cfg.replicates {
        let ctx = prepare_replicate(ds, cfg, r)?;
        let (vanet, _) = train_variant(&ctx, cfg, Variant::Vanet, 2)?;
        let (baseline, _) = train_variant(&ctx, cfg, Variant::Baseline, 1)?;
        let mut vanet_row = Vec::with_capacity(cfg.sigmas.len());
        let mut baseline_row = Vec::with_capacity(cfg.sigmas.len());
        for (si, &sigma) in cfg.sigmas.iter().enumerate() {
            let degraded = inject_errors(
                &ctx.preds_test,
                &ctx.test.viewpoint_set,
                sigma,
                ctx.seeds.sigma_injection(si),
            )?;
            let vanet_report = evaluate(&vanet, &ctx.test, &degraded, cfg.trials, ctx.seeds.eval_trials())?;
            let baseline_report =
                evaluate(&baseline, &ctx.test, &degraded, cfg.trials, ctx.seeds.eval_trials())?;
            vanet_row.push(vanet_report.mean().cmc[0]);
            baseline_row.push(baseline_report.mean().cmc[0]);
        }
        vanet_detail.push(vanet_row);
        baseline_detail.push(baseline_row);
    }
    let mean_over = |detail: &[Vec<f64>]| -> Vec<f64> {
        (0..cfg.sigmas.len())
            .map(|si| detail.iter().map(|row| row[si]).sum::<f64>() / detail.len() as f64)
            .collect()
    };
    Ok(SigmaSweepOutcome {
        sigmas: cfg.sigmas.clone(),
        vanet_top1: mean_over(&vanet_detail),
        baseline_top1: mean_over(&baseline_detail),
        vanet_detail,
        baseline_detail,
    })
}

/// Accuracy as a function of branch count on a fixed dataset.
#[derive(Debug, Clone)]
pub struct BranchSweepOutcome {
    pub branch_counts: Vec<usize>,
    pub top1: Vec<f64>,
    pub top5: Vec<f64>,
}

impl BranchSweepOutcome {
    pub fn top1_for(&self, k: usize) -> Option<f64> {
        self.branch_counts
            .iter()
            .position(|&b| b == k)
            .map(|i| self.top1[i])
    }

    /// CSV: `branches,top1,top5`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "branches,top1,top5")?;
        for (i, k) in self.branch_counts.iter().enumerate() {
            writeln!(w, "{k},{},{}", self.top1[i], self.top5[i])?;
        }
        Ok(())
    }
}

/// Train the viewpoint-aware objective with each branch count on the same
/// dataset and compare accuracy.
pub fn run_branch_sweep(ds: &Dataset, cfg: &ExperimentConfig) -> Result<BranchSweepOutcome> {
    if cfg.branch_counts.is_empty() {
        return Err(Error::config("branch_counts", "sweep needs at least one value"));
    }
    if cfg.branch_counts.iter().any(|&k| k < 2) {
        return Err(Error::config(
            "branch_counts",
            "branch sweep requires at least 2 branches per entry",
        ));
    }
    let mut top1_detail = vec![Vec::new(); cfg.branch_counts.len()];
    let mut top5_detail = vec![Vec::new(); cfg.branch_counts.len()];
    for r in 0..cfg.replicates {
        let ctx = prepare_replicate(ds, cfg, r)?;
        for (ki, &k) in cfg.branch_counts.iter().enumerate() {
            let (model, _) = train_variant(&ctx, cfg, Variant::Vanet, k)?;
            let report = evaluate(&model, &ctx.test, &ctx.preds_test, cfg.trials, ctx.seeds.eval_trials())?;
            let mean = report.mean();
            top1_detail[ki].push(mean.cmc[0]);
            top5_detail[ki].push(mean.cmc[1]);
        }
    }
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        rows.iter()
            .map(|row| row.iter().sum::<f64>() / row.len().max(1) as f64)
            .collect()
    };
    Ok(BranchSweepOutcome {
        branch_counts: cfg.branch_counts.clone(),
        top1: mean(&top1_detail),
        top5: mean(&top5_detail),
    })
}
