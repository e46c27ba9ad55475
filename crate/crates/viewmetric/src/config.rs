//! Experiment configuration: the flat `key = value` config file shared by
//! every CLI command, and the seed plan deriving all per-role seeds from one
//! master seed.

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::{TrainConfig, Variant};

/// Derives every seed used in an experiment from a single master seed by
/// fixed offsets. Replicate `r` shifts the base by `r × 1000`, so replicate
/// 0 matches a plain single run.
#[derive(Debug, Clone, Copy)]
pub struct SeedPlan {
    pub master: u64,
}

impl SeedPlan {
    pub const REPLICATE_STRIDE: u64 = 1000;
    pub const SPLIT_OFFSET: u64 = 1;
    pub const VPCLF_OFFSET: u64 = 2;
    pub const MODEL_INIT_OFFSET: u64 = 3;
    pub const TRAINER_OFFSET: u64 = 4;
    pub const EVAL_OFFSET: u64 = 5;
    pub const SIGMA_OFFSET: u64 = 6;

    pub fn generation(&self) -> u64 {
        self.master
    }

    pub fn replicate(&self, r: usize) -> ReplicateSeeds {
        ReplicateSeeds {
            base: self
                .master
                .wrapping_add(Self::REPLICATE_STRIDE.wrapping_mul(r as u64)),
        }
    }

    /// Human-readable summary for manifests.
    pub fn describe(&self) -> String {
        format!(
            "master={} replicate_stride={} split=+{} vpclf=+{} init=+{} train=+{} eval=+{} sigma=+{}+index",
            self.master,
            Self::REPLICATE_STRIDE,
            Self::SPLIT_OFFSET,
            Self::VPCLF_OFFSET,
            Self::MODEL_INIT_OFFSET,
            Self::TRAINER_OFFSET,
            Self::EVAL_OFFSET,
            Self::SIGMA_OFFSET,
        )
    }
}

/// Seeds for one replicate.
#[derive(Debug, Clone, Copy)]
pub struct ReplicateSeeds {
    pub base: u64,
}

impl ReplicateSeeds {
    pub fn split(&self) -> u64 {
        self.base.wrapping_add(SeedPlan::SPLIT_OFFSET)
    }

    pub fn vp_classifier(&self) -> u64 {
        self.base.wrapping_add(SeedPlan::VPCLF_OFFSET)
    }

    pub fn model_init(&self) -> u64 {
        self.base.wrapping_add(SeedPlan::MODEL_INIT_OFFSET)
    }

    pub fn trainer(&self) -> u64 {
        self.base.wrapping_add(SeedPlan::TRAINER_OFFSET)
    }

    pub fn eval_trials(&self) -> u64 {
        self.base.wrapping_add(SeedPlan::EVAL_OFFSET)
    }

    pub fn sigma_injection(&self, sigma_index: usize) -> u64 {
        self.base
            .wrapping_add(SeedPlan::SIGMA_OFFSET)
            .wrapping_add(sigma_index as u64)
    }
}

/// Full experiment configuration, parsed from the flat config file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // Dataset generation.
    pub n_ids: usize,
    pub imgs_per_id: usize,
    pub d_z: usize,
    pub d_x: usize,
    pub n_viewpoints: usize,
    pub viewpoint_gap: f64,
    pub within_view_noise: f64,
    pub test_fraction: f64,
    // Model shape.
    pub trunk_widths: Vec<usize>,
    pub branch_widths: Vec<usize>,
    pub d_e: usize,
    pub use_ce_head: bool,
    pub normalize_embeddings: bool,
    // Training.
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub ids_per_batch: usize,
    pub imgs_per_batch_id: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub margin: f64,
    pub lambda_ce: f64,
    pub adam_epsilon: f64,
    pub variant: Variant,
    // Viewpoint classifier.
    pub vp_epochs: usize,
    pub vp_lr: f64,
    // Evaluation and sweeps.
    pub trials: usize,
    pub histogram_bins: usize,
    pub sigmas: Vec<f64>,
    pub branch_counts: Vec<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            n_ids: 80,
            imgs_per_id: 4,
            d_z: 8,
            d_x: 32,
            n_viewpoints: 2,
            viewpoint_gap: 6.0,
            within_view_noise: 0.3,
            test_fraction: 0.375,
            trunk_widths: vec![32],
            branch_widths: vec![32],
            d_e: 16,
            use_ce_head: true,
            normalize_embeddings: false,
            epochs: 60,
            steps_per_epoch: 50,
            ids_per_batch: 8,
            imgs_per_batch_id: 4,
            lr_initial: 0.001,
            lr_decay_factor: 0.1,
            lr_decay_epochs: vec![24, 48],
            margin: 0.5,
            lambda_ce: 1.0,
            adam_epsilon: 1e-8,
            variant: Variant::Vanet,
            vp_epochs: 300,
            vp_lr: 0.05,
            trials: 10,
            histogram_bins: 40,
            sigmas: vec![0.0, 0.05, 0.1, 0.2],
            branch_counts: vec![2, 3, 4],
            replicates: 3,
            seed: 42,
        }
    }
}

impl ExperimentConfig {
    /// Parse the flat `key = value` format. `#` starts a comment; unknown
    /// keys are rejected.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(
                    format!("line {}", lineno + 1),
                    format!("expected `key = value`, got {raw:?}"),
                )
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value).map_err(|e| match e {
                Error::Config { field, message } => Error::Config {
                    field: format!("{field} (line {})", lineno + 1),
                    message,
                },
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)?;
        ExperimentConfig::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse::<T>()
                .map_err(|_| Error::config(key, format!("bad value {value:?}")))
        }
        fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
            if value.is_empty() {
                return Ok(Vec::new());
            }
            value
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse::<T>()
                        .map_err(|_| Error::config(key, format!("bad list entry {t:?}")))
                })
                .collect()
        }
        match key {
            "n_ids" => self.n_ids = num(key, value)?,
            "imgs_per_id" => self.imgs_per_id = num(key, value)?,
            "d_z" => self.d_z = num(key, value)?,
            "d_x" => self.d_x = num(key, value)?,
            "n_viewpoints" => self.n_viewpoints = num(key, value)?,
            "viewpoint_gap" => self.viewpoint_gap = num(key, value)?,
            "within_view_noise" => self.within_view_noise = num(key, value)?,
            "test_fraction" => self.test_fraction = num(key, value)?,
            "trunk_widths" => self.trunk_widths = list(key, value)?,
            "branch_widths" => self.branch_widths = list(key, value)?,
            "d_e" => self.d_e = num(key, value)?,
            "use_ce_head" => self.use_ce_head = num(key, value)?,
            "normalize_embeddings" => self.normalize_embeddings = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "steps_per_epoch" => self.steps_per_epoch = num(key, value)?,
            "ids_per_batch" => self.ids_per_batch = num(key, value)?,
            "imgs_per_batch_id" => self.imgs_per_batch_id = num(key, value)?,
            "lr_initial" => self.lr_initial = num(key, value)?,
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "lr_decay_epochs" => self.lr_decay_epochs = list(key, value)?,
            "margin" => self.margin = num(key, value)?,
            "lambda_ce" => self.lambda_ce = num(key, value)?,
            "adam_epsilon" => self.adam_epsilon = num(key, value)?,
            "variant" => {
                self.variant = Variant::from_name(value)
                    .ok_or_else(|| Error::config(key, format!("unknown variant {value:?}")))?;
            }
            "vp_epochs" => self.vp_epochs = num(key, value)?,
            "vp_lr" => self.vp_lr = num(key, value)?,
            "trials" => self.trials = num(key, value)?,
            "histogram_bins" => self.histogram_bins = num(key, value)?,
            "sigmas" => self.sigmas = list(key, value)?,
            "branch_counts" => self.branch_counts = list(key, value)?,
            "replicates" => self.replicates = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(Error::config(key, "unknown configuration key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.train_config(self.variant, 0).validate()?;
        if self.trials == 0 {
            return Err(Error::config("trials", "must be at least 1"));
        }
        if self.replicates == 0 {
            return Err(Error::config("replicates", "must be at least 1"));
        }
        if self.histogram_bins == 0 {
            return Err(Error::config("histogram_bins", "must be at least 1"));
        }
        for s in &self.sigmas {
            if !(0.0..=1.0).contains(s) {
                return Err(Error::config("sigmas", "entries must be in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn seed_plan(&self) -> SeedPlan {
        SeedPlan { master: self.seed }
    }

    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            n_ids: self.n_ids,
            imgs_per_id: self.imgs_per_id,
            d_z: self.d_z,
            d_x: self.d_x,
            n_viewpoints: self.n_viewpoints,
            viewpoint_gap: self.viewpoint_gap,
            within_view_noise: self.within_view_noise,
            seed: self.seed_plan().generation(),
        }
    }

    pub fn model_config(&self, n_branches: usize, n_classes: usize, init_seed: u64) -> ModelConfig {
        ModelConfig {
            d_x: self.d_x,
            trunk_widths: self.trunk_widths.clone(),
            branch_widths: self.branch_widths.clone(),
            d_e: self.d_e,
            n_branches,
            n_viewpoints: self.n_viewpoints,
            n_classes,
            use_ce_head: self.use_ce_head,
            normalize_embeddings: self.normalize_embeddings,
            init_seed,
        }
    }

    pub fn train_config(&self, variant: Variant, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            steps_per_epoch: self.steps_per_epoch,
            ids_per_batch: self.ids_per_batch,
            imgs_per_id: self.imgs_per_batch_id,
            lr_initial: self.lr_initial,
            lr_decay_factor: self.lr_decay_factor,
            lr_decay_epochs: self.lr_decay_epochs.clone(),
            margin: self.margin,
            lambda_ce: self.lambda_ce,
            adam_epsilon: self.adam_epsilon,
            variant,
            seed,
        }
    }

    /// Normalized `key = value` listing of every setting, for manifests and
    /// reproducibility checks.
    pub fn echo(&self) -> String {
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        let flist = |v: &[f64]| {
            v.iter()
                .map(f64::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        [
            format!("n_ids = {}", self.n_ids),
            format!("imgs_per_id = {}", self.imgs_per_id),
            format!("d_z = {}", self.d_z),
            format!("d_x = {}", self.d_x),
            format!("n_viewpoints = {}", self.n_viewpoints),
            format!("viewpoint_gap = {}", self.viewpoint_gap),
            format!("within_view_noise = {}", self.within_view_noise),
            format!("test_fraction = {}", self.test_fraction),
            format!("trunk_widths = {}", list(&self.trunk_widths)),
            format!("branch_widths = {}", list(&self.branch_widths)),
            format!("d_e = {}", self.d_e),
            format!("use_ce_head = {}", self.use_ce_head),
            format!("normalize_embeddings = {}", self.normalize_embeddings),
            format!("epochs = {}", self.epochs),
            format!("steps_per_epoch = {}", self.steps_per_epoch),
            format!("ids_per_batch = {}", self.ids_per_batch),
            format!("imgs_per_batch_id = {}", self.imgs_per_batch_id),
            format!("lr_initial = {}", self.lr_initial),
            format!("lr_decay_factor = {}", self.lr_decay_factor),
            format!("lr_decay_epochs = {}", list(&self.lr_decay_epochs)),
            format!("margin = {}", self.margin),
            format!("lambda_ce = {}", self.lambda_ce),
            format!("adam_epsilon = {}", self.adam_epsilon),
            format!("variant = {}", self.variant),
            format!("vp_epochs = {}", self.vp_epochs),
            format!("vp_lr = {}", self.vp_lr),
            format!("trials = {}", self.trials),
            format!("histogram_bins = {}", self.histogram_bins),
            format!("sigmas = {}", flist(&self.sigmas)),
            format!("branch_counts = {}", list(&self.branch_counts)),
            format!("replicates = {}", self.replicates),
            format!("seed = {}", self.seed),
        ]
        .join("\n")
    }
}
