//! Shared-trunk, multi-branch embedding network.
//!
//! A multilayer perceptron maps each raw feature vector through a shared
//! trunk and then through K structurally identical (but unshared) branch
//! heads, producing one embedding per branch per input. Hidden layers use
//! rectification; the final branch layer is linear. Forward and backward
//! passes are fully analytic and deterministic, and a finite-difference
//! checker validates any composite loss against the analytic gradients.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::loss::RelationPartition;

const NORM_GUARD: f64 = 1e-12;

/// Structural configuration of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_x: usize,
    /// Hidden widths of the shared trunk; may be empty (identity trunk).
    pub trunk_widths: Vec<usize>,
    /// Hidden widths of each branch head, before the final linear layer.
    pub branch_widths: Vec<usize>,
    /// Embedding dimension.
    pub d_e: usize,
    pub n_branches: usize,
    pub n_viewpoints: usize,
    /// Number of train identities, for the classifier head.
    pub n_classes: usize,
    pub use_ce_head: bool,
    /// Unit-normalize embeddings. Off by default; margins are calibrated for
    /// raw Euclidean distances.
    pub normalize_embeddings: bool,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_x == 0 {
            return Err(Error::config("d_x", "must be positive"));
        }
        if self.d_e == 0 {
            return Err(Error::config("d_e", "must be positive"));
        }
        if self.n_branches == 0 {
            return Err(Error::config("n_branches", "must be at least 1"));
        }
        if !(2..=3).contains(&self.n_viewpoints) {
            return Err(Error::config("n_viewpoints", "must be 2 or 3"));
        }
        if self.trunk_widths.iter().any(|&w| w == 0) || self.branch_widths.iter().any(|&w| w == 0)
        {
            return Err(Error::config("widths", "all layer widths must be >= 1"));
        }
        if self.use_ce_head && self.n_classes < 2 {
            return Err(Error::config(
                "n_classes",
                "must be >= 2 when the classifier head is enabled",
            ));
        }
        Ok(())
    }

    fn trunk_output_dim(&self) -> usize {
        *self.trunk_widths.last().unwrap_or(&self.d_x)
    }
}

/// One affine layer, `y = x·W^T + b`, with `W` stored out×in.
#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Affine {
    fn zeros(in_dim: usize, out_dim: usize) -> Affine {
        Affine {
            w: Matrix::zeros(out_dim, in_dim),
            b: vec![0.0; out_dim],
        }
    }

    fn out_dim(&self) -> usize {
        self.w.rows()
    }

    fn in_dim(&self) -> usize {
        self.w.cols()
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.mul_transposed(&self.w);
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        out
    }
}

/// The embedding network: trunk, K branch heads, optional per-branch
/// classifier heads, and the relation partition that assigns viewpoint
/// relations to branches.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingModel {
    pub config: ModelConfig,
    pub partition: RelationPartition,
    pub trunk: Vec<Affine>,
    pub branches: Vec<Vec<Affine>>,
    /// One affine d_e → n_classes head per branch; empty when disabled.
    pub ce_heads: Vec<Affine>,
}

/// Per-layer pre-activations and activations for one batch.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Matrix,
    pub trunk_pre: Vec<Matrix>,
    pub trunk_act: Vec<Matrix>,
    /// Pre-activations per branch layer; the last entry is the raw (linear)
    /// embedding output.
    pub branch_pre: Vec<Vec<Matrix>>,
    /// Rectified activations of the branch hidden layers.
    pub branch_act: Vec<Vec<Matrix>>,
    /// Row norms of the raw embeddings, when normalization is enabled.
    pub norms: Option<Vec<Vec<f64>>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// All values whose sign determines a rectifier (or normalization)
    /// regime. A finite-difference probe must not cross any of these kinks.
    pub fn kink_signature(&self) -> Vec<f64> {
        let mut sig = Vec::new();
        for m in &self.trunk_pre {
            sig.extend_from_slice(m.data());
        }
        for branch in &self.branch_pre {
            // The final layer is linear; only hidden pre-activations feed a
            // rectifier.
            for m in branch.iter().take(branch.len().saturating_sub(1)) {
                sig.extend_from_slice(m.data());
            }
        }
        if let Some(norms) = &self.norms {
            for per_branch in norms {
                sig.extend_from_slice(per_branch);
            }
        }
        sig
    }

    fn trunk_output(&self) -> &Matrix {
        self.trunk_act.last().unwrap_or(&self.input)
    }
}

/// Embeddings (and optional classifier logits) for a batch, one matrix per
/// branch.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchEmbeddings {
    /// K matrices of shape N×d_e.
    pub embeddings: Vec<Matrix>,
    /// K matrices of shape N×n_classes when the classifier head is enabled.
    pub logits: Option<Vec<Matrix>>,
}

impl BranchEmbeddings {
    pub fn n_branches(&self) -> usize {
        self.embeddings.len()
    }

    pub fn batch_size(&self) -> usize {
        self.embeddings.first().map_or(0, Matrix::rows)
    }
}

/// Parameter gradients, mirroring the model structure.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub trunk: Vec<Affine>,
    pub branches: Vec<Vec<Affine>>,
    pub ce_heads: Vec<Affine>,
}

impl Gradients {
    fn zeros_like(model: &EmbeddingModel) -> Gradients {
        let zero = |layers: &[Affine]| -> Vec<Affine> {
            layers
                .iter()
                .map(|l| Affine::zeros(l.in_dim(), l.out_dim()))
                .collect()
        };
        Gradients {
            trunk: zero(&model.trunk),
            branches: model.branches.iter().map(|b| zero(b)).collect(),
            ce_heads: zero(&model.ce_heads),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.trunk
            .iter()
            .chain(self.branches.iter().flatten())
            .chain(self.ce_heads.iter())
    }

    /// Flat gradient values in canonical parameter order.
    pub fn values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.layers()
            .all(|l| l.w.is_finite() && l.b.iter().all(|v| v.is_finite()))
    }
}

impl EmbeddingModel {
    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.trunk
            .iter()
            .chain(self.branches.iter().flatten())
            .chain(self.ce_heads.iter())
    }

    pub fn n_params(&self) -> usize {
        self.layers()
            .map(|l| l.w.data().len() + l.b.len())
            .sum()
    }

    /// Flat parameter values in canonical order: trunk layers, branch heads
    /// in index order, classifier heads; within a layer, row-major weights
    /// then bias.
    pub fn param_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in self.layers() {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_param_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "parameter vector".into(),
                expected: self.n_params(),
                found: values.len(),
            });
        }
        let mut i = 0;
        self.for_each_param_mut(|p| {
            *p = values[i];
            i += 1;
        });
        Ok(())
    }

    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        let mut visit = |layer: &mut Affine| {
            for v in layer.w.data_mut() {
                f(v);
            }
            for v in &mut layer.b {
                f(v);
            }
        };
        for layer in &mut self.trunk {
            visit(layer);
        }
        for branch in &mut self.branches {
            for layer in branch {
                visit(layer);
            }
        }
        for layer in &mut self.ce_heads {
            visit(layer);
        }
    }

    fn layer_dims(cfg: &ModelConfig) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
        let mut trunk = Vec::new();
        let mut prev = cfg.d_x;
        for &w in &cfg.trunk_widths {
            trunk.push((prev, w));
            prev = w;
        }
        let mut branch = Vec::new();
        let mut prev = cfg.trunk_output_dim();
        for &w in &cfg.branch_widths {
            branch.push((prev, w));
            prev = w;
        }
        branch.push((prev, cfg.d_e));
        (trunk, branch)
    }
}

/// Build a model with seeded scaled-uniform weights (scale
/// `sqrt(6/(fan_in+fan_out))`) and zero biases.
pub fn init_model(cfg: &ModelConfig) -> Result<EmbeddingModel> {
    cfg.validate()?;
    let partition = RelationPartition::for_branch_count(cfg.n_viewpoints, cfg.n_branches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
    let mut init_layer = |in_dim: usize, out_dim: usize| -> Affine {
        let scale = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = Matrix::from_fn(out_dim, in_dim, |_, _| {
            rng.random::<f64>() * 2.0 * scale - scale
        });
        Affine {
            w,
            b: vec![0.0; out_dim],
        }
    };

    let (trunk_dims, branch_dims) = EmbeddingModel::layer_dims(cfg);
    let trunk = trunk_dims
        .iter()
        .map(|&(i, o)| init_layer(i, o))
        .collect();
    let branches = (0..cfg.n_branches)
        .map(|_| branch_dims.iter().map(|&(i, o)| init_layer(i, o)).collect())
        .collect();
    let ce_heads = if cfg.use_ce_head {
        (0..cfg.n_branches)
            .map(|_| init_layer(cfg.d_e, cfg.n_classes))
            .collect()
    } else {
        Vec::new()
    };

    Ok(EmbeddingModel {
        config: cfg.clone(),
        partition,
        trunk,
        branches,
        ce_heads,
    })
}

fn relu(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for v in out.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    out
}

/// Forward pass over a batch. Returns the per-branch embeddings (and logits
/// when the classifier head is enabled) together with the cache needed by
/// [`backward`].
pub fn forward(model: &EmbeddingModel, x: &Matrix) -> Result<(BranchEmbeddings, ForwardCache)> {
    if x.cols() != model.config.d_x {
        return Err(Error::DimensionMismatch {
            context: "forward input".into(),
            expected: model.config.d_x,
            found: x.cols(),
        });
    }
    if !x.is_finite() {
        return Err(Error::non_finite("forward input"));
    }

    let mut trunk_pre = Vec::with_capacity(model.trunk.len());
    let mut trunk_act = Vec::with_capacity(model.trunk.len());
    let mut current = x.clone();
    for layer in &model.trunk {
        let pre = layer.apply(&current);
        let act = relu(&pre);
        trunk_pre.push(pre);
        trunk_act.push(act.clone());
        current = act;
    }
    let trunk_out = current;

    let mut branch_pre = Vec::with_capacity(model.branches.len());
    let mut branch_act = Vec::with_capacity(model.branches.len());
    let mut raw_embeddings = Vec::with_capacity(model.branches.len());
    for branch in &model.branches {
        let mut pres = Vec::with_capacity(branch.len());
        let mut acts = Vec::with_capacity(branch.len().saturating_sub(1));
        let mut h = trunk_out.clone();
        for (m, layer) in branch.iter().enumerate() {
            let pre = layer.apply(&h);
            if m + 1 < branch.len() {
                let act = relu(&pre);
                acts.push(act.clone());
                h = act;
            } else {
                h = pre.clone();
            }
            pres.push(pre);
        }
        raw_embeddings.push(h);
        branch_pre.push(pres);
        branch_act.push(acts);
    }

    let (embeddings, norms) = if model.config.normalize_embeddings {
        let mut normed = Vec::with_capacity(raw_embeddings.len());
        let mut all_norms = Vec::with_capacity(raw_embeddings.len());
        for raw in &raw_embeddings {
            let mut out = raw.clone();
            let mut per_row = Vec::with_capacity(raw.rows());
            for r in 0..raw.rows() {
                let norm = raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                per_row.push(norm);
                let denom = norm.max(NORM_GUARD);
                for v in out.row_mut(r) {
                    *v /= denom;
                }
            }
            normed.push(out);
            all_norms.push(per_row);
        }
        (normed, Some(all_norms))
    } else {
        (raw_embeddings, None)
    };

    let logits = if model.config.use_ce_head {
        Some(
            model
                .ce_heads
                .iter()
                .zip(&embeddings)
                .map(|(head, e)| head.apply(e))
                .collect(),
        )
    } else {
        None
    };

    Ok((
        BranchEmbeddings { embeddings, logits },
        ForwardCache {
            input: x.clone(),
            trunk_pre,
            trunk_act,
            branch_pre,
            branch_act,
            norms,
        },
    ))
}

fn final_embedding(model: &EmbeddingModel, cache: &ForwardCache, branch: usize) -> Matrix {
    let raw = cache.branch_pre[branch]
        .last()
        .expect("branch has at least one layer");
    match &cache.norms {
        None => raw.clone(),
        Some(norms) => {
            let mut out = raw.clone();
            for r in 0..out.rows() {
                let denom = norms[branch][r].max(NORM_GUARD);
                for v in out.row_mut(r) {
                    *v /= denom;
                }
            }
            debug_assert!(model.config.normalize_embeddings);
            out
        }
    }
}

fn validate_cache(model: &EmbeddingModel, cache: &ForwardCache) -> Result<()> {
    let drift = |context: &str, expected: usize, found: usize| -> Result<()> {
        if expected != found {
            Err(Error::DimensionMismatch {
                context: format!("stale cache: {context}"),
                expected,
                found,
            })
        } else {
            Ok(())
        }
    };
    drift("input width", model.config.d_x, cache.input.cols())?;
    drift("trunk depth", model.trunk.len(), cache.trunk_pre.len())?;
    for (layer, pre) in model.trunk.iter().zip(&cache.trunk_pre) {
        drift("trunk layer width", layer.out_dim(), pre.cols())?;
    }
    drift("branch count", model.branches.len(), cache.branch_pre.len())?;
    for (branch, pres) in model.branches.iter().zip(&cache.branch_pre) {
        drift("branch depth", branch.len(), pres.len())?;
        for (layer, pre) in branch.iter().zip(pres) {
            drift("branch layer width", layer.out_dim(), pre.cols())?;
        }
    }
    Ok(())
}

/// Backward pass: gradients of a scalar loss with respect to every
/// parameter, given the loss gradients at the embeddings (and optionally at
/// the classifier logits). Trunk gradients accumulate contributions from all
/// branches; branch-head gradients receive only their own branch's upstream
/// gradient.
pub fn backward(
    model: &EmbeddingModel,
    cache: &ForwardCache,
    grad_embeddings: &[Matrix],
    grad_logits: Option<&[Matrix]>,
) -> Result<Gradients> {
    validate_cache(model, cache)?;
    if grad_embeddings.len() != model.branches.len() {
        return Err(Error::DimensionMismatch {
            context: "grad_embeddings branch count".into(),
            expected: model.branches.len(),
            found: grad_embeddings.len(),
        });
    }
    let n = cache.batch_size();
    for g in grad_embeddings {
        if g.rows() != n || g.cols() != model.config.d_e {
            return Err(Error::DimensionMismatch {
                context: "grad_embeddings shape".into(),
                expected: model.config.d_e,
                found: g.cols(),
            });
        }
    }
    if let Some(gl) = grad_logits {
        if !model.config.use_ce_head {
            return Err(Error::config(
                "grad_logits",
                "model has no classifier head",
            ));
        }
        if gl.len() != model.branches.len() {
            return Err(Error::DimensionMismatch {
                context: "grad_logits branch count".into(),
                expected: model.branches.len(),
                found: gl.len(),
            });
        }
    }

    let mut grads = Gradients::zeros_like(model);
    let trunk_out = cache.trunk_output();
    let mut d_trunk_out = Matrix::zeros(n, trunk_out.cols());

    for (k, branch) in model.branches.iter().enumerate() {
        let mut d_final = grad_embeddings[k].clone();

        if let Some(gl) = grad_logits {
            let e_final = final_embedding(model, cache, k);
            let head = &model.ce_heads[k];
            let g = &gl[k];
            grads.ce_heads[k].w = g.transpose_mul(&e_final);
            for r in 0..n {
                for (acc, v) in grads.ce_heads[k].b.iter_mut().zip(g.row(r)) {
                    *acc += v;
                }
            }
            let extra = g.mul(&head.w);
            for (d, e) in d_final.data_mut().iter_mut().zip(extra.data()) {
                *d += e;
            }
        }

        // Through the optional unit-normalization: with r = |e_raw| and
        // ê = e_raw/r, de_raw = (dê − ê·(ê·dê)) / r.
        let mut d_raw = d_final;
        if let Some(norms) = &cache.norms {
            let raw = cache.branch_pre[k].last().unwrap();
            for r in 0..n {
                let denom = norms[k][r].max(NORM_GUARD);
                let unit: Vec<f64> = raw.row(r).iter().map(|v| v / denom).collect();
                let dot: f64 = unit.iter().zip(d_raw.row(r)).map(|(u, d)| u * d).sum();
                for (d, u) in d_raw.row_mut(r).iter_mut().zip(&unit) {
                    *d = (*d - u * dot) / denom;
                }
            }
        }

        // Walk branch layers top-down; the last layer is linear, hidden
        // layers gate through the rectifier.
        let mut d_pre = d_raw;
        for m in (0..branch.len()).rev() {
            let layer_input: &Matrix = if m == 0 {
                trunk_out
            } else {
                &cache.branch_act[k][m - 1]
            };
            let gw = d_pre.transpose_mul(layer_input);
            let gl = &mut grads.branches[k][m];
            gl.w = gw;
            for r in 0..n {
                for (acc, v) in gl.b.iter_mut().zip(d_pre.row(r)) {
                    *acc += v;
                }
            }
            let d_input = d_pre.mul(&model.branches[k][m].w);
            if m == 0 {
                for (acc, v) in d_trunk_out.data_mut().iter_mut().zip(d_input.data()) {
                    *acc += v;
                }
            } else {
                let pre = &cache.branch_pre[k][m - 1];
                let mut gated = d_input;
                for (g, p) in gated.data_mut().iter_mut().zip(pre.data()) {
                    if *p <= 0.0 {
                        *g = 0.0;
                    }
                }
                d_pre = gated;
            }
        }
    }

    // Trunk: every layer output feeds a rectifier (branches consume the
    // rectified trunk output).
    let mut d_act = d_trunk_out;
    for l in (0..model.trunk.len()).rev() {
        let pre = &cache.trunk_pre[l];
        let mut d_pre = d_act;
        for (g, p) in d_pre.data_mut().iter_mut().zip(pre.data()) {
            if *p <= 0.0 {
                *g = 0.0;
            }
        }
        let layer_input: &Matrix = if l == 0 {
            &cache.input
        } else {
            &cache.trunk_act[l - 1]
        };
        grads.trunk[l].w = d_pre.transpose_mul(layer_input);
        for r in 0..n {
            for (acc, v) in grads.trunk[l].b.iter_mut().zip(d_pre.row(r)) {
                *acc += v;
            }
        }
        d_act = d_pre.mul(&model.trunk[l].w);
    }

    Ok(grads)
}

/// Adam optimizer state: per-parameter first/second moments plus the step
/// counter for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &EmbeddingModel, beta1: f64, beta2: f64, epsilon: f64) -> AdamState {
        AdamState {
            m: vec![0.0; model.n_params()],
            v: vec![0.0; model.n_params()],
            t: 0,
            beta1,
            beta2,
            epsilon,
        }
    }

    /// Default settings: β1 = 0.9, β2 = 0.999, ε = 1e-8.
    pub fn with_defaults(model: &EmbeddingModel) -> AdamState {
        AdamState::new(model, 0.9, 0.999, 1e-8)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One Adam update with bias correction:
/// t←t+1; m←β1·m+(1−β1)·g; v←β2·v+(1−β2)·g²;
/// θ←θ−lr·(m/(1−β1^t))/(√(v/(1−β2^t))+ε).
pub fn adam_step(
    state: &mut AdamState,
    model: &mut EmbeddingModel,
    grads: &Gradients,
    lr: f64,
) -> Result<()> {
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config("lr", "must be finite and positive"));
    }
    if !grads.is_finite() {
        return Err(Error::non_finite("gradient"));
    }
    let g = grads.values();
    if g.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            context: "adam state".into(),
            expected: state.m.len(),
            found: g.len(),
        });
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut i = 0;
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.epsilon);
    let (m, v) = (&mut state.m, &mut state.v);
    model.for_each_param_mut(|p| {
        let gi = g[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
        i += 1;
    });
    Ok(())
}

/// Scalar loss evaluation used by the finite-difference checker. Besides the
/// value it reports where the nearest non-smooth points sit, so probes that
/// would step across a rectifier kink, an activating hinge, or a mining
/// switch can be skipped.
#[derive(Debug, Clone)]
pub struct LossEval {
    pub value: f64,
    /// Signed distances to sign-kinks (rectifier pre-activations, hinge
    /// margins). A sign flip between probe points means a kink was crossed.
    pub kink_signature: Vec<f64>,
    /// Encoded mined-selection indices. A difference between probe points
    /// means the argmax/argmin switched inside the probe interval.
    pub selection_fingerprint: Vec<i64>,
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    pub passed: bool,
}

const KINK_PROXIMITY: f64 = 1e-6;

fn near_kink(base: &LossEval, plus: &LossEval, minus: &LossEval) -> bool {
    let close = |e: &LossEval| e.kink_signature.iter().any(|v| v.abs() < KINK_PROXIMITY);
    if close(base) || close(plus) || close(minus) {
        return true;
    }
    if plus.kink_signature.len() != minus.kink_signature.len() {
        return true;
    }
    let crossed = plus
        .kink_signature
        .iter()
        .zip(&minus.kink_signature)
        .any(|(a, b)| a.signum() != b.signum());
    crossed
        || plus.selection_fingerprint != minus.selection_fingerprint
        || base.selection_fingerprint != plus.selection_fingerprint
}

/// Compare analytic parameter gradients against central finite differences
/// of `loss`. Relative errors use denominators clamped at 1e-8; parameters
/// whose probes sit within 1e-6 of a nonlinearity kink are skipped.
pub fn finite_difference_check<F>(
    model: &EmbeddingModel,
    loss: F,
    analytic: &Gradients,
    step: f64,
    tolerance: f64,
) -> Result<FdReport>
where
    F: Fn(&EmbeddingModel) -> Result<LossEval>,
{
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::config("step", "must be finite and positive"));
    }
    let analytic_values = analytic.values();
    if analytic_values.len() != model.n_params() {
        return Err(Error::DimensionMismatch {
            context: "analytic gradient".into(),
            expected: model.n_params(),
            found: analytic_values.len(),
        });
    }
    let base = loss(model)?;
    let mut probe = model.clone();
    let mut params = probe.param_values();

    let mut max_rel = 0.0f64;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (i, &a) in analytic_values.iter().enumerate() {
        let original = params[i];
        params[i] = original + step;
        probe.set_param_values(&params)?;
        let plus = loss(&probe)?;
        params[i] = original - step;
        probe.set_param_values(&params)?;
        let minus = loss(&probe)?;
        params[i] = original;

        if near_kink(&base, &plus, &minus) {
            skipped += 1;
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * step);
        let denom = numeric.abs().max(a.abs()).max(1e-8);
        let rel = (numeric - a).abs() / denom;
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    probe.set_param_values(&params)?;

    Ok(FdReport {
        max_rel_error: max_rel,
        checked,
        skipped,
        passed: max_rel < tolerance,
    })
}

impl EmbeddingModel {
    /// Serialize to the `#viewmetric-model v1` text format: a config echo
    /// followed by parameters in canonical layer order, row-major, with
    /// shortest round-trip decimals.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let cfg = &self.config;
        let list = |v: &[usize]| {
            v.iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(",")
        };
        writeln!(w, "#viewmetric-model v1")?;
        writeln!(w, "d_x={}", cfg.d_x)?;
        writeln!(w, "trunk_widths={}", list(&cfg.trunk_widths))?;
        writeln!(w, "branch_widths={}", list(&cfg.branch_widths))?;
        writeln!(w, "d_e={}", cfg.d_e)?;
        writeln!(w, "n_branches={}", cfg.n_branches)?;
        writeln!(w, "n_viewpoints={}", cfg.n_viewpoints)?;
        writeln!(w, "n_classes={}", cfg.n_classes)?;
        writeln!(w, "use_ce_head={}", cfg.use_ce_head)?;
        writeln!(w, "normalize_embeddings={}", cfg.normalize_embeddings)?;
        writeln!(w, "init_seed={}", cfg.init_seed)?;
        writeln!(w, "partition={}", self.partition.spec_string())?;
        for layer in self.layers() {
            for r in 0..layer.out_dim() {
                let row: Vec<String> = layer.w.row(r).iter().map(f64::to_string).collect();
                writeln!(w, "{}", row.join(" "))?;
            }
            let bias: Vec<String> = layer.b.iter().map(f64::to_string).collect();
            writeln!(w, "{}", bias.join(" "))?;
        }
        Ok(())
    }

    pub fn to_string_lossless(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(String::from_utf8(buf).expect("checkpoint text is ascii"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    pub fn read(r: &mut impl BufRead) -> Result<EmbeddingModel> {
        let mut lines = r.lines();
        let mut next_line = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::format("model checkpoint truncated"))
        };
        let header = next_line()?;
        if header.trim_end() != "#viewmetric-model v1" {
            return Err(Error::format(format!(
                "unsupported model header {:?}",
                header.trim_end()
            )));
        }
        let mut take = |key: &str| -> Result<String> {
            let line = next_line()?;
            line.strip_prefix(&format!("{key}="))
                .map(str::to_string)
                .ok_or_else(|| Error::format(format!("expected {key}= line, got {line:?}")))
        };
        let parse_usize = |s: &str, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(format!("bad {key} value {s:?}")))
        };
        let parse_list = |s: &str, key: &str| -> Result<Vec<usize>> {
            if s.is_empty() {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|t| {
                    t.parse()
                        .map_err(|_| Error::format(format!("bad {key} entry {t:?}")))
                })
                .collect()
        };
        let parse_bool = |s: &str, key: &str| -> Result<bool> {
            match s {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(Error::format(format!("bad {key} value {s:?}"))),
            }
        };

        let d_x = parse_usize(&take("d_x")?, "d_x")?;
        let trunk_widths = parse_list(&take("trunk_widths")?, "trunk_widths")?;
        let branch_widths = parse_list(&take("branch_widths")?, "branch_widths")?;
        let d_e = parse_usize(&take("d_e")?, "d_e")?;
        let n_branches = parse_usize(&take("n_branches")?, "n_branches")?;
        let n_viewpoints = parse_usize(&take("n_viewpoints")?, "n_viewpoints")?;
        let n_classes = parse_usize(&take("n_classes")?, "n_classes")?;
        let use_ce_head = parse_bool(&take("use_ce_head")?, "use_ce_head")?;
        let normalize_embeddings =
            parse_bool(&take("normalize_embeddings")?, "normalize_embeddings")?;
        let init_seed = take("init_seed")?
            .parse::<u64>()
            .map_err(|_| Error::format("bad init_seed value"))?;
        let partition = RelationPartition::parse(&take("partition")?)?;

        let cfg = ModelConfig {
            d_x,
            trunk_widths,
            branch_widths,
            d_e,
            n_branches,
            n_viewpoints,
            n_classes,
            use_ce_head,
            normalize_embeddings,
            init_seed,
        };
        cfg.validate()?;
        if partition.n_branches() != cfg.n_branches
            || partition.n_viewpoints() != cfg.n_viewpoints
        {
            return Err(Error::format(
                "partition does not match declared branch/viewpoint counts",
            ));
        }

        let (trunk_dims, branch_dims) = EmbeddingModel::layer_dims(&cfg);
        let mut read_layer = |in_dim: usize, out_dim: usize| -> Result<Affine> {
            let mut layer = Affine::zeros(in_dim, out_dim);
            for r in 0..out_dim {
                let line = next_line()?;
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::format("bad parameter value"))?;
                if row.len() != in_dim {
                    return Err(Error::DimensionMismatch {
                        context: "checkpoint weight row".into(),
                        expected: in_dim,
                        found: row.len(),
                    });
                }
                layer.w.row_mut(r).copy_from_slice(&row);
            }
            let line = next_line()?;
            let bias: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("bad bias value"))?;
            if bias.len() != out_dim {
                return Err(Error::DimensionMismatch {
                    context: "checkpoint bias".into(),
                    expected: out_dim,
                    found: bias.len(),
                });
            }
            layer.b = bias;
            Ok(layer)
        };

        let mut trunk = Vec::new();
        for &(i, o) in &trunk_dims {
            trunk.push(read_layer(i, o)?);
        }
        let mut branches = Vec::new();
        for _ in 0..cfg.n_branches {
            let mut layers = Vec::new();
            for &(i, o) in &branch_dims {
                layers.push(read_layer(i, o)?);
            }
            branches.push(layers);
        }
        let mut ce_heads = Vec::new();
        if cfg.use_ce_head {
            for _ in 0..cfg.n_branches {
                ce_heads.push(read_layer(cfg.d_e, cfg.n_classes)?);
            }
        }
        let model = EmbeddingModel {
            config: cfg,
            partition,
            trunk,
            branches,
            ce_heads,
        };
        if model.layers().any(|l| !l.w.is_finite()) {
            return Err(Error::non_finite("checkpoint parameters"));
        }
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<EmbeddingModel> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        EmbeddingModel::read(&mut file)
    }
}
