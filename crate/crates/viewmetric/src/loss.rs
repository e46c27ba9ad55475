//! Relation-masked triplet losses over per-branch distance matrices.
//!
//! Each branch of the embedding model owns a set of viewpoint relations.
//! A batch of N embeddings per branch yields one N×N distance matrix per
//! branch; boolean masks derived from predicted viewpoints select which
//! cells each loss may read. Within-space losses run batch-hard triplet
//! mining inside a branch's own cells; the cross-space loss compares each
//! cross-view branch's hardest positive against the hardest same-view
//! negative measured in the branch owning that relation. Cells outside a
//! loss's mask never contribute — neither to the value nor to the gradient.

use crate::data::Viewpoint;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{
    backward, forward, BranchEmbeddings, EmbeddingModel, Gradients, LossEval,
};

const DISTANCE_GRAD_GUARD: f64 = 1e-12;

/// Assignment of ordered viewpoint relations `(v_i, v_j)` to branches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationPartition {
    n_viewpoints: usize,
    n_branches: usize,
    owner: Vec<usize>,
}

impl RelationPartition {
    /// All relations map to one branch; used by the single-metric baseline.
    pub fn single(n_viewpoints: usize) -> RelationPartition {
        RelationPartition {
            n_viewpoints,
            n_branches: 1,
            owner: vec![0; n_viewpoints * n_viewpoints],
        }
    }

    /// Same-view relations to branch 0 (the S space), cross-view relations
    /// to branch 1 (the D space).
    pub fn canonical(n_viewpoints: usize) -> RelationPartition {
        let mut owner = vec![0; n_viewpoints * n_viewpoints];
        for a in 0..n_viewpoints {
            for b in 0..n_viewpoints {
                owner[a * n_viewpoints + b] = usize::from(a != b);
            }
        }
        RelationPartition {
            n_viewpoints,
            n_branches: 2,
            owner,
        }
    }

    /// The finer-grained partitions used by the branch-granularity sweep.
    ///
    /// For two viewpoints: K=2 is canonical; K=3 splits the same-view cells
    /// per viewpoint and keeps one shared cross branch; K=4 additionally
    /// splits the cross cells by order. For three viewpoints: K=2 is
    /// canonical and K=6 gives each unordered relation its own branch.
    pub fn for_branch_count(n_viewpoints: usize, k: usize) -> Result<RelationPartition> {
        let v = n_viewpoints;
        let assign = |pairs: &[((usize, usize), usize)]| -> RelationPartition {
            let mut owner = vec![usize::MAX; v * v];
            for &((a, b), branch) in pairs {
                owner[a * v + b] = branch;
            }
            debug_assert!(owner.iter().all(|&o| o != usize::MAX));
            RelationPartition {
                n_viewpoints: v,
                n_branches: k,
                owner,
            }
        };
        match (v, k) {
            (_, 1) => Ok(RelationPartition::single(v)),
            (_, 2) => Ok(RelationPartition::canonical(v)),
            (2, 3) => Ok(assign(&[
                ((0, 0), 0),
                ((1, 1), 1),
                ((0, 1), 2),
                ((1, 0), 2),
            ])),
            (2, 4) => Ok(assign(&[
                ((0, 0), 0),
                ((1, 1), 1),
                ((0, 1), 2),
                ((1, 0), 3),
            ])),
            (3, 6) => Ok(assign(&[
                ((0, 0), 0),
                ((1, 1), 1),
                ((2, 2), 2),
                ((0, 1), 3),
                ((1, 0), 3),
                ((0, 2), 4),
                ((2, 0), 4),
                ((1, 2), 5),
                ((2, 1), 5),
            ])),
            _ => Err(Error::config(
                "n_branches",
                format!("no relation partition for {k} branches over {v} viewpoints"),
            )),
        }
    }

    pub fn n_branches(&self) -> usize {
        self.n_branches
    }

    pub fn n_viewpoints(&self) -> usize {
        self.n_viewpoints
    }

    /// Branch owning the ordered relation (a, b).
    pub fn owner_of(&self, a: Viewpoint, b: Viewpoint) -> usize {
        self.owner[a.index() * self.n_viewpoints + b.index()]
    }

    /// True when branch `k` owns only same-view relations.
    pub fn is_same_view_branch(&self, k: usize) -> bool {
        let v = self.n_viewpoints;
        let mut owns_any = false;
        for a in 0..v {
            for b in 0..v {
                if self.owner[a * v + b] == k {
                    if a != b {
                        return false;
                    }
                    owns_any = true;
                }
            }
        }
        owns_any
    }

    pub fn has_same_view_branch(&self) -> bool {
        (0..self.n_branches).any(|k| self.is_same_view_branch(k))
    }

    /// Branches owning cross-view relations; these carry cross-space terms.
    pub fn cross_view_branches(&self) -> Vec<usize> {
        (0..self.n_branches)
            .filter(|&k| {
                let v = self.n_viewpoints;
                (0..v).any(|a| (0..v).any(|b| a != b && self.owner[a * v + b] == k))
            })
            .collect()
    }

    /// Stable text form, e.g. `front-front:0,front-rear:1,...`.
    pub fn spec_string(&self) -> String {
        let set = &Viewpoint::ALL[..self.n_viewpoints];
        let mut parts = Vec::new();
        for a in set {
            for b in set {
                parts.push(format!("{}-{}:{}", a, b, self.owner_of(*a, *b)));
            }
        }
        parts.join(",")
    }

    pub fn parse(text: &str) -> Result<RelationPartition> {
        let mut entries = Vec::new();
        let mut max_vp = 0usize;
        let mut max_branch = 0usize;
        for part in text.split(',') {
            let (pair, branch) = part
                .rsplit_once(':')
                .ok_or_else(|| Error::format(format!("bad partition entry {part:?}")))?;
            let (a, b) = pair
                .split_once('-')
                .ok_or_else(|| Error::format(format!("bad relation {pair:?}")))?;
            let a = Viewpoint::from_name(a)
                .ok_or_else(|| Error::format(format!("unknown viewpoint {a:?}")))?;
            let b = Viewpoint::from_name(b)
                .ok_or_else(|| Error::format(format!("unknown viewpoint {b:?}")))?;
            let branch: usize = branch
                .parse()
                .map_err(|_| Error::format(format!("bad branch index {branch:?}")))?;
            max_vp = max_vp.max(a.index()).max(b.index());
            max_branch = max_branch.max(branch);
            entries.push((a, b, branch));
        }
        let v = max_vp + 1;
        if entries.len() != v * v {
            return Err(Error::format(format!(
                "partition has {} entries, expected {}",
                entries.len(),
                v * v
            )));
        }
        let mut owner = vec![usize::MAX; v * v];
        for (a, b, branch) in entries {
            owner[a.index() * v + b.index()] = branch;
        }
        if owner.iter().any(|&o| o == usize::MAX) {
            return Err(Error::format("partition does not cover all relations"));
        }
        Ok(RelationPartition {
            n_viewpoints: v,
            n_branches: max_branch + 1,
            owner,
        })
    }
}

/// N×N boolean mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SquareMask {
    n: usize,
    data: Vec<bool>,
}

impl SquareMask {
    pub fn new(n: usize) -> SquareMask {
        SquareMask {
            n,
            data: vec![false; n * n],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> bool) -> SquareMask {
        let mut m = SquareMask::new(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = f(i, j);
            }
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.data[i * self.n + j] = value;
    }
}

/// Pairwise Euclidean distances between the rows of `e`, with an exact zero
/// diagonal.
pub fn pairwise_distances(e: &Matrix) -> Result<Matrix> {
    if !e.is_finite() {
        return Err(Error::non_finite("pairwise distance input"));
    }
    let n = e.rows();
    let mut d = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist = crate::linalg::euclidean(e.row(i), e.row(j));
            d[(i, j)] = dist;
            d[(j, i)] = dist;
        }
    }
    Ok(d)
}

/// S-view and D-view masks from predicted viewpoints. The S mask has a true
/// diagonal, the D mask a false one; off-diagonal they partition all cells.
pub fn relation_masks(preds: &[Viewpoint]) -> (SquareMask, SquareMask) {
    let n = preds.len();
    let s = SquareMask::from_fn(n, |i, j| preds[i] == preds[j]);
    let d = SquareMask::from_fn(n, |i, j| i != j && preds[i] != preds[j]);
    (s, d)
}

pub fn id_equal_mask(ids: &[usize]) -> SquareMask {
    SquareMask::from_fn(ids.len(), |i, j| ids[i] == ids[j])
}

/// Per-branch distance matrices plus the relation and identity masks for the
/// canonical two-branch layout (branch 0 = S space, branch 1 = D space).
#[derive(Debug, Clone)]
pub struct DistanceMatrices {
    pub d_s: Matrix,
    pub d_d: Matrix,
    pub s_mask: SquareMask,
    pub d_mask: SquareMask,
    pub id_equal: SquareMask,
}

pub fn build_distance_matrices(
    emb: &BranchEmbeddings,
    preds: &[Viewpoint],
    ids: &[usize],
) -> Result<DistanceMatrices> {
    if emb.n_branches() < 2 {
        return Err(Error::config(
            "embeddings",
            "two-branch distance matrices need at least 2 branches",
        ));
    }
    let n = emb.batch_size();
    if preds.len() != n || ids.len() != n {
        return Err(Error::DimensionMismatch {
            context: "distance matrix labels".into(),
            expected: n,
            found: preds.len().min(ids.len()),
        });
    }
    let (s_mask, d_mask) = relation_masks(preds);
    Ok(DistanceMatrices {
        d_s: pairwise_distances(&emb.embeddings[0])?,
        d_d: pairwise_distances(&emb.embeddings[1])?,
        s_mask,
        d_mask,
        id_equal: id_equal_mask(ids),
    })
}

/// Which loss term a selection was mined for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MinedFor {
    /// Within-space term of the given branch.
    Within(usize),
    /// Cross-space term anchored in the given cross-view branch.
    Cross(usize),
}

/// Batch-hard choice for one anchor. `margin` is the signed pre-hinge value
/// `D(a,p) − D(a,n) + α` (0 when the anchor is invalid); the gaps measure
/// how far the mined choices are from the runner-up candidates.
#[derive(Debug, Clone, Copy)]
pub struct AnchorTriplet {
    pub positive: Option<usize>,
    pub negative: Option<usize>,
    pub margin: f64,
    pub pos_gap: f64,
    pub neg_gap: f64,
}

impl AnchorTriplet {
    pub fn is_valid(&self) -> bool {
        self.positive.is_some() && self.negative.is_some()
    }

    pub fn hinge(&self) -> f64 {
        if self.is_valid() {
            self.margin.max(0.0)
        } else {
            0.0
        }
    }
}

/// Batch-hard selections for every anchor of one loss term.
#[derive(Debug, Clone)]
pub struct TripletSelection {
    pub mined_for: MinedFor,
    pub anchors: Vec<AnchorTriplet>,
    pub valid_count: usize,
}

/// Track an argmax/argmin with lowest-index tie-breaking plus the winner's
/// gap to the runner-up value.
struct Extremum {
    index: Option<usize>,
    best: f64,
    second: f64,
    maximize: bool,
}

impl Extremum {
    fn new(maximize: bool) -> Extremum {
        Extremum {
            index: None,
            best: 0.0,
            second: f64::INFINITY,
            maximize,
        }
    }

    fn offer(&mut self, index: usize, value: f64) {
        let better = match self.index {
            None => true,
            Some(_) => {
                if self.maximize {
                    value > self.best
                } else {
                    value < self.best
                }
            }
        };
        if better {
            if self.index.is_some() {
                self.second = (self.best - value).abs().min(self.second);
            }
            self.best = value;
            self.index = Some(index);
        } else {
            self.second = (self.best - value).abs().min(self.second);
        }
    }

    fn gap(&self) -> f64 {
        self.second
    }
}

fn mine_anchors(
    n: usize,
    pos_value: impl Fn(usize, usize) -> Option<f64>,
    neg_value: impl Fn(usize, usize) -> Option<f64>,
    alpha: f64,
) -> (f64, Vec<AnchorTriplet>, usize) {
    let mut anchors = Vec::with_capacity(n);
    let mut total = 0.0;
    let mut valid = 0usize;
    for a in 0..n {
        let mut hardest_pos = Extremum::new(true);
        let mut hardest_neg = Extremum::new(false);
        for j in 0..n {
            if let Some(v) = pos_value(a, j) {
                hardest_pos.offer(j, v);
            }
            if let Some(v) = neg_value(a, j) {
                hardest_neg.offer(j, v);
            }
        }
        let triplet = match (hardest_pos.index, hardest_neg.index) {
            (Some(_), Some(_)) => {
                let margin = hardest_pos.best - hardest_neg.best + alpha;
                valid += 1;
                total += margin.max(0.0);
                AnchorTriplet {
                    positive: hardest_pos.index,
                    negative: hardest_neg.index,
                    margin,
                    pos_gap: hardest_pos.gap(),
                    neg_gap: hardest_neg.gap(),
                }
            }
            _ => AnchorTriplet {
                positive: hardest_pos.index,
                negative: hardest_neg.index,
                margin: 0.0,
                pos_gap: f64::INFINITY,
                neg_gap: f64::INFINITY,
            },
        };
        anchors.push(triplet);
    }
    let loss = if valid > 0 { total / valid as f64 } else { 0.0 };
    (loss, anchors, valid)
}

/// Batch-hard triplet loss restricted to `mask` cells: per anchor, the
/// farthest masked positive and nearest masked negative, hinged at `alpha`
/// and averaged over valid anchors. Vacuous batches yield zero loss.
pub fn within_space_loss(
    d: &Matrix,
    mask: &SquareMask,
    id_equal: &SquareMask,
    alpha: f64,
) -> (f64, TripletSelection) {
    let n = d.rows();
    let (loss, anchors, valid_count) = mine_anchors(
        n,
        |a, j| (j != a && id_equal.get(a, j) && mask.get(a, j)).then(|| d[(a, j)]),
        |a, j| (!id_equal.get(a, j) && mask.get(a, j)).then(|| d[(a, j)]),
        alpha,
    );
    (
        loss,
        TripletSelection {
            mined_for: MinedFor::Within(0),
            anchors,
            valid_count,
        },
    )
}

/// Cross-space loss: per anchor, the farthest D-view positive measured in
/// the D space against the nearest S-view negative measured in the S space.
/// The converse constraint (D-view negatives vs S-view positives) is not
/// computed.
pub fn cross_space_loss(
    d_d: &Matrix,
    d_s: &Matrix,
    d_mask: &SquareMask,
    s_mask: &SquareMask,
    id_equal: &SquareMask,
    alpha: f64,
) -> (f64, TripletSelection) {
    let n = d_d.rows();
    let (loss, anchors, valid_count) = mine_anchors(
        n,
        |a, j| (j != a && id_equal.get(a, j) && d_mask.get(a, j)).then(|| d_d[(a, j)]),
        |a, j| (!id_equal.get(a, j) && s_mask.get(a, j)).then(|| d_s[(a, j)]),
        alpha,
    );
    (
        loss,
        TripletSelection {
            mined_for: MinedFor::Cross(1),
            anchors,
            valid_count,
        },
    )
}

/// Mean softmax cross-entropy of per-branch logits against identity labels,
/// averaged over samples and branches. Uses max-subtraction stabilization.
pub fn id_cross_entropy(logits: &[Matrix], ids: &[usize]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::config("logits", "no branches"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for branch in logits {
        if branch.rows() != ids.len() {
            return Err(Error::DimensionMismatch {
                context: "cross-entropy labels".into(),
                expected: branch.rows(),
                found: ids.len(),
            });
        }
        for (r, &id) in ids.iter().enumerate() {
            if id >= branch.cols() {
                return Err(Error::config(
                    "ids",
                    format!("label {id} out of range for {} classes", branch.cols()),
                ));
            }
            let row = branch.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let log_sum: f64 = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            total += log_sum - row[id];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Which loss families participate in the total objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossFlags {
    pub within: bool,
    pub cross: bool,
    pub ce: bool,
}

/// Gradients of the total loss with respect to the per-branch embeddings
/// (and logits, when the classifier term is active).
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub embeddings: Vec<Matrix>,
    pub logits: Option<Vec<Matrix>>,
}

/// Values of every loss term plus the mined selections behind them.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub l_s: f64,
    pub l_d: f64,
    pub l_cross: f64,
    pub l_ce: f64,
    pub l_total: f64,
    pub valid_s: usize,
    pub valid_d: usize,
    pub valid_cross: usize,
    pub selections: Vec<TripletSelection>,
    /// Smallest |pre-hinge margin| over valid anchors; infinity when none.
    pub min_hinge_margin: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_s, self.l_d, self.l_cross, self.l_ce, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn add_distance_gradient(
    grad: &mut Matrix,
    e: &Matrix,
    i: usize,
    j: usize,
    distance: f64,
    coeff: f64,
) {
    let denom = distance.max(DISTANCE_GRAD_GUARD);
    for c in 0..e.cols() {
        let u = (e[(i, c)] - e[(j, c)]) / denom * coeff;
        grad[(i, c)] += u;
        grad[(j, c)] -= u;
    }
}

/// Compose all enabled loss terms over a batch and return the report
/// together with analytic gradients with respect to every branch's
/// embeddings (and logits). Disabled terms contribute exactly zero to both.
pub fn total_loss(
    emb: &BranchEmbeddings,
    preds: &[Viewpoint],
    ids: &[usize],
    partition: &RelationPartition,
    alpha: f64,
    lambda_ce: f64,
    flags: &LossFlags,
) -> Result<(LossReport, LossGradients)> {
    if !(flags.within || flags.cross || flags.ce) {
        return Err(Error::config("flags", "at least one loss term must be enabled"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config("alpha", "margin must be finite and positive"));
    }
    if !(lambda_ce.is_finite() && lambda_ce >= 0.0) {
        return Err(Error::config("lambda_ce", "must be finite and non-negative"));
    }
    let k_branches = emb.n_branches();
    if partition.n_branches() != k_branches {
        return Err(Error::DimensionMismatch {
            context: "partition branches".into(),
            expected: k_branches,
            found: partition.n_branches(),
        });
    }
    let n = emb.batch_size();
    if preds.len() != n || ids.len() != n {
        return Err(Error::DimensionMismatch {
            context: "batch labels".into(),
            expected: n,
            found: preds.len().min(ids.len()),
        });
    }

    let dists: Vec<Matrix> = emb
        .embeddings
        .iter()
        .map(pairwise_distances)
        .collect::<Result<_>>()?;
    let id_equal = id_equal_mask(ids);
    let owner = |i: usize, j: usize| partition.owner_of(preds[i], preds[j]);
    let branch_masks: Vec<SquareMask> = (0..k_branches)
        .map(|k| SquareMask::from_fn(n, |i, j| owner(i, j) == k))
        .collect();
    let same_view = SquareMask::from_fn(n, |i, j| preds[i] == preds[j]);

    let mut grads: Vec<Matrix> = emb
        .embeddings
        .iter()
        .map(|e| Matrix::zeros(e.rows(), e.cols()))
        .collect();
    let mut report = LossReport {
        l_s: 0.0,
        l_d: 0.0,
        l_cross: 0.0,
        l_ce: 0.0,
        l_total: 0.0,
        valid_s: 0,
        valid_d: 0,
        valid_cross: 0,
        selections: Vec::new(),
        min_hinge_margin: f64::INFINITY,
    };

    if flags.within {
        for k in 0..k_branches {
            let (loss, mut selection) =
                within_space_loss(&dists[k], &branch_masks[k], &id_equal, alpha);
            selection.mined_for = MinedFor::Within(k);
            // The baseline's single all-pairs term is reported under L_s;
            // otherwise same-view branches feed L_s and cross-view ones L_d.
            if k_branches == 1 || partition.is_same_view_branch(k) {
                report.l_s += loss;
                report.valid_s += selection.valid_count;
            } else {
                report.l_d += loss;
                report.valid_d += selection.valid_count;
            }
            apply_within_gradient(&mut grads[k], &emb.embeddings[k], &dists[k], &selection);
            track_margins(&mut report.min_hinge_margin, &selection);
            report.selections.push(selection);
        }
    }

    if flags.cross {
        if !partition.has_same_view_branch() {
            return Err(Error::config(
                "flags",
                "cross-space loss requires a branch owning only same-view relations",
            ));
        }
        for k in partition.cross_view_branches() {
            let (loss, anchors, valid_count) = mine_anchors(
                n,
                |a, j| {
                    (j != a && id_equal.get(a, j) && branch_masks[k].get(a, j))
                        .then(|| dists[k][(a, j)])
                },
                |a, j| {
                    (!id_equal.get(a, j) && same_view.get(a, j))
                        .then(|| dists[owner(a, j)][(a, j)])
                },
                alpha,
            );
            let selection = TripletSelection {
                mined_for: MinedFor::Cross(k),
                anchors,
                valid_count,
            };
            report.l_cross += loss;
            report.valid_cross += selection.valid_count;
            // Positive distances live in branch k; each negative lives in
            // the same-view branch owning its relation.
            if selection.valid_count > 0 {
                let scale = 1.0 / selection.valid_count as f64;
                for (a, t) in selection.anchors.iter().enumerate() {
                    if !t.is_valid() || t.margin <= 0.0 {
                        continue;
                    }
                    let p = t.positive.unwrap();
                    let ng = t.negative.unwrap();
                    add_distance_gradient(
                        &mut grads[k],
                        &emb.embeddings[k],
                        a,
                        p,
                        dists[k][(a, p)],
                        scale,
                    );
                    let g = owner(a, ng);
                    add_distance_gradient(
                        &mut grads[g],
                        &emb.embeddings[g],
                        a,
                        ng,
                        dists[g][(a, ng)],
                        -scale,
                    );
                }
            }
            track_margins(&mut report.min_hinge_margin, &selection);
            report.selections.push(selection);
        }
    }

    let mut grad_logits = None;
    if flags.ce {
        let logits = emb
            .logits
            .as_ref()
            .ok_or_else(|| Error::config("flags", "classifier term enabled but no logits"))?;
        report.l_ce = id_cross_entropy(logits, ids)?;
        let scale = lambda_ce / (n * logits.len()) as f64;
        let mut gl = Vec::with_capacity(logits.len());
        for branch in logits {
            let mut g = Matrix::zeros(branch.rows(), branch.cols());
            for (r, &id) in ids.iter().enumerate() {
                let row = branch.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (c, e) in exps.iter().enumerate() {
                    let p = e / sum;
                    g[(r, c)] = scale * (p - if c == id { 1.0 } else { 0.0 });
                }
            }
            gl.push(g);
        }
        grad_logits = Some(gl);
    }

    report.l_total = report.l_s + report.l_d + report.l_cross + lambda_ce * report.l_ce;
    Ok((
        report,
        LossGradients {
            embeddings: grads,
            logits: grad_logits,
        },
    ))
}

fn apply_within_gradient(
    grad: &mut Matrix,
    e: &Matrix,
    d: &Matrix,
    selection: &TripletSelection,
) {
    if selection.valid_count == 0 {
        return;
    }
    let scale = 1.0 / selection.valid_count as f64;
    for (a, t) in selection.anchors.iter().enumerate() {
        if !t.is_valid() || t.margin <= 0.0 {
            continue;
        }
        let p = t.positive.unwrap();
        let n = t.negative.unwrap();
        add_distance_gradient(grad, e, a, p, d[(a, p)], scale);
        add_distance_gradient(grad, e, a, n, d[(a, n)], -scale);
    }
}

fn track_margins(min_margin: &mut f64, selection: &TripletSelection) {
    for t in &selection.anchors {
        if t.is_valid() {
            *min_margin = min_margin.min(t.margin.abs());
        }
    }
}

/// Forward + total loss + backward in one call: the full training-step
/// gradient with respect to every model parameter.
pub fn training_loss(
    model: &EmbeddingModel,
    x: &Matrix,
    preds: &[Viewpoint],
    ids: &[usize],
    alpha: f64,
    lambda_ce: f64,
    flags: &LossFlags,
) -> Result<(LossReport, Gradients)> {
    let (emb, cache) = forward(model, x)?;
    let (report, loss_grads) = total_loss(
        &emb,
        preds,
        ids,
        &model.partition,
        alpha,
        lambda_ce,
        flags,
    )?;
    let grads = backward(
        model,
        &cache,
        &loss_grads.embeddings,
        loss_grads.logits.as_deref(),
    )?;
    Ok((report, grads))
}

/// Scalar evaluation of the composite loss for finite-difference probing,
/// including the kink information needed to skip non-smooth points.
pub fn training_loss_eval(
    model: &EmbeddingModel,
    x: &Matrix,
    preds: &[Viewpoint],
    ids: &[usize],
    alpha: f64,
    lambda_ce: f64,
    flags: &LossFlags,
) -> Result<LossEval> {
    let (emb, cache) = forward(model, x)?;
    let (report, _) = total_loss(
        &emb,
        preds,
        ids,
        &model.partition,
        alpha,
        lambda_ce,
        flags,
    )?;
    let mut kink_signature = cache.kink_signature();
    let mut selection_fingerprint = Vec::new();
    for sel in &report.selections {
        for t in &sel.anchors {
            if t.is_valid() {
                kink_signature.push(t.margin);
            }
            let enc = |v: Option<usize>| v.map_or(-1, |i| i as i64);
            selection_fingerprint.push(enc(t.positive));
            selection_fingerprint.push(enc(t.negative));
        }
    }
    Ok(LossEval {
        value: report.l_total,
        kink_signature,
        selection_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vp(i: usize) -> Viewpoint {
        Viewpoint::ALL[i]
    }

    #[test]
    fn pairwise_distance_examples() {
        let e = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]);
        let d = pairwise_distances(&e).unwrap();
        assert_eq!(d[(0, 1)], 5.0);
        assert_eq!(d[(1, 0)], 5.0);
        assert_eq!(d[(0, 0)], 0.0);

        let same = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]);
        let d = pairwise_distances(&same).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pairwise_distance_matches_naive_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e = Matrix::from_fn(4, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
        let d = pairwise_distances(&e).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let mut acc = 0.0;
                for c in 0..3 {
                    let diff = e[(i, c)] - e[(j, c)];
                    acc += diff * diff;
                }
                assert!((d[(i, j)] - acc.sqrt()).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn relation_mask_example() {
        let preds = [vp(0), vp(0), vp(1)];
        let (s, d) = relation_masks(&preds);
        assert!(s.get(0, 1));
        assert!(d.get(0, 2) && d.get(1, 2));
        assert!(s.get(0, 0) && !d.get(0, 0));

        let all_front = [vp(0), vp(0), vp(0)];
        let (_, d) = relation_masks(&all_front);
        assert!((0..3).all(|i| (0..3).all(|j| !d.get(i, j))));
    }

    proptest! {
        #[test]
        fn masks_partition_off_diagonal_cells(raw in proptest::collection::vec(0usize..2, 2..10)) {
            let preds: Vec<Viewpoint> = raw.iter().map(|&i| vp(i)).collect();
            let (s, d) = relation_masks(&preds);
            for i in 0..preds.len() {
                for j in 0..preds.len() {
                    if i != j {
                        prop_assert!(s.get(i, j) ^ d.get(i, j));
                    } else {
                        prop_assert!(s.get(i, j) && !d.get(i, j));
                    }
                }
            }
        }
    }

    #[test]
    fn within_loss_hand_examples() {
        // Anchor 0: positive at index 1, negative at index 2.
        let d = Matrix::from_rows(&[
            vec![0.0, 0.3, 0.9],
            vec![0.3, 0.0, 1.0],
            vec![0.9, 1.0, 0.0],
        ]);
        let mask = SquareMask::from_fn(3, |_, _| true);
        let id_equal = SquareMask::from_fn(3, |i, j| (i < 2) == (j < 2));
        let (_, selection) = within_space_loss(&d, &mask, &id_equal, 0.5);
        let t = &selection.anchors[0];
        assert_eq!(t.positive, Some(1));
        assert_eq!(t.negative, Some(2));
        assert_eq!(t.hinge(), 0.0, "0.3 - 0.9 + 0.5 clamps to zero");

        let d = Matrix::from_rows(&[
            vec![0.0, 1.0, 0.6],
            vec![1.0, 0.0, 1.0],
            vec![0.6, 1.0, 0.0],
        ]);
        let (_, selection) = within_space_loss(&d, &mask, &id_equal, 0.5);
        assert!((selection.anchors[0].hinge() - 0.9).abs() < 1e-15);
    }

    #[test]
    fn cross_loss_hand_example() {
        // Anchor 0: D-view positive at 1 with D-space distance 0.8; S-view
        // negative at 2 with S-space distance 0.6.
        let d_d = Matrix::from_rows(&[
            vec![0.0, 0.8, 2.0],
            vec![0.8, 0.0, 2.0],
            vec![2.0, 2.0, 0.0],
        ]);
        let d_s = Matrix::from_rows(&[
            vec![0.0, 2.0, 0.6],
            vec![2.0, 0.0, 2.0],
            vec![0.6, 2.0, 0.0],
        ]);
        let preds = [vp(0), vp(1), vp(0)];
        let (s_mask, d_mask) = relation_masks(&preds);
        let id_equal = SquareMask::from_fn(3, |i, j| (i < 2) == (j < 2));
        let (_, selection) = cross_space_loss(&d_d, &d_s, &d_mask, &s_mask, &id_equal, 0.5);
        let t = &selection.anchors[0];
        assert_eq!(t.positive, Some(1));
        assert_eq!(t.negative, Some(2));
        assert!((t.hinge() - 0.7).abs() < 1e-15);
    }

    #[test]
    fn cross_loss_vacuous_when_single_viewpoint() {
        let d = Matrix::zeros(4, 4);
        let preds = [vp(0); 4];
        let (s_mask, d_mask) = relation_masks(&preds);
        let id_equal = SquareMask::from_fn(4, |i, j| (i < 2) == (j < 2));
        let (loss, selection) = cross_space_loss(&d, &d, &d_mask, &s_mask, &id_equal, 0.5);
        assert_eq!(loss, 0.0);
        assert_eq!(selection.valid_count, 0);
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = vec![Matrix::zeros(2, 4)];
        let ids = [1, 3];
        let loss = id_cross_entropy(&logits, &ids).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        let mut hot = Matrix::zeros(2, 4);
        hot[(0, 1)] = 50.0;
        hot[(1, 3)] = 50.0;
        let loss = id_cross_entropy(&[hot], &ids).unwrap();
        assert!(loss < 1e-15);

        assert!(id_cross_entropy(&[Matrix::zeros(1, 3)], &[5]).is_err());
    }

    #[test]
    fn cross_entropy_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Matrix::from_fn(3, 5, |_, _| rng.random::<f64>() * 6.0 - 3.0);
        let ids = [4usize, 0, 2];
        let got = id_cross_entropy(&[logits.clone()], &ids).unwrap();
        let mut expect = 0.0;
        for (r, &id) in ids.iter().enumerate() {
            let row = logits.row(r);
            let sum: f64 = row.iter().map(|v| v.exp()).sum();
            expect += -(row[id].exp() / sum).ln();
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-10);
    }

    fn random_embeddings(
        n: usize,
        d_e: usize,
        branches: usize,
        rng: &mut ChaCha8Rng,
    ) -> BranchEmbeddings {
        BranchEmbeddings {
            embeddings: (0..branches)
                .map(|_| Matrix::from_fn(n, d_e, |_, _| rng.random::<f64>() * 2.0 - 1.0))
                .collect(),
            logits: None,
        }
    }

    fn round_robin_batch(ids_count: usize, per_id: usize) -> (Vec<usize>, Vec<Viewpoint>) {
        let mut ids = Vec::new();
        let mut preds = Vec::new();
        for id in 0..ids_count {
            for j in 0..per_id {
                ids.push(id);
                preds.push(vp(j % 2));
            }
        }
        (ids, preds)
    }

    #[test]
    fn disabled_terms_contribute_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let emb = random_embeddings(8, 3, 2, &mut rng);
        let (ids, preds) = round_robin_batch(2, 4);
        let partition = RelationPartition::canonical(2);
        let flags = LossFlags {
            within: true,
            cross: false,
            ce: false,
        };
        let (report, grads) =
            total_loss(&emb, &preds, &ids, &partition, 0.5, 1.0, &flags).unwrap();
        assert_eq!(report.l_cross, 0.0);
        assert_eq!(report.l_ce, 0.0);
        assert_eq!(report.l_total, report.l_s + report.l_d);
        assert!(grads.logits.is_none());
        assert!(report
            .selections
            .iter()
            .all(|s| matches!(s.mined_for, MinedFor::Within(_))));
    }

    #[test]
    fn inactive_hinges_give_zero_loss_and_gradient() {
        // Two ids, two samples each; positives coincide, negatives are far.
        let e = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![10.0, 0.0],
            vec![10.0, 0.0],
        ]);
        let emb = BranchEmbeddings {
            embeddings: vec![e.clone(), e],
            logits: None,
        };
        let ids = [0, 0, 1, 1];
        let preds = [vp(0), vp(1), vp(0), vp(1)];
        let partition = RelationPartition::canonical(2);
        let flags = LossFlags {
            within: true,
            cross: true,
            ce: false,
        };
        let (report, grads) =
            total_loss(&emb, &preds, &ids, &partition, 0.5, 1.0, &flags).unwrap();
        assert_eq!(report.l_total, 0.0);
        assert!(grads
            .embeddings
            .iter()
            .all(|g| g.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn canonical_partition_reduces_to_direct_two_branch_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let emb = random_embeddings(12, 4, 2, &mut rng);
        let (ids, preds) = round_robin_batch(3, 4);
        let partition = RelationPartition::canonical(2);
        let flags = LossFlags {
            within: true,
            cross: true,
            ce: false,
        };
        let (report, _) = total_loss(&emb, &preds, &ids, &partition, 0.5, 1.0, &flags).unwrap();

        let dm = build_distance_matrices(&emb, &preds, &ids).unwrap();
        let (l_s, _) = within_space_loss(&dm.d_s, &dm.s_mask, &dm.id_equal, 0.5);
        let (l_d, _) = within_space_loss(&dm.d_d, &dm.d_mask, &dm.id_equal, 0.5);
        let (l_cross, _) =
            cross_space_loss(&dm.d_d, &dm.d_s, &dm.d_mask, &dm.s_mask, &dm.id_equal, 0.5);
        assert_eq!(report.l_s, l_s);
        assert_eq!(report.l_d, l_d);
        assert_eq!(report.l_cross, l_cross);
    }

    #[test]
    fn grey_cells_do_not_affect_any_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        let emb = random_embeddings(10, 3, 2, &mut rng);
        let (ids, preds) = round_robin_batch(5, 2);
        let dm = build_distance_matrices(&emb, &preds, &ids).unwrap();
        let base = (
            within_space_loss(&dm.d_s, &dm.s_mask, &dm.id_equal, 0.5).0,
            within_space_loss(&dm.d_d, &dm.d_mask, &dm.id_equal, 0.5).0,
            cross_space_loss(&dm.d_d, &dm.d_s, &dm.d_mask, &dm.s_mask, &dm.id_equal, 0.5).0,
        );
        // Scramble S-space distances at D-view cells and D-space distances
        // at S-view cells.
        let mut d_s = dm.d_s.clone();
        let mut d_d = dm.d_d.clone();
        for i in 0..10 {
            for j in 0..10 {
                if i != j && dm.d_mask.get(i, j) {
                    d_s[(i, j)] = rng.random::<f64>() * 100.0;
                }
                if i != j && dm.s_mask.get(i, j) {
                    d_d[(i, j)] = rng.random::<f64>() * 100.0;
                }
            }
        }
        let after = (
            within_space_loss(&d_s, &dm.s_mask, &dm.id_equal, 0.5).0,
            within_space_loss(&d_d, &dm.d_mask, &dm.id_equal, 0.5).0,
            cross_space_loss(&d_d, &d_s, &dm.d_mask, &dm.s_mask, &dm.id_equal, 0.5).0,
        );
        assert_eq!(base, after);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn batch_permutation_preserves_loss_values(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 8;
            let emb = random_embeddings(n, 3, 2, &mut rng);
            let (ids, preds) = round_robin_batch(2, 4);
            let partition = RelationPartition::canonical(2);
            let flags = LossFlags { within: true, cross: true, ce: false };
            let (report, _) = total_loss(&emb, &preds, &ids, &partition, 0.5, 1.0, &flags).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                let j = rng.random_range(0..=i);
                perm.swap(i, j);
            }
            let emb_p = BranchEmbeddings {
                embeddings: emb
                    .embeddings
                    .iter()
                    .map(|e| Matrix::from_fn(n, 3, |r, c| e[(perm[r], c)]))
                    .collect(),
                logits: None,
            };
            let ids_p: Vec<usize> = perm.iter().map(|&r| ids[r]).collect();
            let preds_p: Vec<Viewpoint> = perm.iter().map(|&r| preds[r]).collect();
            let (report_p, _) =
                total_loss(&emb_p, &preds_p, &ids_p, &partition, 0.5, 1.0, &flags).unwrap();
            prop_assert!((report.l_s - report_p.l_s).abs() < 1e-12);
            prop_assert!((report.l_d - report_p.l_d).abs() < 1e-12);
            prop_assert!((report.l_cross - report_p.l_cross).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_spec_string_round_trips() {
        for (v, k) in [(2, 1), (2, 2), (2, 3), (2, 4), (3, 2), (3, 6)] {
            let p = RelationPartition::for_branch_count(v, k).unwrap();
            let parsed = RelationPartition::parse(&p.spec_string()).unwrap();
            assert_eq!(parsed, p, "v={v} k={k}");
        }
        assert!(RelationPartition::for_branch_count(2, 5).is_err());
    }

    #[test]
    fn partition_classifies_branches() {
        let p = RelationPartition::canonical(2);
        assert!(p.is_same_view_branch(0));
        assert!(!p.is_same_view_branch(1));
        assert_eq!(p.cross_view_branches(), vec![1]);

        let p4 = RelationPartition::for_branch_count(2, 4).unwrap();
        assert_eq!(p4.cross_view_branches(), vec![2, 3]);
        assert!(p4.is_same_view_branch(0) && p4.is_same_view_branch(1));
    }
}
