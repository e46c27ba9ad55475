//! Retrieval evaluation: viewpoint-conditional distances, CMC under the
//! repeated single-true-match protocol, mAP, the viewpoint-related rank-1
//! metrics, and pair-class distance histograms.

use std::io::Write;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, PairClass, Viewpoint};
use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::loss::RelationPartition;
use crate::model::{forward, BranchEmbeddings, EmbeddingModel};
use crate::predictor::{pair_relation, PredictionSet, Relation};

/// CMC ranks reported everywhere.
pub const CMC_RANKS: [usize; 3] = [1, 5, 20];

/// One query/gallery split: every id contributes exactly one gallery sample,
/// all remaining samples are queries.
#[derive(Debug, Clone, PartialEq)]
pub struct GallerySplit {
    pub queries: Vec<usize>,
    pub gallery: Vec<usize>,
    pub seed: u64,
}

/// Build `n_trials` independent seeded splits under the single-true-match
/// rule.
pub fn make_splits(ds: &Dataset, n_trials: usize, seed: u64) -> Result<Vec<GallerySplit>> {
    let by_id = ds.indices_by_id();
    if let Some(id) = by_id.iter().position(|v| v.len() < 2) {
        return Err(Error::config(
            "dataset",
            format!("id {id} has fewer than 2 samples"),
        ));
    }
    let mut splits = Vec::with_capacity(n_trials);
    for trial in 0..n_trials {
        let trial_seed = seed.wrapping_add(trial as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let mut in_gallery = vec![false; ds.n_samples()];
        let mut gallery = Vec::with_capacity(by_id.len());
        for pool in &by_id {
            let pick = pool[rng.random_range(0..pool.len())];
            in_gallery[pick] = true;
            gallery.push(pick);
        }
        let queries = (0..ds.n_samples()).filter(|&i| !in_gallery[i]).collect();
        splits.push(GallerySplit {
            queries,
            gallery,
            seed: trial_seed,
        });
    }
    Ok(splits)
}

/// Deterministic forward pass over a whole dataset.
pub fn embed_all(model: &EmbeddingModel, ds: &Dataset) -> Result<BranchEmbeddings> {
    let x = ds.all_features();
    let (emb, _) = forward(model, &x)?;
    Ok(emb)
}

/// Distance between samples `i` and `j` under the canonical two-space rule:
/// S-view pairs are compared in the S space, D-view pairs in the D space.
pub fn conditional_distance(
    i: usize,
    j: usize,
    preds: &PredictionSet,
    e_s: &Matrix,
    e_d: &Matrix,
) -> f64 {
    match pair_relation(preds.labels[i], preds.labels[j]) {
        Relation::SView => euclidean(e_s.row(i), e_s.row(j)),
        Relation::DView => euclidean(e_d.row(i), e_d.row(j)),
    }
}

/// Embeddings plus the routing information needed to compare any two
/// samples: each ordered pair is measured in the branch owning its
/// predicted relation. A single-branch partition ignores predictions
/// entirely.
#[derive(Debug, Clone, Copy)]
pub struct EvalSpace<'a> {
    pub embeddings: &'a [Matrix],
    pub partition: &'a RelationPartition,
    pub preds: &'a [Viewpoint],
}

impl EvalSpace<'_> {
    pub fn distance(&self, query: usize, gallery: usize) -> f64 {
        let k = self
            .partition
            .owner_of(self.preds[query], self.preds[gallery]);
        euclidean(self.embeddings[k].row(query), self.embeddings[k].row(gallery))
    }
}

/// Metrics of a single trial. Viewpoint-family metrics are absent when no
/// query falls in the family.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialMetrics {
    /// Accuracy at each of [`CMC_RANKS`].
    pub cmc: [f64; 3],
    pub map: f64,
    pub top1_s: Option<f64>,
    pub top1_d: Option<f64>,
    pub top1_s_star: Option<f64>,
    pub top1_d_star: Option<f64>,
}

/// Rank of the true match among candidates ordered by ascending distance,
/// ties broken by the lower gallery position.
fn rank_of(distances: &[f64], true_pos: usize) -> usize {
    let dt = distances[true_pos];
    let mut rank = 1;
    for (j, &d) in distances.iter().enumerate() {
        if j == true_pos {
            continue;
        }
        if d < dt || (d == dt && j < true_pos) {
            rank += 1;
        }
    }
    rank
}

/// Mean average precision over a query×gallery distance matrix. Per query,
/// AP averages precision at the rank of each relevant item; ranking ties
/// break toward the lower gallery index.
pub fn mean_average_precision(distances: &Matrix, relevance: &[Vec<bool>]) -> Result<f64> {
    if distances.rows() != relevance.len() {
        return Err(Error::DimensionMismatch {
            context: "relevance rows".into(),
            expected: distances.rows(),
            found: relevance.len(),
        });
    }
    let g = distances.cols();
    let mut total = 0.0;
    for q in 0..distances.rows() {
        if relevance[q].len() != g {
            return Err(Error::DimensionMismatch {
                context: "relevance columns".into(),
                expected: g,
                found: relevance[q].len(),
            });
        }
        if !relevance[q].iter().any(|&r| r) {
            return Err(Error::config(
                "relevance",
                format!("query {q} has no relevant gallery item"),
            ));
        }
        let mut order: Vec<usize> = (0..g).collect();
        let row = distances.row(q);
        order.sort_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap().then(a.cmp(&b)));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (pos, &j) in order.iter().enumerate() {
            if relevance[q][j] {
                hits += 1;
                ap += hits as f64 / (pos + 1) as f64;
            }
        }
        total += ap / hits as f64;
    }
    Ok(total / distances.rows() as f64)
}

/// Evaluate one split: CMC, mAP, and the viewpoint-related protocol.
///
/// Rankings use predicted viewpoints (through `space`); the query-family
/// partition and the starred-metric gallery filtering use ground-truth
/// viewpoints from the dataset.
pub fn evaluate_trial(space: &EvalSpace, split: &GallerySplit, ds: &Dataset) -> Result<TrialMetrics> {
    let g = split.gallery.len();
    let q_count = split.queries.len();
    if q_count == 0 || g == 0 {
        return Err(Error::config("split", "empty query or gallery set"));
    }

    let mut cmc_hits = [0usize; 3];
    let mut distances = Matrix::zeros(q_count, g);
    let mut relevance = vec![vec![false; g]; q_count];
    let mut s_family = (0usize, 0usize);
    let mut d_family = (0usize, 0usize);
    let mut s_star = (0usize, 0usize);
    let mut d_star = (0usize, 0usize);

    for (qi, &q) in split.queries.iter().enumerate() {
        let mut true_pos = None;
        for (j, &gs) in split.gallery.iter().enumerate() {
            distances[(qi, j)] = space.distance(q, gs);
            if ds.samples[gs].id == ds.samples[q].id {
                relevance[qi][j] = true;
                true_pos = Some(j);
            }
        }
        let true_pos = true_pos.ok_or_else(|| {
            Error::config("split", format!("query {q} has no gallery match"))
        })?;
        let rank = rank_of(distances.row(qi), true_pos);
        for (slot, &r) in CMC_RANKS.iter().enumerate() {
            if rank <= r {
                cmc_hits[slot] += 1;
            }
        }

        // Ground-truth relation between the query and its true match picks
        // the metric family.
        let rel_true = pair_relation(
            ds.samples[q].viewpoint,
            ds.samples[split.gallery[true_pos]].viewpoint,
        );
        let family = match rel_true {
            Relation::SView => &mut s_family,
            Relation::DView => &mut d_family,
        };
        family.0 += 1;
        if rank == 1 {
            family.1 += 1;
        }

        // Starred: drop gallery entries whose ground-truth relation to the
        // query differs from the true match's relation, then re-rank.
        let dt = distances[(qi, true_pos)];
        let mut star_rank = 1;
        for (j, &gs) in split.gallery.iter().enumerate() {
            if j == true_pos {
                continue;
            }
            if pair_relation(ds.samples[q].viewpoint, ds.samples[gs].viewpoint) != rel_true {
                continue;
            }
            let d = distances[(qi, j)];
            if d < dt || (d == dt && j < true_pos) {
                star_rank += 1;
            }
        }
        let star = match rel_true {
            Relation::SView => &mut s_star,
            Relation::DView => &mut d_star,
        };
        star.0 += 1;
        if star_rank == 1 {
            star.1 += 1;
        }
    }

    let rate = |&(n, hit): &(usize, usize)| -> Option<f64> {
        (n > 0).then(|| hit as f64 / n as f64)
    };
    Ok(TrialMetrics {
        cmc: [
            cmc_hits[0] as f64 / q_count as f64,
            cmc_hits[1] as f64 / q_count as f64,
            cmc_hits[2] as f64 / q_count as f64,
        ],
        map: mean_average_precision(&distances, &relevance)?,
        top1_s: rate(&s_family),
        top1_d: rate(&d_family),
        top1_s_star: rate(&s_star),
        top1_d_star: rate(&d_star),
    })
}

/// Per-trial metrics plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub trials: Vec<TrialMetrics>,
}

impl EvalReport {
    /// Mean over trials; optional metrics average the trials where they are
    /// defined.
    pub fn mean(&self) -> TrialMetrics {
        let n = self.trials.len().max(1) as f64;
        let mut cmc = [0.0; 3];
        let mut map = 0.0;
        for t in &self.trials {
            for (acc, v) in cmc.iter_mut().zip(t.cmc) {
                *acc += v;
            }
            map += t.map;
        }
        for v in &mut cmc {
            *v /= n;
        }
        let opt_mean = |get: fn(&TrialMetrics) -> Option<f64>| -> Option<f64> {
            let present: Vec<f64> = self.trials.iter().filter_map(get).collect();
            (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
        };
        TrialMetrics {
            cmc,
            map: map / n,
            top1_s: opt_mean(|t| t.top1_s),
            top1_d: opt_mean(|t| t.top1_d),
            top1_s_star: opt_mean(|t| t.top1_s_star),
            top1_d_star: opt_mean(|t| t.top1_d_star),
        }
    }

    /// CSV export: one row per trial plus an aggregate `mean` row. Absent
    /// metrics render as empty cells.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "trial,top1,top5,top20,mAP,top1_s,top1_d,top1_s_star,top1_d_star"
        )?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let row = |w: &mut dyn Write, label: &str, t: &TrialMetrics| -> Result<()> {
            writeln!(
                w,
                "{label},{},{},{},{},{},{},{},{}",
                t.cmc[0],
                t.cmc[1],
                t.cmc[2],
                t.map,
                opt(t.top1_s),
                opt(t.top1_d),
                opt(t.top1_s_star),
                opt(t.top1_d_star)
            )?;
            Ok(())
        };
        for (i, t) in self.trials.iter().enumerate() {
            row(w, &i.to_string(), t)?;
        }
        row(w, "mean", &self.mean())
    }
}

/// Run the full repeated-trial evaluation of a model on a test set.
pub fn evaluate(
    model: &EmbeddingModel,
    ds_test: &Dataset,
    preds: &PredictionSet,
    n_trials: usize,
    seed: u64,
) -> Result<EvalReport> {
    if preds.len() != ds_test.n_samples() {
        return Err(Error::DimensionMismatch {
            context: "test predictions".into(),
            expected: ds_test.n_samples(),
            found: preds.len(),
        });
    }
    let emb = embed_all(model, ds_test)?;
    let space = EvalSpace {
        embeddings: &emb.embeddings,
        partition: &model.partition,
        preds: &preds.labels,
    };
    let splits = make_splits(ds_test, n_trials, seed)?;
    let trials = splits
        .iter()
        .map(|split| evaluate_trial(&space, split, ds_test))
        .collect::<Result<_>>()?;
    Ok(EvalReport { trials })
}

/// Shared-bin histograms of conditional distances for the four pair
/// classes, plus the overlap coefficient between the D-view-positive and
/// S-view-negative distributions.
#[derive(Debug, Clone)]
pub struct HistogramSet {
    /// `n_bins + 1` edges spanning [0, max distance].
    pub edges: Vec<f64>,
    pub s_pos: Vec<u64>,
    pub s_neg: Vec<u64>,
    pub d_pos: Vec<u64>,
    pub d_neg: Vec<u64>,
    /// Σ_bins min(p, q) over the normalized D-view-pos and S-view-neg
    /// histograms.
    pub overlap: f64,
}

impl HistogramSet {
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "# overlap_d_pos_s_neg = {}", self.overlap)?;
        writeln!(w, "bin_lo,bin_hi,s_pos,s_neg,d_pos,d_neg")?;
        for b in 0..self.s_pos.len() {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                self.edges[b],
                self.edges[b + 1],
                self.s_pos[b],
                self.s_neg[b],
                self.d_pos[b],
                self.d_neg[b]
            )?;
        }
        Ok(())
    }
}

/// Histogram every unordered test pair's conditional distance, classified
/// by ground-truth identity and viewpoint relation.
pub fn distance_histograms(
    space: &EvalSpace,
    ds: &Dataset,
    n_bins: usize,
) -> Result<HistogramSet> {
    if n_bins == 0 {
        return Err(Error::config("n_bins", "must be positive"));
    }
    let n = ds.n_samples();
    let mut pairs: Vec<(PairClass, f64)> = Vec::with_capacity(n * (n - 1) / 2);
    let mut max_d = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &ds.samples[i];
            let b = &ds.samples[j];
            let class = PairClass::classify(a.id == b.id, pair_relation(a.viewpoint, b.viewpoint));
            let d = space.distance(i, j);
            max_d = max_d.max(d);
            pairs.push((class, d));
        }
    }
    for class in PairClass::ALL {
        if !pairs.iter().any(|(c, _)| *c == class) {
            return Err(Error::EmptyPairClass {
                class: class.name().to_string(),
            });
        }
    }

    let width = if max_d > 0.0 {
        max_d / n_bins as f64
    } else {
        1.0
    };
    let edges: Vec<f64> = (0..=n_bins).map(|b| b as f64 * width).collect();
    let mut counts = [
        vec![0u64; n_bins],
        vec![0u64; n_bins],
        vec![0u64; n_bins],
        vec![0u64; n_bins],
    ];
    for (class, d) in &pairs {
        let bin = ((d / width) as usize).min(n_bins - 1);
        let k = PairClass::ALL.iter().position(|c| c == class).unwrap();
        counts[k][bin] += 1;
    }

    let normalize = |c: &[u64]| -> Vec<f64> {
        let total: u64 = c.iter().sum();
        c.iter().map(|&v| v as f64 / total as f64).collect()
    };
    let p = normalize(&counts[2]); // D-view pos
    let q = normalize(&counts[1]); // S-view neg
    let overlap = p.iter().zip(&q).map(|(a, b)| a.min(*b)).sum();

    let [s_pos, s_neg, d_pos, d_neg] = counts;
    Ok(HistogramSet {
        edges,
        s_pos,
        s_neg,
        d_pos,
        d_neg,
        overlap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GenConfig, Sample};
    use proptest::prelude::*;

    fn vp(i: usize) -> Viewpoint {
        Viewpoint::ALL[i]
    }

    fn toy_ds(ids: &[usize], vps: &[usize]) -> Dataset {
        let n_ids = ids.iter().max().unwrap() + 1;
        Dataset {
            samples: ids
                .iter()
                .zip(vps)
                .map(|(&id, &v)| Sample {
                    id,
                    viewpoint: vp(v),
                    x: vec![0.0],
                })
                .collect(),
            d_x: 1,
            viewpoint_set: vec![vp(0), vp(1)],
            seed: 0,
            source_ids: (0..n_ids).collect(),
        }
    }

    #[test]
    fn splits_are_seeded_and_single_match() {
        let ds = generate_dataset(&GenConfig {
            n_ids: 2,
            imgs_per_id: 2,
            d_z: 2,
            d_x: 4,
            n_viewpoints: 2,
            viewpoint_gap: 1.0,
            within_view_noise: 0.1,
            seed: 0,
        })
        .unwrap();
        let splits = make_splits(&ds, 1, 7).unwrap();
        assert_eq!(splits[0].gallery.len(), 2);
        assert_eq!(splits[0].queries.len(), 2);

        let again = make_splits(&ds, 1, 7).unwrap();
        assert_eq!(splits, again);

        let many = make_splits(&ds, 10, 7).unwrap();
        assert_eq!(many.len(), 10);
        assert!(many.iter().any(|s| s.gallery != many[0].gallery));
    }

    #[test]
    fn conditional_distance_routes_by_relation() {
        let e_s = Matrix::from_rows(&[vec![0.0], vec![1.0]]);
        let e_d = Matrix::from_rows(&[vec![0.0], vec![5.0]]);
        let same = PredictionSet {
            labels: vec![vp(0), vp(0)],
            sigma_applied: 0.0,
        };
        assert_eq!(conditional_distance(0, 1, &same, &e_s, &e_d), 1.0);
        let diff = PredictionSet {
            labels: vec![vp(0), vp(1)],
            sigma_applied: 0.0,
        };
        assert_eq!(conditional_distance(0, 1, &diff, &e_s, &e_d), 5.0);
        assert_eq!(conditional_distance(0, 0, &diff, &e_s, &e_d), 0.0);
    }

    #[test]
    fn rank_counts_ties_toward_lower_index() {
        assert_eq!(rank_of(&[0.5, 0.2, 0.5], 0), 2);
        assert_eq!(rank_of(&[0.5, 0.2, 0.5], 2), 3);
        assert_eq!(rank_of(&[0.1, 0.2, 0.3], 0), 1);
    }

    #[test]
    fn map_hand_fixtures() {
        // One query; relevant items end up at ranks 1 and 3.
        let d = Matrix::from_rows(&[vec![0.1, 0.2, 0.3]]);
        let rel = vec![vec![true, false, true]];
        let map = mean_average_precision(&d, &rel).unwrap();
        assert!((map - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);

        // All relevant items ranked first.
        let d = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 1.0]]);
        let rel = vec![vec![true, false], vec![true, false]];
        assert_eq!(mean_average_precision(&d, &rel).unwrap(), 1.0);

        // Single relevant item at rank k -> AP = 1/k.
        let d = Matrix::from_rows(&[vec![0.3, 0.1, 0.2, 0.4]]);
        let rel = vec![vec![true, false, false, false]];
        assert!((mean_average_precision(&d, &rel).unwrap() - 1.0 / 3.0).abs() < 1e-12);

        let rel = vec![vec![false, false, false, false]];
        assert!(mean_average_precision(&d, &rel).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn single_relevant_map_equals_mean_reciprocal_rank(
            seed in 0u64..10_000,
            q in 1usize..6,
            g in 2usize..8,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Matrix::from_fn(q, g, |_, _| rng.random::<f64>());
            let truth: Vec<usize> = (0..q).map(|_| rng.random_range(0..g)).collect();
            let rel: Vec<Vec<bool>> = truth
                .iter()
                .map(|&t| (0..g).map(|j| j == t).collect())
                .collect();
            let map = mean_average_precision(&d, &rel).unwrap();
            let mrr: f64 = truth
                .iter()
                .enumerate()
                .map(|(qi, &t)| 1.0 / rank_of(d.row(qi), t) as f64)
                .sum::<f64>() / q as f64;
            prop_assert!((map - mrr).abs() < 1e-12);
        }
    }

    /// Brute-force ranking oracle: sort gallery, find true match position.
    fn oracle_rank(distances: &[f64], true_pos: usize) -> usize {
        let mut order: Vec<usize> = (0..distances.len()).collect();
        order.sort_by(|&a, &b| {
            distances[a]
                .partial_cmp(&distances[b])
                .unwrap()
                .then(a.cmp(&b))
        });
        order.iter().position(|&j| j == true_pos).unwrap() + 1
    }

    #[test]
    fn cmc_matches_hand_enumerated_ranking() {
        // ds: 6 queries against 3 gallery ids in a 1-d embedding space.
        let ids = vec![0, 0, 0, 1, 1, 1, 2, 2, 2];
        let vps = vec![0, 1, 0, 0, 1, 0, 1, 0, 1];
        let ds = toy_ds(&ids, &vps);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let e: Vec<Matrix> = (0..2)
            .map(|_| Matrix::from_fn(9, 2, |_, _| rng.random::<f64>() * 3.0))
            .collect();
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        let split = GallerySplit {
            queries: vec![1, 2, 4, 5, 7, 8],
            gallery: vec![0, 3, 6],
            seed: 0,
        };
        let metrics = evaluate_trial(&space, &split, &ds).unwrap();

        let mut top1_hits = 0;
        for &q in &split.queries {
            let dists: Vec<f64> = split.gallery.iter().map(|&g| space.distance(q, g)).collect();
            let true_pos = split
                .gallery
                .iter()
                .position(|&g| ds.samples[g].id == ds.samples[q].id)
                .unwrap();
            if oracle_rank(&dists, true_pos) == 1 {
                top1_hits += 1;
            }
        }
        assert_eq!(metrics.cmc[0], top1_hits as f64 / 6.0);
        assert!(metrics.cmc[0] <= metrics.cmc[1] && metrics.cmc[1] <= metrics.cmc[2]);
    }

    #[test]
    fn starred_metric_recovers_dview_match_behind_sview_distractor() {
        // Query 0 (front). Gallery: sample 1 = true match (rear, same id),
        // sample 2 = S-view negative closer than the true match.
        let ids = vec![0, 0, 1, 1];
        let vps = vec![0, 1, 0, 0];
        let ds = toy_ds(&ids, &vps);
        let e_s = Matrix::from_rows(&[vec![0.0], vec![9.0], vec![0.4], vec![9.5]]);
        let e_d = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![8.0], vec![9.0]]);
        let e = vec![e_s, e_d];
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        let split = GallerySplit {
            queries: vec![0],
            gallery: vec![1, 2],
            seed: 0,
        };
        // Conditional distances from the query: true match (D relation) at
        // 1.0 in D space, distractor (S relation) at 0.4 in S space.
        let metrics = evaluate_trial(&space, &split, &ds).unwrap();
        assert_eq!(metrics.top1_d, Some(0.0));
        assert_eq!(metrics.top1_d_star, Some(1.0));
        assert_eq!(metrics.top1_s, None);
        assert_eq!(metrics.cmc[0], 0.0);
    }

    #[test]
    fn gallery_of_only_true_matches_scores_one_everywhere() {
        let ids = vec![0, 0, 1, 1];
        let vps = vec![0, 0, 1, 1];
        let ds = toy_ds(&ids, &vps);
        let e = vec![
            Matrix::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]),
            Matrix::from_rows(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]),
        ];
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        let split = GallerySplit {
            queries: vec![1, 3],
            gallery: vec![0, 2],
            seed: 0,
        };
        let m = evaluate_trial(&space, &split, &ds).unwrap();
        assert_eq!(m.cmc[0], 1.0);
        assert_eq!(m.map, 1.0);
        assert_eq!(m.top1_s, Some(1.0));
        assert_eq!(m.top1_s_star, Some(1.0));
        assert_eq!(m.top1_d, None, "single-viewpoint queries: D family absent");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn starred_never_below_unstarred(seed in 0u64..5_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3];
            let vps: Vec<usize> = (0..12).map(|i| i % 2).collect();
            let ds = toy_ds(&ids, &vps);
            let e: Vec<Matrix> = (0..2)
                .map(|_| Matrix::from_fn(12, 3, |_, _| rng.random::<f64>() * 4.0))
                .collect();
            let partition = RelationPartition::canonical(2);
            let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
            let space = EvalSpace { embeddings: &e, partition: &partition, preds: &preds };
            for split in make_splits(&ds, 3, seed).unwrap() {
                let m = evaluate_trial(&space, &split, &ds).unwrap();
                if let (Some(a), Some(b)) = (m.top1_d_star, m.top1_d) {
                    prop_assert!(a >= b);
                }
                if let (Some(a), Some(b)) = (m.top1_s_star, m.top1_s) {
                    prop_assert!(a >= b);
                }
                prop_assert!(m.cmc[0] <= m.cmc[1] && m.cmc[1] <= m.cmc[2]);
            }
        }
    }

    #[test]
    fn histograms_count_pairs_and_measure_overlap() {
        let ids = vec![0, 0, 0, 1, 1];
        let vps = vec![0, 0, 1, 0, 1];
        let ds = toy_ds(&ids, &vps);
        let e = vec![
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![5.0], vec![7.0]]),
            Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![5.0], vec![7.0]]),
        ];
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        let h = distance_histograms(&space, &ds, 4).unwrap();
        let total: u64 = [&h.s_pos, &h.s_neg, &h.d_pos, &h.d_neg]
            .iter()
            .map(|c| c.iter().sum::<u64>())
            .sum();
        assert_eq!(total, 10, "all unordered pairs counted");
        assert!((0.0..=1.0).contains(&h.overlap));

        // Identical distributions give overlap 1: with coincident
        // embeddings every pair lands in bin 0 for every class.
        let zero = vec![Matrix::zeros(5, 1), Matrix::zeros(5, 1)];
        let space = EvalSpace {
            embeddings: &zero,
            partition: &partition,
            preds: &preds,
        };
        let h = distance_histograms(&space, &ds, 4).unwrap();
        assert_eq!(h.overlap, 1.0);
    }

    #[test]
    fn coincident_same_view_positives_land_in_bin_zero() {
        let ids = vec![0, 0, 0, 1, 1];
        let vps = vec![0, 0, 1, 0, 1];
        let ds = toy_ds(&ids, &vps);
        let e = vec![
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![3.0], vec![7.0], vec![9.0]]),
            Matrix::from_rows(&[vec![1.0], vec![1.0], vec![3.0], vec![7.0], vec![9.0]]),
        ];
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        let h = distance_histograms(&space, &ds, 5).unwrap();
        assert!(h.s_pos[0] >= 1, "coincident S-view positive in bin 0");
    }

    #[test]
    fn empty_pair_class_is_named() {
        let ids = vec![0, 0, 1, 1];
        let vps = vec![0, 0, 0, 0];
        let ds = toy_ds(&ids, &vps);
        let e = vec![Matrix::zeros(4, 1), Matrix::zeros(4, 1)];
        let partition = RelationPartition::canonical(2);
        let preds: Vec<Viewpoint> = vps.iter().map(|&v| vp(v)).collect();
        let space = EvalSpace {
            embeddings: &e,
            partition: &partition,
            preds: &preds,
        };
        match distance_histograms(&space, &ds, 4) {
            Err(Error::EmptyPairClass { class }) => assert!(class.starts_with("D-view")),
            other => panic!("expected empty class error, got {other:?}"),
        }
    }
}
