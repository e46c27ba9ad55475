//! Viewpoint classification and the S-view/D-view pair relation.
//!
//! The classifier is a single affine layer trained with softmax
//! cross-entropy; the synthetic features are linearly separable by
//! construction, so nothing heavier is needed. Prediction errors for the
//! sensitivity sweep are injected post hoc by flipping an exact number of
//! labels, which gives a controlled error rate instead of retraining weaker
//! classifiers.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{Dataset, Viewpoint};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// Relation between the viewpoints of a pair: same/similar (S) or
/// different (D).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Relation {
    SView,
    DView,
}

/// S-view iff the two labels are equal; symmetric by construction.
pub fn pair_relation(a: Viewpoint, b: Viewpoint) -> Relation {
    if a == b {
        Relation::SView
    } else {
        Relation::DView
    }
}

/// Affine viewpoint classifier over raw features.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewpointClassifier {
    /// V × d_x weight matrix.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub viewpoint_set: Vec<Viewpoint>,
}

impl ViewpointClassifier {
    pub fn d_x(&self) -> usize {
        self.weights.cols()
    }

    pub fn n_viewpoints(&self) -> usize {
        self.viewpoint_set.len()
    }

    /// Affine scores for one feature vector.
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_viewpoints())
            .map(|v| {
                let row = self.weights.row(v);
                let mut acc = self.bias[v];
                for (w, xi) in row.iter().zip(x) {
                    acc += w * xi;
                }
                acc
            })
            .collect()
    }

    /// Serialize to the `#viewmetric-vpclf v1` text format.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "#viewmetric-vpclf v1")?;
        let names: Vec<&str> = self.viewpoint_set.iter().map(|v| v.name()).collect();
        writeln!(w, "d_x={} viewpoints={}", self.d_x(), names.join(","))?;
        for v in 0..self.n_viewpoints() {
            let row: Vec<String> = self.weights.row(v).iter().map(f64::to_string).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        let bias: Vec<String> = self.bias.iter().map(f64::to_string).collect();
        writeln!(w, "{}", bias.join(" "))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    pub fn read(r: &mut impl BufRead) -> Result<ViewpointClassifier> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format("empty classifier file"))?;
        if header.trim_end() != "#viewmetric-vpclf v1" {
            return Err(Error::format(format!(
                "unsupported classifier header {:?}",
                header.trim_end()
            )));
        }
        let dims = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format("classifier file missing dimensions"))?;
        let mut d_x = None;
        let mut viewpoint_set: Option<Vec<Viewpoint>> = None;
        for field in dims.split_whitespace() {
            if let Some(v) = field.strip_prefix("d_x=") {
                d_x = v.parse::<usize>().ok();
            } else if let Some(list) = field.strip_prefix("viewpoints=") {
                viewpoint_set = list.split(',').map(Viewpoint::from_name).collect();
            }
        }
        let d_x = d_x.ok_or_else(|| Error::format("classifier file missing d_x"))?;
        let viewpoint_set =
            viewpoint_set.ok_or_else(|| Error::format("classifier file has bad viewpoints"))?;
        let n_v = viewpoint_set.len();
        let parse_row = |line: String, want: usize| -> Result<Vec<f64>> {
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format("bad number in classifier file"))?;
            if row.len() != want {
                return Err(Error::DimensionMismatch {
                    context: "classifier row".into(),
                    expected: want,
                    found: row.len(),
                });
            }
            Ok(row)
        };
        let mut weights = Matrix::zeros(n_v, d_x);
        for v in 0..n_v {
            let line = lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::format("classifier file truncated"))?;
            weights.row_mut(v).copy_from_slice(&parse_row(line, d_x)?);
        }
        let bias_line = lines
            .next()
            .transpose()?
            .ok_or_else(|| Error::format("classifier file missing bias"))?;
        let bias = parse_row(bias_line, n_v)?;
        Ok(ViewpointClassifier {
            weights,
            bias,
            viewpoint_set,
        })
    }

    pub fn load(path: &Path) -> Result<ViewpointClassifier> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        ViewpointClassifier::read(&mut file)
    }
}

/// Per-sample predicted viewpoints, aligned with a dataset's sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub labels: Vec<Viewpoint>,
    /// Error rate that was injected into these predictions (0 for raw
    /// classifier output).
    pub sigma_applied: f64,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Fraction of predictions matching the dataset's ground truth.
    pub fn accuracy_against(&self, ds: &Dataset) -> f64 {
        let hits = self
            .labels
            .iter()
            .zip(&ds.samples)
            .filter(|(p, s)| **p == s.viewpoint)
            .count();
        hits as f64 / self.labels.len().max(1) as f64
    }

    /// CSV export: `index,true_viewpoint,predicted_viewpoint`.
    pub fn write_csv(&self, ds: &Dataset, w: &mut impl Write) -> Result<()> {
        writeln!(w, "index,true_viewpoint,predicted_viewpoint")?;
        for (i, (pred, s)) in self.labels.iter().zip(&ds.samples).enumerate() {
            writeln!(w, "{i},{},{}", s.viewpoint, pred)?;
        }
        Ok(())
    }
}

/// Train the affine classifier with full-batch gradient descent on softmax
/// cross-entropy over ground-truth viewpoint labels.
pub fn train_viewpoint_classifier(
    train: &Dataset,
    epochs: usize,
    lr: f64,
    seed: u64,
) -> Result<ViewpointClassifier> {
    if train.n_samples() == 0 {
        return Err(Error::config("train", "dataset is empty"));
    }
    if !(lr.is_finite() && lr > 0.0) {
        return Err(Error::config("lr", "must be finite and positive"));
    }
    let n_v = train.n_viewpoints();
    for vp in &train.viewpoint_set {
        if !train.samples.iter().any(|s| s.viewpoint == *vp) {
            return Err(Error::config(
                "train",
                format!("viewpoint {vp} absent from training data"),
            ));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = StandardNormal;
    let d_x = train.d_x;
    let mut weights = Matrix::from_fn(n_v, d_x, |_, _| {
        let g: f64 = normal.sample(&mut rng);
        g * 0.01
    });
    let mut bias = vec![0.0; n_v];

    let n = train.n_samples() as f64;
    let clf_scores = |weights: &Matrix, bias: &[f64], x: &[f64]| -> Vec<f64> {
        (0..n_v)
            .map(|v| {
                let mut acc = bias[v];
                for (w, xi) in weights.row(v).iter().zip(x) {
                    acc += w * xi;
                }
                acc
            })
            .collect()
    };
    for _ in 0..epochs {
        let mut grad_w = Matrix::zeros(n_v, d_x);
        let mut grad_b = vec![0.0; n_v];
        for s in &train.samples {
            let scores = clf_scores(&weights, &bias, &s.x);
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let truth = s.viewpoint.index();
            for v in 0..n_v {
                let p = exps[v] / sum;
                let delta = p - if v == truth { 1.0 } else { 0.0 };
                grad_b[v] += delta / n;
                let row = grad_w.row_mut(v);
                for (g, xi) in row.iter_mut().zip(&s.x) {
                    *g += delta * xi / n;
                }
            }
        }
        for v in 0..n_v {
            bias[v] -= lr * grad_b[v];
            for (w, g) in weights.row_mut(v).iter_mut().zip(grad_w.row(v)) {
                *w -= lr * g;
            }
        }
    }

    Ok(ViewpointClassifier {
        weights,
        bias,
        viewpoint_set: train.viewpoint_set.clone(),
    })
}

/// Argmax of affine scores per sample; ties break toward the lowest
/// viewpoint index.
pub fn predict_viewpoints(clf: &ViewpointClassifier, ds: &Dataset) -> Result<PredictionSet> {
    if clf.d_x() != ds.d_x {
        return Err(Error::DimensionMismatch {
            context: "viewpoint classifier input".into(),
            expected: clf.d_x(),
            found: ds.d_x,
        });
    }
    if clf.viewpoint_set != ds.viewpoint_set {
        return Err(Error::config(
            "viewpoint_set",
            "classifier and dataset declare different viewpoint sets",
        ));
    }
    let labels = ds
        .samples
        .iter()
        .map(|s| {
            let scores = clf.scores(&s.x);
            let mut best = 0;
            for (v, score) in scores.iter().enumerate() {
                if *score > scores[best] {
                    best = v;
                }
            }
            clf.viewpoint_set[best]
        })
        .collect();
    Ok(PredictionSet {
        labels,
        sigma_applied: 0.0,
    })
}

/// Replace exactly `round(sigma·N)` predictions, chosen uniformly without
/// replacement, by a uniformly random *different* viewpoint from the set.
pub fn inject_errors(
    preds: &PredictionSet,
    viewpoint_set: &[Viewpoint],
    sigma: f64,
    seed: u64,
) -> Result<PredictionSet> {
    if !(0.0..=1.0).contains(&sigma) || !sigma.is_finite() {
        return Err(Error::config("sigma", "must be in [0, 1]"));
    }
    let n = preds.len();
    let k = (sigma * n as f64).round() as usize;
    let mut labels = preds.labels.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut chosen: Vec<usize> = order[..k].to_vec();
    chosen.sort_unstable();
    for idx in chosen {
        let current = labels[idx];
        let alternatives: Vec<Viewpoint> = viewpoint_set
            .iter()
            .copied()
            .filter(|v| *v != current)
            .collect();
        let pick = rng.random_range(0..alternatives.len());
        labels[idx] = alternatives[pick];
    }
    Ok(PredictionSet {
        labels,
        sigma_applied: sigma,
    })
}
