//! Synthetic dataset generation with identity and viewpoint latent structure.
//!
//! Samples are produced by a linear latent-factor model: each identity owns a
//! latent vector `z`, each viewpoint owns a mixing map `M_v` and an offset
//! `b_v`, and every observation is `x = M_v·z + b_v + noise`. Because the
//! mixing maps differ per viewpoint, positive pairs seen from different
//! viewpoints land farther apart in raw feature space than negative pairs
//! seen from the same viewpoint — the confound the rest of the crate is
//! built to study. Generation is a pure function of the config, including
//! its seed.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{euclidean, Matrix};
use crate::predictor::{pair_relation, Relation};

/// A viewpoint label. Datasets declare which of these are in play
/// (`front`/`rear`, optionally `side`), always in this order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Viewpoint {
    Front,
    Rear,
    Side,
}

impl Viewpoint {
    pub const ALL: [Viewpoint; 3] = [Viewpoint::Front, Viewpoint::Rear, Viewpoint::Side];

    pub fn name(self) -> &'static str {
        match self {
            Viewpoint::Front => "front",
            Viewpoint::Rear => "rear",
            Viewpoint::Side => "side",
        }
    }

    pub fn from_name(name: &str) -> Option<Viewpoint> {
        Viewpoint::ALL.into_iter().find(|v| v.name() == name)
    }

    /// Position within the declared viewpoint order; used for tie-breaking.
    pub fn index(self) -> usize {
        match self {
            Viewpoint::Front => 0,
            Viewpoint::Rear => 1,
            Viewpoint::Side => 2,
        }
    }

    /// The first `n` viewpoints in declaration order.
    pub fn set_of(n: usize) -> Result<Vec<Viewpoint>> {
        if !(2..=3).contains(&n) {
            return Err(Error::config("n_viewpoints", "must be 2 or 3"));
        }
        Ok(Viewpoint::ALL[..n].to_vec())
    }
}

impl fmt::Display for Viewpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One observation: a feature vector with its vehicle identity and
/// ground-truth viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub viewpoint: Viewpoint,
    pub x: Vec<f64>,
}

/// An immutable collection of samples with contiguous identities.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub d_x: usize,
    pub viewpoint_set: Vec<Viewpoint>,
    /// Seed the dataset was generated from; 0 when loaded from a file.
    pub seed: u64,
    /// Maps each (re-indexed) id back to the id it had before any split.
    pub source_ids: Vec<usize>,
}

impl Dataset {
    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    pub fn n_ids(&self) -> usize {
        self.source_ids.len()
    }

    pub fn n_viewpoints(&self) -> usize {
        self.viewpoint_set.len()
    }

    /// Sample indices grouped by id, in sample order.
    pub fn indices_by_id(&self) -> Vec<Vec<usize>> {
        let mut by_id = vec![Vec::new(); self.n_ids()];
        for (i, s) in self.samples.iter().enumerate() {
            by_id[s.id].push(i);
        }
        by_id
    }

    pub fn ids(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.id).collect()
    }

    pub fn viewpoints(&self) -> Vec<Viewpoint> {
        self.samples.iter().map(|s| s.viewpoint).collect()
    }

    /// Feature rows for the given sample indices, as an N×d_x matrix.
    pub fn feature_matrix(&self, indices: &[usize]) -> Matrix {
        Matrix::from_fn(indices.len(), self.d_x, |r, c| {
            self.samples[indices[r]].x[c]
        })
    }

    /// Feature rows for every sample in order.
    pub fn all_features(&self) -> Matrix {
        Matrix::from_fn(self.n_samples(), self.d_x, |r, c| self.samples[r].x[c])
    }

    pub fn validate(&self) -> Result<()> {
        let n_ids = self.n_ids();
        let mut counts = vec![0usize; n_ids];
        for (i, s) in self.samples.iter().enumerate() {
            if s.id >= n_ids {
                return Err(Error::format(format!(
                    "sample {i}: id {} outside contiguous range 0..{n_ids}",
                    s.id
                )));
            }
            if s.x.len() != self.d_x {
                return Err(Error::DimensionMismatch {
                    context: format!("sample {i} features"),
                    expected: self.d_x,
                    found: s.x.len(),
                });
            }
            if !s.x.iter().all(|v| v.is_finite()) {
                return Err(Error::non_finite(format!("sample {i} features")));
            }
            if !self.viewpoint_set.contains(&s.viewpoint) {
                return Err(Error::format(format!(
                    "sample {i}: viewpoint {} not in declared set",
                    s.viewpoint
                )));
            }
            counts[s.id] += 1;
        }
        if let Some(id) = counts.iter().position(|&c| c < 2) {
            return Err(Error::format(format!("id {id} has fewer than 2 samples")));
        }
        Ok(())
    }

    /// Serialize to the `#viewmetric-dataset v1` text format.
    pub fn write(&self, w: &mut impl Write) -> Result<()> {
        let names: Vec<&str> = self.viewpoint_set.iter().map(|v| v.name()).collect();
        writeln!(
            w,
            "#viewmetric-dataset v1 d_x={} viewpoints={}",
            self.d_x,
            names.join(",")
        )?;
        for s in &self.samples {
            write!(w, "{},{}", s.id, s.viewpoint)?;
            for v in &s.x {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn to_string_lossless(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        Ok(String::from_utf8(buf).expect("dataset text is ascii"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut file)
    }

    /// Parse the `#viewmetric-dataset v1` text format. Unknown versions are
    /// rejected.
    pub fn read(r: &mut impl BufRead) -> Result<Dataset> {
        let mut header = String::new();
        r.read_line(&mut header)?;
        let header = header.trim_end();
        let rest = header
            .strip_prefix("#viewmetric-dataset ")
            .ok_or_else(|| Error::format("missing #viewmetric-dataset header"))?;
        let mut fields = rest.split_whitespace();
        let version = fields.next().unwrap_or("");
        if version != "v1" {
            return Err(Error::format(format!(
                "unsupported dataset version {version:?}"
            )));
        }
        let mut d_x = None;
        let mut viewpoint_set = None;
        for field in fields {
            if let Some(v) = field.strip_prefix("d_x=") {
                d_x = Some(
                    v.parse::<usize>()
                        .map_err(|_| Error::format(format!("bad d_x value {v:?}")))?,
                );
            } else if let Some(list) = field.strip_prefix("viewpoints=") {
                let mut set = Vec::new();
                for name in list.split(',') {
                    let vp = Viewpoint::from_name(name)
                        .ok_or_else(|| Error::format(format!("unknown viewpoint {name:?}")))?;
                    set.push(vp);
                }
                viewpoint_set = Some(set);
            } else {
                return Err(Error::format(format!("unknown header field {field:?}")));
            }
        }
        let d_x = d_x.ok_or_else(|| Error::format("header missing d_x"))?;
        let viewpoint_set = viewpoint_set.ok_or_else(|| Error::format("header missing viewpoints"))?;

        let mut samples = Vec::new();
        let mut max_id = 0usize;
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let id: usize = parts
                .next()
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| Error::format(format!("line {}: bad id", lineno + 2)))?;
            let viewpoint = parts
                .next()
                .and_then(Viewpoint::from_name)
                .ok_or_else(|| Error::format(format!("line {}: bad viewpoint", lineno + 2)))?;
            let x: Vec<f64> = parts
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(format!("line {}: bad feature value", lineno + 2)))?;
            if x.len() != d_x {
                return Err(Error::DimensionMismatch {
                    context: format!("line {}", lineno + 2),
                    expected: d_x,
                    found: x.len(),
                });
            }
            max_id = max_id.max(id);
            samples.push(Sample { id, viewpoint, x });
        }
        if samples.is_empty() {
            return Err(Error::format("dataset has no samples"));
        }
        let ds = Dataset {
            samples,
            d_x,
            viewpoint_set,
            seed: 0,
            source_ids: (0..=max_id).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        Dataset::read(&mut file)
    }
}

/// Configuration for [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub n_ids: usize,
    pub imgs_per_id: usize,
    /// Identity latent dimension.
    pub d_z: usize,
    /// Observed feature dimension.
    pub d_x: usize,
    pub n_viewpoints: usize,
    /// Norm of the per-viewpoint offset vector.
    pub viewpoint_gap: f64,
    /// Standard deviation of per-coordinate additive noise.
    pub within_view_noise: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_ids: 80,
            imgs_per_id: 4,
            d_z: 8,
            d_x: 32,
            n_viewpoints: 2,
            viewpoint_gap: 6.0,
            within_view_noise: 0.3,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::config("n_ids", "must be at least 2"));
        }
        if self.imgs_per_id < 2 {
            return Err(Error::config("imgs_per_id", "must be at least 2"));
        }
        if self.d_x == 0 {
            return Err(Error::config("d_x", "must be positive"));
        }
        if self.d_z == 0 || self.d_z > self.d_x {
            return Err(Error::config("d_z", "must be in 1..=d_x"));
        }
        if !(2..=3).contains(&self.n_viewpoints) {
            return Err(Error::config("n_viewpoints", "must be 2 or 3"));
        }
        if self.n_viewpoints > self.d_x {
            return Err(Error::config(
                "n_viewpoints",
                "cannot exceed d_x (offsets are orthogonalized)",
            ));
        }
        if !self.viewpoint_gap.is_finite() || self.viewpoint_gap < 0.0 {
            return Err(Error::config("viewpoint_gap", "must be finite and >= 0"));
        }
        if !self.within_view_noise.is_finite() || self.within_view_noise < 0.0 {
            return Err(Error::config("within_view_noise", "must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The per-viewpoint mixing maps and offsets behind a generated dataset.
///
/// Exposed so tests can force degenerate geometries (e.g. identical maps
/// across viewpoints) and feed them to [`generate_with_factors`].
#[derive(Debug, Clone)]
pub struct LatentFactorModel {
    /// One `d_x × d_z` mixing map per viewpoint.
    pub maps: Vec<Matrix>,
    /// One offset vector of norm `viewpoint_gap` per viewpoint, mutually
    /// orthogonal across viewpoints.
    pub offsets: Vec<Vec<f64>>,
}

impl LatentFactorModel {
    /// Draw maps and offsets from the config's seed. Offset directions are
    /// Gram–Schmidt orthogonalized before scaling so the gap is comparable
    /// for 2 and 3 viewpoints.
    pub fn sample(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> LatentFactorModel {
        let normal = StandardNormal;
        let map_scale = 1.0 / (cfg.d_z as f64).sqrt();
        let maps = (0..cfg.n_viewpoints)
            .map(|_| {
                Matrix::from_fn(cfg.d_x, cfg.d_z, |_, _| {
                    let g: f64 = normal.sample(rng);
                    g * map_scale
                })
            })
            .collect();

        let mut directions: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_viewpoints);
        for _ in 0..cfg.n_viewpoints {
            let mut dir: Vec<f64> = (0..cfg.d_x).map(|_| normal.sample(rng)).collect();
            for prev in &directions {
                let dot: f64 = dir.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (d, p) in dir.iter_mut().zip(prev) {
                    *d -= dot * p;
                }
            }
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            // A fresh Gaussian draw is never (anti)parallel to the span of the
            // previous ones in practice; the guard only avoids 0/0.
            let norm = norm.max(1e-12);
            for d in &mut dir {
                *d /= norm;
            }
            directions.push(dir);
        }
        let offsets = directions
            .into_iter()
            .map(|dir| dir.into_iter().map(|d| d * cfg.viewpoint_gap).collect())
            .collect();

        LatentFactorModel { maps, offsets }
    }
}

/// Generate a dataset from scratch. Identical configs (seed included) yield
/// bit-identical datasets.
pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factors = LatentFactorModel::sample(cfg, &mut rng);
    generate_from(cfg, &factors, &mut rng)
}

/// Generate a dataset from externally supplied factors. The RNG state for
/// identity latents and noise starts fresh from the config seed.
pub fn generate_with_factors(cfg: &GenConfig, factors: &LatentFactorModel) -> Result<Dataset> {
    cfg.validate()?;
    if factors.maps.len() != cfg.n_viewpoints || factors.offsets.len() != cfg.n_viewpoints {
        return Err(Error::config(
            "factors",
            "map/offset count does not match n_viewpoints",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    generate_from(cfg, factors, &mut rng)
}

fn generate_from(
    cfg: &GenConfig,
    factors: &LatentFactorModel,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let normal = StandardNormal;
    let viewpoint_set = Viewpoint::set_of(cfg.n_viewpoints)?;
    let mut samples = Vec::with_capacity(cfg.n_ids * cfg.imgs_per_id);
    for id in 0..cfg.n_ids {
        let z: Vec<f64> = (0..cfg.d_z).map(|_| normal.sample(rng)).collect();
        for j in 0..cfg.imgs_per_id {
            // Round-robin viewpoint assignment: every id sees every relation
            // class, so none of the training constraints is vacuous.
            let v = j % cfg.n_viewpoints;
            let map = &factors.maps[v];
            let offset = &factors.offsets[v];
            let mut x = vec![0.0; cfg.d_x];
            for (r, value) in x.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, zk) in z.iter().enumerate() {
                    acc += map[(r, k)] * zk;
                }
                let eps: f64 = normal.sample(rng);
                *value = acc + offset[r] + eps * cfg.within_view_noise;
            }
            samples.push(Sample {
                id,
                viewpoint: viewpoint_set[v],
                x,
            });
        }
    }
    let ds = Dataset {
        samples,
        d_x: cfg.d_x,
        viewpoint_set,
        seed: cfg.seed,
        source_ids: (0..cfg.n_ids).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Split a dataset into disjoint train/test id sets. Ids are re-indexed
/// contiguously within each split; `source_ids` retains the original ids.
pub fn split_by_id(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::config("test_fraction", "must be in (0, 1)"));
    }
    let n_ids = ds.n_ids();
    let n_test = (n_ids as f64 * test_fraction).round() as usize;
    let n_train = n_ids - n_test.min(n_ids);
    if n_test < 2 || n_train < 2 {
        return Err(Error::config(
            "test_fraction",
            format!("split {n_train}/{n_test} leaves fewer than 2 ids in one side"),
        ));
    }

    let mut order: Vec<usize> = (0..n_ids).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut test_ids: Vec<usize> = order[..n_test].to_vec();
    let mut train_ids: Vec<usize> = order[n_test..].to_vec();
    test_ids.sort_unstable();
    train_ids.sort_unstable();

    let subset = |chosen: &[usize]| -> Dataset {
        let mut new_id = vec![usize::MAX; n_ids];
        for (new, &old) in chosen.iter().enumerate() {
            new_id[old] = new;
        }
        let samples = ds
            .samples
            .iter()
            .filter(|s| new_id[s.id] != usize::MAX)
            .map(|s| Sample {
                id: new_id[s.id],
                viewpoint: s.viewpoint,
                x: s.x.clone(),
            })
            .collect();
        Dataset {
            samples,
            d_x: ds.d_x,
            viewpoint_set: ds.viewpoint_set.clone(),
            seed: ds.seed,
            source_ids: chosen.iter().map(|&old| ds.source_ids[old]).collect(),
        }
    };

    Ok((subset(&train_ids), subset(&test_ids)))
}

/// The four pair classes of interest: positive/negative crossed with
/// same-viewpoint (S) / different-viewpoint (D).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PairClass {
    SViewPos,
    SViewNeg,
    DViewPos,
    DViewNeg,
}

impl PairClass {
    pub const ALL: [PairClass; 4] = [
        PairClass::SViewPos,
        PairClass::SViewNeg,
        PairClass::DViewPos,
        PairClass::DViewNeg,
    ];

    pub fn classify(same_id: bool, relation: Relation) -> PairClass {
        match (relation, same_id) {
            (Relation::SView, true) => PairClass::SViewPos,
            (Relation::SView, false) => PairClass::SViewNeg,
            (Relation::DView, true) => PairClass::DViewPos,
            (Relation::DView, false) => PairClass::DViewNeg,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PairClass::SViewPos => "S-view pos",
            PairClass::SViewNeg => "S-view neg",
            PairClass::DViewPos => "D-view pos",
            PairClass::DViewNeg => "D-view neg",
        }
    }
}

impl fmt::Display for PairClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Mean/standard deviation of a distance population.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassStats {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Distance statistics for all four pair classes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassStats {
    pub s_pos: ClassStats,
    pub s_neg: ClassStats,
    pub d_pos: ClassStats,
    pub d_neg: ClassStats,
}

impl PairClassStats {
    pub fn get(&self, class: PairClass) -> ClassStats {
        match class {
            PairClass::SViewPos => self.s_pos,
            PairClass::SViewNeg => self.s_neg,
            PairClass::DViewPos => self.d_pos,
            PairClass::DViewNeg => self.d_neg,
        }
    }
}

/// Raw-feature distance statistics over all unordered sample pairs,
/// classified by ground-truth identity and viewpoint relation.
pub fn raw_pair_stats(ds: &Dataset) -> Result<PairClassStats> {
    let n = ds.n_samples();
    let mut sums = [0.0f64; 4];
    let mut sq_sums = [0.0f64; 4];
    let mut counts = [0usize; 4];
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &ds.samples[i];
            let b = &ds.samples[j];
            let class = PairClass::classify(a.id == b.id, pair_relation(a.viewpoint, b.viewpoint));
            let k = PairClass::ALL.iter().position(|&c| c == class).unwrap();
            let d = euclidean(&a.x, &b.x);
            sums[k] += d;
            sq_sums[k] += d * d;
            counts[k] += 1;
        }
    }
    let stats = |k: usize| -> Result<ClassStats> {
        if counts[k] == 0 {
            return Err(Error::EmptyPairClass {
                class: PairClass::ALL[k].name().to_string(),
            });
        }
        let mean = sums[k] / counts[k] as f64;
        let var = (sq_sums[k] / counts[k] as f64 - mean * mean).max(0.0);
        Ok(ClassStats {
            mean,
            std: var.sqrt(),
            count: counts[k],
        })
    };
    Ok(PairClassStats {
        s_pos: stats(0)?,
        s_neg: stats(1)?,
        d_pos: stats(2)?,
        d_neg: stats(3)?,
    })
}
