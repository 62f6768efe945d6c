//! Demand sampling and Frank-Wolfe labelled datasets.
//!
//! A dataset pairs `N` demand vectors `x` (one column per OD pair) with the
//! equilibrium arc flows `y` (one column per link, ascending id). Rows whose
//! solve did not reach the gap tolerance are left out of `x`/`y` and listed
//! in `meta.excluded`.

use std::path::Path;

use ndarray::{Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, DenseMatrix};
use crate::network::Network;
use crate::solver::{frank_wolfe, relative_gap, FwOptions};

pub const DATASET_FORMAT: &str = "tapflow-dataset";

/// I.i.d. uniform demands on `[x_min, x_max]`, `n` rows by `n_d` columns.
pub fn sample_demands(n: usize, n_d: usize, interval: [f64; 2], seed: u64) -> Result<Array2<f64>> {
    let [lo, hi] = interval;
    if !(lo >= 0.0 && lo < hi && hi.is_finite()) {
        return Err(Error::Domain(format!("demand interval [{lo}, {hi}] needs 0 <= x_min < x_max")));
    }
    if n == 0 || n_d == 0 {
        return Err(Error::Domain("sample count and dimension must be >= 1".into()));
    }
    let dist = Uniform::new_inclusive(lo, hi).map_err(|e| Error::Domain(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n * n_d).map(|_| dist.sample(&mut rng)).collect();
    Ok(Array2::from_shape_vec((n, n_d), data).expect("shape matches"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcludedRow {
    /// Row index in the sampler output.
    pub sample: usize,
    pub relative_gap: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub network: String,
    pub network_fingerprint: String,
    pub x_min: f64,
    pub x_max: f64,
    pub seed: u64,
    pub fw: FwOptions,
    pub requested_rows: usize,
    pub excluded: Vec<ExcludedRow>,
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    /// Relative gap reached by each kept row.
    pub gaps: Vec<f64>,
    pub iterations: Vec<usize>,
    pub meta: DatasetMeta,
}

/// Rows of a dataset materialized for training or evaluation.
#[derive(Debug, Clone)]
pub struct Samples {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub network_fingerprint: String,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn x_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.x.row(i)
    }

    pub fn y_row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.y.row(i)
    }
}

/// Sampling provenance recorded in the dataset header.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingInfo {
    pub interval: [f64; 2],
    pub seed: u64,
}

/// Solves one equilibrium per demand row. Rows are solved in parallel and
/// written back in input order.
pub fn generate_dataset(
    net: &Network,
    demands: &Array2<f64>,
    sampling: SamplingInfo,
    fw: &FwOptions,
) -> Result<Dataset> {
    if demands.nrows() == 0 {
        return Err(Error::Domain("no demand rows to solve".into()));
    }
    if demands.ncols() != net.num_od_pairs() {
        return Err(Error::Shape(format!(
            "demand matrix has {} columns, network has {} OD pairs",
            demands.ncols(),
            net.num_od_pairs()
        )));
    }
    let solutions = (0..demands.nrows())
        .into_par_iter()
        .map(|i| {
            let row = demands.row(i).to_vec();
            frank_wolfe(net, &row, fw)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut kept = Vec::new();
    let mut excluded = Vec::new();
    for (i, sol) in solutions.iter().enumerate() {
        if sol.converged {
            kept.push(i);
        } else {
            excluded.push(ExcludedRow {
                sample: i,
                relative_gap: sol.relative_gap,
                iterations: sol.iterations,
            });
        }
    }
    let x = demands.select(Axis(0), &kept);
    let mut y = Array2::zeros((kept.len(), net.num_links()));
    for (r, &i) in kept.iter().enumerate() {
        y.row_mut(r).assign(&ArrayView1::from(&solutions[i].flows));
    }
    Ok(Dataset {
        x,
        y,
        gaps: kept.iter().map(|&i| solutions[i].relative_gap).collect(),
        iterations: kept.iter().map(|&i| solutions[i].iterations).collect(),
        meta: DatasetMeta {
            network: net.name().to_string(),
            network_fingerprint: net.fingerprint().to_string(),
            x_min: sampling.interval[0],
            x_max: sampling.interval[1],
            seed: sampling.seed,
            fw: *fw,
            requested_rows: demands.nrows(),
            excluded,
            split: None,
        },
    })
}

/// Deterministic shuffled split; the first `round(ratio · N)` shuffled rows
/// train. Both index lists are returned sorted.
pub fn split_dataset(ds: &Dataset, ratio: f64, seed: u64) -> Result<Split> {
    let n = ds.len();
    if n < 10 {
        return Err(Error::Domain(format!("need at least 10 rows to split, have {n}")));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Domain(format!("split ratio must be in (0, 1), got {ratio}")));
    }
    let n_train = (ratio * n as f64).round() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = idx[..n_train].to_vec();
    let mut test = idx[n_train..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    Ok(Split {
        seed,
        ratio,
        train,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    format: String,
    version: u32,
    meta: DatasetMeta,
    x: DenseMatrix,
    y: DenseMatrix,
    relative_gap: Vec<f64>,
    iterations: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn set_split(&mut self, split: Split) -> Result<()> {
        let n = self.len();
        let mut seen = vec![false; n];
        for &i in split.train.iter().chain(&split.test) {
            if i >= n || seen[i] {
                return Err(Error::Validation(format!("split index {i} out of range or repeated")));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation("split does not cover every row".into()));
        }
        self.meta.split = Some(split);
        Ok(())
    }

    pub fn rows(&self, rows: &[usize]) -> Samples {
        Samples {
            x: self.x.select(Axis(0), rows),
            y: self.y.select(Axis(0), rows),
            network_fingerprint: self.meta.network_fingerprint.clone(),
        }
    }

    pub fn all(&self) -> Samples {
        Samples {
            x: self.x.clone(),
            y: self.y.clone(),
            network_fingerprint: self.meta.network_fingerprint.clone(),
        }
    }

    fn split(&self) -> Result<&Split> {
        self.meta
            .split
            .as_ref()
            .ok_or_else(|| Error::Validation("dataset has no train/test split".into()))
    }

    pub fn train(&self) -> Result<Samples> {
        Ok(self.rows(&self.split()?.train))
    }

    pub fn test(&self) -> Result<Samples> {
        Ok(self.rows(&self.split()?.test))
    }

    pub fn ensure_network(&self, net: &Network) -> Result<()> {
        if self.meta.network_fingerprint != net.fingerprint() {
            return Err(Error::Fingerprint {
                what: "network",
                expected: net.fingerprint().to_string(),
                found: self.meta.network_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            version: 1,
            meta: self.meta.clone(),
            x: DenseMatrix::from_array(&self.x),
            y: DenseMatrix::from_array(&self.y),
            relative_gap: self.gaps.clone(),
            iterations: self.iterations.clone(),
        };
        io::write_json(path, &file)
    }

    /// Reads a dataset without checking it against a network.
    pub fn load_unchecked(path: impl AsRef<Path>) -> Result<Self> {
        let file: DatasetFile = io::read_json(path)?;
        io::check_format(&file.format, DATASET_FORMAT)?;
        let x = file.x.into_array()?;
        let y = file.y.into_array()?;
        let n = x.nrows();
        if y.nrows() != n || file.relative_gap.len() != n || file.iterations.len() != n {
            return Err(Error::Validation("dataset blocks disagree on the row count".into()));
        }
        let mut ds = Dataset {
            x,
            y,
            gaps: file.relative_gap,
            iterations: file.iterations,
            meta: DatasetMeta {
                split: None,
                ..file.meta
            },
        };
        if let Some(split) = file.meta.split {
            ds.set_split(split)?;
        }
        Ok(ds)
    }
}

/// Loads a dataset and checks it belongs to `net`: fingerprints must match
/// and every row's relative gap, recomputed from `y`, must be within twice
/// the stored value.
pub fn load_dataset(path: impl AsRef<Path>, net: &Network) -> Result<Dataset> {
    let ds = Dataset::load_unchecked(path)?;
    ds.ensure_network(net)?;
    if ds.x.ncols() != net.num_od_pairs() || ds.y.ncols() != net.num_links() {
        return Err(Error::Shape("dataset columns do not match the network".into()));
    }
    let bad = (0..ds.len())
        .into_par_iter()
        .map(|i| -> Result<Option<(usize, f64)>> {
            let gap = relative_gap(net, &ds.y.row(i).to_vec(), &ds.x.row(i).to_vec())?;
            Ok((gap > 2.0 * ds.gaps[i] + 1e-15).then_some((i, gap)))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some((i, gap)) = bad.into_iter().flatten().next() {
        return Err(Error::Validation(format!(
            "row {i}: recomputed relative gap {gap:e} exceeds twice the stored {:e}",
            ds.gaps[i]
        )));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let a = sample_demands(50, 3, [5.0, 5.0 + 1e-9], 7).unwrap();
        let b = sample_demands(50, 3, [5.0, 5.0 + 1e-9], 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|&v| (5.0..=5.0 + 1e-9).contains(&v)));
        assert_ne!(a, sample_demands(50, 3, [5.0, 5.0 + 1e-9], 8).unwrap());
        assert!(sample_demands(5, 2, [3.0, 3.0], 0).is_err());
        assert!(sample_demands(5, 2, [-1.0, 3.0], 0).is_err());
    }

    #[test]
    fn sample_means_match_uniform_statistics() {
        let (lo, hi) = (2.0, 10.0);
        let n = 1000;
        let x = sample_demands(n, 4, [lo, hi], 11).unwrap();
        assert_eq!(x.dim(), (1000, 4));
        let sigma_mean = (hi - lo) / 12f64.sqrt() / (n as f64).sqrt();
        for col in x.columns() {
            let mean = col.mean().unwrap();
            assert!((mean - 0.5 * (lo + hi)).abs() < 3.0 * sigma_mean, "{mean}");
        }
    }

    #[test]
    fn pigou_rows_match_analytic_equilibrium() {
        let net = fixtures::load("pigou").unwrap();
        let x = ndarray::array![[0.5], [3.0], [4.2], [0.0]];
        let sampling = SamplingInfo {
            interval: [0.0, 5.0],
            seed: 0,
        };
        let ds = generate_dataset(&net, &x, sampling, &FwOptions::default()).unwrap();
        assert_eq!(ds.len(), 4);
        for (i, &d) in [0.5, 3.0, 4.2, 0.0].iter().enumerate() {
            let expected = if d >= 1.0 {
                [(d + 1.0) / 2.0, (d - 1.0) / 2.0]
            } else {
                [d, 0.0]
            };
            assert!((ds.y[[i, 0]] - expected[0]).abs() < 1e-6, "row {i}");
            assert!((ds.y[[i, 1]] - expected[1]).abs() < 1e-6, "row {i}");
        }
    }

    #[test]
    fn unconverged_rows_are_excluded() {
        let net = fixtures::load("nguyen-dupuis").unwrap();
        let x = sample_demands(6, 4, [60.0, 120.0], 3).unwrap();
        let fw = FwOptions {
            gap_tol: 1e-12,
            max_iters: 2,
        };
        let sampling = SamplingInfo {
            interval: [60.0, 120.0],
            seed: 3,
        };
        let ds = generate_dataset(&net, &x, sampling, &fw).unwrap();
        assert_eq!(ds.len() + ds.meta.excluded.len(), 6);
        assert!(!ds.meta.excluded.is_empty());
    }

    fn small_dataset(n: usize) -> (Network, Dataset) {
        let net = fixtures::load("nguyen-dupuis").unwrap();
        let x = sample_demands(n, 4, [60.0, 120.0], 1).unwrap();
        let sampling = SamplingInfo {
            interval: [60.0, 120.0],
            seed: 1,
        };
        let ds = generate_dataset(&net, &x, sampling, &FwOptions::default()).unwrap();
        (net, ds)
    }

    #[test]
    fn split_sizes() {
        let (_, ds) = small_dataset(10);
        let s = split_dataset(&ds, 0.7, 5).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (7, 3));
        assert_eq!(s, split_dataset(&ds, 0.7, 5).unwrap());
        let (_, tiny) = small_dataset(9);
        assert!(split_dataset(&tiny, 0.7, 5).is_err());
    }

    #[test]
    fn split_of_thousand_rows() {
        let mut ds = small_dataset(10).1;
        // only the row count matters for the split
        ds.x = Array2::zeros((1000, 4));
        ds.y = Array2::zeros((1000, 19));
        let s = split_dataset(&ds, 0.7, 42).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (700, 300));
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let (net, mut ds) = small_dataset(12);
        let split = split_dataset(&ds, 0.7, 9).unwrap();
        ds.set_split(split).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        let back = load_dataset(&path, &net).unwrap();
        assert_eq!(back, ds);
        for (a, b) in back.y.iter().zip(ds.y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn load_rejects_wrong_network_and_truncation() {
        let (_, ds) = small_dataset(10);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        let pigou = fixtures::load("pigou").unwrap();
        assert!(matches!(load_dataset(&path, &pigou), Err(Error::Fingerprint { .. })));

        let text = std::fs::read_to_string(&path).unwrap();
        let cut = dir.path().join("cut.json");
        std::fs::write(&cut, &text[..text.len() / 2]).unwrap();
        assert!(matches!(Dataset::load_unchecked(&cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn tampered_labels_fail_recertification() {
        let (net, mut ds) = small_dataset(10);
        ds.y[[3, 0]] += 5.0;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.json");
        ds.save(&path).unwrap();
        assert!(matches!(load_dataset(&path, &net), Err(Error::Validation(_))));
    }
}
