//! Vector-quantization codebooks with EMA updates and random restart.

use rand::Rng;

use crate::container::NamedArray;
use crate::nn::Mat;
use crate::{Error, Result};

pub const EMA_DECAY: f64 = 0.99;
pub const RESTART_THRESHOLD: f64 = 1.0;
pub const COMMITMENT_WEIGHT: f64 = 0.25;
const EPS_NUM: f64 = 1e-5;

/// `K × D` codebook with EMA state and per-epoch usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Mat,
    ema_counts: Vec<f64>,
    ema_sums: Mat,
    usage: Vec<u64>,
}

impl Codebook {
    /// EMA state starts at `counts = 1`, `sums = entries`.
    pub fn new(entries: Mat) -> Self {
        let k = entries.nrows();
        Codebook {
            ema_sums: entries.clone(),
            entries,
            ema_counts: vec![1.0; k],
            usage: vec![0; k],
        }
    }

    pub fn random(size: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = rand_distr::Normal::new(0.0, std).expect("valid std");
        Self::new(Mat::from_shape_fn((size, dim), |_| rng.sample(dist)))
    }

    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Mat {
        &self.entries
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.entries.as_slice().expect("standard layout")[k * d..(k + 1) * d]
    }

    pub fn ema_counts(&self) -> &[f64] {
        &self.ema_counts
    }

    pub fn ema_sums(&self) -> &Mat {
        &self.ema_sums
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    /// Number of entries used at least once this epoch.
    pub fn used_entries(&self) -> usize {
        self.usage.iter().filter(|&&u| u > 0).count()
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for k in 0..self.size() {
            let d: f64 = self.entry(k).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        best
    }

    /// Nearest entry by Euclidean distance; ties go to the lowest index.
    pub fn quantize(&self, v: &[f64]) -> Result<(usize, Vec<f64>)> {
        if v.len() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "vector dimension",
                expected: self.dim(),
                found: v.len(),
            });
        }
        let k = self.nearest(v);
        Ok((k, self.entry(k).to_vec()))
    }

    /// Quantizes every row of `batch`, returning indices and the code matrix.
    pub fn quantize_rows(&self, batch: &Mat) -> Result<(Vec<usize>, Mat)> {
        if batch.ncols() != self.dim() {
            return Err(Error::LengthMismatch {
                what: "vector dimension",
                expected: self.dim(),
                found: batch.ncols(),
            });
        }
        let mut codes = Mat::zeros(batch.dim());
        let mut idx = Vec::with_capacity(batch.nrows());
        for (r, row) in batch.rows().into_iter().enumerate() {
            let v: Vec<f64> = row.to_vec();
            let k = self.nearest(&v);
            codes.row_mut(r).assign(&self.entries.row(k));
            idx.push(k);
        }
        Ok((idx, codes))
    }

    /// Adds assignment counts to the epoch usage histogram.
    pub fn record_usage(&mut self, assignments: &[usize]) {
        for &k in assignments {
            self.usage[k] += 1;
        }
    }

    /// One EMA step: counts and sums decay toward this batch's assignment
    /// statistics and entries become `sums / (counts + 1e-5)`.
    pub fn ema_update(&mut self, batch: &Mat, assignments: &[usize], decay: f64) {
        assert_eq!(batch.nrows(), assignments.len());
        let k = self.size();
        let mut n = vec![0.0; k];
        let mut sums = Mat::zeros((k, self.dim()));
        for (row, &a) in batch.rows().into_iter().zip(assignments) {
            n[a] += 1.0;
            let mut dst = sums.row_mut(a);
            dst += &row;
        }
        for i in 0..k {
            self.ema_counts[i] = decay * self.ema_counts[i] + (1.0 - decay) * n[i];
            let mut s = self.ema_sums.row_mut(i);
            s *= decay;
            s.scaled_add(1.0 - decay, &sums.row(i));
            let denom = self.ema_counts[i] + EPS_NUM;
            let sum_row = self.ema_sums.row(i).to_owned();
            self.entries.row_mut(i).assign(&(sum_row / denom));
        }
    }

    /// Re-seeds every entry whose epoch usage is below `threshold` with a
    /// uniformly drawn pool vector; returns the number of restarted entries.
    pub fn random_restart(&mut self, pool: &Mat, threshold: f64, rng: &mut impl Rng) -> Result<usize> {
        if pool.nrows() == 0 {
            return Err(Error::Empty("restart pool"));
        }
        let mut restarted = 0;
        for k in 0..self.size() {
            if (self.usage[k] as f64) < threshold {
                let pick = rng.random_range(0..pool.nrows());
                self.entries.row_mut(k).assign(&pool.row(pick));
                self.ema_sums.row_mut(k).assign(&pool.row(pick));
                self.ema_counts[k] = 1.0;
                restarted += 1;
            }
        }
        Ok(restarted)
    }

    /// Mean squared quantization error per vector (squared distance to the nearest entry).
    pub fn quantization_mse(&self, data: &Mat) -> f64 {
        if data.nrows() == 0 {
            return 0.0;
        }
        let total: f64 = data
            .rows()
            .into_iter()
            .map(|row| {
                let v = row.to_vec();
                let k = self.nearest(&v);
                self.entry(k).iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
            })
            .sum();
        total / data.nrows() as f64
    }

    pub fn export(&self, prefix: &str) -> Vec<NamedArray> {
        let (k, d) = self.entries.dim();
        vec![
            (format!("{prefix}.entries"), vec![k, d], self.entries.iter().copied().collect()),
            (format!("{prefix}.ema_counts"), vec![k], self.ema_counts.clone()),
            (format!("{prefix}.ema_sums"), vec![k, d], self.ema_sums.iter().copied().collect()),
        ]
    }

    pub fn import(arrays: &[NamedArray], prefix: &str) -> Result<Self> {
        let find = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            arrays
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))
        };
        let (_, shape, data) = find("entries")?;
        let [k, d] = shape[..] else {
            return Err(Error::Checkpoint(format!("{prefix}.entries must be 2-D")));
        };
        let entries = Mat::from_shape_vec((k, d), data.clone()).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let (_, _, counts) = find("ema_counts")?;
        let (_, sshape, sums) = find("ema_sums")?;
        if counts.len() != k || sshape[..] != [k, d] {
            return Err(Error::Checkpoint(format!("{prefix}: inconsistent EMA state")));
        }
        Ok(Codebook {
            ema_sums: Mat::from_shape_vec((k, d), sums.clone()).expect("shape checked"),
            entries,
            ema_counts: counts.clone(),
            usage: vec![0; k],
        })
    }
}
