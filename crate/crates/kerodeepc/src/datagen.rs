//! Excitation signals, initial-condition selection, and dataset assembly.
//!
//! A dataset pairs `Tu` input windows with `Tx` initial conditions; the output
//! matrix stores the rollout for window `a` from initial condition `c` in
//! column `a·Tx + c` (u-outer, x-inner everywhere).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plant::{simulate, Plant};

/// Column-ordering tag written into dataset metadata.
pub const DATASET_ORDERING: &str = "u-outer-x-inner";

// --- excitation -------------------------------------------------------------

/// Multisine excitation parameters. Frequencies are normalized so that 1 is
/// the Nyquist rate; `band = (0.25, 0.5)` means tones between a quarter of and
/// half the Nyquist frequency.
#[derive(Clone, Debug)]
pub struct ExcitationConfig {
    pub length: usize,
    pub band: (f64, f64),
    pub amplitude_range: (f64, f64),
    pub num_sinusoids: usize,
    pub seed: u64,
}

impl ExcitationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return Err(Error::InvalidArgument("excitation: length must be ≥ 1".into()));
        }
        if self.num_sinusoids == 0 {
            return Err(Error::InvalidArgument(
                "excitation: num_sinusoids must be ≥ 1".into(),
            ));
        }
        let (lo, hi) = self.band;
        if !(lo.is_finite() && hi.is_finite()) || lo < 0.0 || hi > 1.0 || lo > hi {
            return Err(Error::InvalidArgument(format!(
                "excitation: band must satisfy 0 ≤ low ≤ high ≤ 1, got ({lo}, {hi})"
            )));
        }
        let (alo, ahi) = self.amplitude_range;
        if !(alo.is_finite() && ahi.is_finite()) || alo > ahi {
            return Err(Error::InvalidArgument(format!(
                "excitation: amplitude range must satisfy low ≤ high, got ({alo}, {ahi})"
            )));
        }
        Ok(())
    }
}

/// Sum-of-sinusoids excitation, rescaled per channel so its sample min/max hit
/// the configured amplitude range exactly. Deterministic in the seed.
pub fn multisine(cfg: &ExcitationConfig, channels: usize) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    if channels == 0 {
        return Err(Error::InvalidArgument("multisine: channels must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_channel: Vec<Vec<f64>> = Vec::with_capacity(channels);
    let (flo, fhi) = cfg.band;
    let (alo, ahi) = cfg.amplitude_range;
    for _ in 0..channels {
        let tones: Vec<(f64, f64)> = (0..cfg.num_sinusoids)
            .map(|_| {
                let f = if flo == fhi { flo } else { rng.random_range(flo..fhi) };
                let phase = rng.random_range(0.0..std::f64::consts::TAU);
                (f, phase)
            })
            .collect();
        let mut raw: Vec<f64> = (0..cfg.length)
            .map(|t| {
                tones
                    .iter()
                    .map(|(f, p)| (std::f64::consts::PI * f * t as f64 + p).sin())
                    .sum()
            })
            .collect();
        let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max - min < 1e-12 {
            raw.iter_mut().for_each(|v| *v = 0.5 * (alo + ahi));
        } else {
            let scale = (ahi - alo) / (max - min);
            raw.iter_mut().for_each(|v| *v = alo + (*v - min) * scale);
        }
        per_channel.push(raw);
    }
    Ok((0..cfg.length)
        .map(|t| DVector::from_fn(channels, |ch, _| per_channel[ch][t]))
        .collect())
}

// --- halton -------------------------------------------------------------

const PRIMES: [usize; 25] = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89,
    97,
];

fn radical_inverse(mut index: usize, base: usize) -> f64 {
    let mut result = 0.0;
    let mut f = 1.0 / base as f64;
    while index > 0 {
        result += f * (index % base) as f64;
        index /= base;
        f /= base as f64;
    }
    result
}

/// Low-discrepancy Halton points mapped into an axis-aligned box. Indexing
/// starts at 1 so the first point is not the box corner.
pub fn halton(dim: usize, count: usize, bounds: &[(f64, f64)]) -> Result<Vec<DVector<f64>>> {
    if dim == 0 || dim > PRIMES.len() {
        return Err(Error::InvalidArgument(format!(
            "halton: dimension must be in 1..={}, got {dim}",
            PRIMES.len()
        )));
    }
    if bounds.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "halton: {} bounds for dimension {dim}",
            bounds.len()
        )));
    }
    for (lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(Error::InvalidArgument(
                "halton: bounds must be finite with low ≤ high".into(),
            ));
        }
    }
    Ok((1..=count)
        .map(|i| {
            DVector::from_fn(dim, |d, _| {
                let (lo, hi) = bounds[d];
                lo + (hi - lo) * radical_inverse(i, PRIMES[d])
            })
        })
        .collect())
}

// --- k-means ------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KMeansInit {
    HaltonInBox,
    UniformInBox,
}

#[derive(Clone, Debug)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Minimum objective decrease per iteration; iteration stops once the
    /// decrease is at or below this (0 runs until the objective is exactly
    /// stationary or `max_iter`).
    pub tol: f64,
    pub init: KMeansInit,
    pub seed: u64,
    /// Initialization box; `None` uses the bounding box of the data.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 8,
            max_iter: 100,
            tol: 0.0,
            init: KMeansInit::HaltonInBox,
            seed: 0,
            bounds: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult {
    pub centroids: Vec<DVector<f64>>,
    /// Objective (sum of squared distances to assigned centroids) after each
    /// assignment pass; non-increasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
}

fn bounding_box(points: &[DVector<f64>]) -> Vec<(f64, f64)> {
    let dim = points[0].len();
    (0..dim)
        .map(|d| {
            let lo = points.iter().map(|p| p[d]).fold(f64::INFINITY, f64::min);
            let hi = points.iter().map(|p| p[d]).fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        })
        .collect()
}

/// Lloyd iteration with deterministic low-discrepancy (or uniform)
/// initialization. Empty clusters are reseeded at the point farthest from its
/// assigned centroid.
pub fn kmeans(points: &[DVector<f64>], cfg: &KMeansConfig) -> Result<KMeansResult> {
    if points.is_empty() {
        return Err(Error::InvalidArgument("kmeans: no points".into()));
    }
    if cfg.k == 0 || cfg.k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "kmeans: k must be in 1..={}, got {}",
            points.len(),
            cfg.k
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::DimensionMismatch("kmeans: ragged point set".into()));
    }
    let bounds = match &cfg.bounds {
        Some(b) if b.len() == dim => b.clone(),
        Some(b) => {
            return Err(Error::DimensionMismatch(format!(
                "kmeans: {} bounds for dimension {dim}",
                b.len()
            )))
        }
        None => bounding_box(points),
    };
    let mut centroids: Vec<DVector<f64>> = match cfg.init {
        KMeansInit::HaltonInBox => halton(dim, cfg.k, &bounds)?,
        KMeansInit::UniformInBox => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..cfg.k)
                .map(|_| {
                    DVector::from_fn(dim, |d, _| {
                        let (lo, hi) = bounds[d];
                        if lo == hi {
                            lo
                        } else {
                            rng.random_range(lo..hi)
                        }
                    })
                })
                .collect()
        }
    };

    let mut assignment = vec![0usize; points.len()];
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iter.max(1) {
        // assignment pass
        let mut objective = 0.0;
        for (pi, p) in points.iter().enumerate() {
            let (best, dist) = centroids
                .iter()
                .enumerate()
                .map(|(ci, c)| (ci, (p - c).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assignment[pi] = best;
            objective += dist;
        }
        let prev = trace.last().copied();
        trace.push(objective);
        iterations += 1;
        if let Some(prev) = prev {
            if prev - objective <= cfg.tol {
                break;
            }
        }
        // update pass
        let mut sums = vec![DVector::zeros(dim); cfg.k];
        let mut counts = vec![0usize; cfg.k];
        for (pi, p) in points.iter().enumerate() {
            sums[assignment[pi]] += p;
            counts[assignment[pi]] += 1;
        }
        for ci in 0..cfg.k {
            if counts[ci] > 0 {
                centroids[ci] = &sums[ci] / counts[ci] as f64;
            } else {
                // reseed at the point farthest from its current centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(ia, a), (ib, b)| {
                        let da = (*a - &centroids[assignment[*ia]]).norm_squared();
                        let db = (*b - &centroids[assignment[*ib]]).norm_squared();
                        da.total_cmp(&db)
                    })
                    .map(|(_, p)| p.clone())
                    .unwrap();
                centroids[ci] = far;
            }
        }
    }
    Ok(KMeansResult {
        centroids,
        objective_trace: trace,
        iterations,
    })
}

// --- dataset ------------------------------------------------------------

/// Chooses `k` representative initial conditions by exciting the plant from
/// `x_start` and clustering the visited states.
pub fn generate_initial_conditions<P: Plant + ?Sized>(
    plant: &P,
    x_start: &DVector<f64>,
    excitation: &ExcitationConfig,
    clustering: &KMeansConfig,
) -> Result<Vec<DVector<f64>>> {
    let inputs = multisine(excitation, plant.input_dim())?;
    let traj = simulate(plant, x_start, &inputs)?;
    let mut visited = Vec::with_capacity(traj.states.len() + 1);
    visited.push(x_start.clone());
    visited.extend(traj.states);
    Ok(kmeans(&visited, clustering)?.centroids)
}

/// Stacks a sequence of equal-dimension vectors into one long vector
/// (time-major: block `k` is element `k` of the sequence).
pub fn stack_vectors(vs: &[DVector<f64>]) -> DVector<f64> {
    let dim = vs.first().map_or(0, |v| v.len());
    DVector::from_fn(vs.len() * dim, |i, _| vs[i / dim][i % dim])
}

/// Splits a stacked vector back into blocks of dimension `dim`.
pub fn unstack_vector(v: &DVector<f64>, dim: usize) -> Vec<DVector<f64>> {
    assert!(dim > 0 && v.len() % dim == 0, "unstack: length not divisible");
    (0..v.len() / dim)
        .map(|k| DVector::from_fn(dim, |i, _| v[k * dim + i]))
        .collect()
}

/// All length-`n` sliding windows of a signal, stacked; window `a` covers
/// samples `a .. a+n`.
pub fn input_windows(signal: &[DVector<f64>], count: usize, n: usize) -> Result<Vec<DVector<f64>>> {
    if signal.len() + 1 < count + n {
        return Err(Error::InvalidArgument(format!(
            "input_windows: need {} samples for {count} windows of length {n}, have {}",
            count + n - 1,
            signal.len()
        )));
    }
    Ok((0..count).map(|a| stack_vectors(&signal[a..a + n])).collect())
}

/// Training data for the product-kernel operator.
#[derive(Clone, Debug)]
pub struct Dataset {
    /// Initial conditions, one per column (`n × Tx`).
    pub x0: DMatrix<f64>,
    /// Stacked input windows, one per column (`m·N × Tu`).
    pub u: DMatrix<f64>,
    /// Stacked output trajectories (`p·N × Tu·Tx`), column `a·Tx + c` holding
    /// the rollout of window `a` from initial condition `c`.
    pub y: DMatrix<f64>,
    pub state_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub horizon: usize,
}

impl Dataset {
    pub fn tu(&self) -> usize {
        self.u.ncols()
    }

    pub fn tx(&self) -> usize {
        self.x0.ncols()
    }

    pub fn u_points(&self) -> Vec<DVector<f64>> {
        self.u.column_iter().map(|c| c.clone_owned()).collect()
    }

    pub fn x_points(&self) -> Vec<DVector<f64>> {
        self.x0.column_iter().map(|c| c.clone_owned()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, p, nh) = (self.state_dim, self.input_dim, self.output_dim, self.horizon);
        if n == 0 || m == 0 || p == 0 || nh == 0 {
            return Err(Error::Data("dataset: zero dimension".into()));
        }
        if self.x0.nrows() != n {
            return Err(Error::Data(format!(
                "dataset: x0 has {} rows, expected state dimension {n}",
                self.x0.nrows()
            )));
        }
        if self.u.nrows() != m * nh {
            return Err(Error::Data(format!(
                "dataset: u has {} rows, expected m·N = {}",
                self.u.nrows(),
                m * nh
            )));
        }
        if self.y.nrows() != p * nh {
            return Err(Error::Data(format!(
                "dataset: y has {} rows, expected p·N = {}",
                self.y.nrows(),
                p * nh
            )));
        }
        if self.y.ncols() != self.tu() * self.tx() {
            return Err(Error::Data(format!(
                "dataset: y has {} columns, expected Tu·Tx = {}",
                self.y.ncols(),
                self.tu() * self.tx()
            )));
        }
        if self.x0.iter().chain(self.u.iter()).chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Data("dataset: non-finite entries".into()));
        }
        Ok(())
    }
}

/// Rolls out every (input window, initial condition) pair and assembles the
/// output matrix in u-outer/x-inner column order.
pub fn generate_dataset<P: Plant + ?Sized>(
    plant: &P,
    initial_conditions: &[DVector<f64>],
    input_windows: &[DVector<f64>],
    horizon: usize,
) -> Result<Dataset> {
    let (n, m, p) = (plant.state_dim(), plant.input_dim(), plant.output_dim());
    if initial_conditions.is_empty() || input_windows.is_empty() || horizon == 0 {
        return Err(Error::InvalidArgument(
            "generate_dataset: empty initial conditions, windows, or horizon".into(),
        ));
    }
    let tu = input_windows.len();
    let tx = initial_conditions.len();
    let mut x0 = DMatrix::zeros(n, tx);
    for (c, ic) in initial_conditions.iter().enumerate() {
        if ic.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "generate_dataset: initial condition {c} has dimension {}",
                ic.len()
            )));
        }
        x0.set_column(c, ic);
    }
    let mut u = DMatrix::zeros(m * horizon, tu);
    let mut y = DMatrix::zeros(p * horizon, tu * tx);
    for (a, win) in input_windows.iter().enumerate() {
        if win.len() != m * horizon {
            return Err(Error::DimensionMismatch(format!(
                "generate_dataset: window {a} has length {}, expected m·N = {}",
                win.len(),
                m * horizon
            )));
        }
        u.set_column(a, win);
        let steps = unstack_vector(win, m);
        for (c, ic) in initial_conditions.iter().enumerate() {
            let traj = simulate(plant, ic, &steps)?;
            y.set_column(a * tx + c, &stack_vectors(&traj.outputs));
        }
    }
    let ds = Dataset {
        x0,
        u,
        y,
        state_dim: n,
        input_dim: m,
        output_dim: p,
        horizon,
    };
    ds.validate()?;
    Ok(ds)
}

/// Training data for the stacked-kernel baseline: one long rollout, each
/// sample pairing a visited state with the input window applied from it.
pub struct StackedData {
    /// Regressors `z_i = [x_i; u_i; …; u_{i+N-1}]`, length `T`.
    pub z_points: Vec<DVector<f64>>,
    /// Output trajectories (`p·N × T`).
    pub y: DMatrix<f64>,
}

pub fn generate_stacked_data<P: Plant + ?Sized>(
    plant: &P,
    x_start: &DVector<f64>,
    excitation: &ExcitationConfig,
    samples: usize,
    horizon: usize,
) -> Result<StackedData> {
    if excitation.length + 1 < samples + horizon {
        return Err(Error::InvalidArgument(format!(
            "generate_stacked_data: excitation length {} too short for {samples} samples of horizon {horizon}",
            excitation.length
        )));
    }
    let inputs = multisine(excitation, plant.input_dim())?;
    let traj = simulate(plant, x_start, &inputs)?;
    let p = plant.output_dim();
    let mut z_points = Vec::with_capacity(samples);
    let mut y = DMatrix::zeros(p * horizon, samples);
    for i in 0..samples {
        let x_i = if i == 0 { x_start.clone() } else { traj.states[i - 1].clone() };
        let mut z = DVector::zeros(plant.state_dim() + plant.input_dim() * horizon);
        z.rows_mut(0, plant.state_dim()).copy_from(&x_i);
        z.rows_mut(plant.state_dim(), plant.input_dim() * horizon)
            .copy_from(&stack_vectors(&inputs[i..i + horizon]));
        z_points.push(z);
        y.set_column(i, &stack_vectors(&traj.outputs[i..i + horizon]));
    }
    Ok(StackedData { z_points, y })
}

// --- persistence ----------------------------------------------------------

fn write_matrix_rows(
    path: &Path,
    m: &DMatrix<f64>,
    transpose: bool,
    config_hash: Option<&str>,
) -> Result<()> {
    // rows of the file are columns of the matrix when `transpose` is set
    let (rows, cols) = if transpose { (m.ncols(), m.nrows()) } else { m.shape() };
    let mut out = String::new();
    if let Some(hash) = config_hash {
        let _ = writeln!(out, "# config_hash: {hash}");
    }
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                out.push(',');
            }
            let v = if transpose { m[(c, r)] } else { m[(r, c)] };
            let _ = write!(out, "{v}");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn read_matrix_rows(path: &Path, expect_cols: usize) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::with_capacity(expect_cols);
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "{}: line {}: cannot parse {:?} as a number",
                    path.display(),
                    lineno + 1,
                    field
                ))
            })?;
            row.push(v);
        }
        if row.len() != expect_cols {
            return Err(Error::Data(format!(
                "{}: line {}: expected {expect_cols} fields, found {}",
                path.display(),
                lineno + 1,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Writes `x0.csv`, `u.csv`, `y.csv`, and `meta.csv` into `dir`. Values use
/// the shortest decimal form that round-trips, so save/load is bit-exact.
pub fn save_dataset(dataset: &Dataset, dir: &Path, config_hash: Option<&str>) -> Result<()> {
    dataset.validate()?;
    std::fs::create_dir_all(dir)?;
    write_matrix_rows(&dir.join("x0.csv"), &dataset.x0, true, config_hash)?;
    write_matrix_rows(&dir.join("u.csv"), &dataset.u, true, config_hash)?;
    write_matrix_rows(&dir.join("y.csv"), &dataset.y, true, config_hash)?;
    let meta = format!(
        "# key,value\nstate_dim,{}\ninput_dim,{}\noutput_dim,{}\nhorizon,{}\ntu,{}\ntx,{}\nordering,{}\nconfig_hash,{}\n",
        dataset.state_dim,
        dataset.input_dim,
        dataset.output_dim,
        dataset.horizon,
        dataset.tu(),
        dataset.tx(),
        DATASET_ORDERING,
        config_hash.unwrap_or("-"),
    );
    std::fs::write(dir.join("meta.csv"), meta)?;
    Ok(())
}

/// Loads a dataset written by [`save_dataset`]; returns the dataset and the
/// recorded config hash, if any.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, Option<String>)> {
    let meta_path = dir.join("meta.csv");
    let meta_text = std::fs::read_to_string(&meta_path)?;
    let mut fields = std::collections::HashMap::new();
    for line in meta_text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once(',').ok_or_else(|| {
            Error::Data(format!("{}: malformed line {line:?}", meta_path.display()))
        })?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get_usize = |key: &str| -> Result<usize> {
        fields
            .get(key)
            .ok_or_else(|| Error::Data(format!("meta.csv: missing key {key}")))?
            .parse()
            .map_err(|_| Error::Data(format!("meta.csv: key {key} is not an integer")))
    };
    let (n, m, p) = (get_usize("state_dim")?, get_usize("input_dim")?, get_usize("output_dim")?);
    let horizon = get_usize("horizon")?;
    let (tu, tx) = (get_usize("tu")?, get_usize("tx")?);
    let ordering = fields
        .get("ordering")
        .ok_or_else(|| Error::Data("meta.csv: missing key ordering".into()))?;
    if ordering != DATASET_ORDERING {
        return Err(Error::Data(format!(
            "meta.csv: unsupported ordering {ordering:?}, expected {DATASET_ORDERING:?}"
        )));
    }
    let hash = fields.get("config_hash").filter(|h| h.as_str() != "-").cloned();

    let to_matrix = |rows: Vec<Vec<f64>>, nrows: usize, ncols: usize, name: &str| -> Result<DMatrix<f64>> {
        if rows.len() != ncols {
            return Err(Error::Data(format!(
                "{name}: expected {ncols} records, found {}",
                rows.len()
            )));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |r, c| rows[c][r]))
    };
    let x0 = to_matrix(read_matrix_rows(&dir.join("x0.csv"), n)?, n, tx, "x0.csv")?;
    let u = to_matrix(read_matrix_rows(&dir.join("u.csv"), m * horizon)?, m * horizon, tu, "u.csv")?;
    let y = to_matrix(
        read_matrix_rows(&dir.join("y.csv"), p * horizon)?,
        p * horizon,
        tu * tx,
        "y.csv",
    )?;
    let dataset = Dataset {
        x0,
        u,
        y,
        state_dim: n,
        input_dim: m,
        output_dim: p,
        horizon,
    };
    dataset.validate()?;
    Ok((dataset, hash))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::VanDerPol;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn v(parts: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(parts)
    }

    #[test]
    fn halton_base2_and_base3_prefix() {
        let pts = halton(2, 3, &[(0.0, 1.0), (0.0, 1.0)]).unwrap();
        let expected = [(0.5, 1.0 / 3.0), (0.25, 2.0 / 3.0), (0.75, 1.0 / 9.0)];
        for (p, (e0, e1)) in pts.iter().zip(expected) {
            assert_abs_diff_eq!(p[0], e0, epsilon = 1e-15);
            assert_abs_diff_eq!(p[1], e1, epsilon = 1e-15);
        }
    }

    #[test]
    fn halton_respects_box() {
        let pts = halton(2, 40, &[(-2.0, 2.0), (1.0, 5.0)]).unwrap();
        assert!(pts
            .iter()
            .all(|p| p[0] >= -2.0 && p[0] <= 2.0 && p[1] >= 1.0 && p[1] <= 5.0));
        // first point is the box midpoint along base 2
        assert_abs_diff_eq!(pts[0][0], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn multisine_hits_amplitude_range_and_is_deterministic() {
        let cfg = ExcitationConfig {
            length: 250,
            band: (0.0, 1.0),
            amplitude_range: (-1.0, 1.0),
            num_sinusoids: 25,
            seed: 3,
        };
        let s1 = multisine(&cfg, 1).unwrap();
        let s2 = multisine(&cfg, 1).unwrap();
        assert_eq!(s1.len(), 250);
        let min = s1.iter().map(|u| u[0]).fold(f64::INFINITY, f64::min);
        let max = s1.iter().map(|u| u[0]).fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(min, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(max, 1.0, epsilon = 1e-12);
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a[0].to_bits(), b[0].to_bits());
        }
        let s3 = multisine(
            &ExcitationConfig {
                seed: 4,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        assert!(s1.iter().zip(s3.iter()).any(|(a, b)| a[0] != b[0]));
    }

    #[test]
    fn multisine_single_tone_band_is_usable() {
        let cfg = ExcitationConfig {
            length: 100,
            band: (0.1, 0.1),
            amplitude_range: (0.0, 2.0),
            num_sinusoids: 1,
            seed: 0,
        };
        let s = multisine(&cfg, 2).unwrap();
        assert_eq!(s[0].len(), 2);
        assert!(s.iter().all(|u| u.iter().all(|x| (0.0..=2.0).contains(x))));
    }

    #[test]
    fn excitation_validation_errors() {
        let base = ExcitationConfig {
            length: 10,
            band: (0.0, 1.0),
            amplitude_range: (-1.0, 1.0),
            num_sinusoids: 5,
            seed: 0,
        };
        assert!(ExcitationConfig { length: 0, ..base.clone() }.validate().is_err());
        assert!(ExcitationConfig { band: (0.5, 0.2), ..base.clone() }.validate().is_err());
        assert!(ExcitationConfig { band: (-0.1, 0.5), ..base.clone() }.validate().is_err());
        assert!(ExcitationConfig { amplitude_range: (1.0, -1.0), ..base.clone() }
            .validate()
            .is_err());
        assert!(ExcitationConfig { num_sinusoids: 0, ..base }.validate().is_err());
    }

    #[test]
    fn kmeans_with_k_equal_to_points_recovers_points() {
        let pts = vec![v(&[0.0, 0.0]), v(&[1.0, 0.0]), v(&[0.0, 1.0])];
        let cfg = KMeansConfig {
            k: 3,
            max_iter: 50,
            ..Default::default()
        };
        let res = kmeans(&pts, &cfg).unwrap();
        let obj = res.objective_trace.last().unwrap();
        assert!(*obj < 1e-20, "objective {obj} should be ~0");
    }

    #[test]
    fn kmeans_recovers_separated_blobs() {
        let mut pts = Vec::new();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            for d in [-0.1, 0.0, 0.1] {
                pts.push(v(&[cx + d, cy - d]));
            }
        }
        let cfg = KMeansConfig {
            k: 3,
            max_iter: 100,
            ..Default::default()
        };
        let res = kmeans(&pts, &cfg).unwrap();
        for (cx, cy) in [(0.0, 0.0), (10.0, 0.0), (0.0, 10.0)] {
            let hit = res
                .centroids
                .iter()
                .any(|c| (c - v(&[cx, cy])).norm() < 0.5);
            assert!(hit, "no centroid near ({cx},{cy})");
        }
    }

    #[test]
    fn kmeans_objective_trace_is_monotone() {
        let pts: Vec<_> = (0..60)
            .map(|i| v(&[(i as f64 * 0.7).sin() * 3.0, (i as f64 * 1.3).cos() * 2.0]))
            .collect();
        let res = kmeans(
            &pts,
            &KMeansConfig {
                k: 5,
                max_iter: 60,
                ..Default::default()
            },
        )
        .unwrap();
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "trace increased: {:?}", w);
        }
    }

    #[test]
    fn kmeans_reseeds_empty_clusters() {
        // Two tight blobs, three centroids seeded far outside the data: at
        // least one cluster starts empty and must be reseeded.
        let mut pts = Vec::new();
        for d in 0..5 {
            pts.push(v(&[d as f64 * 0.01, 0.0]));
            pts.push(v(&[5.0 + d as f64 * 0.01, 0.0]));
        }
        let cfg = KMeansConfig {
            k: 3,
            max_iter: 100,
            init: KMeansInit::HaltonInBox,
            bounds: Some(vec![(100.0, 101.0), (50.0, 51.0)]),
            ..Default::default()
        };
        let res = kmeans(&pts, &cfg).unwrap();
        let obj = res.objective_trace.last().unwrap();
        assert!(*obj < 0.1, "objective {obj} too high after reseeding");
        for w in res.objective_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn kmeans_rejects_bad_k() {
        let pts = vec![v(&[0.0]), v(&[1.0])];
        assert!(kmeans(&pts, &KMeansConfig { k: 0, ..Default::default() }).is_err());
        assert!(kmeans(&pts, &KMeansConfig { k: 3, ..Default::default() }).is_err());
    }

    #[test]
    fn initial_conditions_stay_in_visited_box() {
        let plant = VanDerPol::default();
        let exc = ExcitationConfig {
            length: 200,
            band: (0.0, 1.0),
            amplitude_range: (-1.0, 1.0),
            num_sinusoids: 25,
            seed: 1,
        };
        let km = KMeansConfig {
            k: 10,
            max_iter: 100,
            ..Default::default()
        };
        let ics = generate_initial_conditions(&plant, &v(&[0.0, 0.0]), &exc, &km).unwrap();
        assert_eq!(ics.len(), 10);
        let inputs = multisine(&exc, 1).unwrap();
        let traj = simulate(&plant, &v(&[0.0, 0.0]), &inputs).unwrap();
        let mut visited = vec![v(&[0.0, 0.0])];
        visited.extend(traj.states);
        let bb = bounding_box(&visited);
        for ic in &ics {
            for d in 0..2 {
                assert!(ic[d] >= bb[d].0 - 1e-12 && ic[d] <= bb[d].1 + 1e-12);
            }
        }
    }

    #[test]
    fn dataset_columns_follow_u_outer_x_inner_order() {
        let plant = VanDerPol::default();
        let ics = vec![v(&[0.1, 0.0]), v(&[0.0, 0.2]), v(&[-0.3, 0.1])];
        let sig = multisine(
            &ExcitationConfig {
                length: 8,
                band: (0.0, 1.0),
                amplitude_range: (-1.0, 1.0),
                num_sinusoids: 5,
                seed: 9,
            },
            1,
        )
        .unwrap();
        let wins = input_windows(&sig, 4, 5).unwrap();
        let ds = generate_dataset(&plant, &ics, &wins, 5).unwrap();
        assert_eq!(ds.u.shape(), (5, 4));
        assert_eq!(ds.y.shape(), (5, 12));
        // direct oracle: column a*Tx+c is the rollout of window a from ic c
        for (a, c) in [(0usize, 0usize), (1, 2), (3, 1)] {
            let steps = unstack_vector(&wins[a], 1);
            let traj = simulate(&plant, &ics[c], &steps).unwrap();
            let expected = stack_vectors(&traj.outputs);
            let got = ds.y.column(a * 3 + c);
            for i in 0..5 {
                assert_eq!(got[i].to_bits(), expected[i].to_bits());
            }
        }
    }

    #[test]
    fn stacked_data_pairs_states_with_windows() {
        let plant = VanDerPol::default();
        let exc = ExcitationConfig {
            length: 30 + 5 - 1,
            band: (0.0, 1.0),
            amplitude_range: (-1.0, 1.0),
            num_sinusoids: 10,
            seed: 2,
        };
        let sd = generate_stacked_data(&plant, &v(&[0.0, 0.0]), &exc, 30, 5).unwrap();
        assert_eq!(sd.z_points.len(), 30);
        assert_eq!(sd.y.shape(), (5, 30));
        // sample 0 starts at x_start
        assert_eq!(sd.z_points[0][0], 0.0);
        assert_eq!(sd.z_points[0][1], 0.0);
        // re-simulate sample 7 from its recorded state and inputs
        let z = &sd.z_points[7];
        let x7 = v(&[z[0], z[1]]);
        let inputs: Vec<_> = (0..5).map(|k| v(&[z[2 + k]])).collect();
        let traj = simulate(&plant, &x7, &inputs).unwrap();
        for k in 0..5 {
            assert_abs_diff_eq!(sd.y[(k, 7)], traj.outputs[k][0], epsilon = 1e-14);
        }
    }

    #[test]
    fn dataset_roundtrip_is_bit_exact() {
        let plant = VanDerPol::default();
        let ics = vec![v(&[0.1, -0.7]), v(&[1.0 / 3.0, 0.2])];
        let sig = multisine(
            &ExcitationConfig {
                length: 7,
                band: (0.0, 1.0),
                amplitude_range: (-1.0, 1.0),
                num_sinusoids: 3,
                seed: 5,
            },
            1,
        )
        .unwrap();
        let wins = input_windows(&sig, 3, 5).unwrap();
        let ds = generate_dataset(&plant, &ics, &wins, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), Some("deadbeef")).unwrap();
        let (loaded, hash) = load_dataset(dir.path()).unwrap();
        assert_eq!(hash.as_deref(), Some("deadbeef"));
        assert_eq!(ds.horizon, loaded.horizon);
        for (a, b) in ds.x0.iter().zip(loaded.x0.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ds.u.iter().zip(loaded.u.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in ds.y.iter().zip(loaded.y.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn load_rejects_truncated_outputs() {
        let plant = VanDerPol::default();
        let ics = vec![v(&[0.1, 0.0]), v(&[0.0, 0.1])];
        let sig = multisine(
            &ExcitationConfig {
                length: 6,
                band: (0.0, 1.0),
                amplitude_range: (-1.0, 1.0),
                num_sinusoids: 3,
                seed: 6,
            },
            1,
        )
        .unwrap();
        let wins = input_windows(&sig, 2, 5).unwrap();
        let ds = generate_dataset(&plant, &ics, &wins, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path(), None).unwrap();
        let y_path = dir.path().join("y.csv");
        let text = std::fs::read_to_string(&y_path).unwrap();
        let truncated: Vec<&str> = text.lines().take(2).collect();
        std::fs::write(&y_path, truncated.join("\n")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Data(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn multisine_stays_in_range(seed in 0u64..300, len in 2usize..80) {
            let cfg = ExcitationConfig {
                length: len,
                band: (0.0, 1.0),
                amplitude_range: (-0.7, 0.3),
                num_sinusoids: 7,
                seed,
            };
            let s = multisine(&cfg, 2).unwrap();
            for u in &s {
                for x in u.iter() {
                    prop_assert!(*x >= -0.7 - 1e-9 && *x <= 0.3 + 1e-9);
                }
            }
        }

        #[test]
        fn stack_unstack_roundtrip(seed in 0u64..100, blocks in 1usize..6, dim in 1usize..4) {
            let vs: Vec<DVector<f64>> = (0..blocks)
                .map(|b| DVector::from_fn(dim, |i, _| ((seed + (b * dim + i) as u64) as f64).sin()))
                .collect();
            let stacked = stack_vectors(&vs);
            prop_assert_eq!(stacked.len(), blocks * dim);
            let back = unstack_vector(&stacked, dim);
            for (a, b) in vs.iter().zip(back.iter()) {
                prop_assert_eq!(a, b);
            }
        }
    }
}
