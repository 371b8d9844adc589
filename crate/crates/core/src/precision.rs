//! Block-tridiagonal trajectory precision and observation sets.
//!
//! With `W_t = diag(1 / (dt tau_t)^2)` and `A_t = M_t^{-1}`, the joint density
//! of the recursion gives
//!
//! ```text
//! D_0 = P_0^{-1} + W_1
//! D_t = A_t^T W_t A_t + W_{t+1}        0 < t < N
//! D_N = A_N^T W_N A_N
//! U_t = -W_{t+1} A_{t+1}               (block row t, column t + 1)
//! ```

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dot, SpaceTimeGrid, Trajectory};
use crate::linalg::pcg::BlockJacobi;
use crate::operator::ParamFields;
use crate::parallel::{try_map_indexed, Execution};
use crate::sparse::{SparseMatrix, TripletBuilder};
use crate::state_space::{InitialState, PriorModel, TransitionStep};

/// Factors whose log-determinants add up to `log|Q|`:
/// `P_0^{-1}` and `S_t^{-1} = A_t^T W_t A_t` for `t = 1..N`.
#[derive(Debug, Clone)]
pub struct Generators {
    pub initial_precision: SparseMatrix,
    pub step_precisions: Vec<SparseMatrix>,
}

#[derive(Debug, Clone)]
pub struct BlockPrecision {
    grid: SpaceTimeGrid,
    diag: Vec<SparseMatrix>,
    upper: Vec<SparseMatrix>,
    generators: Option<Generators>,
}

pub(crate) fn noise_weights(step: &TransitionStep) -> Result<Vec<f64>> {
    let mut w = Vec::with_capacity(step.noise_std().len());
    for &s in step.noise_std() {
        let v = 1.0 / (s * s);
        if !v.is_finite() || !(s != 0.0) {
            let min_tau = step.noise_std().iter().fold(f64::INFINITY, |a, &b| a.min(b.abs()));
            return Err(Error::DegenerateNoise { t: step.t, min_tau });
        }
        w.push(v);
    }
    Ok(w)
}

/// Assembles `Q` from a prepared prior model.
pub fn block_precision_from_model(model: &PriorModel, exec: Execution) -> Result<BlockPrecision> {
    let grid = *model.grid();
    let steps = model.steps();
    let weights: Vec<Vec<f64>> = steps.iter().map(noise_weights).collect::<Result<_>>()?;
    let p0_inv = model.initial_precision()?;

    // S_t^{-1} and U_{t-1} per step
    let parts = try_map_indexed(exec, steps.len(), |i| {
        let a = steps[i].a_solve();
        let wa = a.scale_rows(&weights[i]);
        let s_inv = a.transpose().mul(&wa)?;
        Ok::<_, Error>((s_inv, wa.scale(-1.0)))
    })?;
    let (s_inv, upper): (Vec<_>, Vec<_>) = parts.into_iter().unzip();

    let nt = grid.nt;
    let mut diag = Vec::with_capacity(nt);
    for t in 0..nt {
        let mut d = if t == 0 { p0_inv.clone() } else { s_inv[t - 1].clone() };
        if t + 1 < nt {
            d = d.linear_combination(1.0, &SparseMatrix::from_diagonal(&weights[t]), 1.0)?;
        }
        diag.push(d);
    }
    Ok(BlockPrecision {
        grid,
        diag,
        upper,
        generators: Some(Generators { initial_precision: p0_inv, step_precisions: s_inv }),
    })
}

pub fn assemble_block_precision(theta: &ParamFields, initial: InitialState) -> Result<BlockPrecision> {
    let model = PriorModel::new(theta, initial)?;
    block_precision_from_model(&model, Execution::default())
}

impl BlockPrecision {
    pub fn from_blocks(grid: SpaceTimeGrid, diag: Vec<SparseMatrix>, upper: Vec<SparseMatrix>) -> Result<Self> {
        let m = grid.state_dim();
        if diag.len() != grid.nt || upper.len() + 1 != grid.nt {
            return Err(Error::ShapeMismatch { expected: grid.nt, got: diag.len() });
        }
        for b in diag.iter().chain(&upper) {
            if b.nrows() != m || b.ncols() != m {
                return Err(Error::ShapeMismatch { expected: m, got: b.nrows() });
            }
        }
        Ok(Self { grid, diag, upper, generators: None })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn diag_blocks(&self) -> &[SparseMatrix] {
        &self.diag
    }

    pub fn upper_blocks(&self) -> &[SparseMatrix] {
        &self.upper
    }

    pub fn generators(&self) -> Option<&Generators> {
        self.generators.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.grid.trajectory_dim()
    }

    pub fn nnz(&self) -> usize {
        self.diag.iter().map(|b| b.nnz()).sum::<usize>() + 2 * self.upper.iter().map(|b| b.nnz()).sum::<usize>()
    }

    /// `Q v` on flat slices.
    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let m = self.grid.state_dim();
        let mut out = vec![0.0; v.len()];
        for (t, d) in self.diag.iter().enumerate() {
            d.mul_vec_add(1.0, &v[t * m..(t + 1) * m], &mut out[t * m..(t + 1) * m]);
        }
        for (t, u) in self.upper.iter().enumerate() {
            let (lo, hi) = out.split_at_mut((t + 1) * m);
            u.mul_vec_add(1.0, &v[(t + 1) * m..(t + 2) * m], &mut lo[t * m..]);
            u.mul_transpose_vec_add(1.0, &v[t * m..(t + 1) * m], &mut hi[..m]);
        }
        out
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.diag.iter().flat_map(|d| d.diagonal()).collect()
    }

    /// The full `nt m x nt m` matrix.
    pub fn to_full(&self) -> SparseMatrix {
        let m = self.grid.state_dim();
        let n = self.dim();
        let mut b = TripletBuilder::new(n, n);
        for (t, d) in self.diag.iter().enumerate() {
            for (i, j, v) in d.triplets() {
                b.push(t * m + i, t * m + j, v);
            }
        }
        for (t, u) in self.upper.iter().enumerate() {
            for (i, j, v) in u.triplets() {
                b.push(t * m + i, (t + 1) * m + j, v);
                b.push((t + 1) * m + j, t * m + i, v);
            }
        }
        b.build()
    }

    /// Preconditioner from independent factorizations of the diagonal blocks.
    pub fn block_preconditioner(&self) -> Result<BlockJacobi> {
        BlockJacobi::new(&self.diag)
    }

    /// Writes `Q` as text: a header line `nrows ncols nnz`, then one
    /// `row col value` line per stored entry, 0-based, row-major.
    pub fn write_triplets(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let full = self.to_full();
        let io = |source| Error::Io { path: path.to_path_buf(), source };
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
        writeln!(f, "{} {} {}", full.nrows(), full.ncols(), full.nnz()).map_err(io)?;
        for (i, j, v) in full.triplets() {
            writeln!(f, "{i} {j} {v:e}").map_err(io)?;
        }
        f.flush().map_err(io)
    }
}

pub fn apply_precision(q: &BlockPrecision, v: &Trajectory) -> Result<Trajectory> {
    v.check_grid(&q.grid)?;
    Trajectory::from_vec(q.grid, q.mul_vec(v.as_slice()))
}

pub fn quadratic_form(q: &BlockPrecision, x: &Trajectory) -> Result<f64> {
    x.check_grid(&q.grid)?;
    Ok(dot(x.as_slice(), &q.mul_vec(x.as_slice())))
}

/// `Q + H^T R^{-1} H`. The result no longer carries generator blocks.
pub fn posterior_precision(q: &BlockPrecision, obs: &ObservationSet) -> Result<BlockPrecision> {
    if obs.grid != q.grid {
        return Err(Error::InvalidGrid("observations are on a different grid".into()));
    }
    let m = q.grid.state_dim();
    let mut diag = q.diag.clone();
    for (k, &idx) in obs.indices.iter().enumerate() {
        diag[idx / m].add_to_diagonal(idx % m, 1.0 / obs.noise_var[k]);
    }
    Ok(BlockPrecision { grid: q.grid, diag, upper: q.upper.clone(), generators: None })
}

/// One observed grid point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObservationRecord {
    pub t: usize,
    pub y: usize,
    pub x: usize,
    pub value: f64,
    pub noise_var: f64,
}

/// Observed values `y` on a mask `Omega` with diagonal noise `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    grid: SpaceTimeGrid,
    mask: Vec<bool>,
    /// flat indices of observed points, ascending
    indices: Vec<usize>,
    values: Vec<f64>,
    noise_var: Vec<f64>,
}

impl ObservationSet {
    /// `values` and `noise_var` are given in ascending flat-index order of
    /// the set mask entries.
    pub fn new(grid: SpaceTimeGrid, mask: Vec<bool>, values: Vec<f64>, noise_var: Vec<f64>) -> Result<Self> {
        if mask.len() != grid.trajectory_dim() {
            return Err(Error::ShapeMismatch { expected: grid.trajectory_dim(), got: mask.len() });
        }
        let indices: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i).collect();
        for len in [values.len(), noise_var.len()] {
            if len != indices.len() {
                return Err(Error::ShapeMismatch { expected: indices.len(), got: len });
            }
        }
        if let Some(v) = noise_var.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParams(format!("observation noise variance must be positive, got {v}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParams("non-finite observation value".into()));
        }
        Ok(Self { grid, mask, indices, values, noise_var })
    }

    pub fn empty(grid: SpaceTimeGrid) -> Self {
        Self {
            grid,
            mask: vec![false; grid.trajectory_dim()],
            indices: Vec::new(),
            values: Vec::new(),
            noise_var: Vec::new(),
        }
    }

    /// Samples `truth` on `mask` and adds no noise.
    pub fn from_truth(truth: &Trajectory, mask: Vec<bool>, noise_var: f64) -> Result<Self> {
        let values: Vec<f64> = mask.iter().zip(truth.as_slice()).filter(|(&b, _)| b).map(|(_, &v)| v).collect();
        let n = values.len();
        Self::new(*truth.grid(), mask, values, vec![noise_var; n])
    }

    pub fn from_records(grid: SpaceTimeGrid, records: &[ObservationRecord]) -> Result<Self> {
        let n = grid.trajectory_dim();
        let mut slots: Vec<Option<(f64, f64)>> = vec![None; n];
        for r in records {
            let idx = grid.flatten_index(r.t, r.y, r.x)?;
            if slots[idx].is_some() {
                return Err(Error::InvalidParams(format!("duplicate observation at t={}, y={}, x={}", r.t, r.y, r.x)));
            }
            slots[idx] = Some((r.value, r.noise_var));
        }
        let mask = slots.iter().map(Option::is_some).collect();
        let (values, noise): (Vec<f64>, Vec<f64>) = slots.into_iter().flatten().unzip();
        Self::new(grid, mask, values, noise)
    }

    pub fn records(&self) -> Vec<ObservationRecord> {
        self.indices
            .iter()
            .zip(self.values.iter().zip(&self.noise_var))
            .map(|(&i, (&value, &noise_var))| {
                let (t, y, x) = self.grid.unflatten_index(i).expect("index in range");
                ObservationRecord { t, y, x, value, noise_var }
            })
            .collect()
    }

    /// CSV with header `t,y,x,value,noise_var`.
    pub fn read_csv(grid: SpaceTimeGrid, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut rdr = csv::Reader::from_reader(file);
        let records: Vec<ObservationRecord> = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Self::from_records(grid, &records)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
        let mut w = csv::Writer::from_writer(file);
        for r in self.records() {
            w.serialize(r)?;
        }
        w.flush().map_err(|source| Error::Io { path: path.to_path_buf(), source })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn noise_var(&self) -> &[f64] {
        &self.noise_var
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// `H x`.
    pub fn observe(&self, x: &[f64]) -> Vec<f64> {
        self.indices.iter().map(|&i| x[i]).collect()
    }

    /// `H^T R^{-1} r` scattered onto the full trajectory.
    pub fn scatter_weighted(&self, r: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.trajectory_dim()];
        for (k, &i) in self.indices.iter().enumerate() {
            out[i] = r[k] / self.noise_var[k];
        }
        out
    }

    /// Same observation points with different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.grid, self.mask.clone(), values, self.noise_var.clone())
    }
}
