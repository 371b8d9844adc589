//! Non-stationary SPDE parameter fields and the finite-difference operator
//!
//! ```text
//! L_t = kappa_t^2 - m_t . grad - div(H_t grad)
//! ```
//!
//! on a regular grid with zero-flux (Neumann) boundaries. The drift of the
//! state equation is `F_t = -L_t^(alpha/2)`, so a backward-Euler step solves
//! `(I + dt L_t^(alpha/2)) x_{t+1} = x_t + noise`.
//!
//! Discretization:
//! * advection: first-order upwind on the transport velocity `-m`, chosen per
//!   cell and per component from the sign of `m`;
//! * diagonal diffusion: flux form on cell edges, edge coefficient averaged
//!   from the adjacent 2x2 quads;
//! * mixed diffusion: quad-centred gradients, coefficient averaged from the
//!   four quad corners.
//!
//! With `m = 0` the operator is symmetric, and positive semi-definite whenever
//! every cell tensor is SPD; constants lie in its kernel when `kappa = 0`.
//! Every row touches only the cell and its 8 neighbours.

use crate::error::{Error, Result};
use crate::grid::{Field, SpaceTimeGrid};
use crate::sparse::{SparseMatrix, TripletBuilder};

/// One of the seven scalar parameter fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Kappa = 0,
    AdvectionU = 1,
    AdvectionV = 2,
    H11 = 3,
    H12 = 4,
    H22 = 5,
    Tau = 6,
}

impl ParamKind {
    pub const ALL: [ParamKind; 7] = [
        ParamKind::Kappa,
        ParamKind::AdvectionU,
        ParamKind::AdvectionV,
        ParamKind::H11,
        ParamKind::H12,
        ParamKind::H22,
        ParamKind::Tau,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamKind::Kappa => "kappa",
            ParamKind::AdvectionU => "m_u",
            ParamKind::AdvectionV => "m_v",
            ParamKind::H11 => "h11",
            ParamKind::H12 => "h12",
            ParamKind::H22 => "h22",
            ParamKind::Tau => "tau",
        }
    }
}

/// Spatially and temporally uniform parameter values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryParams {
    pub kappa: f64,
    pub m_u: f64,
    pub m_v: f64,
    pub h11: f64,
    pub h12: f64,
    pub h22: f64,
    pub tau: f64,
}

impl StationaryParams {
    pub fn isotropic(kappa: f64, tau: f64) -> Self {
        Self { kappa, m_u: 0.0, m_v: 0.0, h11: 1.0, h12: 0.0, h22: 1.0, tau }
    }

    pub fn to_array(self) -> [f64; 7] {
        [self.kappa, self.m_u, self.m_v, self.h11, self.h12, self.h22, self.tau]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { kappa: a[0], m_u: a[1], m_v: a[2], h11: a[3], h12: a[4], h22: a[5], tau: a[6] }
    }
}

/// Per-cell, per-time SPDE parameters plus the global smoothness `alpha`.
///
/// Each field is stored flat in grid order (`t`, then `y`, then `x`).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamFields {
    grid: SpaceTimeGrid,
    fields: [Vec<f64>; 7],
    pub alpha: u32,
}

impl ParamFields {
    pub fn stationary(grid: SpaceTimeGrid, p: StationaryParams, alpha: u32) -> Self {
        let n = grid.trajectory_dim();
        let a = p.to_array();
        Self { grid, fields: std::array::from_fn(|k| vec![a[k]; n]), alpha }
    }

    pub fn from_fields(grid: SpaceTimeGrid, fields: [Vec<f64>; 7], alpha: u32) -> Result<Self> {
        for f in &fields {
            if f.len() != grid.trajectory_dim() {
                return Err(Error::ShapeMismatch { expected: grid.trajectory_dim(), got: f.len() });
            }
        }
        Ok(Self { grid, fields, alpha })
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    #[inline]
    pub fn get(&self, kind: ParamKind) -> &[f64] {
        &self.fields[kind as usize]
    }

    #[inline]
    pub fn get_mut(&mut self, kind: ParamKind) -> &mut [f64] {
        &mut self.fields[kind as usize]
    }

    pub fn kappa(&self) -> &[f64] {
        self.get(ParamKind::Kappa)
    }

    pub fn tau(&self) -> &[f64] {
        self.get(ParamKind::Tau)
    }

    /// Parameter values at flat index `i`.
    pub fn at(&self, i: usize) -> StationaryParams {
        StationaryParams::from_array(std::array::from_fn(|k| self.fields[k][i]))
    }

    /// The 7 parameters averaged over all cells and times.
    pub fn mean(&self) -> StationaryParams {
        let n = self.grid.trajectory_dim() as f64;
        StationaryParams::from_array(std::array::from_fn(|k| self.fields[k].iter().sum::<f64>() / n))
    }

    /// Whether the parameters of time slab `t` equal those of `other`.
    pub fn slab_eq(&self, other: &ParamFields, t: usize) -> bool {
        let m = self.grid.state_dim();
        let r = t * m..(t + 1) * m;
        self.alpha == other.alpha && self.fields.iter().zip(&other.fields).all(|(a, b)| a[r.clone()] == b[r.clone()])
    }

    pub fn field(&self, kind: ParamKind) -> Field {
        let g = &self.grid;
        Field::new(vec![g.nt, g.ny, g.nx], self.get(kind).to_vec()).expect("shape is consistent")
    }

    pub fn flat(&self) -> impl Iterator<Item = f64> + '_ {
        self.fields.iter().flat_map(|f| f.iter().copied())
    }

    /// Clamps the fields back into the valid set: `kappa` and `tau` floored at
    /// `floor`, and each diffusion tensor with an eigenvalue below `floor`
    /// replaced by its eigenvalue-clipped version. Valid cells are untouched.
    pub fn project(&mut self, floor: f64) {
        for k in [ParamKind::Kappa, ParamKind::Tau] {
            for v in self.get_mut(k) {
                if *v < floor || v.is_nan() {
                    *v = floor;
                }
            }
        }
        let n = self.grid.trajectory_dim();
        for i in 0..n {
            let (a, b, c) = (
                self.fields[ParamKind::H11 as usize][i],
                self.fields[ParamKind::H12 as usize][i],
                self.fields[ParamKind::H22 as usize][i],
            );
            if let Some((a2, b2, c2)) = clip_spd_2x2(a, b, c, floor) {
                self.fields[ParamKind::H11 as usize][i] = a2;
                self.fields[ParamKind::H12 as usize][i] = b2;
                self.fields[ParamKind::H22 as usize][i] = c2;
            }
        }
    }
}

/// Eigenvalues of the symmetric matrix `[[a, b], [b, c]]`, ascending.
fn eig_2x2(a: f64, b: f64, c: f64) -> (f64, f64) {
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid - rad, mid + rad)
}

/// Nearest tensor with eigenvalues `>= floor`, or `None` if already there.
fn clip_spd_2x2(a: f64, b: f64, c: f64, floor: f64) -> Option<(f64, f64, f64)> {
    let (l1, l2) = eig_2x2(a, b, c);
    // slack so that a clipped tensor is a fixed point despite rounding
    if l1 >= floor * (1.0 - 1e-6) && a > 0.0 && c > 0.0 && a * c - b * b > 0.0 {
        return None;
    }
    let l2c = l2.max(floor);
    let l1c = l1.max(floor);
    // eigenvector of l2
    let (vx, vy) = if b.abs() > 1e-300 {
        (b, l2 - a)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let norm = (vx * vx + vy * vy).sqrt();
    let (vx, vy) = (vx / norm, vy / norm);
    // H = l2c v v^T + l1c w w^T with w orthogonal to v
    let (wx, wy) = (-vy, vx);
    Some((l2c * vx * vx + l1c * wx * wx, l2c * vx * vy + l1c * wx * wy, l2c * vy * vy + l1c * wy * wy))
}

/// `L[row, col] += coeff * g(kind, cell)` where `g` is `kappa^2` for
/// [`ParamKind::Kappa`] and the raw field value otherwise. Indices are within
/// one time slab.
#[derive(Debug, Clone, Copy)]
pub(crate) struct StencilEntry {
    pub row: usize,
    pub col: usize,
    pub kind: ParamKind,
    pub cell: usize,
    pub coeff: f64,
}

/// Linearized stencil of `L_t`. The operator is linear in `(kappa^2, m, H)`
/// once the upwind branch is fixed by the current sign of `m`.
pub(crate) fn stencil_entries(theta: &ParamFields, t: usize) -> Vec<StencilEntry> {
    let g = theta.grid;
    let (nx, ny) = (g.nx, g.ny);
    let m = g.state_dim();
    let base = t * m;
    let mu = &theta.get(ParamKind::AdvectionU)[base..base + m];
    let mv = &theta.get(ParamKind::AdvectionV)[base..base + m];
    let (idx2, idy2) = (1.0 / (g.dx * g.dx), 1.0 / (g.dy * g.dy));
    let mut out = Vec::with_capacity(m * 40);
    let cell = |y: usize, x: usize| y * nx + x;
    let mut push = |row: usize, col: usize, kind: ParamKind, c: usize, coeff: f64| {
        out.push(StencilEntry { row, col, kind, cell: c, coeff });
    };

    for y in 0..ny {
        for x in 0..nx {
            let i = cell(y, x);
            push(i, i, ParamKind::Kappa, i, 1.0);

            // -u d/dx, upwind on the transport velocity -u
            if mu[i] >= 0.0 {
                if x + 1 < nx {
                    push(i, i, ParamKind::AdvectionU, i, 1.0 / g.dx);
                    push(i, cell(y, x + 1), ParamKind::AdvectionU, i, -1.0 / g.dx);
                }
            } else if x > 0 {
                push(i, i, ParamKind::AdvectionU, i, -1.0 / g.dx);
                push(i, cell(y, x - 1), ParamKind::AdvectionU, i, 1.0 / g.dx);
            }
            if mv[i] >= 0.0 {
                if y + 1 < ny {
                    push(i, i, ParamKind::AdvectionV, i, 1.0 / g.dy);
                    push(i, cell(y + 1, x), ParamKind::AdvectionV, i, -1.0 / g.dy);
                }
            } else if y > 0 {
                push(i, i, ParamKind::AdvectionV, i, -1.0 / g.dy);
                push(i, cell(y - 1, x), ParamKind::AdvectionV, i, 1.0 / g.dy);
            }
        }
    }

    // quad (qx, qy) has corners (qx..=qx+1, qy..=qy+1); its tensor is the
    // corner average.
    let quad_corners = |qx: usize, qy: usize| [cell(qy, qx), cell(qy, qx + 1), cell(qy + 1, qx), cell(qy + 1, qx + 1)];

    // x-edges (x, y) -- (x + 1, y)
    for y in 0..ny {
        for x in 0..nx - 1 {
            let (a, b) = (cell(y, x), cell(y, x + 1));
            let quads: Vec<usize> = [y.checked_sub(1), (y + 1 < ny).then_some(y)].into_iter().flatten().collect();
            let w = idx2 / (4.0 * quads.len() as f64);
            for &qy in &quads {
                for c in quad_corners(x, qy) {
                    push(a, a, ParamKind::H11, c, w);
                    push(b, b, ParamKind::H11, c, w);
                    push(a, b, ParamKind::H11, c, -w);
                    push(b, a, ParamKind::H11, c, -w);
                }
            }
        }
    }
    // y-edges (x, y) -- (x, y + 1)
    for y in 0..ny - 1 {
        for x in 0..nx {
            let (a, b) = (cell(y, x), cell(y + 1, x));
            let quads: Vec<usize> = [x.checked_sub(1), (x + 1 < nx).then_some(x)].into_iter().flatten().collect();
            let w = idy2 / (4.0 * quads.len() as f64);
            for &qx in &quads {
                for c in quad_corners(qx, y) {
                    push(a, a, ParamKind::H22, c, w);
                    push(b, b, ParamKind::H22, c, w);
                    push(a, b, ParamKind::H22, c, -w);
                    push(b, a, ParamKind::H22, c, -w);
                }
            }
        }
    }
    // mixed term: energy 2 h12 gx gy with quad-centred gradients
    let wc = 1.0 / (2.0 * g.dx * g.dy) / 4.0;
    for qy in 0..ny - 1 {
        for qx in 0..nx - 1 {
            let [c00, c10, c01, c11] = quad_corners(qx, qy);
            for c in [c00, c10, c01, c11] {
                push(c00, c00, ParamKind::H12, c, wc);
                push(c11, c11, ParamKind::H12, c, wc);
                push(c10, c10, ParamKind::H12, c, -wc);
                push(c01, c01, ParamKind::H12, c, -wc);
                push(c00, c11, ParamKind::H12, c, -wc);
                push(c11, c00, ParamKind::H12, c, -wc);
                push(c10, c01, ParamKind::H12, c, wc);
                push(c01, c10, ParamKind::H12, c, wc);
            }
        }
    }
    out
}

#[inline]
fn entry_value(theta: &ParamFields, base: usize, e: &StencilEntry) -> f64 {
    let v = theta.get(e.kind)[base + e.cell];
    match e.kind {
        ParamKind::Kappa => v * v,
        _ => v,
    }
}

/// Assembles the core operator `L_t` (the `alpha = 2` case) for time slab `t`.
pub fn assemble_fdm_operator(theta: &ParamFields, t: usize) -> Result<SparseMatrix> {
    let g = theta.grid;
    if t >= g.nt {
        return Err(Error::IndexOutOfRange { axis: crate::error::Axis::T, index: t, size: g.nt });
    }
    check_spd_slab(theta, t)?;
    let m = g.state_dim();
    let base = t * m;
    let mut b = TripletBuilder::new(m, m);
    for e in stencil_entries(theta, t) {
        b.push(e.row, e.col, e.coeff * entry_value(theta, base, &e));
    }
    Ok(b.build())
}

fn check_spd_slab(theta: &ParamFields, t: usize) -> Result<()> {
    let g = theta.grid;
    let m = g.state_dim();
    for c in 0..m {
        let p = theta.at(t * m + c);
        if !(p.h11 > 0.0 && p.h22 > 0.0 && p.h11 * p.h22 - p.h12 * p.h12 > 0.0) {
            return Err(Error::NonSpdDiffusion { t, y: c / g.nx, x: c % g.nx });
        }
    }
    Ok(())
}

/// Accumulates `scale * sum_{row,col} weight(row, col) * dL_t[row, col] / d theta`
/// into `grad` (one vector per [`ParamKind`], grid order).
pub(crate) fn accumulate_operator_gradient<W>(
    theta: &ParamFields,
    t: usize,
    entries: &[StencilEntry],
    weight: W,
    scale: f64,
    grad: &mut [Vec<f64>; 7],
) where
    W: Fn(usize, usize) -> f64,
{
    let m = theta.grid.state_dim();
    let base = t * m;
    let kappa = theta.kappa();
    for e in entries {
        let w = weight(e.row, e.col);
        if w == 0.0 {
            continue;
        }
        let mut d = scale * e.coeff * w;
        if e.kind == ParamKind::Kappa {
            d *= 2.0 * kappa[base + e.cell];
        }
        grad[e.kind as usize][base + e.cell] += d;
    }
}

/// `F_core^(alpha/2)` applied by repeated sparse products.
#[derive(Debug, Clone)]
pub struct OperatorHandle {
    core: SparseMatrix,
    power: usize,
}

pub fn apply_fractional(core: SparseMatrix, alpha: u32) -> Result<OperatorHandle> {
    if alpha == 0 || alpha % 2 != 0 {
        return Err(Error::UnsupportedAlpha(alpha));
    }
    Ok(OperatorHandle { core, power: (alpha / 2) as usize })
}

impl OperatorHandle {
    pub fn power(&self) -> usize {
        self.power
    }

    pub fn core(&self) -> &SparseMatrix {
        &self.core
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for _ in 0..self.power {
            out = self.core.mul_vec(&out);
        }
        out
    }

    pub fn apply_transpose(&self, v: &[f64]) -> Vec<f64> {
        let mut out = v.to_vec();
        for _ in 0..self.power {
            out = self.core.mul_transpose_vec(&out);
        }
        out
    }

    /// Sparse `core^power`; the stencil widens by one ring per extra power.
    pub fn to_sparse(&self) -> SparseMatrix {
        let mut acc = self.core.clone();
        for _ in 1..self.power {
            acc = acc.mul(&self.core).expect("square");
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonFinite { kind: ParamKind, t: usize, y: usize, x: usize },
    NonSpdDiffusion { t: usize, y: usize, x: usize },
    NonPositiveKappa { t: usize, y: usize, x: usize },
    NonPositiveTau { t: usize, y: usize, x: usize },
    UnsupportedAlpha(u32),
}

/// Stiffness indicator `dt * max_cell(|m| / min(dx, dy) + 2 lmax(H) (1/dx^2 + 1/dy^2) + kappa^2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityAdvisory {
    pub statistic: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    pub statistic: f64,
    pub advisory: Option<StabilityAdvisory>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        Self::first_error(&self.violations)
    }

    /// Like [`Self::into_result`] but ignoring sign violations of `kappa`
    /// and `tau`; the operator only sees `kappa^2`, and `tau = 0` is a
    /// legitimate noiseless recursion.
    pub fn structural_result(&self) -> Result<()> {
        let hard: Vec<Violation> = self
            .violations
            .iter()
            .filter(|v| !matches!(v, Violation::NonPositiveKappa { .. } | Violation::NonPositiveTau { .. }))
            .cloned()
            .collect();
        Self::first_error(&hard)
    }

    fn first_error(violations: &[Violation]) -> Result<()> {
        match violations.first() {
            None => Ok(()),
            Some(Violation::NonSpdDiffusion { t, y, x }) => Err(Error::NonSpdDiffusion { t: *t, y: *y, x: *x }),
            Some(Violation::UnsupportedAlpha(a)) => Err(Error::UnsupportedAlpha(*a)),
            Some(v) => Err(Error::InvalidParams(format!("{v:?} ({} violations)", violations.len()))),
        }
    }
}

pub const DEFAULT_ADVISORY_THRESHOLD: f64 = 50.0;

pub fn validate_params(theta: &ParamFields) -> ValidationReport {
    validate_params_with(theta, DEFAULT_ADVISORY_THRESHOLD)
}

pub fn validate_params_with(theta: &ParamFields, threshold: f64) -> ValidationReport {
    let g = theta.grid;
    let m = g.state_dim();
    let mut violations = Vec::new();
    if !matches!(theta.alpha, 2 | 4 | 6) {
        violations.push(Violation::UnsupportedAlpha(theta.alpha));
    }
    let hmin = g.dx.min(g.dy);
    let lap = 1.0 / (g.dx * g.dx) + 1.0 / (g.dy * g.dy);
    let mut stat: f64 = 0.0;
    for i in 0..g.trajectory_dim() {
        let (t, y, x) = (i / m, (i % m) / g.nx, i % g.nx);
        let p = theta.at(i);
        if let Some(&kind) = ParamKind::ALL.iter().find(|&&k| !theta.get(k)[i].is_finite()) {
            violations.push(Violation::NonFinite { kind, t, y, x });
            continue;
        }
        if !(p.h11 > 0.0 && p.h22 > 0.0 && p.h11 * p.h22 - p.h12 * p.h12 > 0.0) {
            violations.push(Violation::NonSpdDiffusion { t, y, x });
        }
        if p.kappa <= 0.0 {
            violations.push(Violation::NonPositiveKappa { t, y, x });
        }
        if p.tau <= 0.0 {
            violations.push(Violation::NonPositiveTau { t, y, x });
        }
        let speed = (p.m_u * p.m_u + p.m_v * p.m_v).sqrt();
        let lmax = eig_2x2(p.h11, p.h12, p.h22).1;
        stat = stat.max(speed / hmin + 2.0 * lmax * lap + p.kappa * p.kappa);
    }
    let statistic = g.dt * stat;
    let advisory = (statistic > threshold).then_some(StabilityAdvisory { statistic, threshold });
    ValidationReport { violations, statistic, advisory }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(nx: usize, ny: usize, nt: usize) -> SpaceTimeGrid {
        SpaceTimeGrid::unit(nx, ny, nt).unwrap()
    }

    #[test]
    fn laplacian_plus_identity_interior_row() {
        let g = SpaceTimeGrid::new(5, 4, 2, 0.5, 2.0, 1.0).unwrap();
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        let l = assemble_fdm_operator(&theta, 0).unwrap();
        let i = g.cell(2, 2);
        let (idx2, idy2) = (1.0 / 0.25, 1.0 / 4.0);
        assert!((l.get(i, i) - (1.0 + 2.0 * idx2 + 2.0 * idy2)).abs() < 1e-12);
        assert!((l.get(i, i + 1) + idx2).abs() < 1e-12);
        assert!((l.get(i, i - 1) + idx2).abs() < 1e-12);
        assert!((l.get(i, i + 5) + idy2).abs() < 1e-12);
        assert!((l.get(i, i - 5) + idy2).abs() < 1e-12);
        assert_eq!(l.row(i).0.len(), 5);
    }

    #[test]
    fn constants_in_kernel_without_kappa() {
        let g = grid(6, 5, 2);
        let mut theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        theta.get_mut(ParamKind::Kappa).fill(0.0);
        let l = assemble_fdm_operator(&theta, 1).unwrap();
        let y = l.mul_vec(&vec![3.0; g.state_dim()]);
        assert!(y.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn spd_violation_reported() {
        let g = grid(4, 4, 2);
        let mut theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        assert!(validate_params(&theta).is_valid());
        let idx = g.flatten_index(1, 2, 3).unwrap();
        theta.get_mut(ParamKind::H12)[idx] = 5.0;
        let rep = validate_params(&theta);
        assert_eq!(rep.violations, vec![Violation::NonSpdDiffusion { t: 1, y: 2, x: 3 }]);
        assert!(matches!(assemble_fdm_operator(&theta, 1), Err(Error::NonSpdDiffusion { t: 1, y: 2, x: 3 })));
        assert!(assemble_fdm_operator(&theta, 0).is_ok());
    }

    #[test]
    fn stability_advisory_uniform_field() {
        // dt * (0 + 2 * 1 * (1 + 1) + 100) = 104 > 50
        let g = grid(4, 4, 2);
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(10.0, 1.0), 2);
        let rep = validate_params(&theta);
        assert!(rep.is_valid());
        let adv = rep.advisory.expect("advisory");
        assert!((adv.statistic - 104.0).abs() < 1e-12);
        let quiet = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 2);
        assert!(validate_params(&quiet).advisory.is_none());
    }

    #[test]
    fn non_positive_and_alpha_violations() {
        let g = grid(3, 3, 2);
        let mut theta = ParamFields::stationary(g, StationaryParams::isotropic(1.0, 1.0), 3);
        theta.get_mut(ParamKind::Tau)[0] = 0.0;
        theta.get_mut(ParamKind::Kappa)[1] = -1.0;
        let rep = validate_params(&theta);
        assert!(rep.violations.contains(&Violation::UnsupportedAlpha(3)));
        assert!(rep.violations.contains(&Violation::NonPositiveTau { t: 0, y: 0, x: 0 }));
        assert!(rep.violations.contains(&Violation::NonPositiveKappa { t: 0, y: 0, x: 1 }));
    }

    #[test]
    fn fractional_alpha_handling() {
        assert!(matches!(apply_fractional(SparseMatrix::identity(2), 3), Err(Error::UnsupportedAlpha(3))));
        assert!(matches!(apply_fractional(SparseMatrix::identity(2), 0), Err(Error::UnsupportedAlpha(0))));
        let g = grid(4, 4, 2);
        let theta = ParamFields::stationary(g, StationaryParams::isotropic(0.7, 1.0), 2);
        let l = assemble_fdm_operator(&theta, 0).unwrap();
        let v: Vec<f64> = (0..16).map(|i| (i as f64 * 1.3).sin()).collect();
        let h2 = apply_fractional(l.clone(), 2).unwrap();
        assert_eq!(h2.apply(&v), l.mul_vec(&v));
        let h4 = apply_fractional(l.clone(), 4).unwrap();
        let twice = l.mul_vec(&l.mul_vec(&v));
        let got = h4.apply(&v);
        for i in 0..16 {
            assert!((got[i] - twice[i]).abs() < 1e-14);
        }
        let sparse_sq = h4.to_sparse().mul_vec(&v);
        for i in 0..16 {
            assert!((sparse_sq[i] - twice[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_clips_and_is_idempotent() {
        let g = grid(3, 3, 2);
        let mut theta = ParamFields::stationary(
            g,
            StationaryParams { kappa: 0.5, m_u: 0.1, m_v: -0.2, h11: 1.0, h12: 0.3, h22: 0.8, tau: 1.0 },
            2,
        );
        let before = theta.clone();
        theta.project(1e-6);
        assert_eq!(theta, before);

        theta.get_mut(ParamKind::H12)[4] = 5.0;
        theta.get_mut(ParamKind::Kappa)[2] = -3.0;
        theta.get_mut(ParamKind::Tau)[3] = 0.0;
        theta.project(1e-6);
        assert!(validate_params(&theta).is_valid());
        assert_eq!(theta.kappa()[2], 1e-6);
        let p = theta.at(4);
        let (l1, _) = eig_2x2(p.h11, p.h12, p.h22);
        assert!(l1 >= 1e-6 * (1.0 - 1e-9));
        let once = theta.clone();
        theta.project(1e-6);
        assert_eq!(theta, once);
    }
}
