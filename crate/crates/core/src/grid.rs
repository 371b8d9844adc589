//! Grid geometry, index ordering and the field/trajectory containers.
//!
//! All state vectors are flattened t-major, then y, then x:
//! `index = t * ny * nx + y * nx + x`. Go through [`SpaceTimeGrid::flatten_index`]
//! rather than recomputing the arithmetic by hand.

use crate::error::{Axis, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpaceTimeGrid {
    pub nx: usize,
    pub ny: usize,
    /// Number of stored states, including the initial one.
    pub nt: usize,
    pub dx: f64,
    pub dy: f64,
    pub dt: f64,
}

impl SpaceTimeGrid {
    pub fn new(nx: usize, ny: usize, nt: usize, dx: f64, dy: f64, dt: f64) -> Result<Self> {
        if nx < 3 || ny < 3 {
            return Err(Error::InvalidGrid(format!("need nx >= 3 and ny >= 3, got nx={nx}, ny={ny}")));
        }
        if nt < 2 {
            return Err(Error::InvalidGrid(format!("need nt >= 2, got {nt}")));
        }
        for (name, v) in [("dx", dx), ("dy", dy), ("dt", dt)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidGrid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { nx, ny, nt, dx, dy, dt })
    }

    /// Unit steps in space and time.
    pub fn unit(nx: usize, ny: usize, nt: usize) -> Result<Self> {
        Self::new(nx, ny, nt, 1.0, 1.0, 1.0)
    }

    /// Number of cells per time slab.
    #[inline]
    pub fn state_dim(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn trajectory_dim(&self) -> usize {
        self.nt * self.state_dim()
    }

    #[inline]
    pub fn cell(&self, y: usize, x: usize) -> usize {
        y * self.nx + x
    }

    pub fn flatten_index(&self, t: usize, y: usize, x: usize) -> Result<usize> {
        for (axis, index, size) in [(Axis::T, t, self.nt), (Axis::Y, y, self.ny), (Axis::X, x, self.nx)] {
            if index >= size {
                return Err(Error::IndexOutOfRange { axis, index, size });
            }
        }
        Ok(t * self.state_dim() + self.cell(y, x))
    }

    pub fn unflatten_index(&self, index: usize) -> Result<(usize, usize, usize)> {
        let dim = self.trajectory_dim();
        if index >= dim {
            return Err(Error::IndexOutOfRange { axis: Axis::T, index: index / self.state_dim(), size: self.nt });
        }
        let m = self.state_dim();
        let t = index / m;
        let rem = index % m;
        Ok((t, rem / self.nx, rem % self.nx))
    }
}

/// A dense real array with explicit dims, slowest-varying first.
#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    dims: Vec<usize>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch { expected, got: values.len() });
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidParams(format!("non-finite value at flat index {pos}")));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Self { dims, values: vec![0.0; n] }
    }

    pub fn filled(dims: Vec<usize>, value: f64) -> Self {
        let n = dims.iter().product();
        Self { dims, values: vec![value; n] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A state sequence `x_0, ..., x_{nt-1}` stored flat in grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    grid: SpaceTimeGrid,
    data: Vec<f64>,
}

impl Trajectory {
    pub fn zeros(grid: SpaceTimeGrid) -> Self {
        Self { grid, data: vec![0.0; grid.trajectory_dim()] }
    }

    pub fn from_vec(grid: SpaceTimeGrid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.trajectory_dim() {
            return Err(Error::ShapeMismatch { expected: grid.trajectory_dim(), got: data.len() });
        }
        Ok(Self { grid, data })
    }

    pub fn from_field(grid: SpaceTimeGrid, field: &Field) -> Result<Self> {
        if field.dims() != [grid.nt, grid.ny, grid.nx] {
            return Err(Error::InvalidGrid(format!(
                "field dims {:?} do not match grid ({}, {}, {})",
                field.dims(),
                grid.nt,
                grid.ny,
                grid.nx
            )));
        }
        Self::from_vec(grid, field.values().to_vec())
    }

    pub fn to_field(&self) -> Field {
        Field { dims: vec![self.grid.nt, self.grid.ny, self.grid.nx], values: self.data.clone() }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn slab(&self, t: usize) -> &[f64] {
        let m = self.grid.state_dim();
        &self.data[t * m..(t + 1) * m]
    }

    pub fn slab_mut(&mut self, t: usize) -> &mut [f64] {
        let m = self.grid.state_dim();
        &mut self.data[t * m..(t + 1) * m]
    }

    pub fn dot(&self, other: &Trajectory) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Trajectory) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |acc: f64, (a, b)| acc.max((a - b).abs()))
    }

    pub(crate) fn check_grid(&self, grid: &SpaceTimeGrid) -> Result<()> {
        if self.data.len() != grid.trajectory_dim() {
            return Err(Error::ShapeMismatch { expected: grid.trajectory_dim(), got: self.data.len() });
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_examples() {
        let g = SpaceTimeGrid::unit(4, 3, 3).unwrap();
        assert_eq!(g.flatten_index(0, 0, 0).unwrap(), 0);
        assert_eq!(g.flatten_index(1, 0, 0).unwrap(), 12);
        assert_eq!(g.flatten_index(2, 1, 3).unwrap(), 31);
    }

    #[test]
    fn flatten_out_of_range_names_axis() {
        let g = SpaceTimeGrid::unit(4, 3, 3).unwrap();
        match g.flatten_index(0, 3, 0) {
            Err(Error::IndexOutOfRange { axis: Axis::Y, index: 3, size: 3 }) => {}
            other => panic!("unexpected {other:?}"),
        }
        match g.flatten_index(0, 0, 4) {
            Err(Error::IndexOutOfRange { axis: Axis::X, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(g.flatten_index(3, 0, 0), Err(Error::IndexOutOfRange { axis: Axis::T, .. })));
    }

    #[test]
    fn flatten_unflatten_bijective() {
        let g = SpaceTimeGrid::unit(5, 3, 4).unwrap();
        for i in 0..g.trajectory_dim() {
            let (t, y, x) = g.unflatten_index(i).unwrap();
            assert_eq!(g.flatten_index(t, y, x).unwrap(), i);
        }
        assert!(g.unflatten_index(g.trajectory_dim()).is_err());
    }

    #[test]
    fn grid_validation() {
        assert!(SpaceTimeGrid::unit(2, 3, 2).is_err());
        assert!(SpaceTimeGrid::unit(3, 3, 1).is_err());
        assert!(SpaceTimeGrid::new(3, 3, 2, 0.0, 1.0, 1.0).is_err());
        assert!(SpaceTimeGrid::new(3, 3, 2, 1.0, 1.0, f64::NAN).is_err());
    }

    #[test]
    fn field_rejects_non_finite() {
        assert!(Field::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Field::new(vec![2, 2], vec![1.0; 3]).is_err());
    }
}
