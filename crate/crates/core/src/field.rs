//! Grid primitives shared by every solver: scalar fields with boundary
//! conditions, images, the double-well potential, and the 5-point Laplacian.
//!
//! Fields are row-major `f64` grids. Boundary conditions are realized purely
//! through ghost-cell padding: zero-flux Neumann pads by edge replication
//! (which makes the one-sided normal difference exactly zero) and periodic
//! pads by wrapping.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Boundary condition attached to a [`ScalarField`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryCondition {
    /// du/dn = 0, realized by edge-replicating ghost cells.
    NeumannZeroFlux,
    /// Wrap-around domain.
    Periodic,
}

impl BoundaryCondition {
    /// Map a (possibly out-of-range) signed index onto a valid one.
    #[inline]
    pub fn map(self, i: isize, n: usize) -> usize {
        let n = n as isize;
        let j = match self {
            BoundaryCondition::NeumannZeroFlux => i.clamp(0, n - 1),
            BoundaryCondition::Periodic => i.rem_euclid(n),
        };
        j as usize
    }
}

/// One H x W real-valued grid (u, v, or phi) with a boundary condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    height: usize,
    width: usize,
    values: Vec<f64>,
    bc: BoundaryCondition,
}

impl ScalarField {
    /// Constant-filled field.
    pub fn filled(height: usize, width: usize, value: f64, bc: BoundaryCondition) -> Self {
        assert!(height >= 1 && width >= 1, "field must be at least 1x1");
        ScalarField { height, width, values: vec![value; height * width], bc }
    }

    /// All-zero field.
    pub fn zeros(height: usize, width: usize, bc: BoundaryCondition) -> Self {
        Self::filled(height, width, 0.0, bc)
    }

    /// Build from row-major values; rejects length mismatches and non-finite entries.
    pub fn from_values(
        height: usize,
        width: usize,
        values: Vec<f64>,
        bc: BoundaryCondition,
    ) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "expected {}x{}={} values, got {}",
                height,
                width,
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParam(format!("non-finite field value {v}")));
        }
        Ok(ScalarField { height, width, values, bc })
    }

    /// Build from a per-cell function of (row, col).
    pub fn from_fn(
        height: usize,
        width: usize,
        bc: BoundaryCondition,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Self {
        let mut values = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                values.push(f(i, j));
            }
        }
        ScalarField { height, width, values, bc }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    /// Replace the boundary condition, keeping values.
    pub fn with_bc(mut self, bc: BoundaryCondition) -> Self {
        self.bc = bc;
        self
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.values[i * self.width + j] = v;
    }

    /// Neighbor access through the boundary condition.
    #[inline]
    pub fn get_bc(&self, i: isize, j: isize) -> f64 {
        let ii = self.bc.map(i, self.height);
        let jj = self.bc.map(j, self.width);
        self.values[ii * self.width + jj]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Discrete squared L2 norm: h^2 * sum(u^2).
    pub fn norm_sq(&self, h: f64) -> f64 {
        h * h * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    /// Max-norm of the difference with another field of the same shape.
    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Apply a closure cellwise, producing a new field with the same bc.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ScalarField {
        ScalarField {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| f(v)).collect(),
            bc: self.bc,
        }
    }

    /// Elementwise combination of two same-shape fields; bc is taken from `self`.
    pub fn zip_map(&self, other: &ScalarField, f: impl Fn(f64, f64) -> f64) -> ScalarField {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        ScalarField {
            height: self.height,
            width: self.width,
            values: self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect(),
            bc: self.bc,
        }
    }
}

/// Image of shape H x W x D with values in [0, 1]; D is 1 (gray) or 3 (RGB).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f64>, // interleaved rows: (i, j, d)
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidParam(format!("image channels must be 1 or 3, got {channels}")));
        }
        if values.len() != height * width * channels {
            return Err(Error::ShapeMismatch(format!(
                "expected {} image values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidParam("image values must lie in [0,1]".into()));
        }
        Ok(ImageTensor { height, width, channels, values })
    }

    /// Grayscale image from a field, clamping into [0,1].
    pub fn from_field_clamped(f: &ScalarField) -> Self {
        ImageTensor {
            height: f.height(),
            width: f.width(),
            channels: 1,
            values: f.values().iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, d: usize) -> f64 {
        self.values[(i * self.width + j) * self.channels + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Reduce to a single luminance channel (Rec. 601 weights for RGB).
    pub fn luminance(&self) -> ScalarField {
        let mut out = ScalarField::zeros(self.height, self.width, BoundaryCondition::NeumannZeroFlux);
        for i in 0..self.height {
            for j in 0..self.width {
                let v = if self.channels == 1 {
                    self.get(i, j, 0)
                } else {
                    0.299 * self.get(i, j, 0) + 0.587 * self.get(i, j, 1) + 0.114 * self.get(i, j, 2)
                };
                out.set(i, j, v);
            }
        }
        out
    }
}

/// The 5-point Laplacian stencil (1/h^2) [[0,1,0],[1,-4,1],[0,1,0]].
#[derive(Debug, Clone, Copy)]
pub struct LaplacianKernel {
    pub taps: [[f64; 3]; 3],
    pub h: f64,
}

impl LaplacianKernel {
    pub fn new(h: f64) -> Self {
        assert!(h > 0.0);
        let s = 1.0 / (h * h);
        LaplacianKernel {
            taps: [[0.0, s, 0.0], [s, -4.0 * s, s], [0.0, s, 0.0]],
            h,
        }
    }

    /// Kernel taps sum to zero exactly.
    pub fn tap_sum(&self) -> f64 {
        self.taps.iter().flatten().sum()
    }
}

/// Double-well potential W(u) = u^2 (u - 1)^2.
#[inline]
pub fn double_well(u: f64) -> f64 {
    let a = u * (u - 1.0);
    a * a
}

/// W'(u) = 4u^3 - 6u^2 + 2u.
#[inline]
pub fn double_well_prime(u: f64) -> f64 {
    u * (4.0 * u * u - 6.0 * u + 2.0)
}

/// W''(u) = 12u^2 - 12u + 2, used for empirical Lipschitz bounds.
#[inline]
pub fn double_well_second(u: f64) -> f64 {
    12.0 * u * u - 12.0 * u + 2.0
}

/// Enlarge a field by `width` ghost cells per side, filled per its bc.
///
/// Interior values are unchanged; the returned field keeps the same bc.
pub fn pad(field: &ScalarField, width: usize) -> ScalarField {
    assert!(width >= 1, "pad width must be >= 1");
    let (h, w) = (field.height(), field.width());
    let bc = field.bc();
    ScalarField::from_fn(h + 2 * width, w + 2 * width, bc, |i, j| {
        field.get_bc(i as isize - width as isize, j as isize - width as isize)
    })
}

/// Drop `width` ghost cells per side (inverse of [`pad`] on the interior).
pub fn unpad(field: &ScalarField, width: usize) -> ScalarField {
    let (h, w) = (field.height(), field.width());
    assert!(h > 2 * width && w > 2 * width);
    ScalarField::from_fn(h - 2 * width, w - 2 * width, field.bc(), |i, j| {
        field.get(i + width, j + width)
    })
}

/// Central-difference Laplacian under the field's boundary condition.
pub fn laplacian_fdm(field: &ScalarField, h: f64) -> ScalarField {
    assert!(h > 0.0);
    let p = pad(field, 1);
    let inv_h2 = 1.0 / (h * h);
    let (nh, nw) = (field.height(), field.width());
    ScalarField::from_fn(nh, nw, field.bc(), |i, j| {
        let c = p.get(i + 1, j + 1);
        let s = p.get(i, j + 1) + p.get(i + 2, j + 1) + p.get(i + 1, j) + p.get(i + 1, j + 2);
        (s - 4.0 * c) * inv_h2
    })
}

/// Ginzburg-Landau energy: sum over cells of
/// ((eps1/2)|grad u|^2 + W(u)/eps2) * h^2, forward differences under the bc.
pub fn gl_energy(u: &ScalarField, eps1: f64, eps2: f64, h: f64) -> f64 {
    assert!(eps1 > 0.0 && eps2 > 0.0 && h > 0.0);
    let (nh, nw) = (u.height(), u.width());
    let mut total = 0.0;
    for i in 0..nh {
        for j in 0..nw {
            let c = u.get(i, j);
            let dx = (u.get_bc(i as isize, j as isize + 1) - c) / h;
            let dy = (u.get_bc(i as isize + 1, j as isize) - c) / h;
            total += (0.5 * eps1 * (dx * dx + dy * dy) + double_well(c) / eps2) * h * h;
        }
    }
    total
}
