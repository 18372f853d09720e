//! Dense NCHW tensor backing the reverse-mode tape.

use crate::error::{Error, Result};
use crate::field::{BoundaryCondition, ImageTensor, ScalarField};

/// Dense 4-D tensor, shape (N, C, H, W), row-major in W fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor { n, c, h, w, data: vec![0.0; n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, v: f64) -> Self {
        Tensor { n, c, h, w, data: vec![v; n * c * h * w] }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::ShapeMismatch(format!(
                "tensor ({n},{c},{h},{w}) needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    /// Scalar (1,1,1,1) tensor.
    pub fn scalar(v: f64) -> Self {
        Tensor { n: 1, c: 1, h: 1, w: 1, data: vec![v] }
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Accumulate `other` into self (shapes must match).
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Single-sample single-channel view of a field.
    pub fn from_field(f: &ScalarField) -> Tensor {
        Tensor { n: 1, c: 1, h: f.height(), w: f.width(), data: f.values().to_vec() }
    }

    /// Single-sample image, channels-first.
    pub fn from_image(img: &ImageTensor) -> Tensor {
        let (h, w, d) = (img.height(), img.width(), img.channels());
        let mut t = Tensor::zeros(1, d, h, w);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    *t.at_mut(0, k, i, j) = img.get(i, j, k);
                }
            }
        }
        t
    }

    /// Extract batch item `n`, channel `c` as a field with the given bc.
    pub fn to_field(&self, n: usize, c: usize, bc: BoundaryCondition) -> ScalarField {
        ScalarField::from_fn(self.h, self.w, bc, |i, j| self.at(n, c, i, j))
    }
}
