use ndarray::{Array2, ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor of rank ≤ 4 with an optional gradient buffer.
///
/// Parameters (network weights, variational parameters, latent points) live in
/// `Tensor`s. A graph pass borrows their data, and [`crate::numerics::Gradients`]
/// are written back into `grad` before an optimizer step consumes them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    #[serde(skip)]
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::Dimension(format!("rank {} exceeds 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros shape is consistent")
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("filled shape is consistent")
    }

    pub fn scalar(value: f32) -> Self {
        Tensor::new(&[], vec![value]).expect("scalar shape is consistent")
    }

    pub fn from_array(a: Array2<f32>) -> Self {
        let shape = [a.nrows(), a.ncols()];
        let data = if a.is_standard_layout() {
            a.into_raw_vec_and_offset().0
        } else {
            a.iter().copied().collect()
        };
        Tensor::new(&shape, data).expect("array shape is consistent")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Interprets the tensor as a matrix: rank-2 as is, rank-1 as a single row.
    pub fn view2(&self) -> ArrayView2<'_, f32> {
        let (r, c) = self.matrix_dims();
        ArrayView2::from_shape((r, c), &self.data).expect("matrix view")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, f32> {
        let (r, c) = self.matrix_dims();
        ArrayViewMut2::from_shape((r, c), &mut self.data).expect("matrix view")
    }

    pub fn to_array2(&self) -> Array2<f32> {
        self.view2().to_owned()
    }

    fn matrix_dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [r, c] => (*r, *c),
            s => (s[0], s[1..].iter().product()),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Accumulates `g` into the gradient buffer.
    pub fn accumulate_grad(&mut self, g: &[f32]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(Error::Dimension(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Order-sensitive FNV-1a digest of the raw bits, for cheap
    /// "did anything change" assertions.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_bits().to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}
