//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a contiguous row-major buffer plus a shape. Tensors are
//! detached by default; attaching one to a [`Tape`] as a leaf makes every
//! downstream operation record a backward rule, and [`Tape::backward`]
//! fills per-node gradient buffers. Broadcasting is deliberately limited:
//! elementwise ops require identical shapes, and the only implicit
//! expansion is a per-row bias in `add_row`.

mod conv;
mod tape;

pub use tape::Tape;
pub(crate) use tape::gemm_nt;

use std::sync::Arc;

use crate::error::{Error, Result};

/// n-dimensional f32 array. Cheap to clone (data is shared).
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f32>>,
    /// Tape node id when this tensor participates in gradient tracking.
    node: Option<usize>,
}

impl Tensor {
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                detail: format!("shape {:?} wants {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(vec![v], &[1]).unwrap()
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; numel]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node(&self) -> Option<usize> {
        self.node
    }

    pub(crate) fn with_node(shape: Vec<usize>, data: Vec<f32>, node: Option<usize>) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(data),
            node,
        }
    }

    /// Same data viewed under a different shape; keeps tape attachment
    /// (reshape is gradient-transparent).
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("{:?} -> {:?}", self.shape, shape),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            node: self.node,
        })
    }

    /// Copy without tape attachment. A detached tensor never accumulates
    /// gradient.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::clone(&self.data),
            node: None,
        }
    }

    /// Elementwise sign with sign(0) = 0. Not differentiable; always detached.
    pub fn sign(&self) -> Tensor {
        let data = self
            .data
            .iter()
            .map(|&v| {
                if v > 0.0 {
                    1.0
                } else if v < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect();
        Tensor::with_node(self.shape.clone(), data, None)
    }

    /// Elementwise clamp to [lo, hi]. Detached utility (used for pixel boxes).
    pub fn clamp(&self, lo: f32, hi: f32) -> Tensor {
        let data = self.data.iter().map(|&v| v.clamp(lo, hi)).collect();
        Tensor::with_node(self.shape.clone(), data, None)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::with_node(self.shape.clone(), data, None)
    }
}

pub(crate) fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}
