//! Gradient tape: records backward rules during the forward pass and
//! replays them in reverse topological order.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::{same_shape, Tensor};

/// Per-node gradient buffers, indexed by tape node id.
pub(crate) struct Grads(Vec<Option<Vec<f32>>>);

impl Grads {
    /// Zero-initialized slot for accumulation.
    fn slot(&mut self, node: usize, len: usize) -> &mut [f32] {
        self.0[node].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn accumulate(&mut self, node: Option<usize>, len: usize, f: impl FnOnce(&mut [f32])) {
        if let Some(id) = node {
            f(self.slot(id, len));
        }
    }
}

type BackFn = Box<dyn Fn(&[f32], &mut Grads)>;

struct Node {
    backward: Option<BackFn>,
}

struct TapeInner {
    nodes: Vec<Node>,
    grads: Grads,
    done: bool,
}

/// Recording of one forward computation. Confined to a single logical
/// thread; create a fresh tape (or `reset`) per forward/backward cycle.
pub struct Tape {
    inner: RefCell<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape {
            inner: RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Grads(Vec::new()),
                done: false,
            }),
        }
    }

    /// Attach a tensor as a gradient-tracked leaf.
    pub fn leaf(&self, t: &Tensor) -> Tensor {
        let id = self.push(None);
        Tensor::with_node(t.shape().to_vec(), t.data().to_vec(), Some(id))
    }

    fn push(&self, backward: Option<BackFn>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { backward });
        inner.grads.0.push(None);
        inner.nodes.len() - 1
    }

    /// Build an op output: records `back` when any input was attached.
    pub(crate) fn out(
        &self,
        shape: Vec<usize>,
        data: Vec<f32>,
        attached: bool,
        back: impl FnOnce() -> BackFn,
    ) -> Tensor {
        let node = if attached {
            Some(self.push(Some(back())))
        } else {
            None
        };
        Tensor::with_node(shape, data, node)
    }

    pub fn node_count(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    /// Drop all recorded nodes and gradients. After reset, a fresh forward
    /// and backward reproduce the original gradients exactly.
    pub fn reset(&self) {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.clear();
        inner.grads.0.clear();
        inner.done = false;
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once,
    /// in reverse recording order. Calling twice without `reset` is an error.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        let id = loss
            .node()
            .ok_or_else(|| Error::Autodiff("backward on a detached tensor".into()))?;
        if loss.numel() != 1 {
            return Err(Error::Autodiff(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        let inner = &mut *self.inner.borrow_mut();
        if inner.done {
            return Err(Error::Autodiff(
                "backward called twice without tape reset".into(),
            ));
        }
        inner.done = true;
        inner.grads.slot(id, 1)[0] = 1.0;
        for i in (0..=id).rev() {
            let Some(g) = inner.grads.0[i].take() else {
                continue;
            };
            if let Some(back) = &inner.nodes[i].backward {
                back(&g, &mut inner.grads);
            }
            inner.grads.0[i] = Some(g);
        }
        Ok(())
    }

    /// Gradient accumulated for an attached tensor, if any.
    pub fn grad(&self, t: &Tensor) -> Option<Vec<f32>> {
        let id = t.node()?;
        self.inner.borrow().grads.0[id].clone()
    }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

impl Tape {
    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("add", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let (na, nb, len) = (a.node(), b.node(), a.numel());
        Ok(self.out(a.shape().to_vec(), data, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| axpy(s, g, 1.0));
                grads.accumulate(nb, len, |s| axpy(s, g, 1.0));
            })
        }))
    }

    pub fn sub(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("sub", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
        let (na, nb, len) = (a.node(), b.node(), a.numel());
        Ok(self.out(a.shape().to_vec(), data, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| axpy(s, g, 1.0));
                grads.accumulate(nb, len, |s| axpy(s, g, -1.0));
            })
        }))
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("mul", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let (na, nb, len) = (a.node(), b.node(), a.numel());
        let (da, db) = (a.data().to_vec(), b.data().to_vec());
        Ok(self.out(a.shape().to_vec(), data, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for i in 0..len {
                        s[i] += g[i] * db[i];
                    }
                });
                grads.accumulate(nb, len, |s| {
                    for i in 0..len {
                        s[i] += g[i] * da[i];
                    }
                });
            })
        }))
    }

    pub fn div(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("div", a, b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x / y).collect();
        let (na, nb, len) = (a.node(), b.node(), a.numel());
        let (da, db) = (a.data().to_vec(), b.data().to_vec());
        Ok(self.out(a.shape().to_vec(), data, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for i in 0..len {
                        s[i] += g[i] / db[i];
                    }
                });
                grads.accumulate(nb, len, |s| {
                    for i in 0..len {
                        s[i] -= g[i] * da[i] / (db[i] * db[i]);
                    }
                });
            })
        }))
    }

    pub fn scale(&self, a: &Tensor, c: f32) -> Tensor {
        let data = a.data().iter().map(|&x| x * c).collect();
        let (na, len) = (a.node(), a.numel());
        self.out(a.shape().to_vec(), data, na.is_some(), || {
            Box::new(move |g, grads| grads.accumulate(na, len, |s| axpy(s, g, c)))
        })
    }

    pub fn add_scalar(&self, a: &Tensor, c: f32) -> Tensor {
        let data = a.data().iter().map(|&x| x + c).collect();
        let (na, len) = (a.node(), a.numel());
        self.out(a.shape().to_vec(), data, na.is_some(), || {
            Box::new(move |g, grads| grads.accumulate(na, len, |s| axpy(s, g, 1.0)))
        })
    }

    pub fn relu(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| x.max(0.0)).collect();
        let (na, len) = (a.node(), a.numel());
        let da = a.data().to_vec();
        self.out(a.shape().to_vec(), data, na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for i in 0..len {
                        if da[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                })
            })
        })
    }

    pub fn abs(&self, a: &Tensor) -> Tensor {
        let data = a.data().iter().map(|&x| x.abs()).collect();
        let (na, len) = (a.node(), a.numel());
        let da = a.data().to_vec();
        self.out(a.shape().to_vec(), data, na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for i in 0..len {
                        s[i] += g[i] * sign(da[i]);
                    }
                })
            })
        })
    }

    pub fn sum(&self, a: &Tensor) -> Tensor {
        let total: f32 = a.data().iter().sum();
        let (na, len) = (a.node(), a.numel());
        self.out(vec![1], vec![total], na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for v in s.iter_mut() {
                        *v += g[0];
                    }
                })
            })
        })
    }

    pub fn mean(&self, a: &Tensor) -> Tensor {
        let n = a.numel() as f32;
        let total: f32 = a.data().iter().sum();
        let (na, len) = (a.node(), a.numel());
        self.out(vec![1], vec![total / n], na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    let gv = g[0] / n;
                    for v in s.iter_mut() {
                        *v += gv;
                    }
                })
            })
        })
    }

    /// Mean of a vector restricted to masked-in entries. Empty mask gives 0
    /// with zero gradient.
    pub fn masked_mean(&self, a: &Tensor, mask: &[bool]) -> Result<Tensor> {
        if a.shape().len() != 1 || a.numel() != mask.len() {
            return Err(Error::Shape {
                op: "masked_mean",
                detail: format!("vector {:?} vs mask len {}", a.shape(), mask.len()),
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        let total: f32 = a
            .data()
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| v)
            .sum();
        let value = if count == 0 { 0.0 } else { total / count as f32 };
        let (na, len) = (a.node(), a.numel());
        let mask = mask.to_vec();
        Ok(self.out(vec![1], vec![value], na.is_some() && count > 0, || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    let gv = g[0] / count as f32;
                    for i in 0..len {
                        if mask[i] {
                            s[i] += gv;
                        }
                    }
                })
            })
        }))
    }

    /// Euclidean norm of the whole tensor as a scalar.
    pub fn l2norm(&self, a: &Tensor) -> Tensor {
        let n = a.data().iter().map(|&x| x * x).sum::<f32>().sqrt();
        let (na, len) = (a.node(), a.numel());
        let da = a.data().to_vec();
        self.out(vec![1], vec![n], na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    if n > 0.0 {
                        let gv = g[0] / n;
                        for i in 0..len {
                            s[i] += gv * da[i];
                        }
                    }
                })
            })
        })
    }

    /// Per-row dot product of two B x d matrices, giving a length-B vector.
    pub fn rowwise_dot(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        same_shape("rowwise_dot", a, b)?;
        let (rows, cols) = rows_cols("rowwise_dot", a)?;
        let data: Vec<f32> = (0..rows)
            .map(|r| {
                let s = r * cols;
                dot(&a.data()[s..s + cols], &b.data()[s..s + cols])
            })
            .collect();
        let (na, nb, len) = (a.node(), b.node(), a.numel());
        let (da, db) = (a.data().to_vec(), b.data().to_vec());
        Ok(self.out(vec![rows], data, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[r] * db[r * cols + c];
                        }
                    }
                });
                grads.accumulate(nb, len, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[r * cols + c] += g[r] * da[r * cols + c];
                        }
                    }
                });
            })
        }))
    }

    /// Per-row L2 norm of a B x d matrix, giving a length-B vector.
    pub fn rowwise_norm(&self, a: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols("rowwise_norm", a)?;
        let norms: Vec<f32> = (0..rows)
            .map(|r| {
                let s = r * cols;
                dot(&a.data()[s..s + cols], &a.data()[s..s + cols]).sqrt()
            })
            .collect();
        let (na, len) = (a.node(), a.numel());
        let da = a.data().to_vec();
        let saved = norms.clone();
        Ok(self.out(vec![rows], norms, na.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(na, len, |s| {
                    for r in 0..rows {
                        if saved[r] > 0.0 {
                            let gv = g[r] / saved[r];
                            for c in 0..cols {
                                s[r * cols + c] += gv * da[r * cols + c];
                            }
                        }
                    }
                })
            })
        }))
    }

    /// Matrix product of an m x k and a k x n matrix.
    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, ka) = rows_cols("matmul", a)?;
        let (kb, n) = rows_cols("matmul", b)?;
        if ka != kb {
            return Err(Error::Shape {
                op: "matmul",
                detail: format!("{:?} x {:?}", a.shape(), b.shape()),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(m, ka, n, a.data(), b.data(), &mut out);
        let (na, nb) = (a.node(), b.node());
        let (da, db) = (a.data().to_vec(), b.data().to_vec());
        Ok(self.out(vec![m, n], out, na.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                // dA = dC * B^T, dB = A^T * dC
                grads.accumulate(na, m * ka, |s| gemm_nt(m, n, ka, g, &db, s));
                grads.accumulate(nb, ka * n, |s| gemm_tn(ka, m, n, &da, g, s));
            })
        }))
    }

    /// Add a length-d bias to every row of a B x d matrix.
    pub fn add_row(&self, x: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (rows, cols) = rows_cols("add_row", x)?;
        if bias.shape() != [cols] {
            return Err(Error::Shape {
                op: "add_row",
                detail: format!("matrix {:?} vs bias {:?}", x.shape(), bias.shape()),
            });
        }
        let mut data = x.data().to_vec();
        for r in 0..rows {
            for c in 0..cols {
                data[r * cols + c] += bias.data()[c];
            }
        }
        let (nx, nb, len) = (x.node(), bias.node(), x.numel());
        Ok(self.out(x.shape().to_vec(), data, nx.is_some() || nb.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(nx, len, |s| axpy(s, g, 1.0));
                grads.accumulate(nb, cols, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            s[c] += g[r * cols + c];
                        }
                    }
                });
            })
        }))
    }

    /// Per-sample softmax cross-entropy over rows of a B x C logit matrix,
    /// with max-subtraction stabilization. Output is the length-B loss vector.
    pub fn softmax_ce(&self, logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let (rows, cols) = rows_cols("softmax_ce", logits)?;
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "softmax_ce",
                detail: format!("{} logit rows vs {} labels", rows, labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= cols) {
            return Err(Error::Data(format!(
                "label {} out of range for {} classes",
                bad, cols
            )));
        }
        let mut losses = vec![0.0; rows];
        let mut probs = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &logits.data()[r * cols..(r + 1) * cols];
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for c in 0..cols {
                let e = (row[c] - m).exp();
                probs[r * cols + c] = e;
                z += e;
            }
            for c in 0..cols {
                probs[r * cols + c] /= z;
            }
            losses[r] = z.ln() + m - row[labels[r]];
        }
        let (nl, len) = (logits.node(), logits.numel());
        let labels = labels.to_vec();
        Ok(self.out(vec![rows], losses, nl.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(nl, len, |s| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let delta = if c == labels[r] { 1.0 } else { 0.0 };
                            s[r * cols + c] += g[r] * (probs[r * cols + c] - delta);
                        }
                    }
                })
            })
        }))
    }
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn axpy(acc: &mut [f32], g: &[f32], c: f32) {
    for (a, &gv) in acc.iter_mut().zip(g) {
        *a += c * gv;
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rows_cols(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            detail: format!("expected 2-d tensor, got {:?}", other),
        }),
    }
}

// Row-major sgemm wrappers accumulating into c (beta = 1 semantics for the
// backward calls, overwrite for forward).
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m x n) += a(m x k) * b(n x k)^T
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// c(m x n) += a(k x m)^T * b(k x n)
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
