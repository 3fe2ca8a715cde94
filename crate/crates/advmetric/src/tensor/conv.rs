//! 2-d convolution (valid padding, stride 1) and 2x2 max pooling.
//!
//! Convolution is lowered to a matrix product through im2col; the backward
//! pass reuses the same lowering for the weight gradient and scatters
//! through col2im for the input gradient.

use crate::error::{Error, Result};

use super::tape::{gemm_nn, gemm_nt, gemm_tn};
use super::{Tape, Tensor};

struct ConvDims {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    out_c: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn ckk(&self) -> usize {
        self.in_c * self.kh * self.kw
    }
    fn osp(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(x: &[f32], d: &ConvDims, cols: &mut [f32]) {
    // cols is (C*KH*KW) x (OH*OW), row-major
    let mut row = 0;
    for c in 0..d.in_c {
        let chan = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let out = &mut cols[row * d.osp()..(row + 1) * d.osp()];
                for oi in 0..d.oh {
                    let src = &chan[(oi + ki) * d.w + kj..(oi + ki) * d.w + kj + d.ow];
                    out[oi * d.ow..(oi + 1) * d.ow].copy_from_slice(src);
                }
                row += 1;
            }
        }
    }
}

fn col2im_acc(cols: &[f32], d: &ConvDims, x: &mut [f32]) {
    let mut row = 0;
    for c in 0..d.in_c {
        let chan = &mut x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * d.osp()..(row + 1) * d.osp()];
                for oi in 0..d.oh {
                    let base = (oi + ki) * d.w + kj;
                    for oj in 0..d.ow {
                        chan[base + oj] += src[oi * d.ow + oj];
                    }
                }
                row += 1;
            }
        }
    }
}

impl Tape {
    /// Valid, stride-1 convolution of a B x C x H x W input with
    /// OC x C x KH x KW filters plus a per-filter bias.
    pub fn conv2d(&self, x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
        let (batch, in_c, h, w) = match x.shape() {
            [b, c, h, w] => (*b, *c, *h, *w),
            other => {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("input must be 4-d, got {:?}", other),
                })
            }
        };
        let (out_c, wc, kh, kw) = match weight.shape() {
            [o, c, kh, kw] => (*o, *c, *kh, *kw),
            other => {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("weight must be 4-d, got {:?}", other),
                })
            }
        };
        if wc != in_c || bias.shape() != [out_c] || kh > h || kw > w {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!(
                    "input {:?} vs weight {:?} vs bias {:?}",
                    x.shape(),
                    weight.shape(),
                    bias.shape()
                ),
            });
        }
        let d = ConvDims {
            batch,
            in_c,
            h,
            w,
            out_c,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        };

        let (ckk, osp) = (d.ckk(), d.osp());
        let mut out = vec![0.0f32; batch * out_c * osp];
        let mut cols = vec![0.0f32; ckk * osp];
        let plane = in_c * h * w;
        for b in 0..batch {
            im2col(&x.data()[b * plane..(b + 1) * plane], &d, &mut cols);
            gemm_nn(
                out_c,
                ckk,
                osp,
                weight.data(),
                &cols,
                &mut out[b * out_c * osp..(b + 1) * out_c * osp],
            );
            let ob = &mut out[b * out_c * osp..(b + 1) * out_c * osp];
            for oc in 0..out_c {
                let bv = bias.data()[oc];
                for v in &mut ob[oc * osp..(oc + 1) * osp] {
                    *v += bv;
                }
            }
        }

        let (nx, nw, nb) = (x.node(), weight.node(), bias.node());
        let attached = nx.is_some() || nw.is_some() || nb.is_some();
        let xd = x.data().to_vec();
        let wd = weight.data().to_vec();
        let out_shape = vec![batch, out_c, d.oh, d.ow];
        Ok(self.out(out_shape, out, attached, || {
            Box::new(move |g, grads| {
                let (ckk, osp) = (d.ckk(), d.osp());
                let plane = d.in_c * d.h * d.w;
                let mut cols = vec![0.0f32; ckk * osp];
                grads.accumulate(nw, d.out_c * ckk, |s| {
                    for b in 0..d.batch {
                        im2col(&xd[b * plane..(b + 1) * plane], &d, &mut cols);
                        // dW += dOut_b * cols^T
                        gemm_nt(
                            d.out_c,
                            osp,
                            ckk,
                            &g[b * d.out_c * osp..(b + 1) * d.out_c * osp],
                            &cols,
                            s,
                        );
                    }
                });
                grads.accumulate(nb, d.out_c, |s| {
                    for b in 0..d.batch {
                        let gb = &g[b * d.out_c * osp..(b + 1) * d.out_c * osp];
                        for oc in 0..d.out_c {
                            s[oc] += gb[oc * osp..(oc + 1) * osp].iter().sum::<f32>();
                        }
                    }
                });
                grads.accumulate(nx, d.batch * plane, |s| {
                    let mut dcols = vec![0.0f32; ckk * osp];
                    for b in 0..d.batch {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        // dCols = W^T * dOut_b
                        gemm_tn(
                            ckk,
                            d.out_c,
                            osp,
                            &wd,
                            &g[b * d.out_c * osp..(b + 1) * d.out_c * osp],
                            &mut dcols,
                        );
                        col2im_acc(&dcols, &d, &mut s[b * plane..(b + 1) * plane]);
                    }
                });
            })
        }))
    }

    /// 2x2 max pooling with stride 2. Spatial extents must be even.
    pub fn maxpool2d(&self, x: &Tensor) -> Result<Tensor> {
        let (batch, ch, h, w) = match x.shape() {
            [b, c, h, w] if h % 2 == 0 && w % 2 == 0 => (*b, *c, *h, *w),
            other => {
                return Err(Error::Shape {
                    op: "maxpool2d",
                    detail: format!("need 4-d input with even H, W, got {:?}", other),
                })
            }
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; batch * ch * oh * ow];
        let mut argmax = vec![0usize; out.len()];
        let xd = x.data();
        for bc in 0..batch * ch {
            let plane = &xd[bc * h * w..(bc + 1) * h * w];
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = (2 * oi + di) * w + 2 * oj + dj;
                            if plane[idx] > best {
                                best = plane[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[bc * oh * ow + oi * ow + oj] = best;
                    argmax[bc * oh * ow + oi * ow + oj] = bc * h * w + best_idx;
                }
            }
        }
        let (nx, in_len) = (x.node(), x.numel());
        Ok(self.out(vec![batch, ch, oh, ow], out, nx.is_some(), || {
            Box::new(move |g, grads| {
                grads.accumulate(nx, in_len, |s| {
                    for (o, &src) in argmax.iter().enumerate() {
                        s[src] += g[o];
                    }
                })
            })
        }))
    }
}
