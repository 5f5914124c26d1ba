//! 2-D convolution primitives via im2col + matmul.
//!
//! `conv2d` supports stride, symmetric zero padding, and kernel dilation.
//! Its input-gradient is expressed with tape ops (dilate, pad, flip, conv),
//! so it stays differentiable; the kernel-gradient is a terminal primitive.

use std::rc::Rc;

use ndarray::{Array2, ArrayD, IxDyn};

use super::{Element, Var};

/// Patch matrix of `x: [C, H, W]` -> `[(C*kh*kw), (oh*ow)]`.
pub fn im2col<El: Element>(
    x: &ArrayD<El>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    kdil: usize,
) -> Array2<El> {
    let sh = x.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let (oh, ow) = conv_out_size(h, w, kh, kw, stride, pad, kdil);
    let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
    let mut cols = Array2::<El>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        for a in 0..kh {
            for b in 0..kw {
                let row = (ci * kh + a) * kw + b;
                let mut dst = cols.row_mut(row);
                for i0 in 0..oh {
                    let src_i = (i0 * stride + a * kdil) as isize - pad as isize;
                    if src_i < 0 || src_i >= h as isize {
                        continue;
                    }
                    for j0 in 0..ow {
                        let src_j = (j0 * stride + b * kdil) as isize - pad as isize;
                        if src_j < 0 || src_j >= w as isize {
                            continue;
                        }
                        dst[i0 * ow + j0] = x3[[ci, src_i as usize, src_j as usize]];
                    }
                }
            }
        }
    }
    cols
}

pub fn conv_out_size(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    kdil: usize,
) -> (usize, usize) {
    let span_h = (kh - 1) * kdil + 1;
    let span_w = (kw - 1) * kdil + 1;
    assert!(
        h + 2 * pad >= span_h && w + 2 * pad >= span_w,
        "conv input {}x{} smaller than kernel span {}x{}",
        h,
        w,
        span_h,
        span_w
    );
    ((h + 2 * pad - span_h) / stride + 1, (w + 2 * pad - span_w) / stride + 1)
}

fn conv_value<El: Element>(
    x: &ArrayD<El>,
    w: &ArrayD<El>,
    stride: usize,
    pad: usize,
    kdil: usize,
) -> ArrayD<El> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv input must be [C,H,W]");
    assert_eq!(ws.len(), 4, "conv kernel must be [O,C,kh,kw]");
    assert_eq!(xs[0], ws[1], "conv channel mismatch");
    let (co, ci, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (oh, ow) = conv_out_size(xs[1], xs[2], kh, kw, stride, pad, kdil);
    let cols = im2col(x, kh, kw, stride, pad, kdil);
    let w2 = w
        .view()
        .into_shape((co, ci * kh * kw))
        .unwrap()
        .to_owned();
    let y2 = w2.dot(&cols);
    y2.into_shape(IxDyn(&[co, oh, ow])).unwrap()
}

fn kernel_grad_value<El: Element>(
    x: &ArrayD<El>,
    gy: &ArrayD<El>,
    stride: usize,
    pad: usize,
    kdil: usize,
    kh: usize,
    kw: usize,
) -> ArrayD<El> {
    let (co, oh, ow) = (gy.shape()[0], gy.shape()[1], gy.shape()[2]);
    let ci = x.shape()[0];
    let cols = im2col(x, kh, kw, stride, pad, kdil);
    let gy2 = gy
        .view()
        .into_shape((co, oh * ow))
        .unwrap()
        .to_owned();
    let gw2 = gy2.dot(&cols.t());
    gw2.into_shape(IxDyn(&[co, ci, kh, kw])).unwrap()
}

impl<El: Element> Var<El> {
    /// Cross-correlation of `self: [C,H,W]` with kernel `w: [O,C,kh,kw]`.
    pub fn conv2d(&self, w: &Var<El>, stride: usize, pad: usize, kdil: usize) -> Var<El> {
        let y = conv_value(self.val().as_ref(), w.val().as_ref(), stride, pad, kdil);
        let x_var = self.clone();
        let w_var = w.clone();
        let in_shape = self.shape();
        let k_shape = w.shape();
        let out = self.tape().push(
            y,
            vec![self.id(), w.id()],
            Some(Rc::new(move |_t: &super::Tape<El>, g: &Var<El>, needs: &[bool]| {
                let (kh, kw) = (k_shape[2], k_shape[3]);
                let gx = needs[0].then(|| {
                    // Input gradient: stride-dilated output grad, padded, convolved
                    // with the spatially flipped channel-swapped kernel.
                    let (h, w_in) = (in_shape[1], in_shape[2]);
                    let q_h = (kh - 1) * kdil - pad;
                    let q_w = (kw - 1) * kdil - pad;
                    let gsh = g.shape();
                    let (oh, ow) = (gsh[1], gsh[2]);
                    let extra_h = (h + 2 * pad - (kh - 1) * kdil - 1) - (oh - 1) * stride;
                    let extra_w = (w_in + 2 * pad - (kw - 1) * kdil - 1) - (ow - 1) * stride;
                    let gd = g.dilate2(stride);
                    let gp = gd.pad2d(q_h, q_h + extra_h, q_w, q_w + extra_w);
                    let wf = w_var.flip_hw().swap01();
                    gp.conv2d(&wf, 1, 0, kdil)
                });
                let gw = needs[1].then(|| x_var.conv2d_kernel_grad(g, stride, pad, kdil, kh, kw));
                vec![gx, gw]
            })),
        );
        out
    }

    // Terminal primitive: d(conv)/d(kernel). Not differentiable further.
    fn conv2d_kernel_grad(
        &self,
        gy: &Var<El>,
        stride: usize,
        pad: usize,
        kdil: usize,
        kh: usize,
        kw: usize,
    ) -> Var<El> {
        let gw = kernel_grad_value(
            self.val().as_ref(),
            gy.val().as_ref(),
            stride,
            pad,
            kdil,
            kh,
            kw,
        );
        self.tape().push(
            gw,
            vec![self.id(), gy.id()],
            Some(Rc::new(
                |_t: &super::Tape<El>, _g: &Var<El>, _needs: &[bool]| {
                    panic!("higher-order derivative through conv kernel-gradient is not supported")
                },
            )),
        )
    }
}
