//! Reverse-mode automatic differentiation over dynamically shaped arrays.
//!
//! Every backward rule is expressed in tape operations, so the result of
//! [`grad`] is itself differentiable. That is what makes the critic's
//! gradient-norm penalty trainable: the norm of an input-gradient is an
//! ordinary tape value whose derivative with respect to the critic weights
//! exists on the same tape.
//!
//! Feature maps are `[C, H, W]`, kernels `[O, C, kh, kw]`, scalars 0-dim.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::AddAssign;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

mod conv;
pub use conv::im2col;

/// Scalar element type of the tape. Implemented for `f32` and `f64`.
pub trait Element:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + AddAssign
    + Sum
    + Display
    + Debug
    + Send
    + Sync
    + 'static
{
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }
    fn as_f64(self) -> f64 {
        self.to_f64().expect("element not convertible to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

type BackwardFn<El> = Rc<dyn Fn(&Tape<El>, &Var<El>, &[bool]) -> Vec<Option<Var<El>>>>;

struct Node<El: Element> {
    value: Rc<ArrayD<El>>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<El>>,
}

/// Growable operation record. Cloning is cheap (shared handle).
pub struct Tape<El: Element> {
    nodes: Rc<RefCell<Vec<Node<El>>>>,
}

impl<El: Element> Clone for Tape<El> {
    fn clone(&self) -> Self {
        Tape {
            nodes: Rc::clone(&self.nodes),
        }
    }
}

impl<El: Element> Default for Tape<El> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one tape value.
pub struct Var<El: Element> {
    tape: Tape<El>,
    id: usize,
}

impl<El: Element> Clone for Var<El> {
    fn clone(&self) -> Self {
        Var {
            tape: self.tape.clone(),
            id: self.id,
        }
    }
}

impl<El: Element> Tape<El> {
    pub fn new() -> Self {
        Tape {
            nodes: Rc::new(RefCell::new(Vec::new())),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Free the whole graph. Backward closures capture `Var` handles, which
    /// keep the tape alive through an `Rc` cycle; long-running loops must
    /// clear each tape once its values have been read out. Outstanding
    /// `Var`s from this tape are invalidated.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
    }

    fn push(
        &self,
        value: ArrayD<El>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<El>>,
    ) -> Var<El> {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value: Rc::new(value),
            parents,
            backward,
        });
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Insert a value with no history. Gradients may still be requested
    /// with respect to it (it is a leaf).
    pub fn leaf(&self, value: ArrayD<El>) -> Var<El> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, v: f64) -> Var<El> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), El::of(v)))
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<El> {
        self.leaf(ArrayD::zeros(IxDyn(shape)))
    }

    pub fn ones(&self, shape: &[usize]) -> Var<El> {
        self.leaf(ArrayD::from_elem(IxDyn(shape), El::one()))
    }

    fn value_of(&self, id: usize) -> Rc<ArrayD<El>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Concatenate along the channel axis (axis 0 of `[C, H, W]`).
    pub fn concat_ch(&self, parts: &[&Var<El>]) -> Var<El> {
        assert!(!parts.is_empty());
        let vals: Vec<Rc<ArrayD<El>>> = parts.iter().map(|p| p.val()).collect();
        let h = vals[0].shape()[1];
        let w = vals[0].shape()[2];
        let total: usize = vals.iter().map(|v| v.shape()[0]).sum();
        let mut out = ArrayD::zeros(IxDyn(&[total, h, w]));
        let mut off = 0;
        for v in &vals {
            let c = v.shape()[0];
            out.slice_mut(ndarray::s![off..off + c, .., ..])
                .assign(&v.view().into_dimensionality::<ndarray::Ix3>().unwrap());
            off += c;
        }
        let offsets: Vec<(usize, usize)> = {
            let mut o = 0;
            vals.iter()
                .map(|v| {
                    let c = v.shape()[0];
                    let r = (o, c);
                    o += c;
                    r
                })
                .collect()
        };
        let parents: Vec<usize> = parts.iter().map(|p| p.id).collect();
        self.push(
            out,
            parents,
            Some(Rc::new(move |_t, g, needs| {
                offsets
                    .iter()
                    .zip(needs)
                    .map(|(&(o, c), &need)| need.then(|| g.slice_ch(o, o + c)))
                    .collect()
            })),
        )
    }
}

impl<El: Element> Var<El> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &Tape<El> {
        &self.tape
    }

    /// Shared handle to the stored value.
    pub fn val(&self) -> Rc<ArrayD<El>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.val().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.val().len()
    }

    /// Scalar extraction; panics unless the value has exactly one element.
    pub fn item(&self) -> f64 {
        let v = self.val();
        assert_eq!(v.len(), 1, "item() on non-scalar of shape {:?}", v.shape());
        v.iter().next().unwrap().as_f64()
    }

    /// Cut the history: same value, no parents.
    pub fn detach(&self) -> Var<El> {
        self.tape.leaf(self.val().as_ref().clone())
    }

    fn unary(
        &self,
        value: ArrayD<El>,
        backward: impl Fn(&Tape<El>, &Var<El>) -> Var<El> + 'static,
    ) -> Var<El> {
        self.tape.push(
            value,
            vec![self.id],
            Some(Rc::new(move |t, g, _needs| vec![Some(backward(t, g))])),
        )
    }

    pub fn add(&self, o: &Var<El>) -> Var<El> {
        assert_eq!(self.shape(), o.shape(), "add shape mismatch");
        let v = self.val().as_ref() + o.val().as_ref();
        self.tape.push(
            v,
            vec![self.id, o.id],
            Some(Rc::new(|_t, g, _| vec![Some(g.clone()), Some(g.clone())])),
        )
    }

    pub fn sub(&self, o: &Var<El>) -> Var<El> {
        assert_eq!(self.shape(), o.shape(), "sub shape mismatch");
        let v = self.val().as_ref() - o.val().as_ref();
        self.tape.push(
            v,
            vec![self.id, o.id],
            Some(Rc::new(|_t, g, needs| {
                vec![
                    needs[0].then(|| g.clone()),
                    needs[1].then(|| g.neg()),
                ]
            })),
        )
    }

    pub fn mul(&self, o: &Var<El>) -> Var<El> {
        assert_eq!(self.shape(), o.shape(), "mul shape mismatch");
        let v = self.val().as_ref() * o.val().as_ref();
        let (a, b) = (self.clone(), o.clone());
        self.tape.push(
            v,
            vec![self.id, o.id],
            Some(Rc::new(move |_t, g, needs| {
                vec![
                    needs[0].then(|| g.mul(&b)),
                    needs[1].then(|| g.mul(&a)),
                ]
            })),
        )
    }

    pub fn div(&self, o: &Var<El>) -> Var<El> {
        assert_eq!(self.shape(), o.shape(), "div shape mismatch");
        let v = self.val().as_ref() / o.val().as_ref();
        let (a, b) = (self.clone(), o.clone());
        self.tape.push(
            v,
            vec![self.id, o.id],
            Some(Rc::new(move |_t, g, needs| {
                vec![
                    needs[0].then(|| g.div(&b)),
                    needs[1].then(|| g.mul(&a).neg().div(&b.mul(&b))),
                ]
            })),
        )
    }

    pub fn neg(&self) -> Var<El> {
        self.mul_scalar(-1.0)
    }

    pub fn square(&self) -> Var<El> {
        self.mul(self)
    }

    pub fn add_scalar(&self, c: f64) -> Var<El> {
        let cc = El::of(c);
        let v = self.val().mapv(|x| x + cc);
        self.unary(v, |_t, g| g.clone())
    }

    pub fn mul_scalar(&self, c: f64) -> Var<El> {
        let cc = El::of(c);
        let v = self.val().mapv(|x| x * cc);
        self.unary(v, move |_t, g| g.mul_scalar(c))
    }

    pub fn sqrt(&self) -> Var<El> {
        let v = self.val().mapv(|x| x.sqrt());
        let out = self.tape.push(v, vec![self.id], None);
        let y = out.clone();
        self.attach_backward(&out, move |_t, g, _| {
            vec![Some(g.mul_scalar(0.5).div(&y))]
        });
        out
    }

    pub fn exp(&self) -> Var<El> {
        let v = self.val().mapv(|x| x.exp());
        let out = self.tape.push(v, vec![self.id], None);
        let y = out.clone();
        self.attach_backward(&out, move |_t, g, _| vec![Some(g.mul(&y))]);
        out
    }

    pub fn abs(&self) -> Var<El> {
        let xv = self.val();
        let v = xv.mapv(|x| x.abs());
        let x = Rc::clone(&xv);
        self.unary(v, move |t, g| {
            let mask = x.mapv(|e| if e >= El::zero() { El::one() } else { -El::one() });
            g.mul(&t.leaf(mask))
        })
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<El> {
        let s = El::of(slope);
        let xv = self.val();
        let v = xv.mapv(|x| if x >= El::zero() { x } else { x * s });
        let x = Rc::clone(&xv);
        self.unary(v, move |t, g| {
            let mask = x.mapv(|e| if e >= El::zero() { El::one() } else { s });
            g.mul(&t.leaf(mask))
        })
    }

    pub fn sigmoid(&self) -> Var<El> {
        let one = El::one();
        let v = self.val().mapv(|x| one / (one + (-x).exp()));
        let out = self.tape.push(v, vec![self.id], None);
        let y = out.clone();
        self.attach_backward(&out, move |_t, g, _| {
            let one_minus = y.neg().add_scalar(1.0);
            vec![Some(g.mul(&y).mul(&one_minus))]
        });
        out
    }

    // Output node already pushed without backward; fill it in. Needed when
    // the backward rule refers to the output itself (sqrt, exp, sigmoid).
    fn attach_backward(
        &self,
        out: &Var<El>,
        f: impl Fn(&Tape<El>, &Var<El>, &[bool]) -> Vec<Option<Var<El>>> + 'static,
    ) {
        self.tape.nodes.borrow_mut()[out.id].backward = Some(Rc::new(f));
    }

    pub fn sum_all(&self) -> Var<El> {
        let s: El = self.val().iter().copied().sum();
        let shape = self.shape();
        self.unary(ArrayD::from_elem(IxDyn(&[]), s), move |_t, g| {
            g.broadcast_full(&shape)
        })
    }

    pub fn mean_all(&self) -> Var<El> {
        let n = self.numel();
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Broadcast a scalar (0-dim) to `shape`.
    pub fn broadcast_full(&self, shape: &[usize]) -> Var<El> {
        assert_eq!(self.numel(), 1, "broadcast_full from non-scalar");
        let v = *self.val().iter().next().unwrap();
        self.unary(ArrayD::from_elem(IxDyn(shape), v), |_t, g| g.sum_all())
    }

    /// `[C, H, W]` -> `[C]` spatial sum.
    pub fn sum_ch(&self) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3, "sum_ch expects [C,H,W]");
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        let mut out = ArrayD::zeros(IxDyn(&[c]));
        for ci in 0..c {
            out[ci] = x3.slice(ndarray::s![ci, .., ..]).iter().copied().sum();
        }
        self.unary(out, move |_t, g| g.broadcast_ch(h, w))
    }

    /// `[C]` -> `[C, H, W]` replication.
    pub fn broadcast_ch(&self, h: usize, w: usize) -> Var<El> {
        let x = self.val();
        assert_eq!(x.ndim(), 1, "broadcast_ch expects [C]");
        let c = x.shape()[0];
        let mut out = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            out.slice_mut(ndarray::s![ci, .., ..]).fill(x[ci]);
        }
        self.unary(out, |_t, g| g.sum_ch())
    }

    /// Zero-pad the spatial axes of `[C, H, W]`.
    pub fn pad2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, h + top + bottom, w + left + right]));
        out.slice_mut(ndarray::s![.., top..top + h, left..left + w])
            .assign(&x.view().into_dimensionality::<ndarray::Ix3>().unwrap());
        self.unary(out, move |_t, g| g.crop2d(top, bottom, left, right))
    }

    pub fn crop2d(&self, top: usize, bottom: usize, left: usize, right: usize) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        assert_eq!(sh.len(), 3);
        let (h, w) = (sh[1], sh[2]);
        assert!(top + bottom < h + 1 && left + right < w + 1, "crop2d too large");
        let out = x
            .slice(ndarray::s![.., top..h - bottom, left..w - right])
            .to_owned()
            .into_dyn();
        self.unary(out, move |_t, g| g.pad2d(top, bottom, left, right))
    }

    /// Insert `s - 1` zeros between spatial samples: `h -> (h-1)*s + 1`.
    pub fn dilate2(&self, s: usize) -> Var<El> {
        if s == 1 {
            return self.clone();
        }
        let x = self.val();
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (oh, ow) = ((h - 1) * s + 1, (w - 1) * s + 1);
        let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    out[[ci, i * s, j * s]] = x3[[ci, i, j]];
                }
            }
        }
        self.unary(out, move |_t, g| g.subsample2(s))
    }

    /// Keep every `s`-th spatial sample: `h -> (h-1)/s + 1`.
    pub fn subsample2(&self, s: usize) -> Var<El> {
        if s == 1 {
            return self.clone();
        }
        let x = self.val();
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let (oh, ow) = ((h - 1) / s + 1, (w - 1) / s + 1);
        let mut out = ArrayD::zeros(IxDyn(&[c, oh, ow]));
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for ci in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    out[[ci, i, j]] = x3[[ci, i * s, j * s]];
                }
            }
        }
        self.unary(out, move |_t, g| {
            let d = g.dilate2(s);
            let dh = (oh - 1) * s + 1;
            let dw = (ow - 1) * s + 1;
            d.pad2d(0, h - dh, 0, w - dw)
        })
    }

    /// Reverse the two trailing (spatial) axes.
    pub fn flip_hw(&self) -> Var<El> {
        let x = self.val();
        let n = x.ndim();
        assert!(n >= 2);
        let mut out = x.as_ref().clone();
        out.invert_axis(ndarray::Axis(n - 2));
        out.invert_axis(ndarray::Axis(n - 1));
        self.unary(out, |_t, g| g.flip_hw())
    }

    /// Swap the first two axes of a kernel `[O, C, kh, kw] -> [C, O, kh, kw]`.
    pub fn swap01(&self) -> Var<El> {
        let x = self.val();
        assert_eq!(x.ndim(), 4);
        let mut out = x.view();
        out.swap_axes(0, 1);
        let out = out.to_owned();
        self.unary(out, |_t, g| g.swap01())
    }

    pub fn slice_ch(&self, from: usize, to: usize) -> Var<El> {
        let x = self.val();
        let total = x.shape()[0];
        assert!(from < to && to <= total);
        let out = x.slice(ndarray::s![from..to, .., ..]).to_owned().into_dyn();
        self.unary(out, move |_t, g| g.embed_ch(from, total))
    }

    /// Embed into a zero block of `total` channels starting at `from`.
    pub fn embed_ch(&self, from: usize, total: usize) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert!(from + c <= total);
        let mut out = ArrayD::zeros(IxDyn(&[total, h, w]));
        out.slice_mut(ndarray::s![from..from + c, .., ..])
            .assign(&x.view().into_dimensionality::<ndarray::Ix3>().unwrap());
        self.unary(out, move |_t, g| g.slice_ch(from, from + c))
    }

    /// Nearest-neighbor x2 spatial upsampling.
    pub fn upsample2(&self) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        let mut out = ArrayD::zeros(IxDyn(&[c, h * 2, w * 2]));
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x3[[ci, i, j]];
                    out[[ci, 2 * i, 2 * j]] = v;
                    out[[ci, 2 * i + 1, 2 * j]] = v;
                    out[[ci, 2 * i, 2 * j + 1]] = v;
                    out[[ci, 2 * i + 1, 2 * j + 1]] = v;
                }
            }
        }
        self.unary(out, |_t, g| g.downsum2())
    }

    /// 2x2 sum pooling (adjoint of [`Var::upsample2`]); spatial dims must be even.
    pub fn downsum2(&self) -> Var<El> {
        let x = self.val();
        let sh = x.shape().to_vec();
        let (c, h, w) = (sh[0], sh[1], sh[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "downsum2 needs even dims");
        let mut out = ArrayD::zeros(IxDyn(&[c, h / 2, w / 2]));
        let x3 = x.view().into_dimensionality::<ndarray::Ix3>().unwrap();
        for ci in 0..c {
            for i in 0..h / 2 {
                for j in 0..w / 2 {
                    out[[ci, i, j]] = x3[[ci, 2 * i, 2 * j]]
                        + x3[[ci, 2 * i + 1, 2 * j]]
                        + x3[[ci, 2 * i, 2 * j + 1]]
                        + x3[[ci, 2 * i + 1, 2 * j + 1]];
                }
            }
        }
        self.unary(out, |_t, g| g.upsample2())
    }

    /// Repeated nearest-neighbor upsampling by `2^k`.
    pub fn upsample_pow2(&self, k: usize) -> Var<El> {
        let mut v = self.clone();
        for _ in 0..k {
            v = v.upsample2();
        }
        v
    }
}

/// Differentiate a scalar `output` with respect to each of `wrt`.
///
/// The returned values live on the same tape and can be differentiated
/// again. Leaves not reached by the backward sweep get zero gradients.
pub fn grad<El: Element>(output: &Var<El>, wrt: &[&Var<El>]) -> Vec<Var<El>> {
    let tape = output.tape.clone();
    assert_eq!(output.numel(), 1, "grad target must be scalar");
    let n = output.id + 1;

    // Nodes influenced by any `wrt` leaf.
    let mut active = vec![false; n];
    for w in wrt {
        if w.id < n {
            active[w.id] = true;
        }
    }
    {
        let nodes = tape.nodes.borrow();
        for i in 0..n {
            if !active[i] && nodes[i].parents.iter().any(|&p| active[p]) {
                active[i] = true;
            }
        }
    }

    let mut grads: Vec<Option<Var<El>>> = vec![None; n];
    grads[output.id] = Some(tape.ones(&output.shape()));

    for i in (0..n).rev() {
        let g = match &grads[i] {
            Some(g) => g.clone(),
            None => continue,
        };
        if !active[i] {
            continue;
        }
        let (parents, backward) = {
            let nodes = tape.nodes.borrow();
            (nodes[i].parents.clone(), nodes[i].backward.clone())
        };
        let backward = match backward {
            Some(b) => b,
            None => continue,
        };
        if parents.is_empty() {
            continue;
        }
        let needs: Vec<bool> = parents.iter().map(|&p| active[p]).collect();
        if !needs.iter().any(|&b| b) {
            continue;
        }
        let contrib = backward(&tape, &g, &needs);
        assert_eq!(contrib.len(), parents.len());
        for (&p, c) in parents.iter().zip(contrib) {
            if let Some(c) = c {
                grads[p] = Some(match grads[p].take() {
                    Some(acc) => acc.add(&c),
                    None => c,
                });
            }
        }
    }

    wrt.iter()
        .map(|w| match grads.get(w.id).and_then(|g| g.clone()) {
            Some(g) => g,
            None => tape.zeros(&w.shape()),
        })
        .collect()
}

#[cfg(test)]
mod tests;
