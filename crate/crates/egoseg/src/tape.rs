//! Reverse-mode automatic differentiation on dynamic-dimension arrays.
//!
//! A `Tape` is a per-sample computation graph: ops append nodes, `backward`
//! walks the nodes in reverse and accumulates gradients for parameter
//! leaves. Nodes are indexed by insertion order, so parents always precede
//! children and a single reverse sweep is a valid topological order.
//!
//! Everything is generic over the float type: training runs in `f32`,
//! finite-difference verification in `f64`.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix3, Ix4, IxDyn};
use std::sync::Arc;

/// Float scalar usable by the tape.
///
/// `fexp`/`ftanh` are the transcendentals used in bulk math: `f32` takes a
/// polynomial path accurate to its own epsilon, `f64` stays on the libm
/// implementations so double-precision gradient checks see exact math.
pub trait Real:
    ndarray::NdFloat + num_traits::FromPrimitive + num_traits::Float + std::iter::Sum
{
    fn fexp(self) -> Self;
    fn ftanh(self) -> Self;
}

/// exp(x) = 2^k * e^r with r in [-ln2/2, ln2/2] and a degree-6 Taylor tail;
/// relative error stays near f32 epsilon. Deterministic, no table lookups.
#[inline]
fn fast_exp_f32(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2: f32 = std::f32::consts::LN_2;
    let k = (x * LOG2E).round();
    let r = x - k * LN2;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let bits = (((k as i32) + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

impl Real for f32 {
    #[inline]
    fn fexp(self) -> f32 {
        fast_exp_f32(self)
    }

    #[inline]
    fn ftanh(self) -> f32 {
        if self.abs() > 9.1 {
            return 1.0f32.copysign(self);
        }
        let e = fast_exp_f32(2.0 * self);
        (e - 1.0) / (e + 1.0)
    }
}

impl Real for f64 {
    #[inline]
    fn fexp(self) -> f64 {
        self.exp()
    }

    #[inline]
    fn ftanh(self) -> f64 {
        self.tanh()
    }
}

/// Casts an `f64` constant into the tape scalar type.
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("finite constant")
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&[ArrayD<T>], &ArrayD<T>, &mut [Option<ArrayD<T>>])>;

pub struct Tape<T: Real> {
    values: Vec<ArrayD<T>>,
    backs: Vec<Option<BackFn<T>>>,
    param_of: Vec<Option<usize>>,
    param_leaves: Vec<(usize, Tid)>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, t: Tid) -> Option<&ArrayD<T>> {
        self.grads[t.0].as_ref()
    }

    pub fn take(&mut self, t: Tid) -> Option<ArrayD<T>> {
        self.grads[t.0].take()
    }
}

fn acc_grad<T: Real>(slot: &mut Option<ArrayD<T>>, g: ArrayD<T>) {
    // Rank-1 matmul shortcuts inside ndarray can emit non-standard layouts;
    // normalizing here keeps every stored gradient reshape-safe.
    let g = if g.is_standard_layout() {
        g
    } else {
        g.as_standard_layout().into_owned()
    };
    match slot {
        Some(s) => *s += &g,
        None => *slot = Some(g),
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            values: Vec::with_capacity(256),
            backs: Vec::with_capacity(256),
            param_of: Vec::with_capacity(256),
            param_leaves: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, t: Tid) -> &ArrayD<T> {
        &self.values[t.0]
    }

    pub fn shape(&self, t: Tid) -> &[usize] {
        self.values[t.0].shape()
    }

    fn push(&mut self, value: ArrayD<T>, back: Option<BackFn<T>>) -> Tid {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.values.push(value);
        self.backs.push(back);
        self.param_of.push(None);
        Tid(self.values.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: ArrayD<T>) -> Tid {
        self.push(value, None)
    }

    /// Parameter leaf; `backward` keeps its gradient, tagged `param_idx`.
    pub fn leaf(&mut self, value: ArrayD<T>, param_idx: usize) -> Tid {
        let t = self.push(value, None);
        self.param_of[t.0] = Some(param_idx);
        self.param_leaves.push((param_idx, t));
        t
    }

    /// Runs the reverse sweep from a scalar (or any-shape) root with seed 1.
    pub fn backward(&self, root: Tid) -> Gradients<T> {
        let mut grads: Vec<Option<ArrayD<T>>> = (0..self.len()).map(|_| None).collect();
        grads[root.0] = Some(ArrayD::ones(self.values[root.0].raw_dim()));
        for i in (0..=root.0).rev() {
            if grads[i].is_none() {
                continue;
            }
            if let Some(back) = &self.backs[i] {
                let g = grads[i].take().expect("checked above");
                back(&self.values, &g, &mut grads);
            }
            // Leaves (params, constants) keep their slot.
        }
        Gradients { grads }
    }

    /// Parameter gradients accumulated by the last backward sweep, in
    /// leaf-creation order.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<(usize, ArrayD<T>)> {
        self.param_leaves
            .iter()
            .filter_map(|&(pidx, t)| grads.take(t).map(|g| (pidx, g)))
            .collect()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "add: shape mismatch"
        );
        let value = &self.values[a.0] + &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                acc_grad(&mut grads[a.0], g.clone());
                acc_grad(&mut grads[b.0], g.clone());
            })),
        )
    }

    pub fn scale(&mut self, a: Tid, k: T) -> Tid {
        let value = self.values[a.0].mapv(|v| v * k);
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                acc_grad(&mut grads[a.0], g.mapv(|v| v * k));
            })),
        )
    }

    /// Elementwise multiply by a scalar parameter (0-d leaf), e.g. a
    /// learnable attention temperature.
    pub fn mul_scalar_param(&mut self, a: Tid, tau: Tid) -> Tid {
        let k = self.values[tau.0].iter().next().copied().expect("0-d scalar");
        let value = self.values[a.0].mapv(|v| v * k);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let k = vals[tau.0].iter().next().copied().expect("0-d scalar");
                acc_grad(&mut grads[a.0], g.mapv(|v| v * k));
                let dot: T = g
                    .iter()
                    .zip(vals[a.0].iter())
                    .map(|(&gv, &av)| gv * av)
                    .sum();
                acc_grad(
                    &mut grads[tau.0],
                    ArrayD::from_elem(IxDyn(&[]), dot),
                );
            })),
        )
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Tid {
        assert_eq!(
            self.values[a.0].shape(),
            self.values[b.0].shape(),
            "mul: shape mismatch"
        );
        let value = &self.values[a.0] * &self.values[b.0];
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                acc_grad(&mut grads[a.0], g * &vals[b.0]);
                acc_grad(&mut grads[b.0], g * &vals[a.0]);
            })),
        )
    }

    pub fn gelu(&mut self, a: Tid) -> Tid {
        // tanh approximation; the backward derivative matches it exactly.
        let k: T = cast(0.7978845608028654); // sqrt(2/pi)
        let c3: T = cast(0.044715);
        let half: T = cast(0.5);
        let one: T = T::one();
        let three: T = cast(3.0);
        let value = self.values[a.0].mapv(|x| {
            let u = k * (x + c3 * x * x * x);
            half * x * (one + u.ftanh())
        });
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let dx = ndarray::Zip::from(g).and(&vals[a.0]).map_collect(|&gv, &x| {
                    let u = k * (x + c3 * x * x * x);
                    let t = u.ftanh();
                    let du = k * (one + three * c3 * x * x);
                    gv * (half * (one + t) + half * x * (one - t * t) * du)
                });
                acc_grad(&mut grads[a.0], dx);
            })),
        )
    }

    // ---- shape plumbing ----

    pub fn reshape(&mut self, a: Tid, shape: &[usize]) -> Tid {
        let n: usize = shape.iter().product();
        assert_eq!(self.values[a.0].len(), n, "reshape: element count mismatch");
        let flat: Vec<T> = self.values[a.0].iter().copied().collect();
        let value = ArrayD::from_shape_vec(IxDyn(shape), flat).expect("counted");
        let old_shape: Vec<usize> = self.values[a.0].shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let flat: Vec<T> = g.iter().copied().collect();
                let gg = ArrayD::from_shape_vec(IxDyn(&old_shape), flat).expect("counted");
                acc_grad(&mut grads[a.0], gg);
            })),
        )
    }

    pub fn permute(&mut self, a: Tid, axes: &[usize]) -> Tid {
        let axes_vec: Vec<usize> = axes.to_vec();
        let value = self.values[a.0]
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes_vec.len()];
        for (i, &ax) in axes_vec.iter().enumerate() {
            inverse[ax] = i;
        }
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let gg = g
                    .view()
                    .permuted_axes(IxDyn(&inverse))
                    .as_standard_layout()
                    .to_owned();
                acc_grad(&mut grads[a.0], gg);
            })),
        )
    }

    /// Concatenates along the last axis.
    pub fn concat_last(&mut self, a: Tid, b: Tid) -> Tid {
        let va = &self.values[a.0];
        let vb = &self.values[b.0];
        let nd = va.ndim();
        assert_eq!(nd, vb.ndim(), "concat: rank mismatch");
        assert_eq!(
            &va.shape()[..nd - 1],
            &vb.shape()[..nd - 1],
            "concat: leading dims mismatch"
        );
        let ca = va.shape()[nd - 1];
        let value = ndarray::concatenate(Axis(nd - 1), &[va.view(), vb.view()])
            .expect("checked dims")
            .as_standard_layout()
            .to_owned();
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let nd = g.ndim();
                let ga = g
                    .slice_axis(Axis(nd - 1), ndarray::Slice::from(..ca))
                    .as_standard_layout()
                    .to_owned();
                let gb = g
                    .slice_axis(Axis(nd - 1), ndarray::Slice::from(ca..))
                    .as_standard_layout()
                    .to_owned();
                acc_grad(&mut grads[a.0], ga);
                acc_grad(&mut grads[b.0], gb);
            })),
        )
    }

    /// Slices `from..to` along the last axis.
    pub fn slice_last(&mut self, a: Tid, from: usize, to: usize) -> Tid {
        let va = &self.values[a.0];
        let nd = va.ndim();
        let full = va.shape()[nd - 1];
        assert!(from < to && to <= full, "slice_last: bad range");
        let value = va
            .slice_axis(Axis(nd - 1), ndarray::Slice::from(from..to))
            .as_standard_layout()
            .to_owned();
        let in_shape: Vec<usize> = va.shape().to_vec();
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let mut gg = ArrayD::<T>::zeros(IxDyn(&in_shape));
                let nd = gg.ndim();
                gg.slice_axis_mut(Axis(nd - 1), ndarray::Slice::from(from..to))
                    .assign(g);
                acc_grad(&mut grads[a.0], gg);
            })),
        )
    }

    /// `(H, W, C) -> (H/r, W/r, r*r*C)`, gathering each `r x r` block
    /// row-major.
    pub fn space_to_depth(&mut self, a: Tid, r: usize) -> Tid {
        let (h, w, c) = dims3(&self.values[a.0], "space_to_depth");
        assert!(h % r == 0 && w % r == 0, "space_to_depth: dims not divisible");
        let (ho, wo) = (h / r, w / r);
        let value = gather_blocks(self.values[a.0].as_slice().expect("standard"), h, w, c, r);
        let value = ArrayD::from_shape_vec(IxDyn(&[ho, wo, r * r * c]), value).expect("counted");
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let gg = scatter_blocks(g.as_slice().expect("standard"), h, w, c, r);
                acc_grad(
                    &mut grads[a.0],
                    ArrayD::from_shape_vec(IxDyn(&[h, w, c]), gg).expect("counted"),
                );
            })),
        )
    }

    /// `(H, W, r*r*C) -> (H*r, W*r, C)`; exact inverse of `space_to_depth`.
    pub fn depth_to_space(&mut self, a: Tid, r: usize) -> Tid {
        let (h, w, cin) = dims3(&self.values[a.0], "depth_to_space");
        assert!(cin % (r * r) == 0, "depth_to_space: channels not divisible");
        let c = cin / (r * r);
        let value = scatter_blocks(self.values[a.0].as_slice().expect("standard"), h * r, w * r, c, r);
        let value = ArrayD::from_shape_vec(IxDyn(&[h * r, w * r, c]), value).expect("counted");
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let gg = gather_blocks(g.as_slice().expect("standard"), h * r, w * r, c, r);
                acc_grad(
                    &mut grads[a.0],
                    ArrayD::from_shape_vec(IxDyn(&[h, w, cin]), gg).expect("counted"),
                );
            })),
        )
    }

    /// Cyclic shift on the two leading (spatial) axes of `(H, W, C)`.
    /// Positive shifts move content toward larger indices, wrapping.
    pub fn roll2d(&mut self, a: Tid, sy: isize, sx: isize) -> Tid {
        fn rolled<T: Real>(v: &ArrayD<T>, sy: isize, sx: isize) -> ArrayD<T> {
            let view = v.view().into_dimensionality::<Ix3>().expect("(H, W, C)");
            let (h, w, c) = view.dim();
            let m = |i: usize, s: isize, n: usize| -> usize {
                (((i as isize - s) % n as isize + n as isize) % n as isize) as usize
            };
            ndarray::Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
                view[[m(y, sy, h), m(x, sx, w), ch]]
            })
            .into_dyn()
        }
        let value = rolled(&self.values[a.0], sy, sx);
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                acc_grad(&mut grads[a.0], rolled(g, -sy, -sx));
            })),
        )
    }

    /// `(H, W, C) -> (nW, win*win, C)` with windows in row-major order.
    pub fn window_partition(&mut self, a: Tid, win: usize) -> Tid {
        let (h, w, c) = dims3(&self.values[a.0], "window_partition");
        assert!(h % win == 0 && w % win == 0, "window_partition: dims not divisible");
        let (nh, nw) = (h / win, w / win);
        let value = windows_gather(self.values[a.0].as_slice().expect("standard"), h, w, c, win);
        let value =
            ArrayD::from_shape_vec(IxDyn(&[nh * nw, win * win, c]), value).expect("counted");
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let gg = windows_scatter(g.as_slice().expect("standard"), h, w, c, win);
                acc_grad(
                    &mut grads[a.0],
                    ArrayD::from_shape_vec(IxDyn(&[h, w, c]), gg).expect("counted"),
                );
            })),
        )
    }

    /// Inverse of `window_partition`: `(nW, win*win, C) -> (H, W, C)`.
    pub fn window_reverse(&mut self, a: Tid, win: usize, h: usize, w: usize) -> Tid {
        let dims = self.values[a.0].shape();
        let (n_windows, c) = (dims[0], dims[2]);
        let (nh, nw) = (h / win, w / win);
        assert_eq!(n_windows, nh * nw, "window_reverse: window count mismatch");
        let value = windows_scatter(self.values[a.0].as_slice().expect("standard"), h, w, c, win);
        let value = ArrayD::from_shape_vec(IxDyn(&[h, w, c]), value).expect("counted");
        self.push(
            value,
            Some(Box::new(move |_vals, g, grads| {
                let gg = windows_gather(g.as_slice().expect("standard"), h, w, c, win);
                acc_grad(
                    &mut grads[a.0],
                    ArrayD::from_shape_vec(IxDyn(&[nh * nw, win * win, c]), gg).expect("counted"),
                );
            })),
        )
    }

    // ---- linear algebra ----

    /// 2-D matrix product `a (m,k) . b (k,n)`.
    pub fn matmul(&mut self, a: Tid, b: Tid) -> Tid {
        let va = self.values[a.0].view().into_dimensionality::<Ix2>().expect("2-d lhs");
        let vb = self.values[b.0].view().into_dimensionality::<Ix2>().expect("2-d rhs");
        let value = va.dot(&vb).into_dyn();
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let va = vals[a.0].view().into_dimensionality::<Ix2>().expect("2-d");
                let vb = vals[b.0].view().into_dimensionality::<Ix2>().expect("2-d");
                acc_grad(&mut grads[a.0], g2.dot(&vb.t()).into_dyn());
                acc_grad(&mut grads[b.0], va.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// `a (m,k) . b(n,k)^T -> (m,n)`; avoids materializing the transpose.
    pub fn matmul_nt(&mut self, a: Tid, b: Tid) -> Tid {
        let va = self.values[a.0].view().into_dimensionality::<Ix2>().expect("2-d lhs");
        let vb = self.values[b.0].view().into_dimensionality::<Ix2>().expect("2-d rhs");
        let value = va.dot(&vb.t()).into_dyn();
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let g2 = g.view().into_dimensionality::<Ix2>().expect("2-d grad");
                let va = vals[a.0].view().into_dimensionality::<Ix2>().expect("2-d");
                let vb = vals[b.0].view().into_dimensionality::<Ix2>().expect("2-d");
                acc_grad(&mut grads[a.0], g2.dot(&vb).into_dyn());
                acc_grad(&mut grads[b.0], g2.t().dot(&va).into_dyn());
            })),
        )
    }

    /// Batched matmul `(B,m,k) . (B,k,n)`.
    pub fn bmm(&mut self, a: Tid, b: Tid) -> Tid {
        let va = self.values[a.0].view().into_dimensionality::<Ix3>().expect("3-d lhs");
        let vb = self.values[b.0].view().into_dimensionality::<Ix3>().expect("3-d rhs");
        let (bs, m, _k) = va.dim();
        let n = vb.dim().2;
        assert_eq!(va.dim().2, vb.dim().1, "bmm: inner dims");
        assert_eq!(bs, vb.dim().0, "bmm: batch dims");
        let mut out = ndarray::Array3::<T>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i)));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let va = vals[a.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let vb = vals[b.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let (bs, m, k) = va.dim();
                let n = vb.dim().2;
                let mut ga = ndarray::Array3::<T>::zeros((bs, m, k));
                let mut gb = ndarray::Array3::<T>::zeros((bs, k, n));
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&vb.index_axis(Axis(0), i).t()));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&va.index_axis(Axis(0), i).t().dot(&gi));
                }
                acc_grad(&mut grads[a.0], ga.into_dyn());
                acc_grad(&mut grads[b.0], gb.into_dyn());
            })),
        )
    }

    /// Batched `a (B,m,k) . b (B,n,k)^T`.
    pub fn bmm_nt(&mut self, a: Tid, b: Tid) -> Tid {
        let va = self.values[a.0].view().into_dimensionality::<Ix3>().expect("3-d lhs");
        let vb = self.values[b.0].view().into_dimensionality::<Ix3>().expect("3-d rhs");
        let (bs, m, _k) = va.dim();
        let n = vb.dim().1;
        assert_eq!(va.dim().2, vb.dim().2, "bmm_nt: inner dims");
        let mut out = ndarray::Array3::<T>::zeros((bs, m, n));
        for i in 0..bs {
            out.index_axis_mut(Axis(0), i)
                .assign(&va.index_axis(Axis(0), i).dot(&vb.index_axis(Axis(0), i).t()));
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let va = vals[a.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let vb = vals[b.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let (bs, m, k) = va.dim();
                let n = vb.dim().1;
                let mut ga = ndarray::Array3::<T>::zeros((bs, m, k));
                let mut gb = ndarray::Array3::<T>::zeros((bs, n, k));
                for i in 0..bs {
                    let gi = g3.index_axis(Axis(0), i);
                    ga.index_axis_mut(Axis(0), i)
                        .assign(&gi.dot(&vb.index_axis(Axis(0), i)));
                    gb.index_axis_mut(Axis(0), i)
                        .assign(&gi.t().dot(&va.index_axis(Axis(0), i)));
                }
                acc_grad(&mut grads[a.0], ga.into_dyn());
                acc_grad(&mut grads[b.0], gb.into_dyn());
            })),
        )
    }

    /// Affine map over the last axis: `y = x . w + b`. Works for any rank;
    /// leading axes are flattened and restored. Narrow outputs (the
    /// per-class heads) take a hand-rolled path; matrix backends degrade
    /// badly at rank-1 shapes.
    pub fn linear(&mut self, x: Tid, w: Tid, b: Option<Tid>) -> Tid {
        let vx = &self.values[x.0];
        let vw = self.values[w.0].view().into_dimensionality::<Ix2>().expect("2-d weight");
        let (cin, cout) = vw.dim();
        let nd = vx.ndim();
        assert_eq!(vx.shape()[nd - 1], cin, "linear: input features");
        let lead: usize = vx.shape()[..nd - 1].iter().product();
        let mut out_shape: Vec<usize> = vx.shape()[..nd - 1].to_vec();
        out_shape.push(cout);

        if cout <= 4 {
            let xs = vx.as_slice().expect("standard layout");
            // Gather weight columns contiguously once.
            let ws = self.values[w.0].as_slice().expect("standard layout");
            let mut wcols = vec![T::zero(); cin * cout];
            for c in 0..cin {
                for j in 0..cout {
                    wcols[j * cin + c] = ws[c * cout + j];
                }
            }
            let bias: Vec<T> = match b {
                Some(bt) => self.values[bt.0].iter().copied().collect(),
                None => vec![T::zero(); cout],
            };
            let mut y = vec![T::zero(); lead * cout];
            for l in 0..lead {
                let xr = &xs[l * cin..(l + 1) * cin];
                for j in 0..cout {
                    let wc = &wcols[j * cin..(j + 1) * cin];
                    let mut acc = [T::zero(); 8];
                    let n8 = cin / 8 * 8;
                    let mut c = 0;
                    while c < n8 {
                        for u in 0..8 {
                            acc[u] = acc[u] + xr[c + u] * wc[c + u];
                        }
                        c += 8;
                    }
                    let mut s = (((acc[0] + acc[1]) + (acc[2] + acc[3]))
                        + ((acc[4] + acc[5]) + (acc[6] + acc[7])))
                        + bias[j];
                    for cc in n8..cin {
                        s = s + xr[cc] * wc[cc];
                    }
                    y[l * cout + j] = s;
                }
            }
            let value = ArrayD::from_shape_vec(IxDyn(&out_shape), y).expect("counted");
            return self.push(
                value,
                Some(Box::new(move |vals, g, grads| {
                    let gs = g.as_slice().expect("standard layout");
                    let xs = vals[x.0].as_slice().expect("standard layout");
                    let ws = vals[w.0].as_slice().expect("standard layout");
                    let mut gx = vec![T::zero(); lead * cin];
                    let mut dw = vec![T::zero(); cin * cout];
                    let mut db = vec![T::zero(); cout];
                    for l in 0..lead {
                        let gr = &gs[l * cout..(l + 1) * cout];
                        let xr = &xs[l * cin..(l + 1) * cin];
                        let gxr = &mut gx[l * cin..(l + 1) * cin];
                        for j in 0..cout {
                            let gv = gr[j];
                            db[j] = db[j] + gv;
                            for c in 0..cin {
                                gxr[c] = gxr[c] + gv * ws[c * cout + j];
                                dw[c * cout + j] = dw[c * cout + j] + gv * xr[c];
                            }
                        }
                    }
                    let mut in_shape: Vec<usize> = vals[x.0].shape().to_vec();
                    let nd = in_shape.len();
                    in_shape[nd - 1] = cin;
                    acc_grad(
                        &mut grads[x.0],
                        ArrayD::from_shape_vec(IxDyn(&in_shape), gx).expect("counted"),
                    );
                    acc_grad(
                        &mut grads[w.0],
                        ArrayD::from_shape_vec(IxDyn(&[cin, cout]), dw).expect("counted"),
                    );
                    if let Some(bt) = b {
                        acc_grad(
                            &mut grads[bt.0],
                            ArrayD::from_shape_vec(IxDyn(&[cout]), db).expect("counted"),
                        );
                    }
                })),
            );
        }

        let x2 = vx
            .view()
            .into_shape_with_order((lead, cin))
            .expect("standard layout");
        let mut y2 = x2.dot(&vw);
        if let Some(bt) = b {
            let vb = self.values[bt.0].view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
            y2 += &vb;
        }
        let value = reshape_any(y2.into_dyn(), &out_shape);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let nd = g.ndim();
                let lead: usize = g.shape()[..nd - 1].iter().product();
                let g2 = g
                    .view()
                    .into_shape_with_order((lead, cout))
                    .expect("standard layout");
                let x2 = vals[x.0]
                    .view()
                    .into_shape_with_order((lead, cin))
                    .expect("standard layout");
                let vw = vals[w.0].view().into_dimensionality::<Ix2>().expect("2-d");
                let gx = g2.dot(&vw.t());
                let mut in_shape: Vec<usize> = vals[x.0].shape().to_vec();
                in_shape[nd - 1] = cin;
                acc_grad(&mut grads[x.0], reshape_any(gx.into_dyn(), &in_shape));
                acc_grad(&mut grads[w.0], x2.t().dot(&g2).into_dyn());
                if let Some(bt) = b {
                    acc_grad(&mut grads[bt.0], g2.sum_axis(Axis(0)).into_dyn());
                }
            })),
        )
    }

    // ---- normalization and activations over the last axis ----

    /// LayerNorm over the last axis with learnable scale and offset.
    pub fn layer_norm(&mut self, x: Tid, gamma: Tid, beta: Tid, eps: f64) -> Tid {
        let vx = &self.values[x.0];
        let nd = vx.ndim();
        let c = vx.shape()[nd - 1];
        let lead: usize = vx.shape()[..nd - 1].iter().product();
        let xs = vx.as_slice().expect("values are standard layout");
        let gm = self.values[gamma.0].as_slice().expect("1-d");
        let bt = self.values[beta.0].as_slice().expect("1-d");
        let epst: T = cast(eps);
        let cn: T = cast(c as f64);
        let mut y = vec![T::zero(); lead * c];
        let mut mean = vec![T::zero(); lead];
        let mut rstd = vec![T::zero(); lead];
        for i in 0..lead {
            let row = &xs[i * c..(i + 1) * c];
            let m = row.iter().copied().sum::<T>() / cn;
            let var = row.iter().fold(T::zero(), |s, &v| s + (v - m) * (v - m)) / cn;
            let r = T::one() / (var + epst).sqrt();
            mean[i] = m;
            rstd[i] = r;
            let out = &mut y[i * c..(i + 1) * c];
            for j in 0..c {
                out[j] = (row[j] - m) * r * gm[j] + bt[j];
            }
        }
        let shape: Vec<usize> = vx.shape().to_vec();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), y).expect("counted");
        let mean = Arc::new(mean);
        let rstd = Arc::new(rstd);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let gs = g.as_slice().expect("grads are standard layout");
                let xs = vals[x.0].as_slice().expect("standard layout");
                let gm = vals[gamma.0].as_slice().expect("1-d");
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); lead * c];
                for i in 0..lead {
                    let row = &xs[i * c..(i + 1) * c];
                    let grow = &gs[i * c..(i + 1) * c];
                    let (m, r) = (mean[i], rstd[i]);
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..c {
                        let xhat = (row[j] - m) * r;
                        let dxh = grow[j] * gm[j];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat;
                        dgamma[j] = dgamma[j] + grow[j] * xhat;
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    mean_dxhat = mean_dxhat / cn;
                    mean_dxhat_xhat = mean_dxhat_xhat / cn;
                    let out = &mut dx[i * c..(i + 1) * c];
                    for j in 0..c {
                        let xhat = (row[j] - m) * r;
                        let dxh = grow[j] * gm[j];
                        out[j] = r * (dxh - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                let in_shape: Vec<usize> = vals[x.0].shape().to_vec();
                acc_grad(
                    &mut grads[x.0],
                    ArrayD::from_shape_vec(IxDyn(&in_shape), dx).expect("counted"),
                );
                acc_grad(
                    &mut grads[gamma.0],
                    ArrayD::from_shape_vec(IxDyn(&[c]), dgamma).expect("counted"),
                );
                acc_grad(
                    &mut grads[beta.0],
                    ArrayD::from_shape_vec(IxDyn(&[c]), dbeta).expect("counted"),
                );
            })),
        )
    }

    /// L2-normalizes each vector along the last axis (cosine-attention
    /// normalization).
    pub fn l2_normalize_last(&mut self, x: Tid, eps: f64) -> Tid {
        let vx = &self.values[x.0];
        let nd = vx.ndim();
        let c = vx.shape()[nd - 1];
        let lead: usize = vx.shape()[..nd - 1].iter().product();
        let x2 = vx.view().into_shape_with_order((lead, c)).expect("standard layout");
        let epst: T = cast(eps);
        let mut y = Array2::<T>::zeros((lead, c));
        let mut rnorm = Array1::<T>::zeros(lead);
        for i in 0..lead {
            let s = x2.row(i).fold(T::zero(), |s, &v| s + v * v);
            let r = T::one() / (s + epst).sqrt();
            rnorm[i] = r;
            for j in 0..c {
                y[[i, j]] = x2[[i, j]] * r;
            }
        }
        let shape: Vec<usize> = vx.shape().to_vec();
        let value = y.into_shape_with_order(IxDyn(&shape)).expect("counted");
        let rnorm = Arc::new(rnorm);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let g2 = g.view().into_shape_with_order((lead, c)).expect("standard layout");
                let x2 = vals[x.0]
                    .view()
                    .into_shape_with_order((lead, c))
                    .expect("standard layout");
                let mut dx = Array2::<T>::zeros((lead, c));
                for i in 0..lead {
                    let r = rnorm[i];
                    let mut gdotx = T::zero();
                    for j in 0..c {
                        gdotx = gdotx + g2[[i, j]] * x2[[i, j]];
                    }
                    let r3 = r * r * r;
                    for j in 0..c {
                        dx[[i, j]] = r * g2[[i, j]] - r3 * x2[[i, j]] * gdotx;
                    }
                }
                let in_shape: Vec<usize> = vals[x.0].shape().to_vec();
                acc_grad(
                    &mut grads[x.0],
                    dx.into_shape_with_order(IxDyn(&in_shape)).expect("counted"),
                );
            })),
        )
    }

    /// Softmax over the last axis, with an optional additive mask that is
    /// broadcast over axis 1 when the input is `(nW, heads, m, m)` and the
    /// mask is `(nW, m, m)`.
    pub fn softmax_last(&mut self, x: Tid, mask: Option<Arc<ArrayD<T>>>) -> Tid {
        let vx = &self.values[x.0];
        let nd = vx.ndim();
        let c = vx.shape()[nd - 1];
        let lead: usize = vx.shape()[..nd - 1].iter().product();
        let src = vx.as_slice().expect("values are standard layout");
        // Row index into the (nW, m, m) mask for a given flattened row.
        let mask_stride = if mask.is_some() {
            assert_eq!(nd, 4, "masked softmax expects (nW, heads, m, m)");
            vx.shape()[1] // heads
        } else {
            0
        };
        let mut out = vec![T::zero(); lead * c];
        let mut buf = vec![T::zero(); c];
        for i in 0..lead {
            let row = &src[i * c..(i + 1) * c];
            let dst = &mut out[i * c..(i + 1) * c];
            let work: &mut [T] = if let Some(m) = &mask {
                let ms = m.as_slice().expect("mask standard layout");
                // rows iterate (wi, head, r); the mask ignores the head.
                let wi = i / (mask_stride * vx.shape()[2]);
                let r = i % vx.shape()[2];
                let mrow = &ms[(wi * vx.shape()[2] + r) * c..(wi * vx.shape()[2] + r + 1) * c];
                for j in 0..c {
                    buf[j] = row[j] + mrow[j];
                }
                &mut buf
            } else {
                dst.copy_from_slice(row);
                dst
            };
            let max = slice_max(work);
            for v in work.iter_mut() {
                *v = (*v - max).fexp();
            }
            let inv = T::one() / slice_sum(work);
            for v in work.iter_mut() {
                *v = *v * inv;
            }
            if mask.is_some() {
                out[i * c..(i + 1) * c].copy_from_slice(&buf);
            }
        }
        let shape: Vec<usize> = vx.shape().to_vec();
        let value = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("counted");
        // The backward reads the softmax output itself, so the node id is
        // fixed before pushing.
        let self_id = Tid(self.values.len());
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let ys = vals[self_id.0].as_slice().expect("standard layout");
                let gs = g.as_slice().expect("standard layout");
                let mut dx = vec![T::zero(); lead * c];
                for i in 0..lead {
                    let yr = &ys[i * c..(i + 1) * c];
                    let gr = &gs[i * c..(i + 1) * c];
                    let mut dot = [T::zero(); 4];
                    let n4 = c / 4 * 4;
                    let mut j = 0;
                    while j < n4 {
                        dot[0] = dot[0] + gr[j] * yr[j];
                        dot[1] = dot[1] + gr[j + 1] * yr[j + 1];
                        dot[2] = dot[2] + gr[j + 2] * yr[j + 2];
                        dot[3] = dot[3] + gr[j + 3] * yr[j + 3];
                        j += 4;
                    }
                    let mut dotv = (dot[0] + dot[1]) + (dot[2] + dot[3]);
                    for jj in n4..c {
                        dotv = dotv + gr[jj] * yr[jj];
                    }
                    let outr = &mut dx[i * c..(i + 1) * c];
                    for jj in 0..c {
                        outr[jj] = yr[jj] * (gr[jj] - dotv);
                    }
                }
                let in_shape: Vec<usize> = vals[x.0].shape().to_vec();
                acc_grad(
                    &mut grads[x.0],
                    ArrayD::from_shape_vec(IxDyn(&in_shape), dx).expect("counted"),
                );
            })),
        )
    }

    /// Adds a learned relative-position bias to window-attention logits.
    /// `logits (nW, heads, m, m)`, `table (n_rel, heads)`, `index (m*m)`
    /// pairs of positions.
    pub fn rel_bias_add(&mut self, logits: Tid, table: Tid, index: Arc<Vec<usize>>) -> Tid {
        let vl = self.values[logits.0]
            .view()
            .into_dimensionality::<Ix4>()
            .expect("(nW, heads, m, m)");
        let vt = self.values[table.0].view().into_dimensionality::<Ix2>().expect("2-d table");
        let (nw, heads, m, m2) = vl.dim();
        assert_eq!(m, m2);
        assert_eq!(index.len(), m * m, "rel bias index size");
        let mut out = vl.to_owned();
        for wi in 0..nw {
            for h in 0..heads {
                for i in 0..m {
                    for j in 0..m {
                        out[[wi, h, i, j]] = out[[wi, h, i, j]] + vt[[index[i * m + j], h]];
                    }
                }
            }
        }
        let idx = index.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                acc_grad(&mut grads[logits.0], g.clone());
                let g4 = g.view().into_dimensionality::<Ix4>().expect("4-d grad");
                let (nw, heads, m, _) = g4.dim();
                let n_rel = vals[table.0].shape()[0];
                let mut dt = Array2::<T>::zeros((n_rel, heads));
                for wi in 0..nw {
                    for h in 0..heads {
                        for i in 0..m {
                            for j in 0..m {
                                dt[[idx[i * m + j], h]] =
                                    dt[[idx[i * m + j], h]] + g4[[wi, h, i, j]];
                            }
                        }
                    }
                }
                acc_grad(&mut grads[table.0], dt.into_dyn());
            })),
        )
    }

    // ---- convolutions ----

    /// 3x3 same-padding convolution on `(H, W, Cin)` with weight stored as
    /// `(9*Cin, Cout)` and optional bias `(Cout)`.
    pub fn conv3x3(&mut self, x: Tid, w: Tid, b: Option<Tid>) -> Tid {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("(H, W, C)");
        let vw = self.values[w.0].view().into_dimensionality::<Ix2>().expect("(9*Cin, Cout)");
        let (h, wdt, cin) = vx.dim();
        let cout = vw.dim().1;
        assert_eq!(vw.dim().0, 9 * cin, "conv3x3: weight rows");
        let col = Arc::new(im2col3(&vx, h, wdt, cin));
        let mut y2 = col.dot(&vw);
        if let Some(bt) = b {
            let vb = self.values[bt.0].view().into_dimensionality::<ndarray::Ix1>().expect("1-d");
            y2 += &vb;
        }
        let value = reshape_any(y2.into_dyn(), &[h, wdt, cout]);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let g2 = g
                    .view()
                    .into_shape_with_order((h * wdt, cout))
                    .expect("standard layout");
                let vw = vals[w.0].view().into_dimensionality::<Ix2>().expect("2-d");
                acc_grad(&mut grads[w.0], col.t().dot(&g2).into_dyn());
                if let Some(bt) = b {
                    acc_grad(&mut grads[bt.0], g2.sum_axis(Axis(0)).into_dyn());
                }
                let dcol = g2.dot(&vw.t());
                let dx = col2im3(&dcol, h, wdt, cin);
                acc_grad(&mut grads[x.0], dx.into_dyn());
            })),
        )
    }

    /// Depthwise 3x3 same-padding convolution on `(H, W, C)` with kernel
    /// `(3, 3, C)`.
    pub fn dwconv3x3(&mut self, x: Tid, k: Tid) -> Tid {
        let vx = self.values[x.0].view().into_dimensionality::<Ix3>().expect("(H, W, C)");
        let vk = self.values[k.0].view().into_dimensionality::<Ix3>().expect("(3, 3, C)");
        let (h, w, c) = vx.dim();
        assert_eq!(vk.dim(), (3, 3, c), "dwconv3x3: kernel dims");
        let mut out = ndarray::Array3::<T>::zeros((h, w, c));
        for y in 0..h {
            for xx in 0..w {
                for dy in 0..3usize {
                    let sy = y as isize + dy as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..3usize {
                        let sx = xx as isize + dx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        for ch in 0..c {
                            out[[y, xx, ch]] = out[[y, xx, ch]]
                                + vx[[sy as usize, sx as usize, ch]] * vk[[dy, dx, ch]];
                        }
                    }
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |vals, g, grads| {
                let g3 = g.view().into_dimensionality::<Ix3>().expect("3-d grad");
                let vx = vals[x.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let vk = vals[k.0].view().into_dimensionality::<Ix3>().expect("3-d");
                let (h, w, c) = vx.dim();
                let mut dx = ndarray::Array3::<T>::zeros((h, w, c));
                let mut dk = ndarray::Array3::<T>::zeros((3, 3, c));
                for y in 0..h {
                    for xx in 0..w {
                        for dy in 0..3usize {
                            let sy = y as isize + dy as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx_ in 0..3usize {
                                let sx = xx as isize + dx_ as isize - 1;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                for ch in 0..c {
                                    let gv = g3[[y, xx, ch]];
                                    dx[[sy as usize, sx as usize, ch]] =
                                        dx[[sy as usize, sx as usize, ch]] + gv * vk[[dy, dx_, ch]];
                                    dk[[dy, dx_, ch]] = dk[[dy, dx_, ch]]
                                        + gv * vx[[sy as usize, sx as usize, ch]];
                                }
                            }
                        }
                    }
                }
                acc_grad(&mut grads[x.0], dx.into_dyn());
                acc_grad(&mut grads[k.0], dk.into_dyn());
            })),
        )
    }

    // ---- reductions and losses ----

    /// Mean of all elements; returns a 0-d scalar node.
    pub fn mean_all(&mut self, x: Tid) -> Tid {
        let n = self.values[x.0].len();
        let inv: T = cast(1.0 / n as f64);
        let s: T = self.values[x.0].iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s * inv);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.iter().next().copied().expect("0-d") * inv;
                acc_grad(
                    &mut grads[x.0],
                    ArrayD::from_elem(vals[x.0].raw_dim(), gv),
                );
            })),
        )
    }

    /// Sum of all elements; returns a 0-d scalar node.
    pub fn sum_all(&mut self, x: Tid) -> Tid {
        let s: T = self.values[x.0].iter().copied().sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.iter().next().copied().expect("0-d");
                acc_grad(
                    &mut grads[x.0],
                    ArrayD::from_elem(vals[x.0].raw_dim(), gv),
                );
            })),
        )
    }

    /// Numerically stable mean binary cross-entropy on logits against a
    /// constant `{0,1}` target of the same shape.
    pub fn bce_with_logits_mean(&mut self, logits: Tid, targets: Arc<ArrayD<T>>) -> Result<Tid> {
        let vx = &self.values[logits.0];
        if vx.shape() != targets.shape() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{:?}", targets.shape()),
                format!("{:?}", vx.shape()),
            ));
        }
        let n = vx.len();
        let inv: T = cast(1.0 / n as f64);
        let mut s = T::zero();
        for (&x, &t) in vx.iter().zip(targets.iter()) {
            // max(x, 0) - x*t + ln(1 + exp(-|x|))
            let term = x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln();
            s = s + term;
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s * inv);
        let tgt = targets.clone();
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.iter().next().copied().expect("0-d") * inv;
                let dx = ndarray::Zip::from(&vals[logits.0])
                    .and(tgt.as_ref())
                    .map_collect(|&x, &t| {
                        let sig = T::one() / (T::one() + (-x).exp());
                        (sig - t) * gv
                    });
                acc_grad(&mut grads[logits.0], dx);
            })),
        ))
    }

    /// Mean multi-class cross-entropy on logits `(L, K)` against constant
    /// class indices `(L)`.
    pub fn ce_mean(&mut self, logits: Tid, targets: Arc<Vec<u8>>) -> Result<Tid> {
        let vx = self.values[logits.0].view().into_dimensionality::<Ix2>().expect("(L, K)");
        let (l, k) = vx.dim();
        if targets.len() != l {
            return Err(Error::shape(
                "ce_mean",
                format!("{} targets", l),
                format!("{}", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| (t as usize) >= k) {
            return Err(Error::Config(format!(
                "ce_mean: target class {bad} out of range for {k} logits"
            )));
        }
        let inv: T = cast(1.0 / l as f64);
        let mut s = T::zero();
        for i in 0..l {
            let row = vx.row(i);
            let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = max + row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln();
            s = s + lse - row[targets[i] as usize];
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s * inv);
        Ok(self.push(
            value,
            Some(Box::new(move |vals, g, grads| {
                let gv = g.iter().next().copied().expect("0-d") * inv;
                let vx = vals[logits.0].view().into_dimensionality::<Ix2>().expect("2-d");
                let (l, k) = vx.dim();
                let mut dx = Array2::<T>::zeros((l, k));
                for i in 0..l {
                    let row = vx.row(i);
                    let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
                    let mut sum = T::zero();
                    for j in 0..k {
                        let e = (row[j] - max).exp();
                        dx[[i, j]] = e;
                        sum = sum + e;
                    }
                    for j in 0..k {
                        let p = dx[[i, j]] / sum;
                        let t = if targets[i] as usize == j { T::one() } else { T::zero() };
                        dx[[i, j]] = (p - t) * gv;
                    }
                }
                acc_grad(&mut grads[logits.0], dx.into_dyn());
            })),
        ))
    }

    /// Checks that a node's values are finite; errors with the layer name.
    pub fn check_finite(&self, t: Tid, layer: &str) -> Result<()> {
        if self.values[t.0].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { layer: layer.to_string() });
        }
        Ok(())
    }
}

/// Slice sum with eight accumulators: breaks the serial dependency chain so
/// the loop pipelines, while keeping a fixed, deterministic grouping.
#[inline]
pub(crate) fn slice_sum<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for j in 0..8 {
            acc[j] = acc[j] + ch[j];
        }
    }
    let mut tail = T::zero();
    for &v in rest {
        tail = tail + v;
    }
    (((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))) + tail
}

#[inline]
fn slice_max<T: Real>(xs: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = xs.chunks_exact(8);
    let rest = chunks.remainder();
    for ch in chunks {
        for j in 0..8 {
            acc[j] = acc[j].max(ch[j]);
        }
    }
    let mut m = acc.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    for &v in rest {
        m = m.max(v);
    }
    m
}

fn dims3<T: Real>(v: &ArrayD<T>, op: &str) -> (usize, usize, usize) {
    let s = v.shape();
    assert_eq!(s.len(), 3, "{op} expects a 3-d tensor, got {s:?}");
    (s[0], s[1], s[2])
}

/// `(H, W, C)` image slice -> block-gathered `(H/r, W/r, r*r*C)` buffer.
fn gather_blocks<T: Real>(src: &[T], h: usize, w: usize, c: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); h * w * c];
    let block = r * r * c;
    for y in 0..ho {
        for x in 0..wo {
            let dst_base = (y * wo + x) * block;
            for dy in 0..r {
                for dx in 0..r {
                    let src_off = ((y * r + dy) * w + (x * r + dx)) * c;
                    let dst_off = dst_base + (dy * r + dx) * c;
                    out[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
    }
    out
}

/// Exact inverse of `gather_blocks`.
fn scatter_blocks<T: Real>(src: &[T], h: usize, w: usize, c: usize, r: usize) -> Vec<T> {
    let (ho, wo) = (h / r, w / r);
    let mut out = vec![T::zero(); h * w * c];
    let block = r * r * c;
    for y in 0..ho {
        for x in 0..wo {
            let src_base = (y * wo + x) * block;
            for dy in 0..r {
                for dx in 0..r {
                    let dst_off = ((y * r + dy) * w + (x * r + dx)) * c;
                    let src_off = src_base + (dy * r + dx) * c;
                    out[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
    }
    out
}

/// `(H, W, C)` -> `(nW, win*win, C)` buffer.
fn windows_gather<T: Real>(src: &[T], h: usize, w: usize, c: usize, win: usize) -> Vec<T> {
    let (nh, nw) = (h / win, w / win);
    let mut out = vec![T::zero(); h * w * c];
    for wy in 0..nh {
        for wx in 0..nw {
            let dst_base = (wy * nw + wx) * win * win * c;
            for dy in 0..win {
                let src_off = ((wy * win + dy) * w + wx * win) * c;
                let dst_off = dst_base + dy * win * c;
                out[dst_off..dst_off + win * c].copy_from_slice(&src[src_off..src_off + win * c]);
            }
        }
    }
    out
}

/// Exact inverse of `windows_gather`.
fn windows_scatter<T: Real>(src: &[T], h: usize, w: usize, c: usize, win: usize) -> Vec<T> {
    let (nh, nw) = (h / win, w / win);
    let mut out = vec![T::zero(); h * w * c];
    for wy in 0..nh {
        for wx in 0..nw {
            let src_base = (wy * nw + wx) * win * win * c;
            for dy in 0..win {
                let dst_off = ((wy * win + dy) * w + wx * win) * c;
                let src_off = src_base + dy * win * c;
                out[dst_off..dst_off + win * c].copy_from_slice(&src[src_off..src_off + win * c]);
            }
        }
    }
    out
}

/// Reshapes regardless of the source layout, copying only when needed.
fn reshape_any<T: Real>(arr: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    debug_assert_eq!(arr.len(), shape.iter().product::<usize>());
    if arr.is_standard_layout() {
        arr.into_shape_with_order(IxDyn(shape)).expect("counted")
    } else {
        let flat: Vec<T> = arr.iter().copied().collect();
        ArrayD::from_shape_vec(IxDyn(shape), flat).expect("counted")
    }
}

/// 3x3 same-padding im2col: `(H, W, C) -> (H*W, 9*C)`.
fn im2col3<T: Real>(x: &ndarray::ArrayView3<T>, h: usize, w: usize, c: usize) -> Array2<T> {
    let src = x.as_slice().expect("standard layout");
    let mut col = vec![T::zero(); h * w * 9 * c];
    let row_w = 9 * c;
    for y in 0..h {
        for dy in 0..3usize {
            let sy = y as isize + dy as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            for dx in 0..3usize {
                // Contiguous run of columns whose sampled x stays in bounds.
                let x0 = if dx == 0 { 1 } else { 0 };
                let x1 = if dx == 2 { w - 1 } else { w };
                let base = (dy * 3 + dx) * c;
                for xx in x0..x1 {
                    let sx = xx + dx - 1;
                    let src_off = (sy * w + sx) * c;
                    let dst_off = (y * w + xx) * row_w + base;
                    col[dst_off..dst_off + c].copy_from_slice(&src[src_off..src_off + c]);
                }
            }
        }
    }
    Array2::from_shape_vec((h * w, row_w), col).expect("counted")
}

/// Adjoint of `im2col3`: scatter column gradients back to image layout.
fn col2im3<T: Real>(dcol: &Array2<T>, h: usize, w: usize, c: usize) -> ndarray::Array3<T> {
    let src = dcol.as_slice().expect("standard layout");
    let mut out = vec![T::zero(); h * w * c];
    let row_w = 9 * c;
    for y in 0..h {
        for dy in 0..3usize {
            let sy = y as isize + dy as isize - 1;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            let sy = sy as usize;
            for dx in 0..3usize {
                let x0 = if dx == 0 { 1 } else { 0 };
                let x1 = if dx == 2 { w - 1 } else { w };
                let base = (dy * 3 + dx) * c;
                for xx in x0..x1 {
                    let sx = xx + dx - 1;
                    let dst_off = (sy * w + sx) * c;
                    let src_off = (y * w + xx) * row_w + base;
                    for ch in 0..c {
                        out[dst_off + ch] = out[dst_off + ch] + src[src_off + ch];
                    }
                }
            }
        }
    }
    ndarray::Array3::from_shape_vec((h, w, c), out).expect("counted")
}
