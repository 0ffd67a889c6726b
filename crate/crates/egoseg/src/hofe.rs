//! Hand-guided object feature enhancer.
//!
//! Cross-attention where hand features form the queries and object features
//! form keys and values. Queries, keys, and values each come from a
//! LayerNorm followed by two stacked 1x1 convolutions; the attended values
//! pass through a 3x3 convolution, pick up the hand features residually, and
//! the sum lands back on the object features:
//!
//! ```text
//! A       = softmax(norm(Q) . norm(K)^T)
//! F_o     = conv3x3(A . V)
//! F_guide = F_o + D_hand
//! D'_obj  = D_obj + F_guide
//! ```
//!
//! The normalization inside the attention is configurable: L2 per position
//! with a learnable temperature (default), or none with a fixed 1/sqrt(C)
//! scale.

use crate::encoder::{node_to_map, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::{leaf, trunc_normal, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::tape::{cast, Real, Tape, Tid};
use ndarray::{Array2, ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// How attention logits are normalized before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnNorm {
    /// Cosine attention: L2-normalize queries and keys per position, scale
    /// by a learnable temperature initialized to 1.
    #[default]
    L2,
    /// Raw dot products scaled by `1/sqrt(C)`.
    None,
}

/// Largest `H*W` the dense attention accepts.
pub const DEFAULT_ATTENTION_CAP: usize = 4096;

/// Post-softmax attention: rows are hand positions, columns object
/// positions; every row sums to 1.
#[derive(Debug, Clone)]
pub struct AttentionMatrix<T: Real> {
    data: Array2<T>,
}

impl<T: Real> AttentionMatrix<T> {
    pub fn data(&self) -> &Array2<T> {
        &self.data
    }

    pub fn n_positions(&self) -> usize {
        self.data.nrows()
    }

    /// Max absolute deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> T {
        let mut worst = T::zero();
        for row in self.data.rows() {
            let s: T = row.iter().copied().sum();
            let err = (s - T::one()).abs();
            if err > worst {
                worst = err;
            }
        }
        worst
    }
}

/// One enhancer instance; the model holds two (left and right objects).
#[derive(Debug, Clone)]
pub struct Hofe {
    ln_hand: LayerNorm,
    ln_obj: LayerNorm,
    q1: Linear,
    q2: Linear,
    k1: Linear,
    k2: Linear,
    v1: Linear,
    v2: Linear,
    out_w: ParamId,
    out_b: ParamId,
    temperature: ParamId,
    pub norm: AttnNorm,
    pub gelu_between: bool,
    channels: usize,
    cap: usize,
}

impl Hofe {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        norm: AttnNorm,
        gelu_between: bool,
    ) -> Self {
        let ln_hand = LayerNorm::new(store, &format!("{name}.ln_hand"), c);
        let ln_obj = LayerNorm::new(store, &format!("{name}.ln_obj"), c);
        let mk = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, n: String| {
            Linear::new(store, rng, &n, c, c, true)
        };
        let q1 = mk(store, rng, format!("{name}.q1"));
        let q2 = mk(store, rng, format!("{name}.q2"));
        let k1 = mk(store, rng, format!("{name}.k1"));
        let k2 = mk(store, rng, format!("{name}.k2"));
        let v1 = mk(store, rng, format!("{name}.v1"));
        let v2 = mk(store, rng, format!("{name}.v2"));
        let out_w = store.add(
            format!("{name}.out_conv.weight"),
            trunc_normal(rng, INIT_STD, &[9 * c, c]),
        );
        let out_b = store.add(format!("{name}.out_conv.bias"), ArrayD::zeros(IxDyn(&[c])));
        let temperature = store.add(
            format!("{name}.temperature"),
            ArrayD::from_elem(IxDyn(&[]), cast::<T>(1.0)),
        );
        Hofe {
            ln_hand,
            ln_obj,
            q1,
            q2,
            k1,
            k2,
            v1,
            v2,
            out_w,
            out_b,
            temperature,
            norm,
            gelu_between,
            channels: c,
            cap: DEFAULT_ATTENTION_CAP,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.cap = cap;
        self
    }

    fn check_shapes(&self, hand: &[usize], obj: &[usize]) -> Result<()> {
        if hand != obj {
            return Err(Error::shape(
                "hofe",
                format!("{hand:?}"),
                format!("{obj:?}"),
            ));
        }
        if hand.len() != 3 || hand[2] != self.channels {
            return Err(Error::shape(
                "hofe",
                format!("(H, W, {})", self.channels),
                format!("{hand:?}"),
            ));
        }
        let positions = hand[0] * hand[1];
        if positions > self.cap {
            return Err(Error::Config(format!(
                "hofe: dense attention over {positions} positions exceeds the cap of {}; \
                 pool the decoder features first",
                self.cap
            )));
        }
        Ok(())
    }

    fn two_convs<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        first: &Linear,
        second: &Linear,
        x: Tid,
    ) -> Tid {
        let h = first.forward(tape, store, x);
        let h = if self.gelu_between { tape.gelu(h) } else { h };
        second.forward(tape, store, h)
    }

    /// Attention logits + softmax, shared by the forward pass and the
    /// inspection entry point. Returns `(attention, value)` nodes, both in
    /// `(L, C)`-land (`attention` is `(L, L)`).
    fn attention_nodes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d_hand: Tid,
        d_obj: Tid,
    ) -> Result<(Tid, Tid)> {
        let shape = tape.shape(d_hand).to_vec();
        self.check_shapes(&shape, tape.shape(d_obj))?;
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let l = h * w;

        let hand_n = self.ln_hand.forward(tape, store, d_hand);
        let obj_n = self.ln_obj.forward(tape, store, d_obj);
        let q = self.two_convs(tape, store, &self.q1, &self.q2, hand_n);
        let k = self.two_convs(tape, store, &self.k1, &self.k2, obj_n);
        let v = self.two_convs(tape, store, &self.v1, &self.v2, obj_n);

        let q = tape.reshape(q, &[l, c]);
        let k = tape.reshape(k, &[l, c]);
        let v = tape.reshape(v, &[l, c]);

        let logits = match self.norm {
            AttnNorm::L2 => {
                let qn = tape.l2_normalize_last(q, 1e-12);
                let kn = tape.l2_normalize_last(k, 1e-12);
                // Scaling the queries instead of the similarity matrix is
                // algebraically identical and touches C elements per
                // position instead of H*W.
                let tau = leaf(tape, store, self.temperature);
                let qn = tape.mul_scalar_param(qn, tau);
                tape.matmul_nt(qn, kn)
            }
            AttnNorm::None => {
                let q = tape.scale(q, cast(1.0 / (c as f64).sqrt()));
                tape.matmul_nt(q, k)
            }
        };
        let attn = tape.softmax_last(logits, None);
        Ok((attn, v))
    }

    /// Tape-side forward returning the enhanced object features `(H, W, C)`.
    pub fn forward_nodes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        d_hand: Tid,
        d_obj: Tid,
    ) -> Result<Tid> {
        let shape = tape.shape(d_hand).to_vec();
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let (attn, v) = self.attention_nodes(tape, store, d_hand, d_obj)?;
        let ctx = tape.matmul(attn, v);
        let ctx = tape.reshape(ctx, &[h, w, c]);
        let ow = leaf(tape, store, self.out_w);
        let ob = leaf(tape, store, self.out_b);
        let f_o = tape.conv3x3(ctx, ow, Some(ob));
        let f_guide = tape.add(f_o, d_hand);
        Ok(tape.add(d_obj, f_guide))
    }

    /// Concrete-array forward for external callers and tests.
    pub fn forward<T: Real>(
        &self,
        store: &ParamStore<T>,
        d_hand: &FeatureMap<T>,
        d_obj: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        let mut tape = Tape::<T>::new();
        let hand = tape.constant(d_hand.data().clone().into_dyn());
        let obj = tape.constant(d_obj.data().clone().into_dyn());
        let out = self.forward_nodes(&mut tape, store, hand, obj)?;
        tape.check_finite(out, "hofe.output")?;
        node_to_map(&tape, out, "hofe.output")
    }

    /// The `(H*W, H*W)` attention matrix used inside `forward`, exposed for
    /// inspection and visualization.
    pub fn attention_map<T: Real>(
        &self,
        store: &ParamStore<T>,
        d_hand: &FeatureMap<T>,
        d_obj: &FeatureMap<T>,
    ) -> Result<AttentionMatrix<T>> {
        let mut tape = Tape::<T>::new();
        let hand = tape.constant(d_hand.data().clone().into_dyn());
        let obj = tape.constant(d_obj.data().clone().into_dyn());
        let (attn, _v) = self.attention_nodes(&mut tape, store, hand, obj)?;
        tape.check_finite(attn, "hofe.attention")?;
        let data = tape
            .value(attn)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("attention is 2-d");
        Ok(AttentionMatrix { data })
    }

    /// Zeroes the output convolution; with it zeroed the module reduces to
    /// `d_obj + d_hand` exactly.
    pub fn zero_output_conv<T: Real>(&self, store: &mut ParamStore<T>) {
        store.value_mut(self.out_w).fill(T::zero());
        store.value_mut(self.out_b).fill(T::zero());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn feature(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> FeatureMap<f64> {
        FeatureMap::new(Array3::from_shape_fn((h, w, c), |_| rng.gen_range(-1.0..1.0))).unwrap()
    }

    fn build(
        rng: &mut ChaCha8Rng,
        c: usize,
        norm: AttnNorm,
    ) -> (ParamStore<f64>, Hofe) {
        let mut store = ParamStore::<f64>::new();
        let hofe = Hofe::new(&mut store, rng, "hofe.left", c, norm, false);
        (store, hofe)
    }

    #[test]
    fn residual_identity_with_zeroed_output_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (mut store, hofe) = build(&mut rng, 8, AttnNorm::L2);
        hofe.zero_output_conv(&mut store);
        for seed in 0..50 {
            let mut srng = ChaCha8Rng::seed_from_u64(seed);
            let hand = feature(&mut srng, 4, 4, 8);
            let obj = feature(&mut srng, 4, 4, 8);
            let out = hofe.forward(&store, &hand, &obj).unwrap();
            let expect = hand.data() + obj.data();
            assert_eq!(out.data(), &expect, "seed {seed}");
        }
    }

    #[test]
    fn attention_rows_sum_to_one_many_seeds() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (store, hofe) = build(&mut rng, 8, AttnNorm::L2);
        for seed in 0..100 {
            let mut srng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let hand = feature(&mut srng, 4, 4, 8);
            let obj = feature(&mut srng, 4, 4, 8);
            let a = hofe.attention_map(&store, &hand, &obj).unwrap();
            assert_eq!(a.data().dim(), (16, 16));
            assert!(a.max_row_sum_error() < 1e-6, "seed {seed}");
            assert!(a.data().iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn single_position_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (store, hofe) = build(&mut rng, 8, AttnNorm::L2);
        let hand = feature(&mut rng, 1, 1, 8);
        let obj = feature(&mut rng, 1, 1, 8);
        let a = hofe.attention_map(&store, &hand, &obj).unwrap();
        assert_eq!(a.data().dim(), (1, 1));
        assert!((a.data()[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_queries_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (store, hofe) = build(&mut rng, 4, AttnNorm::L2);
        // Constant hand features make every query row identical.
        let hand = FeatureMap::new(Array3::from_elem((2, 2, 4), 0.3)).unwrap();
        let obj = feature(&mut rng, 2, 2, 4);
        let a = hofe.attention_map(&store, &hand, &obj).unwrap();
        let first = a.data().row(0).to_owned();
        for row in a.data().rows() {
            for (x, y) in row.iter().zip(first.iter()) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dominant_key_captures_attention_as_scale_grows() {
        // Softmax limit on the same similarity -> softmax pipeline the
        // enhancer uses in raw dot-product mode: one key made a
        // large-magnitude match for every query pulls its column toward 1.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = 4;
        let l = 9;
        let q = ndarray::Array2::from_shape_fn((l, c), |_| rng.gen_range(0.5..1.0));
        let base = ndarray::Array2::from_shape_fn((l, c), |_| rng.gen_range(-0.1..0.1));

        let column_weight = |scale: f64| -> f64 {
            let mut k = base.clone();
            for ch in 0..c {
                k[[0, ch]] = scale; // key 0 aligns with all-positive queries
            }
            let mut tape = Tape::<f64>::new();
            let qt = tape.constant(q.clone().into_dyn());
            let kt = tape.constant(k.into_dyn());
            let sim = tape.matmul_nt(qt, kt);
            let sim = tape.scale(sim, 1.0 / (c as f64).sqrt());
            let a = tape.softmax_last(sim, None);
            let a2 = tape.value(a).view().into_dimensionality::<ndarray::Ix2>().unwrap().to_owned();
            a2.column(0).iter().copied().fold(f64::INFINITY, f64::min)
        };

        let w1 = column_weight(1.0);
        let w10 = column_weight(10.0);
        let w50 = column_weight(50.0);
        assert!(w1 < w10 && w10 < w50, "attention should grow: {w1} {w10} {w50}");
        assert!(w50 > 0.999, "at scale 50 the dominant column holds {w50}");
    }

    #[test]
    fn shape_mismatch_and_cap_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (store, hofe) = build(&mut rng, 8, AttnNorm::L2);
        let hand = feature(&mut rng, 4, 4, 8);
        let obj = feature(&mut rng, 2, 2, 8);
        assert!(hofe.forward(&store, &hand, &obj).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let capped = Hofe::new(&mut store, &mut rng, "hofe.right", 4, AttnNorm::L2, false).with_cap(8);
        let big = feature(&mut rng, 4, 4, 4);
        let err = capped.forward(&store, &big, &big).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn fd_gradients_through_hofe_all_param_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (store, hofe) = build(&mut rng, 8, AttnNorm::L2);
        let hand = feature(&mut rng, 4, 4, 8);
        let obj = feature(&mut rng, 4, 4, 8);
        let proj = ArrayD::from_shape_fn(IxDyn(&[4, 4, 8]), |_| rng.gen_range(-1.0..1.0));

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let h = tape.constant(hand.data().clone().into_dyn());
            let o = tape.constant(obj.data().clone().into_dyn());
            let y = hofe.forward_nodes(&mut tape, store, h, o).unwrap();
            let r = tape.constant(proj.clone());
            let p = tape.mul(y, r);
            let s = tape.sum_all(p);
            tape.value(s).iter().next().copied().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let h = tape.constant(hand.data().clone().into_dyn());
        let o = tape.constant(obj.data().clone().into_dyn());
        let y = hofe.forward_nodes(&mut tape, &store, h, o).unwrap();
        let r = tape.constant(proj.clone());
        let p = tape.mul(y, r);
        let s = tape.sum_all(p);
        let mut grads = tape.backward(s);
        let mut by_param: std::collections::HashMap<usize, ArrayD<f64>> = Default::default();
        for (pidx, g) in tape.param_grads(&mut grads) {
            by_param.entry(pidx).and_modify(|a| *a += &g).or_insert(g);
        }

        let eps = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(9);
        // One probe from every parameter group in the module.
        for name in [
            "hofe.left.ln_hand.gamma",
            "hofe.left.ln_obj.beta",
            "hofe.left.q1.weight",
            "hofe.left.q2.bias",
            "hofe.left.k1.weight",
            "hofe.left.k2.weight",
            "hofe.left.v1.bias",
            "hofe.left.v2.weight",
            "hofe.left.out_conv.weight",
            "hofe.left.out_conv.bias",
            "hofe.left.temperature",
        ] {
            let id = store.id_of(name).unwrap();
            let n = store.value(id).len();
            for _ in 0..3.min(n) {
                let i = rng2.gen_range(0..n);
                let mut s2 = store.clone();
                s2.value_mut(id).as_slice_mut().unwrap()[i] += eps;
                let fp = eval(&s2);
                s2.value_mut(id).as_slice_mut().unwrap()[i] -= 2.0 * eps;
                let fm = eval(&s2);
                let numeric = (fp - fm) / (2.0 * eps);
                let ana = by_param.get(&id.0).map(|g| g.as_slice().unwrap()[i]).unwrap_or(0.0);
                let denom = numeric.abs().max(ana.abs()).max(1e-6);
                assert!(
                    (numeric - ana).abs() / denom < 1e-3,
                    "{name}[{i}]: numeric {numeric} analytic {ana}"
                );
            }
        }
    }
}
