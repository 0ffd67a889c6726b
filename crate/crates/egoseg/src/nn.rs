//! Parameter storage, initialization, and the reusable network blocks:
//! linear/norm layers, windowed self-attention blocks with optional cyclic
//! shift, a cheap depthwise-separable conv block for fast CPU runs, and the
//! patch embed/merge/expand resolution changers.

use crate::error::{Error, Result};
use crate::tape::{cast, Real, Tape, Tid};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Flat, ordered name -> tensor container. Iteration order is insertion
/// order, which fixes the optimizer update order and the checkpoint layout.
#[derive(Debug, Clone)]
pub struct ParamStore<T: Real> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            values: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name.clone());
        self.values.push(value);
        let id = ParamId(self.values.len() - 1);
        self.by_name.insert(name, id.0);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    /// Replaces every tensor from `entries`, requiring an exact name and
    /// shape match with the current store.
    pub fn load_entries(&mut self, entries: Vec<(String, ArrayD<T>)>) -> Result<()> {
        if entries.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: store has {}, checkpoint has {}",
                self.len(),
                entries.len()
            )));
        }
        for (name, value) in entries {
            let id = self.id_of(&name).ok_or_else(|| {
                Error::Checkpoint(format!("unknown parameter {name} in checkpoint"))
            })?;
            if self.values[id.0].shape() != value.shape() {
                return Err(Error::Checkpoint(format!(
                    "shape mismatch for {name}: store {:?}, checkpoint {:?}",
                    self.values[id.0].shape(),
                    value.shape()
                )));
            }
            self.values[id.0] = value;
        }
        Ok(())
    }
}

/// Inserts a parameter leaf into the tape.
pub fn leaf<T: Real>(tape: &mut Tape<T>, store: &ParamStore<T>, id: ParamId) -> Tid {
    tape.leaf(store.value(id).clone(), id.0)
}

/// Standard normal via Box-Muller, truncated to two standard deviations.
pub fn trunc_normal<T: Real>(rng: &mut ChaCha8Rng, std: f64, shape: &[usize]) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| loop {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return cast(z * std);
        }
    })
}

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bias: bool,
    ) -> Self {
        let w = store.add(format!("{name}.weight"), trunc_normal(rng, INIT_STD, &[cin, cout]));
        let b = bias.then(|| store.add(format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Linear { w, b }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let w = leaf(tape, store, self.w);
        let b = self.b.map(|b| leaf(tape, store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), ArrayD::ones(IxDyn(&[c]))),
            beta: store.add(format!("{name}.beta"), ArrayD::zeros(IxDyn(&[c]))),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let g = leaf(tape, store, self.gamma);
        let b = leaf(tape, store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Two-layer MLP with GELU, expansion ratio 4.
#[derive(Debug, Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        Mlp {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), c, 4 * c, true),
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), 4 * c, c, true),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let h = self.fc1.forward(tape, store, x);
        let h = tape.gelu(h);
        self.fc2.forward(tape, store, h)
    }
}

/// Relative-position index for a square window: maps each position pair to
/// a row of the bias table.
pub fn relative_position_index(win: usize) -> Arc<Vec<usize>> {
    let m = win * win;
    let span = 2 * win - 1;
    let mut index = Vec::with_capacity(m * m);
    for i in 0..m {
        let (yi, xi) = (i / win, i % win);
        for j in 0..m {
            let (yj, xj) = (j / win, j % win);
            let dy = yi as isize - yj as isize + (win as isize - 1);
            let dx = xi as isize - xj as isize + (win as isize - 1);
            index.push(dy as usize * span + dx as usize);
        }
    }
    Arc::new(index)
}

/// Additive attention mask for shifted windows: pairs of positions that come
/// from different pre-shift regions get a large negative logit.
pub fn shifted_window_mask<T: Real>(h: usize, w: usize, win: usize, shift: usize) -> Arc<ArrayD<T>> {
    let mut region = ndarray::Array2::<usize>::zeros((h, w));
    let bounds = |n: usize| [0, n - win, n - shift, n];
    let (yb, xb) = (bounds(h), bounds(w));
    let mut id = 0usize;
    for yi in 0..3 {
        for xi in 0..3 {
            for y in yb[yi]..yb[yi + 1] {
                for x in xb[xi]..xb[xi + 1] {
                    region[[y, x]] = id;
                }
            }
            id += 1;
        }
    }
    let (nh, nw) = (h / win, w / win);
    let m = win * win;
    let neg: T = cast(-100.0);
    let mut mask = ndarray::Array3::<T>::zeros((nh * nw, m, m));
    for wy in 0..nh {
        for wx in 0..nw {
            let wi = wy * nw + wx;
            for i in 0..m {
                let ri = region[[wy * win + i / win, wx * win + i % win]];
                for j in 0..m {
                    let rj = region[[wy * win + j / win, wx * win + j % win]];
                    if ri != rj {
                        mask[[wi, i, j]] = neg;
                    }
                }
            }
        }
    }
    Arc::new(mask.into_dyn())
}

/// Multi-head self-attention inside non-overlapping windows, with learned
/// relative position bias.
#[derive(Debug, Clone)]
pub struct WindowAttention {
    qkv: Linear,
    proj: Linear,
    rel_table: ParamId,
    rel_index: Arc<Vec<usize>>,
    pub heads: usize,
    pub window: usize,
    channels: usize,
}

impl WindowAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        heads: usize,
        window: usize,
    ) -> Self {
        assert!(c % heads == 0, "channels must divide among heads");
        let qkv = Linear::new(store, rng, &format!("{name}.qkv"), c, 3 * c, true);
        let proj = Linear::new(store, rng, &format!("{name}.proj"), c, c, true);
        let span = 2 * window - 1;
        let rel_table = store.add(
            format!("{name}.rel_bias"),
            trunc_normal(rng, INIT_STD, &[span * span, heads]),
        );
        WindowAttention {
            qkv,
            proj,
            rel_table,
            rel_index: relative_position_index(window),
            heads,
            window,
            channels: c,
        }
    }

    /// Input `(nW, win*win, C)`; optional additive mask `(nW, m, m)`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        windows: Tid,
        mask: Option<Arc<ArrayD<T>>>,
    ) -> Tid {
        let shape = tape.shape(windows).to_vec();
        let (nw, m, c) = (shape[0], shape[1], shape[2]);
        debug_assert_eq!(c, self.channels);
        let (h, d) = (self.heads, c / self.heads);

        let qkv = self.qkv.forward(tape, store, windows);
        let q = tape.slice_last(qkv, 0, c);
        let k = tape.slice_last(qkv, c, 2 * c);
        let v = tape.slice_last(qkv, 2 * c, 3 * c);

        let split = |tape: &mut Tape<T>, t: Tid| {
            let t = tape.reshape(t, &[nw, m, h, d]);
            let t = tape.permute(t, &[0, 2, 1, 3]);
            tape.reshape(t, &[nw * h, m, d])
        };
        let q = split(tape, q);
        let k = split(tape, k);
        let v = split(tape, v);

        let q = tape.scale(q, cast(1.0 / (d as f64).sqrt()));
        let logits = tape.bmm_nt(q, k);
        let logits = tape.reshape(logits, &[nw, h, m, m]);
        let table = leaf(tape, store, self.rel_table);
        let logits = tape.rel_bias_add(logits, table, self.rel_index.clone());
        let attn = tape.softmax_last(logits, mask);
        let attn = tape.reshape(attn, &[nw * h, m, m]);
        let ctx = tape.bmm(attn, v);
        let ctx = tape.reshape(ctx, &[nw, h, m, d]);
        let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = tape.reshape(ctx, &[nw, m, c]);
        self.proj.forward(tape, store, ctx)
    }

    /// Post-softmax attention weights `(nW, heads, m, m)` for inspection.
    pub fn attention<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        windows: Tid,
        mask: Option<Arc<ArrayD<T>>>,
    ) -> Tid {
        let shape = tape.shape(windows).to_vec();
        let (nw, m, c) = (shape[0], shape[1], shape[2]);
        let (h, d) = (self.heads, c / self.heads);
        let qkv = self.qkv.forward(tape, store, windows);
        let q = tape.slice_last(qkv, 0, c);
        let k = tape.slice_last(qkv, c, 2 * c);
        let split = |tape: &mut Tape<T>, t: Tid| {
            let t = tape.reshape(t, &[nw, m, h, d]);
            let t = tape.permute(t, &[0, 2, 1, 3]);
            tape.reshape(t, &[nw * h, m, d])
        };
        let q = split(tape, q);
        let k = split(tape, k);
        let q = tape.scale(q, cast(1.0 / (d as f64).sqrt()));
        let logits = tape.bmm_nt(q, k);
        let logits = tape.reshape(logits, &[nw, h, m, m]);
        let table = leaf(tape, store, self.rel_table);
        let logits = tape.rel_bias_add(logits, table, self.rel_index.clone());
        tape.softmax_last(logits, mask)
    }
}

/// Which spatial mixer a stage uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    /// Windowed self-attention blocks with alternating cyclic shift.
    Swin,
    /// Depthwise-separable conv blocks; much faster on small CPUs.
    Conv,
}

/// One spatial mixing block operating on `(H, W, C)`.
#[derive(Debug, Clone)]
pub enum Block {
    Swin(SwinBlock),
    Conv(ConvBlock),
}

impl Block {
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        match self {
            Block::Swin(b) => b.forward(tape, store, x),
            Block::Conv(b) => b.forward(tape, store, x),
        }
    }
}

/// Pre-norm transformer block on a fixed `(H, W)` grid: window attention
/// (optionally on a cyclically shifted grid) plus an MLP, both residual.
#[derive(Debug, Clone)]
pub struct SwinBlock {
    norm1: LayerNorm,
    pub attn: WindowAttention,
    norm2: LayerNorm,
    mlp: Mlp,
    h: usize,
    w: usize,
    window: usize,
    shift: usize,
    mask_f64: Option<Arc<ArrayD<f64>>>,
}

impl SwinBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        h: usize,
        w: usize,
        c: usize,
        heads: usize,
        window: usize,
        shifted: bool,
    ) -> Self {
        // Clamp the window to the grid and drop the shift when a single
        // window covers everything.
        let window = window.min(h).min(w);
        assert!(
            h % window == 0 && w % window == 0,
            "grid {h}x{w} not divisible by window {window}"
        );
        let shift = if shifted && (h > window || w > window) {
            window / 2
        } else {
            0
        };
        let norm1 = LayerNorm::new(store, &format!("{name}.norm1"), c);
        let attn = WindowAttention::new(store, rng, &format!("{name}.attn"), c, heads, window);
        let norm2 = LayerNorm::new(store, &format!("{name}.norm2"), c);
        let mlp = Mlp::new(store, rng, &format!("{name}.mlp"), c);
        let mask_f64 = (shift > 0).then(|| shifted_window_mask::<f64>(h, w, window, shift));
        SwinBlock {
            norm1,
            attn,
            norm2,
            mlp,
            h,
            w,
            window,
            shift,
            mask_f64,
        }
    }

    fn mask<T: Real>(&self) -> Option<Arc<ArrayD<T>>> {
        // Masks hold only 0 and -100; rebuild at the working precision.
        self.mask_f64
            .as_ref()
            .map(|m| Arc::new(m.mapv(|v| cast::<T>(v))))
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let shape = tape.shape(x).to_vec();
        assert_eq!(
            (shape[0], shape[1]),
            (self.h, self.w),
            "block built for {}x{}, got {}x{}",
            self.h,
            self.w,
            shape[0],
            shape[1]
        );
        let normed = self.norm1.forward(tape, store, x);
        let shifted = if self.shift > 0 {
            tape.roll2d(normed, -(self.shift as isize), -(self.shift as isize))
        } else {
            normed
        };
        let windows = tape.window_partition(shifted, self.window);
        let attn_out = self.attn.forward(tape, store, windows, self.mask());
        let merged = tape.window_reverse(attn_out, self.window, self.h, self.w);
        let unshifted = if self.shift > 0 {
            tape.roll2d(merged, self.shift as isize, self.shift as isize)
        } else {
            merged
        };
        let x = tape.add(x, unshifted);
        let normed2 = self.norm2.forward(tape, store, x);
        let mlp_out = self.mlp.forward(tape, store, normed2);
        tape.add(x, mlp_out)
    }
}

/// Cheap block for CPU-bound runs: depthwise 3x3 then pointwise linear with
/// GELU, pre-normed and residual.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    norm: LayerNorm,
    dw: ParamId,
    pw: Linear,
}

impl ConvBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
    ) -> Self {
        let norm = LayerNorm::new(store, &format!("{name}.norm"), c);
        let dw = store.add(format!("{name}.dw"), trunc_normal(rng, INIT_STD, &[3, 3, c]));
        let pw = Linear::new(store, rng, &format!("{name}.pw"), c, c, true);
        ConvBlock { norm, dw, pw }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let normed = self.norm.forward(tape, store, x);
        let k = leaf(tape, store, self.dw);
        let h = tape.dwconv3x3(normed, k);
        let h = tape.gelu(h);
        let h = self.pw.forward(tape, store, h);
        tape.add(x, h)
    }
}

/// Patchify: `(H, W, 3) -> (H/p, W/p, C)` via non-overlapping patches and a
/// linear projection, then LayerNorm.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub patch: usize,
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        patch: usize,
        in_ch: usize,
        c: usize,
    ) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(store, rng, &format!("{name}.proj"), patch * patch * in_ch, c, true),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let patches = tape.space_to_depth(x, self.patch);
        let embedded = self.proj.forward(tape, store, patches);
        self.norm.forward(tape, store, embedded)
    }
}

/// Downsampling between stages: gather 2x2 neighborhoods, norm, project
/// `4C -> 2C`.
#[derive(Debug, Clone)]
pub struct PatchMerge {
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        PatchMerge {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * c),
            reduce: Linear::new(store, rng, &format!("{name}.reduce"), 4 * c, 2 * c, false),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let gathered = tape.space_to_depth(x, 2);
        let normed = self.norm.forward(tape, store, gathered);
        self.reduce.forward(tape, store, normed)
    }
}

/// Upsampling inside the decoder: project `C -> 2C`, spread into a 2x2
/// block (`C/2` channels), norm.
#[derive(Debug, Clone)]
pub struct PatchExpand {
    expand: Linear,
    norm: LayerNorm,
}

impl PatchExpand {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, c: usize) -> Self {
        assert!(c % 2 == 0, "patch expand needs even channels");
        PatchExpand {
            expand: Linear::new(store, rng, &format!("{name}.expand"), c, 2 * c, false),
            norm: LayerNorm::new(store, &format!("{name}.norm"), c / 2),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let wide = self.expand.forward(tape, store, x);
        let spread = tape.depth_to_space(wide, 2);
        self.norm.forward(tape, store, spread)
    }
}

/// Final upsampling to input resolution: norm at the branch resolution,
/// project `C -> r*r*C`, spread; keeps the channel count.
#[derive(Debug, Clone)]
pub struct FinalExpand {
    pub ratio: usize,
    norm: LayerNorm,
    expand: Linear,
}

impl FinalExpand {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c: usize,
        ratio: usize,
    ) -> Self {
        FinalExpand {
            ratio,
            norm: LayerNorm::new(store, &format!("{name}.norm"), c),
            expand: Linear::new(store, rng, &format!("{name}.expand"), c, ratio * ratio * c, false),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Tid) -> Tid {
        let normed = self.norm.forward(tape, store, x);
        let wide = self.expand.forward(tape, store, normed);
        tape.depth_to_space(wide, self.ratio)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Ix3;
    use rand::SeedableRng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn trunc_normal_is_bounded_and_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: ArrayD<f64> = trunc_normal(&mut r1, 0.02, &[64, 64]);
        let b: ArrayD<f64> = trunc_normal(&mut r2, 0.02, &[64, 64]);
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.abs() <= 0.04 + 1e-12));
    }

    #[test]
    fn relative_position_index_spans_table() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        let span = 5usize;
        assert!(idx.iter().all(|&i| i < span * span));
        // The diagonal (same position) maps to the center entry.
        let center = (3 - 1) * span + (3 - 1);
        for i in 0..9 {
            assert_eq!(idx[i * 9 + i], center);
        }
    }

    #[test]
    fn shifted_mask_blocks_cross_region_pairs() {
        let mask = shifted_window_mask::<f64>(4, 4, 2, 1);
        let m = mask.view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(m.dim(), (4, 4, 4));
        // Window 0 (top-left) lies in one region: fully unmasked.
        assert!(m.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
        // The last window mixes four regions: every off-diagonal pair from
        // different regions is masked.
        let last = m.index_axis(ndarray::Axis(0), 3);
        assert!(last.iter().any(|&v| v == -100.0));
        for i in 0..4 {
            assert_eq!(last[[i, i]], 0.0);
        }
    }

    #[test]
    fn window_attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let attn = WindowAttention::new(&mut store, &mut rng, "attn", 8, 2, 2);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_arr(&mut rng, &[3, 4, 8]));
        let a = attn.attention(&mut tape, &store, x, None);
        let v = tape.value(a);
        assert_eq!(v.shape(), &[3, 2, 4, 4]);
        let flat = v.view().into_shape_with_order((24, 4)).unwrap();
        for row in flat.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn swin_block_preserves_shape_and_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, &mut rng, "blk", 4, 4, 8, 2, 2, true);
        let input = rand_arr(&mut rng, &[4, 4, 8]);
        let run = || {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(input.clone());
            let y = block.forward(&mut tape, &store, x);
            tape.value(y).clone()
        };
        let y1 = run();
        let y2 = run();
        assert_eq!(y1.shape(), &[4, 4, 8]);
        assert_eq!(y1, y2);
    }

    #[test]
    fn zeroed_projections_make_block_identity() {
        // With the attention proj and MLP fc2 zeroed, both residual adds
        // contribute nothing: output == input exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, &mut rng, "blk", 4, 4, 8, 2, 2, false);
        for name in ["blk.attn.proj.weight", "blk.attn.proj.bias", "blk.mlp.fc2.weight", "blk.mlp.fc2.bias"] {
            let id = store.id_of(name).unwrap();
            store.value_mut(id).fill(0.0);
        }
        let input = rand_arr(&mut rng, &[4, 4, 8]);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let y = block.forward(&mut tape, &store, x);
        assert_eq!(tape.value(y), &input);
    }

    #[test]
    fn fd_through_swin_block() {
        // Finite differences through a full block for a few sampled params.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f64>::new();
        let block = SwinBlock::new(&mut store, &mut rng, "blk", 4, 4, 4, 2, 2, true);
        let input = rand_arr(&mut rng, &[4, 4, 4]);
        let proj = rand_arr(&mut rng, &[4, 4, 4]);

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(input.clone());
            let y = block.forward(&mut tape, store, x);
            let r = tape.constant(proj.clone());
            let p = tape.mul(y, r);
            let s = tape.sum_all(p);
            tape.value(s).iter().next().copied().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let y = block.forward(&mut tape, &store, x);
        let r = tape.constant(proj.clone());
        let p = tape.mul(y, r);
        let s = tape.sum_all(p);
        let mut grads = tape.backward(s);
        let mut by_param: HashMap<usize, ArrayD<f64>> = HashMap::new();
        for (pidx, g) in tape.param_grads(&mut grads) {
            by_param
                .entry(pidx)
                .and_modify(|a| *a += &g)
                .or_insert(g);
        }

        let eps = 1e-5;
        let mut checked = 0;
        for name in ["blk.attn.qkv.weight", "blk.attn.rel_bias", "blk.norm1.gamma", "blk.mlp.fc1.weight"] {
            let id = store.id_of(name).unwrap();
            let n = store.value(id).len();
            for i in (0..n).step_by((n / 5).max(1)) {
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
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn fd_through_conv_block_and_expands() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f64>::new();
        let block = ConvBlock::new(&mut store, &mut rng, "cb", 4);
        let merge = PatchMerge::new(&mut store, &mut rng, "mg", 4);
        let expand = PatchExpand::new(&mut store, &mut rng, "ex", 8);
        let input = rand_arr(&mut rng, &[4, 4, 4]);
        let proj = rand_arr(&mut rng, &[4, 4, 4]);

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let x = tape.constant(input.clone());
            let y = block.forward(&mut tape, store, x);
            let y = merge.forward(&mut tape, store, y);
            let y = expand.forward(&mut tape, store, y);
            let r = tape.constant(proj.clone());
            let p = tape.mul(y, r);
            let s = tape.sum_all(p);
            tape.value(s).iter().next().copied().unwrap()
        };

        let mut tape = Tape::<f64>::new();
        let x = tape.constant(input.clone());
        let y = block.forward(&mut tape, &store, x);
        let y = merge.forward(&mut tape, &store, y);
        let y = expand.forward(&mut tape, &store, y);
        assert_eq!(tape.shape(y), &[4, 4, 4]);
        let r = tape.constant(proj.clone());
        let p = tape.mul(y, r);
        let s = tape.sum_all(p);
        let mut grads = tape.backward(s);
        let mut by_param: HashMap<usize, ArrayD<f64>> = HashMap::new();
        for (pidx, g) in tape.param_grads(&mut grads) {
            by_param.entry(pidx).and_modify(|a| *a += &g).or_insert(g);
        }

        let eps = 1e-5;
        for name in ["cb.dw", "cb.pw.weight", "mg.reduce.weight", "ex.expand.weight"] {
            let id = store.id_of(name).unwrap();
            let n = store.value(id).len();
            for i in (0..n).step_by((n / 4).max(1)) {
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

    #[test]
    fn patch_embed_downsamples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::<f64>::new();
        let embed = PatchEmbed::new(&mut store, &mut rng, "embed", 4, 3, 16);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_arr(&mut rng, &[16, 16, 3]));
        let y = embed.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[4, 4, 16]);
    }

    #[test]
    fn final_expand_restores_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f64>::new();
        let fx = FinalExpand::new(&mut store, &mut rng, "fx", 6, 4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(rand_arr(&mut rng, &[3, 3, 6]));
        let y = fx.forward(&mut tape, &store, x);
        assert_eq!(tape.shape(y), &[12, 12, 6]);
    }
}
