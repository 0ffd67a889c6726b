//! Hierarchical multi-scale feature extractor plus bottleneck.
//!
//! Stage `i` runs on a grid halved `i` times after patchify, with channels
//! doubled each stage. The bottleneck applies one further merge and two
//! mixing blocks to produce the enhanced global feature.

use crate::error::{Error, Result};
use crate::nn::{Block, BlockKind, ConvBlock, ParamStore, PatchEmbed, PatchMerge, SwinBlock};
use crate::tape::{Real, Tape, Tid};
use ndarray::{Array3, ArrayD};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Encoder hyper-parameters. `depths.len()` is the number of pyramid stages
/// (N + 1); the bottleneck adds one more downsampling.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub patch_size: usize,
    /// Channels at stage 0; doubled per stage.
    pub embed_dim: usize,
    /// Blocks per stage.
    pub depths: Vec<usize>,
    /// Attention heads per stage (ignored by conv blocks).
    pub heads: Vec<usize>,
    /// Window side for attention blocks, clamped to the grid per stage.
    pub window: usize,
    pub block_kind: BlockKind,
    /// Blocks in the bottleneck.
    pub bottleneck_depth: usize,
}

impl EncoderConfig {
    /// Desk-scale defaults: trains on CPU in minutes at 128x128.
    pub fn toy() -> Self {
        EncoderConfig {
            image_size: 128,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 32,
            depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8],
            window: 4,
            block_kind: BlockKind::Swin,
            bottleneck_depth: 2,
        }
    }

    /// Full-scale reference configuration (448x448 input, base-width
    /// backbone). The window is 14 rather than 12 because every stage grid
    /// must divide by the window; 12 does not divide 112.
    pub fn full() -> Self {
        EncoderConfig {
            image_size: 448,
            in_channels: 3,
            patch_size: 4,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            heads: vec![4, 8, 16, 32],
            window: 14,
            block_kind: BlockKind::Swin,
            bottleneck_depth: 2,
        }
    }

    /// Number of downsamplings after stage 0 (the paper's N).
    pub fn n(&self) -> usize {
        self.depths.len() - 1
    }

    /// Grid side at stage `i`.
    pub fn stage_side(&self, i: usize) -> usize {
        (self.image_size / self.patch_size) >> i
    }

    /// Channels at stage `i`.
    pub fn stage_channels(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn bottleneck_side(&self) -> usize {
        self.stage_side(self.n()) / 2
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.stage_channels(self.n()) * 2
    }

    /// Expected `(C, H, W)` per stage plus the bottleneck output.
    pub fn expected_shapes(&self) -> (Vec<(usize, usize, usize)>, (usize, usize, usize)) {
        let stages = (0..self.depths.len())
            .map(|i| (self.stage_channels(i), self.stage_side(i), self.stage_side(i)))
            .collect();
        let b = (
            self.bottleneck_channels(),
            self.bottleneck_side(),
            self.bottleneck_side(),
        );
        (stages, b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depths.is_empty() {
            return Err(Error::Config("encoder needs at least one stage".into()));
        }
        if self.heads.len() != self.depths.len() {
            return Err(Error::Config(format!(
                "heads ({}) and depths ({}) must have one entry per stage",
                self.heads.len(),
                self.depths.len()
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        let side = self.image_size / self.patch_size;
        let halvings = self.depths.len(); // N downsamplings + bottleneck merge
        if side % (1 << halvings) != 0 {
            return Err(Error::Config(format!(
                "patch grid {side} must be divisible by 2^{halvings} \
                 (stage downsamplings plus the bottleneck merge)"
            )));
        }
        for i in 0..self.depths.len() {
            let s = self.stage_side(i);
            let w = self.window.min(s);
            if s % w != 0 {
                return Err(Error::Config(format!(
                    "stage {i} grid {s} not divisible by window {w}"
                )));
            }
            if self.stage_channels(i) % self.heads[i] != 0 {
                return Err(Error::Config(format!(
                    "stage {i} channels {} not divisible by {} heads",
                    self.stage_channels(i),
                    self.heads[i]
                )));
            }
        }
        let bs = self.bottleneck_side();
        if bs == 0 {
            return Err(Error::Config("bottleneck grid collapsed to zero".into()));
        }
        let bw = self.window.min(bs);
        if bs % bw != 0 {
            return Err(Error::Config(format!(
                "bottleneck grid {bs} not divisible by window {bw}"
            )));
        }
        if self.bottleneck_channels() % self.bottleneck_heads() != 0 {
            return Err(Error::Config("bottleneck channels not divisible by heads".into()));
        }
        Ok(())
    }

    fn bottleneck_heads(&self) -> usize {
        self.heads[self.n()] * 2
    }
}

/// Dense activation grid with `(C, H, W)` shape reporting and `(H, W, C)`
/// storage (row-major y, x).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T: Real> {
    data: Array3<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn new(data: Array3<T>) -> Result<Self> {
        let fm = FeatureMap { data };
        fm.check_finite("FeatureMap::new")?;
        Ok(fm)
    }

    pub fn channels(&self) -> usize {
        self.data.dim().2
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    /// Shape in the `(C, H, W)` reporting convention.
    pub fn chw(&self) -> (usize, usize, usize) {
        (self.channels(), self.height(), self.width())
    }

    pub fn data(&self) -> &Array3<T> {
        &self.data
    }

    pub fn into_data(self) -> Array3<T> {
        self.data
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                layer: context.to_string(),
            });
        }
        Ok(())
    }
}

/// Encoder outputs: one map per stage plus the bottleneck feature.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T: Real> {
    pub maps: Vec<FeatureMap<T>>,
    pub f_ehc: FeatureMap<T>,
}

/// Tape-side pyramid used during fused training forward passes.
pub struct PyramidNodes {
    pub maps: Vec<Tid>,
    pub f_ehc: Tid,
}

pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: PatchEmbed,
    stages: Vec<Vec<Block>>,
    downsamples: Vec<PatchMerge>,
    bottleneck_merge: PatchMerge,
    bottleneck_blocks: Vec<Block>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build_blocks<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    kind: BlockKind,
    n_blocks: usize,
    h: usize,
    w: usize,
    c: usize,
    heads: usize,
    window: usize,
) -> Vec<Block> {
    (0..n_blocks)
        .map(|j| {
            let name = format!("{prefix}.block{j}");
            match kind {
                BlockKind::Swin => Block::Swin(SwinBlock::new(
                    store,
                    rng,
                    &name,
                    h,
                    w,
                    c,
                    heads,
                    window,
                    j % 2 == 1, // alternate plain and shifted windows
                )),
                BlockKind::Conv => Block::Conv(ConvBlock::new(store, rng, &name, c)),
            }
        })
        .collect()
}

impl Encoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: EncoderConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let embed = PatchEmbed::new(
            store,
            rng,
            "encoder.patch_embed",
            cfg.patch_size,
            cfg.in_channels,
            cfg.embed_dim,
        );
        let mut stages = Vec::new();
        let mut downsamples = Vec::new();
        for i in 0..cfg.depths.len() {
            let side = cfg.stage_side(i);
            stages.push(build_blocks(
                store,
                rng,
                &format!("encoder.stage{i}"),
                cfg.block_kind,
                cfg.depths[i],
                side,
                side,
                cfg.stage_channels(i),
                cfg.heads[i],
                cfg.window,
            ));
            if i < cfg.n() {
                downsamples.push(PatchMerge::new(
                    store,
                    rng,
                    &format!("encoder.stage{i}.downsample"),
                    cfg.stage_channels(i),
                ));
            }
        }
        let bottleneck_merge = PatchMerge::new(
            store,
            rng,
            "bottleneck.merge",
            cfg.stage_channels(cfg.n()),
        );
        let bside = cfg.bottleneck_side();
        let bottleneck_blocks = build_blocks(
            store,
            rng,
            "bottleneck",
            cfg.block_kind,
            cfg.bottleneck_depth,
            bside,
            bside,
            cfg.bottleneck_channels(),
            cfg.bottleneck_heads(),
            cfg.window,
        );
        Ok(Encoder {
            cfg,
            embed,
            stages,
            downsamples,
            bottleneck_merge,
            bottleneck_blocks,
        })
    }

    /// Checks an input image shape against the configuration before any
    /// compute happens.
    pub fn check_input(&self, h: usize, w: usize, c: usize) -> Result<()> {
        let want = (self.cfg.image_size, self.cfg.image_size, self.cfg.in_channels);
        if (h, w, c) != want {
            return Err(Error::Config(format!(
                "input {h}x{w}x{c} incompatible with encoder configured for {}x{}x{}",
                want.0, want.1, want.2
            )));
        }
        Ok(())
    }

    /// Tape-side forward producing all stage features and the bottleneck.
    pub fn forward_pyramid<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Tid,
    ) -> PyramidNodes {
        let mut x = self.embed.forward(tape, store, image);
        let mut maps = Vec::with_capacity(self.stages.len());
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                x = block.forward(tape, store, x);
            }
            maps.push(x);
            if i < self.downsamples.len() {
                x = self.downsamples[i].forward(tape, store, x);
            }
        }
        let mut f = self.bottleneck_merge.forward(tape, store, maps[self.cfg.n()]);
        for block in &self.bottleneck_blocks {
            f = block.forward(tape, store, f);
        }
        PyramidNodes { maps, f_ehc: f }
    }

    /// Standalone bottleneck op on a concrete stage-N feature map.
    pub fn bottleneck<T: Real>(
        &self,
        store: &ParamStore<T>,
        f_n: &FeatureMap<T>,
    ) -> Result<FeatureMap<T>> {
        if f_n.height() % 2 != 0 || f_n.width() % 2 != 0 {
            return Err(Error::Config(format!(
                "bottleneck needs even spatial dims, got {}x{}",
                f_n.height(),
                f_n.width()
            )));
        }
        let n = self.cfg.n();
        let want = (
            self.cfg.stage_channels(n),
            self.cfg.stage_side(n),
            self.cfg.stage_side(n),
        );
        if f_n.chw() != want {
            return Err(Error::shape(
                "bottleneck",
                format!("{:?}", want),
                format!("{:?}", f_n.chw()),
            ));
        }
        let mut tape = Tape::<T>::new();
        let x = tape.constant(f_n.data().clone().into_dyn());
        let mut f = self.bottleneck_merge.forward(&mut tape, store, x);
        for block in &self.bottleneck_blocks {
            f = block.forward(&mut tape, store, f);
        }
        node_to_map(&tape, f, "bottleneck")
    }

    /// Full encode: normalized image in, concrete feature pyramid out.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Array3<T>,
    ) -> Result<FeaturePyramid<T>> {
        let (h, w, c) = image.dim();
        self.check_input(h, w, c)?;
        let mut tape = Tape::<T>::new();
        let x = tape.constant(image.clone().into_dyn());
        let nodes = self.forward_pyramid(&mut tape, store, x);
        let maps = nodes
            .maps
            .iter()
            .enumerate()
            .map(|(i, &t)| node_to_map(&tape, t, &format!("encoder.stage{i}")))
            .collect::<Result<Vec<_>>>()?;
        let f_ehc = node_to_map(&tape, nodes.f_ehc, "bottleneck")?;
        Ok(FeaturePyramid { maps, f_ehc })
    }
}

pub(crate) fn node_to_map<T: Real>(tape: &Tape<T>, t: Tid, context: &str) -> Result<FeatureMap<T>> {
    tape.check_finite(t, context)?;
    let arr: ArrayD<T> = tape.value(t).clone();
    let a3 = arr
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|_| Error::shape(context, "(H, W, C)", "non-3d tensor"))?;
    FeatureMap::new(a3)
}
