//! Symmetric decoder branches with skip connections.
//!
//! Each branch starts by expanding the bottleneck feature, then runs one
//! up-stage per encoder downsampling: expand 2x, concatenate the matching
//! encoder skip, reduce channels, and mix. A final 4x expansion plus a 1x1
//! projection turns branch features into full-resolution logits.

use crate::encoder::{node_to_map, EncoderConfig, FeatureMap, FeaturePyramid};
use crate::error::{Error, Result};
use crate::nn::{Block, ParamStore, PatchExpand, FinalExpand, Linear};
use crate::tape::{Real, Tape, Tid};
use ndarray::Array3;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// The four decoder branches of the contact-aware model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchId {
    Hand,
    LeftObj,
    RightObj,
    ContactBoundary,
}

impl BranchId {
    pub const ALL: [BranchId; 4] = [
        BranchId::Hand,
        BranchId::LeftObj,
        BranchId::RightObj,
        BranchId::ContactBoundary,
    ];

    pub fn key(self) -> &'static str {
        match self {
            BranchId::Hand => "hand",
            BranchId::LeftObj => "left_obj",
            BranchId::RightObj => "right_obj",
            BranchId::ContactBoundary => "contact_boundary",
        }
    }

    /// Logit channels emitted by this branch's head.
    pub fn head_channels(self) -> usize {
        match self {
            BranchId::Hand => 3, // background / left / right
            _ => 1,
        }
    }
}

struct UpStage {
    expand: PatchExpand,
    reduce: Linear,
    blocks: Vec<Block>,
}

/// One decoder branch bound to a specific encoder geometry.
pub struct DecoderBranch {
    name: String,
    cfg: EncoderConfig,
    init_expand: PatchExpand,
    stages: Vec<UpStage>,
    head_expand: FinalExpand,
    head_proj: Linear,
    out_channels: usize,
}

impl DecoderBranch {
    /// `name` keys the parameters (`decoder.<name>.*`, `head.<name>.*`).
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &EncoderConfig,
        decoder_depths: &[usize],
        name: &str,
        out_channels: usize,
    ) -> Result<Self> {
        let n = cfg.n();
        if decoder_depths.len() != n {
            return Err(Error::Config(format!(
                "decoder depths must have {n} entries, got {}",
                decoder_depths.len()
            )));
        }
        let prefix = format!("decoder.{name}");
        let init_expand = PatchExpand::new(
            store,
            rng,
            &format!("{prefix}.init_expand"),
            cfg.bottleneck_channels(),
        );
        let mut stages = Vec::with_capacity(n);
        for s in 0..n {
            let in_ch = cfg.stage_channels(n - s);
            let out_ch = cfg.stage_channels(n - 1 - s);
            let side = cfg.stage_side(n - 1 - s);
            let sp = format!("{prefix}.stage{s}");
            let expand = PatchExpand::new(store, rng, &format!("{sp}.expand"), in_ch);
            let reduce = Linear::new(store, rng, &format!("{sp}.reduce"), 2 * out_ch, out_ch, true);
            let blocks = crate::encoder::build_blocks(
                store,
                rng,
                &sp,
                cfg.block_kind,
                decoder_depths[s],
                side,
                side,
                out_ch,
                cfg.heads[n - 1 - s],
                cfg.window,
            );
            stages.push(UpStage { expand, reduce, blocks });
        }
        let head_expand = FinalExpand::new(
            store,
            rng,
            &format!("head.{name}.expand"),
            cfg.embed_dim,
            cfg.patch_size,
        );
        let head_proj = Linear::new(
            store,
            rng,
            &format!("head.{name}.proj"),
            cfg.embed_dim,
            out_channels,
            true,
        );
        Ok(DecoderBranch {
            name: name.to_string(),
            cfg: cfg.clone(),
            init_expand,
            stages,
            head_expand,
            head_proj,
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    /// Tape-side branch body: bottleneck feature + skips to the final
    /// branch feature at `(side_0, side_0, embed_dim)`.
    pub fn forward_features<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        skips: &[Tid],
        f_ehc: Tid,
    ) -> Tid {
        let n = self.cfg.n();
        let mut d = self.init_expand.forward(tape, store, f_ehc);
        for (s, stage) in self.stages.iter().enumerate() {
            let expanded = stage.expand.forward(tape, store, d);
            let cat = tape.concat_last(expanded, skips[n - 1 - s]);
            let mut x = stage.reduce.forward(tape, store, cat);
            for block in &stage.blocks {
                x = block.forward(tape, store, x);
            }
            d = x;
        }
        d
    }

    /// Tape-side head: branch features to full-resolution logits.
    pub fn forward_head<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, d: Tid) -> Tid {
        let up = self.head_expand.forward(tape, store, d);
        self.head_proj.forward(tape, store, up)
    }

    fn validate_pyramid<T: Real>(&self, pyramid: &FeaturePyramid<T>) -> Result<()> {
        let (stage_shapes, b) = self.cfg.expected_shapes();
        if pyramid.maps.len() != stage_shapes.len() {
            return Err(Error::shape(
                format!("decoder.{} pyramid", self.name),
                format!("{} stages", stage_shapes.len()),
                format!("{} stages", pyramid.maps.len()),
            ));
        }
        for (i, (map, want)) in pyramid.maps.iter().zip(&stage_shapes).enumerate() {
            if map.chw() != *want {
                return Err(Error::shape(
                    format!("decoder.{} stage {i} skip", self.name),
                    format!("{want:?}"),
                    format!("{:?}", map.chw()),
                ));
            }
        }
        if pyramid.f_ehc.chw() != b {
            return Err(Error::shape(
                format!("decoder.{} bottleneck input", self.name),
                format!("{b:?}"),
                format!("{:?}", pyramid.f_ehc.chw()),
            ));
        }
        Ok(())
    }

    /// Concrete-array decode of one branch (no enhancement step).
    pub fn decode<T: Real>(
        &self,
        store: &ParamStore<T>,
        pyramid: &FeaturePyramid<T>,
    ) -> Result<FeatureMap<T>> {
        self.validate_pyramid(pyramid)?;
        let mut tape = Tape::<T>::new();
        let skips: Vec<Tid> = pyramid
            .maps
            .iter()
            .map(|m| tape.constant(m.data().clone().into_dyn()))
            .collect();
        let f_ehc = tape.constant(pyramid.f_ehc.data().clone().into_dyn());
        let d = self.forward_features(&mut tape, store, &skips, f_ehc);
        node_to_map(&tape, d, &format!("decoder.{}", self.name))
    }

    /// Concrete-array head application.
    pub fn head_logits<T: Real>(
        &self,
        store: &ParamStore<T>,
        d: &FeatureMap<T>,
    ) -> Result<Array3<T>> {
        let want = (self.cfg.embed_dim, self.cfg.stage_side(0), self.cfg.stage_side(0));
        if d.chw() != want {
            return Err(Error::shape(
                format!("head.{}", self.name),
                format!("{want:?}"),
                format!("{:?}", d.chw()),
            ));
        }
        let mut tape = Tape::<T>::new();
        let x = tape.constant(d.data().clone().into_dyn());
        let logits = self.forward_head(&mut tape, store, x);
        tape.check_finite(logits, &format!("head.{}", self.name))?;
        Ok(tape
            .value(logits)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .expect("head emits (H, W, K)"))
    }
}
