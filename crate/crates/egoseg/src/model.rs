//! Full segmentation model: encoder, per-branch decoders, optional
//! hand-guided enhancement on the object branches, and mask generation.
//!
//! Variants cover the ablation grid. With decoupling, the two object
//! branches predict "everything the left hand touches" and "everything the
//! right hand touches" and inference recovers the three object categories by
//! intersection and set difference; without it, three object branches
//! predict the original categories directly.

use crate::cods::FinalMasks;
use crate::decoder::{BranchId, DecoderBranch};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::hofe::{AttnNorm, Hofe};
use crate::mask::BinaryMask;
use crate::nn::ParamStore;
use crate::tape::{cast, Real, Tape, Tid};
use ndarray::{Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Three object branches supervised with the raw categories.
    Basic,
    /// Decoupled object supervision and recombination, no enhancement.
    Cods,
    /// Hand-guided enhancement on the three raw object branches.
    Hofe,
    /// Decoupling plus enhancement.
    #[default]
    CodsHofe,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Basic, Variant::Cods, Variant::Hofe, Variant::CodsHofe];

    pub fn uses_cods(self) -> bool {
        matches!(self, Variant::Cods | Variant::CodsHofe)
    }

    pub fn uses_hofe(self) -> bool {
        matches!(self, Variant::Hofe | Variant::CodsHofe)
    }

    /// Object branch parameter keys, in construction order.
    pub fn object_branches(self) -> &'static [&'static str] {
        if self.uses_cods() {
            &["left_obj", "right_obj"]
        } else {
            &["left_obj", "right_obj", "two_obj"]
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::Cods => "cods",
            Variant::Hofe => "hofe",
            Variant::CodsHofe => "cods_hofe",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Blocks per decoder up-stage (one entry per encoder downsampling).
    pub decoder_depths: Vec<usize>,
    pub variant: Variant,
    pub attn_norm: AttnNorm,
    /// Nonlinearity between the enhancer's stacked projections.
    pub hofe_gelu: bool,
    /// Probability threshold binarizing object and boundary masks.
    pub threshold: f64,
    pub cb_radius: usize,
    pub cb_iterations: usize,
}

impl ModelConfig {
    pub fn toy() -> Self {
        ModelConfig {
            encoder: EncoderConfig::toy(),
            decoder_depths: vec![1, 1, 1],
            variant: Variant::CodsHofe,
            attn_norm: AttnNorm::L2,
            hofe_gelu: false,
            threshold: 0.5,
            cb_radius: crate::cods::DEFAULT_CB_RADIUS,
            cb_iterations: crate::cods::DEFAULT_CB_ITERATIONS,
        }
    }

    /// Full-scale reference configuration (448 input, two mixing blocks per
    /// decoder stage).
    pub fn full() -> Self {
        let encoder = EncoderConfig::full();
        let n = encoder.n();
        ModelConfig {
            encoder,
            decoder_depths: vec![2; n],
            variant: Variant::CodsHofe,
            attn_norm: AttnNorm::L2,
            hofe_gelu: false,
            threshold: 0.5,
            cb_radius: crate::cods::DEFAULT_CB_RADIUS,
            cb_iterations: crate::cods::DEFAULT_CB_ITERATIONS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.decoder_depths.len() != self.encoder.n() {
            return Err(Error::Config(format!(
                "decoder_depths needs {} entries, got {}",
                self.encoder.n(),
                self.decoder_depths.len()
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie strictly in (0, 1)".into()));
        }
        if self.cb_radius == 0 {
            return Err(Error::Config("contact boundary radius must be >= 1".into()));
        }
        Ok(())
    }
}

struct ObjectBranch {
    name: &'static str,
    branch: DecoderBranch,
    hofe: Option<Hofe>,
}

/// A constructed model bound to one parameter store layout.
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    hand: DecoderBranch,
    objects: Vec<ObjectBranch>,
    cb: DecoderBranch,
}

/// Logit nodes for one forward pass.
pub struct BranchLogits {
    /// `(H, W, 3)`: background / left / right.
    pub hand: Tid,
    /// One `(H, W, 1)` node per object branch, in `object_branches()` order.
    pub objects: Vec<Tid>,
    /// `(H, W, 1)`.
    pub cb: Tid,
}

/// Concrete logits extracted from a forward pass.
pub struct LogitMaps<T: Real> {
    pub hand: Array3<T>,
    pub objects: Vec<Array3<T>>,
    pub cb: Array3<T>,
}

impl Model {
    /// Builds a freshly initialized f32 model and its parameter store from
    /// a seed; the layout matches any checkpoint trained from the same
    /// configuration.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<(Model, ParamStore<f32>)> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, &mut rng, cfg.clone())?;
        Ok((model, store))
    }

    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: ModelConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let encoder = Encoder::new(store, rng, cfg.encoder.clone())?;
        let hand = DecoderBranch::new(
            store,
            rng,
            &cfg.encoder,
            &cfg.decoder_depths,
            BranchId::Hand.key(),
            BranchId::Hand.head_channels(),
        )?;
        let mut objects = Vec::new();
        for &name in cfg.variant.object_branches() {
            let branch = DecoderBranch::new(store, rng, &cfg.encoder, &cfg.decoder_depths, name, 1)?;
            let hofe = cfg.variant.uses_hofe().then(|| {
                Hofe::new(
                    store,
                    rng,
                    &format!("hofe.{name}"),
                    cfg.encoder.embed_dim,
                    cfg.attn_norm,
                    cfg.hofe_gelu,
                )
            });
            objects.push(ObjectBranch { name, branch, hofe });
        }
        let cb = DecoderBranch::new(
            store,
            rng,
            &cfg.encoder,
            &cfg.decoder_depths,
            BranchId::ContactBoundary.key(),
            BranchId::ContactBoundary.head_channels(),
        )?;
        Ok(Model {
            cfg,
            encoder,
            hand,
            objects,
            cb,
        })
    }

    pub fn object_names(&self) -> Vec<&'static str> {
        self.objects.iter().map(|o| o.name).collect()
    }

    /// Fused forward: image node to per-branch logits on one tape.
    pub fn forward_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        image: Tid,
    ) -> Result<BranchLogits> {
        let pyramid = self.encoder.forward_pyramid(tape, store, image);
        let d_hand = self.hand.forward_features(tape, store, &pyramid.maps, pyramid.f_ehc);
        let hand_logits = self.hand.forward_head(tape, store, d_hand);
        let mut object_logits = Vec::with_capacity(self.objects.len());
        for obj in &self.objects {
            let mut d = obj.branch.forward_features(tape, store, &pyramid.maps, pyramid.f_ehc);
            if let Some(hofe) = &obj.hofe {
                d = hofe.forward_nodes(tape, store, d_hand, d)?;
            }
            object_logits.push(obj.branch.forward_head(tape, store, d));
        }
        let d_cb = self.cb.forward_features(tape, store, &pyramid.maps, pyramid.f_ehc);
        let cb_logits = self.cb.forward_head(tape, store, d_cb);
        Ok(BranchLogits {
            hand: hand_logits,
            objects: object_logits,
            cb: cb_logits,
        })
    }

    /// Forward pass on a normalized image, returning concrete logit maps.
    pub fn logit_maps<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Array3<T>,
    ) -> Result<LogitMaps<T>> {
        let (h, w, c) = image.dim();
        self.encoder.check_input(h, w, c)?;
        let mut tape = Tape::<T>::new();
        let img = tape.constant(image.clone().into_dyn());
        let logits = self.forward_logits(&mut tape, store, img)?;
        let grab = |tape: &Tape<T>, t: Tid, name: &str| -> Result<Array3<T>> {
            tape.check_finite(t, name)?;
            Ok(tape
                .value(t)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("heads emit (H, W, K)"))
        };
        let hand = grab(&tape, logits.hand, "head.hand")?;
        let objects = self
            .objects
            .iter()
            .zip(&logits.objects)
            .map(|(o, &t)| grab(&tape, t, &format!("head.{}", o.name)))
            .collect::<Result<Vec<_>>>()?;
        let cb = grab(&tape, logits.cb, "head.contact_boundary")?;
        Ok(LogitMaps { hand, objects, cb })
    }

    /// Post-softmax enhancer attention per object branch, for inspection.
    /// Empty when the variant has no enhancement.
    pub fn attention_maps<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Array3<T>,
    ) -> Result<Vec<(String, crate::hofe::AttentionMatrix<T>)>> {
        let (h, w, c) = image.dim();
        self.encoder.check_input(h, w, c)?;
        let mut tape = Tape::<T>::new();
        let img = tape.constant(image.clone().into_dyn());
        let pyramid = self.encoder.forward_pyramid(&mut tape, store, img);
        let d_hand = self.hand.forward_features(&mut tape, store, &pyramid.maps, pyramid.f_ehc);
        let d_hand_map = crate::encoder::node_to_map(&tape, d_hand, "decoder.hand")?;
        let mut out = Vec::new();
        for obj in &self.objects {
            let Some(hofe) = &obj.hofe else { continue };
            let d = obj.branch.forward_features(&mut tape, store, &pyramid.maps, pyramid.f_ehc);
            let d_map = crate::encoder::node_to_map(&tape, d, &format!("decoder.{}", obj.name))?;
            let attn = hofe.attention_map(store, &d_hand_map, &d_map)?;
            out.push((obj.name.to_string(), attn));
        }
        Ok(out)
    }

    /// Full inference: forward, binarize, and recombine into final masks.
    pub fn infer<T: Real>(&self, store: &ParamStore<T>, image: &Array3<T>) -> Result<FinalMasks> {
        let maps = self.logit_maps(store, image)?;
        let m_hand = argmax3(&maps.hand);
        // sigmoid(x) > t  <=>  x > ln(t / (1 - t))
        let cut: T = cast((self.cfg.threshold / (1.0 - self.cfg.threshold)).ln());
        let bin = |a: &Array3<T>| -> BinaryMask {
            let (h, w, _) = a.dim();
            BinaryMask::from_fn(h, w, |y, x| a[[y, x, 0]] > cut)
        };
        let m_cb = bin(&maps.cb);
        if self.cfg.variant.uses_cods() {
            let m_lo = bin(&maps.objects[0]);
            let m_ro = bin(&maps.objects[1]);
            let (m_o_t, m_o_l, m_o_r) = crate::cods::recombine(&m_lo, &m_ro)?;
            Ok(FinalMasks {
                m_hand,
                m_o_l,
                m_o_r,
                m_o_t,
                m_cb,
            })
        } else {
            Ok(FinalMasks {
                m_hand,
                m_o_l: bin(&maps.objects[0]),
                m_o_r: bin(&maps.objects[1]),
                m_o_t: bin(&maps.objects[2]),
                m_cb,
            })
        }
    }
}

/// Argmax over the 3 hand channels; ties resolve to the lowest class index.
fn argmax3<T: Real>(logits: &Array3<T>) -> Array2<u8> {
    let (h, w, k) = logits.dim();
    debug_assert_eq!(k, 3);
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0u8;
        let mut best_v = logits[[y, x, 0]];
        for c in 1..k {
            if logits[[y, x, c]] > best_v {
                best_v = logits[[y, x, c]];
                best = c as u8;
            }
        }
        best
    })
}
