//! Loss assembly, learning-rate schedule, AdamW, and the training loop.
//!
//! The total objective is a weighted sum of per-branch cross-entropies:
//! `alpha` on the two (or three) object terms, `gamma` on the 3-class hand
//! term, `lambda` on the contact boundary term. Binary branches use
//! sigmoid cross-entropy on logits; the hand branch uses 3-class softmax
//! cross-entropy; every term is a per-pixel mean.
//!
//! Training is bit-deterministic for a fixed seed: batch composition and
//! crop offsets come from a single RNG stream drawn on the driver thread,
//! and per-sample gradients are reduced in sample order whether or not the
//! batch runs in parallel.

use crate::cods::decouple_targets_with;
use crate::error::{Error, Result};
use crate::eval::evaluate_samples;
use crate::mask::{ClassId, LabelRaster};
use crate::model::{BranchLogits, Model, ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::synth::{crop_labels, preprocess, CropMode, Normalization, SamplePair};
use crate::tape::{cast, Real, Tape, Tid};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Weights of the object, hand, and contact-boundary loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.5,
            gamma: 1.0,
            lambda: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.gamma < 0.0 || self.lambda < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.alpha == 0.0 && self.gamma == 0.0 && self.lambda == 0.0 {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

/// Linear warmup then linear decay, plus optimizer constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub warmup_iters: u64,
    pub max_iters: u64,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl ScheduleConfig {
    /// Desk-scale defaults. The peak rate is higher than the full-scale
    /// setting because desk runs start from random weights rather than a
    /// pretrained backbone.
    pub fn toy() -> Self {
        ScheduleConfig {
            warmup_iters: 200,
            max_iters: 2000,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 8,
        }
    }

    /// Full-scale reference values.
    pub fn full() -> Self {
        ScheduleConfig {
            warmup_iters: 10_000,
            max_iters: 180_000,
            peak_lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 12,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_iters > self.max_iters {
            return Err(Error::Config(format!(
                "warmup ({}) must not exceed max iterations ({})",
                self.warmup_iters, self.max_iters
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.peak_lr <= 0.0 {
            return Err(Error::Config("peak learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `iter`: 0 to peak linearly over the warmup, then peak
/// back to 0 linearly at `max_iters`.
pub fn lr_at(iter: u64, sched: &ScheduleConfig) -> Result<f64> {
    if iter > sched.max_iters {
        return Err(Error::Config(format!(
            "iteration {iter} outside schedule 0..={}",
            sched.max_iters
        )));
    }
    if iter <= sched.warmup_iters {
        if sched.warmup_iters == 0 {
            return Ok(sched.peak_lr);
        }
        return Ok(sched.peak_lr * iter as f64 / sched.warmup_iters as f64);
    }
    let span = (sched.max_iters - sched.warmup_iters) as f64;
    Ok(sched.peak_lr * (sched.max_iters - iter) as f64 / span)
}

/// Supervision for one (possibly cropped) sample.
pub struct SampleTargets<T: Real> {
    /// Flattened `H*W` class indices: 0 background, 1 left, 2 right.
    pub hand: Arc<Vec<u8>>,
    /// One `(H, W, 1)` float mask per object branch.
    pub objects: Vec<Arc<ArrayD<T>>>,
    pub object_names: Vec<&'static str>,
    pub cb: Arc<ArrayD<T>>,
}

/// Builds branch supervision from labels according to the variant.
pub fn build_targets<T: Real>(
    labels: &LabelRaster,
    variant: Variant,
    cb_radius: usize,
    cb_iterations: usize,
) -> SampleTargets<T> {
    let (h, w) = (labels.height(), labels.width());
    let to_float = |m: &crate::mask::BinaryMask| -> Arc<ArrayD<T>> {
        Arc::new(
            ArrayD::from_shape_fn(IxDyn(&[h, w, 1]), |ix| {
                if m.get(ix[0], ix[1]) {
                    T::one()
                } else {
                    T::zero()
                }
            }),
        )
    };
    let decoupled = decouple_targets_with(labels, cb_radius, cb_iterations);
    let hand = Arc::new(decoupled.g_hand.iter().copied().collect::<Vec<u8>>());
    let cb = to_float(&decoupled.g_cb);
    let (objects, object_names): (Vec<_>, Vec<_>) = if variant.uses_cods() {
        (
            vec![to_float(&decoupled.g_lo_prime), to_float(&decoupled.g_ro_prime)],
            vec!["left_obj", "right_obj"],
        )
    } else {
        (
            vec![
                to_float(&labels.class_mask(ClassId::LeftObject)),
                to_float(&labels.class_mask(ClassId::RightObject)),
                to_float(&labels.class_mask(ClassId::TwoHandObject)),
            ],
            vec!["left_obj", "right_obj", "two_obj"],
        )
    };
    SampleTargets {
        hand,
        objects,
        object_names,
        cb,
    }
}

/// Per-term loss values (unweighted) plus the weighted total.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

/// Assembles the weighted total loss on the tape, returning the root node
/// and a concrete breakdown. Errors name the first non-finite term.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: &BranchLogits,
    targets: &SampleTargets<T>,
    weights: &LossWeights,
) -> Result<(Tid, LossBreakdown)> {
    weights.validate()?;
    if logits.objects.len() != targets.objects.len() {
        return Err(Error::Config(format!(
            "model emits {} object branches but targets carry {}",
            logits.objects.len(),
            targets.objects.len()
        )));
    }
    let mut terms = Vec::new();
    let mut object_sum: Option<Tid> = None;
    for ((&lt, target), name) in logits
        .objects
        .iter()
        .zip(&targets.objects)
        .zip(&targets.object_names)
    {
        let term = tape.bce_with_logits_mean(lt, target.clone())?;
        let label = format!("loss_{name}");
        tape.check_finite(term, &label)?;
        terms.push((label, scalar_value(tape, term)));
        object_sum = Some(match object_sum {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }

    let hand_shape = tape.shape(logits.hand).to_vec();
    let l = hand_shape[0] * hand_shape[1];
    let hand2 = tape.reshape(logits.hand, &[l, hand_shape[2]]);
    let hand_term = tape.ce_mean(hand2, targets.hand.clone())?;
    tape.check_finite(hand_term, "loss_hand")?;
    terms.push(("loss_hand".to_string(), scalar_value(tape, hand_term)));

    let cb_term = tape.bce_with_logits_mean(logits.cb, targets.cb.clone())?;
    tape.check_finite(cb_term, "loss_cb")?;
    terms.push(("loss_cb".to_string(), scalar_value(tape, cb_term)));

    let objects_scaled = tape.scale(object_sum.expect("at least one object branch"), cast(weights.alpha));
    let hand_scaled = tape.scale(hand_term, cast(weights.gamma));
    let cb_scaled = tape.scale(cb_term, cast(weights.lambda));
    let partial = tape.add(objects_scaled, hand_scaled);
    let total = tape.add(partial, cb_scaled);
    tape.check_finite(total, "loss_total")?;
    let breakdown = LossBreakdown {
        total: scalar_value(tape, total),
        terms,
    };
    Ok((total, breakdown))
}

fn scalar_value<T: Real>(tape: &Tape<T>, t: Tid) -> f64 {
    num_traits::cast(tape.value(t).iter().next().copied().expect("scalar node")).unwrap_or(f64::NAN)
}

/// Decoupled-weight-decay Adam, moments (0.9, 0.999). Parameters whose
/// names mark them as normalization scales/offsets, biases, relative-bias
/// tables, or temperatures are excluded from decay.
pub struct AdamW<T: Real> {
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
    pub t: u64,
    no_decay: Vec<bool>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn is_no_decay(name: &str) -> bool {
    name.ends_with(".bias")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.ends_with(".rel_bias")
        || name.ends_with(".temperature")
}

impl<T: Real> AdamW<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let m = store.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
        let v = store.iter().map(|(_, v)| ArrayD::zeros(v.raw_dim())).collect();
        let no_decay = store.iter().map(|(n, _)| is_no_decay(n)).collect();
        AdamW {
            m,
            v,
            t: 0,
            no_decay,
        }
    }

    /// One update over dense per-parameter gradients; `None` entries are
    /// untouched parameters (e.g. modules disabled by the variant).
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &[Option<ArrayD<T>>],
        lr: f64,
        weight_decay: f64,
    ) {
        self.t += 1;
        let b1: T = cast(BETA1);
        let b2: T = cast(BETA2);
        let one: T = T::one();
        let bc1: T = cast(1.0 - BETA1.powi(self.t as i32));
        let bc2: T = cast(1.0 - BETA2.powi(self.t as i32));
        let lr_t: T = cast(lr);
        let eps: T = cast(ADAM_EPS);
        for (idx, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mv, &gv| {
                *mv = b1 * *mv + (one - b1) * gv;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vv, &gv| {
                *vv = b2 * *vv + (one - b2) * gv * gv;
            });
            let wd: T = if self.no_decay[idx] {
                T::zero()
            } else {
                cast(weight_decay)
            };
            let p = store.value_mut(crate::nn::ParamId(idx));
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|pv, &mv, &vv| {
                let mhat = mv / bc1;
                let vhat = vv / bc2;
                *pv = *pv - lr_t * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            });
        }
    }
}

/// One line of the metric log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub total: f64,
    pub terms: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_miou: Option<f64>,
}

/// Runtime knobs for a training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    /// Run batches sequentially; output bits are identical either way.
    pub deterministic: bool,
    pub val_every: u64,
    pub crop: usize,
    pub normalization: Normalization,
    /// Random crops during training (evaluation always center-crops).
    pub random_crop: bool,
}

impl TrainConfig {
    pub fn toy(seed: u64) -> Self {
        TrainConfig {
            seed,
            deterministic: false,
            val_every: 500,
            crop: 128,
            normalization: Normalization::default(),
            random_crop: true,
        }
    }
}

/// Outcome of a run: final and best parameters plus logs.
pub struct TrainResult {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub best_params: Vec<(String, ArrayD<f32>)>,
    pub best_val_miou: f64,
    pub untrained_val_miou: f64,
    pub logs: Vec<LogRecord>,
}

fn prepare_sample(
    sample: &SamplePair,
    crop: usize,
    norm: &Normalization,
    mode: CropMode,
) -> Result<(Array3<f32>, LabelRaster)> {
    let image = preprocess::<f32>(&sample.image, crop, norm, mode)?;
    let labels = crop_labels(&sample.labels, crop, mode)?;
    Ok((image, labels))
}

type SampleGrads = (LossBreakdown, Vec<(usize, ArrayD<f32>)>);

fn sample_pass(
    model: &Model,
    store: &ParamStore<f32>,
    image: &Array3<f32>,
    targets: &SampleTargets<f32>,
    weights: &LossWeights,
) -> Result<SampleGrads> {
    let mut tape = Tape::<f32>::new();
    let img = tape.constant(image.clone().into_dyn());
    let logits = model.forward_logits(&mut tape, store, img)?;
    let (total, breakdown) = total_loss(&mut tape, &logits, targets, weights)?;
    let mut grads = tape.backward(total);
    let param_grads = tape.param_grads(&mut grads);
    Ok((breakdown, param_grads))
}

/// Trains a model from scratch. Deterministic for a fixed seed; saves the
/// best-by-validation-mIoU parameters (and optionally a checkpoint).
#[allow(clippy::too_many_arguments)]
pub fn train(
    model_cfg: &ModelConfig,
    sched: &ScheduleConfig,
    weights: &LossWeights,
    tcfg: &TrainConfig,
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    ckpt_path: Option<&Path>,
) -> Result<TrainResult> {
    model_cfg.validate()?;
    sched.validate()?;
    weights.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if tcfg.crop != model_cfg.encoder.image_size {
        return Err(Error::Config(format!(
            "crop {} must match the encoder input size {}",
            tcfg.crop, model_cfg.encoder.image_size
        )));
    }

    let mut init_rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let mut store = ParamStore::<f32>::new();
    let model = Model::new(&mut store, &mut init_rng, model_cfg.clone())?;
    let mut adam = AdamW::new(&store);
    let mut data_rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x9E37_79B9_7F4A_7C15);

    let untrained_val_miou = if val_set.is_empty() {
        0.0
    } else {
        evaluate_samples(&model, &store, val_set, tcfg.crop, &tcfg.normalization, "untrained")?
            .miou
    };

    let mut order: Vec<usize> = Vec::new();
    let mut logs = Vec::new();
    let mut best_val_miou = f64::NEG_INFINITY;
    let mut best_params: Vec<(String, ArrayD<f32>)> = store
        .iter()
        .map(|(n, v)| (n.to_string(), v.clone()))
        .collect();
    let mut last_good: Option<Vec<(String, ArrayD<f32>)>> = None;

    for iter in 0..sched.max_iters {
        let lr = lr_at(iter, sched)?;

        // Batch assembly and crop draws stay on this thread.
        let mut batch = Vec::with_capacity(sched.batch_size);
        for _ in 0..sched.batch_size {
            if order.is_empty() {
                order = (0..train_set.len()).collect();
                for i in (1..order.len()).rev() {
                    let j = data_rng.gen_range(0..=i);
                    order.swap(i, j);
                }
            }
            let idx = order.pop().expect("refilled above");
            let sample = &train_set[idx];
            let mode = if tcfg.random_crop && sample.image.height() > tcfg.crop {
                let oy = data_rng.gen_range(0..=sample.image.height() - tcfg.crop);
                let ox = data_rng.gen_range(0..=sample.image.width() - tcfg.crop);
                CropMode::At { oy, ox }
            } else {
                CropMode::Center
            };
            batch.push((idx, mode));
        }

        let run_one = |&(idx, mode): &(usize, CropMode)| -> Result<SampleGrads> {
            let (image, labels) = prepare_sample(&train_set[idx], tcfg.crop, &tcfg.normalization, mode)?;
            let targets = build_targets::<f32>(
                &labels,
                model_cfg.variant,
                model_cfg.cb_radius,
                model_cfg.cb_iterations,
            );
            sample_pass(&model, &store, &image, &targets, weights)
        };
        let results: Vec<Result<SampleGrads>> = if tcfg.deterministic {
            batch.iter().map(run_one).collect()
        } else {
            batch.par_iter().map(run_one).collect()
        };

        // Ordered reduction keeps the update bit-deterministic.
        let mut dense: Vec<Option<ArrayD<f32>>> = (0..store.len()).map(|_| None).collect();
        let mut total = 0.0;
        let mut term_sums: Vec<(String, f64)> = Vec::new();
        for res in results {
            let (breakdown, grads) = res?;
            total += breakdown.total;
            if term_sums.is_empty() {
                term_sums = breakdown.terms.clone();
            } else {
                for (acc, term) in term_sums.iter_mut().zip(&breakdown.terms) {
                    acc.1 += term.1;
                }
            }
            for (pidx, g) in grads {
                match &mut dense[pidx] {
                    Some(acc) => *acc += &g,
                    slot => *slot = Some(g),
                }
            }
        }
        let inv_b = 1.0 / sched.batch_size as f64;
        total *= inv_b;
        for t in &mut term_sums {
            t.1 *= inv_b;
        }
        for g in dense.iter_mut().flatten() {
            g.mapv_inplace(|v| v * inv_b as f32);
        }

        if !total.is_finite() {
            if let (Some(path), Some(params)) = (ckpt_path, &last_good) {
                let ck = crate::ckpt::Checkpoint {
                    params: params.clone(),
                    adam_m: Vec::new(),
                    adam_v: Vec::new(),
                    meta: crate::ckpt::CkptMeta {
                        iteration: iter.saturating_sub(1),
                        best_val_miou: best_val_miou.max(0.0),
                        seed: tcfg.seed,
                        rng_word_pos: data_rng.get_word_pos(),
                    },
                };
                crate::ckpt::save(path, &ck)?;
            }
            return Err(Error::Diverged {
                iter,
                term: "loss_total".into(),
            });
        }

        last_good = Some(store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect());
        adam.step(&mut store, &dense, lr, sched.weight_decay);

        let mut record = LogRecord {
            iter,
            lr,
            total,
            terms: term_sums,
            val_miou: None,
        };

        let due_val = tcfg.val_every > 0
            && !val_set.is_empty()
            && ((iter + 1) % tcfg.val_every == 0 || iter + 1 == sched.max_iters);
        if due_val {
            let report =
                evaluate_samples(&model, &store, val_set, tcfg.crop, &tcfg.normalization, "val")?;
            record.val_miou = Some(report.miou);
            if report.miou > best_val_miou {
                best_val_miou = report.miou;
                best_params = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
                if let Some(path) = ckpt_path {
                    let ck = crate::ckpt::Checkpoint {
                        params: best_params.clone(),
                        adam_m: Vec::new(),
                        adam_v: Vec::new(),
                        meta: crate::ckpt::CkptMeta {
                            iteration: iter + 1,
                            best_val_miou,
                            seed: tcfg.seed,
                            rng_word_pos: data_rng.get_word_pos(),
                        },
                    };
                    crate::ckpt::save(path, &ck)?;
                }
            }
        }
        logs.push(record);
    }

    if best_val_miou == f64::NEG_INFINITY {
        // No validation ran; the final parameters are the best we know.
        best_val_miou = 0.0;
        best_params = store.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
    }

    Ok(TrainResult {
        model,
        store,
        best_params,
        best_val_miou,
        untrained_val_miou,
        logs,
    })
}

/// Serializes logs as line-delimited JSON (one record per line).
pub fn logs_to_jsonl(logs: &[LogRecord]) -> String {
    let mut out = String::new();
    for record in logs {
        out.push_str(&serde_json::to_string(record).expect("serializable"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;
    use crate::synth::{generate_scene, SceneSpec, TouchConfig};
    use ndarray::Array3;

    fn tiny_cfg(variant: Variant) -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.image_size = 32;
        cfg.encoder.embed_dim = 8;
        cfg.encoder.depths = vec![1, 1];
        cfg.encoder.heads = vec![1, 2];
        cfg.encoder.bottleneck_depth = 1;
        cfg.decoder_depths = vec![1];
        cfg.variant = variant;
        cfg
    }

    fn tiny_samples(n: usize, base_seed: u64) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                generate_scene(&SceneSpec {
                    rng_seed: base_seed + i as u64,
                    image_size: 32,
                    n_distractors: 1,
                    touch_config: TouchConfig::Mixed,
                    ..SceneSpec::default()
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let sched = ScheduleConfig {
            warmup_iters: 100,
            max_iters: 1000,
            peak_lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
        };
        assert_eq!(lr_at(0, &sched).unwrap(), 0.0);
        assert_eq!(lr_at(100, &sched).unwrap(), 1e-4);
        assert_eq!(lr_at(1000, &sched).unwrap(), 0.0);
        let mid = (100 + 1000) / 2;
        assert!((lr_at(mid, &sched).unwrap() - 0.5e-4).abs() < 1e-12);
        assert!(lr_at(1001, &sched).is_err());
    }

    #[test]
    fn lr_schedule_full_config_reference_points() {
        let sched = ScheduleConfig::full();
        assert_eq!(lr_at(0, &sched).unwrap(), 0.0);
        assert_eq!(lr_at(10_000, &sched).unwrap(), 1e-4);
        assert_eq!(lr_at(180_000, &sched).unwrap(), 0.0);
    }

    #[test]
    fn loss_weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { alpha: -0.1, gamma: 1.0, lambda: 0.5 }.validate().is_err());
        assert!(LossWeights { alpha: 0.0, gamma: 0.0, lambda: 0.0 }.validate().is_err());
    }

    /// Builds logits directly as tape constants shaped like a 4x4 output.
    fn synthetic_logits(
        tape: &mut Tape<f64>,
        targets: &SampleTargets<f64>,
        magnitude: f64,
    ) -> BranchLogits {
        let h = 4;
        let w = 4;
        let objects = targets
            .objects
            .iter()
            .map(|t| {
                let arr = t.mapv(|v| if v > 0.5 { magnitude } else { -magnitude });
                tape.constant(arr)
            })
            .collect();
        let mut hand_arr = Array3::<f64>::from_elem((h, w, 3), 0.0);
        for (i, &cls) in targets.hand.iter().enumerate() {
            hand_arr[[i / w, i % w, cls as usize]] = magnitude;
        }
        let hand = tape.constant(hand_arr.into_dyn());
        let cb_arr = targets.cb.mapv(|v| if v > 0.5 { magnitude } else { -magnitude });
        let cb = tape.constant(cb_arr);
        BranchLogits {
            hand,
            objects,
            cb,
        }
    }

    fn demo_labels() -> LabelRaster {
        let mut labels = LabelRaster::zeros(4, 4);
        labels.set(3, 0, ClassId::LeftHand);
        labels.set(3, 3, ClassId::RightHand);
        labels.set(2, 0, ClassId::LeftObject);
        labels.set(2, 3, ClassId::RightObject);
        labels.set(0, 1, ClassId::TwoHandObject);
        labels
    }

    #[test]
    fn perfect_logits_drive_terms_to_zero() {
        let labels = demo_labels();
        let targets = build_targets::<f64>(&labels, Variant::CodsHofe, 1, 1);
        let mut tape = Tape::<f64>::new();
        let logits = synthetic_logits(&mut tape, &targets, 25.0);
        let (_, breakdown) = total_loss(&mut tape, &logits, &targets, &LossWeights::default()).unwrap();
        for (name, value) in &breakdown.terms {
            assert!(*value < 1e-3, "{name} = {value}");
        }
    }

    #[test]
    fn hand_only_weights_isolate_hand_term() {
        let labels = demo_labels();
        let targets = build_targets::<f64>(&labels, Variant::CodsHofe, 1, 1);
        let mut tape = Tape::<f64>::new();
        let logits = synthetic_logits(&mut tape, &targets, 1.3);
        let w = LossWeights { alpha: 0.0, gamma: 1.0, lambda: 0.0 };
        let (_, breakdown) = total_loss(&mut tape, &logits, &targets, &w).unwrap();
        let hand = breakdown.terms.iter().find(|(n, _)| n == "loss_hand").unwrap().1;
        assert!((breakdown.total - hand).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_weights() {
        let labels = demo_labels();
        let targets = build_targets::<f64>(&labels, Variant::Basic, 1, 1);
        let mut tape = Tape::<f64>::new();
        let logits = synthetic_logits(&mut tape, &targets, 0.8);
        let w1 = LossWeights { alpha: 0.4, gamma: 0.9, lambda: 0.3 };
        let (_, b1) = total_loss(&mut tape, &logits, &targets, &w1).unwrap();
        let c = 3.7;
        let w2 = LossWeights { alpha: w1.alpha * c, gamma: w1.gamma * c, lambda: w1.lambda * c };
        let mut tape2 = Tape::<f64>::new();
        let logits2 = synthetic_logits(&mut tape2, &targets, 0.8);
        let (_, b2) = total_loss(&mut tape2, &logits2, &targets, &w2).unwrap();
        assert!((b2.total - c * b1.total).abs() < 1e-9 * b1.total.abs().max(1.0));
    }

    #[test]
    fn gradient_reaches_every_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let cfg = {
            let mut c = tiny_cfg(Variant::CodsHofe);
            c.encoder.block_kind = crate::nn::BlockKind::Conv;
            c
        };
        let model = Model::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let sample = tiny_samples(1, 0).remove(0);
        let image = preprocess::<f64>(&sample.image, 32, &Normalization::default(), CropMode::Center).unwrap();
        let targets = build_targets::<f64>(&sample.labels, cfg.variant, 1, 3);

        let mut tape = Tape::<f64>::new();
        let img = tape.constant(image.into_dyn());
        let logits = model.forward_logits(&mut tape, &store, img).unwrap();
        let (total, _) = total_loss(&mut tape, &logits, &targets, &LossWeights::default()).unwrap();
        let mut grads = tape.backward(total);
        let mut max_by_prefix: std::collections::HashMap<String, f64> = Default::default();
        for (pidx, g) in tape.param_grads(&mut grads) {
            let name = store.name(crate::nn::ParamId(pidx));
            let prefix = name.split('.').take(2).collect::<Vec<_>>().join(".");
            let gmax = g.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
            let e = max_by_prefix.entry(prefix).or_insert(0.0);
            *e = e.max(gmax);
        }
        for prefix in [
            "encoder.patch_embed",
            "encoder.stage0",
            "bottleneck.merge",
            "decoder.hand",
            "decoder.left_obj",
            "decoder.right_obj",
            "decoder.contact_boundary",
            "head.hand",
            "head.left_obj",
            "head.right_obj",
            "head.contact_boundary",
            "hofe.left_obj",
            "hofe.right_obj",
        ] {
            let found = max_by_prefix
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(_, &v)| v)
                .fold(0.0f64, f64::max);
            assert!(found > 0.0, "no gradient reached {prefix}");
        }
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let cfg = tiny_cfg(Variant::Cods);
        let sched = ScheduleConfig { max_iters: 2, warmup_iters: 0, ..ScheduleConfig::toy() };
        let mut tcfg = TrainConfig::toy(0);
        tcfg.crop = 32;
        let err = train(&cfg, &sched, &LossWeights::default(), &tcfg, &[], &[], None)
            .map(|_| ())
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn short_training_is_bit_deterministic_and_thread_invariant() {
        let mut cfg = tiny_cfg(Variant::Cods);
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let sched = ScheduleConfig {
            warmup_iters: 2,
            max_iters: 8,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 3,
        };
        let train_set = tiny_samples(6, 100);
        let val_set = tiny_samples(2, 900);
        let mut tcfg = TrainConfig::toy(5);
        tcfg.crop = 32;
        tcfg.val_every = 4;

        let r1 = train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &val_set, None).unwrap();
        let r2 = train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &val_set, None).unwrap();
        assert_eq!(logs_to_jsonl(&r1.logs), logs_to_jsonl(&r2.logs));

        let mut tcfg_seq = tcfg.clone();
        tcfg_seq.deterministic = true;
        let r3 = train(&cfg, &sched, &LossWeights::default(), &tcfg_seq, &train_set, &val_set, None).unwrap();
        assert_eq!(logs_to_jsonl(&r1.logs), logs_to_jsonl(&r3.logs));
        for ((n1, v1), (n3, v3)) in r1.store.iter().zip(r3.store.iter()) {
            assert_eq!(n1, n3);
            for (a, b) in v1.iter().zip(v3.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{n1}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_forward_bits() {
        let mut cfg = tiny_cfg(Variant::Cods);
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let sched = ScheduleConfig {
            warmup_iters: 1,
            max_iters: 4,
            peak_lr: 1e-3,
            weight_decay: 0.01,
            batch_size: 2,
        };
        let train_set = tiny_samples(4, 200);
        let mut tcfg = TrainConfig::toy(9);
        tcfg.crop = 32;
        tcfg.val_every = 0;
        let result = train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &[], None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.egsg");
        let ck = crate::ckpt::from_store(&result.store, crate::ckpt::CkptMeta::default());
        crate::ckpt::save(&path, &ck).unwrap();

        // Fresh model with the same seed gives the same parameter layout;
        // loading the checkpoint must reproduce forward outputs bit-exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
        let mut store2 = ParamStore::<f32>::new();
        let model2 = Model::new(&mut store2, &mut rng, cfg.clone()).unwrap();
        let loaded = crate::ckpt::load::<f32>(&path).unwrap();
        store2.load_entries(loaded.params).unwrap();

        let sample = &train_set[0];
        let image = preprocess::<f32>(&sample.image, 32, &tcfg.normalization, CropMode::Center).unwrap();
        let a = result.model.logit_maps(&result.store, &image).unwrap();
        let b = model2.logit_maps(&store2, &image).unwrap();
        for (x, y) in a.hand.iter().zip(b.hand.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (ao, bo) in a.objects.iter().zip(&b.objects) {
            for (x, y) in ao.iter().zip(bo.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    #[ignore = "timing probe for sizing CPU budgets"]
    fn bench_phases() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let sample = generate_scene(&SceneSpec::default()).unwrap();
        let image = preprocess::<f32>(&sample.image, 128, &Normalization::default(), CropMode::Center).unwrap();
        let targets = build_targets::<f32>(&sample.labels, cfg.variant, 1, 3);

        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let _ = model.logit_maps(&store, &image).unwrap();
        }
        eprintln!("forward only: {:?}/sample", t0.elapsed() / 3);

        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let _ = sample_pass(&model, &store, &image, &targets, &LossWeights::default()).unwrap();
        }
        eprintln!("forward+backward: {:?}/sample", t0.elapsed() / 3);

        // Variant without enhancement to isolate its cost.
        let mut cfg2 = cfg.clone();
        cfg2.variant = Variant::Cods;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store2 = ParamStore::<f32>::new();
        let model2 = Model::new(&mut store2, &mut rng, cfg2.clone()).unwrap();
        let targets2 = build_targets::<f32>(&sample.labels, cfg2.variant, 1, 3);
        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let _ = sample_pass(&model2, &store2, &image, &targets2, &LossWeights::default()).unwrap();
        }
        eprintln!("fwd+bwd without enhancement: {:?}/sample", t0.elapsed() / 3);

        // Encoder alone.
        let t0 = std::time::Instant::now();
        for _ in 0..3 {
            let mut tape = Tape::<f32>::new();
            let img = tape.constant(image.clone().into_dyn());
            let nodes = model.encoder.forward_pyramid(&mut tape, &store, img);
            let s = tape.sum_all(nodes.f_ehc);
            let _ = tape.backward(s);
        }
        eprintln!("encoder fwd+bwd: {:?}/sample", t0.elapsed() / 3);
    }

    #[test]
    #[ignore = "learning-dynamics probe"]
    fn probe_ablation_ordering() {
        let train_set: Vec<SamplePair> = (0..256)
            .map(|i| generate_scene(&SceneSpec { rng_seed: i, ..SceneSpec::default() }).unwrap())
            .collect();
        let val_set: Vec<SamplePair> = (0..48)
            .map(|i| {
                generate_scene(&SceneSpec { rng_seed: 1_000_000 + i, ..SceneSpec::default() }).unwrap()
            })
            .collect();
        for seed in [0u64, 1] {
            for variant in [Variant::Basic, Variant::CodsHofe] {
                let mut cfg = ModelConfig::toy();
                cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
                cfg.variant = variant;
                let sched = ScheduleConfig {
                    warmup_iters: 80,
                    max_iters: 800,
                    peak_lr: 1e-3,
                    weight_decay: 0.01,
                    batch_size: 8,
                };
                let mut tcfg = TrainConfig::toy(seed);
                tcfg.val_every = 200;
                let t0 = std::time::Instant::now();
                let result =
                    train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &val_set, None)
                        .unwrap();
                eprintln!(
                    "seed {seed} {:} best val miou {:.4} (untrained {:.4}) in {:?}",
                    variant.key(),
                    result.best_val_miou,
                    result.untrained_val_miou,
                    t0.elapsed()
                );
            }
        }
    }

    #[test]
    #[ignore = "learning-dynamics probe"]
    fn probe_learning_rates() {
        let train_set: Vec<SamplePair> = (0..128)
            .map(|i| generate_scene(&SceneSpec { rng_seed: i, ..SceneSpec::default() }).unwrap())
            .collect();
        let val_set: Vec<SamplePair> = (0..32)
            .map(|i| {
                generate_scene(&SceneSpec { rng_seed: 1_000_000 + i, ..SceneSpec::default() }).unwrap()
            })
            .collect();
        for peak in [3e-4, 1e-3] {
            let mut cfg = ModelConfig::toy();
            cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
            let sched = ScheduleConfig {
                warmup_iters: 50,
                max_iters: 500,
                peak_lr: peak,
                weight_decay: 0.01,
                batch_size: 8,
            };
            let mut tcfg = TrainConfig::toy(0);
            tcfg.val_every = 125;
            let result =
                train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &val_set, None)
                    .unwrap();
            let vals: Vec<String> = result
                .logs
                .iter()
                .filter_map(|r| r.val_miou.map(|v| format!("{}:{v:.3}", r.iter)))
                .collect();
            eprintln!(
                "peak {peak:.0e}: untrained {:.3} vals [{}] final loss {:.3}",
                result.untrained_val_miou,
                vals.join(" "),
                result.logs.last().unwrap().total
            );
        }
    }

    #[test]
    #[ignore = "learning-dynamics probe"]
    fn probe_learning_curve() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let sched = ScheduleConfig {
            warmup_iters: 40,
            max_iters: 400,
            peak_lr: 1e-4,
            weight_decay: 0.01,
            batch_size: 8,
        };
        let train_set: Vec<SamplePair> = (0..128)
            .map(|i| generate_scene(&SceneSpec { rng_seed: i, ..SceneSpec::default() }).unwrap())
            .collect();
        let val_set: Vec<SamplePair> = (0..32)
            .map(|i| {
                generate_scene(&SceneSpec { rng_seed: 1_000_000 + i, ..SceneSpec::default() }).unwrap()
            })
            .collect();
        let mut tcfg = TrainConfig::toy(0);
        tcfg.val_every = 100;
        let t0 = std::time::Instant::now();
        let result = train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &val_set, None).unwrap();
        eprintln!("trained 400 iters in {:?}", t0.elapsed());
        eprintln!("untrained val miou: {:.4}", result.untrained_val_miou);
        for record in result.logs.iter().filter(|r| r.val_miou.is_some() || r.iter % 50 == 0) {
            eprintln!(
                "iter {:4} lr {:.2e} total {:.4} val {:?}",
                record.iter, record.lr, record.total, record.val_miou
            );
        }
    }

    #[test]
    #[ignore = "timing probe for sizing CPU budgets"]
    fn bench_pieces() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let model = Model::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let sample = generate_scene(&SceneSpec::default()).unwrap();
        let image = preprocess::<f32>(&sample.image, 128, &Normalization::default(), CropMode::Center).unwrap();
        let targets = build_targets::<f32>(&sample.labels, cfg.variant, 1, 3);
        let n = 5;

        // Full pipeline, no backward.
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let img = tape.constant(image.clone().into_dyn());
            let _ = model.forward_logits(&mut tape, &store, img).unwrap();
        }
        eprintln!("forward_logits: {:?}", t0.elapsed() / n);

        // Forward + loss + backward.
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let img = tape.constant(image.clone().into_dyn());
            let logits = model.forward_logits(&mut tape, &store, img).unwrap();
            let (total, _) = total_loss(&mut tape, &logits, &targets, &LossWeights::default()).unwrap();
            let mut grads = tape.backward(total);
            let _ = tape.param_grads(&mut grads);
        }
        eprintln!("forward+loss+backward: {:?}", t0.elapsed() / n);

        // Loss terms alone on constant logits.
        let mut tape0 = Tape::<f32>::new();
        let img = tape0.constant(image.clone().into_dyn());
        let logits0 = model.forward_logits(&mut tape0, &store, img).unwrap();
        let hand_arr = tape0.value(logits0.hand).clone();
        let obj_arrs: Vec<_> = logits0.objects.iter().map(|&t| tape0.value(t).clone()).collect();
        let cb_arr = tape0.value(logits0.cb).clone();
        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let logits = BranchLogits {
                hand: tape.constant(hand_arr.clone()),
                objects: obj_arrs.iter().map(|a| tape.constant(a.clone())).collect(),
                cb: tape.constant(cb_arr.clone()),
            };
            let (total, _) = total_loss(&mut tape, &logits, &targets, &LossWeights::default()).unwrap();
            let mut grads = tape.backward(total);
            let _ = tape.param_grads(&mut grads);
        }
        eprintln!("losses fwd+bwd alone: {:?}", t0.elapsed() / n);

        // One object branch + its enhancement + head, isolated: feed the
        // encoder once, then re-run branch pieces on constant inputs.
        let mut tape0 = Tape::<f32>::new();
        let img0 = tape0.constant(image.clone().into_dyn());
        let nodes = model.encoder.forward_pyramid(&mut tape0, &store, img0);
        let skip_arrs: Vec<_> = nodes.maps.iter().map(|&t| tape0.value(t).clone()).collect();
        let ehc_arr = tape0.value(nodes.f_ehc).clone();

        let mut rng2 = ChaCha8Rng::seed_from_u64(1);
        let mut store2 = ParamStore::<f32>::new();
        let branch = crate::decoder::DecoderBranch::new(
            &mut store2, &mut rng2, &cfg.encoder, &cfg.decoder_depths, "probe", 1,
        )
        .unwrap();
        let hofe = crate::hofe::Hofe::new(&mut store2, &mut rng2, "hofe.probe", cfg.encoder.embed_dim, cfg.attn_norm, false);

        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let skips: Vec<_> = skip_arrs.iter().map(|a| tape.constant(a.clone())).collect();
            let ehc = tape.constant(ehc_arr.clone());
            let d = branch.forward_features(&mut tape, &store2, &skips, ehc);
            let s = tape.sum_all(d);
            let mut grads = tape.backward(s);
            let _ = tape.param_grads(&mut grads);
        }
        eprintln!("one branch body fwd+bwd: {:?}", t0.elapsed() / n);

        // Branch feature for head/hofe probes.
        let mut tape1 = Tape::<f32>::new();
        let skips: Vec<_> = skip_arrs.iter().map(|a| tape1.constant(a.clone())).collect();
        let ehc = tape1.constant(ehc_arr.clone());
        let d_node = branch.forward_features(&mut tape1, &store2, &skips, ehc);
        let d_arr = tape1.value(d_node).clone();

        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let d = tape.constant(d_arr.clone());
            let h = branch.forward_head(&mut tape, &store2, d);
            let s = tape.sum_all(h);
            let mut grads = tape.backward(s);
            let _ = tape.param_grads(&mut grads);
        }
        eprintln!("one head fwd+bwd: {:?}", t0.elapsed() / n);

        let t0 = std::time::Instant::now();
        for _ in 0..n {
            let mut tape = Tape::<f32>::new();
            let dh = tape.constant(d_arr.clone());
            let dobj = tape.constant(d_arr.clone());
            let e = hofe.forward_nodes(&mut tape, &store2, dh, dobj).unwrap();
            let s = tape.sum_all(e);
            let mut grads = tape.backward(s);
            let _ = tape.param_grads(&mut grads);
        }
        eprintln!("one hofe fwd+bwd: {:?}", t0.elapsed() / n);

        // Head sub-pieces on the same branch feature.
        let mut rng3 = ChaCha8Rng::seed_from_u64(2);
        let mut store3 = ParamStore::<f32>::new();
        let expand = crate::nn::Linear::new(&mut store3, &mut rng3, "x.expand", 32, 512, false);
        let proj = crate::nn::Linear::new(&mut store3, &mut rng3, "x.proj", 32, 1, true);
        let norm = crate::nn::LayerNorm::new(&mut store3, "x.norm", 32);
        let stages: [(&str, usize); 4] = [("ln", 0), ("ln+expand", 1), ("+d2s", 2), ("+proj", 3)];
        for (label, upto) in stages {
            let t0 = std::time::Instant::now();
            for _ in 0..n {
                let mut tape = Tape::<f32>::new();
                let mut x = tape.constant(d_arr.clone());
                x = norm.forward(&mut tape, &store3, x);
                if upto >= 1 {
                    x = expand.forward(&mut tape, &store3, x);
                }
                if upto >= 2 {
                    x = tape.depth_to_space(x, 4);
                }
                if upto >= 3 {
                    x = proj.forward(&mut tape, &store3, x);
                }
                let s = tape.sum_all(x);
                let mut grads = tape.backward(s);
                let _ = tape.param_grads(&mut grads);
            }
            eprintln!("head piece {label}: {:?}", t0.elapsed() / n);
        }
    }

    #[test]
    #[ignore = "timing probe for sizing CPU budgets"]
    fn bench_iteration_cost() {
        for (label, kind) in [
            ("conv", crate::nn::BlockKind::Conv),
            ("swin", crate::nn::BlockKind::Swin),
        ] {
            let mut cfg = ModelConfig::toy();
            cfg.encoder.block_kind = kind;
            let sched = ScheduleConfig {
                warmup_iters: 1,
                max_iters: 3,
                peak_lr: 1e-4,
                weight_decay: 0.01,
                batch_size: 8,
            };
            let train_set: Vec<SamplePair> = (0..16)
                .map(|i| {
                    generate_scene(&SceneSpec {
                        rng_seed: i,
                        ..SceneSpec::default()
                    })
                    .unwrap()
                })
                .collect();
            let mut tcfg = TrainConfig::toy(0);
            tcfg.val_every = 0;
            let t0 = std::time::Instant::now();
            let _ = train(&cfg, &sched, &LossWeights::default(), &tcfg, &train_set, &[], None).unwrap();
            let dt = t0.elapsed();
            eprintln!("{label}: 3 iterations of batch 8 took {dt:?} ({:?}/iter)", dt / 3);
        }
    }

    #[test]
    fn fd_total_loss_through_model_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let mut cfg = tiny_cfg(Variant::CodsHofe);
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        let model = Model::new(&mut store, &mut rng, cfg.clone()).unwrap();
        let sample = tiny_samples(1, 50).remove(0);
        let image = preprocess::<f64>(&sample.image, 32, &Normalization::default(), CropMode::Center).unwrap();
        let targets = build_targets::<f64>(&sample.labels, cfg.variant, 1, 3);
        let weights = LossWeights::default();

        let eval = |store: &ParamStore<f64>| -> f64 {
            let mut tape = Tape::<f64>::new();
            let img = tape.constant(image.clone().into_dyn());
            let logits = model.forward_logits(&mut tape, store, img).unwrap();
            let (_, breakdown) = total_loss(&mut tape, &logits, &targets, &weights).unwrap();
            breakdown.total
        };

        let mut tape = Tape::<f64>::new();
        let img = tape.constant(image.clone().into_dyn());
        let logits = model.forward_logits(&mut tape, &store, img).unwrap();
        let (total, _) = total_loss(&mut tape, &logits, &targets, &weights).unwrap();
        let mut grads = tape.backward(total);
        let mut by_param: std::collections::HashMap<usize, ArrayD<f64>> = Default::default();
        for (pidx, g) in tape.param_grads(&mut grads) {
            by_param.entry(pidx).and_modify(|a| *a += &g).or_insert(g);
        }

        let eps = 1e-5;
        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        for name in [
            "hofe.left_obj.q1.weight",
            "hofe.right_obj.out_conv.weight",
            "decoder.hand.stage0.reduce.weight",
            "head.contact_boundary.proj.weight",
            "encoder.patch_embed.proj.weight",
        ] {
            let id = store.id_of(name).unwrap();
            let n = store.value(id).len();
            for _ in 0..3 {
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
