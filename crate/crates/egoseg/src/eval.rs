//! End-to-end evaluation and the ablation runner.

use crate::error::Result;
use crate::metrics::{EvalReport, ScoreAccumulator};
use crate::model::{Model, ModelConfig, Variant};
use crate::nn::ParamStore;
use crate::synth::{crop_labels, preprocess, CropMode, Normalization, SamplePair};
use crate::train::{train, LossWeights, ScheduleConfig, TrainConfig, TrainResult};
use rayon::prelude::*;

/// Center-crops, normalizes, and runs full inference on one sample.
pub fn infer_sample(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &SamplePair,
    crop: usize,
    norm: &Normalization,
) -> Result<(crate::cods::FinalMasks, crate::mask::LabelRaster)> {
    let image = preprocess::<f32>(&sample.image, crop, norm, CropMode::Center)?;
    let labels = crop_labels(&sample.labels, crop, CropMode::Center)?;
    let masks = model.infer(store, &image)?;
    Ok((masks, labels))
}

/// Scores a whole split with dataset-level confusion accumulation.
pub fn evaluate_samples(
    model: &Model,
    store: &ParamStore<f32>,
    samples: &[SamplePair],
    crop: usize,
    norm: &Normalization,
    config_hash: &str,
) -> Result<EvalReport> {
    let partials: Vec<Result<ScoreAccumulator>> = samples
        .par_iter()
        .map(|sample| {
            let (masks, labels) = infer_sample(model, store, sample, crop, norm)?;
            let mut acc = ScoreAccumulator::new();
            acc.add(&masks, &labels)?;
            Ok(acc)
        })
        .collect();
    let mut total = ScoreAccumulator::new();
    for partial in partials {
        total.merge(&partial?);
    }
    Ok(total.report(config_hash))
}

/// One ablation result.
pub struct AblationRow {
    pub variant: Variant,
    pub untrained_miou: f64,
    pub best_val_miou: f64,
    pub report: EvalReport,
}

/// Trains each variant with identical data order and budget, evaluates the
/// best parameters on the held-out set, and returns rows in input order.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    base: &ModelConfig,
    sched: &ScheduleConfig,
    weights: &LossWeights,
    tcfg: &TrainConfig,
    variants: &[Variant],
    train_set: &[SamplePair],
    val_set: &[SamplePair],
    test_set: &[SamplePair],
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(variants.len());
    for &variant in variants {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let result = train(&cfg, sched, weights, tcfg, train_set, val_set, None)?;
        let report = evaluate_best(&result, test_set, tcfg, &format!("ablate.{}", variant.key()))?;
        rows.push(AblationRow {
            variant,
            untrained_miou: result.untrained_val_miou,
            best_val_miou: result.best_val_miou,
            report,
        });
    }
    Ok(rows)
}

/// Loads the best-by-validation parameters into the trained model and
/// scores a split.
pub fn evaluate_best(
    result: &TrainResult,
    split: &[SamplePair],
    tcfg: &TrainConfig,
    config_hash: &str,
) -> Result<EvalReport> {
    let mut store = result.store.clone();
    store.load_entries(result.best_params.clone())?;
    evaluate_samples(
        &result.model,
        &store,
        split,
        tcfg.crop,
        &tcfg.normalization,
        config_hash,
    )
}

/// Renders ablation rows as an aligned text table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>10} {:>10} {:>10}\n",
        "variant", "untrained", "best_val", "test_miou"
    ));
    for row in rows {
        out.push_str(&format!(
            "{:<12} {:>10.4} {:>10.4} {:>10.4}\n",
            row.variant.key(),
            row.untrained_miou,
            row.best_val_miou,
            row.report.miou
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::SetOp;
    use crate::synth::{generate_scene, SceneSpec, TouchConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.image_size = 32;
        cfg.encoder.embed_dim = 8;
        cfg.encoder.depths = vec![1, 1];
        cfg.encoder.heads = vec![1, 2];
        cfg.encoder.bottleneck_depth = 1;
        cfg.encoder.block_kind = crate::nn::BlockKind::Conv;
        cfg.decoder_depths = vec![1];
        cfg
    }

    fn samples(n: usize, seed: u64) -> Vec<SamplePair> {
        (0..n)
            .map(|i| {
                generate_scene(&SceneSpec {
                    rng_seed: seed + i as u64,
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
    fn evaluation_is_deterministic_and_masks_stay_disjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let model = crate::model::Model::new(&mut store, &mut rng, tiny_cfg()).unwrap();
        let split = samples(4, 10);
        let norm = Normalization::default();
        let r1 = evaluate_samples(&model, &store, &split, 32, &norm, "t").unwrap();
        let r2 = evaluate_samples(&model, &store, &split, 32, &norm, "t").unwrap();
        assert_eq!(serde_json::to_string(&r1).unwrap(), serde_json::to_string(&r2).unwrap());
        assert_eq!(r1.n_images, 4);

        for sample in &split {
            let (masks, _) = infer_sample(&model, &store, sample, 32, &norm).unwrap();
            let inter =
                crate::mask::binary_set_op(&masks.m_o_l, &masks.m_o_r, SetOp::Intersection).unwrap();
            assert!(inter.is_empty());
        }
    }
}
