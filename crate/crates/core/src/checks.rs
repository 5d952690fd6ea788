//! Finite-difference suite over every registered operator and the full
//! training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::losses::{self, LossWeights};
use crate::model::{Cblnet, EncoderConfig, ModelParams};
use crate::tensor::gradcheck::{check_op, grad_check_with_fault, DEFAULT_EPS};
use crate::tensor::{OpKind, Tensor};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const PIPELINE_TOLERANCE: f64 = 1e-4;
/// Random cases per operator.
pub const OP_SEEDS: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub components: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Worst relative error per operator over [`OP_SEEDS`] random cases.
pub fn check_ops(fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    OpKind::DIFFERENTIABLE
        .iter()
        .map(|&kind| {
            let mut worst = 0.0f64;
            let mut components = 0;
            for seed in 0..OP_SEEDS {
                let r = check_op(kind, seed, fault)?;
                worst = worst.max(r.max_rel_error);
                components += r.components;
            }
            Ok(CheckReport {
                name: kind.name().to_string(),
                max_rel_error: worst,
                tolerance: OP_TOLERANCE,
                components,
            })
        })
        .collect()
}

/// Toy network used by the pipeline check.
pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig {
        image_size: 8,
        in_channels: 3,
        backbone_widths: vec![3],
        channels: 4,
        height: 2,
        width: 2,
        heads: 2,
        head_hidden: vec![4, 3],
    }
}

/// Initialized parameters shifted by uniform noise so no pre-activation
/// sits on a relu kink.
pub fn jittered_params(model: &Cblnet, seed: u64) -> ModelParams {
    let mut params = model.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5);
    for (_, t) in params.entries.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    params
}

/// Four-sample batch whose targets yield positive and negative pairs on
/// every boundary at the default thresholds.
pub fn toy_batch(seed: u64) -> (Vec<Tensor>, Vec<[f64; 4]>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..4)
        .map(|_| {
            let data = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
            Tensor::new(vec![3, 8, 8], data).expect("static shape")
        })
        .collect();
    let targets = vec![
        [0.05, 0.10, 0.08, 0.12],
        [0.07, 0.13, 0.10, 0.15],
        [0.90, 0.95, 0.88, 0.93],
        [0.50, 0.55, 0.45, 0.50],
    ];
    (images, targets)
}

/// ℓ1 plus weighted alignment and uniformity through the whole network,
/// checked against every parameter.
pub fn check_pipeline(seed: u64, fault: Option<OpKind>) -> Result<CheckReport> {
    let model = Cblnet::new(toy_encoder())?;
    let params = jittered_params(&model, seed);
    let (images, targets) = toy_batch(seed);
    let weights = LossWeights::default();
    let tensors: Vec<Tensor> = params.entries.iter().map(|(_, t)| t.clone()).collect();
    let refs: Vec<&Tensor> = images.iter().collect();
    let r = grad_check_with_fault::<_, Error>(
        |tape, vars| {
            let x = model.batch_images(tape, &refs)?;
            let out = model.forward(tape, vars, x)?;
            Ok(losses::total_loss(tape, out.pred, &targets, &out.pooled, &weights)?.total)
        },
        &tensors,
        DEFAULT_EPS,
        fault,
    )?;
    Ok(CheckReport {
        name: "pipeline".to_string(),
        max_rel_error: r.max_rel_error,
        tolerance: PIPELINE_TOLERANCE,
        components: r.components,
    })
}

/// Every operator followed by the pipeline.
pub fn run_suite(fault: Option<OpKind>) -> Result<Vec<CheckReport>> {
    let mut out = check_ops(fault)?;
    out.push(check_pipeline(0, fault)?);
    Ok(out)
}
