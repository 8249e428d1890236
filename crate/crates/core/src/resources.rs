//! Per-client, per-round resource accounting.
//!
//! The analytic model mirrors what a client actually does:
//!
//! * communication: the kept layers plus the active head travel down, the
//!   trainable layers plus the head travel up, 4 bytes per word;
//! * compute: matrix-product FLOPs (2 per multiply-add) of every forward
//!   product, and of every gradient product actually needed in backward.
//!   A product whose operands both require gradients costs twice its
//!   forward in backward; the stem's patch projection costs once, since
//!   raw pixels need no gradient;
//! * memory: materialized parameters, the input batch, activations the tape
//!   retains from the first trainable layer onward, and parameter
//!   gradients. Plain SGD keeps no optimizer state.
//!
//! Fractions divide a plan's quantity by the end-to-end plan's quantity for
//! the same configuration.

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::federation::RoundPlan;

pub const BYTES_PER_WORD: u64 = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub flops_forward: u64,
    pub flops_backward: u64,
    pub peak_memory_words: u64,
}

impl ResourceSample {
    /// Elementwise maximum; the per-round upper bound across clients.
    pub fn max(self, other: Self) -> Self {
        ResourceSample {
            bytes_down: self.bytes_down.max(other.bytes_down),
            bytes_up: self.bytes_up.max(other.bytes_up),
            flops_forward: self.flops_forward.max(other.flops_forward),
            flops_backward: self.flops_backward.max(other.flops_backward),
            peak_memory_words: self.peak_memory_words.max(other.peak_memory_words),
        }
    }

    pub fn comm_bytes(&self) -> u64 {
        self.bytes_down + self.bytes_up
    }

    pub fn flops(&self) -> u64 {
        self.flops_forward + self.flops_backward
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceFractions {
    pub memory_frac: f64,
    pub compute_frac: f64,
    pub comm_frac: f64,
}

/// Workload shape shared by every client in a round.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClientWork {
    pub batch_size: usize,
    pub local_steps: usize,
}

impl ClientWork {
    /// Images per forward pass (two views per example).
    fn images(&self) -> u64 {
        2 * self.batch_size as u64
    }
}

pub fn analytic_comm(plan: &RoundPlan, config: &EncoderConfig) -> (u64, u64) {
    let head = config.head_params() as u64;
    let down: u64 = plan.kept.layers().iter().map(|&l| config.layer_params(l) as u64).sum::<u64>() + head;
    let up: u64 = plan.trainable.iter().map(|&l| config.layer_params(l) as u64).sum::<u64>() + head;
    (BYTES_PER_WORD * down, BYTES_PER_WORD * up)
}

/// Forward FLOPs of one layer over `images` inputs.
pub fn layer_forward_flops(config: &EncoderConfig, layer: usize, images: u64) -> u64 {
    let (t, d, h) = (config.tokens() as u64, config.width as u64, config.mlp_hidden() as u64);
    if layer == 0 {
        2 * images * t * config.patch_dim() as u64 * d
    } else {
        images * (8 * t * d * d + 4 * t * t * d + 4 * t * d * h)
    }
}

pub fn head_forward_flops(config: &EncoderConfig, images: u64) -> u64 {
    let (d, k) = (config.width as u64, config.head_dim_out as u64);
    2 * images * (d * d + d * k)
}

/// Similarity matrix of the contrastive loss over `rows` embeddings.
pub fn loss_forward_flops(config: &EncoderConfig, rows: u64) -> u64 {
    2 * rows * rows * config.head_dim_out as u64
}

pub fn analytic_compute(plan: &RoundPlan, config: &EncoderConfig, work: ClientWork) -> (u64, u64) {
    let n = work.images();
    let shared = head_forward_flops(config, n) + loss_forward_flops(config, n);
    let fwd: u64 = plan.kept.layers().iter().map(|&l| layer_forward_flops(config, l, n)).sum::<u64>() + shared;
    let bwd: u64 = plan
        .trainable
        .iter()
        .map(|&l| {
            let f = layer_forward_flops(config, l, n);
            if l == 0 {
                f
            } else {
                2 * f
            }
        })
        .sum::<u64>()
        + 2 * shared;
    let steps = work.local_steps as u64;
    (steps * fwd, steps * bwd)
}

/// Activation words the tape retains for one trainable layer over `images`
/// inputs.
pub fn layer_retained_words(config: &EncoderConfig, layer: usize, images: u64) -> u64 {
    let (t, d, h) = (config.tokens() as u64, config.width as u64, config.mlp_hidden() as u64);
    let rows = images * t;
    if layer == 0 {
        // patch matrix kept for the weight gradient
        rows * config.patch_dim() as u64
    } else {
        // two layernorms (normalized input, output, inverse std), q, kᵀ, v,
        // attention probabilities, merged context, MLP pre- and post-GELU
        let norms = 2 * (2 * rows * d + rows);
        let attention = 3 * rows * d + images * config.heads as u64 * t * t + rows * d;
        norms + attention + 2 * rows * h
    }
}

/// Head input, pre-GELU and post-GELU hidden, normalized output and norms,
/// plus the transposed embeddings and softmax of the loss.
pub fn head_and_loss_retained_words(config: &EncoderConfig, images: u64) -> u64 {
    let (d, k) = (config.width as u64, config.head_dim_out as u64);
    3 * images * d + images * k + images + images * k + images * images
}

pub fn analytic_memory(plan: &RoundPlan, config: &EncoderConfig, work: ClientWork) -> u64 {
    let n = work.images();
    let head = config.head_params() as u64;
    let params: u64 = plan.kept.layers().iter().map(|&l| config.layer_params(l) as u64).sum::<u64>() + head;
    let grads: u64 = plan.trainable.iter().map(|&l| config.layer_params(l) as u64).sum::<u64>() + head;
    let input = n * 3 * (config.image_size * config.image_size) as u64;
    let activations: u64 = plan.trainable.iter().map(|&l| layer_retained_words(config, l, n)).sum::<u64>()
        + head_and_loss_retained_words(config, n);
    params + input + activations + grads
}

/// Analytic resources of one client in `plan`. Peak memory is the model
/// estimate.
pub fn analytic_sample(plan: &RoundPlan, config: &EncoderConfig, work: ClientWork) -> ResourceSample {
    let (bytes_down, bytes_up) = analytic_comm(plan, config);
    let (flops_forward, flops_backward) = analytic_compute(plan, config, work);
    ResourceSample {
        bytes_down,
        bytes_up,
        flops_forward,
        flops_backward,
        peak_memory_words: analytic_memory(plan, config, work),
    }
}

/// Fractions of `plan` relative to end-to-end training of the same model.
pub fn fractions(plan: &RoundPlan, config: &EncoderConfig, work: ClientWork) -> ResourceFractions {
    let ours = analytic_sample(plan, config, work);
    let baseline = analytic_sample(&RoundPlan::end_to_end(0, config.num_blocks), config, work);
    ResourceFractions {
        memory_frac: ours.peak_memory_words as f64 / baseline.peak_memory_words as f64,
        compute_frac: ours.flops() as f64 / baseline.flops() as f64,
        comm_frac: ours.comm_bytes() as f64 / baseline.comm_bytes() as f64,
    }
}

/// Uniform-cost model: `layers` layers of identical parameter, activation
/// and FLOP size, no projection head and no loss term.
#[derive(Clone, Copy, Debug)]
pub struct EqualLayerModel {
    pub layers: usize,
}

impl EqualLayerModel {
    /// Fractions for a round that materializes `kept` layers and trains one.
    pub fn fractions(&self, kept: usize) -> ResourceFractions {
        let total = self.layers as f64;
        let kept = kept as f64;
        ResourceFractions {
            // kept parameters + one layer of activations + one layer of gradients
            memory_frac: (kept + 2.0) / (3.0 * total),
            // kept forwards + a 2× backward of the active layer
            compute_frac: (kept + 2.0) / (3.0 * total),
            comm_frac: (kept + 1.0) / (2.0 * total),
        }
    }

    /// Per-phase fractions of layer-wise training; `budget` 0 disables
    /// depth dropout.
    pub fn schedule(&self, budget: usize) -> Vec<ResourceFractions> {
        (0..self.layers)
            .map(|phase| {
                let grown = phase + 1;
                let kept = if budget > 0 { grown.min(budget) } else { grown };
                self.fractions(kept)
            })
            .collect()
    }
}
