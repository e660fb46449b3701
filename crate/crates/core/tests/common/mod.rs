//! Shared oracles for the integration tests.

#![allow(dead_code)]

use convqg_core::auxiliary::Auxiliary;
use convqg_core::model::{ModelConfig, ParamStore, Session};
use convqg_core::objective::{self, LossConfig, PreparedExample};
use convqg_core::toyworld::{generate_world, Example, DEFAULT_GRID, PATCH_DIM};
use convqg_core::train::build_vocab;
use convqg_grad::Tensor;

/// Four training examples of a seeded world with a vocabulary built from them.
pub fn tiny_batch(seed: u64, d_model: usize, d_ff: usize, d_sent: usize) -> (ModelConfig, Vec<Example>, Vec<PreparedExample>) {
    let world = generate_world(seed, 10, 12).unwrap();
    let examples: Vec<Example> = world.into_iter().take(4).collect();
    let vocab = build_vocab(&examples).unwrap();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        d_in: PATCH_DIM,
        max_patches: DEFAULT_GRID * DEFAULT_GRID,
        d_model,
        n_layers: 1,
        n_heads: 2,
        d_ff,
        max_len: 32,
        d_sent,
        dropout: 0.0,
    };
    let aux = Auxiliary::hashed(d_sent, seed).unwrap();
    let prepared = objective::prepare(&examples, &vocab, &aux, &cfg).unwrap();
    (cfg, examples, prepared)
}

/// Where a perturbed parameter first enters the forward pass.
#[derive(Copy, Clone, PartialEq, Eq, Debug)]
pub enum Stage {
    Image,
    Text,
    Decoder,
}

pub fn stage_of(name: &str) -> Stage {
    if name.starts_with("img.") {
        Stage::Image
    } else if name.starts_with("txt.") || name == "tok.emb" {
        Stage::Text
    } else {
        Stage::Decoder
    }
}

/// Mean batch loss recomputed from `stage` on, with earlier encoder outputs
/// taken from `cache` (computed at the unperturbed parameters).
pub fn staged_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    batch: &[PreparedExample],
    loss: &LossConfig,
    beta: f64,
    stage: Stage,
    cache: &[(Tensor<f64>, Tensor<f64>)],
) -> f64 {
    let mut sum = 0.0;
    for (ex, (e_i, e_it)) in batch.iter().zip(cache) {
        let mut s = Session::new(cfg, params, false);
        let (total, _) = match stage {
            Stage::Image => objective::example_loss(&mut s, ex, loss, beta).unwrap(),
            Stage::Text => {
                let e_i = s.graph.constant(e_i.clone());
                let e_it = s.encode_text(&ex.constraint_ids, e_i).unwrap();
                objective::joint_loss(&mut s, e_it, ex, loss, beta).unwrap()
            }
            Stage::Decoder => {
                let e_it = s.graph.constant(e_it.clone());
                objective::joint_loss(&mut s, e_it, ex, loss, beta).unwrap()
            }
        };
        sum += s.graph.value(total).item();
    }
    sum / batch.len() as f64
}

pub fn encoder_cache(cfg: &ModelConfig, params: &ParamStore<f64>, batch: &[PreparedExample]) -> Vec<(Tensor<f64>, Tensor<f64>)> {
    batch
        .iter()
        .map(|ex| {
            let mut s = Session::new(cfg, params, false);
            let e_i = s.encode_image(&ex.patches).unwrap();
            let e_it = s.encode_text(&ex.constraint_ids, e_i).unwrap();
            (s.graph.value(e_i).clone(), s.graph.value(e_it).clone())
        })
        .collect()
}

/// One parameter's analytic and central-difference derivative.
pub struct GradPair {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Central differences with step `h` on every scalar of every parameter,
/// against the reverse-mode gradient of the same batch loss.
pub fn full_gradient_check(
    cfg: &ModelConfig,
    params: &mut ParamStore<f64>,
    batch: &[PreparedExample],
    loss: &LossConfig,
    epoch: usize,
    h: f64,
) -> Vec<GradPair> {
    let refs: Vec<&PreparedExample> = batch.iter().collect();
    let (_, grads) = objective::batch_loss(cfg, params, &refs, loss, epoch, true).unwrap();
    let grads = grads.unwrap();
    let beta = loss.beta.at(epoch);
    let cache = encoder_cache(cfg, params, batch);
    let mut out = Vec::with_capacity(params.scalar_count());
    for p in 0..params.len() {
        let name = params.names()[p].clone();
        let stage = stage_of(&name);
        for j in 0..params.tensors()[p].len() {
            let orig = params.tensors()[p].data()[j];
            params.tensors_mut()[p].data_mut()[j] = orig + h;
            let up = staged_loss(cfg, params, batch, loss, beta, stage, &cache);
            params.tensors_mut()[p].data_mut()[j] = orig - h;
            let down = staged_loss(cfg, params, batch, loss, beta, stage, &cache);
            params.tensors_mut()[p].data_mut()[j] = orig;
            out.push(GradPair { name: name.clone(), index: j, analytic: grads[p].data()[j], numeric: (up - down) / (2.0 * h) });
        }
    }
    out
}
