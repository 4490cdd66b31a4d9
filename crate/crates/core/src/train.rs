//! Source-domain pretraining of the toy network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{dice, mean};
use crate::nn::{BnMode, Model};
use crate::synth::SyntheticSample;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            learning_rate: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train_dice: f64,
}

/// Stacks `[1, C, H, W]` tensors into `[N, C, H, W]`.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| config("cannot stack zero tensors"))?;
    let mut dims = first.dims().to_vec();
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.dims() != first.dims() {
            return Err(crate::error::shape(format!("stack {:?} with {:?}", first.dims(), t.dims())));
        }
        data.extend_from_slice(t.data());
    }
    dims[0] *= items.len();
    Tensor::new(&dims, data)
}

/// Soft Dice loss plus mean binary cross-entropy.
pub fn segmentation_loss(g: &mut Graph, logits: Var, probs: Var, mask: &Tensor) -> Var {
    let m = g.constant(mask.clone());
    let pm = g.mul(probs, m);
    let inter = g.sum(pm);
    let sp = g.sum(probs);
    let num = g.scale(inter, 2.0);
    let num = g.add_scalar(num, 1.0);
    let den = g.add_scalar(sp, mask.sum() + 1.0);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    let dice_loss = g.add_scalar(neg, 1.0);
    let bce = g.bce_with_logits(logits, mask);
    let bce = g.mean(bce);
    g.add(dice_loss, bce)
}

/// Minibatch SGD on the source data, updating BN running statistics with
/// every batch.
pub fn pretrain_source(model: &mut Model, data: &[SyntheticSample], cfg: &TrainConfig) -> Result<TrainReport> {
    if data.is_empty() || cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(config("pretraining needs data, a batch size and epochs"));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(config(format!("learning rate {} must be positive", cfg.learning_rate)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let images = stack(&batch.iter().map(|&i| &data[i].image).collect::<Vec<_>>())?;
            let masks = stack(&batch.iter().map(|&i| &data[i].mask).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let x = g.constant(images);
            let pass = model.forward(&mut g, x, BnMode::Train, true)?;
            let loss = segmentation_loss(&mut g, pass.logits, pass.probs, &masks);
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged(format!("pretraining loss became {lv}")));
            }
            losses.push(lv);
            let grads = g.backward(loss)?;
            model.update_running_stats(&g, &pass);
            for (p, v) in model.parameters_mut().into_iter().zip(&pass.params) {
                let gr = grads.wrt(*v);
                for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                    *w -= cfg.learning_rate * d;
                }
            }
        }
        epoch_losses.push(mean(&losses));
    }
    let train_dice = evaluate(model, data)?;
    Ok(TrainReport {
        epoch_losses,
        train_dice,
    })
}

/// Mean frozen-eval Dice.
pub fn evaluate(model: &Model, data: &[SyntheticSample]) -> Result<f64> {
    let scores = data
        .iter()
        .map(|s| dice(&model.predict(&s.image)?, &s.mask))
        .collect::<Result<Vec<_>>>()?;
    Ok(mean(&scores))
}
