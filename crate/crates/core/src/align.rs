//! Warm-up schedule, statistics fusion and the batch-norm statistics
//! alignment loss.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ForwardPass, Layer, Model};
use crate::tensor::Tensor;

/// `λ(i, τ) = 1 / (√i / τ + 1)` for stream index `i ≥ 1`.
pub fn warmup_lambda(i: u64, tau: f64) -> Result<f64> {
    if i < 1 {
        return Err(config("stream index starts at 1"));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(config(format!("tau must be positive, got {tau}")));
    }
    Ok(1.0 / ((i as f64).sqrt() / tau + 1.0))
}

/// `(λ·μ_t + (1 − λ)·μ_s, λ·σ_t + (1 − λ)·σ_s)` per channel.
pub fn fuse_statistics(
    mu_s: &Tensor,
    sigma_s: &Tensor,
    mu_t: &Tensor,
    sigma_t: &Tensor,
    lambda: f64,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(config(format!("lambda {lambda} outside [0, 1]")));
    }
    let mu = mu_t.zip_map(mu_s, |t, s| lambda * t + (1.0 - lambda) * s)?;
    let sigma = sigma_t.zip_map(sigma_s, |t, s| lambda * t + (1.0 - lambda) * s)?;
    Ok((mu, sigma))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// `|μ_s − μ_t| + |σ_s − σ_t|`
    Source,
    /// `|μ_w − μ_t| + |σ_w − σ_t|`
    Warmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossScope {
    All,
    EncoderOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    /// Channel-summed term of every contributing layer, in network order.
    pub layer_terms: Vec<f64>,
    pub layer_count: usize,
    pub total: f64,
    pub lambda: f64,
}

/// Builds the alignment loss over the batch-norm layers flagged `in_loss`.
/// The total is the mean of the per-layer terms.
pub fn alignment_loss(g: &mut Graph, pass: &ForwardPass, mode: LossMode) -> Result<(Var, AlignmentReport)> {
    if pass.graph_id != g.id() {
        return Err(Error::Contract(
            "stale statistics: forward pass was recorded on another graph".into(),
        ));
    }
    let mut terms = Vec::new();
    let mut term_values = Vec::new();
    let mut lambda = 0.0;
    for rec in pass.bn.iter().filter(|r| r.in_loss) {
        let trace = rec.trace.ok_or_else(|| {
            Error::Contract(format!(
                "layer {} holds no target statistics; run an adapt-mode forward first",
                rec.layer
            ))
        })?;
        lambda = trace.lambda;
        let (ref_mu, ref_sigma) = match mode {
            LossMode::Warmup => (trace.mu_w, trace.sigma_w),
            LossMode::Source => (g.constant(rec.mu_s.clone()), g.constant(rec.sigma_s.clone())),
        };
        let dm = g.sub(ref_mu, trace.mu_t);
        let dm = g.abs(dm);
        let dm = g.sum(dm);
        let ds = g.sub(ref_sigma, trace.sigma_t);
        let ds = g.abs(ds);
        let ds = g.sum(ds);
        let term = g.add(dm, ds);
        term_values.push(g.value(term).item());
        terms.push(term);
    }
    let Some((&first, rest)) = terms.split_first() else {
        return Err(config("no batch-norm layer contributes to the alignment loss"));
    };
    let total = rest.iter().fold(first, |acc, &t| g.add(acc, t));
    let total = g.scale(total, 1.0 / terms.len() as f64);
    let report = AlignmentReport {
        layer_count: terms.len(),
        total: g.value(total).item(),
        layer_terms: term_values,
        lambda,
    };
    Ok((total, report))
}

/// Flags which batch-norm layers contribute to the loss. Normalization is
/// unaffected: every layer still uses the mode chosen for the forward.
pub fn select_loss_layers(model: &mut Model, scope: LossScope) -> Result<()> {
    let boundary = match scope {
        LossScope::All => usize::MAX,
        LossScope::EncoderOnly => model
            .encoder_end
            .ok_or_else(|| config("encoder-only loss needs an encoder/decoder boundary"))?,
    };
    for (idx, layer) in model.layers.iter_mut().enumerate() {
        if let Layer::BatchNorm(bn) = layer {
            bn.in_loss = idx < boundary;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BnMode, NormStats};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::toy(3, &mut rng);
        for bn in m.batch_norms_mut() {
            let c = bn.channels();
            bn.running_mean = Tensor::randn(&[c], 0.5, &mut rng);
            bn.running_var = Tensor::uniform(&[c], 0.2, 2.0, &mut rng);
        }
        m
    }

    #[test]
    fn lambda_values() {
        assert_abs_diff_eq!(warmup_lambda(1, 5.0).unwrap(), 5.0 / 6.0, epsilon = 1e-12);
        assert_abs_diff_eq!(warmup_lambda(25, 5.0).unwrap(), 0.5, epsilon = 1e-12);
        assert!(warmup_lambda(u64::MAX, 5.0).unwrap() < 2e-9);
        assert!(warmup_lambda(0, 5.0).is_err());
        assert!(warmup_lambda(3, 0.0).is_err());
        assert!(warmup_lambda(3, -1.0).is_err());
    }

    #[test]
    fn lambda_strictly_decreasing() {
        for tau in [0.1, 1.0, 5.0, 100.0] {
            let mut prev = warmup_lambda(1, tau).unwrap();
            for i in 2..2000 {
                let l = warmup_lambda(i, tau).unwrap();
                assert!(l < prev && l > 0.0 && l < 1.0);
                prev = l;
            }
        }
    }

    #[test]
    fn fusion_endpoints_and_midpoint() {
        let (ms, ss) = (Tensor::scalar(0.0), Tensor::scalar(1.0));
        let (mt, st) = (Tensor::scalar(2.0), Tensor::scalar(3.0));
        assert_eq!(fuse_statistics(&ms, &ss, &mt, &st, 0.0).unwrap(), (ms.clone(), ss.clone()));
        assert_eq!(fuse_statistics(&ms, &ss, &mt, &st, 1.0).unwrap(), (mt.clone(), st.clone()));
        let (mw, sw) = fuse_statistics(&ms, &ss, &mt, &st, 0.5).unwrap();
        assert_eq!((mw.item(), sw.item()), (1.0, 2.0));
        assert!(fuse_statistics(&ms, &ss, &mt, &st, 1.1).is_err());
    }

    fn adapt_pass(m: &Model, x: &Tensor, lambda: f64) -> (Graph, ForwardPass) {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let mode = BnMode::Adapt {
            lambda,
            normalize: NormStats::Warmup,
        };
        let p = m.forward(&mut g, xv, mode, false).unwrap();
        (g, p)
    }

    #[test]
    fn single_layer_warmup_term() {
        // One channel, μ-gap 0.5, σ-gap 0.25: warm-up term is (1−λ)·0.75.
        let lambda = 0.3;
        let mut g = Graph::new();
        let mu_t = g.constant(Tensor::scalar(1.5));
        let sigma_t = g.constant(Tensor::scalar(1.25));
        let (mu_w, sigma_w) = fuse_statistics(
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.0),
            &Tensor::scalar(1.5),
            &Tensor::scalar(1.25),
            lambda,
        )
        .unwrap();
        let dm = (mu_w.item() - g.value(mu_t).item()).abs();
        let ds = (sigma_w.item() - g.value(sigma_t).item()).abs();
        assert_abs_diff_eq!(dm + ds, (1.0 - lambda) * 0.75, epsilon = 1e-12);
    }

    #[test]
    fn first_layer_scaling_identity() {
        let m = model(1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for lambda in [0.0, 0.2, 5.0 / 6.0, 1.0] {
            let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut rng);
            let (mut g, p) = adapt_pass(&m, &x, lambda);
            let (_, warm) = alignment_loss(&mut g, &p, LossMode::Warmup).unwrap();
            let (_, src) = alignment_loss(&mut g, &p, LossMode::Source).unwrap();
            assert_abs_diff_eq!(
                warm.layer_terms[0],
                (1.0 - lambda) * src.layer_terms[0],
                epsilon = 1e-12
            );
            assert_eq!(warm.layer_count, 4);
            assert!(warm.layer_terms.iter().all(|&t| t >= 0.0));
        }
    }

    #[test]
    fn zero_when_statistics_match() {
        // With λ = 1 the warm-up statistics are the target statistics.
        let m = model(3);
        let x = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let (mut g, p) = adapt_pass(&m, &x, 1.0);
        let (_, r) = alignment_loss(&mut g, &p, LossMode::Warmup).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn total_is_mean_of_terms() {
        let m = model(5);
        let x = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(6));
        let (mut g, p) = adapt_pass(&m, &x, 0.4);
        let (_, r) = alignment_loss(&mut g, &p, LossMode::Source).unwrap();
        let mean = r.layer_terms.iter().sum::<f64>() / r.layer_terms.len() as f64;
        assert_abs_diff_eq!(r.total, mean, epsilon = 1e-12);
        let two = [1.0f64, 3.0];
        assert_eq!(two.iter().sum::<f64>() / 2.0, 2.0);
    }

    #[test]
    fn stale_or_missing_statistics_rejected() {
        let m = model(7);
        let x = Tensor::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let (_, p) = adapt_pass(&m, &x, 0.5);
        let mut other = Graph::new();
        assert!(matches!(
            alignment_loss(&mut other, &p, LossMode::Warmup),
            Err(Error::Contract(_))
        ));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let eval = m.forward(&mut g, xv, BnMode::Eval, false).unwrap();
        assert!(matches!(
            alignment_loss(&mut g, &eval, LossMode::Source),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn scope_changes_loss_not_activations() {
        let mut m = model(9);
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(10));
        select_loss_layers(&mut m, LossScope::All).unwrap();
        let (mut g, p) = adapt_pass(&m, &x, 0.5);
        let (_, all) = alignment_loss(&mut g, &p, LossMode::Warmup).unwrap();
        let out_all = g.value(p.probs).clone();
        select_loss_layers(&mut m, LossScope::EncoderOnly).unwrap();
        let (mut g, p) = adapt_pass(&m, &x, 0.5);
        let (_, enc) = alignment_loss(&mut g, &p, LossMode::Warmup).unwrap();
        assert_eq!(all.layer_count, 4);
        assert_eq!(enc.layer_count, 3);
        assert_ne!(all.total, enc.total);
        assert_eq!(&out_all, g.value(p.probs));
        m.encoder_end = None;
        assert!(select_loss_layers(&mut m, LossScope::EncoderOnly).is_err());
    }
}
