//! Layers of the frozen segmentation network and batch normalization with
//! source, training and warm-up statistics.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// How batch normalization layers pick the statistics they normalize with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BnMode {
    /// Batch statistics; running statistics are updated by the caller.
    Train,
    /// Stored source statistics only.
    Eval,
    /// Computes target statistics of the current features, fuses them with
    /// the source statistics using `lambda`, and normalizes with either the
    /// fused warm-up statistics or the source statistics.
    Adapt { lambda: f64, normalize: NormStats },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStats {
    Warmup,
    Source,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub eps: f64,
    #[serde(default = "default_true")]
    pub in_loss: bool,
}

fn default_true() -> bool {
    true
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            in_loss: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Source standard deviation `sqrt(running_var + eps)`.
    pub fn sigma_s(&self) -> Tensor {
        self.running_var.map(|v| (v + self.eps).sqrt())
    }

    /// Normalizes `x` (`[N, C, H, W]`). `gamma`/`beta` are the affine
    /// parameters already registered on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
    ) -> Result<BnOutput> {
        let dims = g.dims(x).to_vec();
        if dims.len() != 4 || dims[1] != self.channels() {
            return Err(config(format!(
                "batch norm over {} channels got input {dims:?}",
                self.channels()
            )));
        }
        let sigma_s = self.sigma_s();
        let (norm_mean, norm_std, stats) = match mode {
            BnMode::Eval => {
                let m = g.constant(self.running_mean.clone());
                let s = g.constant(sigma_s);
                (m, s, None)
            }
            BnMode::Train => {
                let (mu, sigma, var) = batch_stats(g, x, self.eps);
                (mu, sigma, Some((mu, sigma, var)))
            }
            BnMode::Adapt { lambda, normalize } => {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(config(format!("lambda {lambda} outside [0, 1]")));
                }
                let (mu_t, sigma_t, var) = batch_stats(g, x, self.eps);
                let (mu_w, sigma_w) =
                    fuse_on_graph(g, &self.running_mean, &sigma_s, mu_t, sigma_t, lambda);
                let (nm, ns) = match normalize {
                    NormStats::Warmup => (mu_w, sigma_w),
                    NormStats::Source => (
                        g.constant(self.running_mean.clone()),
                        g.constant(sigma_s.clone()),
                    ),
                };
                let trace = StatsTrace {
                    mu_t,
                    sigma_t,
                    mu_w,
                    sigma_w,
                    lambda,
                };
                return Ok(BnOutput {
                    out: self.normalize(g, x, nm, ns, gamma, beta),
                    batch_mean: None,
                    batch_var: Some(var),
                    trace: Some(trace),
                });
            }
        };
        Ok(BnOutput {
            out: self.normalize(g, x, norm_mean, norm_std, gamma, beta),
            batch_mean: stats.map(|(m, _, _)| m),
            batch_var: stats.map(|(_, _, v)| v),
            trace: None,
        })
    }

    fn normalize(&self, g: &mut Graph, x: Var, mean: Var, std: Var, gamma: Var, beta: Var) -> Var {
        let dims = g.dims(x).to_vec();
        let m = g.channel_expand(mean, &dims);
        let s = g.channel_expand(std, &dims);
        let centered = g.sub(x, m);
        let normed = g.div(centered, s);
        let ga = g.channel_expand(gamma, &dims);
        let be = g.channel_expand(beta, &dims);
        let scaled = g.mul(normed, ga);
        g.add(scaled, be)
    }
}

/// Per-channel mean, `sqrt(var + eps)` and biased variance over N·H·W.
fn batch_stats(g: &mut Graph, x: Var, eps: f64) -> (Var, Var, Var) {
    let dims = g.dims(x).to_vec();
    let mu = g.channel_mean(x);
    let mb = g.channel_expand(mu, &dims);
    let d = g.sub(x, mb);
    let sq = g.square(d);
    let var = g.channel_mean(sq);
    let ve = g.add_scalar(var, eps);
    let sigma = g.sqrt(ve);
    (mu, sigma, var)
}

/// `λ·t + (1 − λ)·s` for means and standard deviations, on the tape.
fn fuse_on_graph(
    g: &mut Graph,
    mu_s: &Tensor,
    sigma_s: &Tensor,
    mu_t: Var,
    sigma_t: Var,
    lambda: f64,
) -> (Var, Var) {
    let ms = g.constant(mu_s.map(|v| (1.0 - lambda) * v));
    let ss = g.constant(sigma_s.map(|v| (1.0 - lambda) * v));
    let mt = g.scale(mu_t, lambda);
    let st = g.scale(sigma_t, lambda);
    (g.add(mt, ms), g.add(st, ss))
}

/// Target and warm-up statistics recorded by an adapt-mode forward.
#[derive(Debug, Clone, Copy)]
pub struct StatsTrace {
    pub mu_t: Var,
    pub sigma_t: Var,
    pub mu_w: Var,
    pub sigma_w: Var,
    pub lambda: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct BnOutput {
    pub out: Var,
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
    pub trace: Option<StatsTrace>,
}

/// Snapshot of one batch-norm layer after an adapt-mode forward.
#[derive(Debug, Clone, PartialEq)]
pub struct BnLayerState {
    pub channels: usize,
    pub mu_s: Tensor,
    pub sigma_s: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
    pub mu_t: Tensor,
    pub sigma_t: Tensor,
    pub mu_w: Tensor,
    pub sigma_w: Tensor,
    pub in_loss: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layer {
    Conv {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        pad: usize,
    },
    BatchNorm(BatchNorm),
    Relu,
    Upsample2x,
    Sigmoid,
}

/// Statistics recorded for one batch-norm layer in a forward pass.
#[derive(Debug, Clone)]
pub struct BnRecord {
    pub layer: usize,
    pub in_loss: bool,
    pub mu_s: Tensor,
    pub sigma_s: Tensor,
    pub trace: Option<StatsTrace>,
    pub batch_mean: Option<Var>,
    pub batch_var: Option<Var>,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub graph_id: u64,
    pub logits: Var,
    pub probs: Var,
    pub bn: Vec<BnRecord>,
    /// Parameter variables in [`Model::parameters`] order, when registered
    /// as trainable.
    pub params: Vec<Var>,
}

impl ForwardPass {
    pub fn bn_states(&self, g: &Graph, model: &Model) -> Vec<BnLayerState> {
        self.bn
            .iter()
            .filter_map(|rec| {
                let Layer::BatchNorm(bn) = &model.layers[rec.layer] else {
                    return None;
                };
                let t = rec.trace?;
                Some(BnLayerState {
                    channels: bn.channels(),
                    mu_s: rec.mu_s.clone(),
                    sigma_s: rec.sigma_s.clone(),
                    gamma: bn.gamma.clone(),
                    beta: bn.beta.clone(),
                    eps: bn.eps,
                    mu_t: g.value(t.mu_t).clone(),
                    sigma_t: g.value(t.sigma_t).clone(),
                    mu_w: g.value(t.mu_w).clone(),
                    sigma_w: g.value(t.sigma_w).clone(),
                    in_loss: rec.in_loss,
                })
            })
            .collect()
    }
}

/// A sequential segmentation network with an optional encoder/decoder
/// boundary (index of the first decoder layer).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub encoder_end: Option<usize>,
    pub in_channels: usize,
}

fn kaiming<R: Rng + ?Sized>(cout: usize, cin: usize, k: usize, rng: &mut R) -> Layer {
    let fan_in = (cin * k * k) as f64;
    Layer::Conv {
        weight: Tensor::randn(&[cout, cin, k, k], (2.0 / fan_in).sqrt(), rng),
        bias: Tensor::zeros(&[cout]),
        stride: 1,
        pad: k / 2,
    }
}

fn strided(layer: Layer, s: usize) -> Layer {
    match layer {
        Layer::Conv {
            weight, bias, pad, ..
        } => Layer::Conv {
            weight,
            bias,
            stride: s,
            pad,
        },
        other => other,
    }
}

impl Model {
    /// The desk-scale network: three conv/BN/ReLU encoder blocks (the second
    /// strided), nearest ×2 upsampling, one decoder conv/BN/ReLU block and a
    /// 1×1 sigmoid head.
    pub fn toy<R: Rng + ?Sized>(in_channels: usize, rng: &mut R) -> Self {
        let layers = vec![
            kaiming(8, in_channels, 3, rng),
            Layer::BatchNorm(BatchNorm::new(8)),
            Layer::Relu,
            strided(kaiming(16, 8, 3, rng), 2),
            Layer::BatchNorm(BatchNorm::new(16)),
            Layer::Relu,
            kaiming(16, 16, 3, rng),
            Layer::BatchNorm(BatchNorm::new(16)),
            Layer::Relu,
            Layer::Upsample2x,
            kaiming(8, 16, 3, rng),
            Layer::BatchNorm(BatchNorm::new(8)),
            Layer::Relu,
            kaiming(1, 8, 1, rng),
            Layer::Sigmoid,
        ];
        Self {
            layers,
            encoder_end: Some(9),
            in_channels,
        }
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(bn) => Some(bn),
            _ => None,
        })
    }

    /// Trainable tensors: conv weight and bias, BN gamma and beta, in layer order.
    pub fn parameters(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias, .. } => vec![weight, bias],
                Layer::BatchNorm(bn) => vec![&bn.gamma, &bn.beta],
                _ => vec![],
            })
            .collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                Layer::Conv { weight, bias, .. } => vec![weight, bias],
                Layer::BatchNorm(bn) => vec![&mut bn.gamma, &mut bn.beta],
                _ => vec![],
            })
            .collect()
    }

    /// SHA-256 over every parameter and running statistic, in layer order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for layer in &self.layers {
            let tensors: Vec<&Tensor> = match layer {
                Layer::Conv { weight, bias, .. } => vec![weight, bias],
                Layer::BatchNorm(bn) => {
                    h.update(bn.eps.to_le_bytes());
                    vec![&bn.gamma, &bn.beta, &bn.running_mean, &bn.running_var]
                }
                _ => vec![],
            };
            for t in tensors {
                for x in t.data() {
                    h.update(x.to_le_bytes());
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate_input(&self, dims: &[usize]) -> Result<()> {
        match dims {
            [_, c, h, w] if *c == self.in_channels && h % 2 == 0 && w % 2 == 0 && *h > 0 && *w > 0 => {
                Ok(())
            }
            _ => Err(config(format!(
                "model expects [N, {}, H, W] with even H, W; got {dims:?}",
                self.in_channels
            ))),
        }
    }

    /// Runs the network. With `trainable`, parameters are registered as
    /// gradient leaves and returned in [`ForwardPass::params`]; otherwise
    /// they enter the tape as constants.
    pub fn forward(&self, g: &mut Graph, x: Var, mode: BnMode, trainable: bool) -> Result<ForwardPass> {
        self.validate_input(g.dims(x))?;
        let mut h = x;
        let mut logits = None;
        let mut bn_records = Vec::new();
        let mut params = Vec::new();
        let leaf = |g: &mut Graph, t: &Tensor, params: &mut Vec<Var>| {
            if trainable {
                let v = g.param(t.clone());
                params.push(v);
                v
            } else {
                g.constant(t.clone())
            }
        };
        for (idx, layer) in self.layers.iter().enumerate() {
            h = match layer {
                Layer::Conv {
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let cin = g.dims(h)[1];
                    if weight.dims()[1] != cin {
                        return Err(config(format!(
                            "layer {idx}: conv expects {} input channels, got {cin}",
                            weight.dims()[1]
                        )));
                    }
                    let w = leaf(g, weight, &mut params);
                    let b = leaf(g, bias, &mut params);
                    g.conv2d(h, w, Some(b), *stride, *pad)
                }
                Layer::BatchNorm(bn) => {
                    let gamma = leaf(g, &bn.gamma, &mut params);
                    let beta = leaf(g, &bn.beta, &mut params);
                    let out = bn.forward(g, h, gamma, beta, mode)?;
                    bn_records.push(BnRecord {
                        layer: idx,
                        in_loss: bn.in_loss,
                        mu_s: bn.running_mean.clone(),
                        sigma_s: bn.sigma_s(),
                        trace: out.trace,
                        batch_mean: out.batch_mean,
                        batch_var: out.batch_var,
                    });
                    out.out
                }
                Layer::Relu => g.relu(h),
                Layer::Upsample2x => g.upsample2x(h),
                Layer::Sigmoid => {
                    logits = Some(h);
                    g.sigmoid(h)
                }
            };
        }
        let probs = h;
        Ok(ForwardPass {
            graph_id: g.id(),
            logits: logits.unwrap_or(probs),
            probs,
            bn: bn_records,
            params,
        })
    }

    /// Folds the batch statistics of a training forward into the running
    /// statistics with momentum [`BN_MOMENTUM`].
    pub fn update_running_stats(&mut self, g: &Graph, pass: &ForwardPass) {
        for rec in &pass.bn {
            let (Some(m), Some(v)) = (rec.batch_mean, rec.batch_var) else {
                continue;
            };
            if let Layer::BatchNorm(bn) = &mut self.layers[rec.layer] {
                let (bm, bv) = (g.value(m), g.value(v));
                for c in 0..bn.channels() {
                    let rm = &mut bn.running_mean.data_mut()[c];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * bm.data()[c];
                    let rv = &mut bn.running_var.data_mut()[c];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * bv.data()[c];
                }
            }
        }
    }

    /// Frozen-eval probabilities for a constant input.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(image.clone());
        let pass = self.forward(&mut g, x, BnMode::Eval, false)?;
        Ok(g.value(pass.probs).clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| {
            Error::Config(format!(
                "cannot open model {}: {e}; train one with `fpta pretrain`",
                path.display()
            ))
        })?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn with_stats(seed: u64) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Model::toy(3, &mut rng);
        for bn in m.batch_norms_mut() {
            let c = bn.channels();
            bn.running_mean = Tensor::randn(&[c], 0.3, &mut rng);
            bn.running_var = Tensor::uniform(&[c], 0.5, 2.0, &mut rng);
            bn.gamma = Tensor::uniform(&[c], 0.5, 1.5, &mut rng);
            bn.beta = Tensor::randn(&[c], 0.2, &mut rng);
        }
        m
    }

    fn run(model: &Model, x: &Tensor, mode: BnMode) -> Tensor {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let p = model.forward(&mut g, xv, mode, false).unwrap();
        g.value(p.probs).clone()
    }

    #[test]
    fn toy_has_four_bn_three_in_encoder() {
        let m = Model::toy(3, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(m.batch_norms().count(), 4);
        let end = m.encoder_end.unwrap();
        let enc = m.layers[..end]
            .iter()
            .filter(|l| matches!(l, Layer::BatchNorm(_)))
            .count();
        assert_eq!(enc, 3);
    }

    #[test]
    fn adapt_with_zero_lambda_equals_eval() {
        let m = with_stats(1);
        let x = Tensor::uniform(&[1, 3, 16, 16], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
        let adapt = BnMode::Adapt {
            lambda: 0.0,
            normalize: NormStats::Warmup,
        };
        assert_eq!(run(&m, &x, adapt), run(&m, &x, BnMode::Eval));
    }

    #[test]
    fn adapt_with_unit_lambda_centers_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm {
            running_mean: Tensor::randn(&[4], 1.0, &mut rng),
            ..BatchNorm::new(4)
        };
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[1, 4, 5, 6], 2.0, &mut rng));
        let gamma = g.constant(bn.gamma.clone());
        let beta = g.constant(bn.beta.clone());
        let out = bn
            .forward(
                &mut g,
                x,
                gamma,
                beta,
                BnMode::Adapt {
                    lambda: 1.0,
                    normalize: NormStats::Warmup,
                },
            )
            .unwrap();
        let m = g.channel_mean(out.out);
        for v in g.value(m).data() {
            assert_abs_diff_eq!(*v, 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn eval_normalization_is_invertible() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bn = BatchNorm {
            gamma: Tensor::uniform(&[3], 0.5, 2.0, &mut rng),
            beta: Tensor::randn(&[3], 1.0, &mut rng),
            running_mean: Tensor::randn(&[3], 1.0, &mut rng),
            running_var: Tensor::uniform(&[3], 0.1, 3.0, &mut rng),
            ..BatchNorm::new(3)
        };
        let x = Tensor::randn(&[1, 3, 4, 4], 1.0, &mut rng);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gamma = g.constant(bn.gamma.clone());
        let beta = g.constant(bn.beta.clone());
        let y = bn.forward(&mut g, xv, gamma, beta, BnMode::Eval).unwrap();
        let y = g.value(y.out);
        let sigma = bn.sigma_s();
        for c in 0..3 {
            for k in 0..16 {
                let i = c * 16 + k;
                let back = (y.data()[i] - bn.beta.data()[c]) / bn.gamma.data()[c] * sigma.data()[c]
                    + bn.running_mean.data()[c];
                assert_abs_diff_eq!(back, x.data()[i], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let m = Model::toy(3, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 8, 8]));
        assert!(matches!(
            m.forward(&mut g, x, BnMode::Eval, false),
            Err(Error::Config(_))
        ));
        let bad_lambda = BnMode::Adapt {
            lambda: 1.5,
            normalize: NormStats::Warmup,
        };
        let x = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        assert!(m.forward(&mut g, x, bad_lambda, false).is_err());
    }

    #[test]
    fn checksum_tracks_parameters_and_stats() {
        let m = with_stats(5);
        let mut m2 = m.clone();
        assert_eq!(m.checksum(), m2.checksum());
        m2.batch_norms_mut().next().unwrap().running_var.data_mut()[0] += 1e-12;
        assert_ne!(m.checksum(), m2.checksum());
        let mut m3 = m.clone();
        m3.batch_norms_mut().next().unwrap().in_loss = false;
        assert_eq!(m.checksum(), m3.checksum());
    }

    #[test]
    fn model_json_round_trip_is_exact() {
        let m = with_stats(6);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.save(&p).unwrap();
        let back = Model::load(&p).unwrap();
        assert_eq!(back.checksum(), m.checksum());
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut m = Model::toy(3, &mut ChaCha8Rng::seed_from_u64(7));
        let x = Tensor::uniform(&[2, 3, 8, 8], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pass = m.forward(&mut g, xv, BnMode::Train, true).unwrap();
        let bm = g.value(pass.bn[0].batch_mean.unwrap()).clone();
        m.update_running_stats(&g, &pass);
        let bn = m.batch_norms().next().unwrap();
        for c in 0..8 {
            assert_abs_diff_eq!(bn.running_mean.data()[c], 0.1 * bm.data()[c], epsilon = 1e-15);
        }
    }
}
