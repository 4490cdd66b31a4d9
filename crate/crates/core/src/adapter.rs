//! Per-image prompt adaptation over a test stream.

use std::borrow::Cow;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{alignment_loss, select_loss_layers, warmup_lambda, LossMode, LossScope};
use crate::bank::MemoryBank;
use crate::error::{config, Result};
use crate::graph::{Graph, Var};
use crate::metrics::{dice, mean};
use crate::nn::{BnMode, Layer, Model, NormStats};
use crate::prompt::{
    apply_lowrank_on, apply_prompt_on, extract_key, FrequencyKey, LowFrequencyPrompt, LowRankPrompt, Prompt,
    PromptKind,
};
use crate::synth::sample_seed;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterConfig {
    /// Prompt side as a fraction of the image side.
    pub alpha: f64,
    /// Memory bank capacity; 0 disables the bank.
    #[serde(rename = "S")]
    pub bank_capacity: usize,
    /// Support set size.
    #[serde(rename = "K")]
    pub support_size: usize,
    /// Warm-up temperature.
    pub tau: f64,
    pub learning_rate: f64,
    /// Adam steps per image. 0 skips the update.
    pub iterations: usize,
    pub loss_scope: LossScope,
    /// Statistics the output forward normalizes with.
    pub inference_stats: NormStats,
    pub prompt_kind: PromptKind,
    pub rank: usize,
    /// When off, `lambda` is 0 for every step and the loss aligns to the
    /// source statistics.
    pub warmup: bool,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            bank_capacity: 40,
            support_size: 16,
            tau: 5.0,
            learning_rate: 0.05,
            iterations: 1,
            loss_scope: LossScope::All,
            inference_stats: NormStats::Warmup,
            prompt_kind: PromptKind::Lowfreq,
            rank: 3,
            warmup: true,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(config(format!("alpha {} must be in (0, 1]", self.alpha)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(config(format!("tau {} must be positive", self.tau)));
        }
        if self.support_size == 0 {
            return Err(config("K must be at least 1"));
        }
        if self.prompt_kind == PromptKind::Lowrank && self.rank == 0 {
            return Err(config("rank must be at least 1"));
        }
        Ok(())
    }

    fn loss_mode(&self) -> LossMode {
        if self.warmup {
            LossMode::Warmup
        } else {
            LossMode::Source
        }
    }

    fn lambda(&self, i: u64) -> Result<f64> {
        if self.warmup {
            warmup_lambda(i, self.tau)
        } else {
            Ok(0.0)
        }
    }
}

/// Adam with bias correction over a list of tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, params: &[Tensor]) -> Self {
        Self {
            lr,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let (mh, vh) = (m[j] / c1, v[j] / c2);
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Update a fresh Adam state applies to a scalar with gradient `grad`.
pub fn adam_single_step(grad: f64, lr: f64) -> f64 {
    let mut p = [Tensor::scalar(0.0)];
    let mut opt = Adam::new(lr, &p);
    opt.step(&mut p, &[Tensor::scalar(grad)]);
    p[0].item()
}

/// One row of the stream log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamRecord {
    pub i: u64,
    pub domain: String,
    pub lambda: f64,
    pub loss_pre: f64,
    pub loss_post: f64,
    pub dice_pre: Option<f64>,
    pub dice_post: Option<f64>,
    pub bank_size: usize,
    pub prompt_dist: f64,
    pub imag_residue: f64,
}

pub const RECORD_HEADER: [&str; 10] = [
    "i",
    "domain",
    "lambda",
    "loss_pre",
    "loss_post",
    "dice_pre",
    "dice_post",
    "bank_size",
    "prompt_dist",
    "imag_residue",
];

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// `[1, 1, H, W]` probabilities.
    pub prediction: Tensor,
    pub prompt: Prompt,
    pub initial_prompt: Prompt,
    /// Loss gradient at the initial prompt; empty when no update ran.
    pub gradient: Vec<Tensor>,
    /// The image the network saw in the output forward.
    pub adapted_image: Tensor,
    pub record: StreamRecord,
    /// The update produced a non-finite loss or gradient and was discarded.
    pub aborted: bool,
}

fn default_prompt(kind: PromptKind, dims: &[usize], cfg: &AdapterConfig, i: u64) -> Result<Prompt> {
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    Ok(match kind {
        PromptKind::Lowfreq => Prompt::LowFreq(LowFrequencyPrompt::ones(h, w, c, cfg.alpha)?),
        PromptKind::Lowrank => {
            let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, 0x1A, i));
            Prompt::LowRank(LowRankPrompt::init(h, w, c, cfg.rank, &mut rng)?)
        }
    })
}

struct Prompted {
    image: Var,
    imag: Option<Var>,
    params: Vec<Var>,
}

fn record_prompt(g: &mut Graph, x: Var, prompt: &Prompt, trainable: bool) -> Prompted {
    let leaf = |g: &mut Graph, t: &Tensor| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    };
    match prompt {
        Prompt::LowFreq(p) => {
            let v = leaf(g, &p.values);
            let (re, im) = apply_prompt_on(g, x, v, p.window());
            Prompted {
                image: re,
                imag: Some(im),
                params: vec![v],
            }
        }
        Prompt::LowRank(p) => {
            let b = leaf(g, &p.b);
            let a = leaf(g, &p.a);
            Prompted {
                image: apply_lowrank_on(g, x, b, a),
                imag: None,
                params: vec![b, a],
            }
        }
    }
}

/// Loss value and prompt gradients at `prompt`.
fn loss_and_grads(
    model: &Model,
    image: &Tensor,
    prompt: &Prompt,
    lambda: f64,
    mode: LossMode,
) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let pr = record_prompt(&mut g, x, prompt, true);
    let bn = BnMode::Adapt {
        lambda,
        normalize: NormStats::Warmup,
    };
    let pass = model.forward(&mut g, pr.image, bn, false)?;
    let (loss, _) = alignment_loss(&mut g, &pass, mode)?;
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), pr.params.iter().map(|&p| grads.wrt(p)).collect()))
}

fn loss_at(model: &Model, image: &Tensor, prompt: &Prompt, lambda: f64, mode: LossMode) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let pr = record_prompt(&mut g, x, prompt, false);
    let bn = BnMode::Adapt {
        lambda,
        normalize: NormStats::Warmup,
    };
    let pass = model.forward(&mut g, pr.image, bn, false)?;
    Ok(alignment_loss(&mut g, &pass, mode)?.1.total)
}

struct Inference {
    probs: Tensor,
    adapted: Tensor,
    imag_residue: f64,
    loss: Option<f64>,
}

fn infer(model: &Model, image: &Tensor, prompt: &Prompt, lambda: f64, cfg: &AdapterConfig) -> Result<Inference> {
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let pr = record_prompt(&mut g, x, prompt, false);
    let pass = model.forward(
        &mut g,
        pr.image,
        BnMode::Adapt {
            lambda,
            normalize: cfg.inference_stats,
        },
        false,
    )?;
    let loss = match cfg.inference_stats {
        NormStats::Warmup => Some(alignment_loss(&mut g, &pass, cfg.loss_mode())?.1.total),
        NormStats::Source => None,
    };
    Ok(Inference {
        probs: g.value(pass.probs).clone(),
        adapted: g.value(pr.image).clone(),
        imag_residue: pr.imag.map_or(0.0, |v| g.value(v).max_abs()),
        loss,
    })
}

fn scoped(model: &Model, scope: LossScope) -> Result<Cow<'_, Model>> {
    let boundary = match scope {
        LossScope::All => usize::MAX,
        LossScope::EncoderOnly => model.encoder_end.unwrap_or(0),
    };
    let matches = model.layers.iter().enumerate().all(|(idx, l)| match l {
        Layer::BatchNorm(bn) => bn.in_loss == (idx < boundary),
        _ => true,
    });
    if matches && !(scope == LossScope::EncoderOnly && model.encoder_end.is_none()) {
        return Ok(Cow::Borrowed(model));
    }
    let mut m = model.clone();
    select_loss_layers(&mut m, scope)?;
    Ok(Cow::Owned(m))
}

/// One image of the stream: initialize the prompt from the bank, take
/// `iterations` Adam steps on the alignment loss, predict with the updated
/// prompt and store it under the image's low-frequency key. `i` is the
/// 1-based stream index. The mask only feeds the Dice diagnostics.
pub fn adapt_step(
    image: &Tensor,
    mask: Option<&Tensor>,
    model: &Model,
    bank: &mut MemoryBank,
    cfg: &AdapterConfig,
    i: u64,
    domain: &str,
) -> Result<StepOutput> {
    cfg.validate()?;
    if i == 0 {
        return Err(config("stream index starts at 1"));
    }
    model.validate_input(image.dims())?;
    if image.dims()[0] != 1 {
        return Err(config("adaptation runs one image at a time"));
    }
    let model = scoped(model, cfg.loss_scope)?;
    let model = model.as_ref();
    let lambda = cfg.lambda(i)?;
    let mode = cfg.loss_mode();

    let key: FrequencyKey = extract_key(image, cfg.alpha)?;
    let default = default_prompt(cfg.prompt_kind, image.dims(), cfg, i)?;
    let defaults: Vec<Tensor> = default.params().into_iter().cloned().collect();
    let init_params = bank.initialize(&key, cfg.support_size, &defaults)?;
    let initial = default.with_params(init_params.clone())?;

    let mut params = init_params;
    let mut aborted = false;
    let mut loss_pre = f64::NAN;
    let mut gradient = Vec::new();
    if cfg.iterations == 0 {
        loss_pre = loss_at(model, image, &initial, lambda, mode)?;
    } else {
        let mut opt = Adam::new(cfg.learning_rate, &params);
        for it in 0..cfg.iterations {
            let current = initial.with_params(params.clone())?;
            let (loss, grads) = loss_and_grads(model, image, &current, lambda, mode)?;
            if it == 0 {
                loss_pre = loss;
                gradient = grads.clone();
            }
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                aborted = true;
                break;
            }
            opt.step(&mut params, &grads);
        }
    }
    let prompt = if aborted || params.iter().any(|p| !p.is_finite()) {
        aborted = true;
        initial.clone()
    } else {
        initial.with_params(params)?
    };

    let out = infer(model, image, &prompt, lambda, cfg)?;
    let loss_post = match out.loss {
        Some(l) => l,
        None => loss_at(model, image, &prompt, lambda, mode)?,
    };
    let (dice_pre, dice_post) = match mask {
        Some(m) => (
            Some(dice(&model.predict(image)?, m)?),
            Some(dice(&out.probs, m)?),
        ),
        None => (None, None),
    };
    bank.enqueue(key, prompt.params().into_iter().cloned().collect())?;
    let record = StreamRecord {
        i,
        domain: domain.to_string(),
        lambda,
        loss_pre,
        loss_post,
        dice_pre,
        dice_post,
        bank_size: bank.len(),
        prompt_dist: prompt.identity_distance(),
        imag_residue: out.imag_residue,
    };
    Ok(StepOutput {
        prediction: out.probs,
        prompt,
        initial_prompt: initial,
        gradient,
        adapted_image: out.adapted,
        record,
        aborted,
    })
}

/// Owns the bank and stream counter for one sequential stream.
#[derive(Debug, Clone)]
pub struct Adapter {
    config: AdapterConfig,
    model: Model,
    bank: MemoryBank,
    step: u64,
}

impl Adapter {
    pub fn new(model: &Model, config: AdapterConfig) -> Result<Self> {
        config.validate()?;
        let mut model = model.clone();
        select_loss_layers(&mut model, config.loss_scope)?;
        Ok(Self {
            bank: MemoryBank::new(config.bank_capacity),
            config,
            model,
            step: 0,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn adapt(&mut self, image: &Tensor, mask: Option<&Tensor>, domain: &str) -> Result<StepOutput> {
        let out = adapt_step(
            image,
            mask,
            &self.model,
            &mut self.bank,
            &self.config,
            self.step + 1,
            domain,
        )?;
        self.step += 1;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamItem {
    pub image: Tensor,
    pub mask: Option<Tensor>,
    pub domain: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainMeans {
    pub domain: String,
    pub steps: usize,
    pub dice_pre: Option<f64>,
    pub dice_post: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMeans {
    pub round: usize,
    pub domains: Vec<DomainMeans>,
    pub dice_pre: Option<f64>,
    pub dice_post: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub steps: usize,
    pub rounds: usize,
    pub aborted_steps: usize,
    pub domains: Vec<DomainMeans>,
    pub per_round: Vec<RoundMeans>,
    pub dice_pre: Option<f64>,
    pub dice_post: Option<f64>,
    /// Round-1 mean Dice minus the mean over all rounds.
    pub degradation: Option<f64>,
    /// Fraction of steps with `i > 10` whose loss decreased.
    pub loss_decrease_rate: Option<f64>,
}

fn opt_mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

fn domain_means(records: &[StreamRecord]) -> Vec<DomainMeans> {
    let mut order: Vec<&str> = Vec::new();
    for r in records {
        if !order.contains(&r.domain.as_str()) {
            order.push(&r.domain);
        }
    }
    order
        .into_iter()
        .map(|d| {
            let rs: Vec<&StreamRecord> = records.iter().filter(|r| r.domain == d).collect();
            DomainMeans {
                domain: d.to_string(),
                steps: rs.len(),
                dice_pre: opt_mean(rs.iter().map(|r| r.dice_pre)),
                dice_post: opt_mean(rs.iter().map(|r| r.dice_post)),
            }
        })
        .collect()
}

impl StreamSummary {
    /// Aggregates records of a stream replayed `rounds` times.
    pub fn from_records(records: &[StreamRecord], rounds: usize, aborted_steps: usize) -> Self {
        let per = records.len().checked_div(rounds).unwrap_or(0);
        let per_round: Vec<RoundMeans> = (0..rounds)
            .map(|r| {
                let rs = &records[r * per..(r + 1) * per];
                RoundMeans {
                    round: r + 1,
                    domains: domain_means(rs),
                    dice_pre: opt_mean(rs.iter().map(|x| x.dice_pre)),
                    dice_post: opt_mean(rs.iter().map(|x| x.dice_post)),
                }
            })
            .collect();
        let dice_post = opt_mean(records.iter().map(|r| r.dice_post));
        let late: Vec<&StreamRecord> = records.iter().filter(|r| r.i > 10).collect();
        Self {
            steps: records.len(),
            rounds,
            aborted_steps,
            domains: domain_means(records),
            dice_pre: opt_mean(records.iter().map(|r| r.dice_pre)),
            dice_post,
            degradation: per_round
                .first()
                .and_then(|r| r.dice_post)
                .zip(dice_post)
                .map(|(first, all)| first - all),
            loss_decrease_rate: (!late.is_empty())
                .then(|| late.iter().filter(|r| r.loss_post < r.loss_pre).count() as f64 / late.len() as f64),
            per_round,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StreamRun {
    pub records: Vec<StreamRecord>,
    pub summary: StreamSummary,
}

/// Adapts to every item in order, `rounds` times, with one bank persisting
/// across rounds. `on_step` sees each step's output, e.g. for dumps.
pub fn run_stream(
    items: &[StreamItem],
    model: &Model,
    cfg: &AdapterConfig,
    rounds: usize,
    mut on_step: impl FnMut(&StepOutput) -> Result<()>,
) -> Result<StreamRun> {
    if items.is_empty() || rounds == 0 {
        return Err(config("stream needs at least one image and one round"));
    }
    let dims = items[0].image.dims();
    for it in items {
        model.validate_input(it.image.dims())?;
        if it.image.dims() != dims {
            return Err(config(format!(
                "stream mixes image shapes {dims:?} and {:?}",
                it.image.dims()
            )));
        }
    }
    let mut adapter = Adapter::new(model, cfg.clone())?;
    let mut records = Vec::with_capacity(items.len() * rounds);
    let mut aborted = 0;
    for _ in 0..rounds {
        for it in items {
            let out = adapter.adapt(&it.image, it.mask.as_ref(), &it.domain)?;
            aborted += out.aborted as usize;
            on_step(&out)?;
            records.push(out.record);
        }
    }
    let summary = StreamSummary::from_records(&records, rounds, aborted);
    Ok(StreamRun { records, summary })
}

pub fn write_records_csv<W: std::io::Write>(records: &[StreamRecord], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in records {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
