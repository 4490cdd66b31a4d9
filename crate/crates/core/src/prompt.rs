//! Low-frequency amplitude prompts, the additive low-rank variant, and the
//! frequency keys used to index the memory bank.
//!
//! A frequency prompt is a `[C, h', w']` patch of multipliers placed on the
//! centred window of the DC-shifted amplitude spectrum; everywhere else the
//! multiplier is one. Phase is left untouched.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, shape, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// `(h', w', C)` with `h' = max(1, ⌊α·H⌋)`, `w' = max(1, ⌊α·W⌋)`.
pub fn prompt_shape(h: usize, w: usize, c: usize, alpha: f64) -> Result<(usize, usize, usize)> {
    if h == 0 || w == 0 || c == 0 {
        return Err(config(format!("image dims must be positive, got {h}x{w}x{c}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(config(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let side = |n: usize| ((alpha * n as f64).floor() as usize).max(1);
    Ok((side(h), side(w), c))
}

/// Centred crop window on a DC-shifted `H×W` plane. For even sizes the
/// extra row/column lies after the centre bin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Window {
    pub fn centered(h: usize, w: usize, alpha: f64) -> Result<Self> {
        let (ph, pw, _) = prompt_shape(h, w, 1, alpha)?;
        let top = (h / 2)
            .checked_sub(ph / 2)
            .ok_or_else(|| Error::Contract("window above plane".into()))?;
        let left = (w / 2)
            .checked_sub(pw / 2)
            .ok_or_else(|| Error::Contract("window left of plane".into()))?;
        if top + ph > h || left + pw > w {
            return Err(Error::Contract(format!("window {ph}x{pw} exceeds {h}x{w}")));
        }
        Ok(Self {
            top,
            left,
            height: ph,
            width: pw,
        })
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y)
            && (self.left..self.left + self.width).contains(&x)
    }
}

fn image_hwc(dims: &[usize]) -> Result<(usize, usize, usize)> {
    match dims {
        [1, c, h, w] => Ok((*h, *w, *c)),
        _ => Err(shape(format!("expected a single image [1, C, H, W], got {dims:?}"))),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LowFrequencyPrompt {
    /// `[C, h', w']` multipliers.
    pub values: Tensor,
    pub alpha: f64,
    /// `(H, W, C)` of the images the prompt applies to.
    pub target_shape: (usize, usize, usize),
}

impl LowFrequencyPrompt {
    /// The identity prompt (all ones).
    pub fn ones(h: usize, w: usize, c: usize, alpha: f64) -> Result<Self> {
        let (ph, pw, c) = prompt_shape(h, w, c, alpha)?;
        Ok(Self {
            values: Tensor::ones(&[c, ph, pw]),
            alpha,
            target_shape: (h, w, c),
        })
    }

    pub fn with_values(&self, values: Tensor) -> Result<Self> {
        if values.dims() != self.values.dims() {
            return Err(shape(format!(
                "prompt values {:?}, expected {:?}",
                values.dims(),
                self.values.dims()
            )));
        }
        Ok(Self {
            values,
            ..self.clone()
        })
    }

    pub fn param_count(&self) -> usize {
        self.values.len()
    }

    pub fn window(&self) -> Window {
        let (h, w, _) = self.target_shape;
        Window::centered(h, w, self.alpha).expect("validated at construction")
    }

    /// `[1, C, H, W]` multiplier plane: ones with the prompt in the window.
    pub fn one_pad(&self) -> Tensor {
        let mut g = Graph::new();
        let p = g.constant(self.values.clone());
        let (h, w, c) = self.target_shape;
        let win = self.window();
        let v = g.one_pad(p, &[1, c, h, w], win.top, win.left);
        g.value(v).clone()
    }

    /// Count of multipliers below zero, which flip the sign of an amplitude.
    pub fn negative_count(&self) -> usize {
        self.values.data().iter().filter(|v| **v < 0.0).count()
    }
}

/// Records the prompted image on `g`. Returns the real adapted image and the
/// discarded imaginary part of the inverse transform.
pub fn apply_prompt_on(g: &mut Graph, image: Var, prompt: Var, window: Window) -> (Var, Var) {
    let dims = g.dims(image).to_vec();
    let zeros = g.constant(Tensor::zeros(&dims));
    let z = g.complex(image, zeros);
    let spec = g.fft2(z);
    let centred = g.shift(spec, false);
    let amp = g.modulus(centred);
    let phase = g.arg(centred);
    let mask = g.one_pad(prompt, &dims, window.top, window.left);
    let scaled = g.mul(amp, mask);
    let recomposed = g.polar(scaled, phase);
    let corner = g.shift(recomposed, true);
    let spatial = g.ifft2(corner);
    (g.real(spatial), g.imag(spatial))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adapted {
    pub image: Tensor,
    /// Largest `|Im|` dropped by the real-part projection.
    pub imag_residue: f64,
}

/// Multiplies the centred low-frequency amplitude of `image` by the prompt
/// and transforms back, keeping the real part.
pub fn apply_prompt(image: &Tensor, prompt: &LowFrequencyPrompt) -> Result<Adapted> {
    let (h, w, c) = image_hwc(image.dims())?;
    if (h, w, c) != prompt.target_shape {
        return Err(shape(format!(
            "image {h}x{w}x{c} vs prompt target {:?}",
            prompt.target_shape
        )));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let p = g.constant(prompt.values.clone());
    let (re, im) = apply_prompt_on(&mut g, x, p, prompt.window());
    Ok(Adapted {
        image: g.value(re).clone(),
        imag_residue: g.value(im).max_abs(),
    })
}

/// Flattened centred low-frequency amplitude crop of an image.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyKey {
    /// `[C, h', w']` amplitudes.
    pub values: Tensor,
    pub source_id: Option<u64>,
}

impl FrequencyKey {
    pub fn as_slice(&self) -> &[f64] {
        self.values.data()
    }

    pub fn dims(&self) -> &[usize] {
        self.values.dims()
    }
}

/// Crops the centred amplitude spectrum with the same window the prompt uses.
pub fn extract_key(image: &Tensor, alpha: f64) -> Result<FrequencyKey> {
    let (h, w, c) = image_hwc(image.dims())?;
    let win = Window::centered(h, w, alpha)?;
    let spec = crate::fft::fft2(image, true)?;
    let (amp, _) = spec.amplitude_phase();
    let mut out = Vec::with_capacity(c * win.height * win.width);
    for ch in 0..c {
        for y in win.top..win.top + win.height {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&amp.data()[row + win.left..row + win.left + win.width]);
        }
    }
    Ok(FrequencyKey {
        values: Tensor::new(&[c, win.height, win.width], out)?,
        source_id: None,
    })
}

/// Additive spatial prompt `B @ A` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankPrompt {
    /// `[C, H, r]`
    pub b: Tensor,
    /// `[C, r, W]`
    pub a: Tensor,
    pub rank: usize,
}

impl LowRankPrompt {
    /// `B = 0`, `A ~ N(0, 1e-6)`, so the initial prompt is the identity.
    pub fn init<R: Rng + ?Sized>(h: usize, w: usize, c: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= h.min(w) {
            return Err(config(format!("rank {rank} must lie in [1, min(H, W)) for {h}x{w}")));
        }
        Ok(Self {
            b: Tensor::zeros(&[c, h, rank]),
            a: Tensor::randn(&[c, rank, w], 1e-3, rng),
            rank,
        })
    }

    pub fn param_count(&self) -> usize {
        self.b.len() + self.a.len()
    }

    pub fn target_shape(&self) -> (usize, usize, usize) {
        let d = self.b.dims();
        (d[1], self.a.dims()[2], d[0])
    }

    /// Per-channel reconstruction `B @ A` as `[C, H, W]`.
    pub fn reconstruct(&self) -> Tensor {
        let mut g = Graph::new();
        let (b, a) = (g.constant(self.b.clone()), g.constant(self.a.clone()));
        let p = g.channel_matmul(b, a);
        g.value(p).clone()
    }
}

pub fn apply_lowrank_on(g: &mut Graph, image: Var, b: Var, a: Var) -> Var {
    let dims = g.dims(image).to_vec();
    let p = g.channel_matmul(b, a);
    let p = g.reshape(p, &dims);
    g.add(image, p)
}

pub fn apply_lowrank(image: &Tensor, prompt: &LowRankPrompt) -> Result<Tensor> {
    let (h, w, c) = image_hwc(image.dims())?;
    if (h, w, c) != prompt.target_shape() {
        return Err(shape(format!(
            "image {h}x{w}x{c} vs low-rank prompt {:?}",
            prompt.target_shape()
        )));
    }
    if prompt.rank >= h.min(w) {
        return Err(config(format!("rank {} too large for {h}x{w}", prompt.rank)));
    }
    let mut g = Graph::new();
    let x = g.constant(image.clone());
    let (b, a) = (g.constant(prompt.b.clone()), g.constant(prompt.a.clone()));
    let out = apply_lowrank_on(&mut g, x, b, a);
    Ok(g.value(out).clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    Lowfreq,
    Lowrank,
}

/// Either prompt variant, as the adapter and memory bank see it.
#[derive(Debug, Clone, PartialEq)]
pub enum Prompt {
    LowFreq(LowFrequencyPrompt),
    LowRank(LowRankPrompt),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSidecar {
    pub alpha: f64,
    pub target_shape: [usize; 3],
    pub kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
}

fn with_suffix(stem: &Path, suffix: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

impl Prompt {
    pub fn kind(&self) -> PromptKind {
        match self {
            Prompt::LowFreq(_) => PromptKind::Lowfreq,
            Prompt::LowRank(_) => PromptKind::Lowrank,
        }
    }

    /// The learnable tensors in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Prompt::LowFreq(p) => vec![&p.values],
            Prompt::LowRank(p) => vec![&p.b, &p.a],
        }
    }

    /// Replaces the learnable tensors, keeping metadata.
    pub fn with_params(&self, params: Vec<Tensor>) -> Result<Self> {
        match (self, params.as_slice()) {
            (Prompt::LowFreq(p), [v]) => Ok(Prompt::LowFreq(p.with_values(v.clone())?)),
            (Prompt::LowRank(p), [b, a]) if b.dims() == p.b.dims() && a.dims() == p.a.dims() => {
                Ok(Prompt::LowRank(LowRankPrompt {
                    b: b.clone(),
                    a: a.clone(),
                    rank: p.rank,
                }))
            }
            _ => Err(shape("prompt parameter layout mismatch")),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// L2 distance of the learnables from the identity prompt.
    pub fn identity_distance(&self) -> f64 {
        match self {
            Prompt::LowFreq(p) => p.values.data().iter().map(|v| (v - 1.0).powi(2)).sum::<f64>().sqrt(),
            Prompt::LowRank(p) => p.reconstruct().norm(),
        }
    }

    /// Writes `<stem>.vpt` (or `<stem>.b.vpt` and `<stem>.a.vpt`) and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>, alpha: f64) -> Result<()> {
        let stem = stem.as_ref();
        let sidecar = match self {
            Prompt::LowFreq(p) => {
                p.values.save(with_suffix(stem, ".vpt"))?;
                let (h, w, c) = p.target_shape;
                PromptSidecar {
                    alpha: p.alpha,
                    target_shape: [h, w, c],
                    kind: PromptKind::Lowfreq,
                    rank: None,
                }
            }
            Prompt::LowRank(p) => {
                p.b.save(with_suffix(stem, ".b.vpt"))?;
                p.a.save(with_suffix(stem, ".a.vpt"))?;
                let (h, w, c) = p.target_shape();
                PromptSidecar {
                    alpha,
                    target_shape: [h, w, c],
                    kind: PromptKind::Lowrank,
                    rank: Some(p.rank),
                }
            }
        };
        let f = std::fs::File::create(with_suffix(stem, ".json"))?;
        serde_json::to_writer_pretty(f, &sidecar)?;
        Ok(())
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let f = std::fs::File::open(with_suffix(stem, ".json"))?;
        let sidecar: PromptSidecar = serde_json::from_reader(f)?;
        let [h, w, c] = sidecar.target_shape;
        match sidecar.kind {
            PromptKind::Lowfreq => {
                let base = LowFrequencyPrompt::ones(h, w, c, sidecar.alpha)?;
                Ok(Prompt::LowFreq(base.with_values(Tensor::load(with_suffix(stem, ".vpt"))?)?))
            }
            PromptKind::Lowrank => {
                let b = Tensor::load(with_suffix(stem, ".b.vpt"))?;
                let a = Tensor::load(with_suffix(stem, ".a.vpt"))?;
                let rank = sidecar.rank.unwrap_or(b.dims().last().copied().unwrap_or(0));
                if b.dims() != [c, h, rank] || a.dims() != [c, rank, w] {
                    return Err(shape("low-rank factors disagree with sidecar"));
                }
                Ok(Prompt::LowRank(LowRankPrompt { b, a, rank }))
            }
        }
    }
}
