//! Synthetic segmentation data: textured backgrounds with ellipse and
//! triangle foregrounds, plus parametric domain shifts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::fft::{fft2, ifft2_real, Spectrum};
use crate::prompt::Window;
use crate::tensor::Tensor;

pub const MIN_FOREGROUND: f64 = 0.02;
pub const MAX_FOREGROUND: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// `[1, C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    /// `[1, 1, H, W]`, values in `{0, 1}`.
    pub mask: Tensor,
    pub domain: String,
    pub seed: u64,
}

impl SyntheticSample {
    pub fn foreground_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for DatasetShape {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 3,
        }
    }
}

const BG_BASE: [f64; 3] = [0.32, 0.30, 0.34];
const FG_BASE: [f64; 3] = [0.72, 0.52, 0.42];

enum Shape {
    Ellipse {
        cy: f64,
        cx: f64,
        ry: f64,
        rx: f64,
        cos: f64,
        sin: f64,
    },
    Triangle([(f64, f64); 3]),
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse {
                cy,
                cx,
                ry,
                rx,
                cos,
                sin,
            } => {
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * cos + dy * sin;
                let v = -dx * sin + dy * cos;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Triangle(p) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

fn random_shapes(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<Shape> {
    let n = rng.random_range(1..=3);
    let scale = h.min(w) as f64;
    (0..n)
        .map(|_| {
            let cy = rng.random_range(0.2..0.8) * h as f64;
            let cx = rng.random_range(0.2..0.8) * w as f64;
            if rng.random_bool(0.7) {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: rng.random_range(0.08..0.3) * scale,
                    rx: rng.random_range(0.08..0.3) * scale,
                    cos: theta.cos(),
                    sin: theta.sin(),
                }
            } else {
                let r = rng.random_range(0.12..0.35) * scale;
                let start: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let pts = [0.0, 1.0, 2.0].map(|k| {
                    let a = start + k * std::f64::consts::TAU / 3.0 + rng.random_range(-0.4..0.4);
                    (cy + r * a.sin(), cx + r * a.cos())
                });
                Shape::Triangle(pts)
            }
        })
        .collect()
}

/// Smooth texture: a few random low-frequency sinusoids.
fn texture(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / h as f64,
                rng.random_range(0.5..3.0) * std::f64::consts::TAU / w as f64,
                rng.random_range(0.0..std::f64::consts::TAU),
                amp * rng.random_range(0.3..1.0),
            )
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = waves
                .iter()
                .map(|(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin())
                .sum();
        }
    }
    out
}

/// One sample; shapes are redrawn until the foreground fraction is in range.
pub fn generate_sample(seed: u64, shape: DatasetShape, domain: &str) -> SyntheticSample {
    let DatasetShape {
        height: h,
        width: w,
        channels: c,
    } = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask = loop {
        let shapes = random_shapes(&mut rng, h, w);
        let mut m = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                if shapes.iter().any(|s| s.contains(y as f64 + 0.5, x as f64 + 0.5)) {
                    m[y * w + x] = 1.0;
                }
            }
        }
        let frac = m.iter().sum::<f64>() / (h * w) as f64;
        if (MIN_FOREGROUND..=MAX_FOREGROUND).contains(&frac) {
            break m;
        }
    };
    let jitter = Normal::new(0.0, 0.03).unwrap();
    let pixel = Normal::new(0.0, 0.02).unwrap();
    let bg_tex = texture(&mut rng, h, w, 0.06);
    let fg_tex = texture(&mut rng, h, w, 0.05);
    let mut image = vec![0.0; c * h * w];
    for ch in 0..c {
        let bg = BG_BASE[ch % 3] + jitter.sample(&mut rng);
        let fg = FG_BASE[ch % 3] + jitter.sample(&mut rng);
        for k in 0..h * w {
            let v = if mask[k] > 0.5 {
                fg + fg_tex[k]
            } else {
                bg + bg_tex[k]
            };
            image[ch * h * w + k] = (v + pixel.sample(&mut rng)).clamp(0.0, 1.0);
        }
    }
    SyntheticSample {
        image: Tensor::new(&[1, c, h, w], image).unwrap(),
        mask: Tensor::new(&[1, 1, h, w], mask).unwrap(),
        domain: domain.to_string(),
        seed,
    }
}

/// Mixes `(seed, index)` into a per-sample seed.
pub fn sample_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(stream.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(index);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate_dataset(seed: u64, n: usize, shape: DatasetShape) -> Result<Vec<SyntheticSample>> {
    generate_stream(seed, 0, n, shape, "source")
}

pub(crate) fn generate_stream(
    seed: u64,
    stream: u64,
    n: usize,
    shape: DatasetShape,
    domain: &str,
) -> Result<Vec<SyntheticSample>> {
    if n == 0 {
        return Err(config("dataset size must be at least 1"));
    }
    Ok((0..n as u64)
        .map(|i| generate_sample(sample_seed(seed, stream, i), shape, domain))
        .collect())
}

/// Parameters of a synthetic acquisition shift. Safe ranges: `gain` in
/// (0, 3], `gamma` in [0.2, 5], `tint` entries in (0, 3], `blur_sigma` in
/// [0, 5], `noise_sigma` in [0, 0.2], `lf_gain` in (0, 4], `lf_band` in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    #[serde(default = "one")]
    pub gain: f64,
    #[serde(default = "one")]
    pub gamma: f64,
    #[serde(default = "unit_tint")]
    pub tint: Vec<f64>,
    #[serde(default)]
    pub blur_sigma: f64,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "one")]
    pub lf_gain: f64,
    #[serde(default = "default_band")]
    pub lf_band: f64,
}

fn one() -> f64 {
    1.0
}

fn unit_tint() -> Vec<f64> {
    vec![1.0; 3]
}

fn default_band() -> f64 {
    0.05
}

impl DomainSpec {
    pub fn identity(name: &str) -> Self {
        Self {
            name: name.to_string(),
            gain: 1.0,
            gamma: 1.0,
            tint: unit_tint(),
            blur_sigma: 0.0,
            noise_sigma: 0.0,
            lf_gain: 1.0,
            lf_band: default_band(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64, lo: f64, hi: f64| v.is_finite() && v >= lo && v <= hi;
        let ok = in_range(self.gain, 1e-6, 3.0)
            && in_range(self.gamma, 0.2, 5.0)
            && !self.tint.is_empty()
            && self.tint.iter().all(|&t| in_range(t, 1e-6, 3.0))
            && in_range(self.blur_sigma, 0.0, 5.0)
            && in_range(self.noise_sigma, 0.0, 0.2)
            && in_range(self.lf_gain, 1e-6, 4.0)
            && self.lf_band > 0.0
            && self.lf_band < 1.0;
        if ok {
            Ok(())
        } else {
            Err(config(format!("domain {:?} has parameters outside safe ranges", self.name)))
        }
    }

    /// Four target domains for the benchmark stream.
    pub fn benchmark_targets() -> Vec<Self> {
        vec![
            Self {
                gain: 0.55,
                noise_sigma: 0.01,
                ..Self::identity("dim")
            },
            Self {
                lf_gain: 1.6,
                blur_sigma: 0.7,
                ..Self::identity("washed")
            },
            Self {
                gamma: 1.8,
                tint: vec![0.9, 1.0, 1.15],
                ..Self::identity("gamma")
            },
            Self {
                gain: 0.85,
                tint: vec![1.3, 0.75, 0.9],
                noise_sigma: 0.02,
                ..Self::identity("tinted")
            },
        ]
    }
}

/// Multiplies the centred `band` window of every channel's amplitude
/// spectrum by `gain`, keeping phase, and returns the real part.
pub fn scale_low_frequencies(image: &Tensor, band: f64, gain: f64) -> Result<Tensor> {
    let dims = image.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let win = Window::centered(h, w, band)?;
    let (amp, phase) = fft2(image, true)?.amplitude_phase();
    let mut amp = amp;
    let planes = amp.len() / (h * w);
    for p in 0..planes {
        for y in win.top..win.top + win.height {
            for x in win.left..win.left + win.width {
                amp.data_mut()[(p * h + y) * w + x] *= gain;
            }
        }
    }
    Ok(ifft2_real(&Spectrum::recompose(&amp, &phase, true)?))
}

fn gaussian_blur(data: &mut [f64], h: usize, w: usize, sigma: f64) {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * data[y * w + reflect(x as isize + k as isize - radius, w)])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[reflect(y as isize + k as isize - radius, h) * w + x])
                .sum();
        }
    }
}

/// Applies gamma, gain and tint, the low-frequency amplitude gain, blur and
/// noise, then clamps to `[0, 1]`. The mask is unchanged.
pub fn shift_domain(sample: &SyntheticSample, spec: &DomainSpec) -> Result<SyntheticSample> {
    spec.validate()?;
    let dims = sample.image.dims().to_vec();
    let (c, h, w) = (dims[1], dims[2], dims[3]);
    let mut img = sample.image.clone();
    for ch in 0..c {
        let factor = spec.gain * spec.tint[ch % spec.tint.len()];
        for v in &mut img.data_mut()[ch * h * w..(ch + 1) * h * w] {
            if spec.gamma != 1.0 {
                *v = v.max(0.0).powf(spec.gamma);
            }
            *v *= factor;
        }
    }
    if spec.lf_gain != 1.0 {
        img = scale_low_frequencies(&img, spec.lf_band, spec.lf_gain)?;
    }
    if spec.blur_sigma > 0.0 {
        for plane in img.data_mut().chunks_exact_mut(h * w) {
            gaussian_blur(plane, h, w, spec.blur_sigma);
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(sample.seed, 0xD0, spec.name.len() as u64));
        let noise = Normal::new(0.0, spec.noise_sigma).unwrap();
        img.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(SyntheticSample {
        image: img,
        mask: sample.mask.clone(),
        domain: spec.name.clone(),
        seed: sample.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn same_seed_same_dataset() {
        let a = generate_dataset(4, 5, DatasetShape::default()).unwrap();
        let b = generate_dataset(4, 5, DatasetShape::default()).unwrap();
        assert_eq!(a, b);
        let c = generate_dataset(5, 5, DatasetShape::default()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn datasets_are_nondegenerate() {
        let data = generate_dataset(1, 200, DatasetShape::default()).unwrap();
        assert_eq!(data.len(), 200);
        for s in &data {
            let f = s.foreground_fraction();
            assert!((MIN_FOREGROUND..=MAX_FOREGROUND).contains(&f), "fraction {f}");
            assert!(s.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        }
        assert!(generate_dataset(1, 0, DatasetShape::default()).is_err());
    }

    #[test]
    fn foreground_fraction_spread_over_many_samples() {
        let data = generate_dataset(2, 1000, DatasetShape::default()).unwrap();
        let fr: Vec<f64> = data.iter().map(|s| s.foreground_fraction()).collect();
        let (lo, hi) = fr.iter().fold((1.0f64, 0.0f64), |(l, h), &f| (l.min(f), h.max(f)));
        assert!(lo >= MIN_FOREGROUND && hi <= MAX_FOREGROUND);
        let mean = fr.iter().sum::<f64>() / fr.len() as f64;
        assert!(mean > 0.05 && mean < 0.45, "mean fraction {mean}");
    }

    #[test]
    fn identity_shift_is_noop() {
        let s = generate_sample(3, DatasetShape::default(), "source");
        let out = shift_domain(&s, &DomainSpec::identity("same")).unwrap();
        assert!(out.image.rel_error(&s.image) < 1e-9);
        assert_eq!(out.mask, s.mask);
    }

    #[test]
    fn gamma_on_constant_image() {
        let s = SyntheticSample {
            image: Tensor::full(&[1, 3, 8, 8], 0.5),
            mask: Tensor::zeros(&[1, 1, 8, 8]),
            domain: "c".into(),
            seed: 0,
        };
        let spec = DomainSpec {
            gamma: 2.0,
            ..DomainSpec::identity("g")
        };
        for v in shift_domain(&s, &spec).unwrap().image.data() {
            assert_abs_diff_eq!(*v, 0.25, epsilon = 1e-15);
        }
    }

    #[test]
    fn low_frequency_gain_keeps_phase() {
        let s = generate_sample(6, DatasetShape::default(), "source");
        let spec = DomainSpec {
            lf_gain: 0.8,
            lf_band: 0.05,
            ..DomainSpec::identity("lf")
        };
        let out = shift_domain(&s, &spec).unwrap();
        assert!(out.image.data().iter().all(|v| *v > 0.0 && *v < 1.0), "clamping would alter phase");
        let (amp_in, ph_in) = fft2(&s.image, true).unwrap().amplitude_phase();
        let (_, ph_out) = fft2(&out.image, true).unwrap().amplitude_phase();
        for k in 0..ph_in.len() {
            if amp_in.data()[k] > 1e-6 {
                let d = (ph_in.data()[k] - ph_out.data()[k]).rem_euclid(std::f64::consts::TAU);
                assert!(d.min(std::f64::consts::TAU - d) < 1e-6);
            }
        }
    }

    #[test]
    fn invalid_spec_rejected() {
        let s = generate_sample(7, DatasetShape::default(), "source");
        let spec = DomainSpec {
            gamma: 0.0,
            ..DomainSpec::identity("bad")
        };
        assert!(shift_domain(&s, &spec).is_err());
    }

    #[test]
    fn shift_is_deterministic_and_keeps_mask() {
        let s = generate_sample(8, DatasetShape::default(), "source");
        for spec in DomainSpec::benchmark_targets() {
            let a = shift_domain(&s, &spec).unwrap();
            let b = shift_domain(&s, &spec).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.mask, s.mask);
            assert!(a.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
