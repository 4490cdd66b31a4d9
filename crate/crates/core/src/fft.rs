//! 2-D discrete Fourier transforms over the trailing two axes of a tensor,
//! DC centering, and amplitude/phase decomposition.
//!
//! The forward transform is unnormalized; the inverse carries `1/(H·W)`.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{shape, Error, Result};
use crate::tensor::Tensor;

type PlanCache = HashMap<(usize, bool), Arc<dyn Fft<f64>>>;

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, PlanCache)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let (planner, cache) = &mut *p.borrow_mut();
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

/// Transforms every `h×w` plane of the split complex buffers in place.
/// The inverse direction is scaled by `1/(h·w)`.
pub(crate) fn fft2_planes(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    debug_assert_eq!(re.len(), im.len());
    let plane = h * w;
    let row_fft = plan(w, inverse);
    let col_fft = plan(h, inverse);
    let mut buf = vec![Complex64::new(0.0, 0.0); plane];
    let mut col = vec![Complex64::new(0.0, 0.0); h];
    let scale = if inverse { 1.0 / plane as f64 } else { 1.0 };
    for (pr, pi) in re.chunks_exact_mut(plane).zip(im.chunks_exact_mut(plane)) {
        for (b, (&r, &i)) in buf.iter_mut().zip(pr.iter().zip(pi.iter())) {
            *b = Complex64::new(r, i);
        }
        for row in buf.chunks_exact_mut(w) {
            row_fft.process(row);
        }
        for x in 0..w {
            for y in 0..h {
                col[y] = buf[y * w + x];
            }
            col_fft.process(&mut col);
            for y in 0..h {
                buf[y * w + x] = col[y];
            }
        }
        for (b, (r, i)) in buf.iter().zip(pr.iter_mut().zip(pi.iter_mut())) {
            *r = b.re * scale;
            *i = b.im * scale;
        }
    }
}

/// Circularly shifts every `h×w` plane. `inverse = false` is fftshift (DC
/// from `(0,0)` to `(⌊h/2⌋, ⌊w/2⌋)`), `inverse = true` undoes it.
pub(crate) fn shift_planes(data: &[f64], h: usize, w: usize, inverse: bool) -> Vec<f64> {
    let plane = h * w;
    let mut out = vec![0.0; data.len()];
    let (sh, sw) = (h / 2, w / 2);
    for (src, dst) in data.chunks_exact(plane).zip(out.chunks_exact_mut(plane)) {
        for y in 0..h {
            for x in 0..w {
                let (ty, tx) = ((y + sh) % h, (x + sw) % w);
                if inverse {
                    dst[y * w + x] = src[ty * w + tx];
                } else {
                    dst[ty * w + tx] = src[y * w + x];
                }
            }
        }
    }
    out
}

fn plane_dims(dims: &[usize]) -> Result<(usize, usize)> {
    match dims {
        [.., h, w] if *h >= 1 && *w >= 1 => Ok((*h, *w)),
        _ => Err(shape(format!("need at least 2 dims with H, W >= 1, got {dims:?}"))),
    }
}

/// Complex spectrum of a real tensor, transformed over its last two axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    dims: Vec<usize>,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    centered: bool,
}

impl Spectrum {
    pub fn new(dims: &[usize], re: Vec<f64>, im: Vec<f64>, centered: bool) -> Result<Self> {
        let len: usize = dims.iter().product();
        plane_dims(dims)?;
        if re.len() != len || im.len() != len {
            return Err(shape(format!("spectrum planes do not match dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            re,
            im,
            centered,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn is_centered(&self) -> bool {
        self.centered
    }

    /// Moves DC to the centre bin (or back to the corner).
    pub fn with_centering(self, centered: bool) -> Self {
        if centered == self.centered {
            return self;
        }
        let (h, w) = plane_dims(&self.dims).expect("validated on construction");
        let inverse = !centered;
        Self {
            re: shift_planes(&self.re, h, w, inverse),
            im: shift_planes(&self.im, h, w, inverse),
            dims: self.dims,
            centered,
        }
    }

    /// Modulus and argument; the phase of an exactly-zero bin is 0.
    pub fn amplitude_phase(&self) -> (Tensor, Tensor) {
        let amp = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r.hypot(*i))
            .collect();
        let phase = self
            .re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| if r == 0.0 && i == 0.0 { 0.0 } else { i.atan2(r) })
            .collect();
        (
            Tensor::new(&self.dims, amp).expect("same dims"),
            Tensor::new(&self.dims, phase).expect("same dims"),
        )
    }

    pub fn recompose(amplitude: &Tensor, phase: &Tensor, centered: bool) -> Result<Self> {
        if amplitude.dims() != phase.dims() {
            return Err(shape(format!(
                "amplitude {:?} vs phase {:?}",
                amplitude.dims(),
                phase.dims()
            )));
        }
        let (re, im) = amplitude
            .data()
            .iter()
            .zip(phase.data())
            .map(|(a, p)| (a * p.cos(), a * p.sin()))
            .unzip();
        Self::new(amplitude.dims(), re, im, centered)
    }
}

/// Forward DFT of every trailing `H×W` plane.
pub fn fft2(x: &Tensor, center_dc: bool) -> Result<Spectrum> {
    let (h, w) = plane_dims(x.dims())?;
    if !x.is_finite() {
        return Err(Error::NonFinite("fft2 input".into()));
    }
    let mut re = x.data().to_vec();
    let mut im = vec![0.0; re.len()];
    fft2_planes(&mut re, &mut im, h, w, false);
    Ok(Spectrum::new(x.dims(), re, im, false)?.with_centering(center_dc))
}

/// Inverse DFT keeping the real part, plus the largest discarded imaginary
/// magnitude.
pub fn ifft2_real_with_residue(s: &Spectrum) -> (Tensor, f64) {
    let s = s.clone().with_centering(false);
    let (h, w) = plane_dims(&s.dims).expect("validated on construction");
    let (mut re, mut im) = (s.re, s.im);
    fft2_planes(&mut re, &mut im, h, w, true);
    let residue = im.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (Tensor::new(&s.dims, re).expect("same dims"), residue)
}

pub fn ifft2_real(s: &Spectrum) -> Tensor {
    ifft2_real_with_residue(s).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct O(n²) DFT used as an independent oracle.
    fn naive_dft(x: &[f64], h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; h * w];
        let mut im = vec![0.0; h * w];
        for u in 0..h {
            for v in 0..w {
                for y in 0..h {
                    for xx in 0..w {
                        let ang = -2.0
                            * std::f64::consts::PI
                            * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re[u * w + v] += x[y * w + xx] * ang.cos();
                        im[u * w + v] += x[y * w + xx] * ang.sin();
                    }
                }
            }
        }
        (re, im)
    }

    #[test]
    fn impulse_has_flat_amplitude() {
        let mut x = Tensor::zeros(&[8, 8]);
        x.data_mut()[0] = 1.0;
        let (amp, _) = fft2(&x, true).unwrap().amplitude_phase();
        for a in amp.data() {
            assert_abs_diff_eq!(*a, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn constant_plane_concentrates_at_centered_dc() {
        let (h, w, c) = (6, 10, 0.3);
        let x = Tensor::full(&[h, w], c);
        let (amp, phase) = fft2(&x, true).unwrap().amplitude_phase();
        for y in 0..h {
            for xx in 0..w {
                let a = amp.data()[y * w + xx];
                if (y, xx) == (h / 2, w / 2) {
                    assert_abs_diff_eq!(a, c * (h * w) as f64, epsilon = 1e-12);
                    assert_eq!(phase.data()[y * w + xx], 0.0);
                } else {
                    assert_abs_diff_eq!(a, 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn odd_sizes_center_at_floor_half() {
        let x = Tensor::full(&[5, 7], 1.0);
        let (amp, _) = fft2(&x, true).unwrap().amplitude_phase();
        assert_abs_diff_eq!(amp.data()[2 * 7 + 3], 35.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_naive_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[6, 5], 1.0, &mut rng);
        let s = fft2(&x, false).unwrap();
        let (re, im) = naive_dft(x.data(), 6, 5);
        for k in 0..30 {
            assert_abs_diff_eq!(s.re[k], re[k], epsilon = 1e-10);
            assert_abs_diff_eq!(s.im[k], im[k], epsilon = 1e-10);
        }
    }

    #[test]
    fn round_trip_random_plane() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn(&[3, 16, 16], 1.0, &mut rng);
        for centered in [false, true] {
            let back = ifft2_real(&fft2(&x, centered).unwrap());
            assert!(back.rel_error(&x) < 1e-9);
        }
    }

    #[test]
    fn dc_only_spectrum_inverts_to_constant() {
        let (h, w, c) = (4, 4, 0.7);
        let mut re = vec![0.0; 16];
        re[(h / 2) * w + w / 2] = c * 16.0;
        let s = Spectrum::new(&[h, w], re, vec![0.0; 16], true).unwrap();
        let (x, residue) = ifft2_real_with_residue(&s);
        for v in x.data() {
            assert_abs_diff_eq!(*v, c, epsilon = 1e-12);
        }
        assert!(residue < 1e-15);
    }

    #[test]
    fn real_part_returned_when_residue_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[8, 8], 1.0, &mut rng);
        let mut s = fft2(&x, false).unwrap();
        s.im[9] += 1e-12;
        let (back, residue) = ifft2_real_with_residue(&s);
        assert!(residue <= 1e-12);
        assert!(back.rel_error(&x) < 1e-9);
    }

    #[test]
    fn amplitude_phase_of_three_four() {
        let s = Spectrum::new(&[1, 1], vec![3.0], vec![4.0], false).unwrap();
        let (a, p) = s.amplitude_phase();
        assert_abs_diff_eq!(a.item(), 5.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.item(), 4f64.atan2(3.0), epsilon = 1e-15);
    }

    #[test]
    fn recompose_inverts_decompose() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let re = Tensor::randn(&[2, 5, 6], 1.0, &mut rng).into_data();
        let im = Tensor::randn(&[2, 5, 6], 1.0, &mut rng).into_data();
        let s = Spectrum::new(&[2, 5, 6], re, im, true).unwrap();
        let (a, p) = s.amplitude_phase();
        let back = Spectrum::recompose(&a, &p, true).unwrap();
        for k in 0..s.re.len() {
            assert_abs_diff_eq!(back.re[k], s.re[k], epsilon = 1e-12);
            assert_abs_diff_eq!(back.im[k], s.im[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite_input() {
        let mut x = Tensor::zeros(&[4, 4]);
        x.data_mut()[3] = f64::NAN;
        assert!(matches!(fft2(&x, false), Err(Error::NonFinite(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn round_trip_and_parseval(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::randn(&[h, w], 1.0, &mut rng);
                let s = fft2(&x, true).unwrap();
                prop_assert!(ifft2_real(&s).rel_error(&x) < 1e-9);
                let (amp, _) = s.amplitude_phase();
                let energy: f64 = x.data().iter().map(|v| v * v).sum();
                let spectral: f64 = amp.data().iter().map(|a| a * a).sum::<f64>() / (h * w) as f64;
                prop_assert!((energy - spectral).abs() <= 1e-9 * energy.max(1e-300));
            }

            #[test]
            fn linearity(h in 1usize..10, w in 1usize..10, a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = Tensor::randn(&[h, w], 1.0, &mut rng);
                let y = Tensor::randn(&[h, w], 1.0, &mut rng);
                let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
                let (fx, fy, fc) = (fft2(&x, false).unwrap(), fft2(&y, false).unwrap(), fft2(&combo, false).unwrap());
                let scale = fc.re.iter().chain(&fc.im).fold(1.0f64, |m, v| m.max(v.abs()));
                for k in 0..h * w {
                    prop_assert!((fc.re[k] - (a * fx.re[k] + b * fy.re[k])).abs() <= 1e-9 * scale);
                    prop_assert!((fc.im[k] - (a * fx.im[k] + b * fy.im[k])).abs() <= 1e-9 * scale);
                }
            }
        }
    }
}
