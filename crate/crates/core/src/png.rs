//! PNG export of images, prompts and masks.

use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{shape, Error, Result};
use crate::prompt::Prompt;
use crate::tensor::Tensor;

fn chw(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.dims() {
        [1, c, h, w] | [c, h, w] => Ok((*c, *h, *w)),
        [h, w] => Ok((1, *h, *w)),
        d => Err(shape(format!("cannot render dims {d:?} as an image"))),
    }
}

/// Writes `t` (`[C, H, W]`, `[1, C, H, W]` or `[H, W]`) with values clamped
/// to `[0, 1]`. Three channels become RGB; any other count is laid out as
/// grayscale tiles side by side. `scale` repeats every pixel.
pub fn save_png(t: &Tensor, path: impl AsRef<Path>, scale: u32) -> Result<()> {
    let (c, h, w) = chw(t)?;
    let scale = scale.max(1);
    let px = |ch: usize, y: usize, x: usize| (t.data()[(ch * h + y) * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
    let path = path.as_ref();
    if c == 3 {
        let img: RgbImage = ImageBuffer::from_fn(w as u32 * scale, h as u32 * scale, |x, y| {
            let (y, x) = ((y / scale) as usize, (x / scale) as usize);
            Rgb([px(0, y, x), px(1, y, x), px(2, y, x)])
        });
        img.save(path)?;
    } else {
        let img: GrayImage = ImageBuffer::from_fn((c * w) as u32 * scale, h as u32 * scale, |x, y| {
            let (y, x) = ((y / scale) as usize, (x / scale) as usize);
            Luma([px(x / w, y, x % w)])
        });
        img.save(path)?;
    }
    Ok(())
}

/// Min-max normalizes over all values, then writes as [`save_png`]. A
/// constant tensor renders mid-gray.
pub fn save_png_normalized(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    save_png(&min_max(t), path, 1)
}

pub fn min_max(t: &Tensor) -> Tensor {
    let (lo, hi) = t
        .data()
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if hi > lo {
        t.map(|v| (v - lo) / (hi - lo))
    } else {
        t.map(|_| 0.5)
    }
}

/// Renders the prompt normalized to `[0, 1]`; small low-frequency prompts are
/// enlarged so each multiplier is visible.
pub fn save_prompt_png(prompt: &Prompt, path: impl AsRef<Path>) -> Result<()> {
    match prompt {
        Prompt::LowFreq(p) => {
            let side = p.values.dims()[1].max(p.values.dims()[2]) as u32;
            save_png(&min_max(&p.values), path, (64 / side.max(1)).max(1))
        }
        Prompt::LowRank(p) => save_png(&min_max(&p.reconstruct()), path, 1),
    }
}

/// Reads an 8-bit PNG as `[1, C, H, W]` in `[0, 1]` with C = 3 (RGB) or 1.
pub fn load_png(path: impl AsRef<Path>, channels: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f64> = match channels {
        3 => {
            let rgb = img.to_rgb8();
            (0..3)
                .flat_map(|c| rgb.pixels().map(move |p| p[c] as f64 / 255.0).collect::<Vec<_>>())
                .collect()
        }
        1 => img.to_luma8().pixels().map(|p| p[0] as f64 / 255.0).collect(),
        c => return Err(shape(format!("PNG input supports 1 or 3 channels, not {c}"))),
    };
    Tensor::new(&[1, channels, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(&[1, 3, 2, 2], (0..12).map(|k| k as f64 / 11.0).collect()).unwrap();
        let p = dir.path().join("x.png");
        save_png(&t, &p, 1).unwrap();
        let back = load_png(&p, 3).unwrap();
        assert_eq!(back.dims(), t.dims());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn normalization_spans_unit_range() {
        let t = Tensor::new(&[3], vec![2.0, 4.0, 3.0]).unwrap();
        assert_eq!(min_max(&t).data(), &[0.0, 1.0, 0.5]);
        assert_eq!(min_max(&Tensor::full(&[2], 7.0)).data(), &[0.5, 0.5]);
    }

    #[test]
    fn missing_file_is_format_error() {
        assert!(matches!(load_png("/nonexistent/x.png", 3), Err(Error::Format { .. })));
    }
}
