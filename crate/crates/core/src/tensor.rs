//! Dense row-major `f64` tensors and the `.vpt` tensor file format.
//!
//! Images travel through the crate channel-first as `[N, C, H, W]` with
//! `N = 1` at test time. Frequency prompts are `[C, h', w']`.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};

const VPT_MAGIC: &[u8; 4] = b"VPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn randn<R: Rng + ?Sized>(dims: &[usize], std: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(dims: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let len = dims.iter().product();
        let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with dims {:?}", self.dims);
        self.data[0]
    }

    pub fn reshape(mut self, dims: &[usize]) -> Result<Self> {
        let len: usize = dims.iter().product();
        if len != self.data.len() {
            return Err(shape(format!("cannot reshape {:?} to {dims:?}", self.dims)));
        }
        self.dims = dims.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.dims != other.dims {
            return Err(shape(format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// `‖self − other‖ / max(‖other‖, tiny)` in the Frobenius norm.
    pub fn rel_error(&self, other: &Self) -> f64 {
        let diff: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        diff / other.norm().max(f64::MIN_POSITIVE)
    }

    pub fn write_vpt<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(VPT_MAGIC)?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for &d in &self.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &x in &self.data {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_vpt<R: Read>(mut r: R) -> std::result::Result<Self, String> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|e| e.to_string())?;
        if &magic != VPT_MAGIC {
            return Err(format!("bad magic {magic:?}"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|e| e.to_string())?;
        let rank = u32::from_le_bytes(word) as usize;
        if rank > 8 {
            return Err(format!("unsupported rank {rank}"));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word).map_err(|e| e.to_string())?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let len: usize = dims.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| e.to_string())?;
        if bytes.len() != len * 8 {
            return Err(format!(
                "payload has {} bytes, dims {dims:?} need {}",
                bytes.len(),
                len * 8
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { dims, data })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        let mut w = std::io::BufWriter::new(f);
        self.write_vpt(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)?;
        Self::read_vpt(std::io::BufReader::new(f)).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn vpt_layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        t.write_vpt(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"VPT1");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[12..20], &1.0f64.to_le_bytes());
        assert_eq!(&buf[20..28], &(-0.5f64).to_le_bytes());
        assert_eq!(buf.len(), 28);
    }

    #[test]
    fn vpt_rejects_bad_magic_and_truncation() {
        assert!(Tensor::read_vpt(&b"VPT2\0\0\0\0"[..]).is_err());
        let t = Tensor::ones(&[3, 3]);
        let mut buf = Vec::new();
        t.write_vpt(&mut buf).unwrap();
        buf.pop();
        assert!(Tensor::read_vpt(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn vpt_round_trip(dims in proptest::collection::vec(1usize..5, 0..5), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let t = Tensor::randn(&dims, 3.0, &mut rng);
            let mut buf = Vec::new();
            t.write_vpt(&mut buf).unwrap();
            prop_assert_eq!(Tensor::read_vpt(&buf[..]).unwrap(), t);
        }
    }
}
