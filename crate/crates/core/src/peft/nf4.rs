//! Blockwise 4-bit NormalFloat quantization.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul_nn, Tensor};

/// The 16 NF4 levels as published with the QLoRA reference implementation.
pub const NF4_LEVELS: [f32; 16] = [
    -1.0,
    -0.696_192_800_998_687_7,
    -0.525_073_051_452_636_7,
    -0.394_917_488_098_144_53,
    -0.284_441_381_692_886_35,
    -0.184_773_433_208_465_58,
    -0.091_050_036_251_544_95,
    0.0,
    0.079_580_299_556_255_34,
    0.160_930_201_411_247_25,
    0.246_112_301_945_686_34,
    0.337_915_241_718_292_24,
    0.440_709_829_330_444_34,
    0.562_617_003_917_694_1,
    0.722_956_836_223_602_3,
    1.0,
];

pub const DEFAULT_BLOCK: usize = 64;

const MAGIC: &[u8; 4] = b"NF4Q";

/// Widest distance between adjacent codebook levels.
pub fn widest_gap() -> f64 {
    NF4_LEVELS
        .windows(2)
        .map(|w| w[1] as f64 - w[0] as f64)
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    /// Two codes per byte, low nibble first.
    pub codes: Vec<u8>,
    pub absmax: Vec<f32>,
    pub shape: Vec<usize>,
    pub block: usize,
}

fn nearest_level(v: f64) -> u8 {
    // Midpoints between neighbours; ties resolve to the lower level.
    let mut idx = 0u8;
    for (i, w) in NF4_LEVELS.windows(2).enumerate() {
        let mid = (w[0] as f64 + w[1] as f64) / 2.0;
        if v > mid {
            idx = i as u8 + 1;
        }
    }
    idx
}

/// Quantize with one absmax scale per `block` consecutive elements; the last
/// block may be partial. An all-zero block stores absmax 1.
pub fn quantize_nf4<T: Scalar>(x: &Tensor<T>, block: usize) -> Result<QuantizedTensor> {
    if block == 0 {
        return Err(invalid("quantization block size must be positive"));
    }
    if !x.is_all_finite() {
        return Err(Error::NonFinite { op: "quantize_nf4" });
    }
    let data = x.data();
    let mut codes = vec![0u8; data.len().div_ceil(2)];
    let mut absmax = Vec::with_capacity(data.len().div_ceil(block));
    for (b, chunk) in data.chunks(block).enumerate() {
        let m = chunk.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max) as f32;
        let scale = if m == 0.0 { 1.0f32 } else { m };
        absmax.push(scale);
        for (j, v) in chunk.iter().enumerate() {
            let code = nearest_level(v.as_f64() / scale as f64);
            let i = b * block + j;
            codes[i / 2] |= if i % 2 == 0 { code } else { code << 4 };
        }
    }
    Ok(QuantizedTensor {
        codes,
        absmax,
        shape: x.shape().to_vec(),
        block,
    })
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn code(&self, i: usize) -> u8 {
        let b = self.codes[i / 2];
        if i % 2 == 0 {
            b & 0x0F
        } else {
            b >> 4
        }
    }

    pub fn dequantize<T: Scalar>(&self) -> Tensor<T> {
        let data = (0..self.numel())
            .map(|i| {
                let level = NF4_LEVELS[self.code(i) as usize];
                T::lit(level as f64 * self.absmax[i / self.block] as f64)
            })
            .collect();
        Tensor::from_vec(&self.shape, data)
    }

    /// Storage bytes of codes plus scales.
    pub fn footprint_bytes(&self) -> usize {
        self.codes.len() + 4 * self.absmax.len()
    }

    /// `MAGIC, block, ndim, shape…, codes, absmax` in little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.footprint_bytes() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.block as u64).to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.codes.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.codes);
        out.extend_from_slice(&(self.absmax.len() as u64).to_le_bytes());
        for a in &self.absmax {
            out.extend_from_slice(&a.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4)? != MAGIC {
            return Err(malformed());
        }
        let block = cur.u64()?;
        let ndim = cur.u64()?;
        let mut shape = Vec::with_capacity(ndim.min(8));
        for _ in 0..ndim {
            shape.push(cur.u64()?);
        }
        let n_codes = cur.u64()?;
        let codes = cur.take(n_codes)?.to_vec();
        let n_abs = cur.u64()?;
        let absmax = cur
            .take(n_abs.checked_mul(4).ok_or_else(malformed)?)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let q = Self {
            codes,
            absmax,
            shape,
            block,
        };
        let n = q.numel();
        if q.block == 0 || q.codes.len() != n.div_ceil(2) || q.absmax.len() != n.div_ceil(q.block) {
            return Err(malformed());
        }
        Ok(q)
    }
}

fn malformed() -> Error {
    invalid("malformed quantized tensor blob")
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(malformed)?;
        let s = self.bytes.get(self.pos..end).ok_or_else(malformed)?;
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize> {
        let s = self.take(8)?;
        Ok(u64::from_le_bytes(s.try_into().unwrap()) as usize)
    }
}

/// `x · bf16_round(dequantize(q))` for a weight stored `[d_in, d_out]` and
/// `x` of shape `[n, d_in]`.
pub fn quantized_linear_forward<T: Scalar>(q: &QuantizedTensor, x: &Tensor<T>) -> Result<Tensor<T>> {
    if q.shape.len() != 2 || x.shape().len() != 2 || x.shape()[1] != q.shape[0] {
        return Err(Error::ShapeMismatch {
            op: "quantized_linear_forward",
            lhs: x.shape().to_vec(),
            rhs: q.shape.clone(),
        });
    }
    let w = q.dequantize::<T>().bf16_round();
    let (n, k) = x.dims2();
    let m = q.shape[1];
    Ok(Tensor::from_vec(&[n, m], matmul_nn(x.data(), w.data(), n, k, m)))
}
