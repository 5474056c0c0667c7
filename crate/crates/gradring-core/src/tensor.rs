//! Dense row-major tensors with three element types.
//!
//! `F16E` emulates IEEE binary16 exactly: every stored value is representable
//! in binary16, arithmetic accumulates in f32 and rounds once per output
//! element (round-to-nearest-even). Overflow to infinity is reported through
//! a per-tensor flag instead of an error.

use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    F64,
    F32,
    /// Emulated IEEE binary16 (11-bit significand, max finite 65504).
    F16E,
}

impl Dtype {
    pub fn bytes(self) -> usize {
        match self {
            Dtype::F64 => 8,
            Dtype::F32 => 4,
            Dtype::F16E => 2,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F64 => write!(f, "f64"),
            Dtype::F32 => write!(f, "f32"),
            Dtype::F16E => write!(f, "f16"),
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dtype mismatch: {lhs} vs {rhs}")]
    DtypeMismatch { lhs: Dtype, rhs: Dtype },
}

/// Convert an f32 to binary16 bits, round-to-nearest-even.
pub fn f32_to_f16_bits(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xff) as i32;
    let mant = bits & 0x007f_ffff;

    if exp == 0xff {
        // Inf or NaN.
        return sign | 0x7c00 | if mant != 0 { 0x0200 } else { 0 };
    }

    // Unbiased exponent.
    let e = exp - 127;
    if e >= 16 {
        // Too large for binary16 after rounding iff >= 65520; values in
        // [65504, 65520) round down to max finite, but those have e == 15.
        return sign | 0x7c00; // infinity
    }
    if e >= -14 {
        // Normal range. 10 mantissa bits remain; round off 13.
        let mut m = mant;
        let half = 1u32 << 12;
        let rest = m & 0x1fff;
        m >>= 13;
        let mut he = (e + 15) as u32;
        if rest > half || (rest == half && (m & 1) == 1) {
            m += 1;
            if m == 0x400 {
                m = 0;
                he += 1;
            }
        }
        if he >= 31 {
            return sign | 0x7c00;
        }
        return sign | ((he as u16) << 10) | m as u16;
    }
    if e >= -25 {
        // Subnormal half: implicit leading 1 becomes explicit.
        let m = mant | 0x0080_0000;
        let shift = (-14 - e) + 13; // 14..24
        let rounded = (m >> shift)
            + if (m & ((1 << shift) - 1)) > (1 << (shift - 1))
                || ((m & ((1 << shift) - 1)) == (1 << (shift - 1)) && ((m >> shift) & 1) == 1)
            {
                1
            } else {
                0
            };
        return sign | rounded as u16;
    }
    sign // underflow to zero
}

pub fn f16_bits_to_f32(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1f) as u32;
    let mant = (h & 0x03ff) as u32;
    let bits = if exp == 0x1f {
        sign | 0x7f80_0000 | (mant << 13)
    } else if exp == 0 {
        if mant == 0 {
            sign
        } else {
            // Normalize subnormal: value = mant * 2^-24, leading bit at
            // position p gives exponent field 103 + (p - 10).
            let mut e: i32 = 113;
            let mut m = mant;
            while m & 0x400 == 0 {
                m <<= 1;
                e -= 1;
            }
            m &= 0x3ff;
            sign | ((e as u32) << 23) | (m << 13)
        }
    } else {
        sign | ((exp + 127 - 15) << 23) | (mant << 13)
    };
    f32::from_bits(bits)
}

/// Round an f32 to the nearest binary16 value, returned as f32.
pub fn f16_round(x: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(x))
}

/// Deterministic counter-based RNG (splitmix64). Identical seeds give
/// identical sequences on every platform; no transcendental functions are
/// involved anywhere in the draw path.
#[derive(Debug, Clone)]
pub struct SeededRng {
    state: u64,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }

    /// Uniform in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform in [-a, a).
    pub fn uniform(&mut self, a: f64) -> f64 {
        (self.next_f64() * 2.0 - 1.0) * a
    }

    pub fn below(&mut self, n: u64) -> u64 {
        // Modulo bias is irrelevant for simulation-scale n.
        self.next_u64() % n
    }

    /// Derive an independent stream; used to decorrelate sub-generators.
    pub fn fork(&mut self, stream: u64) -> SeededRng {
        SeededRng::new(self.next_u64() ^ stream.wrapping_mul(0x2545_f491_4f6c_dd1d))
    }
}

/// Dense 2-D-or-1-D tensor, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    dtype: Dtype,
    data: Vec<f64>,
    overflow: bool,
}

impl Tensor {
    pub fn zeros(shape: &[usize], dtype: Dtype) -> Tensor {
        let n: usize = shape.iter().product();
        assert!(shape.iter().all(|&d| d > 0), "dimensions must be positive");
        Tensor {
            shape: shape.to_vec(),
            dtype,
            data: vec![0.0; n],
            overflow: false,
        }
    }

    pub fn from_vec(shape: &[usize], dtype: Dtype, data: Vec<f64>) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length must equal product of dims"
        );
        let mut t = Tensor {
            shape: shape.to_vec(),
            dtype,
            data,
            overflow: false,
        };
        t.requantize();
        t
    }

    pub fn uniform(shape: &[usize], dtype: Dtype, scale: f64, rng: &mut SeededRng) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(scale)).collect();
        Tensor::from_vec(shape, dtype, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn overflowed(&self) -> bool {
        self.overflow
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() == 1 {
            1
        } else {
            self.shape[1]
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let q = self.quantize(v);
        let cols = self.cols();
        self.data[r * cols + c] = q;
    }

    #[inline]
    fn quantize(&mut self, v: f64) -> f64 {
        match self.dtype {
            Dtype::F64 => v,
            Dtype::F32 => v as f32 as f64,
            Dtype::F16E => {
                let r = f16_round(v as f32) as f64;
                if r.is_infinite() && v.is_finite() {
                    self.overflow = true;
                }
                if !v.is_finite() {
                    self.overflow = true;
                }
                r
            }
        }
    }

    fn requantize(&mut self) {
        for i in 0..self.data.len() {
            let v = self.data[i];
            self.data[i] = match self.dtype {
                Dtype::F64 => v,
                Dtype::F32 => v as f32 as f64,
                Dtype::F16E => {
                    let r = f16_round(v as f32) as f64;
                    if (r.is_infinite() && v.is_finite()) || !v.is_finite() {
                        self.overflow = true;
                    }
                    r
                }
            };
        }
    }

    /// Cast to a different dtype, rounding every element.
    pub fn cast(&self, dtype: Dtype) -> Tensor {
        let mut t = Tensor {
            shape: self.shape.clone(),
            dtype,
            data: self.data.clone(),
            overflow: false,
        };
        t.requantize();
        t
    }

    /// Standard row-major matrix product. In F16E each accumulation runs in
    /// f32 and is rounded once per output element.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        if self.dtype != rhs.dtype {
            return Err(TensorError::DtypeMismatch {
                lhs: self.dtype,
                rhs: rhs.dtype,
            });
        }
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (rhs.rows(), rhs.cols());
        if k != k2 {
            return Err(TensorError::ShapeMismatch(format!(
                "matmul {}x{} by {}x{}",
                m, k, k2, n
            )));
        }
        let mut out = Tensor::zeros(&[m, n], self.dtype);
        match self.dtype {
            Dtype::F64 => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0f64;
                        for p in 0..k {
                            acc += self.data[i * k + p] * rhs.data[p * n + j];
                        }
                        out.data[i * n + j] = acc;
                    }
                }
            }
            Dtype::F32 => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0f32;
                        for p in 0..k {
                            acc += (self.data[i * k + p] as f32) * (rhs.data[p * n + j] as f32);
                        }
                        out.data[i * n + j] = acc as f64;
                    }
                }
            }
            Dtype::F16E => {
                for i in 0..m {
                    for j in 0..n {
                        let mut acc = 0.0f32;
                        for p in 0..k {
                            acc += (self.data[i * k + p] as f32) * (rhs.data[p * n + j] as f32);
                        }
                        let r = f16_round(acc) as f64;
                        if !acc.is_finite() || r.is_infinite() {
                            out.overflow = true;
                        }
                        out.data[i * n + j] = r;
                    }
                }
            }
        }
        out.overflow |= self.overflow | rhs.overflow;
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[n, m], self.dtype);
        for i in 0..m {
            for j in 0..n {
                out.data[j * m + i] = self.data[i * n + j];
            }
        }
        out.overflow = self.overflow;
        out
    }

    pub fn zip_with(&self, rhs: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, TensorError> {
        if self.dtype != rhs.dtype {
            return Err(TensorError::DtypeMismatch {
                lhs: self.dtype,
                rhs: rhs.dtype,
            });
        }
        if self.shape != rhs.shape {
            return Err(TensorError::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, rhs.shape
            )));
        }
        let mut out = Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            overflow: self.overflow | rhs.overflow,
        };
        out.requantize();
        Ok(out)
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(rhs, |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(rhs, |a, b| a - b)
    }

    pub fn hadamard(&self, rhs: &Tensor) -> Result<Tensor, TensorError> {
        self.zip_with(rhs, |a, b| a * b)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let mut out = Tensor {
            shape: self.shape.clone(),
            dtype: self.dtype,
            data: self.data.iter().map(|&a| f(a)).collect(),
            overflow: self.overflow,
        };
        out.requantize();
        out
    }

    pub fn scale(&self, s: f64) -> Tensor {
        self.map(|a| a * s)
    }

    /// Column-wise softmax with max-subtraction; every column sums to 1.
    pub fn softmax_cols(&self) -> Tensor {
        let (m, n) = (self.rows(), self.cols());
        let mut out = Tensor::zeros(&[m, n], self.dtype);
        for j in 0..n {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..m {
                mx = mx.max(self.data[i * n + j]);
            }
            let mut sum = 0.0;
            let mut col = vec![0.0; m];
            for i in 0..m {
                let e = (self.data[i * n + j] - mx).exp();
                col[i] = e;
                sum += e;
            }
            for i in 0..m {
                out.set(i, j, col[i] / sum);
            }
        }
        out.overflow |= self.overflow;
        out
    }
}

/// Round an F32 tensor to F16E; overflow is reported via the flag.
pub fn round_f16(x: &Tensor) -> Tensor {
    x.cast(Dtype::F16E)
}
