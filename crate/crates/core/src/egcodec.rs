//! Order-k exponential-Golomb codes and the EGCR compactness metric.
//!
//! EGCR quantizes every parameter tensor symmetrically to `b` bits, maps
//! the signed integers through zigzag, and compares the mean order-k
//! code length against the flat `b`-bit baseline:
//! `EGCR = (1 - Σ len / (N·b)) · 100`.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::nnet::ParamSet;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EgConfig {
    order: u32,
    baseline_bits: u32,
}

impl Default for EgConfig {
    fn default() -> Self {
        Self {
            order: 0,
            baseline_bits: 16,
        }
    }
}

impl EgConfig {
    pub fn new(order: u32, baseline_bits: u32) -> Result<Self> {
        if order > 15 {
            return Err(Error::Config(format!("EG order {order} exceeds 15")));
        }
        if !(2..=32).contains(&baseline_bits) {
            return Err(Error::Config(format!("baseline bits {baseline_bits} outside [2,32]")));
        }
        Ok(Self { order, baseline_bits })
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn baseline_bits(&self) -> u32 {
        self.baseline_bits
    }
}

pub fn zigzag(v: i64) -> u64 {
    debug_assert!(v.unsigned_abs() < 1 << 62);
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(n: u64) -> i64 {
    ((n >> 1) as i64) ^ -((n & 1) as i64)
}

/// Bits packed most-significant-bit first.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BitString {
    bytes: Vec<u8>,
    len: usize,
}

impl BitString {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn push(&mut self, bit: bool) {
        if self.len % 8 == 0 {
            self.bytes.push(0);
        }
        if bit {
            let last = self.bytes.last_mut().unwrap();
            *last |= 0x80 >> (self.len % 8);
        }
        self.len += 1;
    }

    /// Append the low `count` bits of `value`, high bit first.
    pub fn push_bits(&mut self, value: u64, count: u32) {
        for i in (0..count).rev() {
            self.push((value >> i) & 1 == 1);
        }
    }

    pub fn get(&self, i: usize) -> Option<bool> {
        (i < self.len).then(|| self.bytes[i / 8] & (0x80 >> (i % 8)) != 0)
    }

    /// Append the order-`k` code of `n`.
    pub fn push_eg(&mut self, n: u64, k: u32) {
        let u = (n >> k) as u128 + 1;
        let width = 128 - u.leading_zeros(); // bits in u + 1
        for _ in 0..width - 1 {
            self.push(false);
        }
        for i in (0..width).rev() {
            self.push((u >> i) & 1 == 1);
        }
        if k > 0 {
            self.push_bits(n & ((1u64 << k) - 1), k);
        }
    }

    pub fn reader(&self) -> BitReader<'_> {
        BitReader { bits: self, pos: 0 }
    }
}

impl fmt::Display for BitString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.len {
            f.write_str(if self.get(i).unwrap() { "1" } else { "0" })?;
        }
        Ok(())
    }
}

pub struct BitReader<'a> {
    bits: &'a BitString,
    pos: usize,
}

impl BitReader<'_> {
    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bits.len - self.pos
    }

    fn bit(&mut self) -> Result<bool> {
        let b = self.bits.get(self.pos).ok_or(Error::Codec {
            bit_offset: self.pos,
            msg: "unexpected end of bitstream".into(),
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn bits(&mut self, count: u32) -> Result<u64> {
        let mut v = 0u64;
        for _ in 0..count {
            v = (v << 1) | self.bit()? as u64;
        }
        Ok(v)
    }

    /// Read one order-`k` code.
    pub fn read_eg(&mut self, k: u32) -> Result<u64> {
        let start = self.pos;
        let mut zeros = 0u32;
        while !self.bit()? {
            zeros += 1;
            if zeros > 63 {
                return Err(Error::Codec {
                    bit_offset: start,
                    msg: "prefix longer than 63 zeros".into(),
                });
            }
        }
        let tail = self.bits(zeros)?;
        let u = ((1u128 << zeros) | tail as u128) - 1;
        let n = (u << k) | self.bits(k)? as u128;
        u64::try_from(n).map_err(|_| Error::Codec {
            bit_offset: start,
            msg: "decoded value overflows 64 bits".into(),
        })
    }
}

pub fn eg_encode(n: u64, k: u32) -> BitString {
    let mut bits = BitString::new();
    bits.push_eg(n, k);
    bits
}

/// Decode the code at the front of `bits`; returns `(n, bits consumed)`.
pub fn eg_decode(bits: &BitString, k: u32) -> Result<(u64, usize)> {
    let mut r = bits.reader();
    let n = r.read_eg(k)?;
    Ok((n, r.position()))
}

/// Length of the order-`k` code of `n`, without materializing it.
pub fn code_length(n: u64, k: u32) -> u32 {
    let u = (n >> k) as u128 + 1;
    let log2 = 127 - u.leading_zeros();
    2 * log2 + 1 + k
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedParams {
    pub names: Vec<String>,
    pub q: Vec<Vec<i64>>,
    pub scales: Vec<f64>,
}

/// Symmetric per-tensor uniform quantization to `b` bits.
pub fn quantize_params<T: Real>(params: &ParamSet<T>, b: u32) -> Result<QuantizedParams> {
    if !(2..=32).contains(&b) {
        return Err(Error::Config(format!("quantizer bits {b} outside [2,32]")));
    }
    let qmax = ((1i64 << (b - 1)) - 1) as f64;
    let mut out = QuantizedParams {
        names: Vec::new(),
        q: Vec::new(),
        scales: Vec::new(),
    };
    for (name, entry) in params.iter() {
        let vals: Vec<f64> = entry.tensor.data().iter().map(|v| v.to_f64_lossy()).collect();
        if let Some(bad) = vals.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("parameter {name} holds {bad}")));
        }
        let max = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let delta = if max == 0.0 { 1.0 } else { max / qmax };
        let q = vals
            .iter()
            .map(|v| (v / delta).round().clamp(-qmax, qmax) as i64)
            .collect();
        out.names.push(name.to_string());
        out.q.push(q);
        out.scales.push(delta);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EgcrReport {
    pub egcr_percent: f64,
    pub avg_bits: f64,
    pub total_params: usize,
    pub order: u32,
    pub baseline_bits: u32,
}

pub fn egcr<T: Real>(params: &ParamSet<T>, cfg: &EgConfig) -> Result<EgcrReport> {
    let quant = quantize_params(params, cfg.baseline_bits)?;
    let total: usize = quant.q.iter().map(Vec::len).sum();
    if total == 0 {
        return Err(Error::Data("EGCR of an empty parameter set".into()));
    }
    // per-tensor partial sums, reduced in parameter order
    let bits: u64 = quant
        .q
        .iter()
        .map(|q| q.iter().map(|&v| code_length(zigzag(v), cfg.order) as u64).sum::<u64>())
        .sum();
    let avg_bits = bits as f64 / total as f64;
    Ok(EgcrReport {
        egcr_percent: (1.0 - avg_bits / cfg.baseline_bits as f64) * 100.0,
        avg_bits,
        total_params: total,
        order: cfg.order,
        baseline_bits: cfg.baseline_bits,
    })
}
