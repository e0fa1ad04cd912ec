//! Per-row stochastic integer quantization of feature tables.
//!
//! Each row gets a zero point `Z = min(row)` and scale
//! `S = (max(row) - min(row)) / (2^b - 1)`, both stored as FP32. Elements
//! are mapped to `x' = (x - Z) / S` and stochastically rounded:
//! `q = floor(x') + Bernoulli(frac(x'))`, which makes the dequantized value
//! `q * S + Z` an unbiased estimate of `x` with error at most `S`. Codes are
//! packed `b` bits at a time, lowest-order bits first, each row starting on
//! a byte boundary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mat::{DenseMat, Scalar};

/// Supported quantization widths.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BitWidth {
    Int2,
    Int4,
    Int8,
}

impl BitWidth {
    pub fn bits(self) -> u32 {
        match self {
            BitWidth::Int2 => 2,
            BitWidth::Int4 => 4,
            BitWidth::Int8 => 8,
        }
    }

    /// Number of representable levels, `2^b`.
    pub fn levels(self) -> u32 {
        1 << self.bits()
    }

    pub fn from_bits(bits: u8) -> Result<Self> {
        match bits {
            2 => Ok(BitWidth::Int2),
            4 => Ok(BitWidth::Int4),
            8 => Ok(BitWidth::Int8),
            other => Err(Error::InvalidInput(format!("unsupported bit width {other}, expected 2, 4, or 8"))),
        }
    }

    /// Packed bytes for one row of `f` elements.
    pub fn row_bytes(self, f: usize) -> usize {
        (f * self.bits() as usize + 7) / 8
    }
}

/// Rounding behavior of the quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Rounding {
    /// Unbiased: round down, then up with probability equal to the
    /// fractional part.
    #[default]
    Stochastic,
    /// Deterministic nearest rounding, for debugging; biased.
    Nearest,
}

/// Per-row dequantization parameters, FP32 on the wire.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuantParams {
    pub zero_point: f32,
    pub scale: f32,
}

/// A quantized table: packed codes plus per-row parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantBlock {
    pub rows: usize,
    pub feat_dim: usize,
    pub bit_width: BitWidth,
    pub params: Vec<QuantParams>,
    pub packed: Vec<u8>,
}

/// Identifies one logical exchange so that every row draws from its own
/// reproducible random stream, independent of worker count and thread
/// schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamKey {
    pub seed: u64,
    pub epoch: u64,
    pub layer: u32,
    pub backward: bool,
}

impl StreamKey {
    pub fn new(seed: u64, epoch: u64, layer: u32, backward: bool) -> Self {
        StreamKey { seed, epoch, layer, backward }
    }

    /// RNG for one row, keyed by the exchange context and the row's global
    /// id.
    pub fn row_rng(&self, row_id: u64) -> ChaCha8Rng {
        let mut h = self.seed;
        h = splitmix64(h ^ self.epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        h = splitmix64(h ^ (self.layer as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
        h = splitmix64(h ^ (self.backward as u64).wrapping_mul(0x94D0_49BB_1331_11EB));
        h = splitmix64(h ^ row_id.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        ChaCha8Rng::seed_from_u64(h)
    }
}

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Quantizes `table` row by row in one pass (parameters, then codes, while
/// the row is hot). `row_ids[r]` is the global id of row `r`, keying its
/// random stream.
pub fn quantize_rows<T: Scalar>(
    table: &DenseMat<T>,
    b: BitWidth,
    rounding: Rounding,
    key: StreamKey,
    row_ids: &[u64],
) -> Result<QuantBlock> {
    let (rows, f) = (table.rows(), table.cols());
    if f == 0 {
        return Err(Error::InvalidInput("cannot quantize zero-width rows".into()));
    }
    if row_ids.len() != rows {
        return Err(Error::Shape(format!("{} row ids for {rows} rows", row_ids.len())));
    }
    for &x in table.data() {
        if !x.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite value {x} in quantizer input")));
        }
    }

    let row_bytes = b.row_bytes(f);
    let mut params = vec![QuantParams { zero_point: 0.0, scale: 0.0 }; rows];
    let mut packed = vec![0u8; rows * row_bytes];
    let max_code = (b.levels() - 1) as f64;

    params
        .par_iter_mut()
        .zip(packed.par_chunks_mut(row_bytes))
        .enumerate()
        .for_each(|(r, (p, out))| {
            let row = table.row(r);
            let mut lo = row[0].to_f64();
            let mut hi = lo;
            for &x in &row[1..] {
                let v = x.to_f64();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let z = lo as f32;
            let s = (((hi - lo) / max_code) as f32).max(0.0);
            *p = QuantParams { zero_point: z, scale: s };
            if s == 0.0 {
                return;
            }
            let recip = 1.0 / s as f64;
            let zf = z as f64;
            let mut rng = key.row_rng(row_ids[r]);
            let mut acc: u32 = 0;
            let mut filled: u32 = 0;
            let mut byte = 0usize;
            for &x in row {
                let scaled = (x.to_f64() - zf) * recip;
                let base = scaled.floor();
                let code = match rounding {
                    Rounding::Stochastic => {
                        let frac = scaled - base;
                        base + if rng.gen::<f64>() < frac { 1.0 } else { 0.0 }
                    }
                    Rounding::Nearest => (scaled + 0.5).floor(),
                };
                let q = code.clamp(0.0, max_code) as u32;
                acc |= q << filled;
                filled += b.bits();
                if filled == 8 {
                    out[byte] = acc as u8;
                    byte += 1;
                    acc = 0;
                    filled = 0;
                }
            }
            if filled > 0 {
                out[byte] = acc as u8;
            }
        });

    Ok(QuantBlock { rows, feat_dim: f, bit_width: b, params, packed })
}

/// Reconstructs `q * S + Z` per element.
pub fn dequantize_rows<T: Scalar>(qb: &QuantBlock) -> Result<DenseMat<T>> {
    let row_bytes = qb.bit_width.row_bytes(qb.feat_dim);
    if qb.packed.len() != qb.rows * row_bytes {
        return Err(Error::Shape(format!(
            "packed length {} does not match {} rows of {} bytes",
            qb.packed.len(),
            qb.rows,
            row_bytes
        )));
    }
    if qb.params.len() != qb.rows {
        return Err(Error::Shape(format!("{} params for {} rows", qb.params.len(), qb.rows)));
    }
    let mut out = DenseMat::zeros(qb.rows, qb.feat_dim);
    for r in 0..qb.rows {
        let QuantParams { zero_point, scale } = qb.params[r];
        let codes = unpack_codes(&qb.packed[r * row_bytes..(r + 1) * row_bytes], qb.feat_dim, qb.bit_width);
        let dst = out.row_mut(r);
        for (d, q) in dst.iter_mut().zip(codes) {
            *d = T::from_f64(q as f64 * scale as f64 + zero_point as f64);
        }
    }
    Ok(out)
}

/// Packs codes `b` bits each, lowest-order bits first.
pub fn pack_codes(codes: &[u8], b: BitWidth) -> Vec<u8> {
    let mut out = vec![0u8; b.row_bytes(codes.len())];
    let bits = b.bits();
    for (k, &q) in codes.iter().enumerate() {
        let bit_pos = k as u32 * bits;
        let byte = (bit_pos / 8) as usize;
        let shift = bit_pos % 8;
        out[byte] |= (q & ((1u32 << bits) - 1) as u8) << shift;
    }
    out
}

/// Inverse of [`pack_codes`] for a known element count.
pub fn unpack_codes(packed: &[u8], n: usize, b: BitWidth) -> Vec<u8> {
    let bits = b.bits();
    let mask = ((1u32 << bits) - 1) as u8;
    (0..n)
        .map(|k| {
            let bit_pos = k as u32 * bits;
            let byte = (bit_pos / 8) as usize;
            let shift = bit_pos % 8;
            (packed[byte] >> shift) & mask
        })
        .collect()
}

/// Byte breakdown of a quantized payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PayloadBytes {
    pub data: usize,
    pub params: usize,
}

impl PayloadBytes {
    pub fn total(&self) -> usize {
        self.data + self.params
    }
}

/// Bytes on the wire for `rows` quantized rows of width `f`: packed data
/// plus two FP32 parameters per row.
pub fn payload_bytes(rows: usize, f: usize, b: BitWidth) -> PayloadBytes {
    PayloadBytes { data: rows * b.row_bytes(f), params: rows * 2 * 4 }
}

/// Wire size of the same table left in FP32.
pub fn fp32_bytes(rows: usize, f: usize) -> usize {
    rows * f * 4
}

/// Serializes per-row parameters alone: interleaved `(Z, S)` FP32 pairs,
/// little-endian. Used when data and parameters travel as separate buffers.
pub fn encode_params(params: &[QuantParams]) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.len() * 8);
    for p in params {
        out.extend_from_slice(&p.zero_point.to_le_bytes());
        out.extend_from_slice(&p.scale.to_le_bytes());
    }
    out
}

/// Parses a buffer produced by [`encode_params`].
pub fn decode_params(bytes: &[u8]) -> Result<Vec<QuantParams>> {
    if bytes.len() % 8 != 0 {
        return Err(Error::InvalidInput(format!(
            "parameter buffer of {} bytes is not a whole number of (Z, S) pairs",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| QuantParams {
            zero_point: f32::from_le_bytes(c[0..4].try_into().unwrap()),
            scale: f32::from_le_bytes(c[4..8].try_into().unwrap()),
        })
        .collect())
}

const WIRE_HEADER: usize = 12;

/// Serializes a block: header `{rows u32, F u32, b u8, 3 pad bytes}`, then
/// interleaved `(Z, S)` FP32 pairs, then packed data. Little-endian.
pub fn encode_block(qb: &QuantBlock) -> Vec<u8> {
    let mut out = Vec::with_capacity(WIRE_HEADER + qb.params.len() * 8 + qb.packed.len());
    out.extend_from_slice(&(qb.rows as u32).to_le_bytes());
    out.extend_from_slice(&(qb.feat_dim as u32).to_le_bytes());
    out.push(qb.bit_width.bits() as u8);
    out.extend_from_slice(&[0u8; 3]);
    for p in &qb.params {
        out.extend_from_slice(&p.zero_point.to_le_bytes());
        out.extend_from_slice(&p.scale.to_le_bytes());
    }
    out.extend_from_slice(&qb.packed);
    out
}

/// Parses a block serialized by [`encode_block`].
pub fn decode_block(bytes: &[u8]) -> Result<QuantBlock> {
    if bytes.len() < WIRE_HEADER {
        return Err(Error::InvalidInput("quantized block shorter than its header".into()));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let feat_dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let bit_width = BitWidth::from_bits(bytes[8])?;
    let params_len = rows * 8;
    let data_len = rows * bit_width.row_bytes(feat_dim);
    if bytes.len() != WIRE_HEADER + params_len + data_len {
        return Err(Error::InvalidInput(format!(
            "quantized block of {} bytes, expected {}",
            bytes.len(),
            WIRE_HEADER + params_len + data_len
        )));
    }
    let mut params = Vec::with_capacity(rows);
    for r in 0..rows {
        let off = WIRE_HEADER + r * 8;
        params.push(QuantParams {
            zero_point: f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()),
            scale: f32::from_le_bytes(bytes[off + 4..off + 8].try_into().unwrap()),
        });
    }
    let packed = bytes[WIRE_HEADER + params_len..].to_vec();
    Ok(QuantBlock { rows, feat_dim, bit_width, params, packed })
}
