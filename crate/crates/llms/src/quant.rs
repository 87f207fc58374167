//! Channel-wise linear quantization of KV chunks with bit-packed storage.
//!
//! A chunk is quantized one channel at a time, where a channel is one
//! (layer, K-or-V, head, head-dim index) lane across the chunk's tokens.
//! Each channel gets an affine code grid: `x ≈ code * scale + zero_point`
//! with `scale = (max - min) / (2^b - 1)` and `zero_point = min`, so the
//! per-element reconstruction error is bounded by `scale / 2`.
//!
//! Codes are packed LSB-first into a little-endian byte stream: two 4-bit
//! or four 2-bit codes per byte, channel-major with the token index
//! innermost. The payload layout here is part of the swap-file format and
//! must stay bit-exact.

use crate::error::{Error, Result};

/// Bitwidths supported for chunk payloads.
pub const SUPPORTED_BITWIDTHS: [u8; 3] = [8, 4, 2];

/// A quantized chunk: per-channel scale/zero-point plus packed codes.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedChunkPayload {
    /// Code width in bits: 8, 4, or 2.
    pub bitwidth: u8,
    /// Values per channel (the chunk's token count).
    pub tokens: usize,
    /// Channel count: layers * 2 (K and V) * heads * head_dim.
    pub channels: usize,
    /// Per-channel code scale.
    pub scales: Vec<f32>,
    /// Per-channel zero point (the channel minimum).
    pub zero_points: Vec<f32>,
    /// Packed codes, LSB-first, little-endian byte stream.
    pub packed: Vec<u8>,
}

impl QuantizedChunkPayload {
    /// Payload size in bytes (codes only; scales/zero-points are metadata).
    pub fn payload_bytes(&self) -> usize {
        self.packed.len()
    }

    /// Metadata size in bytes: one f32 scale and one f32 zero point per channel.
    pub fn metadata_bytes(&self) -> usize {
        self.channels * 8
    }

    /// Compression ratio relative to the 8-bit base payload.
    pub fn ratio(&self) -> f64 {
        f64::from(self.bitwidth) / 8.0
    }
}

/// Packed byte length for `count` codes of width `bitwidth`.
pub fn packed_len(count: usize, bitwidth: u8) -> usize {
    (count * bitwidth as usize).div_ceil(8)
}

fn check_bitwidth(bitwidth: u8) -> Result<()> {
    if SUPPORTED_BITWIDTHS.contains(&bitwidth) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "unsupported bitwidth {bitwidth}; expected one of {SUPPORTED_BITWIDTHS:?}"
        )))
    }
}

/// Pack codes into an LSB-first little-endian byte stream.
///
/// Every code must already fit in `bitwidth` bits.
pub fn pack_codes(codes: &[u8], bitwidth: u8) -> Vec<u8> {
    let per_byte = 8 / bitwidth as usize;
    let mut out = vec![0u8; packed_len(codes.len(), bitwidth)];
    for (i, &code) in codes.iter().enumerate() {
        debug_assert!(u32::from(code) < (1 << bitwidth));
        let shift = (i % per_byte) * bitwidth as usize;
        out[i / per_byte] |= code << shift;
    }
    out
}

/// Unpack `count` codes from an LSB-first byte stream.
///
/// Fails if the stream is truncated or carries nonzero padding bits past
/// the last code (which would decode as out-of-range data elsewhere).
pub fn unpack_codes(packed: &[u8], count: usize, bitwidth: u8) -> Result<Vec<u8>> {
    let per_byte = 8 / bitwidth as usize;
    let expect = packed_len(count, bitwidth);
    if packed.len() != expect {
        return Err(Error::Format(format!(
            "packed payload is {} bytes, expected {expect}",
            packed.len()
        )));
    }
    let mask = if bitwidth == 8 { 0xff } else { (1u8 << bitwidth) - 1 };
    let mut codes = Vec::with_capacity(count);
    for i in 0..count {
        let shift = (i % per_byte) * bitwidth as usize;
        codes.push((packed[i / per_byte] >> shift) & mask);
    }
    // Padding bits in the final byte must be zero.
    if count % per_byte != 0 {
        let used_bits = (count % per_byte) * bitwidth as usize;
        let tail = packed[expect - 1] >> used_bits;
        if tail != 0 {
            return Err(Error::Format(
                "nonzero padding bits in final payload byte".to_string(),
            ));
        }
    }
    Ok(codes)
}

/// Quantize a chunk tensor (channel-major, `channels * tokens` values) to
/// the given bitwidth.
///
/// Per channel: `scale = (max - min) / (2^b - 1)` and codes are
/// `round((x - min) / scale)`, with round-half-to-even ties. A constant
/// channel degenerates to `scale = 1`, all codes 0.
pub fn quantize(values: &[f32], tokens: usize, bitwidth: u8) -> Result<QuantizedChunkPayload> {
    check_bitwidth(bitwidth)?;
    if tokens == 0 || values.is_empty() {
        return Err(Error::InvalidArgument("empty chunk".to_string()));
    }
    if values.len() % tokens != 0 {
        return Err(Error::InvalidArgument(format!(
            "value count {} not divisible by token count {tokens}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput);
    }
    let channels = values.len() / tokens;
    let max_code = (1u32 << bitwidth) - 1;

    let mut scales = Vec::with_capacity(channels);
    let mut zero_points = Vec::with_capacity(channels);
    let mut codes = Vec::with_capacity(values.len());
    for ch in 0..channels {
        let lane = &values[ch * tokens..(ch + 1) * tokens];
        let min = lane.iter().copied().fold(f32::INFINITY, f32::min);
        let max = lane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let scale = if max > min {
            ((f64::from(max) - f64::from(min)) / f64::from(max_code)) as f32
        } else {
            1.0
        };
        scales.push(scale);
        zero_points.push(min);
        let s = f64::from(scale);
        let z = f64::from(min);
        for &x in lane {
            let u = (f64::from(x) - z) / s;
            let c = u.round_ties_even().clamp(0.0, f64::from(max_code)) as u32;
            codes.push(c as u8);
        }
    }

    Ok(QuantizedChunkPayload {
        bitwidth,
        tokens,
        channels,
        scales,
        zero_points,
        packed: pack_codes(&codes, bitwidth),
    })
}

/// Reconstruct the full-precision chunk tensor from a payload.
///
/// Output is channel-major with the same shape as the quantizer input.
pub fn dequantize(payload: &QuantizedChunkPayload) -> Result<Vec<f32>> {
    check_bitwidth(payload.bitwidth)?;
    if payload.scales.len() != payload.channels || payload.zero_points.len() != payload.channels {
        return Err(Error::Format(format!(
            "metadata arrays ({} scales, {} zero points) do not match {} channels",
            payload.scales.len(),
            payload.zero_points.len(),
            payload.channels
        )));
    }
    let count = payload.tokens * payload.channels;
    let codes = unpack_codes(&payload.packed, count, payload.bitwidth)?;
    let mut out = Vec::with_capacity(count);
    for ch in 0..payload.channels {
        let s = f64::from(payload.scales[ch]);
        let z = f64::from(payload.zero_points[ch]);
        for t in 0..payload.tokens {
            let c = codes[ch * payload.tokens + t];
            out.push((f64::from(c) * s + z) as f32);
        }
    }
    Ok(out)
}

/// Re-quantize a payload at a strictly lower bitwidth.
///
/// The payload is reconstructed and quantized again; the packed size
/// shrinks by exactly the bitwidth ratio.
pub fn requantize(
    payload: &QuantizedChunkPayload,
    lower_bitwidth: u8,
) -> Result<QuantizedChunkPayload> {
    check_bitwidth(lower_bitwidth)?;
    if lower_bitwidth >= payload.bitwidth {
        return Err(Error::InvalidArgument(format!(
            "requantize target {lower_bitwidth} bits is not below current {} bits",
            payload.bitwidth
        )));
    }
    let values = dequantize(payload)?;
    quantize(&values, payload.tokens, lower_bitwidth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_channel_round_trips_exactly() {
        for &b in &SUPPORTED_BITWIDTHS {
            let p = quantize(&[5.0, 5.0, 5.0, 5.0], 4, b).unwrap();
            assert_eq!(p.scales, vec![1.0]);
            assert_eq!(p.zero_points, vec![5.0]);
            assert!(unpack_codes(&p.packed, 4, b).unwrap().iter().all(|&c| c == 0));
            assert_eq!(dequantize(&p).unwrap(), vec![5.0; 4]);
        }
    }

    #[test]
    fn grid_aligned_channel_is_exact_at_two_bits() {
        let p = quantize(&[0.0, 1.0, 2.0, 3.0], 4, 2).unwrap();
        assert_eq!(p.scales, vec![1.0]);
        assert_eq!(unpack_codes(&p.packed, 4, 2).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(dequantize(&p).unwrap(), vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn random_channel_error_within_half_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &b in &SUPPORTED_BITWIDTHS {
            let values: Vec<f32> = (0..100_000).map(|_| rng.random_range(-4.0..4.0)).collect();
            let tokens = values.len();
            let p = quantize(&values, tokens, b).unwrap();
            let back = dequantize(&p).unwrap();
            let bound = f64::from(p.scales[0]) / 2.0;
            for (x, y) in values.iter().zip(&back) {
                assert!(
                    (f64::from(*x) - f64::from(*y)).abs() <= bound,
                    "error exceeds scale/2 at bitwidth {b}"
                );
            }
        }
    }

    #[test]
    fn requantize_at_same_width_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for &b in &SUPPORTED_BITWIDTHS {
            let values: Vec<f32> = (0..64 * 16).map(|_| rng.random_range(-1.0..3.0)).collect();
            let p = quantize(&values, 16, b).unwrap();
            let again = quantize(&dequantize(&p).unwrap(), 16, b).unwrap();
            assert_eq!(p.packed, again.packed, "codes changed at bitwidth {b}");
            assert_eq!(p.scales, again.scales);
            assert_eq!(p.zero_points, again.zero_points);
        }
    }

    #[test]
    fn requantize_shrinks_by_bitwidth_ratio() {
        let values: Vec<f32> = (0..=255).map(|i| i as f32).collect();
        let p8 = quantize(&values, 256, 8).unwrap();
        let p4 = requantize(&p8, 4).unwrap();
        assert_eq!(p4.payload_bytes() * 2, p8.payload_bytes());
        let p2 = requantize(&p4, 2).unwrap();
        assert_eq!(p2.payload_bytes() * 4, p8.payload_bytes());
    }

    #[test]
    fn requantize_error_bounded_by_target_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let values: Vec<f32> = (0..16 * 32).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p8 = quantize(&values, 16, 8).unwrap();
        let recon8 = dequantize(&p8).unwrap();
        let p2 = requantize(&p8, 2).unwrap();
        let recon2 = dequantize(&p2).unwrap();
        for ch in 0..p2.channels {
            let bound = f64::from(p2.scales[ch]) / 2.0;
            for t in 0..16 {
                let i = ch * 16 + t;
                let err = (f64::from(recon8[i]) - f64::from(recon2[i])).abs();
                assert!(err <= bound, "8->2 error {err} above {bound}");
            }
        }
    }

    #[test]
    fn requantize_upward_is_an_argument_error() {
        let p = quantize(&[0.0, 1.0], 2, 4).unwrap();
        assert!(matches!(requantize(&p, 8), Err(Error::InvalidArgument(_))));
        assert!(matches!(requantize(&p, 4), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        assert!(matches!(
            quantize(&[1.0, f32::NAN], 2, 8),
            Err(Error::NonFiniteInput)
        ));
        assert!(matches!(
            quantize(&[f32::INFINITY, 0.0], 2, 4),
            Err(Error::NonFiniteInput)
        ));
    }

    #[test]
    fn truncated_payload_is_a_format_error() {
        let mut p = quantize(&[0.0, 1.0, 2.0, 3.0, 4.0], 5, 4).unwrap();
        p.packed.pop();
        assert!(matches!(dequantize(&p), Err(Error::Format(_))));
    }

    #[test]
    fn nonzero_padding_bits_are_a_format_error() {
        // Three 2-bit codes leave the final byte's top bits as padding.
        let mut p = quantize(&[0.0, 1.0, 2.0], 3, 2).unwrap();
        p.packed[0] |= 0b1100_0000;
        assert!(matches!(dequantize(&p), Err(Error::Format(_))));
    }

    #[test]
    fn payload_bytes_follow_exact_ratio_accounting() {
        // bytes(chunk at ratio r) = r * bytes(chunk at 8-bit), metadata aside.
        let values: Vec<f32> = (0..16 * 128).map(|i| (i % 97) as f32).collect();
        let p8 = quantize(&values, 16, 8).unwrap();
        let p4 = quantize(&values, 16, 4).unwrap();
        let p2 = quantize(&values, 16, 2).unwrap();
        assert_eq!(p8.payload_bytes(), 16 * 128);
        assert_eq!(p4.payload_bytes() as f64, 0.5 * p8.payload_bytes() as f64);
        assert_eq!(p2.payload_bytes() as f64, 0.25 * p8.payload_bytes() as f64);
        assert_eq!(p8.metadata_bytes(), p2.metadata_bytes());
    }

    proptest! {
        #[test]
        fn pack_unpack_is_a_bijection(
            codes in proptest::collection::vec(0u8..=255, 1..200),
            width in prop_oneof![Just(2u8), Just(4u8), Just(8u8)],
        ) {
            let mask = if width == 8 { 0xff } else { (1u8 << width) - 1 };
            let codes: Vec<u8> = codes.into_iter().map(|c| c & mask).collect();
            let packed = pack_codes(&codes, width);
            prop_assert_eq!(packed.len(), packed_len(codes.len(), width));
            let back = unpack_codes(&packed, codes.len(), width).unwrap();
            prop_assert_eq!(back, codes);
        }

        #[test]
        fn quantize_error_always_within_half_scale(
            lane in proptest::collection::vec(-1e3f32..1e3, 2..64),
            width in prop_oneof![Just(2u8), Just(4u8), Just(8u8)],
        ) {
            let tokens = lane.len();
            let p = quantize(&lane, tokens, width).unwrap();
            let back = dequantize(&p).unwrap();
            let bound = f64::from(p.scales[0]) / 2.0;
            for (x, y) in lane.iter().zip(&back) {
                prop_assert!((f64::from(*x) - f64::from(*y)).abs() <= bound);
            }
        }
    }
}
