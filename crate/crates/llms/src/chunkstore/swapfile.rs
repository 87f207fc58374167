//! One-chunk-per-file swap format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "LLMC" | version u16 | ctx_id u64 | chunk_index u32
//! | token_start u32 | token_count u16 | bitwidth u8
//! | layers u16 | heads u16 | head_dim u16
//! | scales f32 x channels | zero_points f32 x channels
//! | packed payload | crc32 u32
//! ```
//!
//! `channels = layers * 2 * heads * head_dim`. The payload is the
//! channel-major packed code stream for bitwidths 8/4/2, or raw f32 values
//! for bitwidth 32 (uncompressed chunks). The trailing CRC32 covers every
//! preceding byte.
//!
//! Channels are ordered (layer, K-or-V, head, dim) with the token index
//! innermost, so one layer's scales, zero points, and payload are each a
//! contiguous span — which is what lets the loader read a chunk file one
//! layer at a time while earlier layers are still being recomputed.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::quant::{packed_len, QuantizedChunkPayload};

pub const MAGIC: &[u8; 4] = b"LLMC";
pub const VERSION: u16 = 1;
/// Marker bitwidth for full-precision payloads.
pub const BITWIDTH_FULL: u8 = 32;

const HEADER_LEN: u64 = 4 + 2 + 8 + 4 + 4 + 2 + 1 + 2 + 2 + 2;

/// Fixed-size swap-file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwapHeader {
    pub ctx_id: u64,
    pub chunk_index: u32,
    pub token_start: u32,
    pub token_count: u16,
    pub bitwidth: u8,
    pub layers: u16,
    pub heads: u16,
    pub head_dim: u16,
}

impl SwapHeader {
    pub fn channels(&self) -> usize {
        self.layers as usize * 2 * self.heads as usize * self.head_dim as usize
    }

    pub fn channels_per_layer(&self) -> usize {
        2 * self.heads as usize * self.head_dim as usize
    }

    /// Packed payload length implied by the header.
    pub fn payload_len(&self) -> usize {
        let values = self.token_count as usize * self.channels();
        if self.bitwidth == BITWIDTH_FULL {
            values * 4
        } else {
            packed_len(values, self.bitwidth)
        }
    }

    fn write_to(&self, buf: &mut Vec<u8>) {
        buf.extend_from_slice(MAGIC);
        buf.write_u16::<LittleEndian>(VERSION).unwrap();
        buf.write_u64::<LittleEndian>(self.ctx_id).unwrap();
        buf.write_u32::<LittleEndian>(self.chunk_index).unwrap();
        buf.write_u32::<LittleEndian>(self.token_start).unwrap();
        buf.write_u16::<LittleEndian>(self.token_count).unwrap();
        buf.push(self.bitwidth);
        buf.write_u16::<LittleEndian>(self.layers).unwrap();
        buf.write_u16::<LittleEndian>(self.heads).unwrap();
        buf.write_u16::<LittleEndian>(self.head_dim).unwrap();
    }

    fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad swap-file magic".to_string()));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported swap-file version {version}")));
        }
        Ok(Self {
            ctx_id: r.read_u64::<LittleEndian>()?,
            chunk_index: r.read_u32::<LittleEndian>()?,
            token_start: r.read_u32::<LittleEndian>()?,
            token_count: r.read_u16::<LittleEndian>()?,
            bitwidth: r.read_u8()?,
            layers: r.read_u16::<LittleEndian>()?,
            heads: r.read_u16::<LittleEndian>()?,
            head_dim: r.read_u16::<LittleEndian>()?,
        })
    }
}

/// Serialized chunk contents: metadata arrays plus the packed payload.
#[derive(Debug, Clone, PartialEq)]
pub struct SwapBody {
    pub scales: Vec<f32>,
    pub zero_points: Vec<f32>,
    pub payload: Vec<u8>,
}

/// Serialize to a byte vector (header + body + CRC).
pub fn encode(header: &SwapHeader, body: &SwapBody) -> Result<Vec<u8>> {
    let channels = header.channels();
    if body.scales.len() != channels || body.zero_points.len() != channels {
        return Err(Error::Format(format!(
            "{} scales / {} zero points for {channels} channels",
            body.scales.len(),
            body.zero_points.len()
        )));
    }
    if body.payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload of {} bytes, header implies {}",
            body.payload.len(),
            header.payload_len()
        )));
    }
    let mut buf = Vec::with_capacity(HEADER_LEN as usize + channels * 8 + body.payload.len() + 4);
    header.write_to(&mut buf);
    for &s in &body.scales {
        buf.write_f32::<LittleEndian>(s).unwrap();
    }
    for &z in &body.zero_points {
        buf.write_f32::<LittleEndian>(z).unwrap();
    }
    buf.extend_from_slice(&body.payload);
    let crc = crc32fast::hash(&buf);
    buf.write_u32::<LittleEndian>(crc).unwrap();
    Ok(buf)
}

/// Parse and CRC-check a byte vector.
pub fn decode(bytes: &[u8]) -> Result<(SwapHeader, SwapBody)> {
    if bytes.len() < HEADER_LEN as usize + 4 {
        return Err(Error::Format("swap file truncated".to_string()));
    }
    let (data, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
    if crc32fast::hash(data) != stored {
        return Err(Error::Format("swap file CRC mismatch".to_string()));
    }
    let mut cursor = std::io::Cursor::new(data);
    let header = SwapHeader::read_from(&mut cursor)?;
    let channels = header.channels();
    let mut scales = Vec::with_capacity(channels);
    for _ in 0..channels {
        scales.push(cursor.read_f32::<LittleEndian>()?);
    }
    let mut zero_points = Vec::with_capacity(channels);
    for _ in 0..channels {
        zero_points.push(cursor.read_f32::<LittleEndian>()?);
    }
    let mut payload = Vec::new();
    cursor.read_to_end(&mut payload)?;
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload of {} bytes, header implies {}",
            payload.len(),
            header.payload_len()
        )));
    }
    Ok((header, SwapBody { scales, zero_points, payload }))
}

/// Write a chunk file; returns the bytes written.
pub fn write_file(path: &Path, header: &SwapHeader, body: &SwapBody) -> Result<u64> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let bytes = encode(header, body)?;
    fs::write(path, &bytes)?;
    Ok(bytes.len() as u64)
}

/// Read and verify a whole chunk file.
pub fn read_file(path: &Path) -> Result<(SwapHeader, SwapBody)> {
    decode(&fs::read(path)?)
}

/// Quantized payload reassembled from a swap body.
pub fn body_to_quantized(header: &SwapHeader, body: &SwapBody) -> Result<QuantizedChunkPayload> {
    if header.bitwidth == BITWIDTH_FULL {
        return Err(Error::Format("full-precision payload is not quantized".to_string()));
    }
    Ok(QuantizedChunkPayload {
        bitwidth: header.bitwidth,
        tokens: header.token_count as usize,
        channels: header.channels(),
        scales: body.scales.clone(),
        zero_points: body.zero_points.clone(),
        packed: body.payload.clone(),
    })
}

/// One layer's slice of a chunk file, as read by the pipelined loader.
#[derive(Debug, Clone)]
pub struct LayerSegment {
    pub layer: usize,
    pub scales: Vec<f32>,
    pub zero_points: Vec<f32>,
    pub payload: Vec<u8>,
}

/// Incremental per-layer reader over one chunk file.
///
/// The header is validated up front; each `read_layer` call seeks to that
/// layer's scales, zero points, and payload span. Layer payload spans must
/// be byte-aligned, which holds for every width the store writes (16-token
/// chunks at 8/4/2 bits, partial chunks at 8 bits, full precision).
pub struct ChunkFileReader {
    file: File,
    header: SwapHeader,
}

impl ChunkFileReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let header = SwapHeader::read_from(&mut file)?;
        Ok(Self { file, header })
    }

    pub fn header(&self) -> &SwapHeader {
        &self.header
    }

    pub fn read_layer(&mut self, layer: usize) -> Result<LayerSegment> {
        let h = &self.header;
        if layer >= h.layers as usize {
            return Err(Error::Format(format!("layer {layer} out of range")));
        }
        let cpl = h.channels_per_layer();
        let channels = h.channels();
        let ch_lo = layer * cpl;

        let scales_off = HEADER_LEN + (ch_lo * 4) as u64;
        let zps_off = HEADER_LEN + (channels * 4) as u64 + (ch_lo * 4) as u64;

        let values_per_layer = h.token_count as usize * cpl;
        let (payload_lo, payload_len) = if h.bitwidth == BITWIDTH_FULL {
            (values_per_layer * 4 * layer, values_per_layer * 4)
        } else {
            let bits_per_layer = values_per_layer * h.bitwidth as usize;
            if bits_per_layer % 8 != 0 {
                return Err(Error::Format(
                    "layer payload span is not byte-aligned".to_string(),
                ));
            }
            (bits_per_layer / 8 * layer, bits_per_layer / 8)
        };
        let payload_off = HEADER_LEN + (channels * 8) as u64 + payload_lo as u64;

        let mut scales = vec![0f32; cpl];
        self.file.seek(SeekFrom::Start(scales_off))?;
        for s in scales.iter_mut() {
            *s = self.file.read_f32::<LittleEndian>()?;
        }
        let mut zero_points = vec![0f32; cpl];
        self.file.seek(SeekFrom::Start(zps_off))?;
        for z in zero_points.iter_mut() {
            *z = self.file.read_f32::<LittleEndian>()?;
        }
        let mut payload = vec![0u8; payload_len];
        self.file.seek(SeekFrom::Start(payload_off))?;
        self.file.read_exact(&mut payload)?;

        Ok(LayerSegment { layer, scales, zero_points, payload })
    }
}
