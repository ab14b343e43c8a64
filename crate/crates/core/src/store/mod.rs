//! Persistence: the FQBT container format and float checkpoint
//! ingestion.
//!
//! FQBT layout (all integers little-endian):
//!
//! ```text
//! magic "FQBT" | version u16 | reserved u16 | payload crc32 u32
//! config block: 12 x u32
//! n_tensors u32
//! per tensor: name_len u16, name, dtype u8,
//!             scale (mantissa u8, exp2 i16),
//!             ndim u8, dims u32 x ndim, offset u64, length u64
//! zero padding to a 64-byte boundary
//! payload (every tensor offset 64-byte aligned, gaps zeroed)
//! ```
//!
//! 4-bit tensors pack two values per byte, little nibble first; an odd
//! element count leaves the final high nibble zero. The CRC32 (IEEE
//! polynomial) covers the payload only.

mod checkpoint;

pub use checkpoint::{
    calibrate, checkpoint_schema, compression_report, export_float_checkpoint,
    import_float_checkpoint, model_from_container, model_to_container, quantize_model, CalibStream,
    CompressionReport,
};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::qnum::{QTensor, Scale8};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"FQBT";
pub const VERSION: u16 = 1;
pub const ALIGN: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    I4Packed,
    I8,
    U8,
    I32,
    Scale8E,
    LnParam8,
    F32,
    Requant,
    I2Packed,
}

impl DType {
    fn to_u8(self) -> u8 {
        match self {
            DType::I4Packed => 0,
            DType::I8 => 1,
            DType::U8 => 2,
            DType::I32 => 3,
            DType::Scale8E => 4,
            DType::LnParam8 => 5,
            DType::F32 => 6,
            DType::Requant => 7,
            DType::I2Packed => 8,
        }
    }

    fn from_u8(v: u8) -> Result<DType> {
        Ok(match v {
            0 => DType::I4Packed,
            1 => DType::I8,
            2 => DType::U8,
            3 => DType::I32,
            4 => DType::Scale8E,
            5 => DType::LnParam8,
            6 => DType::F32,
            7 => DType::Requant,
            8 => DType::I2Packed,
            other => return Err(Error::Format(format!("unknown dtype tag {other}"))),
        })
    }

    /// Logical payload length for an element count.
    pub fn byte_len(self, elems: usize) -> u64 {
        match self {
            DType::I2Packed => elems.div_ceil(4) as u64,
            DType::I4Packed => elems.div_ceil(2) as u64,
            DType::I8 | DType::U8 | DType::LnParam8 => elems as u64,
            DType::I32 | DType::F32 => 4 * elems as u64,
            DType::Scale8E => 3,
            DType::Requant => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub scale: Option<Scale8>,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

impl TensorEntry {
    pub fn elems(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FqbtContainer {
    pub version: u16,
    pub config: ModelConfig,
    pub entries: Vec<TensorEntry>,
    pub payload: Vec<u8>,
}

// CRC32, IEEE 802.3 polynomial (reflected 0xEDB88320).
fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 {
                0xEDB8_8320 ^ (c >> 1)
            } else {
                c >> 1
            };
        }
        *slot = c;
    }
    table
}

pub fn crc32(data: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in data {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

/// Pack signed 4-bit values two per byte, little nibble first. Odd
/// lengths leave the final high nibble zero.
pub fn pack_i4(values: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len().div_ceil(2));
    for pair in values.chunks(2) {
        let lo = (pair[0] & 0xF) as u8;
        let hi = if pair.len() == 2 {
            (pair[1] & 0xF) as u8
        } else {
            0
        };
        out.push(lo | (hi << 4));
    }
    out
}

/// Inverse of [`pack_i4`]: sign-extend each nibble.
pub fn unpack_i4(bytes: &[u8], n: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let b = bytes[i / 2];
        let nib = if i % 2 == 0 { b & 0xF } else { b >> 4 };
        out.push(((nib ^ 8) as i32) - 8);
    }
    out
}

/// Pack 2-bit values four per byte, lowest crumb first; a tail shorter
/// than four leaves the unused crumbs zero.
pub fn pack_i2(values: &[i32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len().div_ceil(4));
    for group in values.chunks(4) {
        let mut b = 0u8;
        for (i, &v) in group.iter().enumerate() {
            b |= ((v & 0x3) as u8) << (2 * i);
        }
        out.push(b);
    }
    out
}

/// Inverse of [`pack_i2`]: sign-extend each 2-bit field.
pub fn unpack_i2(bytes: &[u8], n: usize) -> Vec<i32> {
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let crumb = (bytes[i / 4] >> (2 * (i % 4))) & 0x3;
        out.push(((crumb ^ 2) as i32) - 2);
    }
    out
}

/// Incremental container builder keeping offsets 64-byte aligned.
#[derive(Debug, Default)]
pub struct ContainerBuilder {
    entries: Vec<TensorEntry>,
    payload: Vec<u8>,
}

impl ContainerBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        dtype: DType,
        scale: Option<Scale8>,
        shape: Vec<usize>,
        bytes: &[u8],
    ) {
        while !(self.payload.len() as u64).is_multiple_of(ALIGN) {
            self.payload.push(0);
        }
        let offset = self.payload.len() as u64;
        self.payload.extend_from_slice(bytes);
        self.entries.push(TensorEntry {
            name: name.into(),
            dtype,
            scale,
            shape,
            offset,
            length: bytes.len() as u64,
        });
    }

    pub fn add_qtensor(&mut self, name: impl Into<String>, t: &QTensor) {
        let (dtype, bytes) = qtensor_bytes(t);
        self.add(name, dtype, Some(t.scale), t.shape.clone(), &bytes);
    }

    /// Like [`Self::add_qtensor`] but packed at the quantization
    /// bitwidth when it is denser than the storage width (2-bit
    /// weights occupy a quarter byte each).
    pub fn add_qtensor_quant(&mut self, name: impl Into<String>, t: &QTensor, quant_bits: u8) {
        if quant_bits == 2 && t.signed && t.data.iter().all(|&v| (-2..=1).contains(&v)) {
            let bytes = pack_i2(&t.data);
            self.add(
                name,
                DType::I2Packed,
                Some(t.scale),
                t.shape.clone(),
                &bytes,
            );
        } else {
            self.add_qtensor(name, t);
        }
    }

    pub fn finish(self, config: ModelConfig) -> FqbtContainer {
        FqbtContainer {
            version: VERSION,
            config,
            entries: self.entries,
            payload: self.payload,
        }
    }
}

pub fn qtensor_bytes(t: &QTensor) -> (DType, Vec<u8>) {
    match (t.bits, t.signed) {
        (4, true) => (DType::I4Packed, pack_i4(&t.data)),
        (8, true) => (DType::I8, t.data.iter().map(|&v| v as i8 as u8).collect()),
        (8, false) => (DType::U8, t.data.iter().map(|&v| v as u8).collect()),
        (32, true) => (
            DType::I32,
            t.data.iter().flat_map(|&v| v.to_le_bytes()).collect(),
        ),
        _ => unreachable!("QTensor storage is validated at construction"),
    }
}

pub fn qtensor_from_entry(e: &TensorEntry, bytes: &[u8]) -> Result<QTensor> {
    let n = e.elems();
    let scale = e
        .scale
        .ok_or_else(|| Error::Format(format!("tensor `{}` lacks a scale", e.name)))?;
    let data: Vec<i32> = match e.dtype {
        DType::I2Packed => unpack_i2(bytes, n),
        DType::I4Packed => unpack_i4(bytes, n),
        DType::I8 => bytes.iter().map(|&b| b as i8 as i32).collect(),
        DType::U8 => bytes.iter().map(|&b| b as i32).collect(),
        DType::I32 => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => {
            return Err(Error::Format(format!(
                "`{}` is not an integer tensor ({other:?})",
                e.name
            )))
        }
    };
    let (bits, signed) = match e.dtype {
        DType::I2Packed | DType::I4Packed => (4, true),
        DType::I8 => (8, true),
        DType::U8 => (8, false),
        _ => (32, true),
    };
    QTensor::new(data, bits, signed, e.shape.clone(), scale)
}

impl FqbtContainer {
    pub fn tensor_bytes(&self, e: &TensorEntry) -> &[u8] {
        &self.payload[e.offset as usize..(e.offset + e.length) as usize]
    }

    pub fn find(&self, name: &str) -> Result<&TensorEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&crc32(&self.payload).to_le_bytes());
        let c = &self.config;
        for v in [
            c.num_layers,
            c.hidden,
            c.heads,
            c.head_dim,
            c.ffn_dim,
            c.seq_len,
            c.vocab_size,
            c.max_position,
            c.type_vocab,
            c.num_classes,
            c.w_bits as usize,
            c.a_bits as usize,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(e.dtype.to_u8());
            let (m, x) = e.scale.map_or((0u8, 0i16), |s| (s.mantissa, s.exp2));
            out.push(m);
            out.extend_from_slice(&x.to_le_bytes());
            out.push(e.shape.len() as u8);
            for &d in &e.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&e.offset.to_le_bytes());
            out.extend_from_slice(&e.length.to_le_bytes());
        }
        while !(out.len() as u64).is_multiple_of(ALIGN) {
            out.push(0);
        }
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<FqbtContainer> {
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > data.len() {
                return Err(Error::Format("truncated container".into()));
            }
            let s = &data[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("bad magic (not an FQBT file)".into()));
        }
        let version = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
        if version > VERSION {
            return Err(Error::Version {
                found: version,
                supported: VERSION,
            });
        }
        take(&mut pos, 2)?; // reserved
        let stored_crc = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());

        let mut cfg = [0usize; 12];
        for slot in cfg.iter_mut() {
            *slot = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        }
        let config = ModelConfig {
            num_layers: cfg[0],
            hidden: cfg[1],
            heads: cfg[2],
            head_dim: cfg[3],
            ffn_dim: cfg[4],
            seq_len: cfg[5],
            vocab_size: cfg[6],
            max_position: cfg[7],
            type_vocab: cfg[8],
            num_classes: cfg[9],
            w_bits: cfg[10] as u8,
            a_bits: cfg[11] as u8,
        };

        let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let mut entries = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let dtype = DType::from_u8(take(&mut pos, 1)?[0])?;
            let mantissa = take(&mut pos, 1)?[0];
            let exp2 = i16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap());
            let scale = if mantissa == 0 {
                None
            } else {
                Some(Scale8 { mantissa, exp2 })
            };
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let offset = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            let length = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
            if offset % ALIGN != 0 {
                return Err(Error::Format(format!(
                    "tensor `{name}` offset {offset} is not {ALIGN}-byte aligned"
                )));
            }
            entries.push(TensorEntry {
                name,
                dtype,
                scale,
                shape,
                offset,
                length,
            });
        }
        while !(pos as u64).is_multiple_of(ALIGN) {
            take(&mut pos, 1)?;
        }
        let payload = data[pos..].to_vec();
        for e in &entries {
            if e.offset + e.length > payload.len() as u64 {
                return Err(Error::Format(format!(
                    "tensor `{}` extends past the payload (truncated?)",
                    e.name
                )));
            }
            if e.length != e.dtype.byte_len(e.elems()) {
                return Err(Error::Format(format!(
                    "tensor `{}` length {} does not match shape {:?}",
                    e.name, e.length, e.shape
                )));
            }
        }
        let computed = crc32(&payload);
        if computed != stored_crc {
            return Err(Error::Checksum {
                stored: stored_crc,
                computed,
            });
        }
        Ok(FqbtContainer {
            version,
            config,
            entries,
            payload,
        })
    }
}

pub fn save(container: &FqbtContainer, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&container.to_bytes())?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FqbtContainer> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    FqbtContainer::from_bytes(&data)
}
