//! The `UQSG` array file format.
//!
//! Layout, all integers little-endian:
//!
//! | bytes        | field                                   |
//! |--------------|-----------------------------------------|
//! | 4            | magic `UQSG`                            |
//! | 2            | `u16` version, currently 1              |
//! | 1            | `u8` dtype: 0 float32, 1 uint8, 2 int32 |
//! | 1            | `u8` rank                               |
//! | 4 × rank     | `u32` dimensions                        |
//! | remainder    | row-major payload                       |

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::volume::{IntensityVolume, LabelVolume, ProbabilityVolume};

pub const MAGIC: [u8; 4] = *b"UQSG";
pub const FORMAT_VERSION: u16 = 1;

const FIXED_HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U8,
    I32,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::U8 => 1,
            Dtype::I32 => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::U8),
            2 => Ok(Dtype::I32),
            other => Err(Error::UnsupportedDtype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 | Dtype::I32 => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArrayFileHeader {
    pub version: u16,
    pub dtype: Dtype,
    pub shape: Vec<u32>,
}

impl ArrayFileHeader {
    pub fn payload_len(&self) -> usize {
        self.shape.iter().map(|&d| d as usize).product::<usize>() * self.dtype.size()
    }

    fn encode(&self, out: &mut Vec<u8>) -> Result<()> {
        let rank = u8::try_from(self.shape.len())
            .map_err(|_| Error::Format(format!("rank {} exceeds 255", self.shape.len())))?;
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.dtype.code());
        out.push(rank);
        for d in &self.shape {
            out.extend_from_slice(&d.to_le_bytes());
        }
        Ok(())
    }

    /// Parses the header, returning it with the number of bytes consumed.
    fn decode(bytes: &[u8]) -> Result<(Self, usize)> {
        if bytes.len() < 4 {
            return Err(Error::Truncated {
                expected: FIXED_HEADER_LEN,
                found: bytes.len(),
            });
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                &bytes[..4],
                MAGIC
            )));
        }
        if bytes.len() < FIXED_HEADER_LEN {
            return Err(Error::Truncated {
                expected: FIXED_HEADER_LEN,
                found: bytes.len(),
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dtype = Dtype::from_code(bytes[6])?;
        let rank = bytes[7] as usize;
        let header_len = FIXED_HEADER_LEN + 4 * rank;
        if bytes.len() < header_len {
            return Err(Error::Truncated {
                expected: header_len,
                found: bytes.len(),
            });
        }
        let shape = bytes[FIXED_HEADER_LEN..header_len]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((
            Self {
                version,
                dtype,
                shape,
            },
            header_len,
        ))
    }
}

/// A typed, dynamically shaped array as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(ArrayD<f32>),
    U8(ArrayD<u8>),
    I32(ArrayD<i32>),
}

impl ArrayData {
    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::U8(_) => Dtype::U8,
            ArrayData::I32(_) => Dtype::I32,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            ArrayData::F32(a) => a.shape(),
            ArrayData::U8(a) => a.shape(),
            ArrayData::I32(a) => a.shape(),
        }
    }

    pub fn header(&self) -> Result<ArrayFileHeader> {
        let shape = self
            .shape()
            .iter()
            .map(|&d| {
                u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))
            })
            .collect::<Result<_>>()?;
        Ok(ArrayFileHeader {
            version: FORMAT_VERSION,
            dtype: self.dtype(),
            shape,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = self.header()?;
        let mut out = Vec::with_capacity(16 + header.payload_len());
        header.encode(&mut out)?;
        // `iter` walks in logical row-major order regardless of memory layout.
        match self {
            ArrayData::F32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            ArrayData::U8(a) => out.extend(a.iter().copied()),
            ArrayData::I32(a) => a.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, offset) = ArrayFileHeader::decode(bytes)?;
        let payload = &bytes[offset..];
        let expected = header.payload_len();
        if payload.len() < expected {
            return Err(Error::Truncated {
                expected: offset + expected,
                found: bytes.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Format(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }
        let shape = IxDyn(&header.shape.iter().map(|&d| d as usize).collect::<Vec<_>>());
        let data = match header.dtype {
            Dtype::F32 => ArrayData::F32(ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
            .expect("length checked")),
            Dtype::U8 => ArrayData::U8(
                ArrayD::from_shape_vec(shape, payload.to_vec()).expect("length checked"),
            ),
            Dtype::I32 => ArrayData::I32(ArrayD::from_shape_vec(
                shape,
                payload
                    .chunks_exact(4)
                    .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            )
            .expect("length checked")),
        };
        Ok(data)
    }

    pub fn write<W: Write>(&self, writer: &mut W) -> Result<()> {
        writer.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read<R: Read>(reader: &mut R) -> Result<Self> {
        let mut buf = Vec::new();
        reader.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}

pub fn write_array(path: impl AsRef<Path>, array: &ArrayData) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, array.to_bytes()?).map_err(Error::at(path))
}

pub fn read_array(path: impl AsRef<Path>) -> Result<ArrayData> {
    let path = path.as_ref();
    ArrayData::from_bytes(&fs::read(path).map_err(Error::at(path))?)
}

fn expect_f32(data: ArrayData, what: &str) -> Result<ArrayD<f32>> {
    match data {
        ArrayData::F32(a) => Ok(a),
        other => Err(Error::Format(format!(
            "{what} must be float32, found {:?}",
            other.dtype()
        ))),
    }
}

impl ProbabilityVolume {
    /// Rank 4 `(class, depth, height, width)` float32 array.
    pub fn to_array_data(&self) -> ArrayData {
        ArrayData::F32(self.values().mapv(|v| v as f32).into_dyn())
    }

    /// Accepts rank 4 volumes or rank 3 `(class, height, width)` slices.
    pub fn from_array_data(data: ArrayData) -> Result<Self> {
        let a = expect_f32(data, "probability volume")?.mapv(f64::from);
        match a.ndim() {
            3 => Self::from_slice(a.into_dimensionality().expect("rank checked")),
            4 => Self::new(a.into_dimensionality().expect("rank checked")),
            r => Err(Error::shape(format!(
                "probability volume must be rank 3 or 4, got rank {r}"
            ))),
        }
    }
}

impl IntensityVolume {
    pub fn to_array_data(&self) -> ArrayData {
        ArrayData::F32(self.values().mapv(|v| v as f32).into_dyn())
    }

    pub fn from_array_data(data: ArrayData) -> Result<Self> {
        let a = expect_f32(data, "intensity volume")?.mapv(f64::from);
        match a.ndim() {
            2 => Self::from_slice(a.into_dimensionality().expect("rank checked")),
            3 => Self::new(a.into_dimensionality().expect("rank checked")),
            r => Err(Error::shape(format!(
                "intensity volume must be rank 2 or 3, got rank {r}"
            ))),
        }
    }
}

impl LabelVolume {
    pub fn to_array_data(&self) -> ArrayData {
        ArrayData::U8(self.values().clone().into_dyn())
    }

    /// Reads uint8 (or non-negative int32) labels; the class count is
    /// inferred from the largest code unless `class_count` is given.
    pub fn from_array_data(data: ArrayData, class_count: Option<usize>) -> Result<Self> {
        let a = match data {
            ArrayData::U8(a) => a,
            ArrayData::I32(a) => {
                if let Some(v) = a.iter().find(|&&v| !(0..=255).contains(&v)) {
                    return Err(Error::invalid(format!("label {v} does not fit a class code")));
                }
                a.mapv(|v| v as u8)
            }
            ArrayData::F32(_) => {
                return Err(Error::Format("label volume must be uint8 or int32".into()))
            }
        };
        let a = match a.ndim() {
            2 => a.insert_axis(ndarray::Axis(0)),
            3 => a,
            r => {
                return Err(Error::shape(format!(
                    "label volume must be rank 2 or 3, got rank {r}"
                )))
            }
        };
        let a = a.into_dimensionality().expect("rank checked");
        match class_count {
            Some(c) => Self::new(a, c),
            None => Self::with_inferred_classes(a),
        }
    }
}
