//! Portable tensor file format.
//!
//! One record is `b"TFF1"`, a `u8` rank, `rank` little-endian `u32`
//! dimensions, then the values as little-endian `f32` in row-major order.
//! A container file is a plain concatenation of records.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TFF1";

/// Integers stored in f32 headers must stay below this to be exact.
pub const MAX_EXACT_INT: u32 = 1 << 24;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::Format(format!(
                "record shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(self.data.clone(), &self.shape)
    }

    /// Rank-1 record of small non-negative integers.
    pub fn ints(values: &[u32]) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v >= MAX_EXACT_INT) {
            return Err(TensorError::Format(format!("integer {v} not exactly representable")));
        }
        Ok(Self {
            shape: vec![values.len()],
            data: values.iter().map(|&v| v as f32).collect(),
        })
    }

    pub fn as_ints(&self) -> Result<Vec<u32>> {
        self.data
            .iter()
            .map(|&v| {
                if v >= 0.0 && v.fract() == 0.0 && v < MAX_EXACT_INT as f32 {
                    Ok(v as u32)
                } else {
                    Err(TensorError::Format(format!("expected an integer, found {v}")))
                }
            })
            .collect()
    }

    /// Stores a u64 as four exact 16-bit limbs.
    pub fn u64_value(v: u64) -> Self {
        Self {
            shape: vec![4],
            data: (0..4).map(|i| ((v >> (16 * i)) & 0xffff) as f32).collect(),
        }
    }

    pub fn as_u64(&self) -> Result<u64> {
        let limbs = self.as_ints()?;
        if limbs.len() != 4 || limbs.iter().any(|&l| l > 0xffff) {
            return Err(TensorError::Format("malformed u64 record".into()));
        }
        Ok(limbs.iter().enumerate().fold(0u64, |acc, (i, &l)| acc | (l as u64) << (16 * i)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(TensorError::Format("rank exceeds 255".into()));
        }
        w.write_all(MAGIC)?;
        w.write_all(&[self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| TensorError::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    /// Reads one record; `Ok(None)` at a clean end of input.
    pub fn read_from(r: &mut impl Read) -> Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = r.read(&mut magic[got..])?;
            if n == 0 {
                break;
            }
            got += n;
        }
        match got {
            0 => return Ok(None),
            4 => {}
            _ => return Err(TensorError::Format("truncated magic".into())),
        }
        if &magic != MAGIC {
            return Err(TensorError::Format(format!("bad magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        read_exact(r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut b = [0u8; 4];
            read_exact(r, &mut b)?;
            shape.push(u32::from_le_bytes(b) as usize);
        }
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        read_exact(r, &mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some(Self { shape, data }))
    }
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format("truncated record".into()),
        _ => TensorError::Io(e),
    })
}

pub fn write_records(path: impl AsRef<Path>, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        r.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<Record>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    while let Some(rec) = Record::read_from(&mut r)? {
        out.push(rec);
    }
    Ok(out)
}

pub fn encode(records: &[Record]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        r.write_to(&mut buf)?;
    }
    Ok(buf)
}

pub fn decode(mut bytes: &[u8]) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    while let Some(rec) = Record::read_from(&mut bytes)? {
        out.push(rec);
    }
    Ok(out)
}

impl Tensor {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_records(path, &[Record::from_tensor(self)])
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Tensor> {
        let recs = read_records(path)?;
        match recs.as_slice() {
            [one] => one.to_tensor(),
            _ => Err(TensorError::Format(format!("expected one record, found {}", recs.len()))),
        }
    }
}
