//! Byte format for trained models.
//!
//! ```text
//! magic     b"ZSLM"
//! version   u32 (1)
//! method    u32 byte length + UTF-8
//! seed      u64
//! hyper     u32 count, then per entry: u32 length + UTF-8 name, f64 value
//! blocks    u32 count, then per block: u32 length + UTF-8 name,
//!           u32 rows, u32 cols, rows*cols f64 in row-major order
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, ZslError};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"ZSLM";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major.
    pub data: Vec<f64>,
}

/// Method id, hyperparameters, seed and named parameter matrices of a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct CompatModel {
    pub method: String,
    pub seed: u64,
    pub hyper: BTreeMap<String, f64>,
    pub blocks: Vec<ParamBlock>,
}

/// Conversion between a method's trained model and [`CompatModel`].
pub trait Persist<T: Scalar>: Sized {
    fn write_blocks(&self, out: &mut CompatModel);
    fn read_blocks(model: &CompatModel) -> Result<Self>;
}

impl CompatModel {
    pub fn new(method: impl Into<String>, seed: u64, hyper: BTreeMap<String, f64>) -> Self {
        Self {
            method: method.into(),
            seed,
            hyper,
            blocks: Vec::new(),
        }
    }

    pub fn push_matrix<T: Scalar>(&mut self, name: &str, m: &DMatrix<T>) {
        let mut data = Vec::with_capacity(m.len());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                data.push(m[(r, c)].as_f64());
            }
        }
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        });
    }

    pub fn push_vector<T: Scalar>(&mut self, name: &str, v: &DVector<T>) {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            rows: v.len(),
            cols: 1,
            data: v.iter().map(|x| x.as_f64()).collect(),
        });
    }

    pub fn push_scalar(&mut self, name: &str, v: f64) {
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            rows: 1,
            cols: 1,
            data: vec![v],
        });
    }

    pub fn block(&self, name: &str) -> Result<&ParamBlock> {
        self.blocks
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| ZslError::ModelFormat {
                offset: 0,
                message: format!("missing parameter block `{name}`"),
            })
    }

    pub fn matrix<T: Scalar>(&self, name: &str) -> Result<DMatrix<T>> {
        let b = self.block(name)?;
        Ok(DMatrix::from_row_iterator(
            b.rows,
            b.cols,
            b.data.iter().map(|&x| T::of(x)),
        ))
    }

    pub fn vector<T: Scalar>(&self, name: &str) -> Result<DVector<T>> {
        let b = self.block(name)?;
        Ok(DVector::from_iterator(b.data.len(), b.data.iter().map(|&x| T::of(x))))
    }

    pub fn scalar(&self, name: &str) -> Result<f64> {
        let b = self.block(name)?;
        b.data.first().copied().ok_or_else(|| ZslError::ModelFormat {
            offset: 0,
            message: format!("empty block `{name}`"),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.method);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.hyper.len() as u32).to_le_bytes());
        for (k, v) in &self.hyper {
            put_str(&mut out, k);
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.blocks.len() as u32).to_le_bytes());
        for b in &self.blocks {
            put_str(&mut out, &b.name);
            out.extend_from_slice(&(b.rows as u32).to_le_bytes());
            out.extend_from_slice(&(b.cols as u32).to_le_bytes());
            for v in &b.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let method = r.string()?;
        let seed = r.u64()?;
        let n_hyper = r.u32()?;
        let mut hyper = BTreeMap::new();
        for _ in 0..n_hyper {
            let k = r.string()?;
            let v = r.f64()?;
            hyper.insert(k, v);
        }
        let n_blocks = r.u32()?;
        let mut blocks = Vec::with_capacity(n_blocks as usize);
        for _ in 0..n_blocks {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let len = rows
                .checked_mul(cols)
                .ok_or_else(|| r.fail("block size overflow"))?;
            if r.remaining() < len.saturating_mul(8) {
                return Err(r.fail(&format!("block `{name}` truncated")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(r.f64()?);
            }
            blocks.push(ParamBlock {
                name,
                rows,
                cols,
                data,
            });
        }
        if r.remaining() != 0 {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self {
            method,
            seed,
            hyper,
            blocks,
        })
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: &str) -> ZslError {
        ZslError::ModelFormat {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.fail("unexpected end of input"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail("invalid UTF-8"))
    }
}
