use std::io::{Read, Write};

use super::Scalar;
use crate::{Error, Result};

/// Dense tensor: a shape and row-major data.
///
/// Rank is arbitrary but almost everything in the model is rank 1 or 2.
/// `requires_grad` marks leaves the tape should produce gradients for.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![F::zero(); numel],
            requires_grad: false,
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
        }
    }

    /// Rank-2 tensor from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "from_rows",
                    lhs: vec![r, c],
                    rhs: vec![row.len()],
                });
            }
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    /// Rows of a rank-2 tensor (a rank-1 tensor counts as a single row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            1 => 1,
            2 => self.shape[0],
            _ => panic!("rows() on rank-{} tensor", self.shape.len()),
        }
    }

    /// Columns of a rank-2 tensor (length for rank 1).
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            1 => self.shape[0],
            2 => self.shape[1],
            _ => panic!("cols() on rank-{} tensor", self.shape.len()),
        }
    }

    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols() + c]
    }

    pub fn row(&self, r: usize) -> &[F] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Serialize one named tensor chunk: u16 name length, UTF-8 name, u8 rank,
/// rank x u32 dims, then the payload as little-endian 64-bit reals in
/// row-major order.
pub fn write_tensor_chunk<F: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    tensor: &Tensor<F>,
) -> std::io::Result<()> {
    let name_bytes = name.as_bytes();
    assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
    w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
    w.write_all(name_bytes)?;
    assert!(tensor.shape.len() <= u8::MAX as usize);
    w.write_all(&[tensor.shape.len() as u8])?;
    for &dim in &tensor.shape {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in &tensor.data {
        w.write_all(&v.to_f64_lossy().to_le_bytes())?;
    }
    Ok(())
}

/// Inverse of [`write_tensor_chunk`]. `source` names the stream for errors.
pub fn read_tensor_chunk<F: Scalar, R: Read>(
    r: &mut R,
    source: &str,
) -> Result<(String, Tensor<F>)> {
    let mut u16buf = [0u8; 2];
    read_exact(r, &mut u16buf, source, "tensor name length")?;
    let name_len = u16::from_le_bytes(u16buf) as usize;
    let mut name_bytes = vec![0u8; name_len];
    read_exact(r, &mut name_bytes, source, "tensor name")?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| Error::format(source, "tensor name is not UTF-8"))?;

    let mut rank_buf = [0u8; 1];
    read_exact(r, &mut rank_buf, source, "tensor rank")?;
    let rank = rank_buf[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut u32buf = [0u8; 4];
    for _ in 0..rank {
        read_exact(r, &mut u32buf, source, "tensor dim")?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    let mut f64buf = [0u8; 8];
    for _ in 0..numel {
        read_exact(r, &mut f64buf, source, "tensor payload")?;
        data.push(F::from_f64_lossy(f64::from_le_bytes(f64buf)));
    }
    Ok((name, Tensor::from_vec(shape, data)?))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], source: &str, what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::format(source, format!("truncated while reading {what}")))
}
