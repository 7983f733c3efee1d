//! Dense 4-D `f64` tensor in (batch, channels, height, width) order.
//!
//! Matrices are stored as `(batch, 1, rows, cols)` and scalars as `(1, 1, 1, 1)`.
//! The gradient plane is allocated on first use by the tape.

use std::fmt::Write as _;
use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"M3TN";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    /// Shape of a batch of `rows × cols` matrices.
    pub const fn matrix(batch: usize, rows: usize, cols: usize) -> Self {
        Self::new(batch, 1, rows, cols)
    }

    pub const fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}x{}x{}x{}",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.numel()],
            grad: None,
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.numel()],
            grad: None,
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(shape_err(
                "Tensor::from_vec",
                format!("{} values for shape {shape}", data.len()),
            ));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: Shape::scalar(),
            data: vec![v],
            grad: None,
        }
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: Shape, f: impl FnMut(usize) -> f64) -> Self {
        Self {
            shape,
            data: (0..shape.numel()).map(f).collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.shape.index(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: f64) {
        let i = self.shape.index(b, c, y, x);
        self.data[i] = v;
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Same data under a new shape with equal element count.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(shape_err(
                "Tensor::reshape",
                format!("{} -> {}", self.shape, shape),
            ));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Writes the little-endian binary form: magic, four `u32` dims, `f64` payload.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(TENSOR_MAGIC)?;
        for d in self.shape.dims() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
        let mut data = Vec::with_capacity(shape.numel());
        let mut b = [0u8; 8];
        for _ in 0..shape.numel() {
            r.read_exact(&mut b)?;
            data.push(f64::from_le_bytes(b));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after payload".into()));
        }
        Tensor::from_vec(shape, data)
    }

    /// Human-readable dump, one line per (batch, channel, row).
    pub fn debug_dump(&self) -> String {
        let mut s = format!("tensor {}\n", self.shape);
        let sh = self.shape;
        for b in 0..sh.batch {
            for c in 0..sh.channels {
                let _ = writeln!(s, "[{b},{c}]");
                for y in 0..sh.height {
                    let row: Vec<String> = (0..sh.width)
                        .map(|x| format!("{:.6}", self.at(b, c, y, x)))
                        .collect();
                    let _ = writeln!(s, "  {}", row.join(" "));
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_is_little_endian() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"M3TN");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[16..20], &2u32.to_le_bytes());
        assert_eq!(&buf[20..28], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 4 + 16 + 16);
        let back = Tensor::read_binary(&buf[..]).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(Shape::new(1, 2, 2, 2));
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Tensor::read_binary(&bad[..]).is_err());
        assert!(Tensor::read_binary(&buf[..buf.len() - 3]).is_err());
        buf.push(0);
        assert!(Tensor::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_is_lazy() {
        let mut t = Tensor::zeros(Shape::new(1, 1, 2, 2));
        assert!(t.grad().is_none());
        t.grad_mut()[1] = 3.0;
        assert_eq!(t.grad().unwrap(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn debug_dump_lists_rows() {
        let t = Tensor::from_vec(Shape::new(1, 1, 2, 1), vec![1.0, 2.0]).unwrap();
        let d = t.debug_dump();
        assert!(d.starts_with("tensor 1x1x2x1"));
        assert!(d.contains("1.000000"));
        assert!(d.contains("2.000000"));
    }
}
