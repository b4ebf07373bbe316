//! Dense row-major tensors and the `.mmt` raw tensor container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! "MMT1" | rank: u8 | rank x u32 extents | dtype: u8 (0 = f32, 1 = f64) | payload
//! ```

use std::fmt::{Debug, Display};
use std::io::{Read, Write};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::path::Path;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub const MMT_MAGIC: &[u8; 4] = b"MMT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            t => Err(Error::Format(format!("unknown dtype tag {t}"))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating-point element type usable by tensors and the autodiff graph.
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: DType;

    /// Lossy conversion from an `f64` constant.
    fn c(v: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;

    #[inline]
    fn c(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;

    #[inline]
    fn c(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Debug> Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

impl<F: Real> Tensor<F> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<F>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {numel} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: F) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn scalar(value: F) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Builds a tensor from `f64` values, converting to `F`.
    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| F::c(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::c(v.f64())).collect() }
    }

    pub fn max_abs_diff(&self, other: &Tensor<F>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.f64() - b.f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Serializes into the `.mmt` container layout.
    pub fn to_mmt_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + self.numel() * F::DTYPE.size());
        out.extend_from_slice(MMT_MAGIC);
        encode_body(&mut out, &self.shape, &self.data)?;
        Ok(out)
    }

    pub fn write_mmt(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_mmt_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }
}

/// A tensor whose element type is only known at runtime (decoded from disk).
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn to<F: Real>(&self) -> Tensor<F> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn to_mmt_bytes(&self) -> Result<Vec<u8>> {
        match self {
            AnyTensor::F32(t) => t.to_mmt_bytes(),
            AnyTensor::F64(t) => t.to_mmt_bytes(),
        }
    }

    pub fn from_mmt_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MMT_MAGIC {
            return Err(Error::Format("missing MMT1 magic".into()));
        }
        let mut cursor = &bytes[4..];
        let t = decode_body(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after payload", cursor.len())));
        }
        Ok(t)
    }

    pub fn read_mmt(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_mmt_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            e => e,
        })
    }
}

impl<F: Real> From<Tensor<F>> for AnyTensor {
    fn from(t: Tensor<F>) -> Self {
        match F::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }
}

/// Writes `rank | extents | dtype | payload` (everything after the magic).
pub(crate) fn encode_body<F: Real>(out: &mut Vec<u8>, shape: &[usize], data: &[F]) -> Result<()> {
    let rank = u8::try_from(shape.len())
        .map_err(|_| Error::Format(format!("rank {} exceeds 255", shape.len())))?;
    out.push(rank);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(F::DTYPE.tag());
    for &v in data {
        v.write_le(out);
    }
    Ok(())
}

pub(crate) fn decode_body(cursor: &mut &[u8]) -> Result<AnyTensor> {
    let rank = read_u8(cursor)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(cursor)? as usize);
    }
    let dtype = DType::from_tag(read_u8(cursor)?)?;
    let numel: usize = shape.iter().product();
    let nbytes = numel * dtype.size();
    if cursor.len() < nbytes {
        return Err(Error::Format(format!(
            "truncated payload: need {nbytes} bytes for shape {shape:?}, have {}",
            cursor.len()
        )));
    }
    let (payload, rest) = cursor.split_at(nbytes);
    *cursor = rest;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(Tensor::new(shape, payload.chunks_exact(4).map(f32::read_le).collect())?),
        DType::F64 => AnyTensor::F64(Tensor::new(shape, payload.chunks_exact(8).map(f64::read_le).collect())?),
    })
}

pub(crate) fn read_u8(cursor: &mut &[u8]) -> Result<u8> {
    let mut b = [0u8; 1];
    cursor.read_exact(&mut b).map_err(|_| Error::Format("unexpected end of data".into()))?;
    Ok(b[0])
}

pub(crate) fn read_u32(cursor: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    cursor.read_exact(&mut b).map_err(|_| Error::Format("unexpected end of data".into()))?;
    Ok(u32::from_le_bytes(b))
}
