//! Dense row-major tensors and the `VCT1` interchange format.
//!
//! Every array the artifact persists (betas, masks, embeddings, model
//! parameters, LM adapter messages) uses the same layout:
//!
//! ```text
//! "VCT1" | dtype: u8 | rank: u8 | shape: rank x u32 LE | values LE, C order
//! ```
//!
//! dtype codes: 0 = float32, 1 = float64, 2 = uint8 boolean.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VCT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    Bool = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Bool),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Bool => 1,
        }
    }
}

/// Dense f64 tensor, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Constructor for internal call sites where the size is known to agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Value of a rank-0 (or single element) tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero tensors".into()))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::Dimension(format!(
                    "stack of {:?} and {:?}",
                    first.shape(),
                    t.shape()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor { shape, data })
    }

    /// Sub-tensor at index `i` of the leading axis.
    pub fn index_axis0(&self, i: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(6 + 4 * self.rank() + dtype.width() * self.len());
        out.extend_from_slice(MAGIC);
        out.push(dtype as u8);
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match dtype {
            DType::F32 => {
                for &x in &self.data {
                    out.extend_from_slice(&(x as f32).to_le_bytes());
                }
            }
            DType::F64 => {
                for &x in &self.data {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            DType::Bool => out.extend(self.data.iter().map(|&x| u8::from(x != 0.0))),
        }
        out
    }

    /// Parses one tensor from the front of `bytes`; returns it with the number
    /// of bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<(Tensor, DType, usize), String> {
        if bytes.len() < 6 {
            return Err("truncated header".into());
        }
        if &bytes[..4] != MAGIC {
            return Err("bad magic".into());
        }
        let dtype = DType::from_code(bytes[4]).ok_or_else(|| format!("unknown dtype code {}", bytes[4]))?;
        let rank = bytes[5] as usize;
        let mut pos = 6;
        if bytes.len() < pos + 4 * rank {
            return Err("truncated shape".into());
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
            shape.push(d as usize);
            pos += 4;
        }
        let n: usize = shape.iter().product();
        let need = n * dtype.width();
        if bytes.len() < pos + need {
            return Err(format!("expected {need} payload bytes, found {}", bytes.len() - pos));
        }
        let payload = &bytes[pos..pos + need];
        let data: Vec<f64> = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::Bool => payload.iter().map(|&b| f64::from(b != 0)).collect(),
        };
        Ok((Tensor { shape, data }, dtype, pos + need))
    }

    pub fn write_to(&self, w: &mut impl Write, dtype: DType) -> std::io::Result<()> {
        w.write_all(&self.to_bytes(dtype))
    }

    /// Reads exactly one tensor from a stream.
    pub fn read_from(r: &mut impl Read) -> std::io::Result<Tensor> {
        let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let mut head = [0u8; 6];
        r.read_exact(&mut head)?;
        let rank = head[5] as usize;
        let mut shape_bytes = vec![0u8; 4 * rank];
        r.read_exact(&mut shape_bytes)?;
        let dtype = DType::from_code(head[4]).ok_or_else(|| invalid(format!("unknown dtype code {}", head[4])))?;
        let n: usize = shape_bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
            .product();
        let mut payload = vec![0u8; n * dtype.width()];
        r.read_exact(&mut payload)?;
        let mut all = head.to_vec();
        all.extend_from_slice(&shape_bytes);
        all.extend_from_slice(&payload);
        Tensor::from_bytes(&all).map(|(t, _, _)| t).map_err(invalid)
    }

    pub fn save(&self, path: &Path, dtype: DType) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, self.to_bytes(dtype)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        Self::load_with_dtype(path).map(|(t, _)| t)
    }

    pub fn load_with_dtype(path: &Path) -> Result<(Tensor, DType)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (t, dtype, used) = Tensor::from_bytes(&bytes).map_err(|reason| Error::Format {
            path: path.to_path_buf(),
            reason,
        })?;
        if used != bytes.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("{} trailing bytes", bytes.len() - used),
            });
        }
        Ok((t, dtype))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_exact() {
        let t = Tensor::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = t.to_bytes(DType::F32);
        assert_eq!(&b[..4], b"VCT1");
        assert_eq!(b[4], 0);
        assert_eq!(b[5], 2);
        assert_eq!(&b[6..10], &2u32.to_le_bytes());
        assert_eq!(&b[10..14], &1u32.to_le_bytes());
        assert_eq!(&b[14..18], &1.0f32.to_le_bytes());
        assert_eq!(&b[18..22], &(-2.0f32).to_le_bytes());
        assert_eq!(b.len(), 22);
    }

    #[test]
    fn bool_tensor_stores_one_byte_per_cell() {
        let t = Tensor::new(vec![3], vec![1.0, 0.0, 1.0]).unwrap();
        let b = t.to_bytes(DType::Bool);
        assert_eq!(&b[10..], &[1, 0, 1]);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(Tensor::from_bytes(b"VCT2\x01\x00").is_err());
        let mut b = Tensor::vector(vec![1.0, 2.0]).to_bytes(DType::F64);
        b.pop();
        assert!(Tensor::from_bytes(&b).is_err());
    }

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn f64_round_trip_is_bit_exact(
            shape in proptest::collection::vec(1usize..4, 0..4),
            seed in any::<u64>(),
        ) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n as u64)
                .map(|i| f64::from_bits(seed.wrapping_mul(i + 1).rotate_left(7) & 0x3fff_ffff_ffff_ffff))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let bytes = t.to_bytes(DType::F64);
            let (back, dtype, used) = Tensor::from_bytes(&bytes).unwrap();
            prop_assert_eq!(dtype, DType::F64);
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
            let mut cursor = std::io::Cursor::new(bytes);
            let streamed = Tensor::read_from(&mut cursor).unwrap();
            prop_assert_eq!(streamed.shape(), t.shape());
        }
    }
}
