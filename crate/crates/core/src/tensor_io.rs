//! The on-disk tensor format: one JSON header line followed by raw
//! contiguous little-endian values.
//!
//! ```text
//! {"shape":[4,16,16],"dtype":"f64","byte_order":"little"}\n
//! <product(shape) * sizeof(dtype) bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::tensor::{ImageTensor, LatentTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    shape: Vec<usize>,
    dtype: DType,
    byte_order: String,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl TensorFile {
    pub fn f64(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self {
            shape,
            data: TensorData::F64(data),
        }
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            shape,
            data: TensorData::F32(data),
        }
    }

    fn len(&self) -> usize {
        match &self.data {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if self.shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape(format!(
                "shape {:?} does not match {} values",
                self.shape,
                self.len()
            )));
        }
        let header = Header {
            shape: self.shape.clone(),
            dtype: match self.data {
                TensorData::F32(_) => DType::F32,
                TensorData::F64(_) => DType::F64,
            },
            byte_order: "little".into(),
        };
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut line = serde_json::to_string(&header)?;
        line.push('\n');
        let io = |e| Error::io(path, e);
        w.write_all(line.as_bytes()).map_err(io)?;
        match &self.data {
            TensorData::F32(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
            TensorData::F64(v) => {
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io)?;
                }
            }
        }
        w.flush().map_err(io)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let io = |e| Error::io(path, e);
        let mut r = BufReader::new(File::open(path).map_err(io)?);
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: Header = serde_json::from_str(line.trim_end())
            .map_err(|e| Error::Format(format!("{}: bad tensor header: {e}", path.display())))?;
        if header.byte_order != "little" {
            return Err(Error::Format(format!(
                "{}: unsupported byte order {}",
                path.display(),
                header.byte_order
            )));
        }
        let n: usize = header.shape.iter().product();
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(io)?;
        let width = match header.dtype {
            DType::F32 => 4,
            DType::F64 => 8,
        };
        if bytes.len() != n * width {
            return Err(Error::Format(format!(
                "{}: expected {} payload bytes, found {}",
                path.display(),
                n * width,
                bytes.len()
            )));
        }
        let data = match header.dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Self {
            shape: header.shape,
            data,
        })
    }
}

pub fn write_matrix(path: impl AsRef<Path>, m: &Matrix) -> Result<()> {
    TensorFile::f64(vec![m.rows(), m.cols()], m.as_slice().to_vec()).write(path)
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let t = TensorFile::read(path)?;
    let (rows, cols) = match t.shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        other => {
            return Err(Error::Format(format!(
                "{}: expected a matrix, found shape {other:?}",
                path.display()
            )))
        }
    };
    Matrix::from_vec(rows, cols, t.to_f64())
}

pub fn write_latent(path: impl AsRef<Path>, z: &LatentTensor) -> Result<()> {
    let (c, h, w) = z.shape();
    TensorFile::f64(vec![c, h, w], z.as_slice().to_vec()).write(path)
}

pub fn read_latent(path: impl AsRef<Path>) -> Result<LatentTensor> {
    let path = path.as_ref();
    let t = TensorFile::read(path)?;
    match t.shape.as_slice() {
        [c, h, w] => LatentTensor::from_vec((*c, *h, *w), t.to_f64()),
        other => Err(Error::Format(format!(
            "{}: expected a latent (c, h, w), found shape {other:?}",
            path.display()
        ))),
    }
}

pub fn write_image_tensor(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let (c, h, w) = img.shape();
    TensorFile::f32(vec![c, h, w], img.as_slice().to_vec()).write(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f64_tensors_round_trip_bit_exactly(values in proptest::collection::vec(any::<f64>(), 1..64)) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("t.tns");
            let t = TensorFile::f64(vec![values.len()], values.clone());
            t.write(&p).unwrap();
            let back = TensorFile::read(&p).unwrap();
            let TensorData::F64(v) = back.data else { panic!("dtype changed") };
            prop_assert_eq!(
                v.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn header_is_a_single_json_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        TensorFile::f32(vec![2, 1], vec![1.0, 2.0]).write(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        let nl = bytes.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&bytes[..nl]).unwrap();
        assert_eq!(header["dtype"], "f32");
        assert_eq!(header["byte_order"], "little");
        assert_eq!(header["shape"], serde_json::json!([2, 1]));
        assert_eq!(&bytes[nl + 1..nl + 5], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), nl + 1 + 8);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.tns");
        std::fs::write(&p, b"{\"shape\":[3],\"dtype\":\"f64\",\"byte_order\":\"little\"}\n1234").unwrap();
        assert!(matches!(TensorFile::read(&p), Err(Error::Format(_))));
    }
}
