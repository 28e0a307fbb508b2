//! Binary weight files.
//!
//! Little-endian layout: magic `EVFW`, `u16` version (1), `u32` tensor count,
//! then per tensor a `u16` name length, the UTF-8 name, `u8` dtype
//! (0 = f32, 1 = f64), `u8` rank, `u32` dims and the raw elements. The file
//! ends with a `u64` holding the sum of all preceding bytes modulo 2^64.
//!
//! The first tensor, `model/<architecture>/<head>`, records the input
//! resolution as `[height, width, channels]` so that a model can be rebuilt
//! from the file alone.

use std::path::Path;

use super::{Architecture, Head, Model};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

const MAGIC: &[u8; 4] = b"EVFW";
const VERSION: u16 = 1;

/// Byte sum used as the file trailer.
pub fn weight_checksum(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0u64, |acc, &b| acc.wrapping_add(b as u64))
}

fn push_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(T::DTYPE as u8);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.to_le_bytes_vec(out);
    }
}

/// Serializes a model to the weight-file byte layout.
pub fn encode_weights<T: Real>(model: &Model<T>) -> Vec<u8> {
    let tensors = model.named_tensors();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&((tensors.len() + 1) as u32).to_le_bytes());
    let (h, w) = model.resolution();
    let header = Tensor::<T>::from_parts(
        vec![3],
        vec![
            T::from_usize(h).unwrap(),
            T::from_usize(w).unwrap(),
            T::from_usize(3).unwrap(),
        ],
    );
    push_tensor(
        &mut out,
        &format!("model/{}/{}", model.architecture().name(), model.head().name()),
        &header,
    );
    for (name, t) in tensors {
        push_tensor(&mut out, &name, t);
    }
    let sum = weight_checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn save_weights<T: Real>(model: &Model<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_weights(model)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::WeightFormat(format!(
                "truncated while reading {field} at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

struct RawTensor<T> {
    name: String,
    tensor: Tensor<T>,
}

fn read_tensor<T: Real>(r: &mut Reader<'_>, index: usize) -> Result<RawTensor<T>> {
    let len = r.u16("name length")? as usize;
    let name = std::str::from_utf8(r.take(len, "name")?)
        .map_err(|_| Error::WeightFormat(format!("tensor {index}: name is not UTF-8")))?
        .to_string();
    let dtype = r.u8("dtype")?;
    if dtype != T::DTYPE as u8 {
        return Err(Error::WeightFormat(format!(
            "tensor {name}: dtype {dtype} does not match requested {:?}",
            T::DTYPE
        )));
    }
    let rank = r.u8("rank")? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32("dims")? as usize);
    }
    let count: usize = shape.iter().product();
    let width = match T::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let raw = r.take(count * width, &format!("data of {name}"))?;
    let data: Vec<T> = raw.chunks_exact(width).map(T::from_le_slice).collect();
    let tensor = Tensor::new(&shape, data)
        .map_err(|e| Error::WeightFormat(format!("tensor {name}: {e}")))?;
    Ok(RawTensor { name, tensor })
}

/// Parses a weight file produced by [`encode_weights`].
pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    if bytes.len() < 4 + 2 + 4 + 8 {
        return Err(Error::WeightFormat("truncated header".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::WeightFormat("bad magic (expected EVFW)".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::WeightFormat(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for i in 0..count {
        tensors.push(read_tensor::<T>(&mut r, i)?);
    }
    if r.pos != body.len() {
        return Err(Error::WeightFormat(format!(
            "{} unexpected bytes after tensor data",
            body.len() - r.pos
        )));
    }
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    let actual = weight_checksum(body);
    if stored != actual {
        return Err(Error::WeightFormat(format!(
            "checksum mismatch: stored {stored}, computed {actual}"
        )));
    }

    let mut iter = tensors.into_iter();
    let header = iter
        .next()
        .ok_or_else(|| Error::WeightFormat("no model header tensor".into()))?;
    let mut parts = header.name.split('/');
    let (arch, head) = match (parts.next(), parts.next(), parts.next(), parts.next()) {
        (Some("model"), Some(a), Some(h), None) => (
            Architecture::parse(a)
                .ok_or_else(|| Error::WeightFormat(format!("unknown architecture {a:?}")))?,
            Head::parse(h).ok_or_else(|| Error::WeightFormat(format!("unknown head {h:?}")))?,
        ),
        _ => {
            return Err(Error::WeightFormat(format!(
                "first tensor must be the model header, got {:?}",
                header.name
            )))
        }
    };
    let dims = header.tensor.data();
    if dims.len() != 3 {
        return Err(Error::WeightFormat("model header must hold 3 dims".into()));
    }
    let h = dims[0].to_usize().unwrap_or(0);
    let w = dims[1].to_usize().unwrap_or(0);
    let mut model = Model::<T>::build(arch, head, h, w, 0)
        .map_err(|e| Error::WeightFormat(format!("model header: {e}")))?;

    let expected = model.named_tensors().len();
    let mut seen = 0usize;
    for raw in iter {
        let slot = model
            .named_tensor_mut(&raw.name)
            .ok_or_else(|| Error::WeightFormat(format!("unexpected tensor {}", raw.name)))?;
        if slot.shape() != raw.tensor.shape() {
            return Err(Error::WeightFormat(format!(
                "layer {}: declared shape {:?} does not match architecture shape {:?}",
                raw.name,
                raw.tensor.shape(),
                slot.shape()
            )));
        }
        *slot = raw.tensor;
        seen += 1;
    }
    if seen != expected {
        return Err(Error::WeightFormat(format!(
            "file holds {seen} tensors, architecture needs {expected}"
        )));
    }
    Ok(model)
}

pub fn load_weights<T: Real>(path: impl AsRef<Path>) -> Result<Model<T>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        Model::epoch(Head::Classification, 16, 16, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let m = small();
        let back: Model<f32> = decode_weights(&encode_weights(&m)).unwrap();
        for ((na, a), (nb, b)) in m.named_tensors().into_iter().zip(back.named_tensors()) {
            assert_eq!(na, nb);
            assert_eq!(a.shape(), b.shape());
            let ab: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
        assert_eq!(back.architecture(), Architecture::Epoch);
        assert_eq!(back.resolution(), (16, 16));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = encode_weights(&small());
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_weights::<f32>(&bytes[..cut]).is_err(), "cut {cut}");
        }
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = encode_weights(&small());
        let i = bytes.len() - 20;
        bytes[i] ^= 0x40;
        let err = decode_weights::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_and_version_named() {
        let mut bytes = encode_weights(&small());
        bytes[0] = b'X';
        assert!(decode_weights::<f32>(&bytes).unwrap_err().to_string().contains("magic"));
        let mut bytes = encode_weights(&small());
        bytes[4] = 9;
        assert!(decode_weights::<f32>(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn mismatched_shape_names_layer() {
        // a 16x16 header with tensors from a 24x24 model: the dense layer differs
        let big = Model::<f32>::epoch(Head::Classification, 24, 24, 3).unwrap();
        let mut bytes = encode_weights(&big);
        // patch the header dims (first tensor data) from 24 to 16
        let name = b"model/epoch/classification";
        let start = 4 + 2 + 4 + 2 + name.len() + 1 + 1 + 4;
        for k in 0..2 {
            bytes[start + 4 * k..start + 4 * k + 4].copy_from_slice(&16f32.to_le_bytes());
        }
        let body_len = bytes.len() - 8;
        let sum = weight_checksum(&bytes[..body_len]);
        bytes[body_len..].copy_from_slice(&sum.to_le_bytes());
        let err = decode_weights::<f32>(&bytes).unwrap_err().to_string();
        assert!(err.contains("13.dense.weights"), "{err}");
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let bytes = encode_weights(&small());
        let err = decode_weights::<f64>(&bytes).unwrap_err().to_string();
        assert!(err.contains("dtype"), "{err}");
    }
}
