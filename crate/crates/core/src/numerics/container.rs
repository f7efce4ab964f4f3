//! Binary tensor container.
//!
//! A file is a sequence of records. Each record is
//!
//! ```text
//! b"BEVT" | u32 LE header length | UTF-8 JSON header | little-endian payload
//! ```
//!
//! where the header is `{"dtype": "f32"|"f64", "shape": [..], "name": ".."}`
//! (`name` optional) and the payload holds `product(shape)` elements.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::array::{numel, ShapedArray};
use super::scalar::{DType, Scalar};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"BEVT";

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
}

/// A decoded record whose element type is known only at run time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyArray {
    F32(ShapedArray<f32>),
    F64(ShapedArray<f64>),
}

impl AnyArray {
    pub fn dtype(&self) -> DType {
        match self {
            AnyArray::F32(_) => DType::F32,
            AnyArray::F64(_) => DType::F64,
        }
    }

    pub fn to<T: Scalar>(&self) -> ShapedArray<T> {
        match self {
            AnyArray::F32(a) => a.cast(),
            AnyArray::F64(a) => a.cast(),
        }
    }
}

pub fn encode_record<T: Scalar>(name: Option<&str>, a: &ShapedArray<T>, out: &mut Vec<u8>) {
    let header = serde_json::to_string(&Header {
        dtype: T::DTYPE.name().to_string(),
        shape: a.shape().to_vec(),
        name: name.map(str::to_string),
    })
    .expect("header serializes");
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.reserve(a.len() * T::DTYPE.size());
    for &v in a.data() {
        v.write_le(out);
    }
}

/// Decode every record in `bytes`.
pub fn decode_records(mut bytes: &[u8]) -> Result<Vec<(Option<String>, AnyArray)>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        if bytes.len() < 8 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing BEVT magic".into()));
        }
        let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let rest = &bytes[8..];
        if rest.len() < hlen {
            return Err(Error::Format("truncated header".into()));
        }
        let text = std::str::from_utf8(&rest[..hlen]).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: Header = serde_json::from_str(text).map_err(|e| Error::Format(format!("bad header: {e}")))?;
        let dtype = DType::parse(&header.dtype).ok_or_else(|| Error::Format(format!("unknown dtype {}", header.dtype)))?;
        let n = numel(&header.shape);
        let plen = n * dtype.size();
        let payload = &rest[hlen..];
        if payload.len() < plen {
            return Err(Error::Format(format!("payload needs {plen} bytes, {} left", payload.len())));
        }
        let body = &payload[..plen];
        let arr = match dtype {
            DType::F32 => AnyArray::F32(ShapedArray::new(header.shape, body.chunks(4).map(f32::read_le).collect())?),
            DType::F64 => AnyArray::F64(ShapedArray::new(header.shape, body.chunks(8).map(f64::read_le).collect())?),
        };
        out.push((header.name, arr));
        bytes = &payload[plen..];
    }
    Ok(out)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<(Option<String>, AnyArray)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_records(&bytes)
}

/// Write a single unnamed tensor.
pub fn save<T: Scalar>(path: &Path, a: &ShapedArray<T>) -> Result<()> {
    let mut buf = Vec::new();
    encode_record(None, a, &mut buf);
    write_file(path, &buf)
}

/// Read a file holding exactly one tensor.
pub fn load<T: Scalar>(path: &Path) -> Result<ShapedArray<T>> {
    let mut recs = read_file(path)?;
    if recs.len() != 1 {
        return Err(Error::Format(format!("expected one record, found {}", recs.len())));
    }
    Ok(recs.pop().unwrap().1.to())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let a = ShapedArray::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        encode_record(None, &a, &mut buf);
        let header = br#"{"dtype":"f32","shape":[2]}"#;
        let mut want = b"BEVT".to_vec();
        want.extend_from_slice(&(header.len() as u32).to_le_bytes());
        want.extend_from_slice(header);
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(buf, want);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode_records(b"NOPE\0\0\0\0").is_err());
        let mut buf = Vec::new();
        encode_record(Some("x"), &ShapedArray::<f64>::zeros(&[3]), &mut buf);
        buf.truncate(buf.len() - 1);
        assert!(matches!(decode_records(&buf), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn records_round_trip(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u64>(), name in "[a-z.]{0,8}") {
            let a = ShapedArray::<f64>::from_fn(&shape, |i| (i as f64 + seed as f64 * 1e-3).sin());
            let b = a.cast::<f32>();
            let mut buf = Vec::new();
            encode_record(Some(&name), &a, &mut buf);
            encode_record(None, &b, &mut buf);
            let recs = decode_records(&buf).unwrap();
            prop_assert_eq!(recs.len(), 2);
            prop_assert_eq!(recs[0].0.as_deref(), Some(name.as_str()));
            prop_assert_eq!(&recs[0].1, &AnyArray::F64(a));
            prop_assert_eq!(&recs[1].1, &AnyArray::F32(b));
        }
    }
}
