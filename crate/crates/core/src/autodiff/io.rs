//! Tensor files: raw little-endian `f32` in `<stem>.bin` and a JSON sidecar
//! `<stem>.json` holding `{"shape": [...], "dtype": "f32", "order": "row-major"}`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub order: String,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

pub fn encode_f32(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn decode_f32(bytes: &[u8]) -> Option<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return None;
    }
    Some(
        bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    )
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn write_tensor(stem: &Path, tensor: &Tensor<f32>) -> Result<()> {
    let bin = with_ext(stem, "bin");
    let json = with_ext(stem, "json");
    fs::write(&bin, encode_f32(tensor.data())).map_err(|e| Error::io(&bin, e))?;
    let header = TensorHeader {
        shape: tensor.shape().to_vec(),
        dtype: "f32".into(),
        order: "row-major".into(),
    };
    let text = serde_json::to_string(&header).expect("header serializes");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_tensor(stem: &Path) -> Result<Tensor<f32>> {
    let bin = with_ext(stem, "bin");
    let json = with_ext(stem, "json");
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: TensorHeader = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: json.clone(),
        source: e,
    })?;
    if header.dtype != "f32" || header.order != "row-major" {
        return Err(Error::Format {
            path: json,
            reason: format!("unsupported dtype/order {}/{}", header.dtype, header.order),
        });
    }
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let data = decode_f32(&bytes).ok_or_else(|| Error::Format {
        path: bin.clone(),
        reason: "length is not a multiple of 4".into(),
    })?;
    Tensor::new(&header.shape, data).map_err(|e| Error::Format {
        path: bin,
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip(shape in prop::collection::vec(1usize..5, 1..5), seed in any::<u32>()) {
            let dir = tempfile::tempdir().unwrap();
            let n: usize = shape.iter().product();
            let t = Tensor::new(&shape, (0..n).map(|i| (i as f32 + seed as f32).sin() * 1e3).collect()).unwrap();
            let stem = dir.path().join("t");
            write_tensor(&stem, &t).unwrap();
            let back = read_tensor(&stem).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert_eq!(back.data(), t.data());
        }
    }

    #[test]
    fn sidecar_format() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        write_tensor(&stem, &Tensor::new(&[2, 1], vec![1.0, -2.0]).unwrap()).unwrap();
        let json = fs::read_to_string(dir.path().join("x.json")).unwrap();
        assert_eq!(json, r#"{"shape":[2,1],"dtype":"f32","order":"row-major"}"#);
        let bin = fs::read(dir.path().join("x.bin")).unwrap();
        assert_eq!(bin, [1.0f32.to_le_bytes(), (-2.0f32).to_le_bytes()].concat());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("x");
        write_tensor(&stem, &Tensor::new(&[2], vec![1.0, 2.0]).unwrap()).unwrap();
        fs::write(dir.path().join("x.bin"), [0u8; 5]).unwrap();
        assert!(read_tensor(&stem).is_err());
    }
}
