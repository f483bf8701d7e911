//! On-disk tensor bundles.
//!
//! A bundle is a directory holding `manifest.json` and one raw little-endian
//! row-major blob. Composite artifacts (models, datasets, checkpoints) are
//! directories of bundles.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LAYOUT: &str = "row-major";
pub const BYTE_ORDER: &str = "little-endian";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub name: String,
    pub shape: Vec<usize>,
    /// Kept as a string so an unknown dtype is reported as a format error
    /// naming the field rather than a generic parse failure.
    pub dtype: String,
    pub layout: String,
    pub byte_order: String,
    pub file: String,
    /// Free-form metadata, e.g. normalization statistics of a source set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Value>,
}

impl BundleManifest {
    pub fn dtype(&self) -> Result<DType> {
        match self.dtype.as_str() {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::format("dtype", format!("unknown dtype {other:?}"))),
        }
    }

    fn validate(&self) -> Result<DType> {
        if self.layout != LAYOUT {
            return Err(Error::format("layout", format!("expected {LAYOUT:?}, got {:?}", self.layout)));
        }
        if self.byte_order != BYTE_ORDER {
            return Err(Error::format(
                "byte_order",
                format!("expected {BYTE_ORDER:?}, got {:?}", self.byte_order),
            ));
        }
        if self.file.is_empty() || self.file.contains(['/', '\\']) || self.file == ".." {
            return Err(Error::format("file", format!("invalid blob name {:?}", self.file)));
        }
        self.dtype()
    }
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn save_bundle<T: Real>(tensor: &Tensor<T>, dir: &Path, name: &str) -> Result<()> {
    save_bundle_with_meta(tensor, dir, name, None)
}

pub fn save_bundle_with_meta<T: Real>(tensor: &Tensor<T>, dir: &Path, name: &str, meta: Option<Value>) -> Result<()> {
    create_dir(dir)?;
    let file = format!("{name}.bin");
    let manifest = BundleManifest {
        name: name.to_string(),
        shape: tensor.shape().to_vec(),
        dtype: T::DTYPE.as_str().to_string(),
        layout: LAYOUT.to_string(),
        byte_order: BYTE_ORDER.to_string(),
        file: file.clone(),
        meta,
    };
    manifest.validate()?;
    let mut bytes = Vec::with_capacity(tensor.len() * T::DTYPE.size());
    for &v in tensor.data() {
        v.write_le(&mut bytes);
    }
    let blob = dir.join(&file);
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    write_json(&dir.join(MANIFEST_FILE), &manifest)
}

pub fn read_manifest(dir: &Path) -> Result<BundleManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::format("manifest", format!("missing {}", path.display())));
    }
    read_json(&path)
}

/// Loads a bundle, converting to `T` if it was stored at the other precision.
pub fn load_bundle<T: Real>(dir: &Path) -> Result<Tensor<T>> {
    let manifest = read_manifest(dir)?;
    let dtype = manifest.validate()?;
    let blob = dir.join(&manifest.file);
    if !blob.exists() {
        return Err(Error::format("file", format!("missing blob {}", blob.display())));
    }
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let count: usize = manifest.shape.iter().product();
    let expected = count * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(
            "shape",
            format!(
                "blob {} holds {} bytes, shape {:?} of {} needs {expected}",
                manifest.file,
                bytes.len(),
                manifest.shape,
                dtype
            ),
        ));
    }
    let data: Vec<T> = match dtype {
        DType::F32 => bytes.chunks_exact(4).map(|b| T::from_f64(f32::read_le(b) as f64)).collect(),
        DType::F64 => bytes.chunks_exact(8).map(|b| T::from_f64(f64::read_le(b))).collect(),
    };
    Tensor::new(manifest.shape, data)
}

/// Named tensors saved as sibling bundles under one directory.
pub fn save_named<T: Real>(dir: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    for (name, t) in tensors {
        save_bundle(t, &dir.join(name), name)?;
    }
    Ok(())
}

pub fn load_named<T: Real>(dir: &Path, names: &[String]) -> Result<Vec<Tensor<T>>> {
    names.iter().map(|n| load_bundle(&dir.join(n))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngState;

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::randn(&mut RngState::new(0), [3, 5]);
        save_bundle(&t, dir.path(), "x").unwrap();
        let back: Tensor<f64> = load_bundle(dir.path()).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let t32 = t.cast::<f32>();
        save_bundle(&t32, dir.path(), "x32").unwrap();
        let back32: Tensor<f32> = load_bundle(dir.path()).unwrap();
        assert_eq!(back32, t32);
    }

    #[test]
    fn blob_bytes_are_little_endian() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::<f64>::new([2], vec![1.0, -2.5]).unwrap();
        save_bundle(&t, dir.path(), "v").unwrap();
        let bytes = fs::read(dir.path().join("v.bin")).unwrap();
        assert_eq!(&bytes[..8], &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f]);
        assert_eq!(&bytes[8..], &[0, 0, 0, 0, 0, 0, 0x04, 0xc0]);
    }

    #[test]
    fn truncated_blob_is_length_error() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&Tensor::<f32>::ones([4]), dir.path(), "t").unwrap();
        let blob = dir.path().join("t.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..10]).unwrap();
        match load_bundle::<f32>(dir.path()) {
            Err(Error::Format { field, .. }) => assert_eq!(field, "shape"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_and_missing_blob() {
        let dir = tempfile::tempdir().unwrap();
        save_bundle(&Tensor::<f32>::ones([2]), dir.path(), "t").unwrap();
        let mpath = dir.path().join(MANIFEST_FILE);
        let mut m: BundleManifest = read_json(&mpath).unwrap();
        m.dtype = "f16".into();
        write_json(&mpath, &m).unwrap();
        assert!(matches!(load_bundle::<f32>(dir.path()), Err(Error::Format { field, .. }) if field == "dtype"));

        m.dtype = "f32".into();
        write_json(&mpath, &m).unwrap();
        fs::remove_file(dir.path().join("t.bin")).unwrap();
        assert!(matches!(load_bundle::<f32>(dir.path()), Err(Error::Format { field, .. }) if field == "file"));
    }

    #[test]
    fn meta_is_preserved() {
        let dir = tempfile::tempdir().unwrap();
        let meta = serde_json::json!({"mean": [0.5, 0.4, 0.3]});
        save_bundle_with_meta(&Tensor::<f32>::ones([1]), dir.path(), "s", Some(meta.clone())).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap().meta, Some(meta));
    }
}
