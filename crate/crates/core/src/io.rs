//! JSON file plumbing shared by dataset, checkpoint, and report files.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{parse_error, Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

/// Real number written with 17 significant digits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        if !self.0.is_finite() {
            return Err(serde::ser::Error::custom("non-finite real"));
        }
        let raw = RawValue::from_string(format!("{:.16e}", self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Real {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(deserializer).map(Real)
    }
}

impl Real {
    pub(crate) fn of<T: Scalar>(x: T) -> Self {
        Real(x.as_f64())
    }

    pub(crate) fn get<T: Scalar>(self) -> T {
        T::of(self.0)
    }
}

/// Row-major matrix payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct MatrixRecord {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<Real>,
}

impl MatrixRecord {
    pub(crate) fn from_matrix<T: Scalar>(m: &Matrix<T>) -> Self {
        MatrixRecord { rows: m.rows(), cols: m.cols(), data: m.as_slice().iter().map(|&x| Real::of(x)).collect() }
    }

    pub(crate) fn to_matrix<T: Scalar>(&self, field: &str) -> Result<Matrix<T>> {
        Matrix::new(self.rows, self.cols, self.data.iter().map(|r| r.get()).collect())
            .map_err(|e| Error::validation(field, e.to_string()))
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    version: u64,
}

/// Parses a JSON document after checking its `version` field.
pub(crate) fn parse_versioned<D: DeserializeOwned>(text: &str, expected: u64) -> Result<D> {
    let probe: VersionProbe = serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text)).map_err(parse_error)?;
    if probe.version != expected {
        return Err(Error::UnsupportedVersion { found: probe.version, expected });
    }
    serde_path_to_error::deserialize(&mut serde_json::Deserializer::from_str(text)).map_err(parse_error)
}

pub(crate) fn read_versioned<D: DeserializeOwned>(path: &Path, expected: u64) -> Result<D> {
    parse_versioned(&fs::read_to_string(path)?, expected)
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string(value).map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Pretty-printed JSON followed by a newline, written atomically.
pub fn write_json_pretty<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
