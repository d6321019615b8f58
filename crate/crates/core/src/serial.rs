//! JSON helpers shared by every persisted artifact.
//!
//! Reals are written in scientific notation with 17 significant digits so
//! that a load reproduces the exact bit pattern of every finite `f64`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Serialize, Serializer};
use serde_json::value::RawValue;

use crate::error::{Error, Result};

pub(crate) fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn raw_real(x: f64) -> std::result::Result<Box<RawValue>, String> {
    if !x.is_finite() {
        return Err(format!("non-finite real {x} cannot be written as JSON"));
    }
    RawValue::from_string(format_real(x)).map_err(|e| e.to_string())
}

/// A real serialized at full precision.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Real(pub f64);

impl Serialize for Real {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        raw_real(self.0)
            .map_err(serde::ser::Error::custom)?
            .serialize(serializer)
    }
}

/// A slice of reals serialized at full precision.
pub(crate) struct Reals<'a>(pub &'a [f64]);

impl Serialize for Reals<'_> {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_seq(self.0.iter().map(|&x| Real(x)))
    }
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string(value)
        .map_err(|e| Error::parse(format!("serializing {}", path.display()), e))?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
