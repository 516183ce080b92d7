//! Selective attribute anonymization for face-like images.
//!
//! An anonymized image is `T = (tanh(I + w) + 1) / 2`, where the perturbation
//! `w` is optimized with Adam so that chosen attribute classifiers change
//! their prediction, other attributes keep theirs, an identity embedding stays
//! close and `||I - T||^2` stays small.
//!
//! The crate carries everything needed to demonstrate this end to end: a
//! small reverse-mode autodiff engine ([`tape`]), a synthetic labeled dataset
//! ([`data`]), attribute and identity networks ([`nn`]), the attack itself
//! ([`anonymize`]) and the evaluation metrics ([`metrics`], [`report`]).

pub mod adam;
pub mod anonymize;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod tape;
pub mod tenfile;
pub mod tensor;

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Writes pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
