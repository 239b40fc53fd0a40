//! Flat binary bundle format.
//!
//! ```text
//! "DMDA"            4 bytes
//! version           u32 LE
//! dims              11 x u32 LE: input h, w, c, conv channels, K, C, M,
//!                   approximator hidden, kernel, stride, pad
//! parameters        f64 LE, declaration order (see ModelBundle::parameters)
//! ```

use std::path::Path;

use super::{init_bundle, Architecture, ModelBundle};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"DMDA";
pub const BUNDLE_VERSION: u32 = 1;
const DIM_COUNT: usize = 11;

pub fn write_bundle_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let a = &bundle.arch;
    let dims = [
        a.input_height,
        a.input_width,
        a.input_channels,
        a.conv_channels,
        a.feature_channels,
        a.classes,
        a.domains,
        a.approx_hidden,
        a.kernel_size,
        bundle.f.conv1.stride,
        bundle.f.conv1.pad,
    ];
    let mut out = Vec::with_capacity(8 + 4 * DIM_COUNT + 8 * bundle.parameter_count());
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for (_, p) in bundle.parameters() {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_bundle_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    if bytes.len() < 4 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::BadMagic);
    }
    let u32_at = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| Error::BundleFormat("truncated header".into()))
    };
    let version = u32_at(4)?;
    if version != BUNDLE_VERSION {
        return Err(Error::BundleFormat(format!(
            "unsupported version {version}"
        )));
    }
    let mut dims = [0usize; DIM_COUNT];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = u32_at(8 + 4 * i)? as usize;
    }
    let arch = Architecture {
        input_height: dims[0],
        input_width: dims[1],
        input_channels: dims[2],
        conv_channels: dims[3],
        feature_channels: dims[4],
        classes: dims[5],
        domains: dims[6],
        approx_hidden: dims[7],
        kernel_size: dims[8],
    };
    let (stride, pad) = (dims[9], dims[10]);
    if stride != 1 || pad != arch.pad() {
        return Err(Error::BundleFormat(format!(
            "unsupported conv stride {stride} / pad {pad}"
        )));
    }
    let mut bundle = init_bundle(arch, 0).map_err(|e| Error::BundleFormat(e.to_string()))?;
    let body = &bytes[8 + 4 * DIM_COUNT..];
    let expected = bundle.parameter_count() * 8;
    if body.len() != expected {
        return Err(Error::BundleFormat(format!(
            "expected {expected} parameter bytes, found {}",
            body.len()
        )));
    }
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for p in bundle.parameters_mut() {
        for slot in p.data_mut() {
            *slot = values.next().expect("length checked");
        }
    }
    if bundle.parameters().iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::BundleFormat("non-finite parameter".into()));
    }
    Ok(bundle)
}

pub fn write_bundle(bundle: &ModelBundle, path: &Path) -> Result<()> {
    std::fs::write(path, write_bundle_bytes(bundle)).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<ModelBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bundle_bytes(&bytes)
}
