//! HSIC v1: one ASCII JSON header line
//! `{"hsic":1,"h":H,"w":W,"c":C,"dtype":"f32","order":"bip"}` terminated by
//! `\n`, then `H*W*C` little-endian values in band-interleaved-by-pixel
//! order. Masks use the same layout with `"dtype":"u8"`, `"c":1` and 0/1
//! bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HsicHeader {
    pub hsic: u64,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub dtype: String,
    pub order: String,
}

impl HsicHeader {
    fn new(h: usize, w: usize, c: usize, dtype: &str) -> Self {
        HsicHeader {
            hsic: 1,
            h,
            w,
            c,
            dtype: dtype.into(),
            order: "bip".into(),
        }
    }
}

fn encode(header: &HsicHeader, payload: &[u8]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.extend_from_slice(payload);
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(HsicHeader, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Corrupt("missing HSIC header line".into()))?;
    let header: HsicHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Corrupt(format!("HSIC header: {e}")))?;
    if header.hsic != 1 {
        return Err(Error::UnsupportedVersion(header.hsic));
    }
    if header.order != "bip" {
        return Err(Error::Corrupt(format!("unsupported order `{}`", header.order)));
    }
    if header.h == 0 || header.w == 0 || header.c == 0 {
        return Err(Error::Corrupt(format!(
            "empty dimensions {}x{}x{}",
            header.h, header.w, header.c
        )));
    }
    Ok((header, &bytes[nl + 1..]))
}

fn expect_len(payload: &[u8], want: usize) -> Result<()> {
    if payload.len() != want {
        return Err(Error::Corrupt(format!(
            "payload has {} bytes, header requires {want}",
            payload.len()
        )));
    }
    Ok(())
}

pub fn cube_to_bytes(cube: &HsiCube) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(cube.values.len() * 4);
    for v in &cube.values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    encode(&HsicHeader::new(cube.height, cube.width, cube.bands, "f32"), &payload)
}

pub fn cube_from_bytes(bytes: &[u8]) -> Result<HsiCube> {
    let (h, payload) = decode(bytes)?;
    if h.dtype != "f32" {
        return Err(Error::Corrupt(format!("cube dtype must be f32, got `{}`", h.dtype)));
    }
    expect_len(payload, h.h * h.w * h.c * 4)?;
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    HsiCube::new(h.h, h.w, h.c, values)
}

pub fn mask_to_bytes(mask: &Mask) -> Result<Vec<u8>> {
    let payload: Vec<u8> = mask.values.iter().map(|&v| u8::from(v)).collect();
    encode(&HsicHeader::new(mask.height, mask.width, 1, "u8"), &payload)
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<Mask> {
    let (h, payload) = decode(bytes)?;
    if h.dtype != "u8" || h.c != 1 {
        return Err(Error::Corrupt(format!(
            "mask must be u8 with c=1, got {} with c={}",
            h.dtype, h.c
        )));
    }
    expect_len(payload, h.h * h.w)?;
    let values = payload
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Corrupt(format!("mask byte {other} is not 0/1"))),
        })
        .collect::<Result<Vec<_>>>()?;
    Mask::new(h.h, h.w, values)
}

pub fn save_cube(cube: &HsiCube, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, cube_to_bytes(cube)?)?;
    Ok(())
}

/// Loads a cube; the mask, if any, must be loaded separately.
pub fn load_cube(path: impl AsRef<Path>) -> Result<HsiCube> {
    cube_from_bytes(&fs::read(path)?)
}

pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, mask_to_bytes(mask)?)?;
    Ok(())
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    mask_from_bytes(&fs::read(path)?)
}

/// Sidecar mask path: `scene.hsic` -> `scene.mask.hsic`.
pub fn mask_path(cube_path: impl AsRef<Path>) -> PathBuf {
    let p = cube_path.as_ref();
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}.mask.hsic"))
}
