//! Binary container shared by `.disp`, `.dtpl` and checkpoint blobs.
//!
//! Layout (all integers little-endian):
//! `magic[4] | u32 version | u32 header_len | header JSON | u64 n | n x f32 | u64 m | m bytes`.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) const VERSION: u32 = 1;

pub(crate) struct Container<H> {
    pub header: H,
    pub floats: Vec<f32>,
    pub tail: Vec<u8>,
}

fn bad(kind: &'static str, msg: impl Into<String>) -> Error {
    Error::Format {
        kind,
        msg: msg.into(),
    }
}

pub(crate) fn encode<H: Serialize>(magic: &[u8; 4], header: &H, floats: &[f32], tail: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(24 + json.len() + floats.len() * 4 + tail.len());
    out.write_all(magic)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(json.len() as u32).to_le_bytes())?;
    out.write_all(&json)?;
    out.write_all(&(floats.len() as u64).to_le_bytes())?;
    for f in floats {
        out.write_all(&f.to_le_bytes())?;
    }
    out.write_all(&(tail.len() as u64).to_le_bytes())?;
    out.write_all(tail)?;
    Ok(out)
}

fn take<'a>(buf: &mut &'a [u8], n: usize, kind: &'static str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(bad(kind, "truncated file"));
    }
    let (head, rest) = buf.split_at(n);
    *buf = rest;
    Ok(head)
}

fn take_u64(buf: &mut &[u8], kind: &'static str) -> Result<usize> {
    let b = take(buf, 8, kind)?;
    let v = u64::from_le_bytes(b.try_into().expect("8 bytes"));
    usize::try_from(v).map_err(|_| bad(kind, "length overflows usize"))
}

pub(crate) fn decode<H: DeserializeOwned>(magic: &[u8; 4], kind: &'static str, bytes: &[u8]) -> Result<Container<H>> {
    let mut buf = bytes;
    if take(&mut buf, 4, kind)? != magic {
        return Err(bad(kind, format!("bad magic, expected {:?}", String::from_utf8_lossy(magic))));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, kind)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(kind, format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(take(&mut buf, 4, kind)?.try_into().expect("4 bytes")) as usize;
    let header: H = serde_json::from_slice(take(&mut buf, header_len, kind)?)
        .map_err(|e| bad(kind, format!("header: {e}")))?;
    let n = take_u64(&mut buf, kind)?;
    let raw = take(&mut buf, n.checked_mul(4).ok_or_else(|| bad(kind, "length overflow"))?, kind)?;
    let floats = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = take_u64(&mut buf, kind)?;
    let tail = take(&mut buf, m, kind)?.to_vec();
    if !buf.is_empty() {
        return Err(bad(kind, format!("{} trailing bytes", buf.len())));
    }
    Ok(Container { header, floats, tail })
}

pub(crate) fn write_file<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, floats: &[f32], tail: &[u8]) -> Result<()> {
    let bytes = encode(magic, header, floats, tail)?;
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::from(e).in_file(path))
}

pub(crate) fn read_file<H: DeserializeOwned>(path: &Path, magic: &[u8; 4], kind: &'static str) -> Result<Container<H>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::from(e).in_file(path))?;
    decode(magic, kind, &bytes).map_err(|e| e.in_file(path))
}

/// Packs booleans LSB-first.
pub(crate) fn pack_bits(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

pub(crate) fn unpack_bits(bytes: &[u8], n: usize) -> Option<Vec<bool>> {
    if bytes.len() != n.div_ceil(8) {
        return None;
    }
    Some((0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect())
}
