//! Chunked binary archive with an embedded content hash.
//!
//! Layout: `MAGIC | version:u32 | n_sections:u32 | sections... | sha256`
//! where each section is `name_len:u32 | name | payload_len:u64 | payload`.
//! The trailing hash covers every preceding byte, so truncation or byte
//! flips surface as an integrity error on load.

use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"GLICOAR1";
const VERSION: u32 = 1;

/// An in-memory archive: ordered named byte sections.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    sections: BTreeMap<String, Vec<u8>>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.sections.insert(name.to_string(), bytes);
    }

    pub fn put_u64(&mut self, name: &str, v: u64) {
        self.put_bytes(name, v.to_le_bytes().to_vec());
    }

    pub fn put_u128(&mut self, name: &str, v: u128) {
        self.put_bytes(name, v.to_le_bytes().to_vec());
    }

    pub fn put_str(&mut self, name: &str, s: &str) {
        self.put_bytes(name, s.as_bytes().to_vec());
    }

    /// Stores shape (u64 dims) followed by row-major little-endian f32 data.
    pub fn put_f32_array(&mut self, name: &str, arr: &ArrayD<f32>) {
        let mut buf = Vec::with_capacity(16 + arr.len() * 4);
        buf.extend((arr.ndim() as u32).to_le_bytes());
        for d in arr.shape() {
            buf.extend((*d as u64).to_le_bytes());
        }
        // Standard (row-major) iteration order regardless of layout.
        for v in arr.iter() {
            buf.extend(v.to_le_bytes());
        }
        self.put_bytes(name, buf);
    }

    pub fn put_i64_slice(&mut self, name: &str, vals: &[i64]) {
        let mut buf = Vec::with_capacity(vals.len() * 8);
        for v in vals {
            buf.extend(v.to_le_bytes());
        }
        self.put_bytes(name, buf);
    }

    pub fn put_u8_slice(&mut self, name: &str, vals: &[u8]) {
        self.put_bytes(name, vals.to_vec());
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn section_names(&self) -> impl Iterator<Item = &str> {
        self.sections.keys().map(|s| s.as_str())
    }

    pub fn get_bytes(&self, name: &str) -> Result<&[u8]> {
        self.sections
            .get(name)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::Integrity(format!("archive section '{name}' missing")))
    }

    pub fn get_u64(&self, name: &str) -> Result<u64> {
        let b = self.get_bytes(name)?;
        let arr: [u8; 8] = b
            .try_into()
            .map_err(|_| Error::Integrity(format!("section '{name}' is not a u64")))?;
        Ok(u64::from_le_bytes(arr))
    }

    pub fn get_u128(&self, name: &str) -> Result<u128> {
        let b = self.get_bytes(name)?;
        let arr: [u8; 16] = b
            .try_into()
            .map_err(|_| Error::Integrity(format!("section '{name}' is not a u128")))?;
        Ok(u128::from_le_bytes(arr))
    }

    pub fn get_str(&self, name: &str) -> Result<String> {
        let b = self.get_bytes(name)?;
        String::from_utf8(b.to_vec())
            .map_err(|_| Error::Integrity(format!("section '{name}' is not utf-8")))
    }

    pub fn get_f32_array(&self, name: &str) -> Result<ArrayD<f32>> {
        let b = self.get_bytes(name)?;
        let bad = || Error::Integrity(format!("section '{name}' is not a valid f32 array"));
        if b.len() < 4 {
            return Err(bad());
        }
        let ndim = u32::from_le_bytes(b[0..4].try_into().unwrap()) as usize;
        let header = 4 + ndim * 8;
        if b.len() < header {
            return Err(bad());
        }
        let mut shape = Vec::with_capacity(ndim);
        for i in 0..ndim {
            let off = 4 + i * 8;
            shape.push(u64::from_le_bytes(b[off..off + 8].try_into().unwrap()) as usize);
        }
        let count: usize = shape.iter().product();
        if b.len() != header + count * 4 {
            return Err(bad());
        }
        let mut data = Vec::with_capacity(count);
        for i in 0..count {
            let off = header + i * 4;
            data.push(f32::from_le_bytes(b[off..off + 4].try_into().unwrap()));
        }
        ArrayD::from_shape_vec(IxDyn(&shape), data).map_err(|_| bad())
    }

    pub fn get_i64_slice(&self, name: &str) -> Result<Vec<i64>> {
        let b = self.get_bytes(name)?;
        if b.len() % 8 != 0 {
            return Err(Error::Integrity(format!(
                "section '{name}' is not an i64 slice"
            )));
        }
        Ok(b.chunks_exact(8)
            .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend((self.sections.len() as u32).to_le_bytes());
        for (name, payload) in &self.sections {
            out.extend((name.len() as u32).to_le_bytes());
            out.extend(name.as_bytes());
            out.extend((payload.len() as u64).to_le_bytes());
            out.extend(payload);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| Error::Integrity(format!("corrupt archive: {what}"));
        if bytes.len() < MAGIC.len() + 8 + 32 {
            return Err(corrupt("too short"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let expect = Sha256::digest(body);
        if expect.as_slice() != digest {
            return Err(corrupt("content hash mismatch"));
        }
        if &body[0..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Integrity(format!(
                "unsupported archive version {version}"
            )));
        }
        let n = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let mut sections = BTreeMap::new();
        let mut off = 16;
        for _ in 0..n {
            if body.len() < off + 4 {
                return Err(corrupt("section header"));
            }
            let name_len = u32::from_le_bytes(body[off..off + 4].try_into().unwrap()) as usize;
            off += 4;
            if body.len() < off + name_len + 8 {
                return Err(corrupt("section name"));
            }
            let name = String::from_utf8(body[off..off + name_len].to_vec())
                .map_err(|_| corrupt("section name utf-8"))?;
            off += name_len;
            let payload_len =
                u64::from_le_bytes(body[off..off + 8].try_into().unwrap()) as usize;
            off += 8;
            if body.len() < off + payload_len {
                return Err(corrupt("section payload"));
            }
            sections.insert(name, body[off..off + payload_len].to_vec());
            off += payload_len;
        }
        if off != body.len() {
            return Err(corrupt("trailing bytes"));
        }
        Ok(Archive { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::decode(&bytes)
    }

    /// Hash of the encoded archive, hex-encoded.
    pub fn content_hash(&self) -> String {
        hex(&Sha256::digest(self.encode()))
    }
}

/// Hex-encode bytes (lowercase).
pub fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// SHA-256 of a file's contents, hex-encoded. Used to fingerprint inputs.
pub fn file_sha256(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path)?;
    let mut h = Sha256::new();
    let mut buf = [0u8; 8192];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex(&h.finalize()))
}
