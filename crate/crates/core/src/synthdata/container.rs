//! NPFX1 sequence files and JSON dataset manifests.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NPFX1" | u8 version (1) | u8 dtype (0 = f32) | u32 T, H, W, C
//! f64 timestamps[T] | f32 payload[T*H*W*C] (row-major)
//! optional: "META" | u32 blob count B | f64 centers[T*B*2] ([row, col])
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DomainSpec, FrameSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 5] = b"NPFX1";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const META_TAG: &[u8; 4] = b"META";
const HEADER_LEN: usize = 5 + 1 + 1 + 4 * 4;

pub fn encode(seq: &FrameSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let s = seq.frames.shape();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * seq.len() + 4 * seq.frames.len());
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(DTYPE_F32);
    for &d in s {
        let d = u32::try_from(d).map_err(|_| Error::data(format!("extent {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for t in &seq.timestamps {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    for v in seq.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(centers) = &seq.centers {
        let blobs = centers.first().map_or(0, Vec::len);
        if centers.iter().any(|c| c.len() != blobs) {
            return Err(Error::data("ragged blob center metadata"));
        }
        buf.extend_from_slice(META_TAG);
        buf.extend_from_slice(&(blobs as u32).to_le_bytes());
        for frame in centers {
            for c in frame {
                buf.extend_from_slice(&c[0].to_le_bytes());
                buf.extend_from_slice(&c[1].to_le_bytes());
            }
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> &'a [u8] {
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        s
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take(8).try_into().unwrap())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take(4).try_into().unwrap())
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

pub fn decode(bytes: &[u8]) -> Result<FrameSequence> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::data("not an NPFX container"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::data(format!(
            "truncated NPFX container: expected at least {HEADER_LEN} header bytes, found {}",
            bytes.len()
        )));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = r.take(1)[0];
    if version != VERSION {
        return Err(Error::data(format!("unsupported NPFX version {version} (expected {VERSION})")));
    }
    let dtype = r.take(1)[0];
    if dtype != DTYPE_F32 {
        return Err(Error::data(format!("unsupported NPFX dtype code {dtype}")));
    }
    let dims: Vec<usize> = (0..4).map(|_| r.u32() as usize).collect();
    if dims.contains(&0) {
        return Err(Error::data(format!("NPFX header has a zero extent: {dims:?}")));
    }
    let count: usize = dims.iter().product();
    let expected = HEADER_LEN + 8 * dims[0] + 4 * count;
    if bytes.len() < expected {
        return Err(Error::data(format!(
            "truncated NPFX container: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let timestamps: Vec<f64> = (0..dims[0]).map(|_| r.f64()).collect();
    let data: Vec<f32> = (0..count).map(|_| r.f32()).collect();
    let centers = if r.remaining() == 0 {
        None
    } else {
        if r.remaining() < 8 || r.take(4) != META_TAG {
            return Err(Error::data("trailing bytes after NPFX payload are not a metadata block"));
        }
        let blobs = r.u32() as usize;
        let need = dims[0] * blobs * 16;
        if r.remaining() != need {
            return Err(Error::data(format!(
                "NPFX metadata block: expected {need} bytes, found {}",
                r.remaining()
            )));
        }
        Some(
            (0..dims[0])
                .map(|_| (0..blobs).map(|_| [r.f64(), r.f64()]).collect())
                .collect(),
        )
    };
    let seq = FrameSequence {
        frames: Tensor::new(&dims, data)?,
        timestamps,
        centers,
    };
    seq.validate()?;
    Ok(seq)
}

pub fn save(seq: &FrameSequence, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(seq)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<FrameSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Index of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub domain: DomainSpec,
    pub seed: u64,
    pub window_len: usize,
    pub windows: Vec<String>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

pub fn save_dataset(dir: impl AsRef<Path>, domain: &DomainSpec, seed: u64, windows: &[FrameSequence]) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(windows.len());
    for (i, w) in windows.iter().enumerate() {
        let name = format!("window_{i:05}.npfx");
        save(w, dir.join(&name))?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        domain: domain.clone(),
        seed,
        window_len: windows.first().map_or(0, FrameSequence::len),
        windows: names,
    };
    let path = dir.join(MANIFEST_NAME);
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(DatasetManifest, Vec<FrameSequence>)> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::data(format!("cannot read {}: {e}", path.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let windows = manifest
        .windows
        .iter()
        .map(|name| load(dir.join(name)))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, windows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate;

    fn sample() -> FrameSequence {
        generate(&DomainSpec::domain_a(), 1, 4, 21).unwrap().remove(0)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let seq = sample();
        let back = decode(&encode(&seq).unwrap()).unwrap();
        assert_eq!(back, seq);
        let mut plain = seq.clone();
        plain.centers = None;
        assert_eq!(decode(&encode(&plain).unwrap()).unwrap(), plain);
    }

    #[test]
    fn truncation_names_lengths() {
        let bytes = encode(&sample()).unwrap();
        let cut = &bytes[..HEADER_LEN + 40];
        let msg = decode(cut).unwrap_err().to_string();
        assert!(msg.contains("expected") && msg.contains(&format!("found {}", cut.len())), "{msg}");
    }

    #[test]
    fn wrong_magic() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[0] = b'X';
        assert!(decode(&bytes).unwrap_err().to_string().contains("not an NPFX container"));
    }

    #[test]
    fn wrong_version() {
        let mut bytes = encode(&sample()).unwrap();
        bytes[5] = 9;
        assert!(decode(&bytes).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DomainSpec::domain_b();
        let windows = generate(&spec, 3, 5, 2).unwrap();
        save_dataset(dir.path(), &spec, 2, &windows).unwrap();
        let (manifest, back) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.domain, spec);
        assert_eq!(back, windows);
    }
}
