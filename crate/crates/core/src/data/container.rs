//! Little-endian dataset container.
//!
//! ```text
//! magic     8 bytes "M2FDATA1"
//! version   u32
//! count     u32 scenes
//! scene     u32 height, u32 width, 3·H·W × f64 image (channel-major),
//!           u32 segment count, then per segment:
//!           u32 class, u8 thing flag, u32 run count, runs × u32
//! ```
//!
//! Mask runs alternate starting with background, row-major; the first run
//! may be zero.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scene::{GroundTruthScene, Mask, Scene, Segment};
use crate::tensor::{Reader, Tensor};

pub const DATASET_MAGIC: &[u8; 8] = b"M2FDATA1";
pub const DATASET_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn encode_runs(mask: &Mask) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut cur = false;
    let mut len = 0;
    for &b in mask.data() {
        if b == cur {
            len += 1;
        } else {
            runs.push(len);
            cur = b;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[usize], h: usize, w: usize) -> Result<Mask> {
    let mut data = Vec::with_capacity(h * w);
    for (i, &r) in runs.iter().enumerate() {
        data.extend(std::iter::repeat(i % 2 == 1).take(r));
        if data.len() > h * w {
            return Err(Error::Corrupt("mask runs exceed image size".into()));
        }
    }
    if data.len() != h * w {
        return Err(Error::Corrupt("mask runs do not cover the image".into()));
    }
    Mask::new(h, w, data)
}

pub fn dataset_to_bytes(scenes: &[Scene]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    put_u32(&mut out, scenes.len());
    for s in scenes {
        put_u32(&mut out, s.truth.height);
        put_u32(&mut out, s.truth.width);
        for v in s.image.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_u32(&mut out, s.truth.segments.len());
        for seg in &s.truth.segments {
            put_u32(&mut out, seg.class);
            out.push(u8::from(seg.is_thing));
            let runs = encode_runs(&seg.mask);
            put_u32(&mut out, runs.len());
            for r in runs {
                put_u32(&mut out, r);
            }
        }
    }
    out
}

pub fn dataset_from_bytes(bytes: &[u8]) -> Result<Vec<Scene>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != DATASET_MAGIC {
        return Err(Error::Corrupt("bad dataset magic".into()));
    }
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Corrupt(format!("unsupported dataset version {version}")));
    }
    let count = r.u32()? as usize;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let h = r.u32()? as usize;
        let w = r.u32()? as usize;
        let n = 3 * h * w;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Corrupt("image size overflow".into()))?)?;
        let image = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let nseg = r.u32()? as usize;
        let mut segments = Vec::with_capacity(nseg.min(1 << 10));
        for _ in 0..nseg {
            let class = r.u32()? as usize;
            let is_thing = match r.u8()? {
                0 => false,
                1 => true,
                v => return Err(Error::Corrupt(format!("bad thing flag {v}"))),
            };
            let nruns = r.u32()? as usize;
            let runs = (0..nruns).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
            segments.push(Segment {
                mask: decode_runs(&runs, h, w)?,
                class,
                is_thing,
            });
        }
        scenes.push(Scene {
            image: Tensor::new(vec![3, h, w], image)?,
            truth: GroundTruthScene::new(h, w, segments)?,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Corrupt("trailing bytes after dataset".into()));
    }
    Ok(scenes)
}

pub fn save_dataset(scenes: &[Scene], path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, dataset_to_bytes(scenes))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<Scene>> {
    dataset_from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, SceneConfig};

    #[test]
    fn round_trip_and_corruption() {
        let scenes = generate_dataset(&SceneConfig::default(), 3, 9).unwrap();
        let bytes = dataset_to_bytes(&scenes);
        assert_eq!(dataset_from_bytes(&bytes).unwrap(), scenes);
        assert!(matches!(dataset_from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(dataset_from_bytes(&bad), Err(Error::Corrupt(_))));
        assert!(dataset_from_bytes(&dataset_to_bytes(&[])).unwrap().is_empty());
    }

    #[test]
    fn runs_round_trip_edge_cases() {
        for m in [Mask::full(3, 3), Mask::empty(2, 5), Mask::from_fn(4, 4, |y, x| (x + y) % 2 == 0)] {
            let runs = encode_runs(&m);
            assert_eq!(decode_runs(&runs, m.height(), m.width()).unwrap(), m);
        }
    }
}
