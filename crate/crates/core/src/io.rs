//! Readers and writers for the scene directory formats.
//!
//! All binary formats are little-endian with a four-byte magic:
//!
//! | magic  | header                                   | payload                          |
//! |--------|------------------------------------------|----------------------------------|
//! | `RGD1` | u32 width, u32 height                    | f32 depth (meters), row-major    |
//! | `RGS1` | u32 width, u32 height                    | u16 instance labels, row-major   |
//! | `RGF1` | u32 n_frames, patches_h, patches_w, dim  | f32 features, row-major          |
//! | `RGW1` | u32 rows, u32 cols, u8 has_bias          | f32 matrix row-major, f32 bias   |
//! | `RGM1` | u32 n_frames, patches_h, patches_w       | bits, LSB-first, frame-major     |
//!
//! Values are held as `f64` in memory and narrowed to `f32` on write. Invalid
//! depth is written as the canonical quiet NaN, so write -> read -> write is
//! byte-identical.

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::masking::PatchMask;
use crate::recon::ProjectorWeights;
use crate::scene::{DepthMap, FeatureGrid, SceneManifest, SegmentationMap};

pub const DEPTH_MAGIC: &[u8; 4] = b"RGD1";
pub const SEG_MAGIC: &[u8; 4] = b"RGS1";
pub const FEATURE_MAGIC: &[u8; 4] = b"RGF1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"RGW1";
pub const MASK_MAGIC: &[u8; 4] = b"RGM1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureHeader {
    pub n_frames: usize,
    pub patches_h: usize,
    pub patches_w: usize,
    pub dim: usize,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!(
                "truncated: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )),
        }
    }

    fn magic(&mut self, magic: &[u8; 4]) -> std::result::Result<(), String> {
        let m = self.take(4)?;
        if m != magic {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            ));
        }
        Ok(())
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> std::result::Result<Vec<f32>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_prefix(path: &Path, n: usize) -> Result<Vec<u8>> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(n);
    f.by_ref()
        .take(n as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn put_f32(out: &mut Vec<u8>, x: f64) {
    out.extend_from_slice(&(x as f32).to_le_bytes());
}

// --- depth ---------------------------------------------------------------

pub fn encode_depth(depth: &DepthMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * depth.values.len());
    out.extend_from_slice(DEPTH_MAGIC);
    out.extend_from_slice(&depth.width.to_le_bytes());
    out.extend_from_slice(&depth.height.to_le_bytes());
    for &d in &depth.values {
        put_f32(&mut out, if d.is_finite() { d } else { f64::NAN });
    }
    out
}

pub fn decode_depth(bytes: &[u8]) -> std::result::Result<DepthMap, String> {
    let mut c = Cursor::new(bytes);
    c.magic(DEPTH_MAGIC)?;
    let (w, h) = (c.u32()?, c.u32()?);
    let raw = c.f32s(w as usize * h as usize)?;
    c.finish()?;
    let values: Vec<f64> = raw
        .into_iter()
        .map(|x| if x.is_finite() { x as f64 } else { f64::NAN })
        .collect();
    DepthMap::new(w, h, values).map_err(|e| e.to_string())
}

pub fn write_depth(path: &Path, depth: &DepthMap) -> Result<()> {
    write_file(path, &encode_depth(depth))
}

pub fn read_depth(path: &Path) -> Result<DepthMap> {
    decode_depth(&read_file(path)?).map_err(|m| Error::format(path, m))
}

pub fn read_depth_header(path: &Path) -> Result<(u32, u32)> {
    let buf = read_prefix(path, 12)?;
    let mut c = Cursor::new(&buf);
    (|| -> std::result::Result<_, String> {
        c.magic(DEPTH_MAGIC)?;
        Ok((c.u32()?, c.u32()?))
    })()
    .map_err(|m| Error::format(path, m))
}

// --- segmentation ----------------------------------------------------------

pub fn encode_segmentation(seg: &SegmentationMap) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 2 * seg.labels.len());
    out.extend_from_slice(SEG_MAGIC);
    out.extend_from_slice(&seg.width.to_le_bytes());
    out.extend_from_slice(&seg.height.to_le_bytes());
    for &l in &seg.labels {
        out.extend_from_slice(&l.to_le_bytes());
    }
    out
}

pub fn decode_segmentation(bytes: &[u8]) -> std::result::Result<SegmentationMap, String> {
    let mut c = Cursor::new(bytes);
    c.magic(SEG_MAGIC)?;
    let (w, h) = (c.u32()?, c.u32()?);
    let n = (w as usize)
        .checked_mul(h as usize)
        .and_then(|n| n.checked_mul(2))
        .ok_or("size overflow")?;
    let labels = c
        .take(n)?
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    c.finish()?;
    SegmentationMap::new(w, h, labels).map_err(|e| e.to_string())
}

pub fn write_segmentation(path: &Path, seg: &SegmentationMap) -> Result<()> {
    write_file(path, &encode_segmentation(seg))
}

pub fn read_segmentation(path: &Path) -> Result<SegmentationMap> {
    decode_segmentation(&read_file(path)?).map_err(|m| Error::format(path, m))
}

pub fn read_segmentation_header(path: &Path) -> Result<(u32, u32)> {
    let buf = read_prefix(path, 12)?;
    let mut c = Cursor::new(&buf);
    (|| -> std::result::Result<_, String> {
        c.magic(SEG_MAGIC)?;
        Ok((c.u32()?, c.u32()?))
    })()
    .map_err(|m| Error::format(path, m))
}

// --- features --------------------------------------------------------------

pub fn encode_features(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * grid.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    for d in grid.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in &grid.data {
        put_f32(&mut out, x);
    }
    out
}

fn feature_header(c: &mut Cursor<'_>) -> std::result::Result<FeatureHeader, String> {
    c.magic(FEATURE_MAGIC)?;
    Ok(FeatureHeader {
        n_frames: c.u32()? as usize,
        patches_h: c.u32()? as usize,
        patches_w: c.u32()? as usize,
        dim: c.u32()? as usize,
    })
}

pub fn decode_features(bytes: &[u8]) -> std::result::Result<FeatureGrid, String> {
    let mut c = Cursor::new(bytes);
    let h = feature_header(&mut c)?;
    let n = [h.n_frames, h.patches_h, h.patches_w, h.dim]
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or("size overflow")?;
    let data = c.f32s(n)?.into_iter().map(f64::from).collect();
    c.finish()?;
    FeatureGrid::new(h.n_frames, h.patches_h, h.patches_w, h.dim, data).map_err(|e| e.to_string())
}

pub fn write_features(path: &Path, grid: &FeatureGrid) -> Result<()> {
    write_file(path, &encode_features(grid))
}

pub fn read_features(path: &Path) -> Result<FeatureGrid> {
    decode_features(&read_file(path)?).map_err(|m| Error::format(path, m))
}

pub fn read_features_header(path: &Path) -> Result<FeatureHeader> {
    let buf = read_prefix(path, 20)?;
    feature_header(&mut Cursor::new(&buf)).map_err(|m| Error::format(path, m))
}

// --- projector weights -----------------------------------------------------

pub fn encode_projector(w: &ProjectorWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&(w.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(w.cols() as u32).to_le_bytes());
    out.push(w.bias().is_some() as u8);
    for &x in w.matrix() {
        put_f32(&mut out, x);
    }
    if let Some(b) = w.bias() {
        for &x in b {
            put_f32(&mut out, x);
        }
    }
    out
}

pub fn decode_projector(bytes: &[u8]) -> std::result::Result<ProjectorWeights, String> {
    let mut c = Cursor::new(bytes);
    c.magic(WEIGHTS_MAGIC)?;
    let (rows, cols) = (c.u32()? as usize, c.u32()? as usize);
    let has_bias = match c.u8()? {
        0 => false,
        1 => true,
        x => return Err(format!("has_bias byte must be 0 or 1, got {x}")),
    };
    let matrix = c.f32s(rows.checked_mul(cols).ok_or("size overflow")?)?;
    let bias = if has_bias { Some(c.f32s(cols)?) } else { None };
    c.finish()?;
    ProjectorWeights::new(
        rows,
        cols,
        matrix.into_iter().map(f64::from).collect(),
        bias.map(|b| b.into_iter().map(f64::from).collect()),
    )
    .map_err(|e| e.to_string())
}

pub fn write_projector(path: &Path, w: &ProjectorWeights) -> Result<()> {
    write_file(path, &encode_projector(w))
}

pub fn read_projector(path: &Path) -> Result<ProjectorWeights> {
    decode_projector(&read_file(path)?).map_err(|m| Error::format(path, m))
}

// --- patch mask ------------------------------------------------------------

pub fn encode_mask(mask: &PatchMask) -> Vec<u8> {
    let n = mask.len();
    let mut out = Vec::with_capacity(16 + n.div_ceil(8));
    out.extend_from_slice(MASK_MAGIC);
    for d in [mask.n_frames, mask.patches_h, mask.patches_w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    let mut packed = vec![0u8; n.div_ceil(8)];
    for (i, &kept) in mask.bits().iter().enumerate() {
        if kept {
            packed[i >> 3] |= 1 << (i & 7);
        }
    }
    out.extend_from_slice(&packed);
    out
}

pub fn decode_mask(bytes: &[u8]) -> std::result::Result<PatchMask, String> {
    let mut c = Cursor::new(bytes);
    c.magic(MASK_MAGIC)?;
    let (n, h, w) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
    let count = n
        .checked_mul(h)
        .and_then(|x| x.checked_mul(w))
        .ok_or("size overflow")?;
    let packed = c.take(count.div_ceil(8))?;
    c.finish()?;
    let bits = (0..count).map(|i| packed[i >> 3] >> (i & 7) & 1 == 1).collect();
    PatchMask::from_bits(n, h, w, bits).map_err(|e| e.to_string())
}

pub fn write_mask(path: &Path, mask: &PatchMask) -> Result<()> {
    write_file(path, &encode_mask(mask))
}

pub fn read_mask(path: &Path) -> Result<PatchMask> {
    decode_mask(&read_file(path)?).map_err(|m| Error::format(path, m))
}

// --- JSON --------------------------------------------------------------------

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    s.push('\n');
    write_file(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_manifest(path: &Path) -> Result<SceneManifest> {
    read_json(path)
}

pub fn save_manifest(path: &Path, manifest: &SceneManifest) -> Result<()> {
    write_json(path, manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn depth_strategy() -> impl Strategy<Value = DepthMap> {
        (1u32..9, 1u32..9).prop_flat_map(|(w, h)| {
            prop::collection::vec(
                prop_oneof![4 => (1e-3f32..100.0).prop_map(|x| x as f64), 1 => Just(f64::NAN)],
                (w * h) as usize,
            )
            .prop_map(move |v| DepthMap::new(w, h, v).unwrap())
        })
    }

    fn feature_strategy() -> impl Strategy<Value = FeatureGrid> {
        (1usize..3, 1usize..4, 1usize..4, 1usize..5).prop_flat_map(|(n, h, w, d)| {
            prop::collection::vec((-1e3f32..1e3).prop_map(f64::from), n * h * w * d)
                .prop_map(move |v| FeatureGrid::new(n, h, w, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn depth_round_trips(d in depth_strategy()) {
            let bytes = encode_depth(&d);
            let back = decode_depth(&bytes).unwrap();
            prop_assert_eq!(encode_depth(&back), bytes);
            for (a, b) in d.values.iter().zip(&back.values) {
                prop_assert!(a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan()));
            }
        }

        #[test]
        fn features_round_trip(g in feature_strategy()) {
            let bytes = encode_features(&g);
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(encode_features(&back), bytes);
        }

        #[test]
        fn mask_round_trips(bits in prop::collection::vec(any::<bool>(), 1..60), h in 1usize..4) {
            let n = bits.len();
            let m = PatchMask::from_bits(n, h, 1, bits.iter().cycle().take(n * h).copied().collect()).unwrap();
            let bytes = encode_mask(&m);
            prop_assert_eq!(bytes.len(), 16 + (n * h).div_ceil(8));
            let back = decode_mask(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(encode_mask(&back), bytes);
        }
    }

    #[test]
    fn depth_layout_is_exact() {
        let d = DepthMap::new(2, 1, vec![1.0, f64::INFINITY]).unwrap();
        let bytes = encode_depth(&d);
        let mut expected = b"RGD1".to_vec();
        expected.extend_from_slice(&[2, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn segmentation_round_trip_and_layout() {
        let s = SegmentationMap::new(3, 1, vec![0, 1, 513]).unwrap();
        let bytes = encode_segmentation(&s);
        assert_eq!(&bytes[12..], &[0, 0, 1, 0, 1, 2]);
        assert_eq!(decode_segmentation(&bytes).unwrap(), s);
    }

    #[test]
    fn mask_bits_are_lsb_first() {
        let m = PatchMask::from_bits(1, 1, 9, vec![true, false, false, false, false, false, false, false, true])
            .unwrap();
        assert_eq!(&encode_mask(&m)[16..], &[0b0000_0001, 0b0000_0001]);
    }

    #[test]
    fn projector_round_trip() {
        let w = ProjectorWeights::new(4, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0], Some(vec![0.5, -0.5]))
            .unwrap();
        let bytes = encode_projector(&w);
        assert_eq!(bytes.len(), 4 + 8 + 1 + 32 + 8);
        let back = decode_projector(&bytes).unwrap();
        assert_eq!(back, w);
        let nb = ProjectorWeights::new(4, 1, vec![0.0; 4], None).unwrap();
        assert_eq!(decode_projector(&encode_projector(&nb)).unwrap(), nb);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        assert!(decode_depth(b"RGX1\0\0\0\0").unwrap_err().contains("magic"));
        let mut bytes = encode_depth(&DepthMap::filled(2, 2, 1.0));
        bytes.pop();
        assert!(decode_depth(&bytes).unwrap_err().contains("truncated"));
        bytes.extend_from_slice(&[0, 0, 0, 0, 0]);
        assert!(decode_depth(&bytes).unwrap_err().contains("trailing"));
        let mut neg = encode_depth(&DepthMap::filled(1, 1, 1.0));
        neg[12..16].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(decode_depth(&neg).is_err());
    }

    #[test]
    fn header_readers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x/f.rgf");
        write_features(&p, &FeatureGrid::zeros(2, 3, 4, 5)).unwrap();
        let h = read_features_header(&p).unwrap();
        assert_eq!((h.n_frames, h.patches_h, h.patches_w, h.dim), (2, 3, 4, 5));
        let err = read_depth_header(&p).unwrap_err();
        assert_eq!(err.kind(), "format");
    }
}
