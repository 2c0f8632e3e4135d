//! Binary sample shards and the dataset manifest.
//!
//! Record layout (little-endian): magic "FBS1", u32 version, u32 k,
//! u32 C, u32 H, u32 W, i64 timestamp, u8 label, k*C missing-flag bytes,
//! then k*C*H*W fp32 pixels. A shard file is a sequence of records; the
//! dataset directory holds sample shards, frame shards (k = 1 records,
//! one per stream position), the latent log, and a JSON manifest.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generate::LatentLog;
use super::SolarSample;
use crate::classes::FlareClass;
use crate::error::DataError;
use crate::tensor::Tensor;

pub const SAMPLE_MAGIC: [u8; 4] = *b"FBS1";
pub const SAMPLE_VERSION: u32 = 1;
/// Records per shard file.
pub const SHARD_CAPACITY: usize = 512;

pub fn write_sample_record(w: &mut impl Write, s: &SolarSample) -> Result<(), DataError> {
    let (k, c, h, wd) = s.dims();
    w.write_all(&SAMPLE_MAGIC)?;
    w.write_all(&SAMPLE_VERSION.to_le_bytes())?;
    for dim in [k, c, h, wd] {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    w.write_all(&s.timestamp.to_le_bytes())?;
    w.write_all(&[s.label.index() as u8])?;
    let flags: Vec<u8> = s.missing.iter().map(|&m| u8::from(m)).collect();
    w.write_all(&flags)?;
    for &px in s.images.data() {
        w.write_all(&px.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, DataError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Read one record; Ok(None) at a clean end of stream.
pub fn read_sample_record(r: &mut impl Read) -> Result<Option<SolarSample>, DataError> {
    let mut magic = [0u8; 4];
    match r.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    if magic != SAMPLE_MAGIC {
        return Err(DataError::Format(format!("bad sample record magic {:?}", magic)));
    }
    let version = read_u32(r)?;
    if version != SAMPLE_VERSION {
        return Err(DataError::Format(format!("unsupported record version {version}")));
    }
    let k = read_u32(r)? as usize;
    let c = read_u32(r)? as usize;
    let h = read_u32(r)? as usize;
    let w = read_u32(r)? as usize;
    let mut ts = [0u8; 8];
    r.read_exact(&mut ts)?;
    let timestamp = i64::from_le_bytes(ts);
    let mut label = [0u8; 1];
    r.read_exact(&mut label)?;
    let label = FlareClass::from_index(label[0] as usize)
        .ok_or_else(|| DataError::Format(format!("bad label byte {}", label[0])))?;
    let mut flags = vec![0u8; k * c];
    r.read_exact(&mut flags)?;
    let missing: Vec<bool> = flags.iter().map(|&b| b != 0).collect();
    let count = k * c * h * w;
    let mut pixels = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut buf)?;
        pixels.push(f32::from_le_bytes(buf));
    }
    Ok(Some(SolarSample {
        images: Tensor::from_vec(&[k, c, h, w], pixels),
        label,
        timestamp,
        missing,
    }))
}

/// Write samples into sequentially numbered shard files; returns the
/// manifest entries.
pub fn write_samples(
    dir: &Path,
    role: &str,
    samples: &[SolarSample],
) -> Result<Vec<ShardEntry>, DataError> {
    let mut entries = Vec::new();
    for (shard_idx, chunk) in samples.chunks(SHARD_CAPACITY).enumerate() {
        let name = format!("{role}_{shard_idx:04}.fbs");
        let path = dir.join(&name);
        let mut w = BufWriter::new(std::fs::File::create(&path)?);
        for s in chunk {
            write_sample_record(&mut w, s)?;
        }
        w.flush()?;
        entries.push(ShardEntry {
            role: role.to_string(),
            path: name,
            count: chunk.len(),
        });
    }
    Ok(entries)
}

pub fn read_samples(dir: &Path, entries: &[ShardEntry]) -> Result<Vec<SolarSample>, DataError> {
    let mut out = Vec::new();
    for e in entries {
        let mut r = BufReader::new(std::fs::File::open(dir.join(&e.path))?);
        let mut n = 0usize;
        while let Some(s) = read_sample_record(&mut r)? {
            out.push(s);
            n += 1;
        }
        if n != e.count {
            return Err(DataError::Manifest(format!(
                "shard {} holds {} records, manifest says {}",
                e.path, n, e.count
            )));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShardEntry {
    pub role: String,
    pub path: String,
    pub count: usize,
}

/// Half-open timestamp window [start, end).
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitWindow {
    pub start: i64,
    pub end: i64,
    pub count: usize,
}

impl SplitWindow {
    pub fn contains(&self, t: i64) -> bool {
        t >= self.start && t < self.end
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldWindows {
    pub fold: usize,
    pub train: SplitWindow,
    pub val: SplitWindow,
    pub test: SplitWindow,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldStats {
    pub fold: usize,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub code_version: String,
    pub seed: u64,
    pub n_samples: usize,
    pub dropped_missing: usize,
    pub history: usize,
    pub pre_history: usize,
    pub horizon: usize,
    pub channels: usize,
    pub image_hw: usize,
    pub year_steps: usize,
    pub class_counts: [u64; 4],
    pub shards: Vec<ShardEntry>,
    pub folds: Vec<FoldWindows>,
    pub standardization: Vec<FoldStats>,
    pub latent_path: String,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(dir.join(MANIFEST_NAME))?;
        serde_json::to_writer_pretty(BufWriter::new(file), self)
            .map_err(|e| DataError::Manifest(format!("serialize: {e}")))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(dir.join(MANIFEST_NAME))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DataError::Manifest(format!("parse: {e}")))
    }

    pub fn shard_role(&self, role: &str) -> Vec<ShardEntry> {
        self.shards.iter().filter(|e| e.role == role).cloned().collect()
    }

    pub fn fold(&self, fold: usize) -> Result<&FoldWindows, DataError> {
        self.folds
            .iter()
            .find(|f| f.fold == fold)
            .ok_or_else(|| DataError::Manifest(format!("no fold {fold} in manifest")))
    }

    pub fn stats(&self, fold: usize) -> Result<&FoldStats, DataError> {
        self.standardization
            .iter()
            .find(|f| f.fold == fold)
            .ok_or_else(|| DataError::Manifest(format!("no stats for fold {fold}")))
    }
}

/// A dataset directory opened for reading.
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self, DataError> {
        let manifest = Manifest::load(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load_samples(&self) -> Result<Vec<SolarSample>, DataError> {
        read_samples(&self.dir, &self.manifest.shard_role("samples"))
    }

    /// Frames as (timestamp, [1,C,H,W] record) pairs, timestamp-sorted.
    pub fn load_frames(&self) -> Result<Vec<SolarSample>, DataError> {
        let mut frames = read_samples(&self.dir, &self.manifest.shard_role("frames"))?;
        frames.sort_by_key(|f| f.timestamp);
        Ok(frames)
    }

    pub fn load_latent(&self) -> Result<LatentLog, DataError> {
        let file = std::fs::File::open(self.dir.join(&self.manifest.latent_path))?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| DataError::Manifest(format!("latent log: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(ts: i64, seed: u64) -> SolarSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SolarSample {
            images: Tensor::from_vec(
                &[2, 3, 4, 4],
                (0..96).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            ),
            label: FlareClass::from_index((seed % 4) as usize).unwrap(),
            timestamp: ts,
            missing: (0..6).map(|i| i == 1).collect(),
        }
    }

    #[test]
    fn record_roundtrip_is_exact() {
        let s = sample(123, 7);
        let mut buf = Vec::new();
        write_sample_record(&mut buf, &s).unwrap();
        let mut r = std::io::Cursor::new(buf);
        let back = read_sample_record(&mut r).unwrap().unwrap();
        assert_eq!(back.timestamp, s.timestamp);
        assert_eq!(back.label, s.label);
        assert_eq!(back.missing, s.missing);
        assert_eq!(back.images.shape(), s.images.shape());
        assert_eq!(back.images.data(), s.images.data());
        assert!(read_sample_record(&mut r).unwrap().is_none());
    }

    #[test]
    fn record_layout_is_pinned() {
        // Byte-level check of the header.
        let s = sample(513, 3);
        let mut buf = Vec::new();
        write_sample_record(&mut buf, &s).unwrap();
        assert_eq!(&buf[0..4], b"FBS1");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1); // version
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 2); // k
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3); // C
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 4); // H
        assert_eq!(u32::from_le_bytes(buf[20..24].try_into().unwrap()), 4); // W
        assert_eq!(i64::from_le_bytes(buf[24..32].try_into().unwrap()), 513);
        assert_eq!(buf[32], s.label.index() as u8);
        assert_eq!(&buf[33..39], &[0, 1, 0, 0, 0, 0]);
        assert_eq!(buf.len(), 39 + 96 * 4);
    }

    #[test]
    fn shard_write_read_with_counts() {
        let dir = tempfile::tempdir().unwrap();
        let samples: Vec<SolarSample> = (0..5).map(|i| sample(i, i as u64)).collect();
        let entries = write_samples(dir.path(), "samples", &samples).unwrap();
        assert_eq!(entries.len(), 1);
        assert_eq!(entries[0].count, 5);
        let back = read_samples(dir.path(), &entries).unwrap();
        assert_eq!(back.len(), 5);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.images.data(), b.images.data());
        }
        // A lying manifest is rejected.
        let mut bad = entries.clone();
        bad[0].count = 4;
        assert!(read_samples(dir.path(), &bad).is_err());
    }

    #[test]
    fn corrupt_magic_rejected() {
        let s = sample(1, 1);
        let mut buf = Vec::new();
        write_sample_record(&mut buf, &s).unwrap();
        buf[0] = b'X';
        let mut r = std::io::Cursor::new(buf);
        assert!(read_sample_record(&mut r).is_err());
    }
}
