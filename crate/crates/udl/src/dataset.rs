//! On-disk pair datasets.
//!
//! A dataset directory holds `manifest.json` and one or more `data-NNNNN.bin`
//! shards. Each record is the magic `UDLR`, `u32` height, `u32` width (both
//! little-endian), then `2·h·w` little-endian `f32` values: the source image
//! followed by the target image, row-major.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use udl_core::datasets::{AlignmentPair, PairSource};
use udl_core::imaging::NoiseSpec;
use udl_core::{Image, RigidTransform};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;
pub const RECORD_MAGIC: &[u8; 4] = b"UDLR";
pub const RECORDS_PER_SHARD: usize = 1024;
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecordEntry {
    pub file: String,
    /// Byte offset of the record inside `file`.
    pub offset: u64,
    pub angle_deg: Option<f64>,
    pub dx: Option<f64>,
    pub dy: Option<f64>,
    /// CRC-32 of the whole record, header included.
    pub checksum: u32,
}

impl RecordEntry {
    fn gt(&self) -> std::result::Result<Option<RigidTransform>, String> {
        match (self.angle_deg, self.dx, self.dy) {
            (Some(a), Some(dx), Some(dy)) => RigidTransform::try_new(a, dx, dy).map(Some).map_err(|e| e.to_string()),
            (None, None, None) => Ok(None),
            _ => Err("ground truth is partially missing".into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub split: String,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub noise: NoiseSpec,
    pub seed: u64,
    /// Parameters of the generator that produced the data.
    #[serde(default)]
    pub generator: serde_json::Value,
    pub records: Vec<RecordEntry>,
}

/// Description of a dataset about to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetInfo {
    pub split: String,
    pub seed: u64,
    pub generator: serde_json::Value,
}

fn encode_record(pair: &AlignmentPair) -> Vec<u8> {
    let (h, w) = pair.source.dims();
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * h * w);
    buf.extend_from_slice(RECORD_MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    for v in pair.source.pixels().iter().chain(pair.target.pixels()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn shard_name(index: usize) -> String {
    format!("data-{index:05}.bin")
}

/// Streams pairs into a dataset directory; the manifest is written last.
#[derive(Debug)]
pub struct DatasetWriter {
    dir: PathBuf,
    info: DatasetInfo,
    shape: Option<((usize, usize), NoiseSpec)>,
    records: Vec<RecordEntry>,
    shard: Option<(String, BufWriter<File>, u64)>,
}

impl DatasetWriter {
    pub fn create(dir: &Path, info: DatasetInfo) -> Result<Self> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        Ok(Self { dir: dir.to_path_buf(), info, shape: None, records: Vec::new(), shard: None })
    }

    pub fn push(&mut self, pair: &AlignmentPair) -> Result<()> {
        pair.validate()?;
        let index = self.records.len();
        match self.shape {
            None => self.shape = Some((pair.source.dims(), pair.noise)),
            Some(((h, w), _)) if pair.source.dims() != (h, w) => {
                return Err(udl_core::Error::Shape(format!("pair {index} is not {h}x{w}")).into());
            }
            Some(_) => {}
        }
        if index % RECORDS_PER_SHARD == 0 {
            self.close_shard()?;
            let name = shard_name(index / RECORDS_PER_SHARD);
            let path = self.dir.join(&name);
            let file = File::create(&path).map_err(Error::io(&path))?;
            self.shard = Some((name, BufWriter::new(file), 0));
        }
        let (name, out, offset) = self.shard.as_mut().expect("shard open");
        let bytes = encode_record(pair);
        out.write_all(&bytes).map_err(Error::io(self.dir.join(&*name)))?;
        let gt = pair.gt;
        self.records.push(RecordEntry {
            file: name.clone(),
            offset: *offset,
            angle_deg: gt.map(|t| t.angle()),
            dx: gt.map(|t| t.dx),
            dy: gt.map(|t| t.dy),
            checksum: crc32fast::hash(&bytes),
        });
        *offset += bytes.len() as u64;
        Ok(())
    }

    fn close_shard(&mut self) -> Result<()> {
        if let Some((name, mut out, _)) = self.shard.take() {
            out.flush().map_err(Error::io(self.dir.join(name)))?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<DatasetManifest> {
        self.close_shard()?;
        let ((height, width), noise) =
            self.shape.ok_or_else(|| Error::Usage("refusing to write an empty dataset".into()))?;
        let manifest = DatasetManifest {
            version: FORMAT_VERSION,
            split: self.info.split,
            count: self.records.len(),
            height,
            width,
            noise,
            seed: self.info.seed,
            generator: self.info.generator,
            records: self.records,
        };
        let path = self.dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text + "\n").map_err(Error::io(&path))?;
        Ok(manifest)
    }
}

/// Writes `pairs` into `dir` (created if needed) and returns the manifest.
pub fn write_dataset(dir: &Path, pairs: &[AlignmentPair], info: &DatasetInfo) -> Result<DatasetManifest> {
    let mut writer = DatasetWriter::create(dir, info.clone())?;
    for p in pairs {
        writer.push(p)?;
    }
    writer.finish()
}

/// A dataset directory opened for random access.
#[derive(Debug, Clone)]
pub struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
    digest: String,
}

/// Opens `dir`, validating the manifest and the size of every shard.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(Error::io(&path))?;
    let bad = |reason: String| Error::Manifest { path: path.clone(), reason };
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| bad(e.to_string()))?;
    if manifest.version != FORMAT_VERSION {
        return Err(bad(format!("unsupported version {}", manifest.version)));
    }
    if manifest.count != manifest.records.len() {
        return Err(bad(format!("count {} but {} records", manifest.count, manifest.records.len())));
    }
    if manifest.height == 0 || manifest.width == 0 {
        return Err(bad("empty image dimensions".into()));
    }
    let record_len = (HEADER_LEN + 8 * manifest.height * manifest.width) as u64;
    let mut sizes = std::collections::BTreeMap::new();
    for (i, rec) in manifest.records.iter().enumerate() {
        if rec.file.contains(['/', '\\']) || rec.file.starts_with('.') {
            return Err(bad(format!("record {i} names a file outside the dataset: {}", rec.file)));
        }
        rec.gt().map_err(|reason| Error::CorruptRecord { path: dir.join(&rec.file), record: i, reason })?;
        let size = match sizes.get(&rec.file) {
            Some(&s) => s,
            None => {
                let p = dir.join(&rec.file);
                let s = fs::metadata(&p).map_err(Error::io(&p))?.len();
                sizes.insert(rec.file.clone(), s);
                s
            }
        };
        if rec.offset + record_len > size {
            return Err(Error::CorruptRecord {
                path: dir.join(&rec.file),
                record: i,
                reason: format!("file is truncated ({size} bytes, record ends at {})", rec.offset + record_len),
            });
        }
    }
    Ok(Dataset { dir: dir.to_path_buf(), manifest, digest: format!("{:08x}", crc32fast::hash(&bytes)) })
}

impl Dataset {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// CRC-32 of the manifest bytes, as hex.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    /// Reads and verifies record `index`.
    pub fn get(&self, index: usize) -> Result<AlignmentPair> {
        let rec = self.manifest.records.get(index).ok_or(udl_core::Error::Index { index, len: self.len() })?;
        let path = self.dir.join(&rec.file);
        let corrupt = |reason: String| Error::CorruptRecord { path: path.clone(), record: index, reason };
        let (h, w) = (self.manifest.height, self.manifest.width);
        let mut buf = vec![0u8; HEADER_LEN + 8 * h * w];
        let mut file = File::open(&path).map_err(Error::io(&path))?;
        file.seek(SeekFrom::Start(rec.offset)).map_err(Error::io(&path))?;
        file.read_exact(&mut buf).map_err(|e| corrupt(format!("short read: {e}")))?;
        if &buf[..4] != RECORD_MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let rh = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes")) as usize;
        let rw = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes")) as usize;
        if (rh, rw) != (h, w) {
            return Err(corrupt(format!("record is {rh}x{rw}, manifest says {h}x{w}")));
        }
        if crc32fast::hash(&buf) != rec.checksum {
            return Err(corrupt("checksum mismatch".into()));
        }
        let values: Vec<f32> =
            buf[HEADER_LEN..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        let (src, dst) = values.split_at(h * w);
        Ok(AlignmentPair {
            source: Image::new(h, w, src.to_vec())?,
            target: Image::new(h, w, dst.to_vec())?,
            gt: rec.gt().map_err(corrupt)?,
            noise: self.manifest.noise,
        })
    }

    /// Every pair in manifest order.
    pub fn load_all(&self) -> Result<Vec<AlignmentPair>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<AlignmentPair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }
}

impl PairSource for Dataset {
    fn len(&self) -> usize {
        self.manifest.count
    }

    fn pair(&self, index: usize) -> udl_core::Result<AlignmentPair> {
        self.get(index).map_err(|e| match e {
            Error::Core(inner) => inner,
            other => udl_core::Error::Source(other.to_string()),
        })
    }
}
