//! Dataset manifests, the per-sequence feature cache, and WAV input.
//!
//! Feature cache layout (little endian):
//!
//! ```text
//! magic   4 bytes  "DSFC"
//! version u32      1
//! T       u64      frames
//! D       u64      bands
//! values  T*D f64  row-major
//! ```

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Waveform};
use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 4] = b"DSFC";
pub const CACHE_VERSION: u32 = 1;
pub const CACHE_EXT: &str = "fcache";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub seq_id: String,
    pub scene_label: String,
    pub device_id: String,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let headers = rdr.headers()?.clone();
    let want = ["path", "seq_id", "scene_label", "device_id"];
    if headers.iter().collect::<Vec<_>>() != want {
        return Err(Error::format(
            path,
            format!("manifest header must be `{}`", want.join(",")),
        ));
    }
    rdr.deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["path", "seq_id", "scene_label", "device_id"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Resolves a manifest `path` entry relative to the manifest's directory.
pub fn resolve(manifest: &Path, entry: &str) -> PathBuf {
    let p = Path::new(entry);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest.parent().unwrap_or(Path::new(".")).join(p)
    }
}

pub fn write_feature_cache(path: &Path, frames: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(CACHE_MAGIC).map_err(io)?;
    w.write_all(&CACHE_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(frames.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&(frames.ncols() as u64).to_le_bytes()).map_err(io)?;
    for v in frames.iter() {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_feature_cache(path: &Path) -> Result<Array2<f64>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CACHE_MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != CACHE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io)?;
    let t = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8).map_err(io)?;
    let d = u64::from_le_bytes(b8) as usize;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(io)?;
    if bytes.len() != t * d * 8 {
        return Err(Error::format(
            path,
            format!("expected {} values, found {} bytes", t * d, bytes.len()),
        ));
    }
    let values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((t, d), values).map_err(|e| Error::format(path, e.to_string()))
}

/// Loads every sequence listed in a manifest of feature caches.
pub fn load_corpus(manifest: &Path) -> Result<Vec<FeatureSequence>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let frames = read_feature_cache(&resolve(manifest, &row.path))?;
            FeatureSequence::new(frames, row.seq_id, row.scene_label, row.device_id)
        })
        .collect()
}

/// Writes one cache file per sequence into `dir` plus `dir/manifest.csv`;
/// returns the manifest path.
pub fn save_corpus(dir: &Path, seqs: &[FeatureSequence]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rows = Vec::with_capacity(seqs.len());
    for s in seqs {
        let name = format!("{}.{CACHE_EXT}", sanitize(&s.seq_id));
        write_feature_cache(&dir.join(&name), &s.frames)?;
        rows.push(ManifestRow {
            path: name,
            seq_id: s.seq_id.clone(),
            scene_label: s.scene_label.clone(),
            device_id: s.device_id.clone(),
        });
    }
    let manifest = dir.join("manifest.csv");
    write_manifest(&manifest, &rows)?;
    Ok(manifest)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect()
}

/// Reads a mono WAV file as floating-point samples in [-1, 1].
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format(path, "only mono audio is supported"));
    }
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in &w.samples {
        writer.write_sample(s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}
