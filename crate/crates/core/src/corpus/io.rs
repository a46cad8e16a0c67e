//! On-disk formats: `FEA1` feature matrices and TSV manifests.
//!
//! A feature file is the magic `FEA1`, then `u32` LE frame count `T`, `u32` LE
//! dimension `D`, then `T·D` little-endian `f32` values in row-major order.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Features;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"FEA1";

pub fn encode_features(f: &Features) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * f.data.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(f.frames as u32).to_le_bytes());
    out.extend_from_slice(&(f.dim as u32).to_le_bytes());
    for v in &f.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], origin: &str) -> Result<Features> {
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Header(origin.to_string()));
    }
    let frames = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if frames == 0 || dim == 0 {
        return Err(Error::Dimension(format!("{origin}: {frames}x{dim} feature matrix")));
    }
    let body = &bytes[12..];
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Dimension(format!("{origin}: header overflows")))?;
    if body.len() != expected {
        return Err(Error::Dimension(format!(
            "{origin}: header says {frames}x{dim} ({expected} bytes) but body has {} bytes",
            body.len()
        )));
    }
    let data: Vec<f32> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{origin}: value #{pos}")));
    }
    Ok(Features { frames, dim, data })
}

pub fn write_features(path: &Path, f: &Features) -> Result<()> {
    f.validate()?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_features(f)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Features> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, &path.display().to_string())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub feature_path: PathBuf,
    pub duration_frames: usize,
    pub language_id: String,
    pub transcript: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

fn check_field(s: &str, what: &str, line: usize) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(Error::Manifest {
            line,
            reason: format!("{what} contains a tab or newline"),
        });
    }
    Ok(())
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Manifest { entries };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, e) in self.entries.iter().enumerate() {
            if e.id.is_empty() || !seen.insert(e.id.as_str()) {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("duplicate or empty id {:?}", e.id),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes as `id \t feature_path \t duration_frames \t language_id \t transcript`.
    pub fn to_tsv(&self) -> Result<String> {
        let mut out = String::new();
        for (i, e) in self.entries.iter().enumerate() {
            let path = e.feature_path.to_string_lossy();
            let tr = e.transcript.as_deref().unwrap_or("");
            for (s, what) in [(e.id.as_str(), "id"), (&*path, "path"), (&e.language_id, "language"), (tr, "transcript")] {
                check_field(s, what, i + 1)?;
            }
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", e.id, path, e.duration_frames, e.language_id, tr));
        }
        Ok(out)
    }

    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 5 {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("expected 5 tab-separated columns, found {}", cols.len()),
                });
            }
            let duration_frames = cols[2].parse().map_err(|_| Error::Manifest {
                line: i + 1,
                reason: format!("bad duration {:?}", cols[2]),
            })?;
            entries.push(ManifestEntry {
                id: cols[0].to_string(),
                feature_path: PathBuf::from(cols[1]),
                duration_frames,
                language_id: cols[3].to_string(),
                transcript: (!cols[4].is_empty()).then(|| cols[4].to_string()),
            });
        }
        Manifest::new(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_tsv()?.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::from_tsv(&text)
    }

    /// Resolves a feature path relative to the directory holding the manifest.
    pub fn resolve(manifest_path: &Path, feature_path: &Path) -> PathBuf {
        if feature_path.is_absolute() {
            feature_path.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(feature_path)
        }
    }

    /// Checks that every row's duration matches its feature file.
    pub fn validate_durations(&self, manifest_path: &Path) -> Result<()> {
        for (i, e) in self.entries.iter().enumerate() {
            let f = read_features(&Manifest::resolve(manifest_path, &e.feature_path))?;
            if f.frames != e.duration_frames {
                return Err(Error::Manifest {
                    line: i + 1,
                    reason: format!("duration {} but feature file has {} frames", e.duration_frames, f.frames),
                });
            }
        }
        Ok(())
    }
}
