//! Geo-tagged datasets and their line-delimited manifest format.
//!
//! Each manifest line is a JSON object:
//! `{"id": 7, "image": "images/7.f32", "easting": 100.0, "northing": 3.5,
//!   "split": "database", "noise_label": "noisy", "noise_std": 0.8}`.
//! `split` defaults to `database`; the noise fields are optional. Image paths
//! are relative to the manifest. `.f32` files hold a little-endian `u32`
//! shape header (C, H, W) followed by the values; `.png`/`.jpg` files are
//! decoded to RGB and scaled to `[-1, 1]`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::types::{GeoTag, PlaceSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Database,
    Query,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseLabel {
    Clean,
    Noisy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseInfo {
    pub label: NoiseLabel,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub sample: PlaceSample,
    pub split: Split,
    pub noise: Option<NoiseInfo>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub items: Vec<Item>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestLine {
    id: u64,
    image: PathBuf,
    easting: f64,
    northing: f64,
    #[serde(default)]
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_label: Option<NoiseLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    noise_std: Option<f64>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|it| it.split == split).collect()
    }

    /// Cloned samples of one split, in manifest order.
    pub fn samples(&self, split: Split) -> Vec<PlaceSample> {
        self.split(split).into_iter().map(|it| it.sample.clone()).collect()
    }

    /// SHA-256 over ids, geo tags, splits, noise annotations and pixel values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for it in &self.items {
            h.update(it.sample.id.to_le_bytes());
            h.update(it.sample.geo.easting.to_le_bytes());
            h.update(it.sample.geo.northing.to_le_bytes());
            h.update([it.split as u8]);
            if let Some(n) = it.noise {
                h.update([1 + n.label as u8]);
                h.update(n.std.to_le_bytes());
            }
            for &d in it.sample.image.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in it.sample.image.iter() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for it in &self.items {
            if !seen.insert(it.sample.id) {
                return Err(Error::DuplicateId(it.sample.id));
            }
        }
        Ok(())
    }

    /// Writes `manifest.jsonl` and one `.f32` file per image under `dir`.
    pub fn write_manifest(&self, dir: &Path) -> Result<PathBuf> {
        self.check_ids()?;
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let mut text = String::new();
        for it in &self.items {
            let rel = PathBuf::from("images").join(format!("{}.f32", it.sample.id));
            write_atomic(&dir.join(&rel), &encode_image(&it.sample.image))?;
            let line = ManifestLine {
                id: it.sample.id,
                image: rel,
                easting: it.sample.geo.easting,
                northing: it.sample.geo.northing,
                split: it.split,
                noise_label: it.noise.map(|n| n.label),
                noise_std: it.noise.map(|n| n.std),
            };
            text.push_str(&serde_json::to_string(&line)?);
            text.push('\n');
        }
        let path = dir.join("manifest.jsonl");
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }

    /// Reads a manifest; `path` may be the file or the directory holding `manifest.jsonl`.
    pub fn read_manifest(path: &Path) -> Result<Self> {
        let path = if path.is_dir() {
            path.join("manifest.jsonl")
        } else {
            path.to_path_buf()
        };
        let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut items = Vec::new();
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::io(&path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = |msg: String| Error::Manifest {
                path: path.clone(),
                line: line_no,
                msg,
            };
            let rec: ManifestLine = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            let geo = GeoTag::new(rec.easting, rec.northing);
            if !geo.is_finite() {
                return Err(bad("non-finite coordinates".into()));
            }
            let noise = match (rec.noise_label, rec.noise_std) {
                (Some(label), Some(std)) if std >= 0.0 => Some(NoiseInfo { label, std }),
                (None, None) => None,
                _ => {
                    return Err(bad(
                        "noise_label and a nonnegative noise_std must be given together".into()
                    ))
                }
            };
            let image_path = root.join(&rec.image);
            let image = load_image(&image_path).map_err(|e| {
                Error::Data(format!(
                    "sample {}: cannot load image {}: {e}",
                    rec.id,
                    image_path.display()
                ))
            })?;
            items.push(Item {
                sample: PlaceSample { id: rec.id, image, geo },
                split: rec.split,
                noise,
            });
        }
        let ds = Dataset { items };
        ds.check_ids()?;
        Ok(ds)
    }
}

pub fn encode_image(image: &Array3<f32>) -> Vec<u8> {
    let (c, h, w) = image.dim();
    let mut bytes = Vec::with_capacity(12 + image.len() * 4);
    for d in [c, h, w] {
        bytes.write_u32::<LittleEndian>(d as u32).expect("vec write");
    }
    for v in image.iter() {
        bytes.write_f32::<LittleEndian>(*v).expect("vec write");
    }
    bytes
}

pub fn decode_image(mut bytes: &[u8]) -> std::result::Result<Array3<f32>, String> {
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = bytes.read_u32::<LittleEndian>().map_err(|e| e.to_string())? as usize;
    }
    let count = dims[0] * dims[1] * dims[2];
    if bytes.len() != count * 4 {
        return Err(format!("expected {count} values, found {} bytes", bytes.len()));
    }
    let mut data = vec![0f32; count];
    bytes
        .read_f32_into::<LittleEndian>(&mut data)
        .map_err(|e| e.to_string())?;
    Array3::from_shape_vec((dims[0], dims[1], dims[2]), data).map_err(|e| e.to_string())
}

fn load_image(path: &Path) -> std::result::Result<Array3<f32>, String> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .unwrap_or("")
        .to_ascii_lowercase();
    if ext == "f32" {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| e.to_string())?;
        return decode_image(&bytes);
    }
    let rgb = image::open(path).map_err(|e| e.to_string())?.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 127.5 - 1.0
    }))
}
