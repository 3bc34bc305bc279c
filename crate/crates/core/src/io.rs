//! On-disk formats.
//!
//! * Color fields: 8-bit RGB PNG (values rounded half-to-even and clamped
//!   to `[0, 255]`), optionally with a lossless `.icf` sidecar.
//! * `.icf`: 16-byte header (`b"ICF1"`, `u32` width, `u32` height, `u32`
//!   channel count = 3, all little-endian) followed by `width·height·3`
//!   little-endian `f64` values in row-major, channel-interleaved order.
//! * Label maps: single-channel PNG, pixel value = instance id, 0 =
//!   background. Written as 16-bit; 8-bit input is accepted.
//! * Dataset manifest: JSON, see [`DatasetManifest`].

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb as ImgRgb};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{check_dims, ColorField, LabelMap, CHANNELS};
use crate::scene::{generate_scene, SceneSpec};

const ICF_MAGIC: &[u8; 4] = b"ICF1";
const ICF_HEADER: usize = 16;

/// Quantizes one color value for PNG storage.
#[inline]
pub fn quantize(v: f64) -> u8 {
    v.clamp(0.0, 255.0).round_ties_even() as u8
}

pub fn field_to_rgb8(field: &ColorField) -> ImageBuffer<ImgRgb<u8>, Vec<u8>> {
    let raw: Vec<u8> = field.values().iter().map(|&v| quantize(v)).collect();
    ImageBuffer::from_raw(field.width() as u32, field.height() as u32, raw).expect("buffer size matches dims")
}

/// PNG bytes of the quantized field.
pub fn encode_field_png(field: &ColorField) -> Result<Vec<u8>> {
    let mut out = std::io::Cursor::new(Vec::new());
    field_to_rgb8(field)
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(out.into_inner())
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    Ok(())
}

/// Path of the lossless sidecar written next to a PNG field.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("icf")
}

/// Writes the quantized PNG; with `exact`, also the `.icf` sidecar.
pub fn save_field(path: &Path, field: &ColorField, exact: bool) -> Result<()> {
    ensure_parent(path)?;
    field_to_rgb8(field)
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    if exact {
        save_field_exact(&sidecar_path(path), field)?;
    }
    Ok(())
}

/// Loads a field: `.icf` files exactly, anything else as an RGB image.
pub fn load_field(path: &Path) -> Result<ColorField> {
    if path.extension().is_some_and(|e| e == "icf") {
        return load_field_exact(path);
    }
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    ColorField::new(w, h, rgb.into_raw().into_iter().map(f64::from).collect())
}

/// Loads the exact sidecar when one sits next to `path`, else `path` itself.
pub fn load_field_preferring_exact(path: &Path) -> Result<ColorField> {
    let side = sidecar_path(path);
    if side != path && side.exists() {
        load_field_exact(&side)
    } else {
        load_field(path)
    }
}

pub fn encode_field_exact(field: &ColorField) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(ICF_HEADER + field.values().len() * 8);
    bytes.extend_from_slice(ICF_MAGIC);
    bytes.extend_from_slice(&(field.width() as u32).to_le_bytes());
    bytes.extend_from_slice(&(field.height() as u32).to_le_bytes());
    bytes.extend_from_slice(&(CHANNELS as u32).to_le_bytes());
    for v in field.values() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_field_exact(bytes: &[u8], path: &Path) -> Result<ColorField> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < ICF_HEADER {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
        });
    }
    if &bytes[..4] != ICF_MAGIC {
        return Err(corrupt("bad magic, expected ICF1".into()));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (w, h, ch) = (word(4), word(8), word(12));
    if ch != CHANNELS {
        return Err(corrupt(format!("expected 3 channels, header says {ch}")));
    }
    check_dims(w, h)?;
    let body = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(CHANNELS * 8))
        .ok_or(Error::InvalidDimensions {
            width: w,
            height: h,
            reason: "size overflows",
        })?;
    let expected = ICF_HEADER + body;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(corrupt(format!(
            "{} trailing bytes after offset {expected}",
            bytes.len() - expected
        )));
    }
    let values = bytes[ICF_HEADER..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ColorField::new(w, h, values).map_err(|e| corrupt(e.to_string()))
}

pub fn save_field_exact(path: &Path, field: &ColorField) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, encode_field_exact(field)).map_err(|e| Error::io(path, e))
}

pub fn load_field_exact(path: &Path) -> Result<ColorField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_field_exact(&bytes, path)
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    if labels.instance_count() > u16::MAX as usize {
        return Err(Error::TooManyInstances(labels.instance_count()));
    }
    ensure_parent(path)?;
    let raw: Vec<u16> = labels.ids().iter().map(|&id| id as u16).collect();
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(labels.width() as u32, labels.height() as u32, raw).expect("buffer size matches dims");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Loaded labels plus the `(original id, compacted id)` table.
#[derive(Debug, Clone)]
pub struct LoadedLabels {
    pub labels: LabelMap,
    pub remap: Vec<(u32, u32)>,
}

pub fn load_labels(path: &Path) -> Result<LoadedLabels> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let ids: Vec<u32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
        other => {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("label maps must be single-channel, got {:?}", other.color()),
            })
        }
    };
    let (labels, remap) = LabelMap::compacted(w, h, ids)?;
    Ok(LoadedLabels { labels, remap })
}

/// A closed polygon tagged with the instance id it paints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub id: u32,
    pub points: Vec<(f64, f64)>,
}

/// Even-odd scanline fill at pixel centers. Later polygons overwrite
/// earlier ones; ids are compacted afterwards.
pub fn rasterize_polygons(polygons: &[Polygon], width: usize, height: usize) -> Result<LoadedLabels> {
    check_dims(width, height)?;
    for (index, poly) in polygons.iter().enumerate() {
        let mut distinct: Vec<(f64, f64)> = Vec::new();
        for &p in &poly.points {
            if !distinct.contains(&p) {
                distinct.push(p);
            }
        }
        if distinct.len() < 3 {
            return Err(Error::DegeneratePolygon { index });
        }
    }
    let mut ids = vec![0u32; width * height];
    let mut crossings = Vec::new();
    for poly in polygons {
        let n = poly.points.len();
        for y in 0..height {
            let yc = y as f64 + 0.5;
            crossings.clear();
            for k in 0..n {
                let (x0, y0) = poly.points[k];
                let (x1, y1) = poly.points[(k + 1) % n];
                // Half-open in y so shared vertices are counted once.
                if (y0 <= yc) != (y1 <= yc) {
                    crossings.push(x0 + (yc - y0) * (x1 - x0) / (y1 - y0));
                }
            }
            crossings.sort_by(f64::total_cmp);
            for pair in crossings.chunks_exact(2) {
                for x in 0..width {
                    let xc = x as f64 + 0.5;
                    if xc > pair[0] && xc < pair[1] {
                        ids[y * width + x] = poly.id;
                    }
                }
            }
        }
    }
    let (labels, remap) = LabelMap::compacted(width, height, ids)?;
    Ok(LoadedLabels { labels, remap })
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Paths are relative to the manifest's directory.
    pub image: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<PathBuf>,
}

/// `{"version": 1, "entries": [{"id", "image", "labels", "field"?}]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, relative: &Path) -> PathBuf {
        self.root.join(relative)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ensure_parent(path)?;
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Parses and validates: version, unique ids, and every referenced file
    /// must exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        if manifest.version != MANIFEST_VERSION {
            return Err(corrupt(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut seen = HashSet::new();
        for e in &manifest.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(corrupt(format!("duplicate entry id {:?}", e.id)));
            }
            let files = [Some(&e.image), Some(&e.labels), e.field.as_ref()];
            for f in files.into_iter().flatten() {
                let full = manifest.resolve(f);
                if !full.is_file() {
                    return Err(corrupt(format!("entry {:?}: missing file {}", e.id, full.display())));
                }
            }
        }
        Ok(manifest)
    }
}

/// Generates `count` scenes with seeds `seed + index` and writes
/// `images/<id>.png`, `labels/<id>.png` and `manifest.json` under `out`.
pub fn generate_dataset(count: usize, template: &SceneSpec, seed: u64, out: &Path) -> Result<DatasetManifest> {
    if count < 1 {
        return Err(Error::InvalidArgument("dataset count must be ≥ 1".into()));
    }
    let mut entries = Vec::with_capacity(count);
    for index in 0..count {
        let scene = generate_scene(&template.with_seed(seed + index as u64))?;
        let id = format!("scene_{index:04}");
        let image = PathBuf::from("images").join(format!("{id}.png"));
        let labels = PathBuf::from("labels").join(format!("{id}.png"));
        save_field(&out.join(&image), &scene.image, false)?;
        save_labels(&out.join(&labels), &scene.labels)?;
        entries.push(ManifestEntry {
            id,
            image,
            labels,
            field: None,
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        entries,
        root: out.to_path_buf(),
    };
    manifest.save(&out.join("manifest.json"))?;
    Ok(manifest)
}
