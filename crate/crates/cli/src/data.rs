//! Loading manifest entries together with their color fields.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use icl_core::io::{load_field, load_field_preferring_exact, load_labels, save_field, DatasetManifest, ManifestEntry};
use icl_core::{ColorField, LabelMap};

/// Where a field for `id` lives inside a fields directory. An exact `.icf`
/// sidecar next to it is preferred when present.
pub fn field_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

pub fn save_entry_field(dir: &Path, id: &str, field: &ColorField) -> Result<()> {
    let path = field_path(dir, id);
    save_field(&path, field, true).with_context(|| format!("writing field for {id}"))
}

#[derive(Debug, Clone)]
pub struct Entry {
    pub id: String,
    pub image: ColorField,
    pub labels: LabelMap,
}

pub fn load_entry(manifest: &DatasetManifest, entry: &ManifestEntry) -> Result<Entry> {
    let image = load_field(&manifest.resolve(&entry.image))?;
    let labels = load_labels(&manifest.resolve(&entry.labels))?.labels;
    image.same_dims(&labels).with_context(|| format!("entry {}", entry.id))?;
    Ok(Entry {
        id: entry.id.clone(),
        image,
        labels,
    })
}

pub fn load_entries(manifest: &DatasetManifest) -> Result<Vec<Entry>> {
    manifest.entries.iter().map(|e| load_entry(manifest, e)).collect()
}

/// The field for `entry`: from `fields_dir` when given, otherwise from the
/// manifest's own `field` path.
pub fn load_entry_field(manifest: &DatasetManifest, entry: &ManifestEntry, fields_dir: Option<&Path>) -> Result<ColorField> {
    let path = match (fields_dir, &entry.field) {
        (Some(dir), _) => field_path(dir, &entry.id),
        (None, Some(rel)) => manifest.resolve(rel),
        (None, None) => bail!("entry {} has no field; pass --fields", entry.id),
    };
    load_field_preferring_exact(&path).with_context(|| format!("field for {}", entry.id))
}
