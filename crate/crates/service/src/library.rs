//! The reference library: every decodable image in one directory.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use base64::Engine;
use image::imageops::FilterType;
use image::ImageFormat;
use relight::imaging::{load_image, mean_value, ImageRGB};
use relight::{Error, Result};
use serde::Serialize;

pub const THUMBNAIL_SIDE: u32 = 96;

#[derive(Clone, Debug)]
pub struct Reference {
    pub id: String,
    pub path: PathBuf,
    pub image: ImageRGB,
    pub mean_v: f64,
    /// PNG bytes, longest side at most [`THUMBNAIL_SIDE`].
    pub thumbnail_png: Vec<u8>,
}

/// Wire form of a library entry.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct ReferenceEntry {
    pub id: String,
    pub mean_v: f64,
    pub width: usize,
    pub height: usize,
    /// Base64-encoded PNG.
    pub thumbnail: String,
}

impl Reference {
    pub fn entry(&self) -> ReferenceEntry {
        ReferenceEntry {
            id: self.id.clone(),
            mean_v: self.mean_v,
            width: self.image.width(),
            height: self.image.height(),
            thumbnail: base64::engine::general_purpose::STANDARD.encode(&self.thumbnail_png),
        }
    }
}

pub fn thumbnail_png(img: &ImageRGB) -> Vec<u8> {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let scale = (THUMBNAIL_SIDE as f64 / w.max(h) as f64).min(1.0);
    let (tw, th) = (((w as f64 * scale).round() as u32).max(1), ((h as f64 * scale).round() as u32).max(1));
    let small = image::imageops::resize(&rgb, tw, th, FilterType::Triangle);
    let mut out = std::io::Cursor::new(Vec::new());
    small.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

/// Loads every decodable image in `dir`, sorted by ascending mean V (ties
/// by id). Undecodable files are skipped with a warning; when two files
/// share a stem the first in name order wins.
pub fn load_library(dir: &Path) -> Result<Vec<Reference>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut seen = HashSet::new();
    let mut refs = Vec::new();
    for path in paths {
        let Some(id) = path.file_stem().and_then(|s| s.to_str()).map(str::to_owned) else {
            log::warn!("skipping {}: file name is not valid UTF-8", path.display());
            continue;
        };
        let image = match load_image(&path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            log::warn!("skipping {}: duplicate reference id {id}", path.display());
            continue;
        }
        refs.push(Reference { mean_v: mean_value(&image), thumbnail_png: thumbnail_png(&image), id, path, image });
    }
    refs.sort_by(|a, b| a.mean_v.total_cmp(&b.mean_v).then_with(|| a.id.cmp(&b.id)));
    Ok(refs)
}
