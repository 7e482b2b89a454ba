use std::ffi::OsStr;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageRGB};

/// Number of leading pairs the LoL convention assigns to training.
pub const LOL_TRAIN_COUNT: usize = 485;

/// A low-light image and its normal-light counterpart of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair {
    pub low: ImageRGB,
    pub reference: ImageRGB,
    pub id: String,
}

impl ImagePair {
    pub fn new(low: ImageRGB, reference: ImageRGB, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        low.same_dims(&reference)
            .map_err(|e| Error::Integrity(format!("pair {id}: {e}")))?;
        Ok(Self { low, reference, id })
    }
}

#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<ImagePair>,
    pub test: Vec<ImagePair>,
}

/// Paths of one matched `low/` + `high/` entry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairFiles {
    pub id: String,
    pub low: PathBuf,
    pub high: PathBuf,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(OsStr::to_str)
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::NotFound { path: dir.to_path_buf() });
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    Ok(out)
}

/// Numeric stems first, in numeric order; anything else afterwards by name.
fn sort_key(path: &Path) -> (u8, u64, String) {
    let stem = path.file_stem().and_then(OsStr::to_str).unwrap_or_default().to_string();
    match stem.parse::<u64>() {
        Ok(n) => (0, n, stem),
        Err(_) => (1, 0, stem),
    }
}

/// Matches `<root>/low/*` with `<root>/high/*` by file name.
pub fn list_pairs(root: impl AsRef<Path>) -> Result<Vec<PairFiles>> {
    let root = root.as_ref();
    let low_dir = root.join("low");
    let high_dir = root.join("high");
    let mut lows = image_files(&low_dir)?;
    let highs = image_files(&high_dir)?;
    lows.sort_by_key(|p| sort_key(p));

    let name = |p: &Path| p.file_name().map(|n| n.to_owned());
    for h in &highs {
        if !lows.iter().any(|l| name(l) == name(h)) {
            return Err(Error::Integrity(format!("{} has no counterpart in low/", h.display())));
        }
    }
    lows.into_iter()
        .map(|low| {
            let file = low.file_name().expect("listed files have names").to_owned();
            let high = high_dir.join(&file);
            if !high.is_file() {
                return Err(Error::Integrity(format!("{} has no counterpart in high/", low.display())));
            }
            let id = low.file_stem().and_then(OsStr::to_str).unwrap_or_default().to_string();
            Ok(PairFiles { id, low, high })
        })
        .collect()
}

pub fn load_pair(files: &PairFiles) -> Result<ImagePair> {
    ImagePair::new(load_image(&files.low)?, load_image(&files.high)?, files.id.clone())
}

/// Loads a LoL-layout directory with the conventional 485-pair training split.
pub fn load_lol(root: impl AsRef<Path>) -> Result<DatasetSplit> {
    load_lol_with_split(root, LOL_TRAIN_COUNT)
}

/// Loads a LoL-layout directory; the first `train_count` pairs (in numeric
/// file order) go to training, the rest to testing.
pub fn load_lol_with_split(root: impl AsRef<Path>, train_count: usize) -> Result<DatasetSplit> {
    let files = list_pairs(root)?;
    let mut split = DatasetSplit::default();
    for (i, f) in files.iter().enumerate() {
        let pair = load_pair(f)?;
        if i < train_count {
            split.train.push(pair);
        } else {
            split.test.push(pair);
        }
    }
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::save_image;

    fn populate(root: &Path, names: &[&str], high_names: &[&str]) {
        fs::create_dir_all(root.join("low")).unwrap();
        fs::create_dir_all(root.join("high")).unwrap();
        for n in names {
            save_image(&ImageRGB::filled(2, 2, [0.1; 3]), root.join("low").join(n)).unwrap();
        }
        for n in high_names {
            save_image(&ImageRGB::filled(2, 2, [0.8; 3]), root.join("high").join(n)).unwrap();
        }
    }

    #[test]
    fn numeric_order_and_override_split() {
        let dir = tempfile::tempdir().unwrap();
        let names: Vec<String> = (1..=10).map(|i| format!("{i}.png")).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        populate(dir.path(), &refs, &refs);
        let split = load_lol_with_split(dir.path(), 8).unwrap();
        assert_eq!(split.train.len(), 8);
        assert_eq!(split.test.len(), 2);
        let ids: Vec<&str> = split.train.iter().map(|p| p.id.as_str()).collect();
        assert_eq!(ids, vec!["1", "2", "3", "4", "5", "6", "7", "8"]);
        assert_eq!(split.test[1].id, "10");
        assert_eq!(split.train[0].low.pixel(0, 0)[0], 26.0 / 255.0);
    }

    #[test]
    fn unmatched_file_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        populate(dir.path(), &["1.png", "2.png"], &["1.png"]);
        match list_pairs(dir.path()) {
            Err(Error::Integrity(msg)) => assert!(msg.contains("2.png"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let dir = tempfile::tempdir().unwrap();
        populate(dir.path(), &["1.png"], &["1.png", "9.png"]);
        assert!(matches!(list_pairs(dir.path()), Err(Error::Integrity(m)) if m.contains("9.png")));
    }

    #[test]
    fn missing_dirs_are_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_lol(dir.path()), Err(Error::NotFound { .. })));
    }

    #[test]
    fn non_images_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        populate(dir.path(), &["1.png"], &["1.png"]);
        fs::write(dir.path().join("low").join("notes.txt"), "x").unwrap();
        assert_eq!(list_pairs(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn pair_requires_equal_dims() {
        let a = ImageRGB::filled(2, 2, [0.0; 3]);
        let b = ImageRGB::filled(2, 3, [0.0; 3]);
        assert!(matches!(ImagePair::new(a, b, "x"), Err(Error::Integrity(_))));
    }
}
