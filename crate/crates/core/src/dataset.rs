//! Dataset ingestion, manifests and deterministic splitting.
//!
//! A [`DatasetManifest`] is an ordered list of records pointing at image files
//! (and optionally their annotation masks). Manifests persist as tab-separated
//! text, one record per line:
//!
//! ```text
//! # seed=42
//! images/cju0qkwl35piu0993l0dewei2.jpg	masks/cju0qkwl35piu0993l0dewei2.jpg	real	train
//! ```
//!
//! Paths are written relative to the manifest's directory and resolved back to
//! absolute paths on read.

use std::fmt;
use std::fs;
use std::path::{Component, Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{BinaryMask, MaskedSample, RasterImage};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Layout {
    /// `root/images/*` with matching `root/masks/*` annotations.
    Labeled,
    /// `root/*` images without annotations.
    Unlabeled,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Origin {
    Real,
    Synthetic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(format!("unknown origin {other:?}")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub image_path: PathBuf,
    pub mask_path: Option<PathBuf>,
    pub origin: Origin,
    pub split: Option<Split>,
}

impl Record {
    pub fn new(image_path: impl Into<PathBuf>, mask_path: Option<PathBuf>, origin: Origin) -> Self {
        Self {
            image_path: image_path.into(),
            mask_path,
            origin,
            split: None,
        }
    }

    /// Loads the image at `size = (width, height)`, or at native size.
    pub fn load_image(&self, size: Option<(usize, usize)>) -> Result<RasterImage> {
        RasterImage::load(&self.image_path, size)
    }

    pub fn load_mask(&self, size: Option<(usize, usize)>) -> Result<BinaryMask> {
        let path = self.mask_path.as_ref().ok_or_else(|| {
            Error::MissingAnnotation(format!("{} has no mask", self.image_path.display()))
        })?;
        BinaryMask::load(path, size)
    }

    /// Loads image and mask at a common size; the mask always follows the image.
    pub fn load_pair(&self, size: Option<(usize, usize)>) -> Result<(RasterImage, BinaryMask)> {
        let image = self.load_image(size)?;
        let mask = self.load_mask(Some(image.dims()))?;
        Ok((image, mask))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(records: Vec<Record>) -> Self {
        Self {
            records,
            seed: None,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records tagged with `split`, in manifest order.
    pub fn subset(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            records: self
                .records
                .iter()
                .filter(|r| r.split == Some(split))
                .cloned()
                .collect(),
            seed: self.seed,
        }
    }

    pub fn train(&self) -> DatasetManifest {
        self.subset(Split::Train)
    }

    pub fn val(&self) -> DatasetManifest {
        self.subset(Split::Val)
    }

    /// Fails with a missing-annotation error naming the first record without a mask.
    pub fn require_masks(&self) -> Result<()> {
        match self.records.iter().find(|r| r.mask_path.is_none()) {
            Some(r) => Err(Error::MissingAnnotation(format!(
                "record {} has no mask",
                r.image_path.display()
            ))),
            None => Ok(()),
        }
    }

    /// Checks the manifest invariants against the filesystem.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            let dims = image_dims(&r.image_path)?;
            if let Some(mask) = &r.mask_path {
                let mdims = image_dims(mask)?;
                if mdims != dims {
                    return Err(Error::Shape(format!(
                        "mask {} is {:?} but image is {:?}",
                        mask.display(),
                        mdims,
                        dims
                    )));
                }
            }
        }
        Ok(())
    }

    /// Loads every image (and mask, when present) at `size`, in parallel,
    /// preserving manifest order.
    pub fn load_all(
        &self,
        size: Option<(usize, usize)>,
    ) -> Result<Vec<(RasterImage, Option<BinaryMask>)>> {
        self.records
            .par_iter()
            .map(|r| {
                let image = r.load_image(size)?;
                let mask = match r.mask_path {
                    Some(_) => Some(r.load_mask(Some(image.dims()))?),
                    None => None,
                };
                Ok((image, mask))
            })
            .collect()
    }

    pub fn to_tsv(&self, base: &Path) -> String {
        let mut out = String::new();
        if let Some(seed) = self.seed {
            out.push_str(&format!("# seed={seed}\n"));
        }
        for r in &self.records {
            let mask = r
                .mask_path
                .as_ref()
                .map(|p| display_relative(p, base))
                .unwrap_or_else(|| "-".to_string());
            let split = r.split.map(|s| s.to_string()).unwrap_or_else(|| "-".into());
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                display_relative(&r.image_path, base),
                mask,
                r.origin,
                split
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let base = parent_dir(path)?;
        fs::write(path, self.to_tsv(&base)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = parent_dir(path)?;
        let bad = |line: usize, message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let mut manifest = DatasetManifest::default();
        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if let Some(seed) = comment.trim().strip_prefix("seed=") {
                    manifest.seed = Some(
                        seed.parse()
                            .map_err(|_| bad(lineno, format!("bad seed {seed:?}")))?,
                    );
                }
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(bad(
                    lineno,
                    format!("expected 4 tab-separated fields, got {}", fields.len()),
                ));
            }
            let mask_path = match fields[1] {
                "-" => None,
                p => Some(normalize(&base.join(p))),
            };
            let split = match fields[3] {
                "-" => None,
                s => Some(s.parse().map_err(|e| bad(lineno, e))?),
            };
            manifest.records.push(Record {
                image_path: normalize(&base.join(fields[0])),
                mask_path,
                origin: fields[2].parse().map_err(|e| bad(lineno, e))?,
                split,
            });
        }
        Ok(manifest)
    }
}

fn image_dims(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn parent_dir(path: &Path) -> Result<PathBuf> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    absolute(&parent)
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path)
        .map(|p| normalize(&p))
        .map_err(|e| Error::io(path, e))
}

/// Lexically resolves `.` and `..` components.
fn normalize(path: &Path) -> PathBuf {
    let mut out = PathBuf::new();
    for c in path.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    out.push("..");
                }
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

fn display_relative(path: &Path, base: &Path) -> String {
    let abs = std::path::absolute(path)
        .map(|p| normalize(&p))
        .unwrap_or_else(|_| path.to_path_buf());
    relative_to(&abs, base).to_string_lossy().into_owned()
}

/// Path of `path` relative to `base`; both must be absolute and normalized.
fn relative_to(path: &Path, base: &Path) -> PathBuf {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    if common == 0 {
        return path.to_path_buf();
    }
    let mut out = PathBuf::new();
    for _ in common..b.len() {
        out.push("..");
    }
    for c in &p[common..] {
        out.push(c.as_os_str());
    }
    out
}

pub(crate) fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()));
        if is_image && path.is_file() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn find_mask(masks_dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| masks_dir.join(format!("{stem}.{ext}")))
        .find(|p| p.is_file())
}

/// Enumerates a dataset directory into a manifest sorted by image path.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Ingestion(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let root = absolute(root)?;
    let records = match layout {
        Layout::Unlabeled => list_images(&root)?
            .into_iter()
            .map(|p| {
                image_dims(&p)?;
                Ok(Record::new(p, None, Origin::Real))
            })
            .collect::<Result<Vec<_>>>()?,
        Layout::Labeled => {
            let images_dir = root.join("images");
            let masks_dir = root.join("masks");
            for dir in [&images_dir, &masks_dir] {
                if !dir.is_dir() {
                    return Err(Error::Ingestion(format!(
                        "labeled layout needs {}",
                        dir.display()
                    )));
                }
            }
            let mut records = Vec::new();
            for image in list_images(&images_dir)? {
                let stem = image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let mask = find_mask(&masks_dir, &stem).ok_or_else(|| {
                    Error::MissingAnnotation(format!("no mask for image stem {stem:?}"))
                })?;
                let (idims, mdims) = (image_dims(&image)?, image_dims(&mask)?);
                if idims != mdims {
                    return Err(Error::Shape(format!(
                        "mask {} is {:?} but image is {:?}",
                        mask.display(),
                        mdims,
                        idims
                    )));
                }
                records.push(Record::new(image, Some(mask), Origin::Real));
            }
            records
        }
    };
    Ok(DatasetManifest::new(records))
}

/// Tags exactly `val_count` records as validation, chosen by a seeded shuffle,
/// and the rest as training. Record order is preserved.
pub fn split_dataset(manifest: &DatasetManifest, val_count: usize, seed: u64) -> Result<DatasetManifest> {
    if manifest.records.iter().any(|r| r.split.is_some()) {
        return Err(Error::InvalidSplit("manifest is already split".into()));
    }
    if val_count >= manifest.len() {
        return Err(Error::InvalidSplit(format!(
            "val_count {val_count} must be below the record count {}",
            manifest.len()
        )));
    }
    let mut order: Vec<usize> = (0..manifest.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut records = manifest.records.clone();
    for r in &mut records {
        r.split = Some(Split::Train);
    }
    for &i in &order[..val_count] {
        records[i].split = Some(Split::Val);
    }
    Ok(DatasetManifest {
        records,
        seed: Some(seed),
    })
}

/// Picks one mask from `pool` by `seed`, resizes it to the image and cuts the hole.
pub fn pair_random_mask(image: &RasterImage, pool: &[BinaryMask], seed: u64) -> Result<MaskedSample> {
    if pool.is_empty() {
        return Err(Error::InvalidArgument("mask pool is empty".into()));
    }
    let idx = ChaCha8Rng::seed_from_u64(seed).random_range(0..pool.len());
    let mask = pool[idx].resize_nearest(image.width(), image.height());
    MaskedSample::new(image.clone(), mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::EdgeMap;
    use proptest::prelude::*;

    fn write_pair(root: &Path, stem: &str, with_mask: bool) {
        let img = RasterImage::filled(8, 6, [0.2, 0.4, 0.6]);
        img.save_png(&root.join("images").join(format!("{stem}.png"))).unwrap();
        if with_mask {
            BinaryMask::from_fn(8, 6, |x, _| x < 3)
                .save_png(&root.join("masks").join(format!("{stem}.png")))
                .unwrap();
        }
    }

    fn labeled_dir(stems: &[&str]) -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::create_dir_all(dir.path().join("masks")).unwrap();
        for s in stems {
            write_pair(dir.path(), s, true);
        }
        dir
    }

    #[test]
    fn labeled_dir_of_three_pairs() {
        let dir = labeled_dir(&["c", "a", "b"]);
        let m = load_dataset(dir.path(), Layout::Labeled).unwrap();
        assert_eq!(m.len(), 3);
        let stems: Vec<_> = m
            .records
            .iter()
            .map(|r| r.image_path.file_stem().unwrap().to_str().unwrap().to_owned())
            .collect();
        assert_eq!(stems, ["a", "b", "c"]);
        assert!(m.records.iter().all(|r| r.mask_path.is_some() && r.origin == Origin::Real));
        m.validate().unwrap();
        let (img, mask) = m.records[0].load_pair(Some((4, 3))).unwrap();
        assert_eq!(img.dims(), (4, 3));
        assert_eq!(mask.dims(), (4, 3));
    }

    #[test]
    fn missing_mask_names_stem() {
        let dir = labeled_dir(&["a"]);
        write_pair(dir.path(), "orphan", false);
        match load_dataset(dir.path(), Layout::Labeled) {
            Err(Error::MissingAnnotation(msg)) => assert!(msg.contains("orphan")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_root_is_ingestion_error() {
        let err = load_dataset(Path::new("/definitely/not/here"), Layout::Unlabeled).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
        let dir = tempfile::tempdir().unwrap();
        let err = load_dataset(dir.path(), Layout::Labeled).unwrap_err();
        assert!(matches!(err, Error::Ingestion(_)));
    }

    #[test]
    fn unreadable_image_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("broken.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path(), Layout::Unlabeled).unwrap_err();
        assert!(err.to_string().contains("broken.png"), "{err}");
    }

    #[test]
    fn split_counts_and_determinism() {
        let records = (0..1000)
            .map(|i| Record::new(format!("/d/{i:04}.png"), None, Origin::Real))
            .collect();
        let m = DatasetManifest::new(records);
        let a = split_dataset(&m, 200, 7).unwrap();
        let b = split_dataset(&m, 200, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.val().len(), 200);
        assert_eq!(a.train().len(), 800);
        let c = split_dataset(&m, 200, 8).unwrap();
        assert_ne!(a.val(), c.val());
        assert!(matches!(split_dataset(&a, 10, 1), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn split_rejects_val_count_at_size() {
        let records = (0..10)
            .map(|i| Record::new(format!("/d/{i}.png"), None, Origin::Real))
            .collect();
        let m = DatasetManifest::new(records);
        assert!(matches!(split_dataset(&m, 10, 0), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn manifest_round_trip_after_split() {
        let dir = labeled_dir(&["a", "b", "c", "d", "e"]);
        let m = load_dataset(dir.path(), Layout::Labeled).unwrap();
        let split = split_dataset(&m, 2, 11).unwrap();
        let out = dir.path().join("manifests");
        fs::create_dir_all(&out).unwrap();
        let path = out.join("labeled.tsv");
        split.write(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# seed=11\n"));
        assert!(text.contains("../images/a.png\t../masks/a.png\treal\t"));
        assert_eq!(DatasetManifest::read(&path).unwrap(), split);
    }

    #[test]
    fn malformed_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a.png\t-\treal\n").unwrap();
        assert!(matches!(
            DatasetManifest::read(&path),
            Err(Error::Manifest { line: 1, .. })
        ));
    }

    #[test]
    fn singleton_pool_returns_resized_mask() {
        let img = RasterImage::filled(64, 64, [0.5; 3]);
        let mask = BinaryMask::from_fn(32, 32, |x, y| x < 16 && y < 16);
        let s = pair_random_mask(&img, std::slice::from_ref(&mask), 99).unwrap();
        assert_eq!(s.mask, mask.resize_nearest(64, 64));
        // 2x nearest upscale of a 16x16 block is an exact 32x32 block.
        assert_eq!(s.mask.count(), 32 * 32);
        assert!((s.mask.fill_ratio() - 0.25).abs() <= 0.02);
        assert!(pair_random_mask(&img, &[], 0).is_err());
    }

    #[test]
    fn pairing_is_seeded() {
        let img = RasterImage::filled(8, 8, [0.5; 3]);
        let pool: Vec<_> = (0..6).map(|k| BinaryMask::from_fn(8, 8, |x, _| x < k + 1)).collect();
        let a = pair_random_mask(&img, &pool, 5).unwrap();
        let b = pair_random_mask(&img, &pool, 5).unwrap();
        assert_eq!(a, b);
    }

    fn arb_mask(max: usize) -> impl Strategy<Value = BinaryMask> {
        (1..=max, 1..=max).prop_flat_map(|(w, h)| {
            proptest::collection::vec(0u8..=1, w * h)
                .prop_map(move |d| BinaryMask::new(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn nearest_resize_stays_binary(m in arb_mask(12), w in 1usize..40, h in 1usize..40) {
            let r = m.resize_nearest(w, h);
            prop_assert_eq!(r.dims(), (w, h));
            prop_assert!(r.data().iter().all(|&v| v <= 1));
            let e = EdgeMap::from_mask(&m).resize_nearest(w, h);
            prop_assert!(e.data().iter().all(|&v| v <= 1));
        }

        #[test]
        fn masked_sample_algebra(m in arb_mask(10), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (w, h) = m.dims();
            let data = (0..w * h * 3).map(|_| rng.random::<f64>()).collect();
            let img = RasterImage::new(w, h, data).unwrap();
            let s = pair_random_mask(&img, std::slice::from_ref(&m), seed).unwrap();
            for (i, &mv) in s.mask.data().iter().enumerate() {
                for c in 0..3 {
                    let (orig, holed) = (img.data()[i * 3 + c], s.holed_image.data()[i * 3 + c]);
                    if mv == 0 {
                        prop_assert_eq!(orig, holed);
                    } else {
                        prop_assert_eq!(holed, 0.0);
                    }
                }
            }
        }
    }
}
