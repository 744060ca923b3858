//! Image content stores resolving manifest `image_ref`s to pixel data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::face::{FaceImage, FaceImageError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("image `{0}` not found")]
    NotFound(String),
    #[error("io error for `{path}`: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("decode error for `{path}`: {source}")]
    Decode {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Pixels(#[from] FaceImageError),
}

/// Read access to images by manifest reference.
pub trait ImageStore: Sync {
    fn load(&self, image_ref: &str) -> Result<FaceImage, StoreError>;
}

/// In-memory store used by generators and tests.
#[derive(Debug, Clone, Default)]
pub struct MemStore {
    images: BTreeMap<String, FaceImage>,
}

impl MemStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, image_ref: impl Into<String>, image: FaceImage) {
        self.images.insert(image_ref.into(), image);
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &FaceImage)> {
        self.images.iter()
    }

    /// Writes every image as an 8-bit RGB PNG under `root`, creating
    /// subdirectories as needed.
    pub fn write_to_dir(&self, root: &Path) -> Result<(), StoreError> {
        for (image_ref, img) in &self.images {
            let path = root.join(image_ref);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|source| StoreError::Io {
                    path: parent.display().to_string(),
                    source,
                })?;
            }
            save_png(img, &path)?;
        }
        Ok(())
    }
}

impl ImageStore for MemStore {
    fn load(&self, image_ref: &str) -> Result<FaceImage, StoreError> {
        self.images
            .get(image_ref)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(image_ref.to_string()))
    }
}

/// Store backed by a directory of image files; `image_ref`s are paths
/// relative to the content root.
#[derive(Debug, Clone)]
pub struct DirStore {
    root: PathBuf,
}

impl DirStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageStore for DirStore {
    fn load(&self, image_ref: &str) -> Result<FaceImage, StoreError> {
        let path = self.root.join(image_ref);
        if !path.exists() {
            return Err(StoreError::NotFound(image_ref.to_string()));
        }
        load_png(&path)
    }
}

pub fn save_png(img: &FaceImage, path: &Path) -> Result<(), StoreError> {
    assert_eq!(img.channels(), 3, "PNG export expects RGB images");
    let buf = image::RgbImage::from_raw(img.width() as u32, img.height() as u32, img.to_u8())
        .expect("buffer sized from image");
    buf.save(path).map_err(|source| StoreError::Decode { path: path.display().to_string(), source })
}

pub fn load_png(path: &Path) -> Result<FaceImage, StoreError> {
    let img = image::open(path)
        .map_err(|source| StoreError::Decode { path: path.display().to_string(), source })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    Ok(FaceImage::from_u8(img.as_raw(), h as usize, w as usize, 3)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn mem_store_round_trip() {
        let mut store = MemStore::new();
        let img = FaceImage::from_clamped(Array3::from_elem((4, 4, 3), 0.25));
        store.insert("a/b.png", img.clone());
        assert_eq!(store.load("a/b.png").unwrap(), img);
        assert!(matches!(store.load("missing"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn dir_store_round_trip_is_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = MemStore::new();
        let img = FaceImage::from_clamped(Array3::from_shape_fn((6, 5, 3), |(r, c, ch)| {
            ((r * 5 + c + ch) % 11) as f64 / 10.0
        }));
        store.insert("sub/img.png", img.clone());
        store.write_to_dir(dir.path()).unwrap();
        let loaded = DirStore::new(dir.path()).load("sub/img.png").unwrap();
        assert_eq!(loaded.shape(), img.shape());
        assert!(loaded.linf_distance(&img) <= 0.5 / 255.0 + 1e-12);
    }
}
