//! Resolves image locators from the manifest.
//!
//! Locators are either paths (relative to the manifest directory) or
//! `synth://` URIs rendered on the fly. When the manifest lists a hash for
//! a locator the bytes are checked: file contents for paths, raw pixel
//! buffer for synthetic images.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock};

use image::RgbImage;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::imaging::{render_synthetic, SYNTH_SCHEME};
use crate::manifest::ItemView;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ImageError {
    #[error("cannot read image {locator}: {reason}")]
    Unreadable { locator: String, reason: String },
    #[error("hash mismatch for {locator}: expected {expected}, got {actual}")]
    HashMismatch {
        locator: String,
        expected: String,
        actual: String,
    },
}

pub trait ImageSource: Send + Sync {
    fn load(&self, locator: &str) -> Result<Arc<RgbImage>, ImageError>;
}

/// Filesystem plus synthetic images, with a shared in-memory cache.
pub struct DefaultSource {
    root: PathBuf,
    hashes: BTreeMap<String, String>,
    cache: Mutex<HashMap<String, Arc<RgbImage>>>,
}

impl DefaultSource {
    pub fn new(root: impl Into<PathBuf>, hashes: BTreeMap<String, String>) -> Self {
        DefaultSource {
            root: root.into(),
            hashes,
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn resolve(&self, locator: &str) -> PathBuf {
        let p = Path::new(locator.strip_prefix("file://").unwrap_or(locator));
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn check(&self, locator: &str, bytes: &[u8]) -> Result<(), ImageError> {
        if let Some(expected) = self.hashes.get(locator) {
            let actual = sha256_hex(bytes);
            if !actual.eq_ignore_ascii_case(expected) {
                return Err(ImageError::HashMismatch {
                    locator: locator.to_string(),
                    expected: expected.clone(),
                    actual,
                });
            }
        }
        Ok(())
    }

    fn load_uncached(&self, locator: &str) -> Result<RgbImage, ImageError> {
        let unreadable = |reason: String| ImageError::Unreadable {
            locator: locator.to_string(),
            reason,
        };
        if locator.starts_with(SYNTH_SCHEME) {
            let img = render_synthetic(locator).map_err(unreadable)?;
            self.check(locator, img.as_raw())?;
            return Ok(img);
        }
        let bytes = std::fs::read(self.resolve(locator)).map_err(|e| unreadable(e.to_string()))?;
        self.check(locator, &bytes)?;
        let img = image::load_from_memory(&bytes).map_err(|e| unreadable(e.to_string()))?;
        Ok(img.to_rgb8())
    }
}

impl ImageSource for DefaultSource {
    fn load(&self, locator: &str) -> Result<Arc<RgbImage>, ImageError> {
        if let Some(img) = self.cache.lock().unwrap().get(locator) {
            return Ok(img.clone());
        }
        let img = Arc::new(self.load_uncached(locator)?);
        self.cache
            .lock()
            .unwrap()
            .insert(locator.to_string(), img.clone());
        Ok(img)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Decoded images of one item.
#[derive(Debug, Clone)]
pub struct ItemImages {
    pub query: Arc<RgbImage>,
    pub references: Vec<Arc<RgbImage>>,
}

impl ItemImages {
    pub fn load(view: &ItemView, source: &dyn ImageSource) -> Result<Self, ImageError> {
        Ok(ItemImages {
            query: source.load(&view.query_ref)?,
            references: view
                .reference_refs
                .iter()
                .map(|r| source.load(r))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn reference_slices(&self) -> Vec<&RgbImage> {
        self.references.iter().map(|r| r.as_ref()).collect()
    }
}

/// Loads an item's images on first use. Tools that refuse on a gate never
/// touch it, so refused invocations do no image work at all.
pub struct LazyImages<'a> {
    view: &'a ItemView,
    source: Option<&'a dyn ImageSource>,
    cell: OnceLock<Result<ItemImages, ImageError>>,
}

impl<'a> LazyImages<'a> {
    pub fn new(view: &'a ItemView, source: &'a dyn ImageSource) -> Self {
        LazyImages {
            view,
            source: Some(source),
            cell: OnceLock::new(),
        }
    }

    pub fn ready(view: &'a ItemView, images: ItemImages) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(Ok(images));
        LazyImages {
            view,
            source: None,
            cell,
        }
    }

    pub fn get(&self) -> Result<&ItemImages, ImageError> {
        self.cell
            .get_or_init(|| match self.source {
                Some(src) => ItemImages::load(self.view, src),
                None => Err(ImageError::Unreadable {
                    locator: self.view.query_ref.clone(),
                    reason: "no image source".into(),
                }),
            })
            .as_ref()
            .map_err(Clone::clone)
    }

    pub fn is_loaded(&self) -> bool {
        self.cell.get().is_some()
    }
}
