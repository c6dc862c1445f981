//! The zoom-in tool: box sanitation, cropping and the image store.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::{BBox, ImageId, ToolCall};

/// Smallest crop side the tool will return, in pixels.
pub const DEFAULT_MIN_SIDE: u32 = 16;

/// A tag survives into a crop when at least this fraction of its area is inside.
pub const TAG_RETENTION_RATIO: f64 = 0.5;

const FIXTURE_MAGIC: &[u8; 4] = b"IMF1";

/// Ground-truth annotation of a region. Only used by the mock embedder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContentTag {
    pub bbox: BBox,
    pub label: String,
}

/// 8-bit grayscale raster, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    id: ImageId,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    content_tags: Vec<ContentTag>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ZoomError {
    #[error("box does not overlap the {width}x{height} frame")]
    OutOfFrame { width: u32, height: u32 },
    #[error("clamped region {width}x{height} is smaller than the {min_side}px minimum")]
    DegenerateRegion { width: i64, height: i64, min_side: u32 },
    #[error("unknown image {0}")]
    UnknownImage(ImageId),
    #[error("invalid image: {0}")]
    InvalidImage(String),
}

impl ZoomError {
    /// Short code written into an `ERR:` tool result.
    pub fn code(&self) -> &'static str {
        match self {
            ZoomError::OutOfFrame { .. } => "out_of_frame",
            ZoomError::DegenerateRegion { .. } => "degenerate_region",
            ZoomError::UnknownImage(_) => "unknown_image",
            ZoomError::InvalidImage(_) => "invalid_image",
        }
    }
}

impl ImageRecord {
    pub fn new(
        id: ImageId,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        content_tags: Vec<ContentTag>,
    ) -> Result<Self, ZoomError> {
        if width == 0 || height == 0 {
            return Err(ZoomError::InvalidImage(format!("{width}x{height} has no pixels")));
        }
        if pixels.len() != width as usize * height as usize {
            return Err(ZoomError::InvalidImage(format!("{} raster bytes for a {width}x{height} image", pixels.len())));
        }
        let frame = frame(width, height);
        if let Some(tag) = content_tags.iter().find(|t| !frame.contains_box(&t.bbox)) {
            return Err(ZoomError::InvalidImage(format!("tag {:?} extends past the frame", tag.label)));
        }
        Ok(ImageRecord { id, width, height, pixels, content_tags })
    }

    /// Uniformly filled image, handy for fixtures.
    pub fn filled(id: ImageId, width: u32, height: u32, value: u8, tags: Vec<ContentTag>) -> Result<Self, ZoomError> {
        Self::new(id, width, height, vec![value; width as usize * height as usize], tags)
    }

    pub fn id(&self) -> &ImageId {
        &self.id
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn content_tags(&self) -> &[ContentTag] {
        &self.content_tags
    }

    pub fn frame(&self) -> BBox {
        frame(self.width, self.height)
    }

    pub fn with_id(mut self, id: ImageId) -> Self {
        self.id = id;
        self
    }

    /// Tag with the largest area; the first one wins ties.
    pub fn dominant_tag(&self) -> Option<&ContentTag> {
        self.content_tags.iter().fold(None, |best: Option<&ContentTag>, t| match best {
            Some(b) if b.bbox.area() >= t.bbox.area() => Some(b),
            _ => Some(t),
        })
    }

    /// Reads the flat fixture format: `IMF1`, u32 LE width, u32 LE height,
    /// raster bytes, then a JSON array of content tags.
    pub fn from_fixture_bytes(id: ImageId, bytes: &[u8]) -> Result<Self, ZoomError> {
        let bad = |m: &str| ZoomError::InvalidImage(m.to_string());
        if bytes.len() < 12 || &bytes[..4] != FIXTURE_MAGIC {
            return Err(bad("missing IMF1 header"));
        }
        let width = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        let height = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        let raster_len = (width as usize).checked_mul(height as usize).ok_or_else(|| bad("dimensions overflow"))?;
        let raster_end = 12usize.checked_add(raster_len).ok_or_else(|| bad("dimensions overflow"))?;
        if bytes.len() < raster_end {
            return Err(bad("raster truncated"));
        }
        let trailer = &bytes[raster_end..];
        let tags: Vec<ContentTag> = if trailer.iter().all(u8::is_ascii_whitespace) {
            Vec::new()
        } else {
            serde_json::from_slice(trailer).map_err(|e| ZoomError::InvalidImage(format!("tag trailer: {e}")))?
        };
        Self::new(id, width, height, bytes[12..raster_end].to_vec(), tags)
    }

    pub fn to_fixture_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + self.pixels.len());
        out.extend_from_slice(FIXTURE_MAGIC);
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.extend_from_slice(&self.pixels);
        out.extend_from_slice(&serde_json::to_vec(&self.content_tags).expect("tags serialize"));
        out
    }

    /// Loads an image file. IMF1 fixtures are read directly; other formats go
    /// through the optional decoder and carry no content tags.
    pub fn load(id: ImageId, path: &Path) -> Result<Self, ZoomError> {
        let bytes = std::fs::read(path).map_err(|e| ZoomError::InvalidImage(format!("{}: {e}", path.display())))?;
        if bytes.starts_with(FIXTURE_MAGIC) {
            return Self::from_fixture_bytes(id, &bytes);
        }
        decode_standard(id, &bytes)
    }
}

#[cfg(feature = "decode")]
fn decode_standard(id: ImageId, bytes: &[u8]) -> Result<ImageRecord, ZoomError> {
    let img = image::load_from_memory(bytes).map_err(|e| ZoomError::InvalidImage(e.to_string()))?;
    let luma = img.to_luma8();
    let (w, h) = luma.dimensions();
    ImageRecord::new(id, w, h, luma.into_raw(), Vec::new())
}

#[cfg(not(feature = "decode"))]
fn decode_standard(_id: ImageId, _bytes: &[u8]) -> Result<ImageRecord, ZoomError> {
    Err(ZoomError::InvalidImage("not an IMF1 fixture and image decoding is disabled".into()))
}

fn frame(width: u32, height: u32) -> BBox {
    BBox { x_min: 0, y_min: 0, x_max: width as i64, y_max: height as i64 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CropResult {
    pub image: ImageRecord,
    pub source: ImageId,
    pub effective_bbox: BBox,
}

/// Clamps `bbox` to the frame of `image`.
pub fn validate_bbox(bbox: BBox, image: &ImageRecord, min_side: u32) -> Result<BBox, ZoomError> {
    let clamped =
        bbox.intersection(&image.frame()).ok_or(ZoomError::OutOfFrame { width: image.width, height: image.height })?;
    if clamped.width() < min_side as i64 || clamped.height() < min_side as i64 {
        return Err(ZoomError::DegenerateRegion { width: clamped.width(), height: clamped.height(), min_side });
    }
    Ok(clamped)
}

/// Cuts `region` (already inside the frame) out of `image`.
pub fn crop_region(image: &ImageRecord, region: BBox, crop_id: ImageId) -> ImageRecord {
    debug_assert!(image.frame().contains_box(&region));
    let (x0, y0) = (region.x_min as usize, region.y_min as usize);
    let (w, h) = (region.width() as usize, region.height() as usize);
    let stride = image.width as usize;
    let mut pixels = Vec::with_capacity(w * h);
    for row in y0..y0 + h {
        pixels.extend_from_slice(&image.pixels[row * stride + x0..row * stride + x0 + w]);
    }
    let content_tags = image
        .content_tags
        .iter()
        .filter_map(|tag| {
            let inter = tag.bbox.intersection(&region)?;
            let kept = inter.area() as f64 >= TAG_RETENTION_RATIO * tag.bbox.area() as f64;
            kept.then(|| ContentTag { bbox: inter.translate(region.x_min, region.y_min), label: tag.label.clone() })
        })
        .collect();
    ImageRecord { id: crop_id, width: w as u32, height: h as u32, pixels, content_tags }
}

/// Shared image storage; crops produced during rollouts are inserted here.
#[derive(Debug, Default)]
pub struct ImageStore {
    images: RwLock<HashMap<ImageId, Arc<ImageRecord>>>,
    min_side: Option<u32>,
}

impl ImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_min_side(min_side: u32) -> Self {
        ImageStore { images: RwLock::default(), min_side: Some(min_side) }
    }

    pub fn min_side(&self) -> u32 {
        self.min_side.unwrap_or(DEFAULT_MIN_SIDE)
    }

    pub fn insert(&self, image: ImageRecord) -> Arc<ImageRecord> {
        let image = Arc::new(image);
        self.images.write().expect("image store lock poisoned").insert(image.id.clone(), Arc::clone(&image));
        image
    }

    pub fn get(&self, id: &ImageId) -> Option<Arc<ImageRecord>> {
        self.images.read().expect("image store lock poisoned").get(id).cloned()
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.images.read().expect("image store lock poisoned").contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.images.read().expect("image store lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Runs the zoom-in tool for `call` on image `source`.
///
/// The crop is returned but not inserted; callers decide whether to register it.
pub fn apply_zoom(
    call: &ToolCall,
    source: &ImageId,
    crop_id: ImageId,
    store: &ImageStore,
) -> Result<CropResult, ZoomError> {
    let image = store.get(source).ok_or_else(|| ZoomError::UnknownImage(source.clone()))?;
    let effective_bbox = validate_bbox(call.bbox, &image, store.min_side())?;
    Ok(CropResult { image: crop_region(&image, effective_bbox, crop_id), source: source.clone(), effective_bbox })
}
