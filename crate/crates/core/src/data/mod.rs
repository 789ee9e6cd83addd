//! Slice records, stacks, and normalization for the model.

mod manifest;
mod synthetic;

pub use manifest::{load_manifest, write_manifest, MANIFEST_HEADER};
pub use synthetic::{generate_synthetic_stack, SyntheticSpec};

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageops::{resize_bilinear, resize_nearest, Image, Mask};

/// Smallest square side accepted by [`normalize_slice`].
pub const MIN_IMAGE_SIZE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Pool,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Pool => "pool",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "pool" | "" => Ok(Split::Pool),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split tag {other:?}"))),
        }
    }
}

/// Identifies one slice of one stack.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceId {
    pub stack_id: String,
    pub slice_index: usize,
}

impl SliceId {
    pub fn new(stack_id: impl Into<String>, slice_index: usize) -> Self {
        Self {
            stack_id: stack_id.into(),
            slice_index,
        }
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.stack_id, self.slice_index)
    }
}

/// One grayscale slice with its optional ROI mask and pathology annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub stack_id: String,
    pub slice_index: usize,
    pub image: Image,
    pub roi_mask: Option<Mask>,
    pub annotation: Option<Mask>,
    pub split: Split,
}

impl SliceRecord {
    pub fn id(&self) -> SliceId {
        SliceId::new(self.stack_id.clone(), self.slice_index)
    }

    pub fn dim(&self) -> (usize, usize) {
        self.image.dim()
    }

    /// ROI mask, or an all-ones mask when absent.
    pub fn roi_or_ones(&self) -> Mask {
        self.roi_mask.clone().unwrap_or_else(|| Mask::ones(self.image.dim()))
    }

    /// Checks shape agreement, mask binarity, and annotation ⊆ ROI.
    pub fn validate(&self) -> Result<()> {
        let dim = self.image.dim();
        let id = self.id();
        for (name, mask) in [("roi_mask", &self.roi_mask), ("annotation", &self.annotation)] {
            if let Some(m) = mask {
                if m.dim() != dim {
                    return Err(Error::Validation(format!(
                        "{id}: {name} is {:?} but image is {:?}",
                        m.dim(),
                        dim
                    )));
                }
                if m.iter().any(|&v| v > 1) {
                    return Err(Error::Validation(format!("{id}: {name} is not binary")));
                }
            }
        }
        if let (Some(roi), Some(ann)) = (&self.roi_mask, &self.annotation) {
            if roi.iter().zip(ann.iter()).any(|(&r, &a)| a == 1 && r == 0) {
                return Err(Error::Validation(format!("{id}: annotation extends outside the ROI")));
            }
        }
        if self.image.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Validation(format!("{id}: image values must lie in [0, 1]")));
        }
        Ok(())
    }
}

/// Ordered collection of slices from one or more stacks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StackDataset {
    pub records: Vec<SliceRecord>,
    /// Square side shared by every record, if they all share one.
    pub image_size: Option<usize>,
}

impl StackDataset {
    pub fn new(records: Vec<SliceRecord>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for r in &records {
            if !seen.insert((r.stack_id.as_str(), r.slice_index)) {
                return Err(Error::Validation(format!(
                    "duplicate slice {}/{}",
                    r.stack_id, r.slice_index
                )));
            }
        }
        let image_size = match records.first() {
            Some(first) => {
                let (h, w) = first.dim();
                (h == w && records.iter().all(|r| r.dim() == (h, w))).then_some(h)
            }
            None => None,
        };
        Ok(Self { records, image_size })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &SliceId) -> Option<&SliceRecord> {
        self.records
            .iter()
            .find(|r| r.stack_id == id.stack_id && r.slice_index == id.slice_index)
    }

    /// Stack ids in first-appearance order.
    pub fn stack_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = Vec::new();
        for r in &self.records {
            if !ids.iter().any(|s| s == &r.stack_id) {
                ids.push(r.stack_id.clone());
            }
        }
        ids
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SliceRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Normalizes every record to `size×size`.
    pub fn normalized(&self, size: usize) -> Result<Self> {
        let records = self
            .records
            .iter()
            .map(|r| normalize_slice(r, size))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            records,
            image_size: Some(size),
        })
    }
}

/// Multiplies the image by its ROI mask and resizes everything to
/// `size×size` (bilinear for the image, nearest for the masks).
pub fn normalize_slice(record: &SliceRecord, size: usize) -> Result<SliceRecord> {
    if size < MIN_IMAGE_SIZE {
        return Err(Error::Config(format!(
            "image size {size} is below the minimum of {MIN_IMAGE_SIZE}"
        )));
    }
    record.validate()?;
    let masked = match &record.roi_mask {
        Some(roi) => &record.image * &roi.mapv(f32::from),
        None => record.image.clone(),
    };
    let image = resize_bilinear(&masked, size, size).mapv(|v| v.clamp(0.0, 1.0));
    Ok(SliceRecord {
        stack_id: record.stack_id.clone(),
        slice_index: record.slice_index,
        image,
        roi_mask: record.roi_mask.as_ref().map(|m| resize_nearest(m, size, size)),
        annotation: record.annotation.as_ref().map(|m| resize_nearest(m, size, size)),
        split: record.split,
    })
}
