//! CSV manifest (`stack_id,slice_index,image_path,roi_mask_path,annotation_path,split`).
//!
//! Empty cells mean "absent"; paths are relative to the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{SliceRecord, Split, StackDataset};
use crate::error::{Error, Result};
use crate::imageops::Mask;
use crate::pngio;

pub const MANIFEST_HEADER: [&str; 6] = [
    "stack_id",
    "slice_index",
    "image_path",
    "roi_mask_path",
    "annotation_path",
    "split",
];

#[derive(Debug, Serialize, Deserialize)]
struct Row {
    stack_id: String,
    slice_index: usize,
    image_path: String,
    roi_mask_path: Option<String>,
    annotation_path: Option<String>,
    split: Option<String>,
}

fn resolve(base: &Path, cell: &Option<String>) -> Option<PathBuf> {
    cell.as_deref()
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| base.join(s))
}

fn load_mask(path: &Path, stack_id: &str, slice_index: usize, what: &str) -> Result<Mask> {
    match pngio::read_mask(path)? {
        Ok(m) => Ok(m),
        Err(value) => Err(Error::Validation(format!(
            "{stack_id}/{slice_index}: {what} {} holds non-binary value {value}",
            path.display()
        ))),
    }
}

/// Loads every manifest row into a [`SliceRecord`].
///
/// Missing ROI masks become all-ones; annotation pixels outside the ROI are
/// cleared with a warning.
pub fn load_manifest(path: &Path) -> Result<StackDataset> {
    if !path.is_file() {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: "manifest not found".into(),
        });
    }
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let headers = reader.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
        return Err(Error::Load {
            path: path.to_path_buf(),
            reason: format!(
                "unexpected header {:?}, expected {}",
                headers,
                MANIFEST_HEADER.join(",")
            ),
        });
    }

    let mut records = Vec::new();
    for row in reader.deserialize::<Row>() {
        let row = row?;
        let image_path = base.join(row.image_path.trim());
        let image = pngio::read_image(&image_path)?;
        let dim = image.dim();
        let check_dim = |m: &Mask, what: &str| -> Result<()> {
            if m.dim() != dim {
                return Err(Error::Validation(format!(
                    "{}/{}: {what} is {:?} but image is {:?}",
                    row.stack_id,
                    row.slice_index,
                    m.dim(),
                    dim
                )));
            }
            Ok(())
        };

        let roi = match resolve(base, &row.roi_mask_path) {
            Some(p) => load_mask(&p, &row.stack_id, row.slice_index, "roi mask")?,
            None => Mask::ones(dim),
        };
        check_dim(&roi, "roi mask")?;

        let annotation = match resolve(base, &row.annotation_path) {
            Some(p) => {
                let mut ann = load_mask(&p, &row.stack_id, row.slice_index, "annotation")?;
                check_dim(&ann, "annotation")?;
                let outside = ann.iter().zip(roi.iter()).filter(|(&a, &r)| a == 1 && r == 0).count();
                if outside > 0 {
                    warn!(
                        "{}/{}: clearing {outside} annotation pixels outside the ROI",
                        row.stack_id, row.slice_index
                    );
                    ann.zip_mut_with(&roi, |a, &r| *a &= r);
                }
                Some(ann)
            }
            None => None,
        };

        let split = row.split.as_deref().unwrap_or("").parse::<Split>()?;
        records.push(SliceRecord {
            stack_id: row.stack_id,
            slice_index: row.slice_index,
            image,
            roi_mask: Some(roi),
            annotation,
            split,
        });
    }
    StackDataset::new(records)
}

/// Writes images, masks and a manifest under `dir`.
pub fn write_manifest(dataset: &StackDataset, dir: &Path) -> Result<PathBuf> {
    for sub in ["images", "roi", "annotations"] {
        fs::create_dir_all(dir.join(sub)).map_err(|e| Error::io(dir.join(sub), e))?;
    }
    let manifest_path = dir.join("manifest.csv");
    let mut writer = csv::Writer::from_path(&manifest_path)?;
    writer.write_record(MANIFEST_HEADER)?;
    for r in &dataset.records {
        let stem = format!("{}_{:04}.png", r.stack_id, r.slice_index);
        let image_rel = format!("images/{stem}");
        pngio::write_image(&dir.join(&image_rel), &r.image)?;
        let roi_rel = match &r.roi_mask {
            Some(m) => {
                let rel = format!("roi/{stem}");
                pngio::write_mask(&dir.join(&rel), m)?;
                rel
            }
            None => String::new(),
        };
        let ann_rel = match &r.annotation {
            Some(m) => {
                let rel = format!("annotations/{stem}");
                pngio::write_mask(&dir.join(&rel), m)?;
                rel
            }
            None => String::new(),
        };
        writer.write_record([
            r.stack_id.as_str(),
            &r.slice_index.to_string(),
            &image_rel,
            &roi_rel,
            &ann_rel,
            r.split.as_str(),
        ])?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageops::Image;
    use ndarray::Array2;

    fn write_text(path: &Path, text: &str) {
        fs::write(path, text).unwrap();
    }

    fn sample_record(idx: usize) -> SliceRecord {
        SliceRecord {
            stack_id: "a".into(),
            slice_index: idx,
            image: Array2::from_shape_fn((8, 10), |(r, c)| ((r * 10 + c) % 7) as f32 / 7.0),
            roi_mask: Some(Array2::from_shape_fn((8, 10), |(r, _)| u8::from(r > 0))),
            annotation: Some(Array2::from_shape_fn((8, 10), |(r, c)| u8::from(r == 3 && c < 4))),
            split: if idx == 2 { Split::Test } else { Split::Pool },
        }
    }

    #[test]
    fn three_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = StackDataset::new((0..3).map(sample_record).collect()).unwrap();
        let path = write_manifest(&ds, dir.path()).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        for (a, b) in ds.records.iter().zip(&loaded.records) {
            assert_eq!(a.roi_mask, b.roi_mask);
            assert_eq!(a.annotation, b.annotation);
            assert_eq!(a.split, b.split);
            let diff = (&a.image - &b.image).mapv(f32::abs).fold(0.0f32, |m, &v| m.max(v));
            assert!(diff <= 1.0 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn annotation_outside_roi_is_cleared() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("x")).unwrap();
        pngio::write_image(&dir.path().join("x/i.png"), &Image::from_elem((4, 4), 0.5)).unwrap();
        let roi: Mask = Array2::from_shape_fn((4, 4), |(r, _)| u8::from(r < 2));
        pngio::write_mask(&dir.path().join("x/r.png"), &roi).unwrap();
        pngio::write_mask(&dir.path().join("x/a.png"), &Mask::ones((4, 4))).unwrap();
        let manifest = dir.path().join("m.csv");
        write_text(
            &manifest,
            "stack_id,slice_index,image_path,roi_mask_path,annotation_path,split\n\
             s,0,x/i.png,x/r.png,x/a.png,pool\n",
        );
        let ds = load_manifest(&manifest).unwrap();
        assert_eq!(ds.records[0].annotation.as_ref().unwrap(), &roi);
    }

    #[test]
    fn missing_roi_defaults_to_ones() {
        let dir = tempfile::tempdir().unwrap();
        pngio::write_image(&dir.path().join("i.png"), &Image::from_elem((5, 3), 0.2)).unwrap();
        let manifest = dir.path().join("m.csv");
        write_text(
            &manifest,
            "stack_id,slice_index,image_path,roi_mask_path,annotation_path,split\ns,4,i.png,,,test\n",
        );
        let ds = load_manifest(&manifest).unwrap();
        assert_eq!(ds.records[0].roi_mask.as_ref().unwrap(), &Mask::ones((5, 3)));
        assert!(ds.records[0].annotation.is_none());
        assert_eq!(ds.records[0].split, Split::Test);
    }

    #[test]
    fn missing_png_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("m.csv");
        write_text(
            &manifest,
            "stack_id,slice_index,image_path,roi_mask_path,annotation_path,split\ns,0,nope.png,,,pool\n",
        );
        let err = load_manifest(&manifest).unwrap_err();
        assert!(err.to_string().contains("nope.png"), "{err}");
    }

    #[test]
    fn dimension_mismatch_names_slice() {
        let dir = tempfile::tempdir().unwrap();
        pngio::write_image(&dir.path().join("i.png"), &Image::zeros((4, 4))).unwrap();
        pngio::write_mask(&dir.path().join("r.png"), &Mask::ones((5, 4))).unwrap();
        let manifest = dir.path().join("m.csv");
        write_text(
            &manifest,
            "stack_id,slice_index,image_path,roi_mask_path,annotation_path,split\nlung7,12,i.png,r.png,,pool\n",
        );
        let err = load_manifest(&manifest).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("lung7/12"), "{err}");
    }

    #[test]
    fn non_binary_mask_rejected() {
        let dir = tempfile::tempdir().unwrap();
        pngio::write_image(&dir.path().join("i.png"), &Image::zeros((4, 4))).unwrap();
        pngio::write_image(&dir.path().join("r.png"), &Image::from_elem((4, 4), 0.5)).unwrap();
        let manifest = dir.path().join("m.csv");
        write_text(
            &manifest,
            "stack_id,slice_index,image_path,roi_mask_path,annotation_path,split\ns,0,i.png,r.png,,pool\n",
        );
        assert!(matches!(load_manifest(&manifest), Err(Error::Validation(_))));
    }
}
