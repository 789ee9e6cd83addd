//! Head-agreement quality score `Q = J(L3r, L4)` and the minimal
//! training-set pass.

use std::collections::HashSet;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{SliceId, SliceRecord};
use crate::error::{Error, Result};
use crate::imageops::{Image, Mask};
use crate::model::{resize_outputs, LevelOutputs, SegModel, LEVELS};

/// Default agreement threshold.
pub const DEFAULT_Q0: f64 = 0.9;
/// Largest accepted `q0`; anything above 1 selects every slice.
pub const MAX_Q0: f64 = 1.01;
/// Probability at or above which a pixel counts as foreground.
pub const BINARIZE_AT: f32 = 0.5;

pub fn binarize(map: &Image) -> Mask {
    map.mapv(|v| u8::from(v >= BINARIZE_AT))
}

fn check_same<A, B>(a: &Array2<A>, b: &Array2<B>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

/// `|A∩B| / |A∪B|` of two binary maps (nonzero = foreground); 1 when both
/// are empty.
pub fn jaccard(a: &Mask, b: &Mask) -> Result<f64> {
    check_same(a, b)?;
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += u64::from(x && y);
        union += u64::from(x || y);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// `Q` of already computed head outputs; resizes `L3` if needed.
pub fn quality_from_outputs(outputs: &LevelOutputs) -> Result<f64> {
    let resized;
    let outputs = if outputs.resized.is_some() {
        outputs
    } else {
        resized = resize_outputs(outputs);
        &resized
    };
    let l3 = outputs.full_res(LEVELS - 1).expect("resized");
    let l4 = outputs.full_res(LEVELS).expect("level 4");
    jaccard(&binarize(l3), &binarize(l4))
}

/// Runs the model on `image` and returns `Q`.
pub fn quality_score(model: &SegModel, image: &Image) -> Result<f64> {
    quality_from_outputs(&model.predict(image)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub stack_id: String,
    pub slice_index: usize,
    pub q: f64,
    pub selected: bool,
    #[serde(skip)]
    pub q0_used: f64,
}

impl QualityVerdict {
    pub fn new(id: &SliceId, q: f64, q0: f64) -> Self {
        Self {
            stack_id: id.stack_id.clone(),
            slice_index: id.slice_index,
            q,
            selected: q < q0,
            q0_used: q0,
        }
    }

    pub fn id(&self) -> SliceId {
        SliceId::new(self.stack_id.clone(), self.slice_index)
    }
}

pub fn validate_q0(q0: f64) -> Result<()> {
    if !(0.0..=MAX_Q0).contains(&q0) {
        return Err(Error::Config(format!("q0 must lie in [0, {MAX_Q0}], got {q0}")));
    }
    Ok(())
}

/// Scores every pool slice (in parallel, read-only on the model) and marks
/// those with `Q < q0`. Verdicts come back in pool order.
pub fn select_minimal(model: &SegModel, pool: &[&SliceRecord], q0: f64) -> Result<Vec<QualityVerdict>> {
    validate_q0(q0)?;
    let images: Vec<Image> = pool.iter().map(|r| r.image.clone()).collect();
    let outputs = if images.is_empty() {
        Vec::new()
    } else {
        model.forward(&images)?
    };
    pool.iter()
        .zip(&outputs)
        .map(|(r, out)| Ok(QualityVerdict::new(&r.id(), quality_from_outputs(out)?, q0)))
        .collect()
}

/// Ids of the selected verdicts, in verdict order.
pub fn selected_ids(verdicts: &[QualityVerdict]) -> Vec<SliceId> {
    verdicts.iter().filter(|v| v.selected).map(QualityVerdict::id).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub q0: f64,
    pub s0: Vec<SliceId>,
    pub s_m: Vec<SliceId>,
    pub verdicts: Vec<QualityVerdict>,
    pub fraction_selected: f64,
}

impl SelectionReport {
    /// Assembles the report; `pool_size` is the number of pool slices.
    pub fn new(q0: f64, s0: Vec<SliceId>, verdicts: Vec<QualityVerdict>, pool_size: usize) -> Result<Self> {
        let s_m = selected_ids(&verdicts);
        let initial: HashSet<&SliceId> = s0.iter().collect();
        if let Some(dup) = s_m.iter().find(|id| initial.contains(id)) {
            return Err(Error::Validation(format!("slice {dup} is in both S0 and S_m")));
        }
        let fraction_selected = if pool_size == 0 {
            0.0
        } else {
            (s0.len() + s_m.len()) as f64 / pool_size as f64
        };
        Ok(Self {
            q0,
            s0,
            s_m,
            verdicts,
            fraction_selected,
        })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut report: Self = serde_json::from_str(&text)?;
        for v in &mut report.verdicts {
            v.q0_used = report.q0;
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[(usize, usize)]) -> Mask {
        let mut m = Mask::zeros((h, w));
        for &p in on {
            m[p] = 1;
        }
        m
    }

    #[test]
    fn jaccard_cases() {
        let a = mask(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
        let b = mask(3, 3, &[(2, 2)]);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.0);
        let z = Mask::zeros((3, 3));
        assert_eq!(jaccard(&z, &z).unwrap(), 1.0);
        let a = mask(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = mask(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1), (1, 2), (1, 3)]);
        assert_eq!(jaccard(&a, &b).unwrap(), 0.25);
        assert!(jaccard(&a, &Mask::zeros((3, 4))).is_err());
    }

    #[test]
    fn verdict_threshold_is_strict() {
        let id = SliceId::new("s", 0);
        assert!(!QualityVerdict::new(&id, 0.9, 0.9).selected);
        assert!(QualityVerdict::new(&id, 0.9, 0.9001).selected);
    }

    #[test]
    fn report_rejects_overlap_and_computes_fraction() {
        let a = SliceId::new("s", 0);
        let b = SliceId::new("s", 1);
        let v = vec![QualityVerdict::new(&b, 0.2, 0.9)];
        let r = SelectionReport::new(0.9, vec![a.clone()], v, 10).unwrap();
        assert_eq!(r.s_m, vec![b.clone()]);
        assert!((r.fraction_selected - 0.2).abs() < 1e-15);
        let v = vec![QualityVerdict::new(&a, 0.2, 0.9)];
        assert!(SelectionReport::new(0.9, vec![a], v, 10).is_err());
    }

    #[test]
    fn report_json_shape() {
        let a = SliceId::new("s", 3);
        let r = SelectionReport::new(0.9, vec![], vec![QualityVerdict::new(&a, 0.5, 0.9)], 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("selection_report.json");
        r.write_json(&p).unwrap();
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        let keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        assert_eq!(keys.len(), 5);
        let verdict = &v["verdicts"][0];
        assert_eq!(verdict["stack_id"], "s");
        assert_eq!(verdict["selected"], true);
        assert!(verdict.get("q0_used").is_none());
        assert_eq!(SelectionReport::read_json(&p).unwrap(), r);
    }

    #[test]
    fn q0_bounds() {
        assert!(validate_q0(0.0).is_ok());
        assert!(validate_q0(1.001).is_ok());
        assert!(validate_q0(-0.1).is_err());
        assert!(validate_q0(1.5).is_err());
    }
}
