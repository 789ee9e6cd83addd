//! Unsupervised image-quality scores and initial training-set selection.
//!
//! Per slice we compute
//! - blurriness: `1 / Var(Laplacian(image))`, with [`BLUR_SENTINEL`] when the
//!   Laplacian response is identically zero;
//! - PSNR-inv: `Var(image - median(image)) / max(image)`;
//! - ROI coefficient of variation `Var / max` and ROI mean.
//!
//! The initial set S₀ is the per-stack quadrant of slices whose blurriness
//! and PSNR-inv both sit strictly below their stack means, thinned by an ε₀
//! greedy deduplication on the z-scored `(cov, mean)` ROI features.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{SliceId, SliceRecord, StackDataset};
use crate::error::{Error, Result};
use crate::imageops::{laplacian, median_filter, to_f64, variance, Mask};

/// Blurriness value reported for images with zero Laplacian variance.
pub const BLUR_SENTINEL: f64 = f64::MAX;

pub fn is_sentinel(blurriness: f64) -> bool {
    blurriness == BLUR_SENTINEL
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScores {
    pub blurriness: f64,
    pub psnr_inv: f64,
    pub roi_cov: Option<f64>,
    pub roi_mean: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSlice {
    pub id: SliceId,
    pub scores: QualityScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QualitySettings {
    pub median_kernel: usize,
    pub eps0: f64,
    pub cap: usize,
    /// Below this many quadrant survivors the dedup pass is skipped.
    pub min_for_dedup: usize,
}

impl Default for QualitySettings {
    fn default() -> Self {
        Self {
            median_kernel: 5,
            eps0: 0.25,
            cap: 10,
            min_for_dedup: 5,
        }
    }
}

impl QualitySettings {
    pub fn validate(&self) -> Result<()> {
        check_kernel(self.median_kernel)?;
        if !(self.eps0 >= 0.0 && self.eps0.is_finite()) {
            return Err(Error::Config("eps0 must be a finite value ≥ 0".into()));
        }
        if self.cap == 0 {
            return Err(Error::Config("cap must be positive".into()));
        }
        Ok(())
    }
}

fn check_kernel(kernel: usize) -> Result<()> {
    if kernel < 3 || kernel.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "median kernel must be odd and at least 3, got {kernel}"
        )));
    }
    Ok(())
}

/// Inverse variance of the 3×3 Laplacian response (replicate borders).
pub fn blurriness<T: Copy + Into<f64>>(image: &Array2<T>) -> Result<f64> {
    let (h, w) = image.dim();
    if h < 3 || w < 3 {
        return Err(Error::Validation(format!(
            "blurriness needs at least a 3×3 image, got {h}×{w}"
        )));
    }
    let lap = laplacian(&to_f64(image));
    let var = variance(lap.as_slice().expect("standard layout"));
    Ok(if var == 0.0 { BLUR_SENTINEL } else { 1.0 / var })
}

/// Variance of the median residual over the image maximum.
pub fn psnr_inv<T: Copy + Into<f64>>(image: &Array2<T>, median_kernel: usize) -> Result<f64> {
    check_kernel(median_kernel)?;
    if image.is_empty() {
        return Err(Error::Validation("psnr_inv of an empty image".into()));
    }
    let img = to_f64(image);
    let max = img.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max <= 0.0 {
        return Ok(0.0);
    }
    let residual = &img - &median_filter(&img, median_kernel);
    Ok(variance(residual.as_slice().expect("standard layout")) / max)
}

/// `(Var / max, mean)` over the pixels where `roi == 1`.
pub fn roi_stats<T: Copy + Into<f64>>(image: &Array2<T>, roi: &Mask) -> Result<(f64, f64)> {
    if image.dim() != roi.dim() {
        return Err(Error::Shape(format!(
            "roi {:?} does not match image {:?}",
            roi.dim(),
            image.dim()
        )));
    }
    let pixels: Vec<f64> = image
        .iter()
        .zip(roi.iter())
        .filter(|(_, &m)| m == 1)
        .map(|(&v, _)| v.into())
        .collect();
    if pixels.is_empty() {
        return Err(Error::Validation("ROI has no foreground pixels".into()));
    }
    let max = pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean = pixels.iter().sum::<f64>() / pixels.len() as f64;
    let cov = if max == 0.0 { 0.0 } else { variance(&pixels) / max };
    Ok((cov, mean))
}

pub fn score_slice(record: &SliceRecord, median_kernel: usize) -> Result<QualityScores> {
    let blur = blurriness(&record.image)?;
    let psnr = psnr_inv(&record.image, median_kernel)?;
    let roi = record.roi_or_ones();
    let (roi_cov, roi_mean) = if roi.iter().any(|&v| v == 1) {
        let (c, m) = roi_stats(&record.image, &roi)?;
        (Some(c), Some(m))
    } else {
        (None, None)
    };
    Ok(QualityScores {
        blurriness: blur,
        psnr_inv: psnr,
        roi_cov,
        roi_mean,
    })
}

/// Scores the given records in parallel; output order follows input order.
pub fn scan<'a, I>(records: I, median_kernel: usize) -> Result<Vec<ScoredSlice>>
where
    I: IntoIterator<Item = &'a SliceRecord>,
{
    check_kernel(median_kernel)?;
    let records: Vec<&SliceRecord> = records.into_iter().collect();
    records
        .par_iter()
        .map(|r| {
            Ok(ScoredSlice {
                id: r.id(),
                scores: score_slice(r, median_kernel)?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub mean_blurriness: f64,
    pub mean_psnr_inv: f64,
}

fn group_by_stack(scored: &[ScoredSlice]) -> BTreeMap<&str, Vec<&ScoredSlice>> {
    let mut groups: BTreeMap<&str, Vec<&ScoredSlice>> = BTreeMap::new();
    for s in scored {
        groups.entry(s.id.stack_id.as_str()).or_default().push(s);
    }
    groups
}

fn stack_thresholds(slices: &[&ScoredSlice]) -> Thresholds {
    let finite: Vec<f64> = slices
        .iter()
        .map(|s| s.scores.blurriness)
        .filter(|b| !is_sentinel(*b))
        .collect();
    let mean_blurriness = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    };
    let mean_psnr_inv = slices.iter().map(|s| s.scores.psnr_inv).sum::<f64>() / slices.len().max(1) as f64;
    Thresholds {
        mean_blurriness,
        mean_psnr_inv,
    }
}

/// Per-stack quadrant selection: strictly below both stack means; sentinel
/// slices never qualify. Returns selected slices in input order.
pub fn select_initial(scored: &[ScoredSlice]) -> (Vec<SliceId>, BTreeMap<String, Thresholds>) {
    let groups = group_by_stack(scored);
    let thresholds: BTreeMap<String, Thresholds> = groups
        .iter()
        .map(|(stack, slices)| (stack.to_string(), stack_thresholds(slices)))
        .collect();
    let selected = scored
        .iter()
        .filter(|s| {
            let t = &thresholds[&s.id.stack_id];
            !is_sentinel(s.scores.blurriness)
                && s.scores.blurriness < t.mean_blurriness
                && s.scores.psnr_inv < t.mean_psnr_inv
        })
        .map(|s| s.id.clone())
        .collect();
    (selected, thresholds)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DedupCandidate {
    pub id: SliceId,
    pub blurriness: f64,
    pub cov: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DedupOutcome {
    /// Survivors in ascending-blurriness order.
    pub kept: Vec<SliceId>,
    pub eliminated: Vec<SliceId>,
}

fn zscore(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = variance(values).sqrt();
    if std == 0.0 || !std.is_finite() {
        return vec![0.0; values.len()];
    }
    values.iter().map(|v| (v - mean) / std).collect()
}

/// Z-scores `(cov, mean)` over the candidates, then greedily keeps
/// candidates in ascending-blurriness order whose distance to every kept
/// one exceeds `eps0`. At most `cap` survivors are retained.
pub fn dedup_epsilon(candidates: &[DedupCandidate], eps0: f64, cap: usize) -> DedupOutcome {
    if candidates.is_empty() {
        return DedupOutcome::default();
    }
    let covs: Vec<f64> = candidates.iter().map(|c| c.cov).collect();
    let means: Vec<f64> = candidates.iter().map(|c| c.mean).collect();
    let zc = zscore(&covs);
    let zm = zscore(&means);

    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[a].blurriness.total_cmp(&candidates[b].blurriness));

    let mut kept: Vec<usize> = Vec::new();
    let mut eliminated = Vec::new();
    for i in order {
        let far = kept.iter().all(|&k| {
            let d = ((zc[i] - zc[k]).powi(2) + (zm[i] - zm[k]).powi(2)).sqrt();
            d > eps0
        });
        if far && kept.len() < cap {
            kept.push(i);
        } else {
            eliminated.push(candidates[i].id.clone());
        }
    }
    DedupOutcome {
        kept: kept.into_iter().map(|i| candidates[i].id.clone()).collect(),
        eliminated,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitialSelection {
    pub s0_indices: Vec<SliceId>,
    pub thresholds_used: BTreeMap<String, Thresholds>,
    pub eliminated_by_dedup: Vec<SliceId>,
}

impl InitialSelection {
    pub fn contains(&self, id: &SliceId) -> bool {
        self.s0_indices.contains(id)
    }
}

/// Quadrant selection followed by per-stack ε₀ deduplication.
pub fn initial_selection(scored: &[ScoredSlice], settings: &QualitySettings) -> InitialSelection {
    let (quadrant, thresholds_used) = select_initial(scored);
    let by_id: BTreeMap<&SliceId, &QualityScores> = scored.iter().map(|s| (&s.id, &s.scores)).collect();

    let mut s0 = Vec::new();
    let mut eliminated = Vec::new();
    for stack in thresholds_used.keys() {
        let members: Vec<&SliceId> = quadrant.iter().filter(|id| &id.stack_id == stack).collect();
        if members.len() < settings.min_for_dedup {
            s0.extend(members.into_iter().cloned());
            continue;
        }
        let candidates: Vec<DedupCandidate> = members
            .iter()
            .map(|id| {
                let s = by_id[id];
                DedupCandidate {
                    id: (*id).clone(),
                    blurriness: s.blurriness,
                    cov: s.roi_cov.unwrap_or(0.0),
                    mean: s.roi_mean.unwrap_or(0.0),
                }
            })
            .collect();
        let out = dedup_epsilon(&candidates, settings.eps0, settings.cap);
        let kept: HashSet<&SliceId> = out.kept.iter().collect();
        // report S₀ in slice order
        s0.extend(members.into_iter().filter(|id| kept.contains(id)).cloned());
        eliminated.extend(out.eliminated);
    }
    InitialSelection {
        s0_indices: s0,
        thresholds_used,
        eliminated_by_dedup: eliminated,
    }
}

/// Scores the pool split of `dataset` and selects S₀.
pub fn scan_and_select(
    dataset: &StackDataset,
    settings: &QualitySettings,
) -> Result<(Vec<ScoredSlice>, InitialSelection)> {
    settings.validate()?;
    let scored = scan(dataset.split(crate::data::Split::Pool), settings.median_kernel)?;
    let selection = initial_selection(&scored, settings);
    Ok((scored, selection))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9e}")).unwrap_or_default()
}

pub fn write_quality_csv(path: &Path, scored: &[ScoredSlice], s0: &[SliceId]) -> Result<()> {
    let s0: HashSet<&SliceId> = s0.iter().collect();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "stack_id",
        "slice_index",
        "blurriness",
        "psnr_inv",
        "roi_cov",
        "roi_mean",
        "selected_s0",
    ])?;
    for s in scored {
        let blur = if is_sentinel(s.scores.blurriness) {
            "MAX".to_string()
        } else {
            format!("{:.9e}", s.scores.blurriness)
        };
        w.write_record([
            s.id.stack_id.clone(),
            s.id.slice_index.to_string(),
            blur,
            format!("{:.9e}", s.scores.psnr_inv),
            fmt_opt(s.scores.roi_cov),
            fmt_opt(s.scores.roi_mean),
            u8::from(s0.contains(&s.id)).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads back a quality CSV as `(scored slice, selected_s0)` rows.
pub fn read_quality_csv(path: &Path) -> Result<Vec<(ScoredSlice, bool)>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<Option<f64>> {
            let cell = rec.get(i).unwrap_or("").trim();
            if cell.is_empty() {
                return Ok(None);
            }
            if cell == "MAX" {
                return Ok(Some(BLUR_SENTINEL));
            }
            cell.parse::<f64>()
                .map(Some)
                .map_err(|e| Error::Validation(format!("{}: bad number {cell:?}: {e}", path.display())))
        };
        let slice_index = rec
            .get(1)
            .unwrap_or("")
            .parse::<usize>()
            .map_err(|e| Error::Validation(format!("{}: bad slice index: {e}", path.display())))?;
        out.push((
            ScoredSlice {
                id: SliceId::new(rec.get(0).unwrap_or(""), slice_index),
                scores: QualityScores {
                    blurriness: parse(2)?.unwrap_or(BLUR_SENTINEL),
                    psnr_inv: parse(3)?.unwrap_or(0.0),
                    roi_cov: parse(4)?,
                    roi_mean: parse(5)?,
                },
            },
            rec.get(6).map(str::trim) == Some("1"),
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    fn scored(stack: &str, idx: usize, blur: f64, psnr: f64) -> ScoredSlice {
        ScoredSlice {
            id: SliceId::new(stack, idx),
            scores: QualityScores {
                blurriness: blur,
                psnr_inv: psnr,
                roi_cov: Some(0.0),
                roi_mean: Some(0.0),
            },
        }
    }

    #[test]
    fn constant_image_is_sentinel_and_zero_psnr() {
        let img = Array2::<f64>::from_elem((8, 8), 0.4);
        assert!(is_sentinel(blurriness(&img).unwrap()));
        assert_eq!(psnr_inv(&img, 5).unwrap(), 0.0);
    }

    #[test]
    fn tiny_image_rejected() {
        let img = Array2::<f64>::zeros((2, 5));
        assert!(matches!(blurriness(&img), Err(Error::Validation(_))));
    }

    #[test]
    fn center_spike_blurriness_by_hand() {
        // replicate-padded Laplacian of a 3×3 centre spike:
        // centre -4, edge neighbours 1, corners 0
        let img = array![[0.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 0.0]];
        let resp = [0.0, 1.0, 0.0, 1.0, -4.0, 1.0, 0.0, 1.0, 0.0];
        let mean: f64 = resp.iter().sum::<f64>() / 9.0;
        let var: f64 = resp.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
        assert_eq!(blurriness(&img).unwrap(), 1.0 / var);
        assert!((var - 20.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn even_kernel_is_config_error() {
        let img = Array2::<f64>::zeros((5, 5));
        assert!(matches!(psnr_inv(&img, 4), Err(Error::Config(_))));
        assert!(matches!(psnr_inv(&img, 1), Err(Error::Config(_))));
    }

    #[test]
    fn roi_stats_cases() {
        let img = array![[0.6f64, 0.6], [0.6, 0.6]];
        assert_eq!(roi_stats(&img, &Mask::ones((2, 2))).unwrap(), (0.0, 0.6));
        let img = array![[0.0f64, 1.0], [0.3, 0.3]];
        let roi: Mask = array![[1, 1], [0, 0]];
        assert_eq!(roi_stats(&img, &roi).unwrap(), (0.25, 0.5));
        let img = Array2::<f64>::zeros((2, 2));
        assert_eq!(roi_stats(&img, &Mask::ones((2, 2))).unwrap(), (0.0, 0.0));
        assert!(roi_stats(&img, &Mask::zeros((2, 2))).is_err());
    }

    #[test]
    fn quadrant_by_hand() {
        let s = vec![
            scored("a", 0, 1.0, 1.0),
            scored("a", 1, 1.0, 3.0),
            scored("a", 2, 3.0, 1.0),
            scored("a", 3, 3.0, 3.0),
        ];
        let (sel, t) = select_initial(&s);
        assert_eq!(sel, vec![SliceId::new("a", 0)]);
        assert_eq!(t["a"].mean_blurriness, 2.0);
        assert_eq!(t["a"].mean_psnr_inv, 2.0);
    }

    #[test]
    fn identical_scores_select_nothing() {
        let s: Vec<_> = (0..5).map(|i| scored("a", i, 2.0, 2.0)).collect();
        assert!(select_initial(&s).0.is_empty());
    }

    #[test]
    fn sentinel_excluded_from_mean_and_selection() {
        let s = vec![
            scored("a", 0, 1.0, 1.0),
            scored("a", 1, 3.0, 3.0),
            scored("a", 2, BLUR_SENTINEL, 0.0),
        ];
        let (sel, t) = select_initial(&s);
        assert_eq!(t["a"].mean_blurriness, 2.0);
        assert_eq!(sel, vec![SliceId::new("a", 0)]);
    }

    #[test]
    fn thresholds_are_per_stack() {
        let s = vec![
            scored("a", 0, 1.0, 1.0),
            scored("a", 1, 3.0, 3.0),
            scored("b", 0, 10.0, 10.0),
            scored("b", 1, 30.0, 30.0),
        ];
        let (sel, _) = select_initial(&s);
        assert_eq!(sel, vec![SliceId::new("a", 0), SliceId::new("b", 0)]);
    }

    fn cand(i: usize, blur: f64, cov: f64, mean: f64) -> DedupCandidate {
        DedupCandidate {
            id: SliceId::new("a", i),
            blurriness: blur,
            cov,
            mean,
        }
    }

    #[test]
    fn eps_zero_keeps_distinct() {
        let c: Vec<_> = (0..4).map(|i| cand(i, i as f64, i as f64, (i * i) as f64)).collect();
        let out = dedup_epsilon(&c, 0.0, 10);
        assert_eq!(out.kept.len(), 4);
        assert!(out.eliminated.is_empty());
    }

    #[test]
    fn duplicates_collapse_to_one() {
        let c = vec![cand(0, 2.0, 0.1, 0.5), cand(1, 1.0, 0.1, 0.5)];
        let out = dedup_epsilon(&c, 0.25, 10);
        assert_eq!(out.kept, vec![SliceId::new("a", 1)]);
        assert_eq!(out.eliminated, vec![SliceId::new("a", 0)]);
    }

    #[test]
    fn cap_keeps_sharpest() {
        let c: Vec<_> = (0..6).map(|i| cand(i, 6.0 - i as f64, i as f64, 0.0)).collect();
        let out = dedup_epsilon(&c, 0.0, 2);
        assert_eq!(out.kept, vec![SliceId::new("a", 5), SliceId::new("a", 4)]);
        assert_eq!(out.eliminated.len(), 4);
    }

    #[test]
    fn quality_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.csv");
        let s = vec![scored("a", 0, 1.5, 0.25), scored("a", 1, BLUR_SENTINEL, 0.0)];
        write_quality_csv(&p, &s, &[SliceId::new("a", 0)]).unwrap();
        let back = read_quality_csv(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert!(back[0].1 && !back[1].1);
        assert!(is_sentinel(back[1].0.scores.blurriness));
        assert_eq!(back[0].0.scores.blurriness, 1.5);
    }
}
