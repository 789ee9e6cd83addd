//! PNG figures drawn directly onto an RGB raster: the quality scatter with
//! the S₀ quadrant shaded, per-level loss curves, and enlarged overlays.
//! There is no text rendering; colours carry the legend (see README).

use std::collections::BTreeMap;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::imageops::resize_nearest;
use crate::quality::{is_sentinel, select_initial, ScoredSlice};
use crate::training::LossHistory;

pub type Rgb = [u8; 3];

pub const WHITE: Rgb = [255, 255, 255];
pub const BLACK: Rgb = [0, 0, 0];
pub const GRID: Rgb = [200, 200, 200];
pub const QUADRANT: Rgb = [205, 235, 205];
pub const POINT: Rgb = [90, 90, 90];
pub const SELECTED: Rgb = [220, 30, 30];
/// L1..L4 curve colours.
pub const LEVEL_COLOURS: [Rgb; 4] = [[230, 140, 20], [40, 160, 60], [40, 90, 220], [0, 0, 0]];

const PANEL: usize = 240;
const MARGIN: usize = 20;

/// Minimal clipped raster.
#[derive(Clone, Debug)]
pub struct Canvas {
    pixels: Array2<Rgb>,
}

impl Canvas {
    pub fn new(height: usize, width: usize, background: Rgb) -> Self {
        Self {
            pixels: Array2::from_elem((height, width), background),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn put(&mut self, row: i64, col: i64, colour: Rgb) {
        let (h, w) = self.dim();
        if row >= 0 && col >= 0 && (row as usize) < h && (col as usize) < w {
            self.pixels[[row as usize, col as usize]] = colour;
        }
    }

    /// Fills rows `r0..r1`, columns `c0..c1`.
    pub fn fill_rect(&mut self, r0: i64, c0: i64, r1: i64, c1: i64, colour: Rgb) {
        for r in r0..r1 {
            for c in c0..c1 {
                self.put(r, c, colour);
            }
        }
    }

    /// Bresenham segment between two `(row, col)` points.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), colour: Rgb) {
        let (mut r, mut c) = from;
        let dr = (to.0 - r).abs();
        let dc = (to.1 - c).abs();
        let sr = if to.0 >= r { 1 } else { -1 };
        let sc = if to.1 >= c { 1 } else { -1 };
        let mut err = dc - dr;
        loop {
            self.put(r, c, colour);
            if (r, c) == to {
                break;
            }
            let e2 = 2 * err;
            if e2 > -dr {
                err -= dr;
                c += sc;
            }
            if e2 < dc {
                err += dc;
                r += sr;
            }
        }
    }

    pub fn dot(&mut self, row: i64, col: i64, radius: i64, colour: Rgb) {
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                if dr * dr + dc * dc <= radius * radius {
                    self.put(row + dr, col + dc, colour);
                }
            }
        }
    }

    pub fn into_rgb(self) -> Array2<Rgb> {
        self.pixels
    }
}

/// Linear map from `[lo, hi]` onto `[p0, p1]` pixels, clamped.
#[derive(Clone, Copy, Debug)]
struct Axis {
    lo: f64,
    hi: f64,
    p0: f64,
    p1: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, p0: usize, p1: usize) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Self {
            lo,
            hi,
            p0: p0 as f64,
            p1: p1 as f64,
        }
    }

    fn px(&self, v: f64) -> i64 {
        let t = ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0);
        (self.p0 + t * (self.p1 - self.p0)).round() as i64
    }
}

fn padded_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = 0.05 * (hi - lo).max(1e-9);
    (lo - pad, hi + pad)
}

fn frame(canvas: &mut Canvas, top: usize, left: usize) {
    let (t, l) = (top as i64, left as i64);
    let (b, r) = (t + PANEL as i64 - 1, l + PANEL as i64 - 1);
    canvas.line((t, l), (b, l), BLACK);
    canvas.line((b, l), (b, r), BLACK);
    canvas.line((t, l), (t, r), GRID);
    canvas.line((t, r), (b, r), GRID);
}

/// One panel per stack: log₁₀ blurriness across, PSNR-inv upwards, the
/// below-both-means quadrant shaded, S₀ members in red. Slices with the
/// sentinel blurriness sit on the right edge.
pub fn quality_scatter(rows: &[(ScoredSlice, bool)]) -> Result<Array2<Rgb>> {
    if rows.is_empty() {
        return Err(Error::Validation("no quality scores to plot".into()));
    }
    let scored: Vec<ScoredSlice> = rows.iter().map(|(s, _)| s.clone()).collect();
    let (_, thresholds) = select_initial(&scored);
    let mut stacks: BTreeMap<&str, Vec<&(ScoredSlice, bool)>> = BTreeMap::new();
    for row in rows {
        stacks.entry(row.0.id.stack_id.as_str()).or_default().push(row);
    }

    let width = MARGIN + stacks.len() * (PANEL + MARGIN);
    let mut canvas = Canvas::new(PANEL + 2 * MARGIN, width, WHITE);
    for (k, (stack, members)) in stacks.iter().enumerate() {
        let top = MARGIN;
        let left = MARGIN + k * (PANEL + MARGIN);
        let log_blur = |b: f64| b.max(f64::MIN_POSITIVE).log10();
        let (xlo, xhi) = padded_range(
            members
                .iter()
                .map(|(s, _)| s.scores.blurriness)
                .filter(|b| !is_sentinel(*b))
                .map(log_blur),
        );
        let (ylo, yhi) = padded_range(members.iter().map(|(s, _)| s.scores.psnr_inv));
        let x = Axis::new(xlo, xhi, left + 3, left + PANEL - 4);
        let y = Axis::new(ylo, yhi, top + PANEL - 4, top + 3);

        let t = &thresholds[*stack];
        if t.mean_blurriness.is_finite() {
            let cx = x.px(log_blur(t.mean_blurriness));
            let cy = y.px(t.mean_psnr_inv);
            canvas.fill_rect(cy, left as i64, (top + PANEL) as i64, cx, QUADRANT);
        }
        frame(&mut canvas, top, left);
        for (s, selected) in members {
            let col = if is_sentinel(s.scores.blurriness) {
                (left + PANEL - 4) as i64
            } else {
                x.px(log_blur(s.scores.blurriness))
            };
            let colour = if *selected { SELECTED } else { POINT };
            canvas.dot(y.px(s.scores.psnr_inv), col, 2, colour);
        }
    }
    Ok(canvas.into_rgb())
}

/// Per-level Dice-loss curves on a fixed `[-1, 0]` axis. `boundary` marks the
/// first fine-tune epoch with a vertical grey line. An empty history gives
/// bare axes.
pub fn loss_curves(history: &LossHistory, boundary: Option<usize>) -> Array2<Rgb> {
    let n = history.epochs.len();
    let width = 2 * PANEL;
    let mut canvas = Canvas::new(PANEL + 2 * MARGIN, width + 2 * MARGIN, WHITE);
    let x = Axis::new(0.0, (n.max(2) - 1) as f64, MARGIN + 2, MARGIN + width - 3);
    let y = Axis::new(-1.0, 0.0, MARGIN + PANEL - 3, MARGIN + 2);
    for tick in [-0.75, -0.5, -0.25] {
        let r = y.px(tick);
        canvas.line((r, MARGIN as i64), (r, (MARGIN + width - 1) as i64), GRID);
    }
    if let Some(b) = boundary.filter(|&b| b > 0 && b < n) {
        let c = x.px(b as f64 - 0.5);
        canvas.line((MARGIN as i64, c), ((MARGIN + PANEL - 1) as i64, c), POINT);
    }
    let (t, l) = (MARGIN as i64, MARGIN as i64);
    let (b, r) = (t + PANEL as i64 - 1, l + width as i64 - 1);
    canvas.line((t, l), (b, l), BLACK);
    canvas.line((b, l), (b, r), BLACK);

    for (level, colour) in LEVEL_COLOURS.iter().enumerate() {
        let pts: Vec<(i64, i64)> = history
            .epochs
            .iter()
            .enumerate()
            .map(|(i, e)| (y.px(e.levels[level]), x.px(i as f64)))
            .collect();
        for pair in pts.windows(2) {
            canvas.line(pair[0], pair[1], *colour);
        }
        if let [only] = pts.as_slice() {
            canvas.dot(only.0, only.1, 1, *colour);
        }
    }
    canvas.into_rgb()
}

/// Nearest-neighbour enlargement so small overlays stay readable.
pub fn enlarge(rgb: &Array2<Rgb>, factor: usize) -> Array2<Rgb> {
    let (h, w) = rgb.dim();
    resize_nearest(rgb, h * factor.max(1), w * factor.max(1))
}
