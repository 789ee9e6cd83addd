//! Smoothed dice loss `-2ΣPY / (ΣP + ΣY + 1)` and its gradient.

use crate::error::{Error, Result};

fn check_len(p: usize, y: usize) -> Result<()> {
    if p != y {
        return Err(Error::Shape(format!("prediction has {p} pixels but target has {y}")));
    }
    Ok(())
}

/// Intersection `ΣPY` and smoothed denominator `ΣP + ΣY + 1`.
fn dice_terms<P, Y>(p: &[P], y: &[Y]) -> (f64, f64)
where
    P: Copy + Into<f64>,
    Y: Copy + Into<f64>,
{
    let mut inter = 0.0f64;
    let mut denom = 1.0f64;
    for (&a, &b) in p.iter().zip(y) {
        let (a, b) = (a.into(), b.into());
        inter += a * b;
        denom += a + b;
    }
    (inter, denom)
}

/// Negative smoothed dice over all pixels. Lies in `(-1, 0]` for
/// probabilities and binary targets.
pub fn dice_loss<P, Y>(p: &[P], y: &[Y]) -> Result<f64>
where
    P: Copy + Into<f64>,
    Y: Copy + Into<f64>,
{
    check_len(p.len(), y.len())?;
    let (inter, denom) = dice_terms(p, y);
    Ok(-2.0 * inter / denom)
}

/// `∂L/∂P_k = -2 (Y_k·S - I) / S²` with `S = ΣP + ΣY + 1`, `I = ΣPY`.
pub fn dice_loss_grad<P, Y>(p: &[P], y: &[Y]) -> Result<Vec<f64>>
where
    P: Copy + Into<f64>,
    Y: Copy + Into<f64>,
{
    check_len(p.len(), y.len())?;
    let (inter, denom) = dice_terms(p, y);
    let s2 = denom * denom;
    Ok(y.iter().map(|&t| -2.0 * (t.into() * denom - inter) / s2).collect())
}

/// Loss and gradient in one pass, with the gradient written as `f32`.
pub(crate) fn dice_loss_and_grad_f32(p: &[f32], y: &[f32], grad: &mut [f32]) -> f64 {
    let (inter, denom) = dice_terms(p, y);
    let s2 = denom * denom;
    for (g, &t) in grad.iter_mut().zip(y) {
        *g = (-2.0 * (t as f64 * denom - inter) / s2) as f32;
    }
    -2.0 * inter / denom
}

/// Largest relative error between the analytic dice gradient and central
/// finite differences with step `h`.
///
/// Entries where both gradients are below `1e-10` in magnitude count as
/// exact agreement.
pub fn gradient_check(p: &[f64], y: &[f64], h: f64) -> Result<f64> {
    let analytic = dice_loss_grad(p, y)?;
    let mut probe = p.to_vec();
    let mut worst = 0.0f64;
    for k in 0..p.len() {
        probe[k] = p[k] + h;
        let up = dice_loss(&probe, y)?;
        probe[k] = p[k] - h;
        let down = dice_loss(&probe, y)?;
        probe[k] = p[k];
        let numeric = (up - down) / (2.0 * h);
        let scale = analytic[k].abs().max(numeric.abs());
        if scale < 1e-10 {
            continue;
        }
        worst = worst.max((analytic[k] - numeric).abs() / scale);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_examples() {
        let z = vec![0.0f64; 9];
        assert_eq!(dice_loss(&z, &z).unwrap(), 0.0);

        let mut m = vec![0.0f64; 16];
        m[..8].fill(1.0);
        assert_eq!(dice_loss(&m, &m).unwrap(), -16.0 / 17.0);

        let a: Vec<f64> = (0..16).map(|i| (i % 2) as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert_eq!(dice_loss(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn shape_mismatch() {
        assert!(matches!(dice_loss(&[0.0f64; 3], &[0.0f64; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn quotient_rule_at_half() {
        // P = 0.5 on 9 pixels, Y = one pixel: I = 0.5, S = 4.5 + 1 + 1 = 6.5.
        let p = vec![0.5f64; 9];
        let mut y = vec![0.0f64; 9];
        y[4] = 1.0;
        let g = dice_loss_grad(&p, &y).unwrap();
        let s = 6.5f64;
        let on = -2.0 * (s - 0.5) / (s * s);
        let off = -2.0 * (0.0 - 0.5) / (s * s);
        for (k, v) in g.iter().enumerate() {
            let want = if k == 4 { on } else { off };
            assert!((v - want).abs() < 1e-15, "{k}: {v} vs {want}");
        }
    }

    #[test]
    fn empty_target_has_zero_gradient() {
        let p = [0.1, 0.7, 0.3, 0.9];
        let y = [0.0f64; 4];
        assert!(dice_loss_grad(&p, &y).unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(gradient_check(&p, &y, 1e-5).unwrap(), 0.0);
    }

    #[test]
    fn f32_path_matches_f64() {
        let p = [0.2f32, 0.9, 0.4, 0.6];
        let y = [0.0f32, 1.0, 1.0, 0.0];
        let mut g = [0.0f32; 4];
        let l = dice_loss_and_grad_f32(&p, &y, &mut g);
        assert!((l - dice_loss(&p, &y).unwrap()).abs() < 1e-12);
        let g64 = dice_loss_grad(&p, &y).unwrap();
        for (a, b) in g.iter().zip(&g64) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
    }
}
