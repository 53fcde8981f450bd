//! Tolerant boundary-detection metrics.
//!
//! A predicted boundary pixel counts as a true positive when it lies within
//! `tol_px` Chebyshev (chessboard) distance of any ground-truth pixel, and
//! symmetrically for recall. Distances come from a two-pass chamfer
//! transform, exact for the chessboard metric.

use crate::error::{MgfError, Result};
use crate::img::BinaryMask;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EdgeMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub match_tolerance_px: usize,
}

/// Chessboard distance to the nearest on-pixel; `u32::MAX` when the mask is
/// empty.
pub fn chebyshev_distance_map(mask: &BinaryMask) -> Vec<u32> {
    let (h, w) = (mask.h, mask.w);
    const INF: u32 = u32::MAX - 1;
    let mut dt = vec![INF; h * w];
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) {
                dt[r * w + c] = 0;
            }
        }
    }
    // Forward: N, NW, NE, W neighbors.
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut best = dt[i];
            if r > 0 {
                best = best.min(dt[(r - 1) * w + c] + 1);
                if c > 0 {
                    best = best.min(dt[(r - 1) * w + c - 1] + 1);
                }
                if c + 1 < w {
                    best = best.min(dt[(r - 1) * w + c + 1] + 1);
                }
            }
            if c > 0 {
                best = best.min(dt[r * w + c - 1] + 1);
            }
            dt[i] = best;
        }
    }
    // Backward: S, SE, SW, E neighbors.
    for r in (0..h).rev() {
        for c in (0..w).rev() {
            let i = r * w + c;
            let mut best = dt[i];
            if r + 1 < h {
                best = best.min(dt[(r + 1) * w + c] + 1);
                if c > 0 {
                    best = best.min(dt[(r + 1) * w + c - 1] + 1);
                }
                if c + 1 < w {
                    best = best.min(dt[(r + 1) * w + c + 1] + 1);
                }
            }
            if c + 1 < w {
                best = best.min(dt[r * w + c + 1] + 1);
            }
            dt[i] = best;
        }
    }
    dt
}

/// Precision/recall/F1 of a predicted boundary mask against ground truth at
/// the given pixel tolerance. With no predicted pixels precision is 1 only
/// when the truth is empty too, and symmetrically for recall.
pub fn edge_metrics(pred: &BinaryMask, gt: &BinaryMask, tol_px: usize) -> Result<EdgeMetrics> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(MgfError::shape_mismatch(format!(
            "edge metrics of {}x{} prediction vs {}x{} truth",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let tol = tol_px as u32;
    let n_pred = pred.count_on();
    let n_gt = gt.count_on();

    let precision = if n_pred == 0 {
        if n_gt == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        let dt_gt = chebyshev_distance_map(gt);
        let tp = pred
            .on_pixels()
            .iter()
            .filter(|&&(r, c)| dt_gt[r * gt.w + c] <= tol)
            .count();
        tp as f64 / n_pred as f64
    };

    let recall = if n_gt == 0 {
        if n_pred == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        let dt_pred = chebyshev_distance_map(pred);
        let matched = gt
            .on_pixels()
            .iter()
            .filter(|&&(r, c)| dt_pred[r * pred.w + c] <= tol)
            .count();
        matched as f64 / n_gt as f64
    };

    Ok(EdgeMetrics {
        precision,
        recall,
        f1: f1_score(precision, recall),
        match_tolerance_px: tol_px,
    })
}

pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Dataset-level aggregation. Per-image averaging of F1 is the primary
/// figure; the F1 of the mean precision/recall is also reported since the
/// two differ slightly.
#[derive(Clone, Copy, Debug)]
pub struct EdgeMetricsSummary {
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1_per_image: f64,
    pub f1_of_mean_pr: f64,
}

pub fn summarize(per_image: &[EdgeMetrics]) -> Result<EdgeMetricsSummary> {
    if per_image.is_empty() {
        return Err(MgfError::invalid_argument(
            "cannot summarize zero edge-metric records",
        ));
    }
    let n = per_image.len() as f64;
    let mean_precision = per_image.iter().map(|m| m.precision).sum::<f64>() / n;
    let mean_recall = per_image.iter().map(|m| m.recall).sum::<f64>() / n;
    let mean_f1_per_image = per_image.iter().map(|m| m.f1).sum::<f64>() / n;
    Ok(EdgeMetricsSummary {
        mean_precision,
        mean_recall,
        mean_f1_per_image,
        f1_of_mean_pr: f1_score(mean_precision, mean_recall),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line_mask(col: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(8, 8);
        for r in 0..8 {
            m.set(r, col, true);
        }
        m
    }

    #[test]
    fn identical_masks_scoreperfectly() {
        let m = line_mask(3);
        let e = edge_metrics(&m, &m, 0).unwrap();
        assert_eq!((e.precision, e.recall, e.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn one_pixel_shift_matches_within_tolerance_two() {
        let e = edge_metrics(&line_mask(3), &line_mask(4), 2).unwrap();
        assert_eq!((e.precision, e.recall), (1.0, 1.0));
        let strict = edge_metrics(&line_mask(3), &line_mask(4), 0).unwrap();
        assert_eq!((strict.precision, strict.recall), (0.0, 0.0));
        assert_eq!(strict.f1, 0.0);
    }

    #[test]
    fn harmonic_mean_identity_on_reported_pair() {
        let f1 = f1_score(0.8391, 0.6613);
        assert!((f1 - 0.7397).abs() < 5e-5, "got {f1}");
    }

    #[test]
    fn precision_recall_duality_under_swap() {
        let mut a = BinaryMask::empty(10, 10);
        let mut b = BinaryMask::empty(10, 10);
        for i in 0..10 {
            a.set(i, (i * 3) % 10, true);
            b.set((i * 7) % 10, i, true);
        }
        for tol in [0, 1, 2] {
            let ab = edge_metrics(&a, &b, tol).unwrap();
            let ba = edge_metrics(&b, &a, tol).unwrap();
            assert!((ab.precision - ba.recall).abs() < 1e-15);
            assert!((ab.recall - ba.precision).abs() < 1e-15);
        }
    }

    #[test]
    fn distance_map_is_chessboard() {
        let mut m = BinaryMask::empty(5, 5);
        m.set(2, 2, true);
        let dt = chebyshev_distance_map(&m);
        for r in 0..5usize {
            for c in 0..5usize {
                let expect = r.abs_diff(2).max(c.abs_diff(2)) as u32;
                assert_eq!(dt[r * 5 + c], expect);
            }
        }
    }

    #[test]
    fn empty_conventions() {
        let empty = BinaryMask::empty(4, 4);
        let m = line_mask(1);
        let m4 = {
            let mut x = BinaryMask::empty(4, 4);
            for r in 0..4 {
                x.set(r, 1, true);
            }
            x
        };
        let _ = m;
        let e = edge_metrics(&empty, &m4, 2).unwrap();
        assert_eq!(e.precision, 0.0);
        let both = edge_metrics(&empty, &empty, 2).unwrap();
        assert_eq!((both.precision, both.recall, both.f1), (1.0, 1.0, 1.0));
    }
}
