//! Pose-error AUC: normalized area under the cumulative error curve.

use serde::{Deserialize, Serialize};

/// Area under the recall-vs-error curve up to each threshold, as a
/// percentage. Failed pairs should be entered as 180°.
pub fn auc(errors_deg: &[f64], thresholds_deg: &[f64]) -> Vec<f64> {
    if errors_deg.is_empty() {
        return vec![0.0; thresholds_deg.len()];
    }
    let mut sorted: Vec<f64> = errors_deg.iter().map(|e| e.min(180.0)).collect();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    // Piecewise-linear recall curve through (0,0), (e_i, i/n).
    let mut out = Vec::with_capacity(thresholds_deg.len());
    for &t in thresholds_deg {
        let mut area = 0.0;
        let mut prev_e = 0.0;
        let mut prev_r = 0.0;
        for (i, &e) in sorted.iter().enumerate() {
            let r = (i + 1) as f64 / n;
            if e >= t {
                break;
            }
            area += (e - prev_e) * (prev_r + r) / 2.0;
            prev_e = e;
            prev_r = r;
        }
        area += (t - prev_e) * prev_r;
        out.push(100.0 * area / t);
    }
    out
}

/// Multi-view evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AucReport {
    pub thresholds_deg: Vec<f64>,
    pub transl_auc: Vec<f64>,
    pub rot_auc: Vec<f64>,
    pub per_pair: Vec<PairErrorRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairErrorRecord {
    pub tuple: usize,
    pub a: usize,
    pub b: usize,
    pub rot_deg: f64,
    pub transl_deg: f64,
}

pub const DEFAULT_THRESHOLDS: [f64; 3] = [5.0, 10.0, 20.0];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_errors_give_full_auc() {
        let a = auc(&[0.0, 0.0, 0.0], &[5.0, 10.0, 20.0]);
        for x in a {
            assert!((x - 100.0).abs() < 1e-12);
        }
    }

    #[test]
    fn all_failures_give_zero() {
        let a = auc(&[25.0, 180.0, 90.0], &[5.0, 10.0, 20.0]);
        for x in a {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn monotone_in_threshold() {
        let errors = [1.0, 3.0, 8.0, 15.0, 40.0, 2.0, 11.0];
        let a = auc(&errors, &[5.0, 10.0, 20.0]);
        assert!(a[0] <= a[1] + 1e-12 && a[1] <= a[2] + 1e-12);
    }

    #[test]
    fn permutation_invariant() {
        let e1 = [4.0, 9.0, 1.0, 16.0, 2.5];
        let mut e2 = e1;
        e2.reverse();
        assert_eq!(auc(&e1, &[10.0]), auc(&e2, &[10.0]));
    }

    // Brute-force oracle: integrate the piecewise-linear recall curve on a
    // dense grid that includes all breakpoints.
    fn auc_oracle(errors: &[f64], t: f64) -> f64 {
        let mut sorted: Vec<f64> = errors.to_vec();
        sorted.sort_by(|a, b| a.total_cmp(b));
        let n = sorted.len() as f64;
        let recall_at = |e: f64| -> f64 {
            // Linear interpolation through (0,0) and the (e_i, (i+1)/n) with
            // e_i below the threshold; constant afterwards (no further pair
            // is recalled between the last error and the threshold).
            let mut prev = (0.0, 0.0);
            for (i, &ei) in sorted.iter().enumerate() {
                if ei >= t {
                    break;
                }
                let pt = (ei, (i + 1) as f64 / n);
                if e <= ei {
                    if pt.0 == prev.0 {
                        return pt.1;
                    }
                    return prev.1 + (e - prev.0) / (pt.0 - prev.0) * (pt.1 - prev.1);
                }
                prev = pt;
            }
            prev.1
        };
        // Integration grid: breakpoints plus fine uniform samples.
        let mut grid: Vec<f64> = sorted.iter().copied().filter(|&e| e < t).collect();
        for i in 0..=20_000 {
            grid.push(t * i as f64 / 20_000.0);
        }
        grid.push(t);
        grid.sort_by(|a, b| a.total_cmp(b));
        grid.dedup();
        let mut area = 0.0;
        for w in grid.windows(2) {
            area += (w[1] - w[0]) * (recall_at(w[0]) + recall_at(w[1])) / 2.0;
        }
        100.0 * area / t
    }

    #[test]
    fn equals_brute_force_integration() {
        let errors = [3.0, 1.0, 7.5, 12.0, 0.5, 9.9, 30.0, 4.4, 6.1];
        for t in [5.0, 10.0, 20.0] {
            let fast = auc(&errors, &[t])[0];
            let slow = auc_oracle(&errors, t);
            assert!(
                (fast - slow).abs() < 1e-9,
                "threshold {t}: {fast} vs {slow}"
            );
        }
    }
}
