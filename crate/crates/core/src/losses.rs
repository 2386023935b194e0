//! Scale-invariant log loss, the joint two-output loss and depth metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparse_tensor::DepthMap;

/// Variance-emphasis coefficient used for training.
pub const DEFAULT_LAMBDA: f64 = 0.85;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: DEFAULT_LAMBDA }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda must lie in [0, 1], got {}", self.lambda)));
        }
        Ok(())
    }
}

/// `mean(d^2) - lambda * mean(d)^2`, evaluated as
/// `var(d) + (1 - lambda) * mean(d)^2` so the result is never negative.
pub fn silog_from_diffs<T: Scalar>(diff: &[T], lambda: T) -> T {
    let n = T::of(diff.len() as f64);
    let mean = diff.iter().copied().sum::<T>() / n;
    let var = diff.iter().map(|&d| (d - mean) * (d - mean)).sum::<T>() / n;
    var + (T::one() - lambda) * mean * mean
}

fn log_diffs<T: Scalar>(gt: &DepthMap<T>, pred: &DepthMap<T>) -> Result<Vec<T>> {
    if gt.width() != pred.width() || gt.height() != pred.height() {
        return Err(Error::Shape(format!(
            "ground truth {}x{} vs prediction {}x{}",
            gt.width(),
            gt.height(),
            pred.width(),
            pred.height()
        )));
    }
    let mut diff = Vec::new();
    for (&d, &p) in gt.values().iter().zip(pred.values()) {
        if d > T::zero() {
            if !(p > T::zero()) {
                return Err(Error::Contract("silog needs strictly positive predictions".into()));
            }
            diff.push(d.ln() - p.ln());
        }
    }
    if diff.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }
    Ok(diff)
}

/// Scale-invariant log loss over the valid pixels of `gt`.
pub fn silog<T: Scalar>(gt: &DepthMap<T>, pred: &DepthMap<T>, lambda: T) -> Result<T> {
    Ok(silog_from_diffs(&log_diffs(gt, pred)?, lambda))
}

/// Sum of the prediction and completion losses against the same ground truth.
pub fn joint_loss<T: Scalar>(gt: &DepthMap<T>, pred: &DepthMap<T>, completed: &DepthMap<T>, lambda: T) -> Result<T> {
    Ok(silog(gt, pred, lambda)? + silog(gt, completed, lambda)?)
}

/// Evaluation metrics over valid ground-truth pixels, in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    /// `100 * sqrt(var(log d - log d_hat))`.
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "abs_rel,sq_rel,rmse,rmse_log,silog,d1,d2,d3";

    pub fn values(&self) -> [f64; 8] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.silog, self.delta1, self.delta2, self.delta3]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        MetricReport {
            abs_rel: v[0],
            sq_rel: v[1],
            rmse: v[2],
            rmse_log: v[3],
            silog: v[4],
            delta1: v[5],
            delta2: v[6],
            delta3: v[7],
        }
    }

    /// Comma-separated values without header.
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        for (i, v) in self.values().iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            write!(s, "{v}").expect("write to String");
        }
        s
    }

    /// Header plus one row.
    pub fn to_csv(&self) -> String {
        format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> Result<MetricReport> {
        if reports.is_empty() {
            return Err(Error::Contract("mean of zero metric reports".into()));
        }
        let mut acc = [0.0; 8];
        for r in reports {
            for (a, v) in acc.iter_mut().zip(r.values()) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= reports.len() as f64);
        Ok(MetricReport::from_values(acc))
    }
}

/// Standard depth metrics; ground-truth pixels deeper than `cap` are excluded.
pub fn eval_metrics<T: Scalar>(gt: &DepthMap<T>, pred: &DepthMap<T>, cap: f64) -> Result<MetricReport> {
    if gt.width() != pred.width() || gt.height() != pred.height() {
        return Err(Error::Shape("metric inputs differ in extent".into()));
    }
    let mut n = 0usize;
    let (mut abs_rel, mut sq_rel, mut se, mut se_log) = (0.0, 0.0, 0.0, 0.0);
    let mut logs = Vec::new();
    let mut hits = [0usize; 3];
    for (&d, &p) in gt.values().iter().zip(pred.values()) {
        let (d, p) = (d.as_f64(), p.as_f64());
        if !(d > 0.0 && d <= cap) {
            continue;
        }
        if !(p > 0.0) {
            return Err(Error::Contract("metrics need strictly positive predictions".into()));
        }
        n += 1;
        let err = d - p;
        abs_rel += err.abs() / d;
        sq_rel += err * err / d;
        se += err * err;
        let ld = d.ln() - p.ln();
        se_log += ld * ld;
        logs.push(ld);
        let ratio = (d / p).max(p / d);
        for (k, h) in hits.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *h += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let nf = n as f64;
    Ok(MetricReport {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: (se / nf).sqrt(),
        rmse_log: (se_log / nf).sqrt(),
        silog: 100.0 * silog_from_diffs(&logs, 1.0).sqrt(),
        delta1: hits[0] as f64 / nf,
        delta2: hits[1] as f64 / nf,
        delta3: hits[2] as f64 / nf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::E;

    fn dm(v: Vec<f64>) -> DepthMap<f64> {
        DepthMap::new(v.len(), 1, v).unwrap()
    }

    #[test]
    fn identical_maps_have_zero_loss() {
        let d = dm(vec![1.0, 2.5, 0.0, 7.0]);
        assert_eq!(silog(&d, &d, 0.85).unwrap(), 0.0);
    }

    #[test]
    fn hand_computed_loss() {
        // diffs [-1, 1]: mean square 1, mean 0
        let v = silog(&dm(vec![1.0, E]), &dm(vec![E, 1.0]), 0.85).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_ground_truth_errors() {
        assert!(matches!(silog(&dm(vec![0.0, -1.0]), &dm(vec![1.0, 1.0]), 0.85), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn nonpositive_prediction_errors() {
        assert!(matches!(silog(&dm(vec![1.0]), &dm(vec![0.0]), 0.85), Err(Error::Contract(_))));
    }

    #[test]
    fn joint_loss_decomposes() {
        let gt = dm(vec![1.0, 2.0, 3.0, 0.0]);
        let p = dm(vec![1.5, 1.0, 2.0, 9.0]);
        let c = dm(vec![1.1, 2.2, 2.9, 0.3]);
        let j = joint_loss(&gt, &p, &c, 0.85).unwrap();
        assert_eq!(j, silog(&gt, &p, 0.85).unwrap() + silog(&gt, &c, 0.85).unwrap());
        assert_eq!(joint_loss(&gt, &gt, &gt, 0.85).unwrap(), 0.0);
        assert_eq!(joint_loss(&gt, &p, &gt, 0.85).unwrap(), silog(&gt, &p, 0.85).unwrap());
    }

    #[test]
    fn perfect_prediction_metrics() {
        let d = dm(vec![1.0, 5.0, 20.0]);
        let r = eval_metrics(&d, &d, 80.0).unwrap();
        assert_eq!([r.abs_rel, r.sq_rel, r.rmse, r.rmse_log], [0.0; 4]);
        assert_eq!([r.delta1, r.delta2, r.delta3], [1.0; 3]);
    }

    #[test]
    fn delta_threshold_arithmetic() {
        let r = eval_metrics(&dm(vec![10.0]), &dm(vec![12.6]), 80.0).unwrap();
        assert_eq!(r.delta1, 0.0);
        assert_eq!(r.delta2, 1.0);
        assert_eq!(r.delta3, 1.0);
    }

    #[test]
    fn doubled_prediction_has_unit_abs_rel() {
        let d = dm(vec![1.0, 3.0, 7.5, 0.0]);
        let p = dm(d.values().iter().map(|x| 2.0 * x + if *x == 0.0 { 1.0 } else { 0.0 }).collect());
        assert_eq!(eval_metrics(&d, &p, 80.0).unwrap().abs_rel, 1.0);
    }

    #[test]
    fn cap_excludes_far_pixels() {
        let gt = dm(vec![10.0, 90.0]);
        let p = dm(vec![10.0, 1.0]);
        assert_eq!(eval_metrics(&gt, &p, 80.0).unwrap().rmse, 0.0);
        assert!(matches!(eval_metrics(&dm(vec![90.0]), &dm(vec![1.0]), 80.0), Err(Error::EmptyGroundTruth)));
    }

    #[test]
    fn csv_has_fixed_column_order() {
        let r = MetricReport::from_values([1.0, 2.0, 3.0, 4.0, 5.0, 0.5, 0.75, 1.0]);
        assert_eq!(r.to_csv(), "abs_rel,sq_rel,rmse,rmse_log,silog,d1,d2,d3\n1,2,3,4,5,0.5,0.75,1\n");
    }

    fn maps() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..40).prop_flat_map(|n| {
            (
                proptest::collection::vec(prop_oneof![1 => Just(0.0), 4 => 0.1f64..80.0], n),
                proptest::collection::vec(0.1f64..80.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn silog_nonnegative((gt, p) in maps(), lambda in 0.0f64..=1.0) {
            let gt = dm(gt);
            prop_assume!(gt.valid_count() > 0);
            prop_assert!(silog(&gt, &dm(p), lambda).unwrap() >= 0.0);
        }

        #[test]
        fn unit_lambda_is_scale_invariant((gt, p) in maps()) {
            let gt = dm(gt);
            prop_assume!(gt.valid_count() > 0);
            let base = silog(&gt, &dm(p.clone()), 1.0).unwrap();
            for c in [0.5, 2.0, 10.0] {
                let scaled = dm(p.iter().map(|x| c * x).collect());
                prop_assert!((silog(&gt, &scaled, 1.0).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn invalid_pixels_are_masked((gt, p) in maps(), noise in 0.1f64..50.0) {
            let gtm = dm(gt.clone());
            prop_assume!(gtm.valid_count() > 0);
            let perturbed: Vec<f64> = p.iter().zip(&gt).map(|(&x, &g)| if g > 0.0 { x } else { x + noise }).collect();
            let a = silog(&gtm, &dm(p.clone()), 0.85).unwrap();
            let b = silog(&gtm, &dm(perturbed.clone()), 0.85).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert_eq!(eval_metrics(&gtm, &dm(p), 80.0).unwrap(), eval_metrics(&gtm, &dm(perturbed), 80.0).unwrap());
        }

        #[test]
        fn deltas_ordered((gt, p) in maps()) {
            let gt = dm(gt);
            prop_assume!(gt.valid_count() > 0);
            let r = eval_metrics(&gt, &dm(p), 80.0).unwrap();
            prop_assert!(0.0 <= r.delta1 && r.delta1 <= r.delta2 && r.delta2 <= r.delta3 && r.delta3 <= 1.0);
        }
    }
}
