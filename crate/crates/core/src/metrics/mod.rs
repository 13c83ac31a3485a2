//! Image-quality and classification metrics, bead resolution, and the
//! timing benchmark table.

mod bench;
mod fwhm;
mod ssim;

pub use bench::{bench, median_duration, BenchModels, BenchRow, BenchTable, MethodKind, COLUMNS};
pub use fwhm::{fwhm_diameter, Fwhm};
pub use ssim::{ssim, SsimConfig, SSIM_K1, SSIM_K2, SSIM_WINDOW};

use crate::diffcore::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Mean absolute error.
pub fn mae<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Dimension, "mae: {:?} vs {:?}", a.shape(), b.shape());
    }
    let total: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .sum();
    Ok(total / a.len() as f64)
}

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        bail!(Argument, "accuracy of an empty prediction set");
    }
    if predictions.len() != labels.len() {
        bail!(
            Argument,
            "accuracy: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        );
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Aggregate of per-sample image metrics over a test set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ssim: f64,
    pub mae: f64,
    pub accuracy: Option<f64>,
    pub n_samples: usize,
    pub per_sample_ssim: Vec<f64>,
    pub per_sample_mae: Vec<f64>,
}

impl MetricReport {
    pub fn from_samples(ssim: Vec<f64>, mae: Vec<f64>) -> Self {
        assert_eq!(ssim.len(), mae.len());
        let n = ssim.len();
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        MetricReport {
            ssim: mean(&ssim),
            mae: mean(&mae),
            accuracy: None,
            n_samples: n,
            per_sample_ssim: ssim,
            per_sample_mae: mae,
        }
    }

    pub fn std_ssim(&self) -> f64 {
        std_dev(&self.per_sample_ssim, self.ssim)
    }

    pub fn std_mae(&self) -> f64 {
        std_dev(&self.per_sample_mae, self.mae)
    }

    /// `key=value` lines, stable across runs.
    pub fn to_kv(&self, prefix: &str) -> String {
        let mut s = format!("{prefix}n_samples={}\n", self.n_samples);
        if !self.per_sample_ssim.is_empty() {
            s.push_str(&format!(
                "{prefix}ssim={:.6}\n{prefix}ssim_std={:.6}\n{prefix}mae={:.6}\n{prefix}mae_std={:.6}\n",
                self.ssim,
                self.std_ssim(),
                self.mae,
                self.std_mae()
            ));
        }
        if let Some(acc) = self.accuracy {
            s.push_str(&format!("{prefix}accuracy={acc:.6}\n"));
        }
        s
    }
}

fn std_dev(v: &[f64], mean: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mae_basics() {
        let z = Tensor::<f32>::zeros(&[4, 4]);
        let o = Tensor::<f32>::full(&[4, 4], 1.0);
        assert_eq!(mae(&z, &z).unwrap(), 0.0);
        assert_eq!(mae(&z, &o).unwrap(), 1.0);
        assert!(mae(&z, &Tensor::zeros(&[4, 3])).is_err());
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 3, 1], &[1, 2, 3]).unwrap(), 0.0);
        let labels = vec![1usize; 1000];
        let mut preds = labels.clone();
        preds[0] = 2;
        preds[1] = 3;
        assert!((accuracy(&preds, &labels).unwrap() - 0.998).abs() < 1e-12);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn report_mean_is_exact() {
        let r = MetricReport::from_samples(vec![0.5, 0.75, 1.0], vec![0.1, 0.2, 0.3]);
        assert_eq!(r.ssim, (0.5 + 0.75 + 1.0) / 3.0);
        assert_eq!(r.mae, (0.1 + 0.2 + 0.3) / 3.0);
        assert_eq!(r.n_samples, 3);
    }

    fn image() -> impl Strategy<Value = Vec<f32>> {
        proptest::collection::vec(0.0f32..1.0, 64)
    }

    proptest! {
        #[test]
        fn mae_symmetric_and_triangle(a in image(), b in image(), c in image()) {
            let (a, b, c) = (
                Tensor::new(&[8, 8], a).unwrap(),
                Tensor::new(&[8, 8], b).unwrap(),
                Tensor::new(&[8, 8], c).unwrap(),
            );
            prop_assert_eq!(mae(&a, &b).unwrap(), mae(&b, &a).unwrap());
            prop_assert!(mae(&a, &c).unwrap() <= mae(&a, &b).unwrap() + mae(&b, &c).unwrap() + 1e-12);
        }
    }
}
