use super::ssim::plane_dims;
use crate::diffcore::{Scalar, Tensor};
use crate::error::{bail, Result};

/// Full width at half maximum of one image row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Fwhm {
    pub px: f64,
    pub um: f64,
}

/// Width of the single peak in `center_row`, found by linear interpolation
/// of the half-maximum crossings. `fov_um` spans the full image width.
pub fn fwhm_diameter<T: Scalar>(image: &Tensor<T>, center_row: usize, fov_um: f64) -> Result<Fwhm> {
    let (h, w) = plane_dims(image.shape())?;
    if center_row >= h {
        bail!(Argument, "row {center_row} outside image of height {h}");
    }
    let row: Vec<f64> = image.data()[center_row * w..(center_row + 1) * w]
        .iter()
        .map(|v| v.as_f64())
        .collect();
    let (peak, max) =
        row.iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            });
    let min = row.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 || max - min <= f64::EPSILON * max.abs() {
        bail!(Measurement, "row {center_row} is flat; no peak to measure");
    }
    let half = max / 2.0;
    let runs = row
        .iter()
        .zip(std::iter::once(&f64::NEG_INFINITY).chain(row.iter()))
        .filter(|(&v, &prev)| v >= half && prev < half)
        .count();
    if runs != 1 {
        bail!(
            Measurement,
            "row {center_row} has {runs} separate peaks above half maximum"
        );
    }
    let Some(l) = (0..peak).rev().find(|&i| row[i] < half) else {
        bail!(
            Measurement,
            "peak in row {center_row} touches the left border"
        );
    };
    let Some(r) = (peak + 1..w).find(|&i| row[i] < half) else {
        bail!(
            Measurement,
            "peak in row {center_row} touches the right border"
        );
    };
    let left = l as f64 + (half - row[l]) / (row[l + 1] - row[l]);
    let right = (r - 1) as f64 + (row[r - 1] - half) / (row[r - 1] - row[r]);
    let px = right - left;
    Ok(Fwhm {
        px,
        um: px * fov_um / w as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row_image(values: Vec<f64>) -> Tensor<f64> {
        let w = values.len();
        Tensor::new(&[1, w], values).unwrap()
    }

    #[test]
    fn triangle_width_is_exact() {
        let row: Vec<f64> = (0..21)
            .map(|i| (1.0 - (i as f64 - 10.0).abs() / 4.0).max(0.0))
            .collect();
        let f = fwhm_diameter(&row_image(row), 0, 21.0).unwrap();
        assert!((f.px - 4.0).abs() < 1e-12);
        assert!((f.um - 4.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_width_against_dense_sampling() {
        let s = 2.0;
        let c = 15.3;
        let g = |x: f64| (-(x - c) * (x - c) / (2.0 * s * s)).exp();
        // Dense oracle: scan at 1e-4 px for the half-level crossings.
        let xs: Vec<f64> = (0..320_000).map(|i| i as f64 * 1e-4).collect();
        let above: Vec<&f64> = xs.iter().filter(|&&x| g(x) >= 0.5).collect();
        let dense = *above.last().unwrap() - *above[0];
        assert!((dense - 2.3548 * s).abs() < 1e-3);
        let row: Vec<f64> = (0..32).map(|i| g(i as f64)).collect();
        let f = fwhm_diameter(&row_image(row), 0, 200.0).unwrap();
        assert!((f.px - dense).abs() / dense < 0.05, "{} vs {dense}", f.px);
        assert!((f.um - f.px * 6.25).abs() < 1e-12);
    }

    #[test]
    fn rejects_flat_and_double_peaks() {
        assert!(matches!(
            fwhm_diameter(&row_image(vec![0.3; 16]), 0, 1.0),
            Err(crate::Error::Measurement(_))
        ));
        let mut two = vec![0.0; 20];
        two[5] = 1.0;
        two[14] = 0.9;
        assert!(matches!(
            fwhm_diameter(&row_image(two), 0, 1.0),
            Err(crate::Error::Measurement(_))
        ));
    }
}
