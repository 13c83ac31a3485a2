//! Small helpers shared by the simulator and the reconstructors.

use crate::diffcore::Tensor;

/// Rescales to `[0, 1]` by the buffer's own min and max. A constant buffer
/// (including all-zero) maps to all zeros.
pub fn normalize_minmax(values: &mut [f64]) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = hi - lo;
    if !(range > 0.0) || !range.is_finite() {
        values.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    for v in values.iter_mut() {
        *v = ((*v - lo) / range).clamp(0.0, 1.0);
    }
}

pub fn to_image(side_h: usize, side_w: usize, values: &[f64]) -> Tensor<f32> {
    Tensor::new(
        &[side_h, side_w],
        values.iter().map(|&v| v as f32).collect(),
    )
    .expect("image extents match buffer")
}

pub fn to_f64(t: &Tensor<f32>) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// Normalized 1D Gaussian taps for `sigma`, truncated at `radius`.
pub fn gaussian_taps(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable blur; taps falling outside the image are dropped and the
/// remaining weights renormalized, so a constant image is preserved.
pub fn blur(values: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let r = (taps.len() / 2) as isize;
    let pass = |src: &[f64], along_rows: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..h {
            for x in 0..w {
                let (mut acc, mut wsum) = (0.0, 0.0);
                for (k, &t) in taps.iter().enumerate() {
                    let d = k as isize - r;
                    let (yy, xx) = if along_rows {
                        (y as isize, x as isize + d)
                    } else {
                        (y as isize + d, x as isize)
                    };
                    if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                        continue;
                    }
                    acc += t * src[yy as usize * w + xx as usize];
                    wsum += t;
                }
                out[y * w + x] = acc / wsum;
            }
        }
        out
    };
    let tmp = pass(values, true);
    pass(&tmp, false)
}
