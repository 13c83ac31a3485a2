use crate::diffcore::{Scalar, Tensor};
use crate::error::{bail, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Window and stabilizing constants. Reports print these alongside scores.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig {
            window: SSIM_WINDOW,
            k1: SSIM_K1,
            k2: SSIM_K2,
            dynamic_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn describe(&self) -> String {
        format!(
            "uniform {w}x{w} window, valid positions, population statistics, K1={}, K2={}, L={}",
            self.k1,
            self.k2,
            self.dynamic_range,
            w = self.window
        )
    }
}

pub(crate) fn plane_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [h, w] | [h, w, 1] => Ok((h, w)),
        _ => bail!(
            Dimension,
            "expected a single-plane image, got shape {shape:?}"
        ),
    }
}

/// Summed-area table with a zero border row and column.
struct Integral {
    w: usize,
    table: Vec<f64>,
}

impl Integral {
    fn new(h: usize, w: usize, f: impl Fn(usize) -> f64) -> Self {
        let stride = w + 1;
        let mut table = vec![0.0; (h + 1) * stride];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += f(y * w + x);
                table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + row;
            }
        }
        Integral { w, table }
    }

    fn window(&self, y: usize, x: usize, n: usize) -> f64 {
        let s = self.w + 1;
        let t = &self.table;
        t[(y + n) * s + x + n] - t[y * s + x + n] - t[(y + n) * s + x] + t[y * s + x]
    }
}

/// Mean structural similarity over all valid window positions.
///
/// Uses the default [`SsimConfig`]; images smaller than the window fall back
/// to a single window covering the whole image.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, cfg: &SsimConfig) -> Result<f64> {
    if a.shape() != b.shape() {
        bail!(Dimension, "ssim: {:?} vs {:?}", a.shape(), b.shape());
    }
    let (h, w) = plane_dims(a.shape())?;
    let n = cfg.window.min(h).min(w);
    let (ad, bd) = (a.data(), b.data());
    let sa = Integral::new(h, w, |i| ad[i].as_f64());
    let sb = Integral::new(h, w, |i| bd[i].as_f64());
    let saa = Integral::new(h, w, |i| ad[i].as_f64() * ad[i].as_f64());
    let sbb = Integral::new(h, w, |i| bd[i].as_f64() * bd[i].as_f64());
    let sab = Integral::new(h, w, |i| ad[i].as_f64() * bd[i].as_f64());
    let c1 = (cfg.k1 * cfg.dynamic_range).powi(2);
    let c2 = (cfg.k2 * cfg.dynamic_range).powi(2);
    let count = (n * n) as f64;
    let mut total = 0.0;
    let mut windows = 0usize;
    for y in 0..=h - n {
        for x in 0..=w - n {
            let mu_a = sa.window(y, x, n) / count;
            let mu_b = sb.window(y, x, n) / count;
            let var_a = saa.window(y, x, n) / count - mu_a * mu_a;
            let var_b = sbb.window(y, x, n) / count - mu_b * mu_b;
            let cov = sab.window(y, x, n) / count - mu_a * mu_b;
            let num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
            let den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
            total += num / den;
            windows += 1;
        }
    }
    Ok(total / windows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-window evaluation, independent of the summed-area tables.
    fn ssim_direct(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
        let n = 7;
        let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for y in 0..=h - n {
            for x in 0..=w - n {
                let idx: Vec<usize> = (0..n)
                    .flat_map(|dy| (0..n).map(move |dx| (y + dy) * w + x + dx))
                    .collect();
                let m = idx.len() as f64;
                let ma = idx.iter().map(|&i| a[i]).sum::<f64>() / m;
                let mb = idx.iter().map(|&i| b[i]).sum::<f64>() / m;
                let va = idx.iter().map(|&i| (a[i] - ma).powi(2)).sum::<f64>() / m;
                let vb = idx.iter().map(|&i| (b[i] - mb).powi(2)).sum::<f64>() / m;
                let cv = idx.iter().map(|&i| (a[i] - ma) * (b[i] - mb)).sum::<f64>() / m;
                total += (2.0 * ma * mb + c1) * (2.0 * cv + c2)
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn identical_images_score_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::from_fn(&[16, 16], |_| rng.random());
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn distinct_constants_below_one() {
        let a = Tensor::<f32>::full(&[10, 10], 0.2);
        let b = Tensor::<f32>::full(&[10, 10], 0.7);
        assert!(ssim(&a, &b).unwrap() < 1.0);
    }

    #[test]
    fn matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let (h, w) = (rng.random_range(7..20), rng.random_range(7..20));
            let a: Vec<f64> = (0..h * w).map(|_| rng.random()).collect();
            let b: Vec<f64> = a
                .iter()
                .map(|v| (v * 0.6 + rng.random::<f64>() * 0.4))
                .collect();
            let expect = ssim_direct(&a, &b, h, w);
            let got = ssim(
                &Tensor::new(&[h, w], a).unwrap(),
                &Tensor::new(&[h, w], b).unwrap(),
            )
            .unwrap();
            assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
        }
    }

    #[test]
    fn symmetric_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Tensor::<f64>::from_fn(&[12, 9], |_| rng.random());
            let b = Tensor::<f64>::from_fn(&[12, 9], |_| rng.random());
            let ab = ssim(&a, &b).unwrap();
            assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
            assert!(ab <= 1.0);
        }
    }

    #[test]
    fn extent_mismatch() {
        let a = Tensor::<f32>::zeros(&[8, 8]);
        assert!(ssim(&a, &Tensor::zeros(&[8, 9])).is_err());
    }
}
