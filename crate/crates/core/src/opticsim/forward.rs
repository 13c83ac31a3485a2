use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};

use super::{SceneStack, LAYERS};
use crate::diffcore::Tensor;
use crate::error::{bail, Result};
use crate::image::{blur, gaussian_taps, normalize_minmax, to_image};
use crate::rng;

/// Parameters of the synthetic per-layer transport operator.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardConfig {
    /// Object-plane side length in pixels (object planes are square).
    pub object_side: usize,
    /// Measurement side length in pixels.
    pub meas_side: usize,
    pub seed: u64,
    /// Singular-value decay exponent `c` in `σ_k ∝ k^(−c)`.
    pub conditioning: f64,
    /// Standard deviation of additive Gaussian noise on the raw measurement.
    pub noise_sigma: f64,
    /// Transport kernel length scale per layer, in object pixels. Grows with depth.
    pub kernel_scale_px: [f64; LAYERS],
    /// Support radius of the blur applied to the white speckle field.
    pub speckle_radius_px: usize,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        ForwardConfig {
            object_side: 32,
            meas_side: 32,
            seed: 0,
            conditioning: 1.0,
            noise_sigma: 0.01,
            kernel_scale_px: [1.0, 2.0, 4.0],
            speckle_radius_px: 2,
        }
    }
}

/// Three nonnegative `M × N` mixing matrices, one per layer, with unit row sums.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    pub config: ForwardConfig,
    matrices: Vec<Vec<f64>>,
}

/// Orthonormal eigenbasis of the 1D Neumann path Laplacian (`DCT-II`).
fn neumann_basis(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut phi = vec![0.0; n * n];
    let mut lam = vec![0.0; n];
    for p in 0..n {
        let c = if p == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        lam[p] = 2.0 - 2.0 * (std::f64::consts::PI * p as f64 / n as f64).cos();
        for a in 0..n {
            phi[p * n + a] =
                c * (std::f64::consts::PI * p as f64 * (a as f64 + 0.5) / n as f64).cos();
        }
    }
    (phi, lam)
}

/// `(I + ℓ² L)^(−c)` on an `n × n` grid with the Neumann grid Laplacian `L`,
/// as a dense `n² × n²` matrix. Nonnegative for every `c > 0` because `L`
/// generates a positivity-preserving heat semigroup.
fn screened_kernel(n: usize, scale: f64, c: f64) -> Vec<f64> {
    let (phi, lam) = neumann_basis(n);
    let f = |l: f64| (1.0 + scale * scale * l).powf(-c);
    // h[p][(b, d)] = Σ_q f(λp + λq) φq(b) φq(d)
    let mut h = vec![0.0; n * n * n];
    for p in 0..n {
        for q in 0..n {
            let w = f(lam[p] + lam[q]);
            for b in 0..n {
                let wb = w * phi[q * n + b];
                let row = &mut h[p * n * n + b * n..p * n * n + (b + 1) * n];
                for (d, acc) in row.iter_mut().enumerate() {
                    *acc += wb * phi[q * n + d];
                }
            }
        }
    }
    // pp[(a, c), p] = φp(a) φp(c)
    let mut pp = vec![0.0; n * n * n];
    for a in 0..n {
        for cc in 0..n {
            for p in 0..n {
                pp[(a * n + cc) * n + p] = phi[p * n + a] * phi[p * n + cc];
            }
        }
    }
    let nn = n * n;
    let mut ac_bd = vec![0.0; nn * nn];
    <f64 as crate::diffcore::Scalar>::gemm(nn, n, nn, &pp, false, &h, false, 0.0, &mut ac_bd);
    // Reorder [(a, c), (b, d)] into [(a, b), (c, d)].
    let mut k = vec![0.0; nn * nn];
    for a in 0..n {
        for cc in 0..n {
            let src = &ac_bd[(a * n + cc) * nn..(a * n + cc + 1) * nn];
            for b in 0..n {
                for d in 0..n {
                    k[(a * n + b) * nn + cc * n + d] = src[b * n + d].max(0.0);
                }
            }
        }
    }
    k
}

/// Bilinear resampling weights from an `n × n` grid onto an `m × m` grid.
fn resample_taps(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let axis = |u: usize| -> [(usize, f64); 2] {
        let pos = ((u as f64 + 0.5) * n as f64 / m as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        let t = pos - lo as f64;
        [(lo, 1.0 - t), (hi, t)]
    };
    let mut out = Vec::with_capacity(m * m);
    for u in 0..m {
        for v in 0..m {
            let mut taps = Vec::with_capacity(4);
            for (r, wr) in axis(u) {
                for (c, wc) in axis(v) {
                    if wr * wc > 0.0 {
                        taps.push((r * n + c, wr * wc));
                    }
                }
            }
            out.push(taps);
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 1.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Pearson correlation of two flattened buffers (1 for a constant buffer).
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    pearson(a, b)
}

/// Maximum allowed correlation between two layers' flattened matrices.
pub const MAX_MATRIX_CORRELATION: f64 = 0.99;

impl ForwardModel {
    pub fn new(config: ForwardConfig) -> Result<Self> {
        let (n, m) = (config.object_side, config.meas_side);
        if n == 0 || m == 0 {
            bail!(Config, "forward model extents must be at least 1");
        }
        if !(config.noise_sigma >= 0.0) || !(config.conditioning >= 0.0) {
            bail!(Config, "noise_sigma and conditioning must be nonnegative");
        }
        if config.kernel_scale_px.iter().any(|&s| !(s > 0.0)) {
            bail!(Config, "kernel scales must be positive");
        }
        let (nn, mm) = (n * n, m * m);
        let taps = (m != n).then(|| resample_taps(n, m));
        let speckle_taps = gaussian_taps(
            config.speckle_radius_px.max(1) as f64 / 2.0,
            config.speckle_radius_px,
        );
        let mut matrices = Vec::with_capacity(LAYERS);
        for (z, &scale) in config.kernel_scale_px.iter().enumerate() {
            let k = screened_kernel(n, scale, config.conditioning);
            let mut a = match &taps {
                None => k,
                Some(taps) => {
                    let mut a = vec![0.0; mm * nn];
                    for (i, t) in taps.iter().enumerate() {
                        for &(src, w) in t {
                            for j in 0..nn {
                                a[i * nn + j] += w * k[src * nn + j];
                            }
                        }
                    }
                    a
                }
            };
            let mut rng = rng::stream(config.seed, "speckle", z as u64);
            let mut field = vec![0.0; mm];
            for j in 0..nn {
                for v in field.iter_mut() {
                    *v = Exp1.sample(&mut rng);
                }
                let s = blur(&field, m, m, &speckle_taps);
                for i in 0..mm {
                    a[i * nn + j] *= s[i];
                }
            }
            for row in a.chunks_exact_mut(nn) {
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|v| *v /= sum);
                } else {
                    // Only reachable for degenerate configs; keep rows stochastic.
                    row.iter_mut().for_each(|v| *v = 1.0 / nn as f64);
                }
            }
            matrices.push(a);
        }
        for i in 0..LAYERS {
            for j in i + 1..LAYERS {
                let r = pearson(&matrices[i], &matrices[j]);
                if r >= MAX_MATRIX_CORRELATION {
                    bail!(
                        Generation,
                        "layers {} and {} are not distinguishable (matrix correlation {r:.4})",
                        i + 1,
                        j + 1
                    );
                }
            }
        }
        Ok(ForwardModel { config, matrices })
    }

    pub fn n_object(&self) -> usize {
        self.config.object_side * self.config.object_side
    }

    pub fn n_meas(&self) -> usize {
        self.config.meas_side * self.config.meas_side
    }

    /// Row-major `M × N` matrix of layer `z ∈ {1, 2, 3}`.
    pub fn matrix(&self, z: usize) -> &[f64] {
        assert!((1..=LAYERS).contains(&z), "layer {z} out of range");
        &self.matrices[z - 1]
    }

    fn check_scene(&self, scene: &SceneStack) -> Result<()> {
        let side = self.config.object_side;
        if scene.side() != side {
            bail!(
                Dimension,
                "scene extent {} does not match forward model extent {side}",
                scene.side()
            );
        }
        Ok(())
    }

    /// `Σ_z A_z · vec(x_z)` plus noise when `noise_seed` is given; not normalized.
    pub fn simulate_raw(&self, scene: &SceneStack, noise_seed: Option<u64>) -> Result<Vec<f64>> {
        self.check_scene(scene)?;
        let (nn, mm) = (self.n_object(), self.n_meas());
        let mut y = vec![0.0; mm];
        for z in 1..=LAYERS {
            let x = scene.layer(z).data();
            if x.iter().all(|&v| v == 0.0) {
                continue;
            }
            let a = self.matrix(z);
            for (i, yi) in y.iter_mut().enumerate() {
                let row = &a[i * nn..(i + 1) * nn];
                let mut acc = 0.0;
                for (&aij, &xj) in row.iter().zip(x) {
                    acc += aij * xj as f64;
                }
                *yi += acc;
            }
        }
        if let Some(seed) = noise_seed {
            self.add_noise(&mut y, seed);
        }
        Ok(y)
    }

    fn add_noise(&self, y: &mut [f64], seed: u64) {
        if self.config.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.config.noise_sigma).expect("valid sigma");
            let mut rng = rng::stream(seed, "noise", 0);
            for v in y.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    /// Measured image normalized to `[0, 1]` by its own range.
    pub fn simulate_measurement(
        &self,
        scene: &SceneStack,
        noise_seed: Option<u64>,
    ) -> Result<Tensor<f32>> {
        let mut y = self.simulate_raw(scene, noise_seed)?;
        normalize_minmax(&mut y);
        let m = self.config.meas_side;
        Ok(to_image(m, m, &y))
    }

    /// Scans the unit basis of layer `z` and stacks the measurements as columns.
    ///
    /// Without noise the result equals `A_z` bit for bit.
    pub fn calibration_scan(&self, z: usize, noise_seed: Option<u64>) -> Result<CalibrationScan> {
        if !(1..=LAYERS).contains(&z) {
            bail!(Argument, "layer {z} out of range 1..=3");
        }
        let side = self.config.object_side;
        let (nn, mm) = (self.n_object(), self.n_meas());
        let mut matrix = vec![0.0; mm * nn];
        let mut scene = SceneStack::empty(side);
        for j in 0..nn {
            scene.layer_mut(z).data_mut()[j] = 1.0;
            let noise = noise_seed.map(|s| rng::stream(s, "calibration", j as u64).random::<u64>());
            let col = self.simulate_raw(&scene, noise)?;
            scene.layer_mut(z).data_mut()[j] = 0.0;
            for (i, v) in col.into_iter().enumerate() {
                matrix[i * nn + j] = v;
            }
        }
        Ok(CalibrationScan {
            layer: z,
            rows: mm,
            cols: nn,
            scanned: nn,
            matrix,
        })
    }
}

/// Result of scanning every object pixel of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationScan {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
    /// Number of basis images measured.
    pub scanned: usize,
    /// Row-major `rows × cols` calibration matrix.
    pub matrix: Vec<f64>,
}

/// Builds a model from pixel counts; both must be perfect squares.
pub fn make_forward_model(
    n_object: usize,
    n_meas: usize,
    seed: u64,
    conditioning: f64,
    noise_sigma: f64,
) -> Result<ForwardModel> {
    let side = |n: usize| -> Result<usize> {
        let s = (n as f64).sqrt().round() as usize;
        if s * s != n || n == 0 {
            bail!(Config, "{n} pixels is not a square image");
        }
        Ok(s)
    };
    ForwardModel::new(ForwardConfig {
        object_side: side(n_object)?,
        meas_side: side(n_meas)?,
        seed,
        conditioning,
        noise_sigma,
        ..ForwardConfig::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, conditioning: f64) -> ForwardModel {
        ForwardModel::new(ForwardConfig {
            object_side: 8,
            meas_side: 8,
            seed,
            conditioning,
            ..ForwardConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn screened_kernel_is_nonnegative_and_symmetric() {
        let n = 6;
        let k = screened_kernel(n, 2.0, 0.7);
        let nn = n * n;
        for i in 0..nn {
            for j in 0..nn {
                assert!(k[i * nn + j] >= 0.0);
                assert!((k[i * nn + j] - k[j * nn + i]).abs() < 1e-12);
            }
        }
        // Constant vector is the λ = 0 eigenvector: rows sum to f(0) = 1.
        for row in k.chunks(nn) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_and_stochastic_rows() {
        let a = small(4, 1.0);
        let b = small(4, 1.0);
        for z in 1..=3 {
            assert!(a
                .matrix(z)
                .iter()
                .zip(b.matrix(z))
                .all(|(x, y)| x.to_bits() == y.to_bits()));
            for row in a.matrix(z).chunks(64) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        let c = small(5, 1.0);
        assert_ne!(a.matrix(1), c.matrix(1));
    }

    #[test]
    fn resampled_measurement_grid() {
        let m = ForwardModel::new(ForwardConfig {
            object_side: 8,
            meas_side: 12,
            ..ForwardConfig::default()
        })
        .unwrap();
        assert_eq!(m.matrix(2).len(), 144 * 64);
        let scene = SceneStack::empty(8);
        assert_eq!(
            m.simulate_measurement(&scene, None).unwrap().shape(),
            &[12, 12]
        );
    }

    #[test]
    fn zero_scene_and_single_pixel() {
        let m = small(1, 1.0);
        let scene = SceneStack::empty(8);
        assert!(m
            .simulate_raw(&scene, None)
            .unwrap()
            .iter()
            .all(|&v| v == 0.0));
        assert!(m
            .simulate_measurement(&scene, None)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let mut s = SceneStack::empty(8);
        s.layer_mut(2).data_mut()[13] = 1.0;
        let y = m.simulate_raw(&s, None).unwrap();
        let a = m.matrix(2);
        for (i, &v) in y.iter().enumerate() {
            assert_eq!(v, a[i * 64 + 13]);
        }
        assert!(m.simulate_raw(&SceneStack::empty(9), None).is_err());
    }

    #[test]
    fn calibration_recovers_matrix_exactly() {
        let m = small(2, 1.0);
        let scan = m.calibration_scan(3, None).unwrap();
        assert_eq!(scan.scanned, 64);
        assert!(scan
            .matrix
            .iter()
            .zip(m.matrix(3))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(m.calibration_scan(4, None).is_err());
    }

    #[test]
    fn noisy_calibration_error_matches_sigma() {
        let m = ForwardModel::new(ForwardConfig {
            object_side: 10,
            meas_side: 10,
            noise_sigma: 0.05,
            ..ForwardConfig::default()
        })
        .unwrap();
        let scan = m.calibration_scan(1, Some(9)).unwrap();
        let a = m.matrix(1);
        let n = 100;
        let mut stds = Vec::new();
        for j in 0..n {
            let errs: Vec<f64> = (0..100)
                .map(|i| scan.matrix[i * n + j] - a[i * n + j])
                .collect();
            let mean = errs.iter().sum::<f64>() / 100.0;
            let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 99.0;
            stds.push(var.sqrt());
        }
        let avg = stds.iter().sum::<f64>() / n as f64;
        assert!((avg - 0.05).abs() < 0.005, "{avg}");
    }

    #[test]
    fn layers_are_distinct() {
        let m = small(3, 1.0);
        for (i, j) in [(1, 2), (1, 3), (2, 3)] {
            assert!(pearson(m.matrix(i), m.matrix(j)) < MAX_MATRIX_CORRELATION);
        }
    }

    fn numerical_rank(conditioning: f64) -> usize {
        let m = ForwardModel::new(ForwardConfig {
            object_side: 16,
            meas_side: 16,
            conditioning,
            ..ForwardConfig::default()
        })
        .unwrap();
        let a = nalgebra::DMatrix::from_row_slice(256, 256, m.matrix(2));
        let sv = a.singular_values();
        let top = sv.max();
        sv.iter().filter(|&&s| s > 1e-3 * top).count()
    }

    #[test]
    fn faster_decay_lowers_numerical_rank() {
        let (slow, fast) = (numerical_rank(0.5), numerical_rank(2.0));
        assert!(slow > fast, "rank {slow} vs {fast}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn superposition(seed in 0u64..1000, z1 in 1usize..=3, z2 in 1usize..=3) {
            let m = small(0, 1.0);
            let mut r = crate::rng::stream(seed, "test", 0);
            let mut a = SceneStack::empty(8);
            let mut b = SceneStack::empty(8);
            for v in a.layer_mut(z1).data_mut() { *v = r.random::<f32>(); }
            for v in b.layer_mut(z2).data_mut() { *v = r.random::<f32>(); }
            let mut ab = a.clone();
            for z in 1..=3 {
                let sum: Vec<f32> = a.layer(z).data().iter().zip(b.layer(z).data()).map(|(x, y)| x + y).collect();
                ab.layer_mut(z).data_mut().copy_from_slice(&sum);
            }
            let ya = m.simulate_raw(&a, None).unwrap();
            let yb = m.simulate_raw(&b, None).unwrap();
            let yab = m.simulate_raw(&ab, None).unwrap();
            for i in 0..64 {
                proptest::prop_assert!((yab[i] - ya[i] - yb[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn pixel_counts_must_be_square() {
        assert!(make_forward_model(63, 64, 0, 1.0, 0.0).is_err());
        let m = make_forward_model(64, 64, 0, 1.0, 0.0).unwrap();
        assert_eq!(m.n_object(), 64);
    }
}
