//! Truncated-SVD pseudoinverse reconstruction from calibration data.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::diffcore::Tensor;
use crate::error::{bail, Error, Result};
use crate::image::{normalize_minmax, to_f64};
use crate::kv::KvMap;
use crate::opticsim::CalibrationScan;
use crate::pipeline::container;

pub const DEFAULT_ENERGY: f64 = 0.99;
const MAGIC: &[u8; 4] = b"CCML";
const VERSION: u8 = 1;

/// How many singular triplets to keep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum RankPolicy {
    /// Smallest `k` whose leading `σ²` carry at least this fraction of the total.
    Energy(f64),
    Fixed(usize),
}

impl Default for RankPolicy {
    fn default() -> Self {
        RankPolicy::Energy(DEFAULT_ENERGY)
    }
}

impl fmt::Display for RankPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RankPolicy::Energy(t) => write!(f, "energy:{t}"),
            RankPolicy::Fixed(k) => write!(f, "fixed:{k}"),
        }
    }
}

impl FromStr for RankPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "rank policy {s:?} is not energy:<tau> or fixed:<k>"
            ))
        };
        let (kind, value) = s.split_once(':').ok_or_else(bad)?;
        match kind {
            "energy" => Ok(RankPolicy::Energy(value.parse().map_err(|_| bad())?)),
            "fixed" => Ok(RankPolicy::Fixed(value.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Retained rank for a non-increasing positive spectrum.
pub fn choose_rank(singular_values: &[f64], policy: RankPolicy) -> Result<usize> {
    if singular_values.is_empty() {
        bail!(Argument, "empty singular value spectrum");
    }
    if singular_values
        .iter()
        .any(|&s| !(s > 0.0) || !s.is_finite())
    {
        bail!(Argument, "singular values must be positive and finite");
    }
    if singular_values.windows(2).any(|w| w[1] > w[0]) {
        bail!(Argument, "singular values must be non-increasing");
    }
    match policy {
        RankPolicy::Fixed(0) => bail!(Config, "fixed rank must be at least 1"),
        RankPolicy::Fixed(k) => Ok(k.min(singular_values.len())),
        RankPolicy::Energy(tau) => {
            if !(tau > 0.0 && tau <= 1.0) {
                bail!(Config, "energy fraction must lie in (0, 1], got {tau}");
            }
            let total: f64 = singular_values.iter().map(|s| s * s).sum();
            let mut acc = 0.0;
            for (i, s) in singular_values.iter().enumerate() {
                acc += s * s;
                if acc >= tau * total {
                    return Ok(i + 1);
                }
            }
            Ok(singular_values.len())
        }
    }
}

/// `x̂ = V_k Σ_k⁻¹ U_kᵀ y` for a fixed calibration matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearReconstructor {
    pub rows: usize,
    pub cols: usize,
    pub policy: RankPolicy,
    /// Layer the calibration was recorded on, when known.
    pub layer: Option<usize>,
    out_shape: Vec<usize>,
    sigma: Vec<f64>,
    /// `rows × k`, row-major.
    u: Vec<f64>,
    /// `cols × k`, row-major.
    v: Vec<f64>,
}

fn default_shape(n: usize) -> Vec<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s * s == n {
        vec![s, s]
    } else {
        vec![n]
    }
}

/// Fits a reconstructor to a row-major `rows × cols` calibration matrix.
pub fn fit_svd(
    matrix: &[f64],
    rows: usize,
    cols: usize,
    policy: RankPolicy,
) -> Result<LinearReconstructor> {
    if rows == 0 || cols == 0 {
        bail!(Dimension, "calibration matrix must be at least 1×1");
    }
    if matrix.len() != rows * cols {
        bail!(
            Dimension,
            "calibration buffer has {} entries, expected {rows}×{cols}",
            matrix.len()
        );
    }
    if let Some(i) = matrix.iter().position(|v| !v.is_finite()) {
        bail!(
            Numeric,
            "calibration entry ({}, {}) is not finite",
            i / cols,
            i % cols
        );
    }
    let a = faer::Mat::<f64>::from_fn(rows, cols, |i, j| matrix[i * cols + j]);
    let svd = a.thin_svd();
    let s: Vec<f64> = (0..rows.min(cols))
        .map(|i| svd.s_diagonal().read(i))
        .collect();
    // Numerical rank: discard values indistinguishable from rounding noise.
    let floor = s.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * f64::EPSILON;
    let usable = s.iter().take_while(|&&v| v > floor).count();
    if usable == 0 {
        bail!(Numeric, "calibration matrix is numerically zero");
    }
    let k = choose_rank(&s[..usable], policy)?;
    let (u, v) = (svd.u(), svd.v());
    let mut uk = Vec::with_capacity(rows * k);
    for i in 0..rows {
        uk.extend((0..k).map(|j| u.read(i, j)));
    }
    let mut vk = Vec::with_capacity(cols * k);
    for i in 0..cols {
        vk.extend((0..k).map(|j| v.read(i, j)));
    }
    Ok(LinearReconstructor {
        rows,
        cols,
        policy,
        layer: None,
        out_shape: default_shape(cols),
        sigma: s[..k].to_vec(),
        u: uk,
        v: vk,
    })
}

/// Fits to a calibration scan, keeping the object-plane image shape.
pub fn fit_calibration(scan: &CalibrationScan, policy: RankPolicy) -> Result<LinearReconstructor> {
    let mut r = fit_svd(&scan.matrix, scan.rows, scan.cols, policy)?;
    r.layer = Some(scan.layer);
    Ok(r)
}

impl LinearReconstructor {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    pub fn singular_values(&self) -> &[f64] {
        &self.sigma
    }

    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }

    /// Copy restricted to the leading `k` triplets.
    pub fn truncated(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.rank() {
            bail!(Argument, "rank {k} outside 1..={}", self.rank());
        }
        let (r0, k0) = (self.rank(), k);
        let take = |m: &[f64], n: usize| -> Vec<f64> {
            (0..n)
                .flat_map(|i| m[i * r0..i * r0 + k0].iter().copied())
                .collect()
        };
        Ok(LinearReconstructor {
            policy: RankPolicy::Fixed(k),
            sigma: self.sigma[..k].to_vec(),
            u: take(&self.u, self.rows),
            v: take(&self.v, self.cols),
            out_shape: self.out_shape.clone(),
            ..*self
        })
    }

    /// Raw pseudoinverse solution, without clipping or normalization.
    pub fn solve(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            bail!(
                Dimension,
                "measurement has {} pixels, reconstructor expects {}",
                y.len(),
                self.rows
            );
        }
        let k = self.rank();
        let mut coef = vec![0.0; k];
        for (i, &yi) in y.iter().enumerate() {
            for (c, &uij) in coef.iter_mut().zip(&self.u[i * k..(i + 1) * k]) {
                *c += uij * yi;
            }
        }
        for (c, s) in coef.iter_mut().zip(&self.sigma) {
            *c /= s;
        }
        Ok((0..self.cols)
            .map(|i| {
                self.v[i * k..(i + 1) * k]
                    .iter()
                    .zip(&coef)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect())
    }

    /// Image estimate clipped at zero and rescaled to `[0, 1]`.
    pub fn reconstruct(&self, measurement: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut x = self.solve(&to_f64(measurement))?;
        x.iter_mut().for_each(|v| *v = v.max(0.0));
        normalize_minmax(&mut x);
        Tensor::new(&self.out_shape, x.into_iter().map(|v| v as f32).collect())
    }

    fn header(&self) -> KvMap {
        let mut kv = KvMap::default();
        kv.insert("rank", self.rank());
        kv.insert("rows", self.rows);
        kv.insert("cols", self.cols);
        kv.insert("policy", self.policy);
        kv.insert(
            "layer",
            self.layer
                .map_or_else(|| "none".to_string(), |z| z.to_string()),
        );
        kv.insert(
            "out_shape",
            self.out_shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x"),
        );
        kv
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header().render();
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let k = self.rank();
        let t = |shape: &[usize], data: &[f64]| {
            Tensor::new(shape, data.to_vec()).expect("consistent factor shape")
        };
        container::encode(&t(&[k], &self.sigma), &mut out);
        container::encode(&t(&[self.rows, k], &self.u), &mut out);
        container::encode(&t(&[self.cols, k], &self.v), &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..4] != MAGIC {
            bail!(Format, "not a linear reconstructor file");
        }
        if bytes[4] != VERSION {
            bail!(
                Format,
                "unsupported linear reconstructor version {}",
                bytes[4]
            );
        }
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let Some(header) = bytes.get(9..9 + hlen) else {
            bail!(Format, "truncated header");
        };
        let kv = KvMap::parse(
            std::str::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?,
        )?;
        let (k, rows, cols): (usize, usize, usize) = (
            kv.require("rank")?,
            kv.require("rows")?,
            kv.require("cols")?,
        );
        let layer = match kv.raw("layer") {
            None | Some("none") => None,
            Some(z) => Some(
                z.parse()
                    .map_err(|_| Error::Format(format!("bad layer {z:?}")))?,
            ),
        };
        let out_shape: Vec<usize> = kv
            .raw("out_shape")
            .unwrap_or("")
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Format("bad out_shape".into())))
            .collect::<Result<_>>()?;
        if out_shape.iter().product::<usize>() != cols {
            bail!(
                Format,
                "output shape {out_shape:?} does not hold {cols} pixels"
            );
        }
        let parts = container::decode_all(&bytes[9 + hlen..])?;
        let [s, u, v]: [container::AnyTensor; 3] = parts
            .try_into()
            .map_err(|_| Error::Format("expected three factor tensors".into()))?;
        let (s, u, v) = (s.into_f64()?, u.into_f64()?, v.into_f64()?);
        if s.shape() != [k] || u.shape() != [rows, k] || v.shape() != [cols, k] {
            bail!(
                Mismatch,
                "factor shapes disagree with header rank {k}, extents {rows}×{cols}"
            );
        }
        Ok(LinearReconstructor {
            rows,
            cols,
            policy: kv.require("policy")?,
            layer,
            out_shape,
            sigma: s.into_data(),
            u: u.into_data(),
            v: v.into_data(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
