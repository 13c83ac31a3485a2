use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::diffcore::Tensor;
use crate::error::{bail, Result};
use crate::linrecon::LinearReconstructor;
use crate::metrics::{accuracy, mae, ssim};
use crate::neurorecon::{ModelState, NetKind};
use crate::opticsim::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodKind {
    Ann1R,
    Ann1C,
    Ann2,
    Svd,
}

impl MethodKind {
    pub const ALL: [MethodKind; 4] = [
        MethodKind::Ann1R,
        MethodKind::Ann1C,
        MethodKind::Ann2,
        MethodKind::Svd,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MethodKind::Ann1R => "ANN1_r",
            MethodKind::Ann1C => "ANN1_c",
            MethodKind::Ann2 => "ANN2 (3 layer average)",
            MethodKind::Svd => "SVD",
        }
    }

    fn key(self) -> &'static str {
        match self {
            MethodKind::Ann1R => "ann1_r",
            MethodKind::Ann1C => "ann1_c",
            MethodKind::Ann2 => "ann2",
            MethodKind::Svd => "svd",
        }
    }

    /// Values measured on the 128×128 instrument data; context only.
    fn reference(self) -> (&'static str, &'static str, &'static str, &'static str) {
        match self {
            MethodKind::Ann1R => ("0.8974", "0.0104", "3.3ms", "NA"),
            MethodKind::Ann1C => ("NA", "NA", "3.6ms", "0.9980"),
            MethodKind::Ann2 => ("0.9639", "0.0036", "3.4ms", "NA"),
            MethodKind::Svd => ("0.9576", "0.0138", "100ms", "NA"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub method: MethodKind,
    pub ssim: Option<f64>,
    pub mae: Option<f64>,
    pub median: Duration,
    pub accuracy: Option<f64>,
    /// Test images this method was scored on.
    pub samples: usize,
}

/// Desk-scale counterpart of the method comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
    pub n_samples: usize,
    pub repeats: usize,
}

pub const COLUMNS: [&str; 5] = [
    "Method",
    "Structural similarity index (SSIM)",
    "Mean absolute error (MAE)",
    "Computation time",
    "Classification accuracy",
];

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:.4}"))
}

impl BenchTable {
    pub fn row(&self, method: MethodKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{}", COLUMNS.join("\t"));
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{:.3}ms\t{}",
                r.method.label(),
                opt(r.ssim),
                opt(r.mae),
                r.median.as_secs_f64() * 1e3,
                opt(r.accuracy)
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "reference (128x128 instrument data, GPU workstation)");
        let _ = writeln!(s, "{}", COLUMNS.join("\t"));
        for r in &self.rows {
            let (a, b, c, d) = r.method.reference();
            let _ = writeln!(s, "{}\t{a}\t{b}\t{c}\t{d}", r.method.label());
        }
        if let (Some(lin), Some(ann)) = (self.row(MethodKind::Svd), self.row(MethodKind::Ann1R)) {
            let ratio = lin.median.as_secs_f64() / ann.median.as_secs_f64().max(1e-12);
            let _ = writeln!(s, "\nlinear / ANN1_r median time ratio: {ratio:.2}x");
        }
        s
    }

    /// Quality values only; wall-clock times are in [`BenchTable::timing_kv`].
    pub fn to_kv(&self) -> String {
        let mut s = format!("n_samples={}\nrepeats={}\n", self.n_samples, self.repeats);
        for r in &self.rows {
            let k = r.method.key();
            let _ = writeln!(s, "{k}.ssim={}", opt(r.ssim));
            let _ = writeln!(s, "{k}.mae={}", opt(r.mae));
            let _ = writeln!(s, "{k}.accuracy={}", opt(r.accuracy));
            let _ = writeln!(s, "{k}.samples={}", r.samples);
        }
        s
    }

    /// Median per-image times, kept apart from the reproducible values.
    pub fn timing_kv(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let k = r.method.key();
            let _ = writeln!(s, "{k}.median_ms={:.6}", r.median.as_secs_f64() * 1e3);
        }
        s
    }
}

pub fn median_duration(mut v: Vec<Duration>) -> Duration {
    assert!(!v.is_empty());
    v.sort();
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2
    }
}

fn timed<R>(f: impl FnOnce() -> Result<R>) -> Result<(R, Duration)> {
    let t = Instant::now();
    let r = f()?;
    Ok((r, t.elapsed()))
}

/// Trained artifacts the benchmark compares.
pub struct BenchModels<'a> {
    pub ann1_r: &'a ModelState,
    pub ann1_c: &'a ModelState,
    pub ann2: &'a ModelState,
    pub linear: &'a LinearReconstructor,
}

/// Runs every method over `test` and reports quality and median per-image time.
///
/// Each image is processed `repeats` times; the first pass provides the
/// quality numbers and every pass contributes a timing.
pub fn bench(models: &BenchModels<'_>, test: &[Sample], repeats: usize) -> Result<BenchTable> {
    if test.is_empty() {
        bail!(Argument, "bench needs at least one test sample");
    }
    let repeats = repeats.max(1);
    for (m, want) in [
        (models.ann1_r, NetKind::Ann1R),
        (models.ann1_c, NetKind::Ann1C),
        (models.ann2, NetKind::Ann2),
    ] {
        if m.spec.kind != want {
            bail!(
                Mismatch,
                "bench expected a {want} model, got {}",
                m.spec.kind
            );
        }
    }
    let mut rows = Vec::new();
    for method in MethodKind::ALL {
        let mut times = Vec::with_capacity(test.len() * repeats);
        let mut ssims = Vec::new();
        let mut maes = Vec::new();
        let mut preds = Vec::new();
        let mut labels = Vec::new();
        let mut scored = 0;
        for sample in test {
            // The linear operator belongs to one layer; other layers are out of its scope.
            if let (MethodKind::Svd, Some(z)) = (method, models.linear.layer) {
                if sample.layer()? != z {
                    continue;
                }
            }
            scored += 1;
            for rep in 0..repeats {
                match method {
                    MethodKind::Ann1R | MethodKind::Ann2 => {
                        let model = if method == MethodKind::Ann1R {
                            models.ann1_r
                        } else {
                            models.ann2
                        };
                        let (out, dt) = timed(|| model.infer_reconstruct(&sample.ccm))?;
                        times.push(dt);
                        if rep == 0 {
                            let (target, pred) = target_plane(method, sample, out)?;
                            ssims.push(ssim(&pred, &target)?);
                            maes.push(mae(&pred, &target)?);
                        }
                    }
                    MethodKind::Ann1C => {
                        let ((layer, _), dt) = timed(|| models.ann1_c.infer_classify(&sample.ccm))?;
                        times.push(dt);
                        if rep == 0 {
                            preds.push(layer);
                            labels.push(sample.layer()?);
                        }
                    }
                    MethodKind::Svd => {
                        let (out, dt) = timed(|| models.linear.reconstruct(&sample.ccm))?;
                        times.push(dt);
                        if rep == 0 {
                            ssims.push(ssim(&out, &sample.reference)?);
                            maes.push(mae(&out, &sample.reference)?);
                        }
                    }
                }
            }
        }
        if scored == 0 {
            bail!(
                Argument,
                "no test samples fall in the scope of {}",
                method.label()
            );
        }
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        rows.push(BenchRow {
            method,
            ssim: mean(&ssims),
            mae: mean(&maes),
            median: median_duration(times),
            accuracy: if preds.is_empty() {
                None
            } else {
                Some(accuracy(&preds, &labels)?)
            },
            samples: scored,
        });
    }
    Ok(BenchTable {
        rows,
        n_samples: test.len(),
        repeats,
    })
}

/// Reference and prediction planes compared for a reconstruction method.
///
/// ANN2 is scored on the plane of the sample's layer; its other planes are
/// constrained separately.
fn target_plane(method: MethodKind, sample: &Sample, out: Tensor) -> Result<(Tensor, Tensor)> {
    match method {
        MethodKind::Ann2 => {
            let z = sample.layer()?;
            Ok((
                sample.reference.clone(),
                crate::neurorecon::plane(&out, z - 1)?,
            ))
        }
        _ => Ok((sample.reference.clone(), out)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_durations() {
        let ms = |v: u64| Duration::from_millis(v);
        assert_eq!(median_duration(vec![ms(3), ms(1), ms(2)]), ms(2));
        assert_eq!(
            median_duration(vec![ms(4), ms(1), ms(2), ms(3)]),
            Duration::from_micros(2500)
        );
    }

    #[test]
    fn table_layout() {
        let rows = MethodKind::ALL
            .iter()
            .map(|&m| BenchRow {
                method: m,
                ssim: (m != MethodKind::Ann1C).then_some(0.5),
                mae: (m != MethodKind::Ann1C).then_some(0.1),
                median: Duration::from_micros(1500),
                accuracy: (m == MethodKind::Ann1C).then_some(1.0),
                samples: 1,
            })
            .collect();
        let t = BenchTable {
            rows,
            n_samples: 1,
            repeats: 1,
        };
        let text = t.render();
        let first: Vec<&str> = text.lines().next().unwrap().split('\t').collect();
        assert_eq!(first, COLUMNS);
        let body: Vec<&str> = text.lines().skip(1).take_while(|l| !l.is_empty()).collect();
        assert_eq!(body.len(), 4);
        assert!(body[1].starts_with("ANN1_c\tNA\tNA\t1.500ms\t1.0000"));
    }
}
