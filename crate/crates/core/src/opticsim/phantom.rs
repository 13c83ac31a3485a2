use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{bail, Result};
use crate::image::{blur, gaussian_taps, normalize_minmax, to_image};
use crate::rng;

const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const SUPERSAMPLE: usize = 8;

/// Fraction of pixel `(y, x)` covered by a disk, by `SUPERSAMPLE²` point sampling.
fn disk_coverage(y: usize, x: usize, cy: f64, cx: f64, r: f64) -> f64 {
    let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
    let d = ((py - cy).powi(2) + (px - cx).powi(2)).sqrt();
    if d + std::f64::consts::FRAC_1_SQRT_2 <= r {
        return 1.0;
    }
    if d - std::f64::consts::FRAC_1_SQRT_2 >= r {
        return 0.0;
    }
    let mut hits = 0;
    let step = 1.0 / SUPERSAMPLE as f64;
    for sy in 0..SUPERSAMPLE {
        for sx in 0..SUPERSAMPLE {
            let qy = y as f64 + (sy as f64 + 0.5) * step;
            let qx = x as f64 + (sx as f64 + 0.5) * step;
            if (qy - cy).powi(2) + (qx - cx).powi(2) <= r * r {
                hits += 1;
            }
        }
    }
    hits as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn paint_disk(buf: &mut [f64], side: usize, cy: f64, cx: f64, r: f64) {
    let lo = |c: f64| (c - r - 1.0).floor().max(0.0) as usize;
    let hi = |c: f64| ((c + r + 1.0).ceil() as usize).min(side);
    for y in lo(cy)..hi(cy) {
        for x in lo(cx)..hi(cx) {
            let v = disk_coverage(y, x, cy, cx, r);
            let p = &mut buf[y * side + x];
            *p = p.max(v);
        }
    }
}

/// `count` anti-aliased unit disks at random non-overlapping centers, each
/// fully inside a `side × side` field.
pub fn render_beads(side: usize, count: usize, diameter_px: f64, seed: u64) -> Result<Tensor<f32>> {
    if side == 0 {
        bail!(Config, "image extent must be at least 1");
    }
    if !(diameter_px >= 1.0) {
        bail!(
            Config,
            "bead diameter must be at least 1 px, got {diameter_px}"
        );
    }
    let r = diameter_px / 2.0;
    if diameter_px > side as f64 && count > 0 {
        bail!(
            Generation,
            "a {diameter_px} px bead does not fit in a {side} px field"
        );
    }
    let mut rng = rng::stream(seed, "beads", 0);
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(count);
    let mut attempts = 0;
    while centers.len() < count {
        if attempts == MAX_PLACEMENT_ATTEMPTS {
            bail!(
                Generation,
                "could not place {count} beads of diameter {diameter_px} px without overlap in {MAX_PLACEMENT_ATTEMPTS} attempts"
            );
        }
        attempts += 1;
        let cy = rng.random_range(r..=side as f64 - r);
        let cx = rng.random_range(r..=side as f64 - r);
        if centers
            .iter()
            .all(|&(y, x)| (y - cy).powi(2) + (x - cx).powi(2) >= diameter_px * diameter_px)
        {
            centers.push((cy, cx));
        }
    }
    render_disks(side, &centers, diameter_px)
}

/// Anti-aliased disks at the given `(y, x)` centers; overlaps take the maximum.
pub fn render_disks(side: usize, centers: &[(f64, f64)], diameter_px: f64) -> Result<Tensor<f32>> {
    if side == 0 {
        bail!(Config, "image extent must be at least 1");
    }
    if !(diameter_px > 0.0) {
        bail!(Config, "disk diameter must be positive, got {diameter_px}");
    }
    let mut buf = vec![0.0; side * side];
    for &(cy, cx) in centers {
        paint_disk(&mut buf, side, cy, cx, diameter_px / 2.0);
    }
    Ok(to_image(side, side, &buf))
}

/// Default number of processes leaving the soma.
pub const DEFAULT_BRANCHES: usize = 4;

/// Soma disk plus persistent random-walk processes, smoothed and scaled to peak 1.
pub fn render_neuron(side: usize, seed: u64, n_branches: usize) -> Result<Tensor<f32>> {
    if n_branches == 0 {
        bail!(Config, "a neuron needs at least one branch");
    }
    if side < 8 {
        bail!(Config, "neuron phantoms need at least 8 px, got {side}");
    }
    let mut rng = rng::stream(seed, "neuron", 0);
    let s = side as f64;
    let soma_r = (s / 16.0).max(1.5);
    let cy = rng.random_range(s * 0.3..s * 0.7);
    let cx = rng.random_range(s * 0.3..s * 0.7);
    let mut buf = vec![0.0; side * side];
    paint_disk(&mut buf, side, cy, cx, soma_r);

    let clamp = |v: f64| v.clamp(1.0, s - 1.0);
    // (y, x, heading, remaining steps, width radius)
    let mut walks: Vec<(f64, f64, f64, usize, f64)> = Vec::new();
    let base_len = (s * 0.35) as usize;
    for b in 0..n_branches {
        let heading =
            std::f64::consts::TAU * (b as f64 + rng.random_range(0.0..0.6)) / n_branches as f64;
        let width = if rng.random_bool(0.5) { 1.0 } else { 0.85 };
        walks.push((
            cy,
            cx,
            heading,
            base_len + rng.random_range(0..=base_len / 2),
            width,
        ));
    }
    while let Some((mut y, mut x, mut heading, steps, width)) = walks.pop() {
        for step in 0..steps {
            heading += rng.random_range(-0.35..0.35);
            y = clamp(y + heading.sin());
            x = clamp(x + heading.cos());
            paint_disk(&mut buf, side, y, x, width);
            if step > 3 && steps > 6 && rng.random_bool(0.04) {
                let turn = if rng.random_bool(0.5) { 0.8 } else { -0.8 };
                walks.push((y, x, heading + turn, (steps - step) / 2, 0.85));
            }
        }
    }
    let smoothed = blur(&buf, side, side, &gaussian_taps(0.6, 1));
    let peak = smoothed.iter().copied().fold(0.0, f64::max);
    let mut out: Vec<f64> = smoothed.iter().map(|v| v / peak).collect();
    normalize_minmax(&mut out);
    Ok(to_image(side, side, &out))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Integrated intensity of a disk sampled on a 64× finer grid per axis.
    fn disk_area_oracle(cy: f64, cx: f64, r: f64) -> f64 {
        let n = 64;
        let mut hits = 0usize;
        let y0 = (cy - r).floor() as i64 - 1;
        let x0 = (cx - r).floor() as i64 - 1;
        let span = (2.0 * r).ceil() as i64 + 3;
        for iy in 0..span * n {
            for ix in 0..span * n {
                let qy = y0 as f64 + (iy as f64 + 0.5) / n as f64;
                let qx = x0 as f64 + (ix as f64 + 0.5) / n as f64;
                if (qy - cy).powi(2) + (qx - cx).powi(2) <= r * r {
                    hits += 1;
                }
            }
        }
        hits as f64 / (n * n) as f64
    }

    #[test]
    fn zero_beads_is_empty() {
        let img = render_beads(32, 0, 3.0, 1).unwrap();
        assert!(img.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_bead_intensity() {
        for seed in 0..20 {
            let img = render_beads(32, 1, 3.0, seed).unwrap();
            let total: f64 = img.data().iter().map(|&v| v as f64).sum();
            let expect = std::f64::consts::PI * 1.5 * 1.5;
            assert!(
                (total - expect).abs() / expect < 0.15,
                "seed {seed}: {total}"
            );
            assert!(img.max_value() <= 1.0);
        }
        let oracle = disk_area_oracle(10.3, 12.7, 1.5);
        let mut buf = vec![0.0; 32 * 32];
        paint_disk(&mut buf, 32, 10.3, 12.7, 1.5);
        assert!((buf.iter().sum::<f64>() - oracle).abs() / oracle < 0.05);
    }

    #[test]
    fn beads_are_deterministic_and_bounded() {
        let a = render_beads(32, 4, 3.0, 7).unwrap();
        assert_eq!(a, render_beads(32, 4, 3.0, 7).unwrap());
        assert_ne!(a, render_beads(32, 4, 3.0, 8).unwrap());
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn overcrowded_field_fails() {
        assert!(matches!(
            render_beads(8, 50, 3.0, 0),
            Err(crate::Error::Generation(_))
        ));
        assert!(render_beads(8, 1, 0.5, 0).is_err());
    }

    fn components_above_half(img: &Tensor<f32>) -> usize {
        let side = img.shape()[0];
        let fg: Vec<bool> = img.data().iter().map(|&v| v >= 0.5).collect();
        let mut seen = vec![false; fg.len()];
        let mut count = 0;
        for start in 0..fg.len() {
            if !fg[start] || seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(p) = stack.pop() {
                let (y, x) = ((p / side) as i64, (p % side) as i64);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let (ny, nx) = (y + dy, x + dx);
                        if ny < 0 || nx < 0 || ny >= side as i64 || nx >= side as i64 {
                            continue;
                        }
                        let q = ny as usize * side + nx as usize;
                        if fg[q] && !seen[q] {
                            seen[q] = true;
                            stack.push(q);
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn neuron_is_connected_and_sparse() {
        for seed in 0..100 {
            let img = render_neuron(32, seed, DEFAULT_BRANCHES).unwrap();
            assert_eq!(components_above_half(&img), 1, "seed {seed}");
            let frac = img.data().iter().filter(|&&v| v >= 0.5).count() as f64 / 1024.0;
            assert!((0.01..=0.25).contains(&frac), "seed {seed}: {frac}");
            assert_eq!(img.max_value(), 1.0);
        }
    }

    #[test]
    fn neuron_is_deterministic() {
        assert_eq!(
            render_neuron(32, 3, 5).unwrap(),
            render_neuron(32, 3, 5).unwrap()
        );
        assert!(render_neuron(32, 3, 0).is_err());
    }
}
