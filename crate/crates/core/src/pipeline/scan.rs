//! Insertion scan: the probe advances through a bead phantom and the
//! projection network turns each three-layer window into one slice.

use rand::Rng;

use super::volume::{assemble_volume, Volume};
use crate::error::{bail, Result};
use crate::kv::KvMap;
use crate::neurorecon::{ModelState, NetKind};
use crate::opticsim::{render_disks, ForwardModel, SceneStack, FOV_UM, LAYERS, LAYER_SPACING_UM};
use crate::rng;

/// One bead; `(y, x)` in object pixels, depth in µm below the phantom surface.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bead {
    pub y: f64,
    pub x: f64,
    pub depth_um: f64,
}

/// Static beads in a slab `depth_um` thick. Insertion does not displace them.
#[derive(Clone, Debug, PartialEq)]
pub struct Phantom {
    pub side: usize,
    pub depth_um: f64,
    pub bead_diameter_px: f64,
    pub beads: Vec<Bead>,
}

impl Phantom {
    pub fn new(
        side: usize,
        depth_um: f64,
        bead_diameter_px: f64,
        beads: Vec<Bead>,
    ) -> Result<Self> {
        if side == 0 || !(bead_diameter_px > 0.0) {
            bail!(Config, "phantom needs a positive extent and bead diameter");
        }
        if !(depth_um >= 0.0) || !depth_um.is_finite() {
            bail!(
                Config,
                "phantom depth must be finite and nonnegative, got {depth_um}"
            );
        }
        for b in &beads {
            let inside = |c: f64| (0.0..=side as f64).contains(&c);
            if !inside(b.y) || !inside(b.x) || !(0.0..=depth_um).contains(&b.depth_um) {
                bail!(Config, "bead {b:?} lies outside the phantom");
            }
        }
        Ok(Phantom {
            side,
            depth_um,
            bead_diameter_px,
            beads,
        })
    }

    /// `count` beads at uniform random positions, fully inside the field laterally.
    pub fn random(
        side: usize,
        depth_um: f64,
        count: usize,
        bead_diameter_px: f64,
        seed: u64,
    ) -> Result<Self> {
        let r = bead_diameter_px / 2.0;
        if bead_diameter_px > side as f64 {
            bail!(
                Config,
                "a {bead_diameter_px} px bead does not fit in {side} px"
            );
        }
        let mut g = rng::stream(seed, "phantom", 0);
        let beads = (0..count)
            .map(|_| Bead {
                y: g.random_range(r..=side as f64 - r),
                x: g.random_range(r..=side as f64 - r),
                depth_um: g.random_range(0.0..=depth_um),
            })
            .collect();
        Phantom::new(side, depth_um, bead_diameter_px, beads)
    }

    /// Layer `1..=3` of the window starting at `z0_um` that a bead at
    /// `depth_um` falls into: the nearest layer, within half a spacing.
    pub fn layer_for(z0_um: f64, depth_um: f64) -> Option<usize> {
        let offset = (depth_um - z0_um) / LAYER_SPACING_UM;
        let k = (offset + 0.5).floor();
        (0.0..LAYERS as f64).contains(&k).then(|| k as usize + 1)
    }

    /// The three-layer scene in front of a probe tip at depth `z0_um`.
    pub fn window(&self, z0_um: f64) -> Result<SceneStack> {
        let mut centers: [Vec<(f64, f64)>; LAYERS] = Default::default();
        for b in &self.beads {
            if let Some(z) = Phantom::layer_for(z0_um, b.depth_um) {
                centers[z - 1].push((b.y, b.x));
            }
        }
        let mut scene = SceneStack::empty(self.side);
        for (z, c) in centers.iter().enumerate() {
            *scene.layer_mut(z + 1) = render_disks(self.side, c, self.bead_diameter_px)?;
        }
        Ok(scene)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScanConfig {
    pub z0_um: f64,
    pub z_step_um: f64,
    pub max_depth_um: f64,
    /// Add detector noise to each simulated measurement.
    pub noise: bool,
    pub seed: u64,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            z0_um: 0.0,
            z_step_um: 50.0,
            max_depth_um: 700.0,
            noise: true,
            seed: 0,
        }
    }
}

impl ScanConfig {
    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("scan_z0_um", self.z0_um);
        kv.insert("scan_z_step_um", self.z_step_um);
        kv.insert("scan_max_depth_um", self.max_depth_um);
        kv.insert("scan_noise", self.noise);
        kv.insert("seed", self.seed);
    }

    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.apply("scan_z0_um", &mut self.z0_um)?;
        kv.apply("scan_z_step_um", &mut self.z_step_um)?;
        kv.apply("scan_max_depth_um", &mut self.max_depth_um)?;
        kv.apply("scan_noise", &mut self.noise)?;
        kv.apply("seed", &mut self.seed)
    }

    /// Tip depths visited: `z0, z0 + step, …`, stopping at `max_depth` or at
    /// the end of the phantom, whichever comes first.
    pub fn depths(&self, phantom_depth_um: f64) -> Result<Vec<f64>> {
        if !(self.z_step_um > 0.0) || !self.z_step_um.is_finite() {
            bail!(Config, "scan step must be positive, got {}", self.z_step_um);
        }
        if !self.z0_um.is_finite() || !self.max_depth_um.is_finite() {
            bail!(Config, "scan depths must be finite");
        }
        let stop = self.max_depth_um.min(phantom_depth_um);
        // Tolerates round-off in the step so 0..=700 by 50 yields 15 depths.
        let slack = self.z_step_um * 1e-9;
        let mut out = Vec::new();
        let mut k = 0usize;
        loop {
            let z = self.z0_um + k as f64 * self.z_step_um;
            if z > stop + slack {
                break;
            }
            out.push(z);
            k += 1;
        }
        Ok(out)
    }
}

/// Simulates and reconstructs one slice per tip depth.
pub fn insertion_scan(
    model: &ModelState,
    forward: &ForwardModel,
    phantom: &Phantom,
    config: &ScanConfig,
) -> Result<Volume> {
    if model.spec.kind != NetKind::Ann1R {
        bail!(
            Mismatch,
            "insertion scans need a single-plane reconstructor, got {}",
            model.spec.kind
        );
    }
    if model.step == 0 {
        bail!(State, "the projection model is untrained");
    }
    let fc = &forward.config;
    if fc.object_side != phantom.side {
        bail!(
            Mismatch,
            "phantom is {} px, the forward model expects {} px objects",
            phantom.side,
            fc.object_side
        );
    }
    if fc.meas_side != model.spec.extent {
        bail!(
            Mismatch,
            "measurements are {} px, the model expects {} px",
            fc.meas_side,
            model.spec.extent
        );
    }
    let depths = config.depths(phantom.depth_um)?;
    if depths.is_empty() {
        bail!(
            Argument,
            "empty phantom: it ends at {} µm, before the first window at {} µm",
            phantom.depth_um,
            config.z0_um
        );
    }
    let mut slices = Vec::with_capacity(depths.len());
    for (k, &z) in depths.iter().enumerate() {
        let scene = phantom.window(z)?;
        let noise = config
            .noise
            .then(|| rng::stream(config.seed, "scan", k as u64).random::<u64>());
        let ccm = forward.simulate_measurement(&scene, noise)?;
        slices.push(model.infer_reconstruct(&ccm)?);
    }
    assemble_volume(slices, config.z_step_um, config.z0_um, FOV_UM)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_grid() {
        let c = ScanConfig::default();
        let d = c.depths(800.0).unwrap();
        assert_eq!(d.len(), 15);
        assert_eq!(d[14], 700.0);
        assert_eq!(c.depths(320.0).unwrap().len(), 7);
        assert!(c.depths(-1.0).unwrap().is_empty());
        let bad = ScanConfig {
            z_step_um: 0.0,
            ..c
        };
        assert!(bad.depths(100.0).is_err());
    }

    #[test]
    fn beads_go_to_the_nearest_layer() {
        assert_eq!(Phantom::layer_for(0.0, 0.0), Some(1));
        assert_eq!(Phantom::layer_for(0.0, 24.9), Some(1));
        assert_eq!(Phantom::layer_for(0.0, 25.0), Some(2));
        assert_eq!(Phantom::layer_for(0.0, 110.0), Some(3));
        assert_eq!(Phantom::layer_for(0.0, 125.0), None);
        assert_eq!(Phantom::layer_for(100.0, 80.0), Some(1));
        assert_eq!(Phantom::layer_for(100.0, 74.0), None);
        // A bead at 300 µm sits in the windows starting at 200, 250 and 300.
        let hits: Vec<_> = (0..=14)
            .map(|k| k as f64 * 50.0)
            .filter_map(|z| Phantom::layer_for(z, 300.0).map(|l| (z, l)))
            .collect();
        assert_eq!(hits, vec![(200.0, 3), (250.0, 2), (300.0, 1)]);
    }

    #[test]
    fn window_renders_each_bead_once() {
        let beads = vec![
            Bead {
                y: 8.0,
                x: 8.0,
                depth_um: 10.0,
            },
            Bead {
                y: 20.0,
                x: 20.0,
                depth_um: 60.0,
            },
            Bead {
                y: 20.0,
                x: 8.0,
                depth_um: 400.0,
            },
        ];
        let p = Phantom::new(32, 500.0, 3.0, beads).unwrap();
        let s = p.window(0.0).unwrap();
        assert!(s.layer(1).sum() > 0.0 && s.layer(2).sum() > 0.0);
        assert_eq!(s.layer(3).sum(), 0.0);
        assert_eq!(s.layer(1).get(&[8, 8]), 1.0);
        let deep = p.window(300.0).unwrap();
        assert!(deep.layer(3).get(&[20, 8]) == 1.0);
        assert_eq!(deep.layer(1).sum() + deep.layer(2).sum(), 0.0);
    }

    #[test]
    fn invalid_phantoms() {
        let out = Bead {
            y: 40.0,
            x: 1.0,
            depth_um: 0.0,
        };
        assert!(Phantom::new(32, 100.0, 3.0, vec![out]).is_err());
        assert!(Phantom::new(32, -5.0, 3.0, vec![]).is_err());
        let p = Phantom::random(32, 700.0, 20, 3.0, 1).unwrap();
        assert_eq!(p, Phantom::random(32, 700.0, 20, 3.0, 1).unwrap());
        assert_eq!(p.beads.len(), 20);
    }
}
