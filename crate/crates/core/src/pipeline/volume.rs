//! Depth stacks of equally sized slices, stored as one `[D, H, W]` tensor
//! container plus a key=value sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use super::container::{read_tensor, write_tensor};
use crate::diffcore::Tensor;
use crate::error::{bail, Error, Result};
use crate::kv::KvMap;

pub const DEFAULT_Z_STEP_UM: f64 = 50.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub slices: Vec<Tensor<f32>>,
    pub z0_um: f64,
    pub z_step_um: f64,
    pub fov_um: f64,
}

impl Volume {
    pub fn depth(&self) -> usize {
        self.slices.len()
    }

    /// Depth of slice `d`: `z0 + d·z_step`.
    pub fn depth_of(&self, d: usize) -> f64 {
        self.z0_um + d as f64 * self.z_step_um
    }

    /// `[H, W]` of every slice.
    pub fn extent(&self) -> [usize; 2] {
        let s = self.slices[0].shape();
        [s[0], s[1]]
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::stack(&self.slices).expect("slices share one extent")
    }

    fn metadata(&self) -> KvMap {
        let [h, w] = self.extent();
        let mut kv = KvMap::default();
        kv.insert("depth", self.depth());
        kv.insert("height", h);
        kv.insert("width", w);
        kv.insert("z0_um", self.z0_um);
        kv.insert("z_step_um", self.z_step_um);
        kv.insert("fov_um", self.fov_um);
        kv
    }
}

/// Checks the slices and wraps them as a volume.
pub fn assemble_volume(
    slices: Vec<Tensor<f32>>,
    z_step_um: f64,
    z0_um: f64,
    fov_um: f64,
) -> Result<Volume> {
    let Some(first) = slices.first() else {
        bail!(Argument, "a volume needs at least one slice");
    };
    if first.rank() != 2 {
        bail!(
            Dimension,
            "slices must be 2D images, got {:?}",
            first.shape()
        );
    }
    let shape = first.shape().to_vec();
    for (d, s) in slices.iter().enumerate() {
        if s.shape() != shape.as_slice() {
            bail!(
                Dimension,
                "ragged volume: slice {d} is {:?}, slice 0 is {shape:?}",
                s.shape()
            );
        }
    }
    if !(z_step_um > 0.0) || !z_step_um.is_finite() {
        bail!(Config, "z step must be positive, got {z_step_um}");
    }
    if !z0_um.is_finite() || !(fov_um > 0.0) || !fov_um.is_finite() {
        bail!(Config, "z0 must be finite and the field of view positive");
    }
    Ok(Volume {
        slices,
        z0_um,
        z_step_um,
        fov_um,
    })
}

/// Sidecar path next to a volume container: `scan.tnsr` → `scan.meta`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta")
}

/// Writes the container at `path` and its sidecar.
pub fn write_volume(volume: &Volume, path: &Path) -> Result<()> {
    write_tensor(path, &volume.to_tensor())?;
    let meta = sidecar_path(path);
    fs::write(&meta, volume.metadata().render()).map_err(|e| Error::io(&meta, e))
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let stack = read_tensor(path)?.into_f32()?;
    let meta = sidecar_path(path);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let kv = KvMap::parse(&text)?;
    let &[d, h, w] = stack.shape() else {
        bail!(
            Format,
            "{}: volume must be [D, H, W], got {:?}",
            path.display(),
            stack.shape()
        );
    };
    let declared: [usize; 3] = [
        kv.require("depth")?,
        kv.require("height")?,
        kv.require("width")?,
    ];
    if declared != [d, h, w] {
        bail!(
            Mismatch,
            "{}: sidecar declares {declared:?}, container holds {:?}",
            meta.display(),
            [d, h, w]
        );
    }
    let slices = (0..d)
        .map(|i| stack.index_outer(i))
        .collect::<Result<Vec<_>>>()?;
    assemble_volume(
        slices,
        kv.require("z_step_um")?,
        kv.require("z0_um")?,
        kv.require("fov_um")?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn slices(n: usize, seed: u64) -> Vec<Tensor<f32>> {
        let mut r = crate::rng::stream(seed, "slices", 0);
        (0..n)
            .map(|_| Tensor::from_fn(&[32, 32], |_| r.random_range(0.0..1.0)))
            .collect()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let input = slices(15, 1);
        // A step with no short decimal form still survives the text sidecar.
        let v = assemble_volume(input.clone(), 50.0 / 3.0, 12.5, 200.0).unwrap();
        assert_eq!(v.to_tensor().shape(), &[15, 32, 32]);
        let path = dir.path().join("scan.tnsr");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.z_step_um.to_bits(), (50.0f64 / 3.0).to_bits());
        for (a, b) in back.slices.iter().zip(&input) {
            assert_eq!(a, b);
        }
        assert_eq!(back.depth_of(2), 12.5 + 2.0 * 50.0 / 3.0);
    }

    #[test]
    fn ragged_or_empty_input_is_rejected() {
        assert!(assemble_volume(Vec::new(), 50.0, 0.0, 200.0).is_err());
        let mut s = slices(2, 2);
        s.push(Tensor::zeros(&[16, 16]));
        assert!(matches!(
            assemble_volume(s, 50.0, 0.0, 200.0),
            Err(Error::Dimension(_))
        ));
        assert!(assemble_volume(slices(1, 3), 0.0, 0.0, 200.0).is_err());
    }

    #[test]
    fn sidecar_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.tnsr");
        write_volume(
            &assemble_volume(slices(3, 4), 50.0, 0.0, 200.0).unwrap(),
            &path,
        )
        .unwrap();
        let meta = sidecar_path(&path);
        let text = fs::read_to_string(&meta)
            .unwrap()
            .replace("depth=3", "depth=4");
        fs::write(&meta, text).unwrap();
        assert!(matches!(read_volume(&path), Err(Error::Mismatch(_))));
    }
}
