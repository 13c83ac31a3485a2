//! Synthetic instrument: per-layer scrambling operators, phantoms,
//! measurement simulation and dataset construction.

mod dataset;
mod forward;
mod phantom;

pub use dataset::{
    build_dataset, generate_dataset, layer_separation, load_dataset, merge_layers, merged_dataset,
    write_dataset, Dataset, DatasetConfig, DatasetManifest, LayerLabel, ManifestEntry, ObjectKind,
    Sample, Split, MANIFEST_FILE, MERGE_ROUNDS,
};
pub use forward::{
    correlation, make_forward_model, CalibrationScan, ForwardConfig, ForwardModel,
    MAX_MATRIX_CORRELATION,
};
pub use phantom::{render_beads, render_disks, render_neuron, DEFAULT_BRANCHES};

use crate::diffcore::Tensor;
use crate::error::{bail, Result};

/// Number of object planes in front of the probe.
pub const LAYERS: usize = 3;
pub const LAYER_SPACING_UM: f64 = 50.0;
pub const FOV_UM: f64 = 200.0;

/// Depth of layer `z ∈ {1, 2, 3}` below the probe face.
pub fn layer_depth_um(z: usize) -> f64 {
    (z as f64 - 1.0) * LAYER_SPACING_UM
}

/// Three square object planes of identical extent.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneStack {
    layers: [Tensor<f32>; LAYERS],
    pub layer_spacing_um: f64,
    pub fov_um: f64,
}

impl SceneStack {
    pub fn new(layers: [Tensor<f32>; LAYERS]) -> Result<Self> {
        let shape = layers[0].shape().to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            bail!(
                Dimension,
                "object planes must be square 2D images, got {shape:?}"
            );
        }
        for l in &layers[1..] {
            if l.shape() != shape.as_slice() {
                bail!(
                    Dimension,
                    "object planes differ in extent: {shape:?} vs {:?}",
                    l.shape()
                );
            }
        }
        if layers.iter().any(|l| l.data().iter().any(|&v| !(v >= 0.0))) {
            bail!(Argument, "object intensities must be nonnegative");
        }
        Ok(SceneStack {
            layers,
            layer_spacing_um: LAYER_SPACING_UM,
            fov_um: FOV_UM,
        })
    }

    pub fn empty(side: usize) -> Self {
        let z = Tensor::zeros(&[side, side]);
        SceneStack {
            layers: [z.clone(), z.clone(), z],
            layer_spacing_um: LAYER_SPACING_UM,
            fov_um: FOV_UM,
        }
    }

    /// Scene with `image` on layer `z` and the other planes dark.
    pub fn single(z: usize, image: Tensor<f32>) -> Result<Self> {
        if !(1..=LAYERS).contains(&z) {
            bail!(Argument, "layer {z} out of range 1..=3");
        }
        let zero = Tensor::zeros(image.shape());
        let mut layers = [zero.clone(), zero.clone(), zero];
        layers[z - 1] = image;
        SceneStack::new(layers)
    }

    pub fn side(&self) -> usize {
        self.layers[0].shape()[0]
    }

    pub fn layer(&self, z: usize) -> &Tensor<f32> {
        &self.layers[z - 1]
    }

    pub fn layer_mut(&mut self, z: usize) -> &mut Tensor<f32> {
        &mut self.layers[z - 1]
    }
}
