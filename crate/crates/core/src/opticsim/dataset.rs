use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use sha2::{Digest, Sha256};

use super::forward::{correlation, ForwardConfig, ForwardModel};
use super::phantom::{render_beads, render_neuron};
use super::{layer_depth_um, SceneStack, LAYERS};
use crate::diffcore::Tensor;
use crate::error::{bail, Error, Result};
use crate::image::{normalize_minmax, to_f64, to_image};
use crate::kv::KvMap;
use crate::pipeline::container;
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.txt";
const MANIFEST_FORMAT: &str = "ccm-dataset";
const SAMPLE_TABLE: &str = "[samples]";
const TABLE_HEADER: &str = "id\tfile\tlabel\tsplit\tz_um\tsha256";

/// Measurements of identical scenes at different layers must correlate
/// less than this on average.
pub const MAX_LAYER_CORRELATION: f64 = 0.95;
const SEPARATION_PROBES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerLabel {
    Layer(u8),
    Merged,
}

impl fmt::Display for LayerLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerLabel::Layer(z) => write!(f, "{z}"),
            LayerLabel::Merged => f.write_str("merged"),
        }
    }
}

impl FromStr for LayerLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" => Ok(LayerLabel::Layer(1)),
            "2" => Ok(LayerLabel::Layer(2)),
            "3" => Ok(LayerLabel::Layer(3)),
            "merged" => Ok(LayerLabel::Merged),
            _ => bail!(Format, "unknown layer label {s:?}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => bail!(Format, "unknown split {s:?}"),
        }
    }
}

/// One measurement with its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: usize,
    /// Measured image, `[M, M]`, in `[0, 1]`.
    pub ccm: Tensor<f32>,
    /// Ground-truth object plane, `[N, N]`, in `[0, 1]`.
    pub reference: Tensor<f32>,
    pub label: LayerLabel,
    pub z_um: f64,
}

impl Sample {
    /// Layer index `1..=3`; merged samples have none.
    pub fn layer(&self) -> Result<usize> {
        match self.label {
            LayerLabel::Layer(z) => Ok(z as usize),
            LayerLabel::Merged => bail!(
                Argument,
                "sample {} is merged and has no single layer",
                self.id
            ),
        }
    }

    /// `[N, N, 3]` target with the reference on its own layer's plane and
    /// zeros elsewhere.
    pub fn plane_target(&self) -> Result<Tensor<f32>> {
        let z = self.layer()?;
        let (h, w) = (self.reference.shape()[0], self.reference.shape()[1]);
        let mut t = Tensor::zeros(&[h, w, LAYERS]);
        for (i, &v) in self.reference.data().iter().enumerate() {
            t.data_mut()[i * LAYERS + z - 1] = v;
        }
        Ok(t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Beads,
    Neurons,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Beads => "beads",
            ObjectKind::Neurons => "neurons",
        }
    }
}

impl FromStr for ObjectKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beads" => Ok(ObjectKind::Beads),
            "neurons" => Ok(ObjectKind::Neurons),
            _ => bail!(
                Config,
                "unknown object kind {s:?} (expected beads or neurons)"
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub side: usize,
    pub meas_side: usize,
    pub per_layer: usize,
    pub test_count: usize,
    pub noise_sigma: f64,
    pub conditioning: f64,
    pub object: ObjectKind,
    pub bead_diameter_px: f64,
    pub beads_min: usize,
    pub beads_max: usize,
    pub neuron_branches: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            side: 32,
            meas_side: 32,
            per_layer: 600,
            test_count: 150,
            noise_sigma: 0.01,
            conditioning: 1.0,
            object: ObjectKind::Beads,
            bead_diameter_px: 3.0,
            beads_min: 1,
            beads_max: 5,
            neuron_branches: super::DEFAULT_BRANCHES,
        }
    }
}

impl DatasetConfig {
    pub fn forward_config(&self) -> ForwardConfig {
        ForwardConfig {
            object_side: self.side,
            meas_side: self.meas_side,
            seed: self.seed,
            conditioning: self.conditioning,
            noise_sigma: self.noise_sigma,
            ..ForwardConfig::default()
        }
    }

    pub fn forward_model(&self) -> Result<ForwardModel> {
        ForwardModel::new(self.forward_config())
    }

    pub fn total(&self) -> usize {
        self.per_layer * LAYERS
    }

    /// `(train, validation, test)`: test is taken first, then a tenth of the rest.
    pub fn split_counts(&self) -> Result<(usize, usize, usize)> {
        let total = self.total();
        if self.test_count >= total {
            bail!(
                Config,
                "test count {} leaves nothing of {total} samples to train on",
                self.test_count
            );
        }
        let rest = total - self.test_count;
        let val = rest / 10;
        if val == 0 {
            bail!(
                Config,
                "{rest} non-test samples are too few for a validation split"
            );
        }
        Ok((rest - val, val, self.test_count))
    }

    pub fn validate(&self) -> Result<()> {
        if self.side == 0 || self.meas_side == 0 {
            bail!(Config, "image extents must be at least 1");
        }
        if self.beads_min > self.beads_max {
            bail!(
                Config,
                "beads_min {} exceeds beads_max {}",
                self.beads_min,
                self.beads_max
            );
        }
        self.split_counts().map(|_| ())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("seed", self.seed);
        kv.insert("side", self.side);
        kv.insert("meas_side", self.meas_side);
        kv.insert("per_layer", self.per_layer);
        kv.insert("test_count", self.test_count);
        kv.insert("noise_sigma", self.noise_sigma);
        kv.insert("conditioning", self.conditioning);
        kv.insert("object", self.object.name());
        kv.insert("bead_diameter_px", self.bead_diameter_px);
        kv.insert("beads_min", self.beads_min);
        kv.insert("beads_max", self.beads_max);
        kv.insert("neuron_branches", self.neuron_branches);
    }

    /// Overrides every field present in `kv`.
    pub fn apply_kv(&mut self, kv: &KvMap) -> Result<()> {
        kv.apply("seed", &mut self.seed)?;
        kv.apply("side", &mut self.side)?;
        kv.apply("meas_side", &mut self.meas_side)?;
        kv.apply("per_layer", &mut self.per_layer)?;
        kv.apply("test_count", &mut self.test_count)?;
        kv.apply("noise_sigma", &mut self.noise_sigma)?;
        kv.apply("conditioning", &mut self.conditioning)?;
        if let Some(o) = kv.raw("object") {
            self.object = o.parse()?;
        }
        kv.apply("bead_diameter_px", &mut self.bead_diameter_px)?;
        kv.apply("beads_min", &mut self.beads_min)?;
        kv.apply("beads_max", &mut self.beads_max)?;
        kv.apply("neuron_branches", &mut self.neuron_branches)?;
        Ok(())
    }

    /// Ground-truth object of sample `index`, a pure function of `(seed, index)`.
    pub fn render_object(&self, index: usize) -> Result<Tensor<f32>> {
        let mut r = rng::stream(self.seed, "object", index as u64);
        let object_seed: u64 = r.random();
        let img = match self.object {
            ObjectKind::Beads => {
                let count = r.random_range(self.beads_min..=self.beads_max);
                render_beads(self.side, count, self.bead_diameter_px, object_seed)?
            }
            ObjectKind::Neurons => render_neuron(self.side, object_seed, self.neuron_branches)?,
        };
        let mut v = to_f64(&img);
        normalize_minmax(&mut v);
        Ok(to_image(self.side, self.side, &v))
    }
}

/// Samples in generation order with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub merged: bool,
    pub samples: Vec<Sample>,
    pub splits: Vec<Split>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(x, _)| x)
            .collect()
    }

    /// Owned copy of one split.
    pub fn split_owned(&self, split: Split) -> Vec<Sample> {
        self.split(split).into_iter().cloned().collect()
    }
}

/// Layer `z` sample of a scene carrying `object` alone.
fn simulate_sample(
    model: &ForwardModel,
    config: &DatasetConfig,
    index: usize,
    z: usize,
) -> Result<Sample> {
    let object = config.render_object(index)?;
    let scene = SceneStack::single(z, object.clone())?;
    let noise_seed = rng::stream(config.seed, "measurement", index as u64).random::<u64>();
    let ccm = model.simulate_measurement(&scene, Some(noise_seed))?;
    Ok(Sample {
        id: index,
        ccm,
        reference: object,
        label: LayerLabel::Layer(z as u8),
        z_um: layer_depth_um(z),
    })
}

/// Mean pairwise correlation of noiseless measurements of one scene moved
/// between layers, averaged over a few probe objects.
pub fn layer_separation(model: &ForwardModel, config: &DatasetConfig) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for k in 0..SEPARATION_PROBES {
        let object = config.render_object(usize::MAX - k)?;
        let ys = (1..=LAYERS)
            .map(|z| model.simulate_raw(&SceneStack::single(z, object.clone())?, None))
            .collect::<Result<Vec<_>>>()?;
        for i in 0..LAYERS {
            for j in i + 1..LAYERS {
                total += correlation(&ys[i], &ys[j]);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Generates the full single-layer dataset in memory.
pub fn generate_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let (train, val, _test) = config.split_counts()?;
    let model = config.forward_model()?;
    let sep = layer_separation(&model, config)?;
    if sep >= MAX_LAYER_CORRELATION {
        bail!(
            Generation,
            "layers are not separable: mean measurement correlation {sep:.4} ≥ {MAX_LAYER_CORRELATION}"
        );
    }
    let total = config.total();
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut rng::stream(config.seed, "shuffle", 0));
    let mut samples = Vec::with_capacity(total);
    let mut splits = Vec::with_capacity(total);
    for (pos, &index) in order.iter().enumerate() {
        samples.push(simulate_sample(&model, config, index, index % LAYERS + 1)?);
        splits.push(if pos < config.test_count {
            Split::Test
        } else if pos < config.test_count + val {
            Split::Validation
        } else {
            Split::Train
        });
    }
    debug_assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), train);
    Ok(Dataset {
        config: config.clone(),
        merged: false,
        samples,
        splits,
    })
}

/// Sums three single-layer samples (one per layer) and renormalizes.
pub fn merge_layers(samples: [&Sample; LAYERS]) -> Result<Sample> {
    let mut labels: Vec<usize> = samples.iter().map(|s| s.layer()).collect::<Result<_>>()?;
    labels.sort_unstable();
    if labels != [1, 2, 3] {
        bail!(
            Argument,
            "merge needs one sample per layer, got layers {labels:?}"
        );
    }
    let (ccm_shape, ref_shape) = (samples[0].ccm.shape(), samples[0].reference.shape());
    if samples
        .iter()
        .any(|s| s.ccm.shape() != ccm_shape || s.reference.shape() != ref_shape)
    {
        bail!(Dimension, "merged samples must share extents");
    }
    // Summation order follows layer index so the result is input-order independent.
    let mut ordered = samples;
    ordered.sort_by_key(|s| s.label);
    let sum = |get: fn(&Sample) -> &Tensor<f32>| -> Vec<f64> {
        let mut acc = vec![0.0; get(ordered[0]).len()];
        for s in &ordered {
            for (a, &v) in acc.iter_mut().zip(get(s).data()) {
                *a += v as f64;
            }
        }
        normalize_minmax(&mut acc);
        acc
    };
    let ccm = sum(|s| &s.ccm);
    let reference = sum(|s| &s.reference);
    Ok(Sample {
        id: 0,
        ccm: to_image(ccm_shape[0], ccm_shape[1], &ccm),
        reference: to_image(ref_shape[0], ref_shape[1], &reference),
        label: LayerLabel::Merged,
        z_um: layer_depth_um(2),
    })
}

/// Each single-layer sample takes part in this many merged samples.
pub const MERGE_ROUNDS: usize = 3;

/// Merges triples of samples (one per layer) within each split.
///
/// Round 0 pairs the k-th sample of every layer; later rounds pair seeded
/// permutations, so each split yields `MERGE_ROUNDS · n` merged samples from
/// `n` samples per layer.
pub fn merged_dataset(source: &Dataset) -> Result<Dataset> {
    if source.merged {
        bail!(Argument, "dataset is already merged");
    }
    let mut samples = Vec::new();
    let mut splits = Vec::new();
    for (si, split) in Split::ALL.into_iter().enumerate() {
        let members = source.split(split);
        let by_layer: Vec<Vec<&Sample>> = (1..=LAYERS)
            .map(|z| {
                members
                    .iter()
                    .copied()
                    .filter(|s| s.label == LayerLabel::Layer(z as u8))
                    .collect()
            })
            .collect();
        let n = by_layer.iter().map(Vec::len).min().unwrap_or(0);
        if n == 0 {
            bail!(
                Generation,
                "{} split lacks a sample of every layer to merge",
                split.name()
            );
        }
        for round in 0..MERGE_ROUNDS {
            let picks: Vec<Vec<usize>> = (0..LAYERS)
                .map(|z| {
                    let mut idx: Vec<usize> = (0..n).collect();
                    if round > 0 {
                        let key = ((si * MERGE_ROUNDS + round) * LAYERS + z) as u64;
                        idx.shuffle(&mut rng::stream(source.config.seed, "merge", key));
                    }
                    idx
                })
                .collect();
            for k in 0..n {
                let mut m = merge_layers([
                    by_layer[0][picks[0][k]],
                    by_layer[1][picks[1][k]],
                    by_layer[2][picks[2][k]],
                ])?;
                m.id = samples.len();
                samples.push(m);
                splits.push(split);
            }
        }
    }
    Ok(Dataset {
        config: source.config.clone(),
        merged: true,
        samples,
        splits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: usize,
    pub file: String,
    pub label: LayerLabel,
    pub split: Split,
    pub z_um: f64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub merged: bool,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count_label(&self, label: LayerLabel) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }

    pub fn ids(&self, split: Split) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id)
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut kv = KvMap::default();
        kv.insert("format", MANIFEST_FORMAT);
        kv.insert("version", 1);
        kv.insert("merged", self.merged);
        self.config.to_kv(&mut kv);
        for z in 1..=LAYERS {
            kv.insert(
                &format!("count.layer{z}"),
                self.count_label(LayerLabel::Layer(z as u8)),
            );
        }
        kv.insert("count.merged", self.count_label(LayerLabel::Merged));
        for s in Split::ALL {
            kv.insert(&format!("split.{}", s.name()), self.ids(s).len());
        }
        let mut text = kv.render();
        text.push_str(SAMPLE_TABLE);
        text.push('\n');
        text.push_str(TABLE_HEADER);
        text.push('\n');
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.file,
                e.label,
                e.split.name(),
                e.z_um,
                e.sha256
            ));
        }
        text
    }

    /// SHA-256 of the manifest text.
    pub fn digest(&self) -> String {
        hex_digest(self.to_text().as_bytes())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let Some((head, table)) = text.split_once(&format!("{SAMPLE_TABLE}\n")) else {
            bail!(Format, "manifest has no sample table");
        };
        let kv = KvMap::parse(head)?;
        if kv.raw("format") != Some(MANIFEST_FORMAT) {
            bail!(Format, "not a dataset manifest");
        }
        if kv.require::<u32>("version")? != 1 {
            bail!(Format, "unsupported manifest version");
        }
        let mut config = DatasetConfig::default();
        config.apply_kv(&kv)?;
        let mut lines = table.lines();
        if lines.next() != Some(TABLE_HEADER) {
            bail!(Format, "sample table header missing");
        }
        let mut entries = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                bail!(Format, "malformed sample row {line:?}");
            }
            let num = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Format(format!("bad number {s:?}")))
            };
            entries.push(ManifestEntry {
                id: num(f[0])? as usize,
                file: f[1].to_string(),
                label: f[2].parse()?,
                split: f[3].parse()?,
                z_um: num(f[4])?,
                sha256: f[5].to_string(),
            });
        }
        Ok(DatasetManifest {
            config,
            merged: kv.require("merged")?,
            entries,
        })
    }
}

fn hex_digest(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn sample_bytes(s: &Sample) -> Vec<u8> {
    let mut b = container::to_bytes(&s.ccm);
    container::encode(&s.reference, &mut b);
    b
}

/// Writes one container file per sample plus the manifest.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(ds.samples.len());
    for (s, &split) in ds.samples.iter().zip(&ds.splits) {
        let file = format!("sample_{:06}.tnsr", s.id);
        let bytes = sample_bytes(s);
        let path = dir.join(&file);
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        entries.push(ManifestEntry {
            id: s.id,
            file,
            label: s.label,
            split,
            z_um: s.z_um,
            sha256: hex_digest(&bytes),
        });
    }
    let manifest = DatasetManifest {
        config: ds.config.clone(),
        merged: ds.merged,
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn build_dataset(config: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    write_dataset(&generate_dataset(config)?, dir)
}

/// Reads a dataset directory, verifying every file against its digest.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest = DatasetManifest::parse(&text)?;
    let mut samples = Vec::with_capacity(manifest.entries.len());
    let mut splits = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let p = dir.join(&e.file);
        let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
        if hex_digest(&bytes) != e.sha256 {
            bail!(Format, "{} does not match its manifest digest", p.display());
        }
        let parts = container::decode_all(&bytes)?;
        let [ccm, reference]: [container::AnyTensor; 2] = parts
            .try_into()
            .map_err(|_| Error::Format(format!("{}: expected two tensors", p.display())))?;
        samples.push(Sample {
            id: e.id,
            ccm: ccm.into_f32()?,
            reference: reference.into_f32()?,
            label: e.label,
            z_um: e.z_um,
        });
        splits.push(e.split);
    }
    Ok(Dataset {
        config: manifest.config,
        merged: manifest.merged,
        samples,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DatasetConfig {
        DatasetConfig {
            side: 16,
            meas_side: 16,
            per_layer: 100,
            test_count: 30,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn split_arithmetic() {
        assert_eq!(tiny().split_counts().unwrap(), (243, 27, 30));
        let d = DatasetConfig::default();
        assert_eq!(d.split_counts().unwrap(), (1485, 165, 150));
        let bad = DatasetConfig {
            per_layer: 3,
            test_count: 5,
            ..tiny()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn generated_dataset_contract() {
        let ds = generate_dataset(&tiny()).unwrap();
        assert_eq!(ds.split(Split::Train).len(), 243);
        assert_eq!(ds.split(Split::Validation).len(), 27);
        assert_eq!(ds.split(Split::Test).len(), 30);
        for z in 1..=3u8 {
            assert_eq!(
                ds.samples
                    .iter()
                    .filter(|s| s.label == LayerLabel::Layer(z))
                    .count(),
                100
            );
        }
        for s in &ds.samples {
            for img in [&s.ccm, &s.reference] {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            assert_eq!(s.z_um, layer_depth_um(s.layer().unwrap()));
        }
        let mut ids: Vec<usize> = ds.samples.iter().map(|s| s.id).collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..300).collect::<Vec<_>>());
    }

    #[test]
    fn layers_are_separable() {
        let c = DatasetConfig::default();
        let sep = layer_separation(&c.forward_model().unwrap(), &c).unwrap();
        assert!(sep < MAX_LAYER_CORRELATION, "{sep}");
    }

    #[test]
    fn write_load_round_trip_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_layer: 12,
            test_count: 6,
            ..tiny()
        };
        let m1 = build_dataset(&cfg, &dir.path().join("a")).unwrap();
        let m2 = build_dataset(&cfg, &dir.path().join("b")).unwrap();
        assert_eq!(m1.digest(), m2.digest());
        let text = fs::read_to_string(dir.path().join("a").join(MANIFEST_FILE)).unwrap();
        assert_eq!(DatasetManifest::parse(&text).unwrap(), m1);
        let back = load_dataset(&dir.path().join("a")).unwrap();
        assert_eq!(back, generate_dataset(&cfg).unwrap());
        let other =
            build_dataset(&DatasetConfig { seed: 1, ..cfg }, &dir.path().join("c")).unwrap();
        assert_ne!(other.digest(), m1.digest());
    }

    #[test]
    fn corrupted_sample_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DatasetConfig {
            per_layer: 12,
            test_count: 6,
            ..tiny()
        };
        let m = build_dataset(&cfg, dir.path()).unwrap();
        let p = dir.path().join(&m.entries[0].file);
        let mut b = fs::read(&p).unwrap();
        let last = b.len() - 1;
        b[last] ^= 1;
        fs::write(&p, b).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Format(_))));
    }

    fn sample(z: u8, side: usize, f: impl Fn(usize) -> f32) -> Sample {
        Sample {
            id: z as usize,
            ccm: Tensor::from_fn(&[side, side], &f),
            reference: Tensor::from_fn(&[side, side], |i| f(i) * 0.5),
            label: LayerLabel::Layer(z),
            z_um: layer_depth_um(z as usize),
        }
    }

    #[test]
    fn merge_with_dark_layers_is_renormalized_original() {
        let a = sample(1, 4, |i| i as f32 / 15.0);
        let b = sample(2, 4, |_| 0.0);
        let c = sample(3, 4, |_| 0.0);
        let m = merge_layers([&a, &b, &c]).unwrap();
        assert_eq!(m.label, LayerLabel::Merged);
        let mut expect = to_f64(&a.reference);
        normalize_minmax(&mut expect);
        assert_eq!(m.reference, to_image(4, 4, &expect));
        assert_eq!(m.ccm, a.ccm);
    }

    #[test]
    fn merge_is_permutation_invariant_and_checks_labels() {
        let a = sample(1, 4, |i| (i as f32 * 0.37).sin().abs());
        let b = sample(2, 4, |i| (i as f32 * 0.11).cos().abs());
        let c = sample(3, 4, |i| ((i * 7 % 5) as f32) / 4.0);
        let m = merge_layers([&a, &b, &c]).unwrap();
        assert_eq!(m, merge_layers([&c, &a, &b]).unwrap());
        assert_eq!(m, merge_layers([&b, &c, &a]).unwrap());
        assert!(matches!(
            merge_layers([&a, &a, &c]),
            Err(Error::Argument(_))
        ));
        let raw_max = (0..16)
            .map(|i| a.ccm.data()[i] + b.ccm.data()[i] + c.ccm.data()[i])
            .fold(0.0f32, f32::max);
        assert!(raw_max <= a.ccm.max_value() + b.ccm.max_value() + c.ccm.max_value());
    }

    #[test]
    fn merged_dataset_targets_are_normalized_sums() {
        let ds = generate_dataset(&DatasetConfig {
            per_layer: 30,
            test_count: 15,
            ..tiny()
        })
        .unwrap();
        let merged = merged_dataset(&ds).unwrap();
        assert!(merged.merged);
        assert!(!merged.split(Split::Test).is_empty());
        for s in &merged.samples {
            assert_eq!(s.label, LayerLabel::Merged);
            assert!(s.layer().is_err());
        }
        assert_eq!(merged, merged_dataset(&ds).unwrap());
    }

    #[test]
    fn plane_target_places_reference() {
        let s = sample(2, 3, |i| i as f32 / 8.0);
        let t = s.plane_target().unwrap();
        assert_eq!(t.shape(), &[3, 3, 3]);
        for i in 0..9 {
            assert_eq!(t.data()[i * 3], 0.0);
            assert_eq!(t.data()[i * 3 + 1], s.reference.data()[i]);
            assert_eq!(t.data()[i * 3 + 2], 0.0);
        }
    }
}
