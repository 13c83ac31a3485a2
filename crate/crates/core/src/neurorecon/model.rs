use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::diffcore::{
    BatchNormState, BnMode, Graph, NodeId, Padding, ParamId, ParamStore, Scalar, Tensor,
};
use crate::error::{bail, Error, Result};
use crate::kv::KvMap;
use crate::pipeline::container::{self, AnyTensor};
use crate::rng;

const MAGIC: &[u8; 4] = b"CCMM";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NetKind {
    /// Single-plane U-Net reconstructor.
    Ann1R,
    /// Three-way layer classifier.
    Ann1C,
    /// Three-plane U-Net reconstructor.
    Ann2,
}

impl NetKind {
    pub fn key(self) -> &'static str {
        match self {
            NetKind::Ann1R => "ann1_r",
            NetKind::Ann1C => "ann1_c",
            NetKind::Ann2 => "ann2",
        }
    }

    pub fn is_reconstructor(self) -> bool {
        self != NetKind::Ann1C
    }
}

impl fmt::Display for NetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ann1_r" => Ok(NetKind::Ann1R),
            "ann1_c" => Ok(NetKind::Ann1C),
            "ann2" => Ok(NetKind::Ann2),
            _ => bail!(Config, "unknown network kind {s:?}"),
        }
    }
}

/// Architecture hyperparameters. Inputs are square single-channel images.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub kind: NetKind,
    pub extent: usize,
    /// U-Net encoder levels.
    pub depth: usize,
    /// U-Net channels at the first level; doubled per level.
    pub base_channels: usize,
    pub kernel: usize,
    /// Classifier conv blocks; a pool follows every second one.
    pub classifier_blocks: usize,
    pub classifier_base: usize,
    pub classifier_cap: usize,
}

impl NetworkSpec {
    pub fn new(kind: NetKind, extent: usize) -> Self {
        NetworkSpec {
            kind,
            extent,
            depth: 3,
            base_channels: 16,
            kernel: 3,
            classifier_blocks: 8,
            classifier_base: 8,
            classifier_cap: 64,
        }
    }

    pub fn out_planes(&self) -> usize {
        match self.kind {
            NetKind::Ann1R => 1,
            NetKind::Ann2 => 3,
            NetKind::Ann1C => 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.extent == 0 || self.kernel == 0 || self.kernel % 2 == 0 {
            bail!(Config, "extent must be positive and the kernel odd");
        }
        match self.kind {
            NetKind::Ann1R | NetKind::Ann2 => {
                if self.depth == 0 || self.base_channels == 0 {
                    bail!(Config, "U-Net depth and base channels must be at least 1");
                }
                let f = 1usize << self.depth;
                if self.extent % f != 0 {
                    bail!(
                        Config,
                        "extent {} is not divisible by 2^{} = {f}",
                        self.extent,
                        self.depth
                    );
                }
            }
            NetKind::Ann1C => {
                let b = self.classifier_blocks;
                if b < 2 || b % 2 != 0 {
                    bail!(Config, "classifier needs an even number of blocks, got {b}");
                }
                if self.classifier_base == 0 || self.classifier_cap < self.classifier_base {
                    bail!(
                        Config,
                        "classifier channels: base {} cap {}",
                        self.classifier_base,
                        self.classifier_cap
                    );
                }
                let f = 1usize << (b / 2);
                if self.extent < f {
                    bail!(
                        Config,
                        "extent {} is smaller than 2^{} for {b} blocks",
                        self.extent,
                        b / 2
                    );
                }
                if self.extent % f != 0 {
                    bail!(
                        Config,
                        "extent {} is not divisible by {f} for {b} blocks",
                        self.extent
                    );
                }
            }
        }
        Ok(())
    }

    /// Output channels of classifier block `i`.
    pub fn classifier_channels(&self, i: usize) -> usize {
        (self.classifier_base << (i / 2)).min(self.classifier_cap)
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.insert("kind", self.kind);
        kv.insert("extent", self.extent);
        kv.insert("depth", self.depth);
        kv.insert("base_channels", self.base_channels);
        kv.insert("kernel", self.kernel);
        kv.insert("classifier_blocks", self.classifier_blocks);
        kv.insert("classifier_base", self.classifier_base);
        kv.insert("classifier_cap", self.classifier_cap);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self> {
        Ok(NetworkSpec {
            kind: kv.require::<String>("kind")?.parse()?,
            extent: kv.require("extent")?,
            depth: kv.require("depth")?,
            base_channels: kv.require("base_channels")?,
            kernel: kv.require("kernel")?,
            classifier_blocks: kv.require("classifier_blocks")?,
            classifier_base: kv.require("classifier_base")?,
            classifier_cap: kv.require("classifier_cap")?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Conv {
    w: ParamId,
    b: ParamId,
}

/// Parameters, batch-norm statistics and bookkeeping of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<T: Scalar = f32> {
    pub spec: NetworkSpec,
    pub params: ParamStore<T>,
    pub bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    convs: Vec<Conv>,
    fc: Option<Conv>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub seed: u64,
}

struct Builder<T: Scalar> {
    seed: u64,
    params: ParamStore<T>,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
    convs: Vec<Conv>,
}

impl<T: Scalar> Builder<T> {
    /// Draws from a stream keyed by the next parameter's index.
    fn normal(&self, shape: &[usize], std: f64) -> Tensor<T> {
        let mut r = rng::stream(self.seed, "init", self.params.len() as u64);
        let n = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| T::from_f64(n.sample(&mut r)))
    }

    fn conv(&mut self, name: &str, k: usize, cin: usize, cout: usize, std: f64) {
        let w = self.normal(&[k, k, cin, cout], std);
        let w = self.params.add(format!("{name}.w"), w);
        let b = self.params.add(format!("{name}.b"), Tensor::zeros(&[cout]));
        self.convs.push(Conv { w, b });
    }

    fn he_conv(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.conv(name, k, cin, cout, (2.0 / (k * k * cin) as f64).sqrt());
    }

    fn batch_norm(&mut self, name: &str, channels: usize) {
        let name = format!("{name}.bn");
        self.bn
            .push(BatchNormState::new(&mut self.params, &name, channels));
        self.bn_names.push(name);
    }

    fn dense_block(&mut self, name: &str, k: usize, cin: usize, cout: usize) {
        self.he_conv(&format!("{name}.conv1"), k, cin, cout);
        self.he_conv(&format!("{name}.conv2"), k, cout, cout);
        self.batch_norm(name, cout);
    }
}

fn unet_channels(spec: &NetworkSpec, level: usize) -> usize {
    spec.base_channels << level
}

fn build<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    spec.validate()?;
    let mut b = Builder {
        seed,
        params: ParamStore::new(),
        bn: Vec::new(),
        bn_names: Vec::new(),
        convs: Vec::new(),
    };
    let k = spec.kernel;
    let mut fc = None;
    match spec.kind {
        NetKind::Ann1R | NetKind::Ann2 => {
            let mut cin = 1;
            for l in 0..spec.depth {
                let c = unet_channels(spec, l);
                b.dense_block(&format!("enc{l}"), k, cin, c);
                cin = c;
            }
            b.dense_block("mid", k, cin, unet_channels(spec, spec.depth));
            for l in (0..spec.depth).rev() {
                let c = unet_channels(spec, l);
                b.dense_block(&format!("dec{l}"), k, unet_channels(spec, l + 1) + c, c);
            }
            let base = spec.base_channels;
            b.conv(
                "head",
                1,
                base,
                spec.out_planes(),
                (1.0 / base as f64).sqrt(),
            );
        }
        NetKind::Ann1C => {
            let mut cin = 1;
            for i in 0..spec.classifier_blocks {
                let c = spec.classifier_channels(i);
                b.he_conv(&format!("block{i}.conv"), k, cin, c);
                b.batch_norm(&format!("block{i}"), c);
                cin = c;
            }
            let w = b.normal(&[cin, 3], (1.0 / cin as f64).sqrt());
            let w = b.params.add("fc.w", w);
            let bias = b.params.add("fc.b", Tensor::zeros(&[3]));
            fc = Some(Conv { w, b: bias });
        }
    }
    Ok(ModelState {
        spec: spec.clone(),
        params: b.params,
        bn: b.bn,
        bn_names: b.bn_names,
        convs: b.convs,
        fc,
        step: 0,
        seed,
    })
}

fn expect_kind(spec: &NetworkSpec, kind: NetKind) -> Result<()> {
    if spec.kind != kind {
        bail!(Config, "spec describes {}, not {kind}", spec.kind);
    }
    Ok(())
}

pub fn build_ann1_r<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    expect_kind(spec, NetKind::Ann1R)?;
    build(spec, seed)
}

pub fn build_ann1_c<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    expect_kind(spec, NetKind::Ann1C)?;
    build(spec, seed)
}

pub fn build_ann2<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    expect_kind(spec, NetKind::Ann2)?;
    build(spec, seed)
}

/// Builds whichever network `spec` describes.
pub fn build_model<T: Scalar>(spec: &NetworkSpec, seed: u64) -> Result<ModelState<T>> {
    build(spec, seed)
}

/// Plane `index` of an `[H, W, P]` output as an `[H, W]` image.
pub fn plane<T: Scalar>(stack: &Tensor<T>, index: usize) -> Result<Tensor<T>> {
    let &[h, w, p] = stack.shape() else {
        bail!(
            Dimension,
            "expected an [H, W, P] stack, got {:?}",
            stack.shape()
        );
    };
    if index >= p {
        bail!(Argument, "plane {index} out of range for {p} planes");
    }
    Tensor::new(
        &[h, w],
        stack
            .data()
            .iter()
            .skip(index)
            .step_by(p)
            .copied()
            .collect(),
    )
}

impl<T: Scalar> ModelState<T> {
    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    /// Appends the network to `g`; `x` is `[B, H, W, 1]`. Train mode updates
    /// the running batch-norm statistics.
    pub fn forward(&mut self, g: &mut Graph<T>, x: NodeId, mode: BnMode) -> Result<NodeId> {
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.run(&mut bn, g, x, mode);
        self.bn = bn;
        out
    }

    /// Eval-mode forward pass over a `[B, H, W, 1]` batch.
    pub fn predict(&self, batch: Tensor<T>) -> Result<Tensor<T>> {
        // Eval mode never writes the statistics; the copy only satisfies the borrow.
        let mut bn = self.bn.clone();
        let mut g = Graph::new();
        let x = g.input(batch)?;
        let y = self.run(&mut bn, &mut g, x, BnMode::Eval)?;
        Ok(g.into_value(y))
    }

    fn run(
        &self,
        bn: &mut [BatchNormState<T>],
        g: &mut Graph<T>,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let &[_, h, w, c] = g.value(x).shape() else {
            bail!(
                Dimension,
                "network input must be [B, H, W, 1], got {:?}",
                g.value(x).shape()
            );
        };
        if h != self.spec.extent || w != self.spec.extent || c != 1 {
            bail!(
                Dimension,
                "network expects {0}×{0}×1 inputs, got {h}×{w}×{c}",
                self.spec.extent
            );
        }
        match self.spec.kind {
            NetKind::Ann1R | NetKind::Ann2 => self.forward_unet(bn, g, x, mode),
            NetKind::Ann1C => self.forward_classifier(bn, g, x, mode),
        }
    }

    fn conv(&self, g: &mut Graph<T>, x: NodeId, i: usize) -> Result<NodeId> {
        let Conv { w, b } = self.convs[i];
        let w = g.param(&self.params, w)?;
        let b = g.param(&self.params, b)?;
        g.conv2d(x, w, Some(b), 1, Padding::Same)
    }

    fn dense_block(
        &self,
        bn: &mut [BatchNormState<T>],
        g: &mut Graph<T>,
        x: NodeId,
        block: usize,
        mode: BnMode,
    ) -> Result<NodeId> {
        let y = self.conv(g, x, 2 * block)?;
        let y = g.relu(y)?;
        let y = self.conv(g, y, 2 * block + 1)?;
        let y = g.relu(y)?;
        g.batch_norm(&self.params, y, &mut bn[block], mode)
    }

    fn forward_unet(
        &self,
        bn: &mut [BatchNormState<T>],
        g: &mut Graph<T>,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let depth = self.spec.depth;
        let mut skips = Vec::with_capacity(depth);
        let mut y = x;
        for l in 0..depth {
            let s = self.dense_block(bn, g, y, l, mode)?;
            skips.push(s);
            y = g.max_pool2(s)?;
        }
        y = self.dense_block(bn, g, y, depth, mode)?;
        for (i, l) in (0..depth).rev().enumerate() {
            y = g.upsample2_concat(y, skips[l])?;
            y = self.dense_block(bn, g, y, depth + 1 + i, mode)?;
        }
        let y = self.conv(g, y, self.convs.len() - 1)?;
        g.sigmoid(y)
    }

    fn forward_classifier(
        &self,
        bn: &mut [BatchNormState<T>],
        g: &mut Graph<T>,
        x: NodeId,
        mode: BnMode,
    ) -> Result<NodeId> {
        let mut y = x;
        for i in 0..self.spec.classifier_blocks {
            y = self.conv(g, y, i)?;
            y = g.relu(y)?;
            y = g.batch_norm(&self.params, y, &mut bn[i], mode)?;
            if i % 2 == 1 {
                y = g.max_pool2(y)?;
            }
        }
        let y = g.global_avg_pool(y)?;
        let fc = self.fc.expect("classifier has a dense head");
        let w = g.param(&self.params, fc.w)?;
        let b = g.param(&self.params, fc.b)?;
        let y = g.linear(y, w, b)?;
        g.softmax(y)
    }

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = self
            .params
            .iter()
            .map(|p| (p.name.clone(), &p.value))
            .collect();
        for (name, s) in self.bn_names.iter().zip(&self.bn) {
            out.push((format!("{name}.running_mean"), &s.running_mean));
            out.push((format!("{name}.running_var"), &s.running_var));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut kv = KvMap::default();
        self.spec.to_kv(&mut kv);
        kv.insert("seed", self.seed);
        kv.insert("step", self.step);
        kv.insert("dtype", T::DTYPE as u8);
        let header = kv.render();
        let mut out = MAGIC.to_vec();
        out.push(VERSION);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            container::encode(t, &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            bail!(Format, "not a model file (bad magic)");
        }
        let version = r.take(1)?[0];
        if version != VERSION {
            bail!(Format, "unsupported model file version {version}");
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::Format("model header is not UTF-8".into()))?;
        let kv = KvMap::parse(header)?;
        if kv.require::<u8>("dtype")? != T::DTYPE as u8 {
            bail!(Mismatch, "model file stores a different element type");
        }
        let spec = NetworkSpec::from_kv(&kv)?;
        let mut model: ModelState<T> = build(&spec, kv.require("seed")?)?;
        model.step = kv.require("step")?;
        let expected: Vec<(String, Vec<usize>)> = model
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            bail!(
                Mismatch,
                "model file has {count} tensors, spec implies {}",
                expected.len()
            );
        }
        let mut values = Vec::with_capacity(count);
        for (want_name, want_shape) in &expected {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != want_name {
                bail!(Mismatch, "expected tensor {want_name}, found {name}");
            }
            let (t, used) = container::decode(&bytes[r.pos..])?;
            r.pos += used;
            let t = cast_exact::<T>(t)?;
            if t.shape() != want_shape.as_slice() {
                bail!(
                    Mismatch,
                    "tensor {name}: shape {:?}, spec implies {want_shape:?}",
                    t.shape()
                );
            }
            values.push(t);
        }
        if r.pos != bytes.len() {
            bail!(
                Format,
                "{} trailing bytes after model tensors",
                bytes.len() - r.pos
            );
        }
        let mut it = values.into_iter();
        for p in model.params.iter_mut() {
            p.value = it.next().expect("counted");
        }
        for s in &mut model.bn {
            s.running_mean = it.next().expect("counted");
            s.running_var = it.next().expect("counted");
        }
        Ok(model)
    }
}

fn cast_exact<T: Scalar>(t: AnyTensor) -> Result<Tensor<T>> {
    match t {
        AnyTensor::F32(t) if T::DTYPE == crate::diffcore::Dtype::F32 => Ok(t.cast()),
        AnyTensor::F64(t) if T::DTYPE == crate::diffcore::Dtype::F64 => Ok(t.cast()),
        _ => bail!(Mismatch, "tensor element type differs from the model's"),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let Some(s) = self.bytes.get(self.pos..self.pos + n) else {
            bail!(Format, "model file truncated at byte {}", self.pos);
        };
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn save_model<T: Scalar>(model: &ModelState<T>, path: &Path) -> Result<()> {
    fs::write(path, model.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ModelState::from_bytes(&bytes)
}

/// Loads a model and checks that it was built for `spec`.
pub fn load_model_for(path: &Path, spec: &NetworkSpec) -> Result<ModelState> {
    let m = load_model(path)?;
    if m.spec.kind != spec.kind {
        bail!(
            Mismatch,
            "{} holds a {} model, expected {}",
            path.display(),
            m.spec.kind,
            spec.kind
        );
    }
    if m.spec.extent != spec.extent {
        bail!(
            Mismatch,
            "{} was trained for {e}×{e} inputs, expected {want}×{want}",
            path.display(),
            e = m.spec.extent,
            want = spec.extent
        );
    }
    if m.spec != *spec {
        bail!(
            Mismatch,
            "{} architecture differs from the requested spec",
            path.display()
        );
    }
    Ok(m)
}

impl ModelState<f32> {
    fn image_batch(&self, ccm: &Tensor<f32>) -> Result<Tensor<f32>> {
        let e = self.spec.extent;
        match *ccm.shape() {
            [h, w] | [h, w, 1] if h == e && w == e => ccm.clone().reshape(&[1, e, e, 1]),
            _ => bail!(
                Dimension,
                "model expects a {e}×{e} image, got {:?}",
                ccm.shape()
            ),
        }
    }

    /// Reconstruction: `[H, W]` for ANN1_r, `[H, W, 3]` for ANN2.
    pub fn infer_reconstruct(&self, ccm: &Tensor<f32>) -> Result<Tensor<f32>> {
        if !self.spec.kind.is_reconstructor() {
            bail!(
                Argument,
                "{} is not a reconstruction network",
                self.spec.kind
            );
        }
        let out = self.predict(self.image_batch(ccm)?)?;
        let e = self.spec.extent;
        match self.spec.out_planes() {
            1 => out.reshape(&[e, e]),
            p => out.reshape(&[e, e, p]),
        }
    }

    /// Predicted layer `1..=3` and the class probabilities.
    pub fn infer_classify(&self, ccm: &Tensor<f32>) -> Result<(usize, Vec<f32>)> {
        if self.spec.kind != NetKind::Ann1C {
            bail!(
                Argument,
                "{} is not a classification network",
                self.spec.kind
            );
        }
        let probs = self.predict(self.image_batch(ccm)?)?.into_data();
        Ok((argmax(&probs) + 1, probs))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
