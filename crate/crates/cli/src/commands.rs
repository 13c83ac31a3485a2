//! One function per subcommand. Reports are `key=value` text; wall-clock
//! values go under `reports/timing/` so the rest compares byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use ccm_core::diffcore::Tensor;
use ccm_core::kv::KvMap;
use ccm_core::linrecon::{fit_calibration, LinearReconstructor, RankPolicy};
use ccm_core::metrics::{bench as run_bench, mae, ssim, BenchModels, MetricReport};
use ccm_core::neurorecon::{
    build_model, evaluate, load_model, plane, retrain_star, save_model, train as train_net,
    ModelState, NetKind, NetworkSpec, TrainConfig,
};
use ccm_core::opticsim::{
    generate_dataset, layer_separation, load_dataset, merged_dataset, write_dataset, Dataset,
    DatasetConfig, DatasetManifest, LayerLabel, Sample, Split, FOV_UM, MANIFEST_FILE,
};
use ccm_core::pipeline::container::{read_tensor, write_tensor};
use ccm_core::pipeline::{
    assemble_volume, export_pgm, insertion_scan, read_volume, write_volume, Phantom, ScanConfig,
    DEFAULT_Z_STEP_UM,
};
use ccm_core::rng::derive_seed;

use crate::settings::Settings;

/// Beads in the default insertion-scan phantom.
const DEFAULT_PHANTOM_BEADS: usize = 40;
/// Default phantom slab: deep enough that a 700 µm scan never runs out.
const DEFAULT_PHANTOM_DEPTH_UM: f64 = 800.0;
const DEFAULT_BENCH_REPEATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Net {
    Ann1R,
    Ann1C,
    Ann2,
    Star,
    Svd,
}

impl FromStr for Net {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ann1_r" => Net::Ann1R,
            "ann1_c" => Net::Ann1C,
            "ann2" => Net::Ann2,
            "ann1_r_star" => Net::Star,
            "svd" => Net::Svd,
            _ => bail!("unknown net {s:?} (expected ann1_r, ann1_c, ann2, ann1_r_star or svd)"),
        })
    }
}

impl Net {
    fn key(self) -> &'static str {
        match self {
            Net::Ann1R => "ann1_r",
            Net::Ann1C => "ann1_c",
            Net::Ann2 => "ann2",
            Net::Star => "ann1_r_star",
            Net::Svd => "svd",
        }
    }

    fn kind(self) -> Option<NetKind> {
        match self {
            Net::Ann1R | Net::Star => Some(NetKind::Ann1R),
            Net::Ann1C => Some(NetKind::Ann1C),
            Net::Ann2 => Some(NetKind::Ann2),
            Net::Svd => None,
        }
    }

    fn model_path(self, s: &Settings) -> PathBuf {
        let ext = if self == Net::Svd { "ccml" } else { "ccmm" };
        s.models_dir().join(format!("{}.{ext}", self.key()))
    }

    /// The star model learns from and is scored on merged data.
    fn data_dir(self, s: &Settings) -> PathBuf {
        if self == Net::Star {
            s.merged_dir()
        } else {
            s.dataset_dir()
        }
    }
}

fn net(s: &Settings) -> Result<Net> {
    s.raw("net")
        .ok_or_else(|| anyhow!("no network given; pass --net"))?
        .parse()
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn load_data(dir: &Path) -> Result<Dataset> {
    load_dataset(dir).with_context(|| {
        format!(
            "cannot load the dataset in {}; run `ccm gen-data` first",
            dir.display()
        )
    })
}

fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .with_context(|| format!("cannot read {}; run `ccm gen-data` first", path.display()))?;
    Ok(DatasetManifest::parse(&text)?)
}

fn missing(path: &Path, net: Net) -> anyhow::Error {
    anyhow!(
        "missing model artifact {}; run `ccm train --net {}` first",
        path.display(),
        net.key()
    )
}

fn load_net(s: &Settings, net: Net) -> Result<ModelState> {
    let path = net.model_path(s);
    if !path.is_file() {
        return Err(missing(&path, net));
    }
    let model = load_model(&path).with_context(|| format!("cannot load {}", path.display()))?;
    if Some(model.spec.kind) != net.kind() {
        bail!(
            "{} holds a {} model, expected {}",
            path.display(),
            model.spec.kind,
            net.key()
        );
    }
    Ok(model)
}

fn load_linear(s: &Settings) -> Result<LinearReconstructor> {
    let path = Net::Svd.model_path(s);
    if !path.is_file() {
        return Err(missing(&path, Net::Svd));
    }
    LinearReconstructor::load(&path).with_context(|| format!("cannot load {}", path.display()))
}

fn dataset_config(s: &Settings) -> Result<DatasetConfig> {
    let mut cfg = DatasetConfig::default();
    cfg.apply_kv(&s.kv)?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&s.kv)?;
    cfg.validate()?;
    Ok(cfg)
}

fn network_spec(s: &Settings, kind: NetKind, extent: usize) -> Result<NetworkSpec> {
    let mut spec = NetworkSpec::new(kind, extent);
    s.kv.apply("depth", &mut spec.depth)?;
    s.kv.apply("base_channels", &mut spec.base_channels)?;
    spec.validate()?;
    Ok(spec)
}

pub fn gen_data(s: &Settings) -> Result<()> {
    let cfg = dataset_config(s)?;
    let start = Instant::now();
    let data = generate_dataset(&cfg)?;
    let manifest = write_dataset(&data, &s.dataset_dir())?;
    let merged = merged_dataset(&data)?;
    let merged_manifest = write_dataset(&merged, &s.merged_dir())?;
    let separation = layer_separation(&cfg.forward_model()?, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    let mut kv = KvMap::default();
    cfg.to_kv(&mut kv);
    for z in 1..=3u8 {
        kv.insert(
            &format!("dataset.layer{z}"),
            manifest.count_label(LayerLabel::Layer(z)),
        );
    }
    for split in Split::ALL {
        kv.insert(
            &format!("dataset.{}", split.name()),
            manifest.ids(split).len(),
        );
        kv.insert(
            &format!("merged.{}", split.name()),
            merged_manifest.ids(split).len(),
        );
    }
    kv.insert("merged.samples", merged_manifest.entries.len());
    kv.insert("layer_separation", format!("{separation:.6}"));
    write_file(&s.reports_dir().join("gen-data.txt"), &kv.render())?;
    write_file(
        &s.timing_dir().join("gen-data.txt"),
        &format!("seconds={seconds:.3}\n"),
    )?;
    println!(
        "wrote {} samples to {} and {} merged samples to {} (layer separation {separation:.3})",
        manifest.entries.len(),
        s.dataset_dir().display(),
        merged_manifest.entries.len(),
        s.merged_dir().display()
    );
    Ok(())
}

/// Quality of the linear method on the test samples of its calibrated layer.
fn eval_linear(lin: &LinearReconstructor, data: &Dataset) -> Result<(MetricReport, f64)> {
    let layer = lin.layer.unwrap_or(1);
    let test: Vec<&Sample> = data
        .split(Split::Test)
        .into_iter()
        .filter(|x| x.label == LayerLabel::Layer(layer as u8))
        .collect();
    if test.is_empty() {
        bail!("no layer-{layer} test samples to score the linear method on");
    }
    let (mut ssims, mut maes) = (Vec::new(), Vec::new());
    let start = Instant::now();
    for x in &test {
        let out = lin.reconstruct(&x.ccm)?;
        ssims.push(ssim(&out, &x.reference)?);
        maes.push(mae(&out, &x.reference)?);
    }
    let secs = start.elapsed().as_secs_f64() / test.len() as f64;
    Ok((MetricReport::from_samples(ssims, maes), secs))
}

fn linear_report(lin: &LinearReconstructor, report: &MetricReport) -> String {
    let mut kv = KvMap::default();
    kv.insert("net", "svd");
    kv.insert("policy", lin.policy);
    kv.insert("rank", lin.rank());
    kv.insert("layer", lin.layer.unwrap_or(1));
    let mut text = kv.render();
    text.push_str(&report.to_kv("test."));
    text
}

fn train_linear(s: &Settings) -> Result<()> {
    let data = load_data(&s.dataset_dir())?;
    let layer: usize = s.get_or("layer", 1)?;
    let policy: RankPolicy = s.get_or("rank", RankPolicy::default())?;
    let noise = s
        .get_or("calibration_noise", false)?
        .then(|| derive_seed(s.seed, "calibration", layer as u64));
    let start = Instant::now();
    let scan = data
        .config
        .forward_model()?
        .calibration_scan(layer, noise)?;
    let lin = fit_calibration(&scan, policy)?;
    let fit_seconds = start.elapsed().as_secs_f64();
    let path = Net::Svd.model_path(s);
    ensure_dir(&s.models_dir())?;
    lin.save(&path)?;
    let (report, secs) = eval_linear(&lin, &data)?;
    write_file(
        &s.reports_dir().join("train_svd.txt"),
        &linear_report(&lin, &report),
    )?;
    write_file(
        &s.timing_dir().join("train_svd.txt"),
        &format!(
            "fit.seconds={fit_seconds:.3}\ninference.ms_per_image={:.4}\n",
            secs * 1e3
        ),
    )?;
    println!(
        "svd: layer {layer}, rank {}, test ssim {:.4} mae {:.4} -> {}",
        lin.rank(),
        report.ssim,
        report.mae,
        path.display()
    );
    Ok(())
}

pub fn train(s: &Settings) -> Result<()> {
    let net = net(s)?;
    let Some(kind) = net.kind() else {
        return train_linear(s);
    };
    let data = load_data(&net.data_dir(s))?;
    let spec = network_spec(s, kind, data.config.meas_side)?;
    let cfg = train_config(s)?;
    let (model, report) = if net == Net::Star {
        retrain_star(&data, &spec, &cfg)?
    } else {
        let mut model = build_model(&spec, cfg.seed)?;
        let report = train_net(&mut model, &data, &cfg)?;
        (model, report)
    };
    let path = net.model_path(s);
    ensure_dir(&s.models_dir())?;
    save_model(&model, &path)?;

    let mut kv = KvMap::default();
    spec.to_kv(&mut kv);
    cfg.to_kv(&mut kv);
    kv.insert("params", model.num_params());
    let mut text = kv.render();
    text.push_str(&report.to_kv());
    let name = format!("train_{}.txt", net.key());
    write_file(&s.reports_dir().join(&name), &text)?;
    write_file(&s.timing_dir().join(&name), &report.timing_kv())?;

    let mut line = format!(
        "{}: {} epochs, best {}",
        net.key(),
        report.epochs.len(),
        report.best_epoch
    );
    if let Some(t) = &report.test {
        match t.report.accuracy {
            Some(a) => write!(line, ", test accuracy {a:.4}")?,
            None => write!(
                line,
                ", test ssim {:.4} mae {:.4}",
                t.report.ssim, t.report.mae
            )?,
        }
    }
    println!("{line} -> {}", path.display());
    Ok(())
}

pub fn eval(s: &Settings) -> Result<()> {
    let net = net(s)?;
    let name = format!("eval_{}.txt", net.key());
    if net == Net::Svd {
        let lin = load_linear(s)?;
        let data = load_data(&s.dataset_dir())?;
        let (report, secs) = eval_linear(&lin, &data)?;
        write_file(&s.reports_dir().join(&name), &linear_report(&lin, &report))?;
        write_file(
            &s.timing_dir().join(&name),
            &format!("inference.ms_per_image={:.4}\n", secs * 1e3),
        )?;
        println!("svd: test ssim {:.4} mae {:.4}", report.ssim, report.mae);
        return Ok(());
    }
    let model = load_net(s, net)?;
    let data = load_data(&net.data_dir(s))?;
    let test = data.split(Split::Test);
    let metrics = evaluate(&model, &test)?;
    let mut text = format!("net={}\n", net.key());
    text.push_str(&metrics.report.to_kv("test."));
    if let Some(r) = metrics.off_target_ratio {
        writeln!(text, "test.off_target_ratio={r:.6}")?;
    }
    write_file(&s.reports_dir().join(&name), &text)?;
    write_file(
        &s.timing_dir().join(&name),
        &format!(
            "inference.ms_per_image={:.4}\n",
            metrics.seconds_per_image * 1e3
        ),
    )?;
    print!("{text}");
    Ok(())
}

/// The measurement to process, its dataset sample when known, and a file tag.
fn resolve_input(s: &Settings, data_dir: &Path) -> Result<(Tensor<f32>, Option<Sample>, String)> {
    match (s.raw("input"), s.get::<usize>("sample")?) {
        (Some(_), Some(_)) => bail!("give either --input or --sample, not both"),
        (Some(p), None) => {
            let path = Path::new(p);
            let ccm = read_tensor(path)
                .with_context(|| format!("cannot read input {}", path.display()))?
                .into_f32()?;
            if ccm.rank() != 2 {
                bail!(
                    "{}: expected one [M, M] image, got {:?}",
                    path.display(),
                    ccm.shape()
                );
            }
            let tag = path
                .file_stem()
                .map_or_else(|| "input".to_string(), |t| t.to_string_lossy().into_owned());
            Ok((ccm, None, tag))
        }
        (None, Some(id)) => {
            let data = load_data(data_dir)?;
            let sample = data
                .samples
                .into_iter()
                .find(|x| x.id == id)
                .ok_or_else(|| anyhow!("no sample {id} in {}", data_dir.display()))?;
            Ok((sample.ccm.clone(), Some(sample), format!("sample{id}")))
        }
        (None, None) => bail!("no measurement given; pass --input <file> or --sample <id>"),
    }
}

fn save_image(image: &Tensor<f32>, stem: &Path) -> Result<()> {
    write_tensor(&stem.with_extension("tnsr"), image)?;
    export_pgm(image, &stem.with_extension("pgm"))?;
    Ok(())
}

pub fn recon(s: &Settings) -> Result<()> {
    let net = net(s)?;
    if net == Net::Ann1C {
        bail!("ann1_c is a classifier; use `ccm classify`");
    }
    let (ccm, sample, tag) = resolve_input(s, &net.data_dir(s))?;
    let dir = s.reports_dir().join("recon");
    ensure_dir(&dir)?;
    let stem = dir.join(format!("{}_{tag}", net.key()));
    let mut kv = KvMap::default();
    kv.insert("net", net.key());
    kv.insert("input", &tag);
    // The single image scored against the sample reference.
    let scored = if net == Net::Svd {
        let out = load_linear(s)?.reconstruct(&ccm)?;
        save_image(&out, &stem)?;
        out
    } else {
        let model = load_net(s, net)?;
        let out = model.infer_reconstruct(&ccm)?;
        write_tensor(&stem.with_extension("tnsr"), &out)?;
        if model.spec.kind == NetKind::Ann2 {
            for p in 0..3 {
                let img = plane(&out, p)?;
                let name = format!("{}_{tag}_plane{}.pgm", net.key(), p + 1);
                export_pgm(&img, &dir.join(name))?;
                kv.insert(
                    &format!("plane{}.mean", p + 1),
                    format!("{:.6}", img.mean()),
                );
            }
            let z = sample.as_ref().and_then(|x| x.layer().ok()).unwrap_or(1);
            plane(&out, z - 1)?
        } else {
            export_pgm(&out, &stem.with_extension("pgm"))?;
            out
        }
    };
    if let Some(x) = &sample {
        kv.insert("ssim", format!("{:.6}", ssim(&scored, &x.reference)?));
        kv.insert("mae", format!("{:.6}", mae(&scored, &x.reference)?));
        kv.insert("label", x.label);
    }
    let text = kv.render();
    write_file(&stem.with_extension("txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub fn classify(s: &Settings) -> Result<()> {
    let (ccm, sample, tag) = resolve_input(s, &s.dataset_dir())?;
    let model = load_net(s, Net::Ann1C)?;
    let (layer, probs) = model.infer_classify(&ccm)?;
    let mut kv = KvMap::default();
    kv.insert("input", &tag);
    kv.insert("layer", layer);
    for (i, p) in probs.iter().enumerate() {
        kv.insert(&format!("prob.{}", i + 1), format!("{p:.6}"));
    }
    if let Some(x) = &sample {
        kv.insert("label", x.label);
    }
    let text = kv.render();
    write_file(&s.reports_dir().join(format!("classify_{tag}.txt")), &text)?;
    print!("{text}");
    Ok(())
}

pub fn insert_scan(s: &Settings) -> Result<()> {
    let model = load_net(s, Net::Star)?;
    let cfg = read_manifest(&s.dataset_dir())?.config;
    let forward = cfg.forward_model()?;
    let mut scan = ScanConfig {
        seed: s.seed,
        ..ScanConfig::default()
    };
    scan.apply_kv(&s.kv)?;
    let depth: f64 = s.get_or("phantom_depth_um", DEFAULT_PHANTOM_DEPTH_UM)?;
    let beads: usize = s.get_or("phantom_beads", DEFAULT_PHANTOM_BEADS)?;
    let phantom = Phantom::random(cfg.side, depth, beads, cfg.bead_diameter_px, s.seed)?;
    let volume = insertion_scan(&model, &forward, &phantom, &scan)?;

    let dir = s.volumes_dir();
    let slice_dir = dir.join("insert-scan");
    ensure_dir(&slice_dir)?;
    let path = dir.join("insert-scan.tnsr");
    write_volume(&volume, &path)?;
    for (d, img) in volume.slices.iter().enumerate() {
        export_pgm(img, &slice_dir.join(format!("slice_{d:02}.pgm")))?;
    }

    let mut kv = KvMap::default();
    scan.to_kv(&mut kv);
    kv.insert("phantom_depth_um", depth);
    kv.insert("phantom_beads", beads);
    kv.insert("slices", volume.depth());
    let mut text = kv.render();
    for (d, img) in volume.slices.iter().enumerate() {
        let max = img.data().iter().copied().fold(0.0f32, f32::max);
        writeln!(text, "slice.{d:02}.depth_um={}", volume.depth_of(d))?;
        writeln!(text, "slice.{d:02}.mean={:.6}", img.mean())?;
        writeln!(text, "slice.{d:02}.max={max:.6}")?;
    }
    for (i, b) in phantom.beads.iter().enumerate() {
        writeln!(text, "bead.{i:03}={:.3},{:.3},{:.3}", b.y, b.x, b.depth_um)?;
    }
    write_file(&s.reports_dir().join("insert-scan.txt"), &text)?;
    println!(
        "{} slices from {} to {} µm -> {}",
        volume.depth(),
        volume.z0_um,
        volume.depth_of(volume.depth() - 1),
        path.display()
    );
    Ok(())
}

fn slice_files(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "tnsr"))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    if files.is_empty() {
        bail!("no slice files given");
    }
    Ok(files)
}

pub fn volume(s: &Settings, inputs: &[PathBuf]) -> Result<()> {
    let files = slice_files(inputs)?;
    let slices = files
        .iter()
        .map(|f| {
            read_tensor(f)
                .with_context(|| format!("cannot read slice {}", f.display()))?
                .into_f32()
                .map_err(anyhow::Error::from)
        })
        .collect::<Result<Vec<_>>>()?;
    let volume = assemble_volume(
        slices,
        s.get_or("z_step_um", DEFAULT_Z_STEP_UM)?,
        s.get_or("z0_um", 0.0)?,
        s.get_or("fov_um", FOV_UM)?,
    )?;
    let name = s.raw("name").unwrap_or("volume");
    let path = s.volumes_dir().join(format!("{name}.tnsr"));
    ensure_dir(&s.volumes_dir())?;
    write_volume(&volume, &path)?;
    if read_volume(&path)? != volume {
        bail!("{} did not read back identically", path.display());
    }
    let [h, w] = volume.extent();
    let mut kv = KvMap::default();
    kv.insert("depth", volume.depth());
    kv.insert("height", h);
    kv.insert("width", w);
    kv.insert("z0_um", volume.z0_um);
    kv.insert("z_step_um", volume.z_step_um);
    kv.insert("fov_um", volume.fov_um);
    kv.insert("round_trip", "exact");
    write_file(
        &s.reports_dir().join(format!("volume_{name}.txt")),
        &kv.render(),
    )?;
    println!("{} slices of {h}x{w} -> {}", volume.depth(), path.display());
    Ok(())
}

pub fn bench(s: &Settings) -> Result<()> {
    let ann1_r = load_net(s, Net::Ann1R)?;
    let ann1_c = load_net(s, Net::Ann1C)?;
    let ann2 = load_net(s, Net::Ann2)?;
    let linear = load_linear(s)?;
    let data = load_data(&s.dataset_dir())?;
    let repeats: usize = s.get_or("repeats", DEFAULT_BENCH_REPEATS)?;
    let models = BenchModels {
        ann1_r: &ann1_r,
        ann1_c: &ann1_c,
        ann2: &ann2,
        linear: &linear,
    };
    let table = run_bench(&models, &data.split_owned(Split::Test), repeats)?;
    let rendered = table.render();
    write_file(&s.reports_dir().join("bench.txt"), &table.to_kv())?;
    write_file(&s.timing_dir().join("bench.txt"), &table.timing_kv())?;
    write_file(&s.timing_dir().join("bench_table.txt"), &rendered)?;
    print!("{rendered}");
    Ok(())
}
