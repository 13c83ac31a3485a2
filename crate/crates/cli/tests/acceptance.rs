//! Acceptance suite: one PASS/FAIL line per criterion. Criteria 4 to 10 run
//! the `ccm` binary at the default desk scale; 11 runs a small pipeline twice.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use ccm_core::diffcore::gradcheck::{check_all, TOLERANCE};
use ccm_core::diffcore::ops::{categorical_ce, pixelwise_bce};
use ccm_core::diffcore::Tensor;
use ccm_core::kv::KvMap;
use ccm_core::linrecon::{fit_calibration, RankPolicy};
use ccm_core::metrics::{fwhm_diameter, COLUMNS};
use ccm_core::neurorecon::{load_model, ModelState};
use ccm_core::opticsim::{
    load_dataset, merged_dataset, render_disks, Dataset, ForwardConfig, ForwardModel, LayerLabel,
    SceneStack, Split, FOV_UM, MERGE_ROUNDS,
};
use ccm_core::pipeline::{insertion_scan, read_volume, write_volume, Bead, Phantom, ScanConfig};
use ccm_core::rng;

const BIN: &str = env!("CARGO_BIN_EXE_ccm");
const SEED: &str = "0";

/// Deterministic draws in `[0, 1]`.
fn uniform(seed: u64, n: usize) -> Vec<f64> {
    (0..n as u64)
        .map(|i| rng::derive_seed(seed, "acceptance", i) as f64 / u64::MAX as f64)
        .collect()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

fn ccm(out: &Path, args: &[&str]) -> Result<String> {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .args(["--out", out.to_str().unwrap(), "--seed", SEED]);
    let res = cmd.output().context("cannot start ccm")?;
    if !res.status.success() {
        bail!(
            "ccm {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&res.stderr).trim()
        );
    }
    Ok(String::from_utf8(res.stdout)?)
}

fn report(out: &Path, name: &str) -> Result<KvMap> {
    let path = out.join("reports").join(name);
    let text = fs::read_to_string(&path).with_context(|| format!("read {}", path.display()))?;
    Ok(KvMap::parse(&text)?)
}

fn value(kv: &KvMap, key: &str) -> Result<f64> {
    kv.get(key)?.ok_or_else(|| anyhow!("report lacks {key}"))
}

fn gradient_suite() -> Result<Outcome> {
    let start = Instant::now();
    let worst = check_all(20);
    let secs = start.elapsed().as_secs_f64();
    let (name, max) = worst
        .iter()
        .copied()
        .fold(("none", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let failing: Vec<&str> = worst
        .iter()
        .filter(|(_, e)| !(*e < TOLERANCE))
        .map(|(n, _)| *n)
        .collect();
    verdict(
        failing.is_empty() && worst.len() == 16 && secs < 60.0,
        format!(
            "{} ops x 20 seeds in f64, worst {name} {max:.2e} < {TOLERANCE:.0e}, {} failing, {secs:.1} s < 60 s",
            worst.len(),
            failing.len()
        ),
    )
}

fn loss_values() -> Result<Outcome> {
    let bce = pixelwise_bce(&Tensor::<f64>::full(&[1], 0.5), &Tensor::full(&[1], 1.0))?;
    let ce = categorical_ce(&Tensor::<f64>::full(&[3], 1.0 / 3.0), 0)?;
    let (e1, e2) = ((bce - 2f64.ln()).abs(), (ce - 3f64.ln()).abs());
    verdict(
        e1 < 1e-9 && e2 < 1e-9,
        format!("|bce - ln2| = {e1:.1e}, |ce - ln3| = {e2:.1e}"),
    )
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn svd_oracle() -> Result<Outcome> {
    let start = Instant::now();
    let model = ForwardModel::new(ForwardConfig {
        object_side: 16,
        meas_side: 16,
        noise_sigma: 0.0,
        ..ForwardConfig::default()
    })?;
    let scan = model.calibration_scan(1, None)?;
    let n = scan.cols;
    let lin = fit_calibration(&scan, RankPolicy::Fixed(n))?;
    ensure!(lin.rank() == n, "operator rank {} < {n}", lin.rank());
    let x = uniform(1, n);
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..scan.rows)
            .map(|i| (0..n).map(|j| scan.matrix[i * n + j] * v[j]).sum())
            .collect()
    };
    let y = apply(&x);
    let xh = lin.solve(&y)?;
    let diff: Vec<f64> = xh.iter().zip(&x).map(|(a, b)| a - b).collect();
    let rel = norm(&diff) / norm(&x);
    let mut residuals = Vec::with_capacity(n);
    for k in 1..=n {
        let xk = lin.truncated(k)?.solve(&y)?;
        let r: Vec<f64> = apply(&xk).iter().zip(&y).map(|(a, b)| a - b).collect();
        residuals.push(norm(&r));
    }
    let slack = 1e-12 * norm(&y);
    let rises = residuals.windows(2).filter(|w| w[1] > w[0] + slack).count();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        rel < 1e-6 && rises == 0 && secs < 10.0,
        format!(
            "256 px, rank {n}: relative L2 error {rel:.2e} < 1e-6, residual rises {rises}, {secs:.1} s < 10 s"
        ),
    )
}

fn train(out: &Path, net: &str) -> Result<(KvMap, f64)> {
    let start = Instant::now();
    ccm(out, &["train", "--net", net])?;
    let secs = start.elapsed().as_secs_f64();
    Ok((report(out, &format!("train_{net}.txt"))?, secs))
}

fn desk_ann1_r(out: &Path, gen_secs: f64) -> Result<Outcome> {
    let (kv, secs) = train(out, "ann1_r")?;
    let (ssim, mae) = (value(&kv, "test.ssim")?, value(&kv, "test.mae")?);
    let total = gen_secs + secs;
    let epochs = value(&kv, "epochs_run")?;
    verdict(
        ssim >= 0.70 && mae <= 0.06 && total < 900.0 && epochs <= 15.0,
        format!(
            "32x32, 600/layer, batch 16, {epochs} epochs: ssim {ssim:.4} >= 0.70, mae {mae:.4} <= 0.06, {total:.0} s < 900 s"
        ),
    )
}

fn desk_ann1_c(out: &Path) -> Result<Outcome> {
    let (kv, secs) = train(out, "ann1_c")?;
    let acc = value(&kv, "test.accuracy")?;
    verdict(
        acc >= 0.95 && secs < 600.0,
        format!("accuracy {acc:.4} >= 0.95, {secs:.0} s < 600 s"),
    )
}

fn model(out: &Path, name: &str) -> Result<ModelState> {
    Ok(load_model(
        &out.join("models").join(format!("{name}.ccmm")),
    )?)
}

fn desk_ann2(out: &Path, data: &Dataset) -> Result<Outcome> {
    let (kv, secs) = train(out, "ann2")?;
    let (ssim, ratio) = (
        value(&kv, "test.ssim")?,
        value(&kv, "test.off_target_ratio")?,
    );
    let net = model(out, "ann2")?;
    let sample = data.split(Split::Test)[0];
    let shape = net.infer_reconstruct(&sample.ccm)?.shape().to_vec();
    verdict(
        shape == [32, 32, 3] && ratio <= 0.3 && ssim >= 0.65,
        format!(
            "output {shape:?}, off-target/target {ratio:.4} <= 0.3, target ssim {ssim:.4} >= 0.65, {secs:.0} s"
        ),
    )
}

fn normalized_sum(parts: [&Tensor<f32>; 3]) -> Vec<f32> {
    let mut acc = vec![0.0f64; parts[0].len()];
    for p in parts {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    acc.iter()
        .map(|&v| {
            if hi > lo {
                ((v - lo) / (hi - lo)).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect()
}

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Checks the first merge round, which pairs the k-th sample of each layer,
/// against an independent sum, and every round against a fresh re-merge.
fn merge_mismatches(source: &Dataset, merged: &Dataset) -> Result<(usize, usize)> {
    let remerged = merged_dataset(source)?;
    let mut bad = 0;
    for (a, b) in remerged.samples.iter().zip(&merged.samples) {
        if bits(a.reference.data()) != bits(b.reference.data())
            || bits(a.ccm.data()) != bits(b.ccm.data())
        {
            bad += 1;
        }
    }
    bad += remerged.samples.len().abs_diff(merged.samples.len());
    let mut offset = 0;
    let mut checked = 0;
    for split in Split::ALL {
        let members = source.split(split);
        let layer = |z: u8| -> Vec<_> {
            members
                .iter()
                .filter(|s| s.label == LayerLabel::Layer(z))
                .collect()
        };
        let (l1, l2, l3) = (layer(1), layer(2), layer(3));
        let n = l1.len().min(l2.len()).min(l3.len());
        for k in 0..n {
            let m = &merged.samples[offset + k];
            let want_ref = normalized_sum([&l1[k].reference, &l2[k].reference, &l3[k].reference]);
            let want_ccm = normalized_sum([&l1[k].ccm, &l2[k].ccm, &l3[k].ccm]);
            if bits(&want_ref) != bits(m.reference.data()) || bits(&want_ccm) != bits(m.ccm.data())
            {
                bad += 1;
            }
            checked += 1;
        }
        offset += MERGE_ROUNDS * n;
    }
    Ok((bad, checked))
}

fn star(out: &Path, source: &Dataset) -> Result<Outcome> {
    let merged = load_dataset(&out.join("dataset/merged"))?;
    let (bad, checked) = merge_mismatches(source, &merged)?;
    let (kv, secs) = train(out, "ann1_r_star")?;
    let ssim = value(&kv, "test.ssim")?;
    verdict(
        bad == 0 && checked > 0 && ssim >= 0.65,
        format!(
            "{} merged samples bit-identical to a re-merge, {checked} checked against direct normalized sums, {bad} mismatches; ssim {ssim:.4} >= 0.65, {secs:.0} s",
            merged.samples.len()
        ),
    )
}

fn forward(data: &Dataset) -> Result<ForwardModel> {
    Ok(data.config.forward_model()?)
}

fn fwhm(out: &Path, data: &Dataset) -> Result<Outcome> {
    let net = model(out, "ann1_r")?;
    let fm = forward(data)?;
    let (row, c) = (16, 16.5);
    let truth = render_disks(32, &[(c, c)], 3.0)?;
    let scene = SceneStack::single(1, truth.clone())?;
    let ccm = fm.simulate_measurement(&scene, Some(rng::derive_seed(0, "fwhm", 0)))?;
    let recon = net.infer_reconstruct(&ccm)?;
    let gt = fwhm_diameter(&truth, row, FOV_UM)?;
    let got = fwhm_diameter(&recon, row, FOV_UM)?;
    let rel = (got.um - gt.um) / gt.um;
    verdict(
        rel.abs() <= 0.30,
        format!(
            "ground truth {:.2} um, reconstruction {:.2} um, deviation {:+.1}% within 30%",
            gt.um,
            got.um,
            rel * 100.0
        ),
    )
}

fn patch_mean(img: &Tensor<f32>, cy: usize, cx: usize) -> f32 {
    let mut acc = 0.0;
    for y in cy - 1..=cy + 1 {
        for x in cx - 1..=cx + 1 {
            acc += img.get(&[y, x]);
        }
    }
    acc / 9.0
}

fn scan(out: &Path, data: &Dataset) -> Result<Outcome> {
    ccm(out, &["insert-scan"])?;
    let path = out.join("volumes/insert-scan.tnsr");
    let volume = read_volume(&path)?;
    let net = model(out, "ann1_r_star")?;
    let fm = forward(data)?;
    let cfg = ScanConfig::default();

    // The file holds exactly what the library computes for the same inputs.
    let phantom = Phantom::random(32, 800.0, 40, 3.0, 0)?;
    let expected = insertion_scan(&net, &fm, &phantom, &cfg)?;
    let copy = path.with_file_name("copy.tnsr");
    write_volume(&volume, &copy)?;
    let exact = volume == expected
        && fs::read(&path)? == fs::read(&copy)?
        && fs::read(path.with_extension("meta"))? == fs::read(copy.with_extension("meta"))?;

    let bead = Bead {
        y: 16.0,
        x: 16.0,
        depth_um: 300.0,
    };
    let single = Phantom::new(32, 800.0, 3.0, vec![bead])?;
    let v = insertion_scan(&net, &fm, &single, &cfg)?;
    let peaks: Vec<f32> = v.slices.iter().map(|s| patch_mean(s, 16, 16)).collect();
    let best = ccm_core::neurorecon::argmax(&peaks);
    let hit = Phantom::layer_for(v.depth_of(best), bead.depth_um).is_some();

    let empty = Phantom::new(32, 800.0, 3.0, Vec::new())?;
    let dark = insertion_scan(&net, &fm, &empty, &cfg)?;
    let dark_max = dark.slices.iter().map(|s| s.mean()).fold(0.0f32, f32::max);

    verdict(
        volume.depth() == 15 && exact && hit && dark_max < 0.05,
        format!(
            "{} slices; volume matches the library scan and re-writes bit-exactly: {exact}; bead at 300 um peaks at {} um (window contains it: {hit}); empty phantom max slice mean {dark_max:.3} < 0.05",
            volume.depth(),
            v.depth_of(best)
        ),
    )
}

fn bench(out: &Path) -> Result<Outcome> {
    ccm(out, &["train", "--net", "svd"])?;
    let table = ccm(out, &["bench"])?;
    let timing = report(out, "timing/bench.txt")?;
    let header = table.lines().next().unwrap_or("") == COLUMNS.join("\t");
    let rows = ["ANN1_r", "ANN1_c", "ANN2 (3 layer average)", "SVD"]
        .iter()
        .all(|m| table.lines().any(|l| l.starts_with(&format!("{m}\t"))));
    let times: Vec<f64> = ["ann1_r", "ann1_c", "ann2", "svd"]
        .iter()
        .map(|k| value(&timing, &format!("{k}.median_ms")))
        .collect::<Result<_>>()?;
    for line in table.lines().take(5) {
        println!("      {line}");
    }
    verdict(
        header && rows,
        format!(
            "header and four rows present; median ms ANN1_r {:.3} ANN1_c {:.3} ANN2 {:.3} SVD {:.3}, linear/ANN1_r {:.2}x (reported, not asserted)",
            times[0],
            times[1],
            times[2],
            times[3],
            times[3] / times[0]
        ),
    )
}

const MINI: &str = "\
side=16
meas_side=16
per_layer=24
test_count=9
max_epochs=2
depth=2
base_channels=4
batch_size=8
";

fn mini_pipeline(root: &Path, cfg: &Path) -> Result<()> {
    let c = cfg.to_str().unwrap();
    ccm(root, &["gen-data", "--config", c])?;
    for net in ["ann1_r", "ann1_c", "ann2", "ann1_r_star", "svd"] {
        ccm(root, &["train", "--config", c, "--net", net])?;
        ccm(root, &["eval", "--config", c, "--net", net])?;
    }
    ccm(
        root,
        &["recon", "--config", c, "--net", "ann2", "--sample", "1"],
    )?;
    ccm(root, &["classify", "--config", c, "--sample", "1"])?;
    ccm(root, &["insert-scan", "--config", c])?;
    ccm(root, &["bench", "--config", c, "--repeats", "1"])?;
    Ok(())
}

fn collect(dir: &Path, base: &Path, acc: &mut BTreeMap<PathBuf, Vec<u8>>) -> Result<()> {
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let rel = p.strip_prefix(base)?.to_path_buf();
        if rel == Path::new("reports/timing") {
            continue;
        }
        if p.is_dir() {
            collect(&p, base, acc)?;
        } else {
            acc.insert(rel, fs::read(&p)?);
        }
    }
    Ok(())
}

fn determinism(tmp: &Path) -> Result<Outcome> {
    let cfg = tmp.join("mini.cfg");
    fs::write(&cfg, MINI)?;
    let mut trees = Vec::new();
    for run in ["run_a", "run_b"] {
        let root = tmp.join(run);
        mini_pipeline(&root, &cfg)?;
        let mut files = BTreeMap::new();
        collect(&root, &root, &mut files)?;
        trees.push(files);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let differing: Vec<_> = a
        .keys()
        .chain(b.keys())
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let count = |prefix: &str| a.keys().filter(|k| k.starts_with(prefix)).count();
    verdict(
        differing.is_empty() && count("models") == 5 && count("reports") > 0,
        format!(
            "{} files ({} reports, {} models) compared byte for byte, {} differ {:?}",
            a.len(),
            count("reports"),
            count("models"),
            differing.len(),
            differing.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn main() -> ExitCode {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = tmp.path().join("desk");
    let mut failed = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Result<Outcome>| {
        let start = Instant::now();
        let res = f();
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match res {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        if !pass {
            failed += 1;
        }
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag} {n:>2} {name}: {detail} [{secs:.1} s]");
    };

    run(1, "gradient suite", &mut gradient_suite);
    run(2, "loss unit values", &mut loss_values);
    run(3, "SVD oracle", &mut svd_oracle);

    let start = Instant::now();
    let data = ccm(&out, &["gen-data"]).and_then(|_| Ok(load_dataset(&out.join("dataset"))?));
    let gen_secs = start.elapsed().as_secs_f64();
    match data {
        Ok(data) => {
            run(4, "desk-scale ANN1_r", &mut || desk_ann1_r(&out, gen_secs));
            run(5, "desk-scale ANN1_c", &mut || desk_ann1_c(&out));
            run(6, "desk-scale ANN2", &mut || desk_ann2(&out, &data));
            run(7, "ANN1_r* merge and retrain", &mut || star(&out, &data));
            run(8, "bead FWHM", &mut || fwhm(&out, &data));
            run(9, "insertion scan", &mut || scan(&out, &data));
            run(10, "bench table", &mut || bench(&out));
        }
        Err(e) => {
            for (n, name) in (4..=10).zip([
                "desk-scale ANN1_r",
                "desk-scale ANN1_c",
                "desk-scale ANN2",
                "ANN1_r* merge and retrain",
                "bead FWHM",
                "insertion scan",
                "bench table",
            ]) {
                run(n, name, &mut || {
                    Err(anyhow!("dataset generation failed: {e:#}"))
                });
            }
        }
    }
    run(11, "pipeline determinism", &mut || determinism(tmp.path()));

    if failed == 0 {
        println!("acceptance: all 11 criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} of 11 criteria fail");
        ExitCode::FAILURE
    }
}
