//! Merges a `key=value` config file with command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use ccm_core::kv::KvMap;

/// Every key a config file may set; each one mirrors a flag.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out",
    // dataset
    "side",
    "meas_side",
    "per_layer",
    "test_count",
    "noise_sigma",
    "conditioning",
    "object",
    "bead_diameter_px",
    "beads_min",
    "beads_max",
    "neuron_branches",
    // training
    "net",
    "batch_size",
    "max_epochs",
    "lr",
    "patience",
    "depth",
    "base_channels",
    "rank",
    "layer",
    "calibration_noise",
    // inference inputs
    "input",
    "sample",
    // insertion scan
    "scan_z0_um",
    "scan_z_step_um",
    "scan_max_depth_um",
    "scan_noise",
    "phantom_depth_um",
    "phantom_beads",
    // volume assembly
    "z_step_um",
    "z0_um",
    "fov_um",
    "name",
    // bench
    "repeats",
];

/// Resolved settings of one invocation: file values overridden by flags.
pub struct Settings {
    pub kv: KvMap,
    pub seed: u64,
    pub out: PathBuf,
}

impl Settings {
    pub fn resolve(
        config: Option<&Path>,
        flags: Vec<(&'static str, Option<String>)>,
    ) -> Result<Self> {
        let mut kv = match config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("cannot read config file {}", p.display()))?;
                KvMap::parse(&text).with_context(|| format!("config file {}", p.display()))?
            }
            None => KvMap::default(),
        };
        if let Some(k) = kv.keys().find(|k| !KNOWN_KEYS.contains(k)) {
            bail!("unknown config key {k:?}");
        }
        for (k, v) in flags {
            debug_assert!(KNOWN_KEYS.contains(&k), "flag {k} has no config key");
            if let Some(v) = v {
                kv.insert(k, v);
            }
        }
        let seed = kv.get("seed")?.unwrap_or(0);
        kv.insert("seed", seed);
        let out = PathBuf::from(kv.raw("out").unwrap_or("out"));
        Ok(Settings { kv, seed, out })
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        Ok(self.kv.get(key)?)
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.kv.raw(key)
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out.join("dataset")
    }

    pub fn merged_dir(&self) -> PathBuf {
        self.dataset_dir().join("merged")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out.join("reports")
    }

    pub fn timing_dir(&self) -> PathBuf {
        self.reports_dir().join("timing")
    }

    pub fn volumes_dir(&self) -> PathBuf {
        self.out.join("volumes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_the_file_and_unknown_keys_fail() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.txt");
        fs::write(&cfg, "# comment\nseed=4\nper_layer=10\nout=x\n").unwrap();
        let s = Settings::resolve(
            Some(&cfg),
            vec![("per_layer", Some("20".into())), ("side", None)],
        )
        .unwrap();
        assert_eq!(s.seed, 4);
        assert_eq!(s.out, PathBuf::from("x"));
        assert_eq!(s.get::<usize>("per_layer").unwrap(), Some(20));
        assert_eq!(s.get::<usize>("side").unwrap(), None);
        fs::write(&cfg, "bogus=1\n").unwrap();
        let err = Settings::resolve(Some(&cfg), vec![]).err().unwrap();
        assert!(err.to_string().contains("bogus"));
    }
}
