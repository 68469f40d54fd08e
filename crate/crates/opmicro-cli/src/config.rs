//! TOML configuration sections. Every default mirrors `defaults.toml`
//! (the versioned defaults file shipped with the binary); a test keeps the
//! two in lockstep. User config files override per [section]; unknown keys
//! inside a known section are rejected with a path.

use opmicro::denoise::DenoiserSpec;
use opmicro::fieldstore::sha256_hex;
use opmicro::noisegen::{NoiseFamily, NoiseSpec};
use opmicro::recover::LmOptions;
use opmicro::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const DEFAULTS_TOML: &str = include_str!("../defaults.toml");

/// Raw config file plus its digest (the digest of `defaults.toml` when no
/// file was given, so all-default runs are still reproducible by digest).
pub struct ConfigSource {
    table: toml::Table,
    pub digest: String,
}

impl ConfigSource {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => DEFAULTS_TOML.to_string(),
        };
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::invalid(format!("config: {e}")))?;
        Ok(ConfigSource {
            table,
            digest: sha256_hex(text.as_bytes()),
        })
    }

    /// Deserializes `[section]`; a missing section means all defaults.
    pub fn section<T: DeserializeOwned + Default>(&self, name: &str) -> Result<T> {
        match self.table.get(name) {
            None => Ok(T::default()),
            Some(value) => value
                .clone()
                .try_into()
                .map_err(|e| Error::invalid(format!("config [{name}]: {e}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    pub nx: usize,
    pub ny: usize,
    pub domain_length: f64,
    pub omega: f64,
    pub kappa: f64,
    pub dt: f64,
    pub n_frames: usize,
    pub frame_stride: usize,
    pub c_floor: f64,
    pub ic_mean: f64,
    pub ic_amp: f64,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            nx: 64,
            ny: 64,
            domain_length: 1.0,
            omega: 3.0,
            kappa: 2e-3,
            dt: 1e-4,
            n_frames: 101,
            frame_stride: 40,
            c_floor: 1e-6,
            ic_mean: 0.5,
            ic_amp: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptConfig {
    pub family: NoiseFamily,
    pub gaussian_rel: f64,
    pub poisson_lambda: f64,
    pub impulse_p: f64,
    pub post_median: bool,
    pub clip: (f64, f64),
}

impl Default for CorruptConfig {
    fn default() -> Self {
        CorruptConfig {
            family: NoiseFamily::Gaussian,
            gaussian_rel: 0.3,
            poisson_lambda: 1e4,
            impulse_p: 0.05,
            post_median: false,
            clip: (0.01, 0.99),
        }
    }
}

impl CorruptConfig {
    pub fn to_spec(&self) -> NoiseSpec {
        NoiseSpec {
            family: self.family,
            gaussian_rel: self.gaussian_rel,
            poisson_lambda: self.poisson_lambda,
            impulse_p: self.impulse_p,
            post_median: self.post_median,
            clip: self.clip,
        }
    }
}

/// The [denoise] section is a `DenoiserSpec` table (tagged by `kind`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseConfig(pub DenoiserSpec);

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig(DenoiserSpec::MedianSpatial)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverConfig {
    pub degree: usize,
    pub physical_prior: bool,
    pub include_constant: bool,
    pub reg_lambda: f64,
    /// Snapshots drawn log-spaced from the trajectory tail; 0 = use every frame.
    pub n_snapshots: usize,
    pub obs_clip: Option<(f64, f64)>,
    pub dt: f64,
    pub kappa: f64,
    pub omega: f64,
    pub c_floor: f64,
    pub max_iter: usize,
    pub gtol: f64,
    pub xtol: f64,
    pub damping_init: f64,
    pub damping_max: f64,
    pub n_boot: usize,
}

impl Default for RecoverConfig {
    fn default() -> Self {
        RecoverConfig {
            degree: 3,
            physical_prior: true,
            include_constant: true,
            reg_lambda: 0.0,
            n_snapshots: 5,
            obs_clip: Some((0.01, 0.99)),
            dt: 1e-4,
            kappa: 2e-3,
            omega: 3.0,
            c_floor: 1e-6,
            max_iter: 50,
            gtol: 1e-8,
            xtol: 1e-10,
            damping_init: 1e-2,
            damping_max: 1e12,
            n_boot: 0,
        }
    }
}

impl RecoverConfig {
    pub fn lm_options(&self) -> LmOptions {
        LmOptions {
            max_iter: self.max_iter,
            gtol: self.gtol,
            xtol: self.xtol,
            damping_init: self.damping_init,
            damping_max: self.damping_max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticalConfig {
    pub k: usize,
    pub min_area: usize,
    /// Length per pixel; falls back to the stack sidecar, then 1.0.
    pub pixel_size: Option<f64>,
    /// Solid-solution frame range [start, end).
    pub schedule: (usize, usize),
    /// Frame whose cluster labels seed the segmentation; -1 = final frame.
    pub segment_frame: i64,
    /// Canonical (LAB-sorted) cluster id treated as background.
    pub background_cluster: usize,
    /// Phase per canonical cluster id: background | blue | red | gold.
    pub cluster_phases: Vec<String>,
    /// Expert particle mask (integer-label NPY, nonzero = particle);
    /// overrides the segmentation-derived mask.
    pub mask_npy: Option<std::path::PathBuf>,
    /// Common KDE bandwidth override for both axes.
    pub bandwidth: Option<f64>,
}

impl Default for OpticalConfig {
    fn default() -> Self {
        OpticalConfig {
            k: 4,
            min_area: 16,
            pixel_size: None,
            schedule: (0, 0),
            segment_frame: -1,
            background_cluster: 3,
            cluster_phases: vec![
                "blue".into(),
                "red".into(),
                "gold".into(),
                "background".into(),
            ],
            mask_npy: None,
            bandwidth: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `defaults.toml` and the compiled-in defaults must agree, so the file
    /// stays an honest record of every "paper silent" parameter.
    #[test]
    fn defaults_file_matches_compiled_defaults() {
        let src = ConfigSource::load(None).unwrap();
        assert_eq!(
            src.section::<SimulateConfig>("simulate").unwrap(),
            SimulateConfig::default()
        );
        assert_eq!(
            src.section::<CorruptConfig>("corrupt").unwrap(),
            CorruptConfig::default()
        );
        assert_eq!(
            src.section::<DenoiseConfig>("denoise").unwrap(),
            DenoiseConfig::default()
        );
        assert_eq!(
            src.section::<RecoverConfig>("recover").unwrap(),
            RecoverConfig::default()
        );
        assert_eq!(
            src.section::<OpticalConfig>("optical").unwrap(),
            OpticalConfig::default()
        );
    }

    #[test]
    fn unknown_keys_error_with_section_path() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[simulate]\nnx = 32\ntypo_key = 1\n").unwrap();
        let src = ConfigSource::load(Some(&path)).unwrap();
        let err = src.section::<SimulateConfig>("simulate").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[simulate]"), "{msg}");
        assert!(msg.contains("typo_key"), "{msg}");
    }

    #[test]
    fn partial_section_keeps_remaining_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.toml");
        std::fs::write(&path, "[recover]\ndegree = 2\nmax_iter = 7\n").unwrap();
        let src = ConfigSource::load(Some(&path)).unwrap();
        let cfg: RecoverConfig = src.section("recover").unwrap();
        assert_eq!(cfg.degree, 2);
        assert_eq!(cfg.max_iter, 7);
        assert_eq!(cfg.n_snapshots, RecoverConfig::default().n_snapshots);
        // Digest covers the raw file bytes.
        assert_ne!(src.digest, ConfigSource::load(None).unwrap().digest);
    }

    #[test]
    fn denoise_section_is_a_tagged_spec() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dn.toml");
        std::fs::write(&path, "[denoise]\nkind = \"gaussian_blur\"\nsigma = 2.0\n").unwrap();
        let src = ConfigSource::load(Some(&path)).unwrap();
        let cfg: DenoiseConfig = src.section("denoise").unwrap();
        assert_eq!(cfg.0, DenoiserSpec::GaussianBlur { sigma: 2.0 });
    }
}
