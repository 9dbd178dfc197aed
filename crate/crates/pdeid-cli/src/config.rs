//! Line-oriented `key = value` configuration with `[section]` headers.
//!
//! Unknown keys are allowed (solver sections are family-specific); typed
//! getters validate on access. The config hash is taken over a canonical
//! sorted rendering, so formatting and key order never change it.

use crate::HarnessError;
use pdeid_core::operator::ModelFamily;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::PathBuf;

#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<(String, String), String>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut section = String::new();
        let mut entries = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name.strip_suffix(']').ok_or_else(|| {
                    HarnessError::InvalidConfig(format!("line {}: unterminated section", lineno + 1))
                })?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                HarnessError::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim();
            if key.is_empty() {
                return Err(HarnessError::InvalidConfig(format!("line {}: empty key", lineno + 1)));
            }
            entries.insert((section.clone(), key.to_string()), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.entries.get(&(section.to_string(), key.to_string())).map(|s| s.as_str())
    }

    fn parsed<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>, HarnessError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s.parse::<T>().map(Some).map_err(|_| {
                HarnessError::InvalidConfig(format!("[{section}] {key} = {s}: unparsable value"))
            }),
        }
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64, HarnessError> {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64, HarnessError> {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize, HarnessError> {
        Ok(self.parsed(section, key)?.unwrap_or(default))
    }

    pub fn usize_opt(&self, section: &str, key: &str) -> Result<Option<usize>, HarnessError> {
        self.parsed(section, key)
    }

    pub fn f64_list(&self, section: &str, key: &str) -> Result<Option<Vec<f64>>, HarnessError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim().parse::<f64>().map_err(|_| {
                        HarnessError::InvalidConfig(format!("[{section}] {key}: bad list item {p}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    pub fn usize_list(&self, section: &str, key: &str) -> Result<Option<Vec<usize>>, HarnessError> {
        match self.get(section, key) {
            None => Ok(None),
            Some(s) => s
                .split(',')
                .map(|p| {
                    p.trim().parse::<usize>().map_err(|_| {
                        HarnessError::InvalidConfig(format!("[{section}] {key}: bad list item {p}"))
                    })
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Some),
        }
    }

    /// Canonical sorted rendering; the basis for the config hash.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut last_section: Option<&str> = None;
        for ((section, key), value) in &self.entries {
            if last_section != Some(section.as_str()) {
                out.push_str(&format!("[{section}]\n"));
                last_section = Some(section);
            }
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileFormat {
    Binary,
    Text,
}

/// One experiment: which family, which snapshots, how many points, what
/// noise, and the training budget.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub family: ModelFamily,
    pub output_dir: PathBuf,
    pub format: FileFormat,
    /// Index of the earlier snapshot; `None` selects one at random below.
    pub snapshot_index: Option<usize>,
    /// Seed for random snapshot selection when no index is given.
    pub snapshot_seed: u64,
    /// The partner snapshot sits this many emitted steps later.
    pub dt_multiplier: usize,
    pub n_prev: usize,
    pub n_curr: usize,
    pub noise_pct: f64,
    pub noise_seed: u64,
    pub subsample_seed: u64,
    pub restarts: usize,
    pub max_iters: usize,
    pub train_seed: u64,
    pub sweep_dt_multipliers: Vec<usize>,
    pub sweep_noise_pcts: Vec<f64>,
    /// Cap on consecutive pairs per sweep; 0 means all available.
    pub sweep_max_pairs: usize,
    pub raw: ConfigMap,
}

fn family_from_name(name: &str) -> Result<ModelFamily, HarnessError> {
    Ok(match name {
        "burgers" => ModelFamily::Burgers,
        "kdv" => ModelFamily::Kdv,
        "ks" => ModelFamily::Ks,
        "nls" => ModelFamily::Nls,
        "ns2d" => ModelFamily::Ns2d,
        "fractional_rl" => ModelFamily::FractionalRl,
        "fractional_laplacian" => ModelFamily::FractionalLaplacian,
        other => {
            return Err(HarnessError::InvalidConfig(format!("unknown family {other}")));
        }
    })
}

/// Per-family default point counts used when the config does not override
/// them, matching the benchmark setups.
fn default_points(family: ModelFamily) -> (usize, usize) {
    match family {
        ModelFamily::Burgers => (71, 69),
        ModelFamily::Kdv => (111, 109),
        ModelFamily::Ks => (301, 299),
        ModelFamily::Nls => (49, 51),
        ModelFamily::Ns2d => (251, 249),
        ModelFamily::FractionalRl | ModelFamily::FractionalLaplacian => (100, 100),
    }
}

impl ExperimentConfig {
    pub fn from_text(text: &str) -> Result<Self, HarnessError> {
        let raw = ConfigMap::parse(text)?;
        Self::from_map(raw)
    }

    pub fn from_map(raw: ConfigMap) -> Result<Self, HarnessError> {
        let family_name = raw
            .get("experiment", "family")
            .ok_or_else(|| HarnessError::InvalidConfig("[experiment] family is required".into()))?;
        let family = family_from_name(family_name)?;
        let format = match raw.get("experiment", "format").unwrap_or("binary") {
            "binary" => FileFormat::Binary,
            "text" => FileFormat::Text,
            other => {
                return Err(HarnessError::InvalidConfig(format!("unknown format {other}")));
            }
        };
        let (dp, dc) = default_points(family);
        let dt_multiplier = raw.usize_or("data", "dt_multiplier", 1)?;
        if dt_multiplier == 0 {
            return Err(HarnessError::InvalidConfig(
                "dt_multiplier = 0 selects a zero snapshot gap".into(),
            ));
        }
        let noise_pct = raw.f64_or("data", "noise_pct", 0.0)?;
        if noise_pct < 0.0 {
            return Err(HarnessError::InvalidConfig("noise_pct must be nonnegative".into()));
        }
        let restarts = raw.usize_or("training", "restarts", 10)?;
        let max_iters = raw.usize_or("training", "max_iters", 500)?;
        if restarts == 0 || max_iters == 0 {
            return Err(HarnessError::InvalidConfig("training budget must be positive".into()));
        }
        Ok(Self {
            family,
            output_dir: PathBuf::from(raw.get("experiment", "output_dir").unwrap_or("out")),
            format,
            snapshot_index: raw.usize_opt("data", "snapshot_index")?,
            snapshot_seed: raw.u64_or("data", "snapshot_seed", 0)?,
            dt_multiplier,
            n_prev: raw.usize_or("data", "n_prev", dp)?,
            n_curr: raw.usize_or("data", "n_curr", dc)?,
            noise_pct,
            noise_seed: raw.u64_or("data", "noise_seed", 1)?,
            subsample_seed: raw.u64_or("data", "subsample_seed", 2)?,
            restarts,
            max_iters,
            train_seed: raw.u64_or("training", "seed", 0)?,
            sweep_dt_multipliers: raw.usize_list("sweep", "dt_multipliers")?.unwrap_or_default(),
            sweep_noise_pcts: raw.f64_list("sweep", "noise_pcts")?.unwrap_or_else(|| vec![0.0]),
            sweep_max_pairs: raw.usize_or("sweep", "max_pairs", 0)?,
            raw,
        })
    }

    pub fn hash(&self) -> String {
        self.raw.hash()
    }
}
