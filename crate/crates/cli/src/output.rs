//! Output directory resolution, atomic writes and run manifests.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use elphgo::gain_design::GainCertificate;
use elphgo::simulator::{IntegratorConfig, Outcome};
use serde::{Deserialize, Serialize};

use crate::config::{ConfigSource, LoadedConfig};
use crate::CliError;

pub const OUT_DIR_ENV: &str = "ELPHGO_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "elphgo-out";
pub const MANIFEST_SCHEMA: &str = "elphgo-manifest/1";

/// `--out`, then the config's `output.dir`, then `$ELPHGO_OUT_DIR`, then `./elphgo-out`.
pub fn resolve_out_dir(flag: Option<&Path>, config_dir: Option<&Path>) -> PathBuf {
    if let Some(p) = flag.or(config_dir) {
        return p.to_path_buf();
    }
    match std::env::var_os(OUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(DEFAULT_OUT_DIR),
    }
}

/// Writes to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(CliError::io(path, e));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigRecord {
    pub name: String,
    pub source: ConfigSource,
    pub sha256: String,
    pub profile: String,
}

impl ConfigRecord {
    pub fn new(loaded: &LoadedConfig, name: &str, profile: &str) -> Self {
        Self {
            name: name.to_string(),
            source: loaded.source.clone(),
            sha256: loaded.sha256.clone(),
            profile: profile.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFlags {
    pub perturb: bool,
    pub ideal: bool,
}

/// Sidecar written next to every simulation CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub version: String,
    pub config: ConfigRecord,
    pub seed: u64,
    pub flags: RunFlags,
    pub integrator: IntegratorConfig,
    pub ell: Vec<f64>,
    pub gamma: Vec<Vec<(f64, f64)>>,
    pub sat_level: f64,
    pub outcome: Outcome,
    pub final_norm: f64,
    pub samples: usize,
    pub csv: String,
    pub certification: String,
    pub certificate: Option<GainCertificate>,
    pub warnings: Vec<String>,
    pub runtime_s: f64,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nested/a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        let leftovers: Vec<_> = fs::read_dir(p.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn explicit_directories_win() {
        let flag = Path::new("a");
        let cfg = Path::new("b");
        assert_eq!(resolve_out_dir(Some(flag), Some(cfg)), PathBuf::from("a"));
        assert_eq!(resolve_out_dir(None, Some(cfg)), PathBuf::from("b"));
    }
}
