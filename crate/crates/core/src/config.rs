//! Config loading and content digests for provenance.

use std::path::Path;

use serde::de::DeserializeOwned;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::emfield::CavitySpec;
use crate::fom::SpinSystemConstants;
use crate::scene::SceneConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: String, msg: String },
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// A parsed config together with the digest of its exact text.
#[derive(Debug, Clone, PartialEq)]
pub struct Loaded<C> {
    pub config: C,
    pub digest: String,
    pub path: String,
}

pub fn parse_str<C: DeserializeOwned>(text: &str, origin: &str) -> Result<Loaded<C>, ConfigError> {
    let config = toml::from_str(text).map_err(|e| ConfigError::Parse {
        path: origin.to_string(),
        msg: e.to_string(),
    })?;
    Ok(Loaded {
        config,
        digest: sha256_hex(text.as_bytes()),
        path: origin.to_string(),
    })
}

pub fn load<C: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Loaded<C>, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_str(&text, &path.display().to_string())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Loaded<SceneConfig>, ConfigError> {
    load(path)
}

pub fn load_cavity(path: impl AsRef<Path>) -> Result<Loaded<CavitySpec>, ConfigError> {
    load(path)
}

pub fn load_constants(path: impl AsRef<Path>) -> Result<Loaded<SpinSystemConstants>, ConfigError> {
    load(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Configuration, TipStyle};

    #[test]
    fn digest_is_sha256() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn scene_config_parses_with_defaults() {
        let l: Loaded<SceneConfig> = parse_str(
            "configuration = \"invasive\"\ntip_style = \"spear\"\n[crystal]\nbase_z_mm = 4.0\n",
            "inline",
        )
        .unwrap();
        assert_eq!(l.config.configuration, Configuration::Invasive);
        assert_eq!(l.config.tip_style, TipStyle::Spear);
        assert_eq!(l.config.crystal.base_z_mm, 4.0);
        assert_eq!(l.config.rod.diameter_mm, 5.0);
        assert_eq!(l.digest.len(), 64);
    }

    #[test]
    fn unknown_keys_and_unitless_names_rejected() {
        let e = parse_str::<SceneConfig>("configuration = \"butt\"\n[rod]\ndiameter = 5.0\n", "x").unwrap_err();
        assert!(matches!(e, ConfigError::Parse { .. }));
    }

    #[test]
    fn cavity_config_parses() {
        let l: Loaded<CavitySpec> = parse_str(
            "radius_mm = 16.0\nheight_mm = 20.0\n[ring]\ninner_radius_mm = 4.5\nouter_radius_mm = 7.25\nheight_mm = 7.0\nbase_z_mm = 6.0\n",
            "cav",
        )
        .unwrap();
        assert_eq!(l.config.ring.as_ref().unwrap().permittivity, 318.0);
        assert!(l.config.support.is_none());
    }
}
