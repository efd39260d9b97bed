//! TOML/JSON configuration files.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toydet::{DetectorConfig, SceneConfig};

/// Scene generator plus detector settings, as read from one file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    pub scene: SceneConfig,
    pub detector: DetectorConfig,
}

/// Reads a `.toml` or `.json` file into `T`; parse errors name the key.
pub fn load_config<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, path)
}

/// Parses `text` as TOML unless `path` ends in `.json`.
pub fn parse_config<T: DeserializeOwned>(text: &str, path: &Path) -> Result<T> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    let parse_err = |key: String, message: String| Error::Parse {
        path: path.to_path_buf(),
        key,
        message,
    };
    if is_json {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| parse_err(e.path().to_string(), e.inner().to_string()))
    } else {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| parse_err(e.path().to_string(), e.inner().message().to_string()))
    }
}
