//! Key and message files. A key file stores only what regenerates the
//! matrix; the matrix itself never touches disk.

use std::fs;
use std::path::Path;

use nnwm_core::{make_key, KeyKind, Message, WatermarkKey};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const KEY_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyFile {
    pub kind: KeyKind,
    pub seed: u64,
    #[serde(rename = "T")]
    pub bits: usize,
    #[serde(rename = "M")]
    pub target_len: usize,
    pub version: u32,
}

impl KeyFile {
    pub fn of(key: &WatermarkKey) -> Self {
        KeyFile {
            kind: key.kind(),
            seed: key.seed(),
            bits: key.bits(),
            target_len: key.target_len(),
            version: KEY_FILE_VERSION,
        }
    }

    pub fn realize(&self) -> Result<WatermarkKey> {
        if self.version != KEY_FILE_VERSION {
            return Err(CliError::config(
                "key.version",
                format!("unsupported key file version {}", self.version),
            ));
        }
        Ok(make_key(self.kind, self.seed, self.bits, self.target_len)?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MessageFile {
    /// Bits packed most significant first.
    pub hex: String,
    pub bits: usize,
}

impl MessageFile {
    pub fn of(message: &Message) -> Self {
        MessageFile {
            hex: message.to_hex(),
            bits: message.len(),
        }
    }

    pub fn message(&self) -> Result<Message> {
        Ok(Message::from_hex(&self.hex, self.bits)?)
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|source| CliError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("plain data serializes");
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

pub fn read_key(path: &Path) -> Result<WatermarkKey> {
    read_json::<KeyFile>(path)?.realize()
}

pub fn read_message(path: &Path) -> Result<Message> {
    read_json::<MessageFile>(path)?.message()
}
