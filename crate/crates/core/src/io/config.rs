//! Registration configuration files (TOML).
//!
//! Every key is optional; missing keys take the defaults below. Unknown keys
//! are rejected.
//!
//! | key | default |
//! |-----|---------|
//! | `lambda` | 0.2 |
//! | `window_radius` | 4 |
//! | `squaring_steps` | 7 |
//! | `stages` | `[{1, 300, 0.5}, {0, 150, 0.25}]` |
//! | `adam.beta1` / `adam.beta2` / `adam.epsilon` | 0.9 / 0.999 / 1e-8 |
//! | `convergence_tol` | 1e-5 |
//! | `convergence_window` | 10 |
//! | `seed` | 0 |
//!
//! A stage entry needs all three of `downsample_levels`, `max_iterations`
//! and `step_size`. Full example ([`EXAMPLE_CONFIG`]):
//!
//! ```toml
#![doc = include_str!("example_config.toml")]
//! ```

use std::path::{Path, PathBuf};

use crate::error::Error;
use crate::optimizer::RegistrationConfig;

/// The documented full example.
pub const EXAMPLE_CONFIG: &str = include_str!("example_config.toml");

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}:{line}:{column}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },

    #[error("invalid config field `{field}`: {reason}")]
    Validation { field: String, reason: String },
}

pub fn read_config(path: impl AsRef<Path>) -> Result<RegistrationConfig, ConfigError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_config(&text, path)
}

/// Parses and validates; `origin` is only used in messages.
pub fn parse_config(text: &str, origin: &Path) -> Result<RegistrationConfig, ConfigError> {
    let config: RegistrationConfig = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((1, 1), |s| line_column(text, s.start));
        ConfigError::Parse {
            path: origin.to_path_buf(),
            line,
            column,
            message: e.message().trim().to_string(),
        }
    })?;
    validate(&config)?;
    Ok(config)
}

pub fn validate(config: &RegistrationConfig) -> Result<(), ConfigError> {
    config.validate().map_err(|e| match e {
        Error::InvalidArgument { name, reason } => ConfigError::Validation {
            field: name.to_string(),
            reason,
        },
        other => ConfigError::Validation {
            field: String::new(),
            reason: other.to_string(),
        },
    })
}

pub fn config_to_string(config: &RegistrationConfig) -> String {
    toml::to_string(config).expect("config serialises")
}

/// 1-based line and column (in characters) of a byte offset.
fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let start = before.rfind('\n').map_or(0, |i| i + 1);
    (line, before[start..].chars().count() + 1)
}
