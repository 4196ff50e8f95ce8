//! Service configuration, read from `TOPICSWITCH_*` environment variables.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use thiserror::Error;

pub const DEFAULT_EPSILON: f64 = 0.61;
pub const DEFAULT_TTL: Duration = Duration::from_secs(24 * 60 * 60);

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("missing required variable {0}")]
    Missing(&'static str),
    #[error("invalid value {value:?} for {var}: {reason}")]
    Invalid {
        var: &'static str,
        value: String,
        reason: String,
    },
}

/// Origins allowed to call the API from a browser.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorsOrigins {
    Any,
    List(Vec<String>),
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub generator: PathBuf,
    pub selector: PathBuf,
    pub discriminator: PathBuf,
    pub epsilon: f64,
    /// Candidates per turn; `None` uses every latent of the generator.
    pub k: Option<usize>,
    pub bind: SocketAddr,
    pub log_dir: PathBuf,
    /// Idle time after which a session is closed.
    pub session_ttl: Duration,
    pub cors: CorsOrigins,
    /// Whether message and transcript payloads carry the candidate list.
    pub include_candidates: bool,
    /// Lower bound on how long a turn holds its session. Zero in production.
    pub min_turn_duration: Duration,
}

impl ServiceConfig {
    /// Defaults around the three checkpoint paths.
    pub fn new(generator: impl Into<PathBuf>, selector: impl Into<PathBuf>, discriminator: impl Into<PathBuf>) -> Self {
        Self {
            generator: generator.into(),
            selector: selector.into(),
            discriminator: discriminator.into(),
            epsilon: DEFAULT_EPSILON,
            k: None,
            bind: SocketAddr::from(([127, 0, 0, 1], 8080)),
            log_dir: PathBuf::from("sessions"),
            session_ttl: DEFAULT_TTL,
            cors: CorsOrigins::Any,
            include_candidates: true,
            min_turn_duration: Duration::ZERO,
        }
    }

    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_lookup(|k| std::env::var(k).ok())
    }

    /// Reads the variables through `get`, so tests need not touch the process env.
    pub fn from_lookup(get: impl Fn(&str) -> Option<String>) -> Result<Self, ConfigError> {
        let required = |var: &'static str| get(var).ok_or(ConfigError::Missing(var));
        let mut c = Self::new(
            required("TOPICSWITCH_GENERATOR")?,
            required("TOPICSWITCH_SELECTOR")?,
            required("TOPICSWITCH_DISCRIMINATOR")?,
        );
        if let Some(v) = get("TOPICSWITCH_EPSILON") {
            c.epsilon = parse("TOPICSWITCH_EPSILON", &v)?;
        }
        if let Some(v) = get("TOPICSWITCH_K") {
            c.k = Some(parse("TOPICSWITCH_K", &v)?);
        }
        if let Some(v) = get("TOPICSWITCH_BIND") {
            c.bind = parse("TOPICSWITCH_BIND", &v)?;
        }
        if let Some(v) = get("TOPICSWITCH_LOG_DIR") {
            c.log_dir = v.into();
        }
        if let Some(v) = get("TOPICSWITCH_SESSION_TTL_SECS") {
            c.session_ttl = Duration::from_secs(parse("TOPICSWITCH_SESSION_TTL_SECS", &v)?);
        }
        if let Some(v) = get("TOPICSWITCH_CORS_ORIGINS") {
            c.cors = parse_origins(&v);
        }
        if let Some(v) = get("TOPICSWITCH_CANDIDATES") {
            c.include_candidates = parse_flag("TOPICSWITCH_CANDIDATES", &v)?;
        }
        if let Some(v) = get("TOPICSWITCH_MIN_TURN_MS") {
            c.min_turn_duration = Duration::from_millis(parse("TOPICSWITCH_MIN_TURN_MS", &v)?);
        }
        Ok(c)
    }
}

/// `*` allows any origin; otherwise a comma-separated list.
pub fn parse_origins(v: &str) -> CorsOrigins {
    if v.trim() == "*" {
        return CorsOrigins::Any;
    }
    CorsOrigins::List(
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect(),
    )
}

fn parse<T: std::str::FromStr>(var: &'static str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse().map_err(|e: T::Err| ConfigError::Invalid {
        var,
        value: value.to_string(),
        reason: e.to_string(),
    })
}

fn parse_flag(var: &'static str, value: &str) -> Result<bool, ConfigError> {
    match value.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "on" | "yes" => Ok(true),
        "0" | "false" | "off" | "no" => Ok(false),
        _ => Err(ConfigError::Invalid {
            var,
            value: value.to_string(),
            reason: "expected on or off".into(),
        }),
    }
}
