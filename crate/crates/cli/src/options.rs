use std::fmt;
use std::path::PathBuf;

use cryorecon::io::config::KeyValues;
use cryorecon::Error;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Lib(e) if e.is_numerical() => 3,
            CliError::Lib(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Lib(e)
    }
}

/// Turns configuration mistakes into usage errors.
pub fn usage<T>(r: cryorecon::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| CliError::Usage(e.to_string()))
}

/// Parses `--key value`, `--key=value` and bare `--flag` (meaning `true`).
pub fn parse_overrides(args: &[String]) -> Result<KeyValues, CliError> {
    let mut kv = KeyValues::new();
    let mut i = 0;
    while i < args.len() {
        let Some(body) = args[i].strip_prefix("--") else {
            return Err(CliError::Usage(format!("unexpected argument '{}'", args[i])));
        };
        let (key, value) = match body.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => match args.get(i + 1) {
                Some(v) if !v.starts_with("--") => {
                    i += 1;
                    (body.to_string(), v.clone())
                }
                _ => (body.to_string(), "true".to_string()),
            },
        };
        if key.is_empty() {
            return Err(CliError::Usage("empty option name".into()));
        }
        let key = key.replace('-', "_");
        if kv.contains(&key) {
            return Err(CliError::Usage(format!("option --{key} given twice")));
        }
        kv.set(key, value);
        i += 1;
    }
    Ok(kv)
}

/// Path options may also arrive among the free-form overrides when they
/// follow another override on the command line.
pub fn take_path(kv: &mut KeyValues, key: &str, explicit: Option<PathBuf>) -> Option<PathBuf> {
    let from_rest = kv.raw(key).map(PathBuf::from);
    if from_rest.is_some() {
        kv.remove(key);
    }
    explicit.or(from_rest)
}

pub fn require_path(p: Option<PathBuf>, flag: &str) -> Result<PathBuf, CliError> {
    p.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

/// Config file first, then command-line overrides; unknown keys are usage errors.
pub fn resolve(config: Option<PathBuf>, overrides: &KeyValues, known: &[&str]) -> Result<KeyValues, CliError> {
    let mut kv = match config {
        Some(p) => KeyValues::read(&p).map_err(|e| match e {
            Error::Io { .. } => CliError::Lib(e),
            other => CliError::Usage(other.to_string()),
        })?,
        None => KeyValues::new(),
    };
    kv.merge(overrides);
    usage(kv.check_known(known))?;
    Ok(kv)
}
