//! Errors, config-file merging and the textual value formats shared by
//! the subcommands.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use rendertime_core::camera::CameraPose;
use rendertime_core::prednet::InputGroup;
use rendertime_core::transfer::TransferFunction;

/// Usage errors exit with 2, everything else with 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

/// Unwraps a merged option or reports the missing flag.
pub fn need<T>(v: Option<T>, flag: &str) -> CliResult<T> {
    v.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

/// Merges the subcommand's section of the config file under the flags
/// given on the command line. Flags win; unknown keys are errors.
pub fn merge<T: Serialize + DeserializeOwned>(flags: T, config: Option<&Path>, section: &str) -> CliResult<T> {
    let Some(path) = config else { return Ok(flags) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let root: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("config {} is not valid JSON: {e}", path.display())))?;
    let mut merged = match root.get(section) {
        Some(Value::Object(m)) => m.clone(),
        Some(_) => return usage(format!("config section {section:?} must be an object")),
        None => return Ok(flags),
    };
    if let Value::Object(given) = serde_json::to_value(&flags).map_err(anyhow::Error::from)? {
        merged.extend(given);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config section {section:?}: {e}")))
}

fn numbers<T: std::str::FromStr>(s: &str, sep: &[char], what: &str) -> CliResult<Vec<T>> {
    s.split(sep)
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("invalid {what} {s:?}"))))
        .collect()
}

/// `64` or `64x48x32`.
pub fn parse_dims(s: &str) -> CliResult<[usize; 3]> {
    let v: Vec<usize> = numbers(s, &['x', 'X'], "dims")?;
    match v.as_slice() {
        [d] => Ok([*d; 3]),
        [a, b, c] => Ok([*a, *b, *c]),
        _ => usage(format!("invalid dims {s:?}: expected N or XxYxZ")),
    }
}

/// `256` or `320x240`.
pub fn parse_img(s: &str) -> CliResult<[usize; 2]> {
    let v: Vec<usize> = numbers(s, &['x', 'X'], "image size")?;
    let img = match v.as_slice() {
        [d] => [*d, *d],
        [w, h] => [*w, *h],
        _ => return usage(format!("invalid image size {s:?}: expected N or WxH")),
    };
    if img.contains(&0) {
        return usage(format!("invalid image size {s:?}: sides must be positive"));
    }
    Ok(img)
}

/// Comma-separated list of image sizes.
pub fn parse_imgs(s: &str) -> CliResult<Vec<[usize; 2]>> {
    s.split(',').map(parse_img).collect()
}

/// `rx,ry,dz` in degrees and box diagonals.
pub fn parse_pose(s: &str) -> CliResult<CameraPose> {
    let v: Vec<f64> = numbers(s, &[','], "pose")?;
    let [rx, ry, dz] = v[..] else {
        return usage(format!("invalid pose {s:?}: expected rx,ry,dz"));
    };
    CameraPose::new(rx, ry, dz).map_err(|e| CliError::Usage(format!("invalid pose {s:?}: {e}")))
}

/// Comma-separated `c,w,h` triples.
pub fn parse_tf(s: &str) -> CliResult<TransferFunction> {
    let k: Vec<f32> = numbers(s, &[','], "kappa")?;
    TransferFunction::from_kappa(&k).map_err(|e| CliError::Usage(format!("invalid kappa {s:?}: {e}")))
}

pub fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    numbers(s, &[','], what)
}

/// `feature,pose` drops both groups; `none` drops nothing.
pub fn parse_drop_set(s: &str) -> CliResult<Vec<InputGroup>> {
    if s.trim() == "none" || s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|g| {
            let g = g.trim();
            InputGroup::ALL
                .iter()
                .copied()
                .find(|x| x.name() == g)
                .ok_or_else(|| CliError::Usage(format!("unknown input group {g:?} (feature, pose, tf, resolution)")))
        })
        .collect()
}

pub const DEFAULT_KAPPA: &str = "0.3,0.05,0.6,0.55,0.08,0.8,0.8,0.05,1.0";

/// Training-log path next to an output file: `model.ckpt` gives
/// `model.log.jsonl`.
pub fn log_path_for(out: &Path) -> PathBuf {
    out.with_extension("log.jsonl")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dims_and_images() {
        assert_eq!(parse_dims("64").unwrap(), [64; 3]);
        assert_eq!(parse_dims("16x32x48").unwrap(), [16, 32, 48]);
        assert!(parse_dims("16x32").is_err());
        assert!(parse_dims("abc").is_err());
        assert_eq!(parse_img("320x240").unwrap(), [320, 240]);
        assert!(parse_img("0").is_err());
        assert_eq!(parse_imgs("64,128x96").unwrap(), vec![[64, 64], [128, 96]]);
    }

    #[test]
    fn pose_and_tf() {
        let p = parse_pose("10,-20,2.5").unwrap();
        assert_eq!((p.rx, p.ry, p.dz), (10.0, -20.0, 2.5));
        assert!(parse_pose("1,2").is_err());
        assert!(parse_pose("0,95,2").is_err());
        assert_eq!(parse_tf(DEFAULT_KAPPA).unwrap().lobes().len(), 3);
        assert!(parse_tf("0.5,0.1").is_err());
    }

    #[test]
    fn drop_sets() {
        assert!(parse_drop_set("none").unwrap().is_empty());
        assert_eq!(parse_drop_set("pose,tf").unwrap(), vec![InputGroup::Pose, InputGroup::Tf]);
        assert!(parse_drop_set("colour").is_err());
    }

    #[derive(Debug, PartialEq, Serialize, serde::Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Demo {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        b: Option<String>,
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.json");
        std::fs::write(&cfg, r#"{"demo": {"a": 1, "b": "file"}, "other": {"zzz": 0}}"#).unwrap();
        let m = merge(Demo { a: None, b: Some("flag".into()) }, Some(&cfg), "demo").unwrap();
        assert_eq!(m, Demo { a: Some(1), b: Some("flag".into()) });
        std::fs::write(&cfg, r#"{"demo": {"c": 1}}"#).unwrap();
        assert!(matches!(merge(Demo { a: None, b: None }, Some(&cfg), "demo"), Err(CliError::Usage(_))));
    }
}
