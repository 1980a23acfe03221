//! `key = value` configuration files.
//!
//! Keys are field names of the target config, either bare (`embed_dim`)
//! or dotted (`model.embed_dim`). A bare key resolves to the shallowest
//! field with that name. Lists are comma separated.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One assignment with the place it came from, for error messages.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Setting {
    pub key: String,
    pub value: String,
    pub origin: String,
}

impl Setting {
    pub fn flag(key: &str, value: impl ToString) -> Self {
        Self {
            key: key.into(),
            value: value.to_string(),
            origin: format!("--{}", key.replace('_', "-")),
        }
    }
}

/// Parses `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_settings(text: &str, origin: &str) -> Result<Vec<Setting>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.into(),
            line: i + 1,
            msg: format!("expected key = value, got {line:?}"),
        })?;
        let key = k.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                path: origin.into(),
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(Setting {
            key: key.into(),
            value: v.trim().into(),
            origin: format!("{origin}:{}", i + 1),
        });
    }
    Ok(out)
}

pub fn read_settings(path: &Path) -> Result<Vec<Setting>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_settings(&text, &path.display().to_string())
}

/// Parses `key=value` as given on the command line.
pub fn parse_assignment(s: &str) -> Result<Setting> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Usage(format!("expected key=value, got {s:?}")))?;
    Ok(Setting {
        key: k.trim().into(),
        value: v.trim().into(),
        origin: format!("--set {s}"),
    })
}

fn find_path(obj: &Map<String, Value>, key: &str) -> Option<Vec<String>> {
    if obj.contains_key(key) {
        return Some(vec![key.to_string()]);
    }
    let mut best: Option<Vec<String>> = None;
    for (k, v) in obj {
        if let Value::Object(inner) = v {
            if let Some(mut p) = find_path(inner, key) {
                p.insert(0, k.clone());
                if best.as_ref().is_none_or(|b| p.len() < b.len()) {
                    best = Some(p);
                }
            }
        }
    }
    best
}

fn parse_scalar(like: &Value, raw: &str) -> std::result::Result<Value, String> {
    match like {
        Value::Bool(_) => match raw {
            "true" | "1" | "yes" | "on" => Ok(Value::Bool(true)),
            "false" | "0" | "no" | "off" => Ok(Value::Bool(false)),
            _ => Err(format!("expected a boolean, got {raw:?}")),
        },
        Value::Number(n) if n.is_u64() || n.is_i64() => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("expected a non-negative integer, got {raw:?}")),
        Value::Number(_) => raw
            .parse::<f64>()
            .ok()
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("expected a number, got {raw:?}")),
        Value::Array(items) => {
            let elem = items
                .first()
                .cloned()
                .unwrap_or(Value::String(String::new()));
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| parse_scalar(&elem, s))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map(Value::Array)
        }
        _ => Ok(Value::String(raw.to_string())),
    }
}

/// Returns `base` with every setting applied in order.
pub fn apply_settings<T: Serialize + DeserializeOwned>(
    base: &T,
    settings: &[Setting],
) -> Result<T> {
    let mut value = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
    for s in settings {
        let root = value
            .as_object_mut()
            .ok_or_else(|| Error::Config("config is not a key/value structure".into()))?;
        let path: Vec<String> = if s.key.contains('.') {
            s.key.split('.').map(String::from).collect()
        } else {
            find_path(root, &s.key)
                .ok_or_else(|| Error::Config(format!("{}: unknown key {:?}", s.origin, s.key)))?
        };
        let mut slot = &mut value;
        for part in &path {
            slot = slot
                .get_mut(part)
                .ok_or_else(|| Error::Config(format!("{}: unknown key {:?}", s.origin, s.key)))?;
        }
        if slot.is_object() {
            return Err(Error::Config(format!(
                "{}: {:?} is a section, not a value",
                s.origin, s.key
            )));
        }
        *slot = parse_scalar(slot, &s.value)
            .map_err(|m| Error::Config(format!("{}: {}: {m}", s.origin, s.key)))?;
    }
    serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::{OtcSetting, SweepSpec};
    use crate::trainer::RunConfig;

    #[test]
    fn nested_and_dotted_keys() {
        let s = parse_settings(
            "# run\nembed_dim = 16\nschedule.peak_lr=0.01\nuse_otc = false # no\noriginal_language = fr\n",
            "cfg",
        )
        .unwrap();
        let c = apply_settings(&RunConfig::default(), &s).unwrap();
        assert_eq!(c.model.embed_dim, 16);
        assert_eq!(c.schedule.peak_lr, 0.01);
        assert!(!c.use_otc);
        assert_eq!(c.original_language, "fr");
    }

    #[test]
    fn lists_enums_and_shallow_preference() {
        let s = parse_settings(
            "languages = en, fr\nseeds = 3,4\notc = on\nbaseline = true\nepochs = 2",
            "x",
        )
        .unwrap();
        let spec = apply_settings(&SweepSpec::default(), &s).unwrap();
        assert_eq!(spec.languages, vec!["en", "fr"]);
        assert_eq!(spec.seeds, vec![3, 4]);
        assert_eq!(spec.otc, OtcSetting::On);
        assert!(spec.baseline);
        assert!(!spec.base.baseline);
        assert_eq!(spec.base.epochs, 2);
    }

    #[test]
    fn errors_name_origin() {
        let s = parse_settings("\nbogus = 1", "f.cfg").unwrap();
        let e = apply_settings(&RunConfig::default(), &s).unwrap_err();
        assert!(e.to_string().contains("f.cfg:2"), "{e}");
        let s = parse_settings("epochs = many", "f.cfg").unwrap();
        assert!(matches!(
            apply_settings(&RunConfig::default(), &s),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            parse_settings("novalue", "f"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
