//! Loading, patching and validating experiment configs.

use std::fmt;
use std::path::Path;

use dssi_core::PipelineConfig;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// One problem with a config, addressed by JSON pointer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub pointer: String,
    pub message: String,
    /// 1-based position in the source file, when known.
    pub location: Option<(usize, usize)>,
}

impl Diagnostic {
    fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
            location: None,
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let pointer = if self.pointer.is_empty() { "/" } else { &self.pointer };
        write!(f, "{pointer}: {}", self.message)?;
        if let Some((line, col)) = self.location {
            write!(f, " (line {line}, column {col})")?;
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{source_name}: invalid config:{}", render(.diagnostics))]
pub struct ConfigError {
    pub source_name: String,
    pub diagnostics: Vec<Diagnostic>,
}

fn render(diags: &[Diagnostic]) -> String {
    diags.iter().map(|d| format!("\n  {d}")).collect()
}

/// A `--set key=value` override. Keys are dot paths (`dssi.kappa`,
/// `mask_fractions.0`); values are parsed as JSON and fall back to a plain
/// string.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub path: Vec<String>,
    pub value: Value,
}

impl std::str::FromStr for Override {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (key, raw) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
        let key = key.trim();
        if key.is_empty() || key.split('.').any(str::is_empty) {
            return Err(format!("malformed key `{key}`"));
        }
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        Ok(Self {
            path: key.split('.').map(str::to_string).collect(),
            value,
        })
    }
}

fn pointer_of(path: &[String]) -> String {
    path.iter().map(|p| format!("/{}", p.replace('~', "~0").replace('/', "~1"))).collect()
}

impl Override {
    pub fn apply(&self, root: &mut Value) -> Result<(), Diagnostic> {
        let mut cur = root;
        let last = self.path.len() - 1;
        for (i, seg) in self.path.iter().enumerate() {
            let here = pointer_of(&self.path[..=i]);
            cur = match cur {
                Value::Object(map) => {
                    if i == last {
                        map.insert(seg.clone(), self.value.clone());
                        return Ok(());
                    }
                    map.entry(seg.clone()).or_insert_with(|| Value::Object(Default::default()))
                }
                Value::Array(items) => {
                    let idx: usize = seg
                        .parse()
                        .map_err(|_| Diagnostic::new(&here, format!("`{seg}` is not an array index")))?;
                    if i == last && idx == items.len() {
                        items.push(self.value.clone());
                        return Ok(());
                    }
                    let len = items.len();
                    let slot = items
                        .get_mut(idx)
                        .ok_or_else(|| Diagnostic::new(&here, format!("index {idx} out of range for length {len}")))?;
                    if i == last {
                        *slot = self.value.clone();
                        return Ok(());
                    }
                    slot
                }
                _ => {
                    return Err(Diagnostic::new(
                        pointer_of(&self.path[..i]),
                        "cannot descend into a scalar value",
                    ))
                }
            };
        }
        unreachable!("the last segment always returns")
    }
}

fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    path.iter()
        .filter_map(|seg| match seg {
            Segment::Seq { index } => Some(index.to_string()),
            Segment::Map { key } => Some(key.clone()),
            Segment::Enum { variant } => Some(variant.clone()),
            Segment::Unknown => None,
        })
        .map(|s| format!("/{}", s.replace('~', "~0").replace('/', "~1")))
        .collect()
}

fn serde_diagnostic(err: serde_path_to_error::Error<serde_json::Error>, with_location: bool) -> Diagnostic {
    let mut pointer = path_to_pointer(err.path());
    let inner = err.into_inner();
    let full = inner.to_string();
    // serde_json appends " at line L column C"; keep the bare message
    let message = full.split(" at line ").next().unwrap_or(&full).to_string();
    if let Some(field) = message.strip_prefix("missing field `").and_then(|m| m.strip_suffix('`')) {
        pointer = format!("{pointer}/{field}");
    }
    let location = (with_location && inner.line() > 0).then(|| (inner.line(), inner.column()));
    Diagnostic {
        pointer,
        message,
        location,
    }
}

/// Parses `text` as a [`PipelineConfig`], applying overrides and an optional
/// seed override first, then range-checks every field. All violations are
/// returned together.
pub fn parse_config(text: &str, overrides: &[Override], seed_override: Option<&str>) -> Result<PipelineConfig, Vec<Diagnostic>> {
    let cfg = if overrides.is_empty() && seed_override.is_none() {
        // straight from the text so diagnostics carry file positions
        let mut de = serde_json::Deserializer::from_str(text);
        let cfg: PipelineConfig = serde_path_to_error::deserialize(&mut de).map_err(|e| vec![serde_diagnostic(e, true)])?;
        de.end().map_err(|e| {
            vec![Diagnostic {
                location: Some((e.line(), e.column())),
                ..Diagnostic::new("", "trailing characters after the config object")
            }]
        })?;
        cfg
    } else {
        let mut root: Value = serde_json::from_str(text).map_err(|e| {
            vec![Diagnostic {
                location: Some((e.line(), e.column())),
                ..Diagnostic::new("", e.to_string().split(" at line ").next().unwrap_or_default())
            }]
        })?;
        let mut diags = Vec::new();
        for o in overrides {
            if let Err(d) = o.apply(&mut root) {
                diags.push(d);
            }
        }
        if let Some(raw) = seed_override {
            match raw.trim().parse::<u64>() {
                Ok(seed) => {
                    if let Value::Object(map) = &mut root {
                        map.insert("seed".into(), seed.into());
                    }
                }
                Err(_) => diags.push(Diagnostic::new("/seed", format!("DSSI_SEED `{raw}` is not an unsigned integer"))),
            }
        }
        if !diags.is_empty() {
            return Err(diags);
        }
        serde_path_to_error::deserialize(root).map_err(|e| vec![serde_diagnostic(e, false)])?
    };
    let violations = cfg.violations();
    if violations.is_empty() {
        Ok(cfg)
    } else {
        Err(violations.into_iter().map(|(p, m)| Diagnostic::new(p, m)).collect())
    }
}

/// Reads and validates a config file.
pub fn validate_config(path: &Path, overrides: &[Override], seed_override: Option<&str>) -> Result<PipelineConfig, ConfigError> {
    let source_name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
        source_name: source_name.clone(),
        diagnostics: vec![Diagnostic::new("", format!("cannot read file: {e}"))],
    })?;
    parse_config(&text, overrides, seed_override).map_err(|diagnostics| ConfigError {
        source_name,
        diagnostics,
    })
}

/// Pretty JSON with a trailing newline; parsing it back and re-rendering
/// gives the same bytes.
pub fn canonical_json(cfg: &PipelineConfig) -> String {
    let mut s = serde_json::to_string_pretty(cfg).expect("config serializes");
    s.push('\n');
    s
}

pub fn config_hash(cfg: &PipelineConfig) -> String {
    hex::encode(Sha256::digest(canonical_json(cfg).as_bytes()))
}
