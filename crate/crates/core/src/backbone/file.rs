//! TOML configuration files.
//!
//! ```toml
//! [stem]
//! width = 24
//!
//! [stage1]
//! depth = 3
//! dim = 48
//! exp_ratio = "2"
//! attention = false
//! spanning = false
//! window = "auto"
//! drop_path = 0.05
//! # optional: head_dim = 32, kernel = 5, layout = "cascade"
//!
//! # [stage2] .. [stage4] likewise
//!
//! [head]
//! classes = 1000
//!
//! [input]          # optional
//! resolution = 224
//! window_mode = "strict"
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackboneConfig, HeadConfig, Layout, StageConfig, StemConfig};
use crate::block::{parse_ratio, ExpansionRatio};
use crate::error::{Error, Result};
use crate::window::{WindowMode, WindowSize};

const SECTIONS: [&str; 6] = ["stem", "stage1", "stage2", "stage3", "stage4", "head"];

/// `exp_ratio` may be written as a number or as a "2.5" / "5/2" string.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum RatioValue {
    Int(u32),
    Float(f64),
    Text(String),
}

impl RatioValue {
    fn resolve(&self) -> Result<ExpansionRatio> {
        match self {
            RatioValue::Int(v) => parse_ratio(&v.to_string()),
            RatioValue::Float(v) => parse_ratio(&v.to_string()),
            RatioValue::Text(s) => parse_ratio(s),
        }
    }
}

fn default_head_dim() -> usize {
    32
}

fn default_kernel() -> usize {
    5
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StemFile {
    width: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StageFile {
    depth: usize,
    dim: usize,
    exp_ratio: RatioValue,
    attention: bool,
    spanning: bool,
    window: WindowSize,
    drop_path: f64,
    #[serde(default = "default_head_dim")]
    head_dim: usize,
    #[serde(default = "default_kernel")]
    kernel: usize,
    #[serde(default)]
    layout: Layout,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadFile {
    classes: usize,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InputFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    resolution: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    window_mode: Option<WindowMode>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    stem: StemFile,
    stage1: StageFile,
    stage2: StageFile,
    stage3: StageFile,
    stage4: StageFile,
    head: HeadFile,
    #[serde(default)]
    input: InputFile,
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

fn toml_error(src: &str, e: toml::de::Error) -> Error {
    match e.span() {
        Some(span) => Error::config(format!("line {}: {}", line_of(src, span.start), e.message().trim())),
        None => Error::config(e.message().trim().to_string()),
    }
}

impl StageFile {
    fn into_stage(self, name: &str) -> Result<StageConfig> {
        let exp_ratio = self.exp_ratio.resolve().map_err(|e| Error::config(format!("[{name}] exp_ratio: {e}")))?;
        Ok(StageConfig {
            depth: self.depth,
            dim: self.dim,
            exp_ratio,
            attention: self.attention,
            spanning: self.spanning,
            window: self.window,
            drop_path: self.drop_path,
            head_dim: self.head_dim,
            kernel: self.kernel,
            layout: self.layout,
        })
    }

    fn from_stage(s: &StageConfig) -> Self {
        StageFile {
            depth: s.depth,
            dim: s.dim,
            exp_ratio: RatioValue::Text(s.exp_ratio.to_string()),
            attention: s.attention,
            spanning: s.spanning,
            window: s.window,
            drop_path: s.drop_path,
            head_dim: s.head_dim,
            kernel: s.kernel,
            layout: s.layout,
        }
    }
}

impl BackboneConfig {
    /// Parses and validates a TOML config. Errors carry the line number or
    /// the missing section's name.
    pub fn from_toml_str(src: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(src).map_err(|e| toml_error(src, e))?;
        for section in SECTIONS {
            if !table.contains_key(section) {
                return Err(Error::config(format!("missing section [{section}]")));
            }
        }
        let file: FileConfig = toml::from_str(src).map_err(|e| toml_error(src, e))?;
        let [s1, s2, s3, s4] = [file.stage1, file.stage2, file.stage3, file.stage4];
        let config = BackboneConfig {
            stem: StemConfig { width: file.stem.width },
            stages: [
                s1.into_stage("stage1")?,
                s2.into_stage("stage2")?,
                s3.into_stage("stage3")?,
                s4.into_stage("stage4")?,
            ],
            head: HeadConfig { classes: file.head.classes },
            resolution: file.input.resolution.unwrap_or(224),
            window_mode: file.input.window_mode.unwrap_or_default(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        let [s1, s2, s3, s4] = self.stages.each_ref().map(StageFile::from_stage);
        let file = FileConfig {
            stem: StemFile { width: self.stem.width },
            stage1: s1,
            stage2: s2,
            stage3: s3,
            stage4: s4,
            head: HeadFile { classes: self.head.classes },
            input: InputFile {
                resolution: Some(self.resolution),
                window_mode: Some(self.window_mode),
            },
        };
        toml::to_string(&file).expect("config serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::PRESETS;
    use num_rational::Ratio;

    #[test]
    fn presets_round_trip() {
        for name in PRESETS.iter().chain(&["toy"]) {
            let c = BackboneConfig::preset(name).unwrap();
            let text = c.to_toml_string();
            assert_eq!(BackboneConfig::from_toml_str(&text).unwrap(), c, "{name}");
        }
    }

    fn five_m() -> String {
        BackboneConfig::preset("emov2-5m").unwrap().to_toml_string()
    }

    #[test]
    fn decimal_ratio_is_rational() {
        let text = five_m().replacen("exp_ratio = \"2\"", "exp_ratio = \"2.5\"", 1);
        let c = BackboneConfig::from_toml_str(&text).unwrap();
        assert_eq!(c.stages[0].exp_ratio, Ratio::new(5, 2));
        let again = BackboneConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(again.stages[0].exp_ratio, Ratio::new(5, 2));
        let text = five_m().replacen("exp_ratio = \"2\"", "exp_ratio = 2.5", 1);
        assert_eq!(BackboneConfig::from_toml_str(&text).unwrap().stages[0].exp_ratio, Ratio::new(5, 2));
    }

    #[test]
    fn missing_section_named() {
        let text = five_m();
        let start = text.find("[stage3]").unwrap();
        let end = text.find("[stage4]").unwrap();
        let cut = format!("{}{}", &text[..start], &text[end..]);
        let err = BackboneConfig::from_toml_str(&cut).unwrap_err().to_string();
        assert!(err.contains("[stage3]"), "{err}");
    }

    #[test]
    fn unknown_key_reports_line() {
        let text = five_m();
        let line = text.lines().position(|l| l == "[stage2]").unwrap() + 2;
        let bad = text.replacen("[stage2]\n", "[stage2]\ncolour = 3\n", 1);
        let err = BackboneConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")) && err.contains("colour"), "{err}");
        let err = BackboneConfig::from_toml_str("[stem\nwidth = 1").unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn invariant_violation_names_key() {
        let bad = five_m().replacen("dim = 160", "dim = 40", 1);
        let err = BackboneConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("stage3") && err.contains("dim"), "{err}");
        let bad = five_m().replacen("exp_ratio = \"4\"", "exp_ratio = \"four\"", 1);
        let err = BackboneConfig::from_toml_str(&bad).unwrap_err().to_string();
        assert!(err.contains("exp_ratio"), "{err}");
    }
}
