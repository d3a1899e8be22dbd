//! Model and export configuration plus the flat `key = value` config format.
//!
//! ```text
//! # PAI-YOLOXs with a TOOD head
//! backbone.kind = repvgg
//! head.kind = tood
//! head.tood_stack = 3
//! export.score_thresh = 0.25
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

macro_rules! keyword_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "snake_case")]
        pub enum $name { $($variant),+ }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self { $($name::$variant => $text),+ }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = String;
            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(format!(
                        "expected one of {}, got `{s}`",
                        [$($text),+].join(", ")
                    )),
                }
            }
        }
    };
}

keyword_enum!(BackboneKind { CspDarknet => "cspdarknet", RepVgg => "repvgg" });
keyword_enum!(NeckKind {
    Pafpn => "pafpn",
    Asff => "asff",
    AsffSim => "asff_sim",
    GsConvAll => "gsconv_all",
    GsConvPart => "gsconv_part",
});
keyword_enum!(HeadKind { Decoupled => "decoupled", Tood => "tood" });
keyword_enum!(
    /// Plain 3x3 conv block or RepVGG block.
    ConvKind { Vanilla => "vanilla", Rep => "rep" }
);
keyword_enum!(NmsMode { Standard => "standard", Batched => "batched" });

pub const TOOD_STACK_RANGE: (usize, usize) = (2, 6);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub neck: NeckKind,
    pub head: HeadKind,
    pub tood_stack: usize,
    /// Inter-layer blocks of the TOOD head.
    pub tood_conv_kind: ConvKind,
    /// Final per-task blocks of the TOOD head.
    pub tood_final_kind: ConvKind,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::CspDarknet,
            neck: NeckKind::Pafpn,
            head: HeadKind::Decoupled,
            tood_stack: 3,
            tood_conv_kind: ConvKind::Vanilla,
            tood_final_kind: ConvKind::Vanilla,
            width_mult: 0.50,
            depth_mult: 0.33,
            num_classes: 80,
            input_size: (640, 640),
        }
    }
}

impl ModelConfig {
    /// YOLOX-s: CSPDarknet, PAFPN, decoupled head.
    pub fn yolox_s() -> Self {
        Self::default()
    }

    /// RepVGG backbone with the baseline neck and head.
    pub fn pai_yolox_s() -> Self {
        Self {
            backbone: BackboneKind::RepVgg,
            ..Self::default()
        }
    }

    pub fn pai_yolox_s_asff() -> Self {
        Self {
            neck: NeckKind::Asff,
            ..Self::pai_yolox_s()
        }
    }

    pub fn pai_yolox_s_asff_sim() -> Self {
        Self {
            neck: NeckKind::AsffSim,
            ..Self::pai_yolox_s()
        }
    }

    pub fn with_tood(self, stack: usize) -> Self {
        Self {
            head: HeadKind::Tood,
            tood_stack: stack,
            ..self
        }
    }

    pub fn with_input(self, h: usize, w: usize) -> Self {
        Self {
            input_size: (h, w),
            ..self
        }
    }

    /// `base * width_mult`, which must be a positive integer.
    pub fn channels(&self, base: usize) -> Result<usize> {
        let c = base as f64 * self.width_mult;
        if c < 1.0 || (c - c.round()).abs() > 1e-9 {
            return config_err(format!(
                "width multiplier {} gives {c} channels for base width {base}",
                self.width_mult
            ));
        }
        Ok(c.round() as usize)
    }

    /// Scaled block count, at least one.
    pub fn depth(&self, base: usize) -> usize {
        ((base as f64 * self.depth_mult).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.width_mult > 0.0) || !(self.depth_mult > 0.0) {
            return config_err("width and depth multipliers must be positive");
        }
        for base in [64, 128, 256, 512, 1024] {
            let c = self.channels(base)?;
            // group-mean unification and GSConv halves need even widths
            if c % 4 != 0 {
                return config_err(format!("channel count {c} (base {base}) must be a multiple of 4"));
            }
        }
        if self.num_classes == 0 {
            return config_err("num_classes must be >= 1");
        }
        let (lo, hi) = TOOD_STACK_RANGE;
        if !(lo..=hi).contains(&self.tood_stack) {
            return config_err(format!("tood_stack {} outside [{lo},{hi}]", self.tood_stack));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
            return config_err(format!("input size {h}x{w} must be a positive multiple of 32"));
        }
        Ok(())
    }
}

/// Export-time switches of the end-to-end pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportConfig {
    pub fuse_reparam: bool,
    pub fuse_preprocess: bool,
    pub nms_mode: NmsMode,
    pub score_thresh: f32,
    pub iou_thresh: f32,
    pub max_detections: usize,
    /// Pipeline consecutive images across stages.
    pub overlap: bool,
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            fuse_reparam: false,
            fuse_preprocess: false,
            nms_mode: NmsMode::Standard,
            score_thresh: 0.01,
            iou_thresh: 0.65,
            max_detections: 300,
            overlap: false,
        }
    }
}

impl ExportConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("score_thresh", self.score_thresh), ("iou_thresh", self.iou_thresh)] {
            if !(v > 0.0 && v < 1.0) {
                return config_err(format!("{name} {v} outside (0,1)"));
            }
        }
        Ok(())
    }
}

/// Both halves of a config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub model: ModelConfig,
    pub export: ExportConfig,
}

/// Every accepted key, in the order `render_config` writes them.
pub const KEYS: &[&str] = &[
    "backbone.kind",
    "neck.kind",
    "head.kind",
    "head.tood_stack",
    "head.tood_conv_kind",
    "head.tood_final_kind",
    "model.width",
    "model.depth",
    "model.num_classes",
    "model.input_h",
    "model.input_w",
    "export.fuse_reparam",
    "export.fuse_preprocess",
    "export.nms_mode",
    "export.score_thresh",
    "export.iou_thresh",
    "export.max_detections",
    "export.overlap",
];

#[derive(Debug, Clone, PartialEq)]
enum Value {
    Str(String),
    Num(f64),
    Bool(bool),
}

impl Value {
    fn parse(raw: &str) -> std::result::Result<Self, String> {
        if let Some(inner) = raw.strip_prefix('"') {
            return inner
                .strip_suffix('"')
                .filter(|s| !s.contains('"'))
                .map(|s| Value::Str(s.to_string()))
                .ok_or_else(|| format!("unterminated string {raw}"));
        }
        match raw {
            "true" => return Ok(Value::Bool(true)),
            "false" => return Ok(Value::Bool(false)),
            _ => {}
        }
        if let Ok(v) = raw.parse::<f64>() {
            if v.is_finite() {
                return Ok(Value::Num(v));
            }
        }
        if raw.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Ok(Value::Str(raw.to_string()));
        }
        Err(format!("cannot parse value `{raw}`"))
    }

    fn kind(&self) -> &'static str {
        match self {
            Value::Str(_) => "string",
            Value::Num(_) => "number",
            Value::Bool(_) => "bool",
        }
    }

    fn keyword<T: FromStr<Err = String>>(&self) -> std::result::Result<T, String> {
        match self {
            Value::Str(s) => s.parse(),
            other => Err(format!("expected a string, got a {}", other.kind())),
        }
    }

    fn number(&self) -> std::result::Result<f64, String> {
        match self {
            Value::Num(v) => Ok(*v),
            other => Err(format!("expected a number, got a {}", other.kind())),
        }
    }

    fn integer(&self, lo: usize, hi: usize) -> std::result::Result<usize, String> {
        let v = self.number()?;
        if v.fract() != 0.0 {
            return Err(format!("expected an integer, got {v}"));
        }
        if v < lo as f64 || v > hi as f64 {
            return Err(format!("value {v} out of range [{lo},{hi}]"));
        }
        Ok(v as usize)
    }

    fn fraction(&self) -> std::result::Result<f32, String> {
        let v = self.number()?;
        if !(v > 0.0 && v < 1.0) {
            return Err(format!("value {v} out of range (0,1)"));
        }
        Ok(v as f32)
    }

    fn positive(&self) -> std::result::Result<f64, String> {
        let v = self.number()?;
        if !(v > 0.0) {
            return Err(format!("value {v} must be positive"));
        }
        Ok(v)
    }

    fn boolean(&self) -> std::result::Result<bool, String> {
        match self {
            Value::Bool(b) => Ok(*b),
            other => Err(format!("expected true or false, got a {}", other.kind())),
        }
    }
}

impl Config {
    fn set(&mut self, key: &str, v: &Value) -> std::result::Result<(), String> {
        let (m, e) = (&mut self.model, &mut self.export);
        let (lo, hi) = TOOD_STACK_RANGE;
        match key {
            "backbone.kind" => m.backbone = v.keyword()?,
            "neck.kind" => m.neck = v.keyword()?,
            "head.kind" => m.head = v.keyword()?,
            "head.tood_stack" => m.tood_stack = v.integer(lo, hi)?,
            "head.tood_conv_kind" => m.tood_conv_kind = v.keyword()?,
            "head.tood_final_kind" => m.tood_final_kind = v.keyword()?,
            "model.width" => m.width_mult = v.positive()?,
            "model.depth" => m.depth_mult = v.positive()?,
            "model.num_classes" => m.num_classes = v.integer(1, 1 << 16)?,
            "model.input_h" => m.input_size.0 = v.integer(32, 1 << 14)?,
            "model.input_w" => m.input_size.1 = v.integer(32, 1 << 14)?,
            "export.fuse_reparam" => e.fuse_reparam = v.boolean()?,
            "export.fuse_preprocess" => e.fuse_preprocess = v.boolean()?,
            "export.nms_mode" => e.nms_mode = v.keyword()?,
            "export.score_thresh" => e.score_thresh = v.fraction()?,
            "export.iou_thresh" => e.iou_thresh = v.fraction()?,
            "export.max_detections" => e.max_detections = v.integer(1, 1 << 20)?,
            "export.overlap" => e.overlap = v.boolean()?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`. Whole-config checks run at the end
    /// and are reported against the last line that touched the model (or
    /// export) section.
    pub fn apply(&mut self, text: &str) -> Result<()> {
        let mut last_model_line = 0;
        let mut last_export_line = 0;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = strip_comment(raw).trim();
            if content.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line, msg };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{content}`")))?;
            let key = key.trim();
            let value = Value::parse(value.trim()).map_err(err)?;
            self.set(key, &value).map_err(|msg| err(format!("`{key}`: {msg}")))?;
            if key.starts_with("export.") {
                last_export_line = line;
            } else {
                last_model_line = line;
            }
        }
        self.model.validate().map_err(|e| Error::Parse {
            line: last_model_line,
            msg: e.to_string(),
        })?;
        self.export.validate().map_err(|e| Error::Parse {
            line: last_export_line,
            msg: e.to_string(),
        })
    }

    /// Applies `key=value` overrides; errors report the override's 1-based
    /// position as the line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        let text: Vec<&str> = overrides.iter().map(|s| s.as_ref()).collect();
        if let Some(pos) = text.iter().position(|s| s.contains('\n')) {
            return Err(Error::Parse {
                line: pos + 1,
                msg: "override must be a single line".into(),
            });
        }
        self.apply(&text.join("\n"))
    }
}

fn strip_comment(line: &str) -> &str {
    let mut in_str = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => in_str = !in_str,
            '#' if !in_str => return &line[..i],
            _ => {}
        }
    }
    line
}

/// Parses a complete config file; absent keys keep their defaults.
pub fn parse_config(text: &str) -> Result<(ModelConfig, ExportConfig)> {
    let mut cfg = Config::default();
    cfg.apply(text)?;
    Ok((cfg.model, cfg.export))
}

/// Writes every key; `parse_config(render_config(..))` reproduces the input.
pub fn render_config(model: &ModelConfig, export: &ExportConfig) -> String {
    let m = model;
    let e = export;
    let values: Vec<String> = vec![
        m.backbone.to_string(),
        m.neck.to_string(),
        m.head.to_string(),
        m.tood_stack.to_string(),
        m.tood_conv_kind.to_string(),
        m.tood_final_kind.to_string(),
        format!("{:?}", m.width_mult),
        format!("{:?}", m.depth_mult),
        m.num_classes.to_string(),
        m.input_size.0.to_string(),
        m.input_size.1.to_string(),
        e.fuse_reparam.to_string(),
        e.fuse_preprocess.to_string(),
        e.nms_mode.to_string(),
        format!("{:?}", e.score_thresh),
        format!("{:?}", e.iou_thresh),
        e.max_detections.to_string(),
        e.overlap.to_string(),
    ];
    KEYS.iter()
        .zip(values)
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let (m, e) = parse_config("").unwrap();
        assert_eq!(m.backbone, BackboneKind::CspDarknet);
        assert_eq!(m.neck, NeckKind::Pafpn);
        assert_eq!(m.head, HeadKind::Decoupled);
        assert_eq!((m.width_mult, m.depth_mult), (0.5, 0.33));
        assert_eq!(e, ExportConfig::default());
    }

    #[test]
    fn tood_stack_three() {
        let (m, _) = parse_config("head.kind = tood\nhead.tood_stack = 3 # table point\n").unwrap();
        assert_eq!(m.head, HeadKind::Tood);
        assert_eq!(m.tood_stack, 3);
    }

    #[test]
    fn out_of_range_stack_names_the_range_and_line() {
        let err = parse_config("# header\n\nhead.tood_stack = 9\n").unwrap_err();
        match err {
            Error::Parse { line, msg } => {
                assert_eq!(line, 3);
                assert!(msg.contains("[2,6]"), "{msg}");
            }
            other => panic!("{other}"),
        }
    }

    #[test]
    fn unknown_keys_and_type_mismatches_are_rejected() {
        let e = parse_config("neck.kind = asff\nmodel.colour = 3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
        let e = parse_config("export.fuse_reparam = 1\n").unwrap_err();
        assert!(e.to_string().contains("true or false"), "{e}");
        let e = parse_config("model.num_classes = fish\n").unwrap_err();
        assert!(e.to_string().contains("number"), "{e}");
        let e = parse_config("model.width 0.5\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }));
        let e = parse_config("model.width = 0.3\n").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 1, .. }), "{e}");
    }

    #[test]
    fn quoted_strings_and_comments() {
        let (m, _) = parse_config("neck.kind = \"asff_sim\"  # fused\n").unwrap();
        assert_eq!(m.neck, NeckKind::AsffSim);
    }

    #[test]
    fn render_round_trips() {
        let m = ModelConfig::pai_yolox_s_asff().with_tood(5).with_input(320, 416);
        let e = ExportConfig {
            nms_mode: NmsMode::Batched,
            score_thresh: 0.3,
            fuse_preprocess: true,
            ..ExportConfig::default()
        };
        assert_eq!(parse_config(&render_config(&m, &e)).unwrap(), (m, e));
    }

    #[test]
    fn overrides_use_the_same_keys() {
        let mut c = Config::default();
        c.apply_overrides(&["backbone.kind=repvgg", "export.iou_thresh = 0.5"]).unwrap();
        assert_eq!(c.model.backbone, BackboneKind::RepVgg);
        assert_eq!(c.export.iou_thresh, 0.5);
        let err = c.apply_overrides(&["head.kind=tood", "nope=1"]).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }
}
