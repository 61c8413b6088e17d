//! Model and training hyperparameters plus the `key=value` text format they
//! are stored in (config files and checkpoint manifests).

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// How a fusion block combines the local and global branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionMode {
    /// Channel and spatial weights multiplied per branch (the full model).
    Hybrid,
    /// Channel fusion first; spatial weights are computed on its weighted branches.
    Sequential,
    /// Channel-fused and spatially-fused features computed independently and added.
    Parallel,
    SpatialOnly,
    ChannelOnly,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Hybrid,
        FusionMode::Sequential,
        FusionMode::Parallel,
        FusionMode::SpatialOnly,
        FusionMode::ChannelOnly,
    ];

    pub fn uses_spatial(self) -> bool {
        self != FusionMode::ChannelOnly
    }

    pub fn uses_channel(self) -> bool {
        self != FusionMode::SpatialOnly
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::Hybrid => "hybrid",
            FusionMode::Sequential => "sequential",
            FusionMode::Parallel => "parallel",
            FusionMode::SpatialOnly => "spatial_only",
            FusionMode::ChannelOnly => "channel_only",
        }
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion mode `{}`", s)))
    }
}

/// Architecture hyperparameters. Every parameter shape is a function of this.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub in_channels: usize,
    pub num_hfb: usize,
    pub rb_per_hfb: usize,
    pub lfem_depth: usize,
    pub n_swin: usize,
    pub heads: usize,
    pub window_side: usize,
    pub mlp_ratio: usize,
    pub shifted_windows: bool,
    pub cafm_reduction: usize,
    pub fusion_mode: FusionMode,
    pub rescale_spatial: bool,
    pub tile_size: usize,
    pub tile_overlap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            in_channels: 4,
            num_hfb: 4,
            rb_per_hfb: 2,
            lfem_depth: 3,
            n_swin: 2,
            heads: 4,
            window_side: 4,
            mlp_ratio: 4,
            shifted_windows: true,
            cafm_reduction: 4,
            fusion_mode: FusionMode::Hybrid,
            rescale_spatial: false,
            tile_size: 128,
            tile_overlap: 16,
        }
    }
}

/// Patch-embedding stride of the global branch.
pub const PATCH: usize = 4;

impl ModelConfig {
    /// Small configuration for desk-scale training and tests.
    pub fn desk() -> Self {
        Self {
            channels: 16,
            num_hfb: 1,
            heads: 2,
            ..Self::default()
        }
    }

    /// Spatial dimensions of every network input must be multiples of this.
    pub fn alignment(&self) -> usize {
        PATCH * self.window_side
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.in_channels != 4 {
            return fail(format!("in_channels must be 4 (Y, U, V, QP), got {}", self.in_channels));
        }
        if self.channels == 0 || !self.channels.is_multiple_of(2) {
            return fail(format!("channels must be positive and even, got {}", self.channels));
        }
        if self.heads == 0 || !self.channels.is_multiple_of(self.heads) {
            return fail(format!(
                "channels {} not divisible by heads {}",
                self.channels, self.heads
            ));
        }
        if self.cafm_reduction == 0 || !self.channels.is_multiple_of(self.cafm_reduction) {
            return fail(format!(
                "channels {} not divisible by cafm_reduction {}",
                self.channels, self.cafm_reduction
            ));
        }
        if self.lfem_depth == 0 || self.window_side == 0 || self.mlp_ratio == 0 {
            return fail("lfem_depth, window_side and mlp_ratio must be positive".into());
        }
        if self.tile_size == 0 || !self.tile_size.is_multiple_of(self.alignment()) {
            return fail(format!(
                "tile_size {} not a positive multiple of {}",
                self.tile_size,
                self.alignment()
            ));
        }
        if self.tile_overlap >= self.tile_size {
            return fail(format!(
                "tile_overlap {} must be smaller than tile_size {}",
                self.tile_overlap, self.tile_size
            ));
        }
        Ok(())
    }

    pub const KEYS: &'static [&'static str] = &[
        "channels",
        "in_channels",
        "num_hfb",
        "rb_per_hfb",
        "lfem_depth",
        "n_swin",
        "heads",
        "window_side",
        "mlp_ratio",
        "shifted_windows",
        "cafm_reduction",
        "fusion_mode",
        "rescale_spatial",
        "tile_size",
        "tile_overlap",
    ];

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("channels", self.channels.to_string()),
            ("in_channels", self.in_channels.to_string()),
            ("num_hfb", self.num_hfb.to_string()),
            ("rb_per_hfb", self.rb_per_hfb.to_string()),
            ("lfem_depth", self.lfem_depth.to_string()),
            ("n_swin", self.n_swin.to_string()),
            ("heads", self.heads.to_string()),
            ("window_side", self.window_side.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("shifted_windows", self.shifted_windows.to_string()),
            ("cafm_reduction", self.cafm_reduction.to_string()),
            ("fusion_mode", self.fusion_mode.to_string()),
            ("rescale_spatial", self.rescale_spatial.to_string()),
            ("tile_size", self.tile_size.to_string()),
            ("tile_overlap", self.tile_overlap.to_string()),
        ]
    }

    /// Apply one `key=value` pair; returns `Ok(false)` if the key is not a
    /// model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "channels" => self.channels = parse(key, value)?,
            "in_channels" => self.in_channels = parse(key, value)?,
            "num_hfb" => self.num_hfb = parse(key, value)?,
            "rb_per_hfb" => self.rb_per_hfb = parse(key, value)?,
            "lfem_depth" => self.lfem_depth = parse(key, value)?,
            "n_swin" => self.n_swin = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "window_side" => self.window_side = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "shifted_windows" => self.shifted_windows = parse(key, value)?,
            "cafm_reduction" => self.cafm_reduction = parse(key, value)?,
            "fusion_mode" => self.fusion_mode = value.parse()?,
            "rescale_spatial" => self.rescale_spatial = parse(key, value)?,
            "tile_size" => self.tile_size = parse(key, value)?,
            "tile_overlap" => self.tile_overlap = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{}` for `{}`", value, key)))
}

/// Parse `key=value` lines. Blank lines and `#` comments are skipped;
/// duplicate keys are errors. Returns pairs with their 1-based line numbers.
pub fn parse_key_values(text: &str) -> Result<IndexMap<String, (String, usize)>> {
    let mut out = IndexMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got `{}`", i + 1, line)))?;
        let k = k.trim().to_string();
        if out.contains_key(&k) {
            return Err(Error::Config(format!("line {}: duplicate key `{}`", i + 1, k)));
        }
        out.insert(k, (v.trim().to_string(), i + 1));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::desk().validate().unwrap();
    }

    #[test]
    fn pairs_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.fusion_mode = FusionMode::Parallel;
        cfg.rescale_spatial = true;
        let mut back = ModelConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap());
        }
        assert_eq!(back, cfg);
        assert_eq!(cfg.to_pairs().len(), ModelConfig::KEYS.len());
    }

    #[test]
    fn rejects_bad_values() {
        let mut cfg = ModelConfig::default();
        assert!(cfg.set("channels", "abc").is_err());
        assert!(cfg.set("fusion_mode", "serial").is_err());
        assert!(!cfg.set("bogus", "1").unwrap());
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn key_value_parsing() {
        let kv = parse_key_values("# c\n a = 1\n\nb=two\n").unwrap();
        assert_eq!(kv["a"], ("1".to_string(), 2));
        assert_eq!(kv["b"].0, "two");
        assert!(parse_key_values("a=1\na=2").is_err());
        assert!(parse_key_values("novalue").is_err());
    }
}
