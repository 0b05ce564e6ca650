use alloc::format;
use alloc::string::String;
use core::fmt;
use core::str::FromStr;

use crate::error::{Error, Result};

/// Input modality of a per-modality classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Rgb,
    Flow,
    Boxes,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Rgb, Modality::Flow, Modality::Boxes];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "rgb",
            Modality::Flow => "flow",
            Modality::Boxes => "boxes",
        }
    }

    /// Channels of the frame-model input, `None` for the box model.
    pub fn channels(self) -> Option<usize> {
        match self {
            Modality::Rgb => Some(3),
            Modality::Flow => Some(2),
            Modality::Boxes => None,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rgb" => Ok(Modality::Rgb),
            "flow" => Ok(Modality::Flow),
            "boxes" => Ok(Modality::Boxes),
            other => Err(Error::config(format!("unknown modality `{other}`"))),
        }
    }
}

/// Shape of one classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    pub mlp_ratio: usize,
    pub patch_size: usize,
    pub n_frames: usize,
    pub n_classes: usize,
    /// 3 for RGB frames and rendered canvases, 2 for flow. Ignored by the
    /// box model.
    pub in_channels: usize,
    /// Side of the (cropped) square frame the model sees.
    pub input_side: usize,
    /// Box tokens per frame, padding included.
    pub max_boxes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            d_model: 32,
            n_heads: 2,
            n_blocks: 2,
            mlp_ratio: 2,
            patch_size: 7,
            n_frames: 8,
            n_classes: 12,
            in_channels: 3,
            input_side: 28,
            max_boxes: 4,
        }
    }
}

const KEYS: [&str; 10] = [
    "d_model",
    "n_heads",
    "n_blocks",
    "mlp_ratio",
    "patch_size",
    "n_frames",
    "n_classes",
    "in_channels",
    "input_side",
    "max_boxes",
];

impl ArchConfig {
    pub fn for_modality(mut self, m: Modality) -> Self {
        if let Some(c) = m.channels() {
            self.in_channels = c;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fields = self.fields();
        if let Some((k, _)) = KEYS.iter().zip(fields).find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.input_side % self.patch_size != 0 {
            return Err(Error::config(format!(
                "input side {} not divisible by patch_size {}",
                self.input_side, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn patches_per_frame(&self) -> usize {
        let s = self.input_side / self.patch_size;
        s * s
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    fn fields(&self) -> [usize; 10] {
        [
            self.d_model,
            self.n_heads,
            self.n_blocks,
            self.mlp_ratio,
            self.patch_size,
            self.n_frames,
            self.n_classes,
            self.in_channels,
            self.input_side,
            self.max_boxes,
        ]
    }

    /// `key=value` lines, one per field, in a fixed order.
    pub fn to_descriptor(&self, modality: Modality) -> String {
        let mut s = format!("modality={modality}\n");
        for (k, v) in KEYS.iter().zip(self.fields()) {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }

    /// Inverse of [`ArchConfig::to_descriptor`]. Every key must be present
    /// exactly once; blank lines and `#` comments are ignored.
    pub fn parse_descriptor(text: &str) -> Result<(ArchConfig, Modality)> {
        let mut modality = None;
        let mut vals: [Option<usize>; 10] = [None; 10];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("bad descriptor line `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "modality" {
                if modality.replace(v.parse::<Modality>()?).is_some() {
                    return Err(Error::config("duplicate key modality"));
                }
                continue;
            }
            let i = KEYS
                .iter()
                .position(|&key| key == k)
                .ok_or_else(|| Error::config(format!("unknown descriptor key `{k}`")))?;
            let n = v
                .parse::<usize>()
                .map_err(|_| Error::config(format!("`{k}` is not an integer: `{v}`")))?;
            if vals[i].replace(n).is_some() {
                return Err(Error::config(format!("duplicate key {k}")));
            }
        }
        let mut it = vals.iter().zip(KEYS).map(|(v, k)| v.ok_or_else(|| Error::config(format!("missing key {k}"))));
        let mut next = || it.next().unwrap();
        let arch = ArchConfig {
            d_model: next()?,
            n_heads: next()?,
            n_blocks: next()?,
            mlp_ratio: next()?,
            patch_size: next()?,
            n_frames: next()?,
            n_classes: next()?,
            in_channels: next()?,
            input_side: next()?,
            max_boxes: next()?,
        };
        let modality = modality.ok_or_else(|| Error::config("missing key modality"))?;
        arch.validate()?;
        Ok((arch, modality))
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: alloc::vec::Vec<String> = KEYS
            .iter()
            .zip(self.fields())
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        f.write_str(&parts.join(" "))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_round_trip() {
        let a = ArchConfig::default().for_modality(Modality::Flow);
        let text = a.to_descriptor(Modality::Flow);
        assert_eq!(ArchConfig::parse_descriptor(&text).unwrap(), (a, Modality::Flow));
    }

    #[test]
    fn descriptor_rejects_missing_and_unknown_keys() {
        let text = ArchConfig::default().to_descriptor(Modality::Rgb);
        let missing: String = text.lines().filter(|l| !l.starts_with("n_heads")).map(|l| format!("{l}\n")).collect();
        assert!(ArchConfig::parse_descriptor(&missing).is_err());
        let extra = format!("{text}bogus=1\n");
        assert!(ArchConfig::parse_descriptor(&extra).is_err());
    }

    #[test]
    fn validation() {
        let mut a = ArchConfig::default();
        assert!(a.validate().is_ok());
        a.n_heads = 3;
        assert!(a.validate().is_err());
        let mut b = ArchConfig::default();
        b.patch_size = 8;
        assert!(b.validate().is_err());
    }
}
