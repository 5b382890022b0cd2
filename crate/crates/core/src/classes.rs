//! Label sets and per-pixel label masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plant mask classes, in label order.
pub const PLANT_CLASSES: [&str; 4] = ["soil", "crop", "dicot", "grass"];
/// Stem mask classes, in label order.
pub const STEM_CLASSES: [&str; 3] = ["soil", "crop_stem", "dicot_stem"];

pub const SOIL: u8 = 0;
pub const CROP: u8 = 1;
pub const DICOT: u8 = 2;
pub const GRASS: u8 = 3;

/// Class of a localizable stem. Grasses have none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StemClass {
    Crop,
    Dicot,
}

impl StemClass {
    pub const ALL: [StemClass; 2] = [StemClass::Crop, StemClass::Dicot];

    /// Label of this class in a stem mask.
    pub fn stem_label(self) -> u8 {
        match self {
            StemClass::Crop => 1,
            StemClass::Dicot => 2,
        }
    }

    /// Label of the plant this stem belongs to in a plant mask.
    pub fn plant_label(self) -> u8 {
        match self {
            StemClass::Crop => CROP,
            StemClass::Dicot => DICOT,
        }
    }

    pub fn from_stem_label(label: u8) -> Option<Self> {
        match label {
            1 => Some(StemClass::Crop),
            2 => Some(StemClass::Dicot),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StemClass::Crop => "crop",
            StemClass::Dicot => "dicot",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "crop" => Some(StemClass::Crop),
            "dicot" => Some(StemClass::Dicot),
            _ => None,
        }
    }
}

impl std::fmt::Display for StemClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Row-major single-channel mask of class labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "label mask",
                format!("{width}x{height} mask given {} labels", data.len()),
            ));
        }
        Ok(LabelMask {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, label: u8) -> Self {
        LabelMask {
            width,
            height,
            data: vec![label; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        self.data[y * self.width + x] = label;
    }

    pub fn count(&self, label: u8) -> usize {
        self.data.iter().filter(|&&v| v == label).count()
    }

    /// First label not below `classes`, if any.
    pub fn check_range(&self, classes: usize) -> Option<u8> {
        self.data.iter().copied().find(|&v| v as usize >= classes)
    }
}
