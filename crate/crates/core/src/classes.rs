use std::fmt;

use serde::{Deserialize, Serialize};

/// Lesion classes; the classifier adds a background class after them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LesionClass {
    Cyst,
    Hemangioma,
    Hcc,
}

pub const NUM_CLASSES: usize = 4;
pub const BACKGROUND: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["cyst", "hemangioma", "hcc", "background"];

impl LesionClass {
    pub const ALL: [LesionClass; 3] = [LesionClass::Cyst, LesionClass::Hemangioma, LesionClass::Hcc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        CLASS_NAMES[self.index()]
    }

    /// Column title used in accuracy tables.
    pub fn title(self) -> &'static str {
        match self {
            LesionClass::Cyst => "Cyst",
            LesionClass::Hemangioma => "Hemangioma",
            LesionClass::Hcc => "HCC",
        }
    }
}

impl fmt::Display for LesionClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}
