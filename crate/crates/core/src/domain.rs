use serde::{Deserialize, Serialize};

/// MRI contrast. The order of [`Modality::ALL`] is the channel order
/// everywhere: input stacks, branch indices and fusion concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    T1,
    T1Gd,
    T2,
    Flair,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1, Modality::T1Gd, Modality::T2, Modality::Flair];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Lower-case name used in file names and parameter paths.
    pub fn key(self) -> &'static str {
        match self {
            Modality::T1 => "t1",
            Modality::T1Gd => "t1gd",
            Modality::T2 => "t2",
            Modality::Flair => "flair",
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::T1 => "T1",
            Modality::T1Gd => "T1Gd",
            Modality::T2 => "T2",
            Modality::Flair => "FLAIR",
        })
    }
}

/// Evaluation region, also the identity of each decoder task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Region {
    /// Whole tumour: labels 1, 2, 4.
    Wt,
    /// Tumour core: labels 1, 4.
    Tc,
    /// Enhancing tumour: label 4.
    Et,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Wt, Region::Tc, Region::Et];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Region::Wt => "wt",
            Region::Tc => "tc",
            Region::Et => "et",
        }
    }

    /// Whether a voxel with label `label` belongs to this region.
    pub fn contains(self, label: u8) -> bool {
        match self {
            Region::Wt => matches!(label, 1 | 2 | 4),
            Region::Tc => matches!(label, 1 | 4),
            Region::Et => label == 4,
        }
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Wt => "WT",
            Region::Tc => "TC",
            Region::Et => "ET",
        })
    }
}

/// Legal label values: background, necrotic/non-enhancing core, edema, enhancing tumour.
pub const LABELS: [u8; 4] = [0, 1, 2, 4];
