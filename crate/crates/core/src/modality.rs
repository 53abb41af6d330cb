use std::fmt;

/// MR sequences in their fixed order; the index is the encoder slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Flair = 0,
    T1 = 1,
    T1c = 2,
    T2 = 3,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Flair, Modality::T1, Modality::T1c, Modality::T2];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Lower-case file stem, e.g. `t1c`.
    pub fn name(self) -> &'static str {
        match self {
            Modality::Flair => "flair",
            Modality::T1 => "t1",
            Modality::T1c => "t1c",
            Modality::T2 => "t2",
        }
    }

    /// The modality with the most similar contrast: FLAIR and T2 both show
    /// edema, T1 and T1c both show the core.
    pub fn partner(self) -> Self {
        match self {
            Modality::Flair => Modality::T2,
            Modality::T2 => Modality::Flair,
            Modality::T1 => Modality::T1c,
            Modality::T1c => Modality::T1,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Nested tumour regions, in label channel order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Region {
    Complete = 0,
    Core = 1,
    Enhancing = 2,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Complete, Region::Core, Region::Enhancing];

    pub fn name(self) -> &'static str {
        match self {
            Region::Complete => "complete",
            Region::Core => "core",
            Region::Enhancing => "enhancing",
        }
    }
}
