use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Input channel of a narrative clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "V")]
    Visual,
    #[serde(rename = "A")]
    Acoustic,
    #[serde(rename = "L")]
    Linguistic,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Acoustic, Modality::Linguistic];

    /// Order used inside the memory fusion network (acoustic, linguistic, visual).
    pub const MFN_ORDER: [Modality; 3] = [Modality::Acoustic, Modality::Linguistic, Modality::Visual];

    pub fn letter(self) -> char {
        match self {
            Modality::Visual => 'V',
            Modality::Acoustic => 'A',
            Modality::Linguistic => 'L',
        }
    }

    /// File stem used in the on-disk corpus layout.
    pub fn file_stem(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Acoustic => "acoustic",
            Modality::Linguistic => "linguistic",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Non-empty subset of modalities, always kept in V, A, L order.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ModalitySet(Vec<Modality>);

impl ModalitySet {
    pub fn new(mods: &[Modality]) -> Result<Self, Error> {
        let mut v: Vec<Modality> = Modality::ALL.iter().copied().filter(|m| mods.contains(m)).collect();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("modality set must not be empty".into()));
        }
        Ok(ModalitySet(v))
    }

    pub fn all() -> Self {
        ModalitySet(Modality::ALL.to_vec())
    }

    /// The seven non-empty subsets, in the column order V, A, L, VA, AL, VL, VAL.
    pub fn table_subsets() -> Vec<ModalitySet> {
        use Modality::*;
        [
            &[Visual][..],
            &[Acoustic],
            &[Linguistic],
            &[Visual, Acoustic],
            &[Acoustic, Linguistic],
            &[Visual, Linguistic],
            &[Visual, Acoustic, Linguistic],
        ]
        .iter()
        .map(|s| ModalitySet::new(s).expect("non-empty"))
        .collect()
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.0.contains(&m)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Members in V, A, L order.
    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        self.0.iter().copied()
    }

    /// Members in A, L, V order.
    pub fn mfn_order(&self) -> Vec<Modality> {
        Modality::MFN_ORDER.iter().copied().filter(|m| self.contains(*m)).collect()
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for m in &self.0 {
            write!(f, "{m}")?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let mut mods = Vec::new();
        for c in s.chars() {
            mods.push(match c.to_ascii_uppercase() {
                'V' => Modality::Visual,
                'A' => Modality::Acoustic,
                'L' => Modality::Linguistic,
                _ => return Err(Error::Config(format!("unknown modality '{c}' in \"{s}\""))),
            });
        }
        ModalitySet::new(&mods)
    }
}

impl TryFrom<String> for ModalitySet {
    type Error = Error;

    fn try_from(s: String) -> Result<Self, Error> {
        s.parse()
    }
}

impl From<ModalitySet> for String {
    fn from(m: ModalitySet) -> String {
        m.to_string()
    }
}
