//! Modality identifiers, one-hot indicators, and modality subsets.

use std::fmt;

use crate::error::{AmsnError, Result};
use crate::tensor::{Element, Tensor};

/// One input modality. The canonical universe ordering is RGB, depth,
/// thermal (indices 0, 1, 2).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Depth,
    Thermal,
}

pub const ALL_MODALITIES: [Modality; 3] = [Modality::Rgb, Modality::Depth, Modality::Thermal];

impl Modality {
    pub fn index(self) -> usize {
        match self {
            Modality::Rgb => 0,
            Modality::Depth => 1,
            Modality::Thermal => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        ALL_MODALITIES.get(i).copied()
    }

    pub fn label(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Depth => "D",
            Modality::Thermal => "T",
        }
    }

    pub fn parse(s: &str) -> Result<Modality> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" | "r" => Ok(Modality::Rgb),
            "d" | "depth" => Ok(Modality::Depth),
            "t" | "thermal" => Ok(Modality::Thermal),
            other => Err(AmsnError::Usage(format!(
                "unknown modality `{other}` (expected rgb, d/depth, or t/thermal)"
            ))),
        }
    }

    /// One-hot indicator of length `k` (the modality-universe size).
    /// Indicators of distinct modalities are orthogonal by construction.
    pub fn indicator<E: Element>(self, k: usize) -> Result<Tensor<E>> {
        if self.index() >= k {
            return Err(AmsnError::Usage(format!(
                "modality {} has index {} outside universe of size {}",
                self.label(),
                self.index(),
                k
            )));
        }
        let mut t = Tensor::zeros(vec![k]);
        t.data_mut()[self.index()] = E::ONE;
        Ok(t)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Nonempty-or-empty subset of the modality universe, as a small bitmask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct ModalitySet(u8);

impl ModalitySet {
    pub const EMPTY: ModalitySet = ModalitySet(0);

    pub fn of(mods: &[Modality]) -> ModalitySet {
        let mut s = ModalitySet(0);
        for &m in mods {
            s = s.with(m);
        }
        s
    }

    pub fn with(self, m: Modality) -> ModalitySet {
        ModalitySet(self.0 | (1 << m.index()))
    }

    pub fn contains(self, m: Modality) -> bool {
        self.0 & (1 << m.index()) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_superset_of(self, other: ModalitySet) -> bool {
        self.0 & other.0 == other.0
    }

    /// Members in canonical RGB, D, T order.
    pub fn iter(self) -> impl Iterator<Item = Modality> {
        ALL_MODALITIES.into_iter().filter(move |m| self.contains(*m))
    }

    /// Canonical label, e.g. "RGB-D-T".
    pub fn label(self) -> String {
        let parts: Vec<&str> = self.iter().map(|m| m.label()).collect();
        parts.join("-")
    }

    /// Parse a comma- or dash-separated list of modality names.
    pub fn parse(s: &str) -> Result<ModalitySet> {
        let mut set = ModalitySet::EMPTY;
        for part in s.split([',', '-']).filter(|p| !p.is_empty()) {
            set = set.with(Modality::parse(part)?);
        }
        Ok(set)
    }

    /// The seven nonempty subsets in the canonical evaluation order.
    pub fn all_settings() -> [ModalitySet; 7] {
        use Modality::*;
        [
            ModalitySet::of(&[Rgb]),
            ModalitySet::of(&[Depth]),
            ModalitySet::of(&[Thermal]),
            ModalitySet::of(&[Rgb, Depth]),
            ModalitySet::of(&[Rgb, Thermal]),
            ModalitySet::of(&[Depth, Thermal]),
            ModalitySet::of(&[Rgb, Depth, Thermal]),
        ]
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
