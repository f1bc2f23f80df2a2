use num_complex::Complex64;
use std::fmt;

/// One phase of a three-phase system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    A,
    B,
    C,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::A, Phase::B, Phase::C];

    pub fn index(self) -> usize {
        match self {
            Phase::A => 0,
            Phase::B => 1,
            Phase::C => 2,
        }
    }

    pub fn letter(self) -> char {
        match self {
            Phase::A => 'a',
            Phase::B => 'b',
            Phase::C => 'c',
        }
    }

    pub fn from_letter(ch: char) -> Option<Phase> {
        match ch.to_ascii_lowercase() {
            'a' => Some(Phase::A),
            'b' => Some(Phase::B),
            'c' => Some(Phase::C),
            _ => None,
        }
    }

    /// Reference direction of this phase: a at 0°, b at −120°, c at +120°.
    pub fn unit_phasor(self) -> Complex64 {
        let third = 2.0 * std::f64::consts::PI / 3.0;
        match self {
            Phase::A => Complex64::new(1.0, 0.0),
            Phase::B => Complex64::from_polar(1.0, -third),
            Phase::C => Complex64::from_polar(1.0, third),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Subset of {a, b, c} stored as a bitmask. Iteration is always a < b < c.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PhaseSet(u8);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid phase set {0:?}: expected a non-empty combination of 'a', 'b', 'c'")]
pub struct PhaseSetParseError(pub String);

impl PhaseSet {
    pub const ABC: PhaseSet = PhaseSet(0b111);

    pub fn empty() -> PhaseSet {
        PhaseSet(0)
    }

    pub fn single(p: Phase) -> PhaseSet {
        PhaseSet(1 << p.index())
    }

    pub fn from_phases(phases: &[Phase]) -> PhaseSet {
        let mut bits = 0;
        for p in phases {
            bits |= 1 << p.index();
        }
        PhaseSet(bits)
    }

    /// Parses strings like "abc", "ac", "b". Duplicates and unknown letters are rejected.
    pub fn parse(s: &str) -> Result<PhaseSet, PhaseSetParseError> {
        let mut bits = 0u8;
        for ch in s.chars() {
            let p = Phase::from_letter(ch).ok_or_else(|| PhaseSetParseError(s.to_string()))?;
            let bit = 1 << p.index();
            if bits & bit != 0 {
                return Err(PhaseSetParseError(s.to_string()));
            }
            bits |= bit;
        }
        if bits == 0 {
            return Err(PhaseSetParseError(s.to_string()));
        }
        Ok(PhaseSet(bits))
    }

    pub fn contains(self, p: Phase) -> bool {
        self.0 & (1 << p.index()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = Phase> {
        Phase::ALL.into_iter().filter(move |p| self.contains(*p))
    }

    pub fn is_subset_of(self, other: PhaseSet) -> bool {
        self.0 & !other.0 == 0
    }

    /// Rank of `p` within this set's a < b < c ordering.
    pub fn position(self, p: Phase) -> Option<usize> {
        if !self.contains(p) {
            return None;
        }
        Some(self.iter().take_while(|q| *q != p).count())
    }
}

impl fmt::Display for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.iter() {
            write!(f, "{}", p.letter())?;
        }
        Ok(())
    }
}

impl fmt::Debug for PhaseSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhaseSet({})", self)
    }
}
