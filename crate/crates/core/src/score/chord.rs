use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Result};

/// The eight chord qualities, in index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quality {
    Major,
    Minor,
    Diminished,
    Augmented,
    Dominant7,
    Major7,
    Minor7,
    HalfDiminished7,
}

impl Quality {
    pub const ALL: [Quality; 8] = [
        Quality::Major,
        Quality::Minor,
        Quality::Diminished,
        Quality::Augmented,
        Quality::Dominant7,
        Quality::Major7,
        Quality::Minor7,
        Quality::HalfDiminished7,
    ];

    pub fn ordinal(self) -> u8 {
        self as u8
    }

    pub fn from_ordinal(ordinal: u8) -> Option<Quality> {
        Quality::ALL.get(usize::from(ordinal)).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Major => "M",
            Quality::Minor => "m",
            Quality::Diminished => "dim",
            Quality::Augmented => "aug",
            Quality::Dominant7 => "7",
            Quality::Major7 => "M7",
            Quality::Minor7 => "m7",
            Quality::HalfDiminished7 => "m7-5",
        }
    }

    pub fn from_name(name: &str) -> Option<Quality> {
        Quality::ALL.iter().copied().find(|q| q.name() == name)
    }

    /// Intervals above the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Major => &[0, 4, 7],
            Quality::Minor => &[0, 3, 7],
            Quality::Diminished => &[0, 3, 6],
            Quality::Augmented => &[0, 4, 8],
            Quality::Dominant7 => &[0, 4, 7, 10],
            Quality::Major7 => &[0, 4, 7, 11],
            Quality::Minor7 => &[0, 3, 7, 10],
            Quality::HalfDiminished7 => &[0, 3, 6, 10],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChordSymbol {
    pub root: u8,
    pub quality: Quality,
}

pub const CHORD_VOCABULARY: usize = 96;

impl ChordSymbol {
    pub fn new(root: u8, quality: Quality) -> Self {
        debug_assert!(root < 12);
        ChordSymbol {
            root: root % 12,
            quality,
        }
    }

    pub fn index(self) -> usize {
        usize::from(self.root) * 8 + usize::from(self.quality.ordinal())
    }

    pub fn from_index(index: usize) -> Option<ChordSymbol> {
        (index < CHORD_VOCABULARY).then(|| {
            ChordSymbol::new((index / 8) as u8, Quality::ALL[index % 8])
        })
    }

    /// Chord-tone pitch classes as a 12-bit mask (bit `c` set for pitch class `c`).
    pub fn tone_mask(self) -> u16 {
        self.quality
            .intervals()
            .iter()
            .fold(0u16, |m, &i| m | 1 << ((self.root + i) % 12))
    }

    pub fn contains_pc(self, pc: u8) -> bool {
        self.tone_mask() & (1 << (pc % 12)) != 0
    }

    pub fn tones(self) -> Vec<u8> {
        (0..12).filter(|&pc| self.contains_pc(pc)).collect()
    }

    pub fn transposed(self, semitones: i32) -> ChordSymbol {
        ChordSymbol::new((self.root as i32 + semitones).rem_euclid(12) as u8, self.quality)
    }

    /// Parses `C:M`, `F#:m7`, `Bb:dim`.
    pub fn parse(text: &str) -> Result<ChordSymbol> {
        let (root, quality) = text
            .split_once(':')
            .ok_or_else(|| Error::invalid(format!("chord {text:?}: expected ROOT:QUALITY")))?;
        let root = pitch_class_from_name(root)
            .ok_or_else(|| Error::invalid(format!("chord {text:?}: unknown root")))?;
        let quality = Quality::from_name(quality)
            .ok_or_else(|| Error::invalid(format!("chord {text:?}: unknown quality")))?;
        Ok(ChordSymbol::new(root, quality))
    }
}

const NOTE_NAMES: [&str; 12] = ["C", "C#", "D", "Eb", "E", "F", "F#", "G", "Ab", "A", "Bb", "B"];

fn pitch_class_from_name(name: &str) -> Option<u8> {
    let mut chars = name.chars();
    let base = match chars.next()? {
        'C' => 0,
        'D' => 2,
        'E' => 4,
        'F' => 5,
        'G' => 7,
        'A' => 9,
        'B' => 11,
        _ => return None,
    };
    let offset: i32 = chars
        .map(|c| match c {
            '#' => Some(1),
            'b' => Some(-1),
            _ => None,
        })
        .sum::<Option<i32>>()?;
    Some((base + offset).rem_euclid(12) as u8)
}

impl fmt::Display for ChordSymbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", NOTE_NAMES[usize::from(self.root)], self.quality.name())
    }
}

#[derive(Serialize, Deserialize)]
struct RawChord {
    root: u8,
    quality: String,
    #[serde(default)]
    index: Option<usize>,
}

impl Serialize for ChordSymbol {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RawChord {
            root: self.root,
            quality: self.quality.name().to_string(),
            index: Some(self.index()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for ChordSymbol {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let raw = RawChord::deserialize(d)?;
        if raw.root >= 12 {
            return Err(D::Error::custom(format!("chord root {} >= 12", raw.root)));
        }
        let quality = Quality::from_name(&raw.quality)
            .ok_or_else(|| D::Error::custom(format!("unknown chord quality {:?}", raw.quality)))?;
        let chord = ChordSymbol::new(raw.root, quality);
        if let Some(index) = raw.index {
            if index != chord.index() {
                return Err(D::Error::custom(format!(
                    "chord index {index} disagrees with {chord} (index {})",
                    chord.index()
                )));
            }
        }
        Ok(chord)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_bijection_over_vocabulary() {
        for i in 0..CHORD_VOCABULARY {
            let c = ChordSymbol::from_index(i).unwrap();
            assert_eq!(c.index(), i);
            assert_eq!(ChordSymbol::parse(&c.to_string()).unwrap(), c);
        }
        assert!(ChordSymbol::from_index(96).is_none());
    }

    #[test]
    fn tone_sets() {
        let am = ChordSymbol::new(9, Quality::Minor);
        assert_eq!(am.tones(), vec![0, 4, 9]);
        let b7 = ChordSymbol::new(11, Quality::HalfDiminished7);
        assert_eq!(b7.tones(), vec![2, 5, 9, 11]);
    }

    #[test]
    fn serde_carries_index() {
        let c = ChordSymbol::parse("F#:m7").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(text, r#"{"root":6,"quality":"m7","index":54}"#);
        assert_eq!(serde_json::from_str::<ChordSymbol>(&text).unwrap(), c);
        assert!(serde_json::from_str::<ChordSymbol>(r#"{"root":6,"quality":"m7","index":3}"#).is_err());
        assert!(serde_json::from_str::<ChordSymbol>(r#"{"root":0,"quality":"sus4"}"#).is_err());
    }
}
