//! The 34 instrument classes and the General-MIDI program mapping.

pub const CLASS_COUNT: usize = 34;

/// Class name and the program written when a track of that class is exported.
pub const CLASSES: [(&str, u8); CLASS_COUNT] = [
    ("Acoustic Piano", 0),
    ("Electric Piano", 4),
    ("Chromatic Percussion", 8),
    ("Organ", 16),
    ("Acoustic Guitar", 24),
    ("Clean Electric Guitar", 26),
    ("Distorted Electric Guitar", 29),
    ("Acoustic Bass", 32),
    ("Electric Bass", 33),
    ("Violin", 40),
    ("Viola", 41),
    ("Cello", 42),
    ("Contrabass", 43),
    ("Orchestral Harp", 46),
    ("Timpani", 47),
    ("String Ensemble", 48),
    ("Synth Strings", 50),
    ("Choir and Voice", 52),
    ("Orchestral Hit", 55),
    ("Trumpet", 56),
    ("Trombone", 57),
    ("Tuba", 58),
    ("French Horn", 60),
    ("Brass Section", 61),
    ("Soprano/Alto Sax", 64),
    ("Tenor Sax", 66),
    ("Baritone Sax", 67),
    ("Oboe", 68),
    ("English Horn", 69),
    ("Bassoon", 70),
    ("Clarinet", 71),
    ("Pipe", 72),
    ("Synth Lead", 80),
    ("Synth Pad", 88),
];

pub const PIANO: u8 = 0;
/// Fallback class for programs outside the melodic families (effects, ethnic, percussive).
pub const SYNTH: u8 = 33;

/// Maps a General-MIDI program (0-127) to its instrument class.
pub fn program_class(program: u8) -> u8 {
    match program {
        0..=3 => 0,
        4..=7 => 1,
        8..=15 => 2,
        16..=23 => 3,
        24..=25 => 4,
        26..=28 => 5,
        29..=31 => 6,
        32 => 7,
        33..=39 => 8,
        40 => 9,
        41 => 10,
        42 => 11,
        43 => 12,
        44..=45 => 15,
        46 => 13,
        47 => 14,
        48..=49 => 15,
        50..=51 => 16,
        52..=54 => 17,
        55 => 18,
        56 | 59 => 19,
        57 => 20,
        58 => 21,
        60 => 22,
        61..=63 => 23,
        64..=65 => 24,
        66 => 25,
        67 => 26,
        68 => 27,
        69 => 28,
        70 => 29,
        71 => 30,
        72..=79 => 31,
        80..=87 => 32,
        _ => SYNTH,
    }
}

pub fn class_program(class: u8) -> u8 {
    CLASSES
        .get(usize::from(class))
        .map(|&(_, p)| p)
        .unwrap_or(CLASSES[usize::from(SYNTH)].1)
}

pub fn class_name(class: u8) -> &'static str {
    CLASSES.get(usize::from(class)).map(|&(n, _)| n).unwrap_or("Unknown")
}
