//! Standard MIDI file (type 0/1) reading and writing.
//!
//! Reading snaps every note to the quarter-beat grid (ties round to the earlier
//! step), drops channel-10 percussion and rejects meters other than 2/4 and 4/4.
//! Writing produces a type-1 file at 480 ticks per quarter note with one
//! conductor track followed by one chunk per [`Track`].

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use super::{instrument, Meter, NoteEvent, Piece, Track, STEPS_PER_BEAT};
use crate::{Error, Result};

const DRUM_CHANNEL: u8 = 9;
const WRITE_TPQ: u32 = 480;
const WRITE_VELOCITY: u8 = 80;

pub fn read_midi(path: impl AsRef<Path>, quantize: bool) -> Result<Piece> {
    let bytes = std::fs::read(path)?;
    parse_midi(&bytes, quantize)
}

pub fn write_midi(piece: &Piece, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_midi(piece)?)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::MidiParse {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err(format!("unexpected end of data (need {n} bytes)")));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn peek(&self) -> Result<u8> {
        self.data
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err("unexpected end of data"))
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value: u32 = 0;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::MidiParse {
            offset: start,
            message: "variable-length quantity longer than 4 bytes".into(),
        })
    }
}

struct RawNote {
    chunk: usize,
    channel: u8,
    pitch: u8,
    start: u64,
    end: u64,
}

#[derive(Default)]
struct ChunkScan {
    notes: Vec<RawNote>,
    programs: Vec<(usize, u8, u8)>,
    time_sigs: Vec<(u64, u8, u32)>,
    end_tick: u64,
}

fn scan_chunk(cur: &mut Cursor<'_>, chunk: usize, end: usize, out: &mut ChunkScan) -> Result<()> {
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let mut open: HashMap<(u8, u8), VecDeque<u64>> = HashMap::new();
    while cur.pos < end {
        tick += u64::from(cur.vlq()?);
        let status_pos = cur.pos;
        let status = if cur.peek()? & 0x80 != 0 {
            cur.u8()?
        } else {
            running.ok_or_else(|| cur.err("data byte without running status"))?
        };
        match status {
            0x80..=0xef => {
                running = Some(status);
                let channel = status & 0x0f;
                let kind = status & 0xf0;
                let d1 = cur.u8()?;
                if d1 & 0x80 != 0 {
                    return Err(cur.err("channel data byte has the high bit set"));
                }
                let d2 = if matches!(kind, 0xc0 | 0xd0) { 0 } else { cur.u8()? };
                match kind {
                    0x90 if d2 > 0 => open.entry((channel, d1)).or_default().push_back(tick),
                    0x80 | 0x90 => {
                        if let Some(start) = open.get_mut(&(channel, d1)).and_then(|q| q.pop_front()) {
                            out.notes.push(RawNote {
                                chunk,
                                channel,
                                pitch: d1,
                                start,
                                end: tick,
                            });
                        }
                    }
                    0xc0 => out.programs.push((chunk, channel, d1)),
                    _ => {}
                }
            }
            0xff => {
                running = None;
                let kind = cur.u8()?;
                let len = cur.vlq()? as usize;
                let data = cur.take(len)?;
                match kind {
                    0x2f => break,
                    0x58 => {
                        if len < 2 {
                            return Err(cur.err("time signature meta event too short"));
                        }
                        let den = 1u32
                            .checked_shl(u32::from(data[1]))
                            .ok_or_else(|| cur.err("time signature denominator overflow"))?;
                        out.time_sigs.push((tick, data[0], den));
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = cur.vlq()? as usize;
                cur.take(len)?;
            }
            other => {
                return Err(Error::MidiParse {
                    offset: status_pos,
                    message: format!("unexpected status byte 0x{other:02x}"),
                })
            }
        }
    }
    // Notes never switched off end with the track.
    for ((channel, pitch), starts) in open {
        for start in starts {
            out.notes.push(RawNote {
                chunk,
                channel,
                pitch,
                start,
                end: tick,
            });
        }
    }
    out.end_tick = out.end_tick.max(tick);
    Ok(())
}

/// Tick to grid step, rounding to nearest with ties to the earlier step.
fn tick_to_step(tick: u64, tpq: u64, strict: bool) -> Result<u64> {
    let num = tick * STEPS_PER_BEAT as u64;
    let q = num / tpq;
    let r = num % tpq;
    if strict && r != 0 {
        return Err(Error::invalid(format!(
            "event at tick {tick} is off the quarter-beat grid"
        )));
    }
    Ok(if 2 * r > tpq { q + 1 } else { q })
}

pub fn parse_midi(bytes: &[u8], quantize: bool) -> Result<Piece> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != b"MThd" {
        return Err(Error::MidiParse {
            offset: 0,
            message: "missing MThd header".into(),
        });
    }
    let header_len = cur.u32()? as usize;
    if header_len < 6 {
        return Err(cur.err("header chunk shorter than 6 bytes"));
    }
    let header_start = cur.pos;
    let format = cur.u16()?;
    let ntracks = cur.u16()?;
    let division = cur.u16()?;
    if format > 1 {
        return Err(Error::MidiParse {
            offset: header_start,
            message: format!("MIDI format {format} is not supported (only 0 and 1)"),
        });
    }
    if division & 0x8000 != 0 || division == 0 {
        return Err(Error::MidiParse {
            offset: header_start + 4,
            message: "SMPTE or zero time division is not supported".into(),
        });
    }
    if header_start + header_len > bytes.len() {
        return Err(cur.err("header chunk length exceeds file size"));
    }
    cur.pos = header_start + header_len;
    let tpq = u64::from(division);

    let mut scan = ChunkScan::default();
    let mut chunk = 0usize;
    while cur.remaining() > 0 && chunk < usize::from(ntracks) {
        let kind = cur.take(4)?;
        let len = cur.u32()? as usize;
        if cur.remaining() < len {
            return Err(cur.err(format!("chunk length {len} exceeds file size")));
        }
        let end = cur.pos + len;
        if kind == b"MTrk" {
            scan_chunk(&mut cur, chunk, end, &mut scan)?;
            chunk += 1;
        }
        cur.pos = end;
    }

    let meter = resolve_meter(&scan.time_sigs)?;
    let spb = meter.steps_per_bar() as u64;

    let program_for = |chunk: usize, channel: u8| -> u8 {
        scan.programs
            .iter()
            .find(|&&(c, ch, _)| c == chunk && ch == channel)
            .or_else(|| scan.programs.iter().find(|&&(_, ch, _)| ch == channel))
            .map(|&(_, _, p)| p)
            .unwrap_or(0)
    };

    let mut groups: BTreeMap<(usize, u8), Vec<NoteEvent>> = BTreeMap::new();
    let mut max_end = 0u64;
    for n in scan.notes.iter().filter(|n| n.channel != DRUM_CHANNEL) {
        let onset = tick_to_step(n.start, tpq, !quantize)?;
        let end = tick_to_step(n.end, tpq, !quantize)?;
        let duration = end.saturating_sub(onset).max(1);
        max_end = max_end.max(onset + duration);
        groups.entry((n.chunk, n.channel)).or_default().push(NoteEvent::new(
            onset as u32,
            duration as u32,
            n.pitch,
        ));
    }
    // A program change without notes still declares a part, so empty tracks survive a round trip.
    for &(chunk, channel, _) in scan.programs.iter().filter(|p| p.1 != DRUM_CHANNEL) {
        groups.entry((chunk, channel)).or_default();
    }
    let tracks = groups
        .into_iter()
        .map(|((chunk, channel), notes)| Track::from_program(program_for(chunk, channel)).with_notes(notes))
        .collect();

    let end_step = tick_to_step(scan.end_tick, tpq, false)?;
    let bar_count = (max_end.div_ceil(spb)).max(end_step / spb).max(1) as usize;
    let piece = Piece {
        meter,
        bar_count,
        tracks,
        phrases: None,
    };
    piece.validate()?;
    Ok(piece)
}

fn resolve_meter(sigs: &[(u64, u8, u32)]) -> Result<Meter> {
    let mut meter: Option<Meter> = None;
    for &(_, num, den) in sigs {
        let m = match (num, den) {
            (2, 4) => Meter::TwoFour,
            (4, 4) => Meter::FourFour,
            _ => return Err(Error::UnsupportedMeter(format!("{num}/{den}"))),
        };
        match meter {
            Some(prev) if prev != m => {
                return Err(Error::UnsupportedMeter(format!("mixed {prev} and {m}")))
            }
            _ => meter = Some(m),
        }
    }
    Ok(meter.unwrap_or(Meter::FourFour))
}

fn push_vlq(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (value & 0x7f) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = (value & 0x7f) as u8 | 0x80;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

fn push_chunk(out: &mut Vec<u8>, events: &[(u32, Vec<u8>)]) {
    let mut body = Vec::new();
    let mut last = 0u32;
    for (tick, bytes) in events {
        push_vlq(&mut body, tick - last);
        body.extend_from_slice(bytes);
        last = *tick;
    }
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
}

/// MIDI channels used for output tracks, skipping percussion.
fn output_channel(track_index: usize) -> u8 {
    let melodic: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];
    melodic[track_index % melodic.len()]
}

pub fn encode_midi(piece: &Piece) -> Result<Vec<u8>> {
    piece.validate()?;
    let ticks_per_step = WRITE_TPQ / STEPS_PER_BEAT as u32;
    let total = piece.total_steps() as u32 * ticks_per_step;

    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(piece.tracks.len() as u16 + 1).to_be_bytes());
    out.extend_from_slice(&(WRITE_TPQ as u16).to_be_bytes());

    let conductor = vec![
        (0, vec![0xff, 0x51, 0x03, 0x07, 0xa1, 0x20]),
        (0, vec![0xff, 0x58, 0x04, piece.meter.beats_per_bar() as u8, 2, 24, 8]),
        (total, vec![0xff, 0x2f, 0x00]),
    ];
    push_chunk(&mut out, &conductor);

    for (i, track) in piece.tracks.iter().enumerate() {
        let ch = output_channel(i);
        let program = if track.program <= 127 {
            track.program
        } else {
            instrument::class_program(track.instrument)
        };
        // (tick, off-before-on, pitch) gives FIFO-consistent note pairing on reload.
        let mut timed: Vec<(u32, u8, u8)> = Vec::with_capacity(track.notes.len() * 2);
        for n in &track.notes {
            timed.push((n.onset * ticks_per_step, 1, n.pitch));
            timed.push((n.end() * ticks_per_step, 0, n.pitch));
        }
        timed.sort_unstable();
        let mut events = vec![(0, vec![0xc0 | ch, program])];
        events.extend(timed.into_iter().map(|(tick, on, pitch)| {
            let bytes = if on == 1 {
                vec![0x90 | ch, pitch, WRITE_VELOCITY]
            } else {
                vec![0x80 | ch, pitch, 0]
            };
            (tick, bytes)
        }));
        let last = events.last().map(|e| e.0).unwrap_or(0);
        events.push((total.max(last), vec![0xff, 0x2f, 0x00]));
        push_chunk(&mut out, &events);
    }
    Ok(out)
}
