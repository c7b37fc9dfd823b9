//! Text container formats for motions, duets, audio features, and waveforms.
//!
//! Every file is line-oriented: a magic line (`DUET v1`, `MOTION v1`,
//! `FEATURES v1`, `WAVE v1`), header `key value` lines, then
//! `block <name> <rows> <cols>` sections of whitespace-separated numbers,
//! terminated by `end`. Floats are written in Rust's shortest round-trip
//! form, so save/load is lossless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use duet_core::Tensor;

use crate::error::{MotionError, Result};
use crate::sequence::{ContactMatrix, DuetSample, MotionSequence, RelativeTrajectory};
use crate::skeleton::{Skeleton, REDUCED_JOINT_COUNT};

const CONTACT_COLS: usize = REDUCED_JOINT_COUNT * REDUCED_JOINT_COUNT;

struct BlockWriter {
    out: String,
}

impl BlockWriter {
    fn new(magic: &str) -> Self {
        Self { out: format!("{magic}\n") }
    }

    fn header(&mut self, key: &str, value: impl std::fmt::Display) {
        writeln!(self.out, "{key} {value}").unwrap();
    }

    fn block(&mut self, name: &str, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
        assert_eq!(data.len(), rows * cols, "block {name} size");
        if data.iter().any(|v| !v.is_finite()) {
            return Err(MotionError::Invalid(format!("block {name} contains non-finite values")));
        }
        writeln!(self.out, "block {name} {rows} {cols}").unwrap();
        for r in 0..rows {
            let row = &data[r * cols..(r + 1) * cols];
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    self.out.push(' ');
                }
                write!(self.out, "{v}").unwrap();
            }
            self.out.push('\n');
        }
        Ok(())
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.out.push_str("end\n");
        fs::write(path, self.out)?;
        Ok(())
    }
}

struct Parsed {
    headers: BTreeMap<String, String>,
    blocks: BTreeMap<String, (usize, usize, Vec<f64>)>,
}

fn parse_file(path: &Path, magic: &str) -> Result<Parsed> {
    let file = path.display().to_string();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let perr = |line: usize, detail: String| MotionError::Parse {
        file: file.clone(),
        line: line + 1,
        detail,
    };
    let (_, first) = lines
        .next()
        .ok_or_else(|| perr(0, "empty file".into()))?;
    if first.trim() != magic {
        return Err(perr(0, format!("expected magic '{magic}', got '{first}'")));
    }
    let mut headers = BTreeMap::new();
    let mut blocks = BTreeMap::new();
    let mut saw_end = false;
    while let Some((ln, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line == "end" {
            saw_end = true;
            break;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        if key == "block" {
            let name = parts
                .next()
                .ok_or_else(|| perr(ln, "block missing name".into()))?
                .to_string();
            let rows: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| perr(ln, "block missing row count".into()))?;
            let cols: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| perr(ln, "block missing column count".into()))?;
            let mut data = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                let (rln, row) = lines
                    .next()
                    .ok_or_else(|| perr(ln, format!("block {name} truncated at row {r}")))?;
                for tok in row.split_whitespace() {
                    let v: f64 = tok
                        .parse()
                        .map_err(|_| perr(rln, format!("bad number '{tok}' in block {name}")))?;
                    data.push(v);
                }
                if data.len() != (r + 1) * cols {
                    return Err(perr(rln, format!("block {name} row {r} has wrong width")));
                }
            }
            blocks.insert(name, (rows, cols, data));
        } else {
            let value = parts.collect::<Vec<_>>().join(" ");
            headers.insert(key.to_string(), value);
        }
    }
    if !saw_end {
        return Err(perr(text.lines().count(), "missing 'end' terminator".into()));
    }
    Ok(Parsed { headers, blocks })
}

impl Parsed {
    fn header_f64(&self, file: &Path, key: &str) -> Result<f64> {
        self.headers
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MotionError::Parse {
                file: file.display().to_string(),
                line: 0,
                detail: format!("missing or invalid header '{key}'"),
            })
    }

    fn header_usize(&self, file: &Path, key: &str) -> Result<usize> {
        self.headers
            .get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| MotionError::Parse {
                file: file.display().to_string(),
                line: 0,
                detail: format!("missing or invalid header '{key}'"),
            })
    }

    fn take_block(&mut self, file: &Path, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>> {
        let (r, c, data) = self.blocks.remove(name).ok_or_else(|| MotionError::Parse {
            file: file.display().to_string(),
            line: 0,
            detail: format!("missing block '{name}'"),
        })?;
        if r != rows || c != cols {
            return Err(MotionError::Parse {
                file: file.display().to_string(),
                line: 0,
                detail: format!("block '{name}' is {r}x{c}, expected {rows}x{cols}"),
            });
        }
        Ok(data)
    }

    fn reject_leftover_blocks(&self, file: &Path) -> Result<()> {
        if let Some(name) = self.blocks.keys().next() {
            return Err(MotionError::Parse {
                file: file.display().to_string(),
                line: 0,
                detail: format!("unknown block '{name}'"),
            });
        }
        Ok(())
    }
}

fn motion_blocks(w: &mut BlockWriter, prefix: &str, m: &MotionSequence) -> Result<()> {
    let j = m.joint_count();
    w.block(&format!("{prefix}.local_positions"), m.frames, j * 3, &m.local_positions)?;
    w.block(&format!("{prefix}.rotations"), m.frames, j * 6, &m.rotations)?;
    w.block(&format!("{prefix}.root_translation"), m.frames, 3, &m.root_translation)?;
    Ok(())
}

fn motion_from_blocks(p: &mut Parsed, file: &Path, prefix: &str, frames: usize, joints: usize, fps: f64) -> Result<MotionSequence> {
    Ok(MotionSequence {
        fps,
        frames,
        local_positions: p.take_block(file, &format!("{prefix}.local_positions"), frames, joints * 3)?,
        rotations: p.take_block(file, &format!("{prefix}.rotations"), frames, joints * 6)?,
        root_translation: p.take_block(file, &format!("{prefix}.root_translation"), frames, 3)?,
    })
}

pub fn write_duet(path: &Path, duet: &DuetSample) -> Result<()> {
    duet.validate()?;
    let sk = Skeleton::duet54();
    let mut w = BlockWriter::new("DUET v1");
    w.header("fps", duet.leader.fps);
    w.header("frames", duet.frames());
    w.header("joints", sk.joint_count());
    w.header("skeleton", &sk.name);
    motion_blocks(&mut w, "leader", &duet.leader)?;
    motion_blocks(&mut w, "follower", &duet.follower)?;
    w.block("trajectory.offsets", duet.frames(), 3, &duet.trajectory.offsets)?;
    let contact: Vec<f64> = duet.contacts.entries.iter().map(|&e| e as f64).collect();
    w.block("contact.entries", duet.frames(), CONTACT_COLS, &contact)?;
    if let Some(f) = &duet.features {
        w.block("audio.features", f.shape()[0], f.shape()[1], f.data())?;
    }
    w.finish(path)
}

pub fn read_duet(path: &Path) -> Result<DuetSample> {
    let mut p = parse_file(path, "DUET v1")?;
    let fps = p.header_f64(path, "fps")?;
    let frames = p.header_usize(path, "frames")?;
    let joints = p.header_usize(path, "joints")?;
    let leader = motion_from_blocks(&mut p, path, "leader", frames, joints, fps)?;
    let follower = motion_from_blocks(&mut p, path, "follower", frames, joints, fps)?;
    let offsets = p.take_block(path, "trajectory.offsets", frames, 3)?;
    let contact = p.take_block(path, "contact.entries", frames, CONTACT_COLS)?;
    let mut entries = Vec::with_capacity(contact.len());
    for v in contact {
        if v == 0.0 {
            entries.push(0);
        } else if v == 1.0 {
            entries.push(1);
        } else {
            return Err(MotionError::Parse {
                file: path.display().to_string(),
                line: 0,
                detail: format!("contact entry {v} is not binary"),
            });
        }
    }
    let features = match p.blocks.remove("audio.features") {
        Some((rows, cols, data)) => {
            if rows != frames {
                return Err(MotionError::Parse {
                    file: path.display().to_string(),
                    line: 0,
                    detail: format!("audio.features has {rows} frames, expected {frames}"),
                });
            }
            Some(Tensor::new(vec![rows, cols], data).map_err(MotionError::Core)?)
        }
        None => None,
    };
    p.reject_leftover_blocks(path)?;
    let duet = DuetSample {
        leader,
        follower,
        trajectory: RelativeTrajectory { offsets },
        contacts: ContactMatrix { frames, entries },
        features,
    };
    duet.validate()?;
    Ok(duet)
}

pub fn write_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    let mut w = BlockWriter::new("MOTION v1");
    w.header("fps", m.fps);
    w.header("frames", m.frames);
    w.header("joints", m.joint_count());
    w.header("skeleton", &Skeleton::duet54().name);
    motion_blocks(&mut w, "motion", m)?;
    w.finish(path)
}

pub fn read_motion(path: &Path) -> Result<MotionSequence> {
    let mut p = parse_file(path, "MOTION v1")?;
    let fps = p.header_f64(path, "fps")?;
    let frames = p.header_usize(path, "frames")?;
    let joints = p.header_usize(path, "joints")?;
    let m = motion_from_blocks(&mut p, path, "motion", frames, joints, fps)?;
    p.reject_leftover_blocks(path)?;
    Ok(m)
}

/// Precomputed per-frame audio features, [T, C].
pub fn write_features(path: &Path, fps: f64, features: &Tensor) -> Result<()> {
    let mut w = BlockWriter::new("FEATURES v1");
    w.header("fps", fps);
    w.header("frames", features.shape()[0]);
    w.header("channels", features.shape()[1]);
    w.block("features", features.shape()[0], features.shape()[1], features.data())?;
    w.finish(path)
}

pub fn read_features(path: &Path) -> Result<(f64, Tensor)> {
    let mut p = parse_file(path, "FEATURES v1")?;
    let fps = p.header_f64(path, "fps")?;
    let frames = p.header_usize(path, "frames")?;
    let channels = p.header_usize(path, "channels")?;
    let data = p.take_block(path, "features", frames, channels)?;
    p.reject_leftover_blocks(path)?;
    Ok((fps, Tensor::new(vec![frames, channels], data).map_err(MotionError::Core)?))
}

/// Mono waveform with sample rate.
pub fn write_wave(path: &Path, sample_rate: u32, samples: &[f64]) -> Result<()> {
    let mut w = BlockWriter::new("WAVE v1");
    w.header("sample_rate", sample_rate);
    w.header("samples", samples.len());
    w.block("samples", samples.len(), 1, samples)?;
    w.finish(path)
}

pub fn read_wave(path: &Path) -> Result<(u32, Vec<f64>)> {
    let mut p = parse_file(path, "WAVE v1")?;
    let sr = p.header_usize(path, "sample_rate")? as u32;
    let n = p.header_usize(path, "samples")?;
    let data = p.take_block(path, "samples", n, 1)?;
    p.reject_leftover_blocks(path)?;
    Ok((sr, data))
}

/// Duet files in a directory, sorted by name for deterministic ordering.
pub fn list_duet_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().map(|e| e == "duet").unwrap_or(false) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{synth_duet, SynthConfig};
    use proptest::prelude::*;

    #[test]
    fn duet_roundtrip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.duet");
        let mut duet = synth_duet(&SynthConfig::default(), 9).unwrap();
        duet.features = Some(Tensor::new(vec![duet.frames(), 54], vec![0.125; duet.frames() * 54]).unwrap());
        write_duet(&path, &duet).unwrap();
        let loaded = read_duet(&path).unwrap();
        assert_eq!(loaded, duet);
    }

    #[test]
    fn unknown_block_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.duet");
        let duet = synth_duet(&SynthConfig::default(), 9).unwrap();
        write_duet(&path, &duet).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let tampered = text.replace("end\n", "block mystery 1 1\n7\nend\n");
        fs::write(&path, tampered).unwrap();
        let err = read_duet(&path).unwrap_err();
        assert!(err.to_string().contains("mystery"));
    }

    #[test]
    fn wave_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.wave");
        let samples = vec![0.0, 0.5, -0.25, 1e-17, -1.0];
        write_wave(&path, 16000, &samples).unwrap();
        let (sr, loaded) = read_wave(&path).unwrap();
        assert_eq!(sr, 16000);
        assert_eq!(loaded, samples);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn motion_roundtrip_survives_arbitrary_values(values in proptest::collection::vec(-1e3f64..1e3, 54 * 3)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.motion");
            let mut m = MotionSequence::zeros(1, 30.0, 54);
            m.local_positions.copy_from_slice(&values);
            write_motion(&path, &m).unwrap();
            let loaded = read_motion(&path).unwrap();
            prop_assert_eq!(loaded, m);
        }
    }
}
