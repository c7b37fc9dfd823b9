//! Import external motion data onto the internal 54-joint skeleton.
//!
//! External joint sets rarely match ours one-to-one, so the caller supplies
//! a name mapping table (`external_name internal_name` per line, `#`
//! comments allowed). Every internal joint must be covered.

use crate::error::{MotionError, Result};
use crate::sequence::{to_local, MotionSequence};
use crate::skeleton::Skeleton;

/// Parse a mapping table from text.
pub fn parse_mapping(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            let mut parts = l.split_whitespace();
            Some((parts.next()?.to_string(), parts.next()?.to_string()))
        })
        .collect()
}

/// Map named global-frame positions [T, J_ext, 3] into a `MotionSequence`.
///
/// Rotations are filled with the identity encoding; the root translation is
/// taken from the joint mapped to `root`.
pub fn import_named_positions(
    sk: &Skeleton,
    global: &[f64],
    frames: usize,
    external_names: &[String],
    fps: f64,
    mapping: &[(String, String)],
) -> Result<MotionSequence> {
    let j_ext = external_names.len();
    if global.len() != frames * j_ext * 3 {
        return Err(MotionError::Invalid(format!(
            "expected {} values for {} frames x {} joints, got {}",
            frames * j_ext * 3,
            frames,
            j_ext,
            global.len()
        )));
    }
    let mut source_of = vec![None; sk.joint_count()];
    for (ext, internal) in mapping {
        let Some(target) = sk.joint_index(internal) else {
            return Err(MotionError::Invalid(format!("unknown internal joint '{internal}'")));
        };
        let Some(src) = external_names.iter().position(|n| n == ext) else {
            return Err(MotionError::Invalid(format!("external joint '{ext}' not present in data")));
        };
        source_of[target] = Some(src);
    }
    let missing: Vec<String> = source_of
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_none())
        .map(|(i, _)| sk.names[i].clone())
        .collect();
    if !missing.is_empty() {
        return Err(MotionError::MappingIncomplete(missing));
    }

    let j = sk.joint_count();
    let mut mapped = vec![0.0; frames * j * 3];
    for t in 0..frames {
        for (target, src) in source_of.iter().enumerate() {
            let src = src.unwrap();
            for d in 0..3 {
                mapped[(t * j + target) * 3 + d] = global[(t * j_ext + src) * 3 + d];
            }
        }
    }
    let (local, trans) = to_local(&mapped, frames, j);
    let mut m = MotionSequence::zeros(frames, fps, j);
    m.local_positions = local;
    m.root_translation = trans;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn import_requires_full_coverage() {
        let sk = Skeleton::duet54();
        let names = vec!["pelvis".to_string()];
        let mapping = vec![("pelvis".to_string(), "root".to_string())];
        let err = import_named_positions(sk, &[0.0, 0.0, 0.0], 1, &names, 30.0, &mapping).unwrap_err();
        assert!(matches!(err, MotionError::MappingIncomplete(_)));
    }

    #[test]
    fn import_maps_identity_when_names_align() {
        let sk = Skeleton::duet54();
        let names: Vec<String> = sk.names.clone();
        let mapping: Vec<(String, String)> = names.iter().map(|n| (n.clone(), n.clone())).collect();
        let mut global = vec![0.0; sk.joint_count() * 3];
        for (i, v) in global.iter_mut().enumerate() {
            *v = i as f64 * 0.01;
        }
        let m = import_named_positions(sk, &global, 1, &names, 30.0, &mapping).unwrap();
        assert_eq!(m.root(0), [0.0, 0.01, 0.02]);
        // local positions are root-centered
        assert_eq!(m.local_pos(0, 0), [0.0, 0.0, 0.0]);
        let p5 = m.global_pos(0, 5);
        assert!((p5[0] - 0.15).abs() < 1e-12);
    }

    #[test]
    fn mapping_parser_skips_comments() {
        let text = "# comment\npelvis root\n\nhead_top head\n";
        let m = parse_mapping(text);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0], ("pelvis".to_string(), "root".to_string()));
    }
}
