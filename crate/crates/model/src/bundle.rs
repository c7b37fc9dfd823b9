//! Channel layout of the diffusion state and condition tensors.
//!
//! The state x concatenates, along channels, the follower part latents
//! (in part order), the trajectory latent, and the contact latent; the
//! condition y concatenates the leader part latents and the music feature
//! encoding. All components share the latent temporal length.

use duet_core::Tensor;

use crate::error::{ModelError, Result};

/// Disjoint channel ranges covering a concatenated latent tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMap {
    pub latent_dim: usize,
    pub part_names: Vec<String>,
}

impl ChannelMap {
    pub fn new(part_names: &[&str], latent_dim: usize) -> Self {
        Self {
            latent_dim,
            part_names: part_names.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn parts(&self) -> usize {
        self.part_names.len()
    }

    /// Total channels of the state tensor: parts + trajectory + contact.
    pub fn state_channels(&self) -> usize {
        (self.parts() + 2) * self.latent_dim
    }

    /// Total channels of the condition tensor: parts + music.
    pub fn condition_channels(&self) -> usize {
        (self.parts() + 1) * self.latent_dim
    }

    pub fn part_range(&self, index: usize) -> std::ops::Range<usize> {
        index * self.latent_dim..(index + 1) * self.latent_dim
    }

    pub fn trajectory_range(&self) -> std::ops::Range<usize> {
        self.parts() * self.latent_dim..(self.parts() + 1) * self.latent_dim
    }

    pub fn contact_range(&self) -> std::ops::Range<usize> {
        (self.parts() + 1) * self.latent_dim..(self.parts() + 2) * self.latent_dim
    }
}

fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let t = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(t * total);
    for ti in 0..t {
        for p in parts {
            if p.shape()[0] != t {
                return Err(ModelError::Invalid("latent components disagree on length".into()));
            }
            let c = p.shape()[1];
            data.extend_from_slice(&p.data()[ti * c..(ti + 1) * c]);
        }
    }
    Ok(Tensor::new(vec![t, total], data)?)
}

fn slice_channels(x: &Tensor, range: std::ops::Range<usize>) -> Tensor {
    let t = x.shape()[0];
    let c = x.shape()[1];
    let width = range.end - range.start;
    let mut data = Vec::with_capacity(t * width);
    for ti in 0..t {
        data.extend_from_slice(&x.data()[ti * c + range.start..ti * c + range.end]);
    }
    Tensor::new(vec![t, width], data).expect("slice shape")
}

/// The diffusion state: [T', (parts + 2) * C].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentBundle {
    pub map: ChannelMap,
    pub x: Tensor,
}

impl LatentBundle {
    pub fn concat(map: ChannelMap, motion_parts: &[Tensor], trajectory: &Tensor, contact: &Tensor) -> Result<Self> {
        if motion_parts.len() != map.parts() {
            return Err(ModelError::Invalid(format!(
                "expected {} part latents, got {}",
                map.parts(),
                motion_parts.len()
            )));
        }
        let mut refs: Vec<&Tensor> = motion_parts.iter().collect();
        refs.push(trajectory);
        refs.push(contact);
        let x = concat_channels(&refs)?;
        if x.shape()[1] != map.state_channels() {
            return Err(ModelError::Invalid(format!(
                "state has {} channels, map expects {}",
                x.shape()[1],
                map.state_channels()
            )));
        }
        Ok(Self { map, x })
    }

    pub fn from_tensor(map: ChannelMap, x: Tensor) -> Result<Self> {
        if x.rank() != 2 || x.shape()[1] != map.state_channels() {
            return Err(ModelError::Invalid(format!(
                "state tensor {:?} does not match map ({} channels)",
                x.shape(),
                map.state_channels()
            )));
        }
        Ok(Self { map, x })
    }

    pub fn frames(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn motion_part(&self, index: usize) -> Tensor {
        slice_channels(&self.x, self.map.part_range(index))
    }

    pub fn trajectory(&self) -> Tensor {
        slice_channels(&self.x, self.map.trajectory_range())
    }

    pub fn contact(&self) -> Tensor {
        slice_channels(&self.x, self.map.contact_range())
    }
}

/// The condition: leader part latents plus encoded music, [T', (parts+1)*C].
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionBundle {
    pub map: ChannelMap,
    pub y: Tensor,
}

impl ConditionBundle {
    pub fn concat(map: ChannelMap, leader_parts: &[Tensor], music: &Tensor) -> Result<Self> {
        if leader_parts.len() != map.parts() {
            return Err(ModelError::Invalid(format!(
                "expected {} leader latents, got {}",
                map.parts(),
                leader_parts.len()
            )));
        }
        let mut refs: Vec<&Tensor> = leader_parts.iter().collect();
        refs.push(music);
        let y = concat_channels(&refs)?;
        if y.shape()[1] != map.condition_channels() {
            return Err(ModelError::Invalid(format!(
                "condition has {} channels, map expects {}",
                y.shape()[1],
                map.condition_channels()
            )));
        }
        Ok(Self { map, y })
    }

    pub fn frames(&self) -> usize {
        self.y.shape()[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranges_are_disjoint_and_cover_everything() {
        let map = ChannelMap::new(&["U", "D", "L", "R"], 32);
        assert_eq!(map.state_channels(), 192);
        assert_eq!(map.condition_channels(), 160);
        let mut covered = vec![false; map.state_channels()];
        for p in 0..4 {
            for c in map.part_range(p) {
                assert!(!covered[c]);
                covered[c] = true;
            }
        }
        for c in map.trajectory_range().chain(map.contact_range()) {
            assert!(!covered[c]);
            covered[c] = true;
        }
        assert!(covered.iter().all(|&c| c));
    }

    #[test]
    fn concat_then_slice_restores_components() {
        let map = ChannelMap::new(&["U", "D"], 2);
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let d = Tensor::matrix(2, 2, vec![9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = Tensor::matrix(2, 2, vec![13.0, 14.0, 15.0, 16.0]).unwrap();
        let bundle = LatentBundle::concat(map, &[a.clone(), b.clone()], &d, &c).unwrap();
        assert_eq!(bundle.motion_part(0), a);
        assert_eq!(bundle.motion_part(1), b);
        assert_eq!(bundle.trajectory(), d);
        assert_eq!(bundle.contact(), c);
        // row layout interleaves per frame
        assert_eq!(&bundle.x.data()[0..8], &[1.0, 2.0, 5.0, 6.0, 9.0, 10.0, 13.0, 14.0]);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let map = ChannelMap::new(&["U"], 2);
        let a = Tensor::zeros(&[2, 2]);
        let d = Tensor::zeros(&[3, 2]);
        let c = Tensor::zeros(&[2, 2]);
        assert!(LatentBundle::concat(map, &[a], &d, &c).is_err());
    }
}
