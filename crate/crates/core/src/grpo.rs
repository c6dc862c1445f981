//! Group-relative advantages.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::transcript::Trajectory;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("empty rollout group")]
    EmptyGroup,
    #[error("non-finite reward at index {0}")]
    NonFinite(usize),
    #[error("epsilon must be positive, got {0}")]
    InvalidEpsilon(f64),
}

/// `(r_i - mean) / (std + epsilon)` with the population standard deviation.
///
/// A group whose rewards are all equal gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], epsilon: f64) -> Result<Vec<f64>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(GrpoError::InvalidEpsilon(epsilon));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite(i));
    }
    let first = rewards[0];
    if rewards.iter().all(|&r| r == first) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let scale = var.sqrt() + epsilon;
    Ok(rewards.iter().map(|r| (r - mean) / scale).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub question_id: String,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        question_id: impl Into<String>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        epsilon: f64,
    ) -> Result<Self, GrpoError> {
        assert_eq!(trajectories.len(), rewards.len(), "trajectories and rewards must align");
        let advantages = group_advantages(&rewards, epsilon)?;
        Ok(RolloutGroup { question_id: question_id.into(), trajectories, rewards, advantages })
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }

    /// Index of the strictly largest advantage, if one exists.
    pub fn strict_argmax(&self) -> Option<usize> {
        let (best, &max) = self.advantages.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1))?;
        let ties = self.advantages.iter().filter(|&&a| a == max).count();
        (ties == 1).then_some(best)
    }

    pub fn report(&self) -> GroupReport {
        GroupReport {
            question_id: self.question_id.clone(),
            rewards: self.rewards.clone(),
            advantages: self.advantages.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub question_id: String,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

impl GroupReport {
    pub fn from_rewards(question_id: impl Into<String>, rewards: Vec<f64>, epsilon: f64) -> Result<Self, GrpoError> {
        let advantages = group_advantages(&rewards, epsilon)?;
        Ok(GroupReport { question_id: question_id.into(), rewards, advantages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        let a = group_advantages(&[1.0, 1.0, 0.0, 0.0], 1e-8).unwrap();
        for (got, want) in a.iter().zip([1.0, 1.0, -1.0, -1.0]) {
            assert!((got - want).abs() < 1e-6);
        }
        assert_eq!(group_advantages(&[0.1; 4], 1e-8).unwrap(), vec![0.0; 4]);
        assert_eq!(group_advantages(&[3.0], 1e-8).unwrap(), vec![0.0]);
        assert_eq!(group_advantages(&[], 1e-8), Err(GrpoError::EmptyGroup));
        assert_eq!(group_advantages(&[1.0, f64::NAN], 1e-8), Err(GrpoError::NonFinite(1)));
        assert_eq!(group_advantages(&[1.0], 0.0), Err(GrpoError::InvalidEpsilon(0.0)));
    }

    #[test]
    fn strict_argmax() {
        let g = GroupReport::from_rewards("q", vec![1.0, 3.0, 2.0], 1e-8).unwrap();
        let group = RolloutGroup {
            question_id: g.question_id,
            trajectories: vec![],
            rewards: g.rewards,
            advantages: g.advantages,
        };
        assert_eq!(group.strict_argmax(), Some(1));
        let tied = RolloutGroup { advantages: vec![1.0, 1.0, -2.0], ..group };
        assert_eq!(tied.strict_argmax(), None);
    }

    proptest! {
        #[test]
        fn zero_mean_and_unit_variance(rewards in prop::collection::vec(-10.0f64..10.0, 2..16)) {
            let a = group_advantages(&rewards, 1e-12).unwrap();
            let mean = a.iter().sum::<f64>() / a.len() as f64;
            prop_assert!(mean.abs() < 1e-9);
            let spread = rewards.iter().cloned().fold(f64::MIN, f64::max) - rewards.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-3 {
                let var = a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64;
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn shift_invariant(rewards in prop::collection::vec(-10.0f64..10.0, 1..16), c in -50.0f64..50.0) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let shifted: Vec<f64> = rewards.iter().map(|r| r + c).collect();
            let b = group_advantages(&shifted, 1e-8).unwrap();
            if rewards.iter().all(|&r| r == rewards[0]) {
                prop_assert!(b.iter().all(|&x| x.abs() < 1e-9));
            } else {
                for (x, y) in a.iter().zip(&b) {
                    prop_assert!((x - y).abs() < 1e-6);
                }
            }
        }

        #[test]
        fn positive_scale_preserves_order(rewards in prop::collection::vec(-10.0f64..10.0, 1..16), k in 0.01f64..100.0) {
            let a = group_advantages(&rewards, 1e-8).unwrap();
            let scaled: Vec<f64> = rewards.iter().map(|r| r * k).collect();
            let b = group_advantages(&scaled, 1e-8).unwrap();
            for i in 0..a.len() {
                for j in 0..a.len() {
                    if rewards[i] < rewards[j] {
                        prop_assert!(a[i] < a[j] && b[i] < b[j]);
                    }
                }
            }
        }
    }
}
