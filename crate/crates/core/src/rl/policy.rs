//! Action selection and TD-target construction.
//!
//! Exploitation keeps every class above the decision threshold plus the
//! top-scoring class; exploration deletes the top-scoring class and selects
//! from the remainder, falling back to the second-highest score when nothing
//! clears the threshold.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SelectedAction {
    /// 0/1 per class.
    pub actions: Vec<u8>,
    /// True when the explore branch ran.
    pub explored: bool,
    /// True when explore was requested but fell back to exploit (C < 2).
    pub fallback: bool,
}

fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn select_actions(
    probs: &[f64],
    epsilon: f64,
    tau: f64,
    rng: &mut ChaCha8Rng,
) -> SelectedAction {
    let c = probs.len();
    let u: f64 = rng.gen();
    let explore_requested = u < epsilon;
    let top = argmax(probs);

    if explore_requested && c >= 2 {
        let mut actions = vec![0u8; c];
        let mut any = false;
        for (i, &p) in probs.iter().enumerate() {
            if i != top && p >= tau {
                actions[i] = 1;
                any = true;
            }
        }
        if !any {
            // Second-highest score, ties to the lowest class index.
            let mut second = usize::MAX;
            for i in 0..c {
                if i == top {
                    continue;
                }
                if second == usize::MAX || probs[i] > probs[second] {
                    second = i;
                }
            }
            actions[second] = 1;
        }
        SelectedAction {
            actions,
            explored: true,
            fallback: false,
        }
    } else {
        let mut actions: Vec<u8> = probs.iter().map(|&p| (p >= tau) as u8).collect();
        actions[top] = 1;
        SelectedAction {
            actions,
            explored: false,
            fallback: explore_requested && c < 2,
        }
    }
}

/// Per-class reward: +1 when the action matches the label (for presence and
/// absence alike), −1 otherwise.
pub fn compute_reward(actions: &[u8], labels: &[u8]) -> Result<Vec<i8>> {
    if actions.len() != labels.len() {
        return Err(Error::Contract(format!(
            "compute_reward: {} actions vs {} labels",
            actions.len(),
            labels.len()
        )));
    }
    Ok(actions
        .iter()
        .zip(labels)
        .map(|(&a, &l)| if a == l { 1 } else { -1 })
        .collect())
}

/// Chosen-action Q values under the antisymmetric per-class parameterization
/// `Q(s, a_c=1) = z_c`, `Q(s, a_c=0) = -z_c`. Differentiable in `z`.
pub fn q_values<S: Scalar>(logits: &Tensor<S>, actions: &[u8]) -> Result<Tensor<S>> {
    if logits.numel() != actions.len() {
        return Err(Error::Contract(format!(
            "q_values: {} logits vs {} actions",
            logits.numel(),
            actions.len()
        )));
    }
    let signs: Vec<S> = actions
        .iter()
        .map(|&a| if a == 1 { S::one() } else { -S::one() })
        .collect();
    let sign_t = Tensor::leaf(signs, logits.shape(), false)?;
    logits.mul(&sign_t)
}

/// TD target `y_c = r_c + gamma * max(z'_c, -z'_c) = r_c + gamma * |z'_c|`,
/// with `z'` taken from the frozen parameter copy. The result is a constant:
/// no gradient flows through it.
pub fn td_target<S: Scalar>(rewards: &[i8], next_logits: &[S], gamma: f64) -> Vec<S> {
    debug_assert_eq!(rewards.len(), next_logits.len());
    let g = S::from_f64(gamma);
    rewards
        .iter()
        .zip(next_logits)
        .map(|(&r, &z)| S::from_f64(r as f64) + g * z.abs())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn forced_rng(explore: bool) -> ChaCha8Rng {
        // Scan for a stream whose first draw lands on the wanted side of 0.5.
        for s in 0..64 {
            let mut rng = rng_for(s, "probe");
            let u: f64 = rng.gen();
            if (u < 0.5) == explore {
                return rng_for(s, "probe");
            }
        }
        unreachable!("no seed found");
    }

    #[test]
    fn exploit_applies_threshold_plus_argmax() {
        let mut rng = forced_rng(false);
        let a = select_actions(&[0.9, 0.2, 0.7], 0.5, 0.5, &mut rng);
        assert_eq!(a.actions, vec![1, 0, 1]);
        assert!(!a.explored);
    }

    #[test]
    fn exploit_guarantees_at_least_one_positive() {
        let mut rng = forced_rng(false);
        let a = select_actions(&[0.3, 0.2, 0.1], 0.5, 0.5, &mut rng);
        assert_eq!(a.actions, vec![1, 0, 0]);
    }

    #[test]
    fn explore_removes_top_and_keeps_survivors() {
        let mut rng = forced_rng(true);
        let a = select_actions(&[0.9, 0.2, 0.7], 0.5, 0.5, &mut rng);
        assert_eq!(a.actions, vec![0, 0, 1]);
        assert!(a.explored);
    }

    #[test]
    fn explore_falls_back_to_second_highest() {
        let mut rng = forced_rng(true);
        let a = select_actions(&[0.9, 0.2, 0.1], 0.5, 0.5, &mut rng);
        assert_eq!(a.actions, vec![0, 1, 0]);
    }

    #[test]
    fn explore_with_single_class_falls_back_to_exploit() {
        let mut rng = forced_rng(true);
        let a = select_actions(&[0.9], 1.0, 0.5, &mut rng);
        assert_eq!(a.actions, vec![1]);
        assert!(!a.explored);
        assert!(a.fallback);
    }

    #[test]
    fn reward_rule_and_extremes() {
        assert_eq!(
            compute_reward(&[1, 0, 1], &[1, 0, 0]).unwrap(),
            vec![1, 1, -1]
        );
        assert_eq!(compute_reward(&[1, 0], &[1, 0]).unwrap(), vec![1, 1]);
        assert_eq!(compute_reward(&[0, 1], &[1, 0]).unwrap(), vec![-1, -1]);
        assert!(compute_reward(&[1], &[1, 0]).is_err());
    }

    #[test]
    fn q_values_sign_rule() {
        let z = crate::Tensor64::leaf(vec![2.0, -1.0], &[2], false).unwrap();
        assert_eq!(q_values(&z, &[1, 0]).unwrap().to_vec(), vec![2.0, 1.0]);
        assert_eq!(q_values(&z, &[0, 1]).unwrap().to_vec(), vec![-2.0, -1.0]);
        let z0 = crate::Tensor64::leaf(vec![0.0, 0.0], &[2], false).unwrap();
        assert_eq!(q_values(&z0, &[1, 0]).unwrap().to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn td_target_formula() {
        assert_eq!(td_target(&[1, -1], &[2.0f64, -3.0], 0.0), vec![1.0, -1.0]);
        let y = td_target(&[1], &[2.0f64], 0.9);
        assert!((y[0] - 2.8).abs() < 1e-12);
        let y = td_target(&[-1], &[-3.0f64], 0.9);
        assert!((y[0] - 1.7).abs() < 1e-12);
    }
}
