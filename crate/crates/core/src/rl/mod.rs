//! The Markov-decision-process-shaped pieces: ε-greedy action selection,
//! per-class rewards, TD targets and losses, experience replay, and the
//! combined training objective.

pub mod policy;
pub mod replay;
pub mod schedule;

pub use policy::{compute_reward, q_values, select_actions, td_target, SelectedAction};
pub use replay::{ReplayBuffer, Transition};
pub use schedule::{epsilon_at, EpsilonSchedule, Mode};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// RL hyperparameters shared by the trainer and the CLI.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RlConfig {
    /// Discount factor, in [0,1).
    pub gamma: f64,
    /// Decision threshold for turning probabilities into actions.
    pub tau: f64,
    pub lambda_p: f64,
    pub lambda_ptd: f64,
    pub lambda_td: f64,
    pub lambda_d: f64,
    /// Target-copy sync period in steps; `None` syncs once per episode.
    pub target_sync_steps: Option<usize>,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            gamma: 0.9,
            tau: 0.5,
            lambda_p: 1.0,
            lambda_ptd: 1.0,
            lambda_td: 1.0,
            lambda_d: 1.0,
            target_sync_steps: None,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        for (name, v) in [
            ("lambda_p", self.lambda_p),
            ("lambda_ptd", self.lambda_ptd),
            ("lambda_td", self.lambda_td),
            ("lambda_d", self.lambda_d),
        ] {
            if v < 0.0 {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean over classes and batch of `0.5 * (q - y_hat)^2`. Used both for the
/// diagnostic agent's TD loss and, with prior logits, the priors' TD losses.
pub fn td_loss<S: Scalar>(q_chosen: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if q_chosen.shape() != target.shape() {
        return Err(Error::Shape {
            op: "td_loss",
            lhs: q_chosen.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let diff = q_chosen.sub(target)?;
    Ok(diff.mul(&diff)?.mul_scalar(S::from_f64(0.5)).mean())
}

/// Weighted sum of all loss components; default weights 1 give the plain sum.
pub fn total_loss<S: Scalar>(
    prior_ce: &[Tensor<S>],
    prior_td: &[Tensor<S>],
    diag_td: &Tensor<S>,
    diag_ce: &Tensor<S>,
    cfg: &RlConfig,
) -> Result<Tensor<S>> {
    cfg.validate()?;
    let mut acc = diag_td.mul_scalar(S::from_f64(cfg.lambda_td));
    acc = acc.add(&diag_ce.mul_scalar(S::from_f64(cfg.lambda_d)))?;
    for l in prior_ce {
        acc = acc.add(&l.mul_scalar(S::from_f64(cfg.lambda_p)))?;
    }
    for l in prior_td {
        acc = acc.add(&l.mul_scalar(S::from_f64(cfg.lambda_ptd)))?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    fn scalar(v: f64) -> Tensor64 {
        Tensor::scalar_value(v)
    }

    #[test]
    fn td_loss_zero_residual_and_quadratic() {
        let q = Tensor64::leaf(vec![1.0, -2.0], &[2], false).unwrap();
        assert_eq!(td_loss(&q, &q).unwrap().item(), 0.0);

        let q = Tensor64::leaf(vec![0.0], &[1], false).unwrap();
        let y = Tensor64::leaf(vec![2.0], &[1], false).unwrap();
        assert_eq!(td_loss(&q, &y).unwrap().item(), 2.0);

        let y4 = Tensor64::leaf(vec![4.0], &[1], false).unwrap();
        assert_eq!(td_loss(&q, &y4).unwrap().item(), 8.0);
    }

    #[test]
    fn total_loss_default_weights_is_plain_sum() {
        let cfg = RlConfig::default();
        let out = total_loss(
            &[scalar(0.1), scalar(0.2)],
            &[scalar(0.3), scalar(0.4)],
            &scalar(0.5),
            &scalar(0.6),
            &cfg,
        )
        .unwrap();
        assert!((out.item() - 2.1).abs() < 1e-12);

        let zero = total_loss(
            &[scalar(0.0), scalar(0.0)],
            &[scalar(0.0), scalar(0.0)],
            &scalar(0.0),
            &scalar(0.0),
            &cfg,
        )
        .unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn total_loss_lambda_td_zero_removes_rl_term() {
        let cfg = RlConfig {
            lambda_td: 0.0,
            ..RlConfig::default()
        };
        let out = total_loss(&[], &[], &scalar(123.0), &scalar(0.5), &cfg).unwrap();
        assert!((out.item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn negative_weights_rejected() {
        let cfg = RlConfig {
            lambda_d: -1.0,
            ..RlConfig::default()
        };
        assert!(total_loss(&[], &[], &scalar(0.0), &scalar(0.0), &cfg).is_err());
    }
}
