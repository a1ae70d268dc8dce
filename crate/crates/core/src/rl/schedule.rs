//! Linearly decaying exploration rate: ε starts at 1, reaches `eps_min` at
//! `total_steps`, and is exactly 0 in eval mode.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpsilonSchedule {
    pub eps_min: f64,
    pub total_steps: usize,
    pub mode: Mode,
}

impl EpsilonSchedule {
    pub fn train(eps_min: f64, total_steps: usize) -> EpsilonSchedule {
        EpsilonSchedule {
            eps_min,
            total_steps,
            mode: Mode::Train,
        }
    }

    pub fn eval(&self) -> EpsilonSchedule {
        EpsilonSchedule {
            mode: Mode::Eval,
            ..self.clone()
        }
    }
}

pub fn epsilon_at(step: usize, sched: &EpsilonSchedule) -> Result<f64> {
    match sched.mode {
        Mode::Eval => Ok(0.0),
        Mode::Train => {
            if sched.total_steps == 0 {
                return Err(Error::Config(
                    "epsilon schedule: total_steps must be > 0".to_string(),
                ));
            }
            if !(0.0..=1.0).contains(&sched.eps_min) {
                return Err(Error::Config(format!(
                    "epsilon schedule: eps_min must be in [0,1], got {}",
                    sched.eps_min
                )));
            }
            let frac = step as f64 / sched.total_steps as f64;
            Ok((1.0 - (1.0 - sched.eps_min) * frac).max(sched.eps_min))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let s = EpsilonSchedule::train(0.2, 1000);
        assert_eq!(epsilon_at(0, &s).unwrap(), 1.0);
        assert_eq!(epsilon_at(1000, &s).unwrap(), 0.2);
        assert!((epsilon_at(500, &s).unwrap() - 0.6).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_is_zero() {
        let s = EpsilonSchedule::train(0.2, 10).eval();
        assert_eq!(epsilon_at(5, &s).unwrap(), 0.0);
    }

    #[test]
    fn clamped_and_non_increasing() {
        let s = EpsilonSchedule::train(0.2, 100);
        let mut prev = f64::INFINITY;
        for step in 0..300 {
            let e = epsilon_at(step, &s).unwrap();
            assert!((0.2..=1.0).contains(&e));
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn zero_total_steps_is_a_config_error() {
        let s = EpsilonSchedule::train(0.2, 0);
        assert!(epsilon_at(0, &s).is_err());
    }
}
