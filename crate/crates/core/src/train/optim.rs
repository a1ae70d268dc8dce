//! Decoupled-weight-decay adaptive-moment optimizer with cosine learning-rate
//! decay. Parameter groups step in a fixed order (diagnostic first, then the
//! prior agents) and a parameter is touched only when it received a nonzero
//! gradient.

use crate::autodiff::{Scalar, Tensor};

pub struct ParamGroup<S: Scalar> {
    pub name: String,
    pub params: Vec<(String, Tensor<S>)>,
}

pub struct AdamW<S: Scalar> {
    groups: Vec<ParamGroup<S>>,
    m: Vec<Vec<Vec<S>>>,
    v: Vec<Vec<Vec<S>>>,
    /// Completed optimizer steps (t is 1-based inside the update).
    pub step_count: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    /// Steps over which the cosine decay runs.
    pub total_steps: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(
        groups: Vec<ParamGroup<S>>,
        lr_max: f64,
        weight_decay: f64,
        total_steps: usize,
    ) -> AdamW<S> {
        let m = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect())
            .collect();
        let v = groups
            .iter()
            .map(|g| g.params.iter().map(|(_, t)| vec![S::zero(); t.numel()]).collect())
            .collect();
        AdamW {
            groups,
            m,
            v,
            step_count: 0,
            lr_max,
            weight_decay,
            total_steps: total_steps.max(1),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
        self.lr_max * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }

    pub fn group_names(&self) -> Vec<&str> {
        self.groups.iter().map(|g| g.name.as_str()).collect()
    }

    /// Step every group in order; returns the names of groups that updated
    /// at least one parameter.
    pub fn step(&mut self) -> Vec<String> {
        let all: Vec<String> = self.groups.iter().map(|g| g.name.clone()).collect();
        self.step_groups(&all.iter().map(|s| s.as_str()).collect::<Vec<_>>())
    }

    /// Step only the named groups (in stored group order). Parameters whose
    /// gradient is absent or identically zero are left untouched.
    pub fn step_groups(&mut self, names: &[&str]) -> Vec<String> {
        let lr = S::from_f64(self.lr_at(self.step_count));
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = S::from_f64(1.0 - self.beta1.powi(t));
        let bc2 = S::from_f64(1.0 - self.beta2.powi(t));
        let b1 = S::from_f64(self.beta1);
        let b2 = S::from_f64(self.beta2);
        let wd = S::from_f64(self.weight_decay);
        let eps = S::from_f64(self.eps);

        let mut touched = Vec::new();
        for (gi, group) in self.groups.iter().enumerate() {
            if !names.contains(&group.name.as_str()) {
                continue;
            }
            let mut group_touched = false;
            for (pi, (_, p)) in group.params.iter().enumerate() {
                let Some(grad) = p.grad() else { continue };
                if grad.iter().all(|g| *g == S::zero()) {
                    continue;
                }
                group_touched = true;
                let m = &mut self.m[gi][pi];
                let v = &mut self.v[gi][pi];
                let mut data = p.data_mut();
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (S::one() - b1) * g;
                    v[i] = b2 * v[i] + (S::one() - b2) * g * g;
                    let m_hat = m[i] / bc1;
                    let v_hat = v[i] / bc2;
                    data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps) - lr * wd * data[i];
                }
            }
            if group_touched {
                touched.push(group.name.clone());
            }
        }
        touched
    }

    /// Zero the gradients of every managed parameter.
    pub fn zero_grads(&self) {
        for g in &self.groups {
            for (_, p) in &g.params {
                p.zero_grad();
            }
        }
    }

    /// Named view of the moment state for checkpointing, in group order.
    pub fn state_records(&self) -> Vec<(String, Vec<S>, Vec<S>)> {
        let mut out = Vec::new();
        for (gi, g) in self.groups.iter().enumerate() {
            for (pi, (name, _)) in g.params.iter().enumerate() {
                out.push((name.clone(), self.m[gi][pi].clone(), self.v[gi][pi].clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, name: &str, m: &[S], v: &[S]) -> bool {
        for (gi, g) in self.groups.iter().enumerate() {
            for (pi, (pname, _)) in g.params.iter().enumerate() {
                if pname == name && self.m[gi][pi].len() == m.len() {
                    self.m[gi][pi].copy_from_slice(m);
                    self.v[gi][pi].copy_from_slice(v);
                    return true;
                }
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor64;

    fn group(name: &str, t: &Tensor64) -> ParamGroup<f64> {
        ParamGroup {
            name: name.to_string(),
            params: vec![(format!("{name}.p"), t.clone())],
        }
    }

    #[test]
    fn cosine_decay_endpoints() {
        let opt: AdamW<f64> = AdamW::new(vec![], 1e-3, 0.0, 100);
        assert!((opt.lr_at(0) - 1e-3).abs() < 1e-15);
        assert!(opt.lr_at(100) < 1e-9);
        assert!((opt.lr_at(50) - 5e-4).abs() < 1e-12);
    }

    #[test]
    fn gradient_descends_a_quadratic() {
        let x = Tensor64::leaf(vec![3.0], &[1], true).unwrap();
        let mut opt = AdamW::new(vec![group("g", &x)], 0.1, 0.0, 10_000);
        for _ in 0..500 {
            let loss = x.mul(&x).unwrap();
            loss.backward().unwrap();
            opt.step();
            opt.zero_grads();
        }
        assert!(x.to_vec()[0].abs() < 0.05, "x = {}", x.to_vec()[0]);
    }

    #[test]
    fn zero_or_missing_gradient_leaves_param_untouched() {
        let a = Tensor64::leaf(vec![1.0], &[1], true).unwrap();
        let b = Tensor64::leaf(vec![2.0], &[1], true).unwrap();
        let mut opt = AdamW::new(vec![group("a", &a), group("b", &b)], 0.1, 0.01, 100);
        // only a participates in the loss
        let loss = a.mul(&a).unwrap();
        loss.backward().unwrap();
        let touched = opt.step();
        assert_eq!(touched, vec!["a".to_string()]);
        assert_eq!(b.to_vec(), vec![2.0]);
        assert_ne!(a.to_vec(), vec![1.0]);
    }

    #[test]
    fn groups_step_in_declared_order() {
        let a = Tensor64::leaf(vec![1.0], &[1], true).unwrap();
        let b = Tensor64::leaf(vec![1.0], &[1], true).unwrap();
        let mut opt = AdamW::new(vec![group("diagnostic", &a), group("semantic", &b)], 0.1, 0.0, 10);
        let loss = a.mul(&b).unwrap().sum();
        loss.backward().unwrap();
        let touched = opt.step();
        assert_eq!(touched, vec!["diagnostic".to_string(), "semantic".to_string()]);
    }
}
