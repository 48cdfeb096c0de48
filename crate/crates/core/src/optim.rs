//! Adam with bias correction over a flat parameter vector.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One Adam update of `params` in place.
pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &AdamConfig) {
    assert_eq!(params.len(), grad.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for k in 0..params.len() {
        let g = grad[k];
        state.m[k] = cfg.beta1 * state.m[k] + (1.0 - cfg.beta1) * g;
        state.v[k] = cfg.beta2 * state.v[k] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![0.3, -1.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &AdamConfig::with_lr(0.1));
        assert_eq!(p, vec![0.3, -1.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = g, v_hat = g^2  =>  step = lr * g / (|g| + eps)
        let mut p = vec![0.0];
        let mut s = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut s, &AdamConfig::with_lr(0.1));
        let expected = -0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = vec![1.0, 2.0, -3.0];
            let mut s = AdamState::new(3);
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + k as f64 * 0.01).collect();
                adam_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.05));
            }
            p
        };
        let a = run();
        assert_eq!(a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), run().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![5.0];
        let mut s = AdamState::new(1);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0)];
            adam_step(&mut p, &g, &mut s, &AdamConfig::with_lr(0.05));
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }
}
