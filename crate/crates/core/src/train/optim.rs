//! Adam and plain SGD over named parameters.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Clone, Debug, Default)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

/// Adam with bias correction. Moments are kept per parameter and only
/// advance on steps where that parameter received a gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    state: HashMap<String, Moments>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            state: HashMap::new(),
        }
    }

    /// One update of `p` in place from gradient `g`.
    pub fn update(&mut self, name: &str, p: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
        if p.len() != g.len() {
            return Err(Error::dim("adam_step", &[p.len()], &[g.len()]));
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: vec![0.0; p.len()],
            v: vec![0.0; p.len()],
            t: 0,
        });
        st.t += 1;
        let bc1 = 1.0 - self.beta1.powi(st.t as i32);
        let bc2 = 1.0 - self.beta2.powi(st.t as i32);
        for i in 0..p.len() {
            st.m[i] = self.beta1 * st.m[i] + (1.0 - self.beta1) * g[i];
            st.v[i] = self.beta2 * st.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let m_hat = st.m[i] / bc1;
            let v_hat = st.v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Steps every trainable parameter accepted by `select` that holds a gradient.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, select: impl Fn(&str) -> bool) -> Result<()> {
        for (name, t) in store.iter_mut() {
            if !t.requires_grad() || !select(name) {
                continue;
            }
            let Some(grad) = t.grad().map(|g| g.iter().map(|&v| v as f64).collect::<Vec<_>>()) else {
                continue;
            };
            let mut p = t.to_f64();
            self.update(name, &mut p, &grad, lr)?;
            for (dst, src) in t.data_mut().iter_mut().zip(&p) {
                *dst = *src as f32;
            }
        }
        Ok(())
    }

    /// First and second moments for `name`, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.state.get(name).map(|s| (s.m.as_slice(), s.v.as_slice()))
    }
}

/// `p ← p − lr·g`.
pub fn sgd_update(p: &mut [f64], g: &[f64], lr: f64) -> Result<()> {
    if p.len() != g.len() {
        return Err(Error::dim("sgd_step", &[p.len()], &[g.len()]));
    }
    p.iter_mut().zip(g).for_each(|(p, g)| *p -= lr * g);
    Ok(())
}

pub fn sgd_step(store: &mut ParamStore, lr: f64, select: impl Fn(&str) -> bool) -> Result<()> {
    for (name, t) in store.iter_mut() {
        if !t.requires_grad() || !select(name) {
            continue;
        }
        let Some(grad) = t.grad().map(|g| g.iter().map(|&v| v as f64).collect::<Vec<_>>()) else {
            continue;
        };
        let mut p = t.to_f64();
        sgd_update(&mut p, &grad, lr)?;
        for (dst, src) in t.data_mut().iter_mut().zip(&p) {
            *dst = *src as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn zero_gradient_from_fresh_state_is_noop() {
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = vec![1.5, -2.0];
        adam.update("w", &mut p, &[0.0, 0.0], 1e-3).unwrap();
        assert_eq!(p, vec![1.5, -2.0]);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        adam.update("w", &mut p, &[2.0], 1e-3).unwrap();
        let (m0, v0) = adam.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        adam.update("w", &mut p, &[0.0], 1e-3).unwrap();
        let (m1, v1) = adam.moments("w").map(|(m, v)| (m[0], v[0])).unwrap();
        assert_abs_diff_eq!(m1, 0.9 * m0, epsilon = 1e-15);
        assert_abs_diff_eq!(v1, 0.999 * v0, epsilon = 1e-15);
    }

    #[test]
    fn first_step_on_square() {
        // f(x) = x², x = 1, g = 2: m̂ = 2, v̂ = 4, step = lr·2/(2 + ε).
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = vec![1.0];
        adam.update("x", &mut p, &[2.0], 0.1).unwrap();
        assert_abs_diff_eq!(p[0], 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), epsilon = 1e-15);
    }

    #[test]
    fn second_identical_gradient() {
        // With g constant, m̂ = g and v̂ = g² at every step, so each step is
        // lr·g/(|g| + ε): slightly below lr, never the naive lr·g.
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = vec![0.0];
        adam.update("x", &mut p, &[5.0], 0.01).unwrap();
        let first = -p[0];
        adam.update("x", &mut p, &[5.0], 0.01).unwrap();
        let second = -p[0] - first;
        assert_abs_diff_eq!(second, 0.01 * 5.0 / (5.0 + 1e-8), epsilon = 1e-12);
        assert!(second < 0.01 * 5.0);
    }

    #[test]
    fn sgd_matches_loop() {
        let mut p = vec![1.0, 2.0, 3.0];
        sgd_update(&mut p, &[0.5, -1.0, 0.0], 0.0).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        sgd_update(&mut p, &[0.5, -1.0, 0.0], 0.1).unwrap();
        let expected: Vec<f64> = [1.0, 2.0, 3.0].iter().zip([0.5, -1.0, 0.0]).map(|(p, g)| p - 0.1 * g).collect();
        assert_eq!(p, expected);
        assert!(sgd_update(&mut p, &[1.0], 0.1).is_err());
    }
}
