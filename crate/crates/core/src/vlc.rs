//! Visual-linguistic composition of the aggregated image vector with the
//! sentence vector.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, trainable, Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const DELTA_INIT: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompositionKind {
    ResidualOffset,
    Concat,
    ResidualGating,
    Hadamard,
}

impl CompositionKind {
    pub const ALL: [CompositionKind; 4] = [Self::Concat, Self::ResidualGating, Self::Hadamard, Self::ResidualOffset];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::ResidualOffset => "residual_offset",
            Self::Concat => "concat",
            Self::ResidualGating => "residual_gating",
            Self::Hadamard => "hadamard",
        }
    }
}

impl fmt::Display for CompositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompositionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == s).ok_or_else(|| {
            Error::Usage(format!(
                "unknown vlc.kind `{s}` (residual_offset, concat, residual_gating, hadamard)"
            ))
        })
    }
}

#[derive(Clone, Debug)]
pub struct Composition {
    pub kind: CompositionKind,
    pub sent_dim: usize,
    pub dim: usize,
    /// L2-normalise index-side embeddings.
    pub normalize_target: bool,
}

impl Composition {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (d, s) = (self.dim, self.sent_dim);
        store.insert("vlc.text.weight", fan_in_uniform(rng, &[d, s], s));
        store.insert("vlc.text.bias", fan_in_uniform(rng, &[d], s));
        store.insert("vlc.log_delta", trainable(Tensor::scalar(DELTA_INIT.ln() as f32)));
        match self.kind {
            CompositionKind::Concat => {
                store.insert("vlc.concat.weight", fan_in_uniform(rng, &[d, 2 * d], 2 * d));
                store.insert("vlc.concat.bias", fan_in_uniform(rng, &[d], 2 * d));
            }
            CompositionKind::ResidualGating => {
                for part in ["gate", "res"] {
                    store.insert(format!("vlc.{part}.weight"), fan_in_uniform(rng, &[d, 2 * d], 2 * d));
                    store.insert(format!("vlc.{part}.bias"), fan_in_uniform(rng, &[d], 2 * d));
                }
            }
            CompositionKind::ResidualOffset | CompositionKind::Hadamard => {}
        }
    }

    /// `f_text = Ω_g(F_sent)`.
    pub fn project_text(&self, g: &mut Graph, b: &mut Binder<'_>, sentence: Var) -> Result<Var> {
        let w = b.get(g, "vlc.text.weight")?;
        let bias = b.get(g, "vlc.text.bias")?;
        g.affine(w, sentence, bias)
    }

    pub fn delta(&self, g: &mut Graph, b: &mut Binder<'_>) -> Result<Var> {
        let log_delta = b.get(g, "vlc.log_delta")?;
        Ok(g.exp(log_delta))
    }

    pub fn compose(&self, g: &mut Graph, b: &mut Binder<'_>, f_agg: Var, f_text: Var) -> Result<Var> {
        match self.kind {
            CompositionKind::ResidualOffset => {
                let delta = self.delta(g, b)?;
                residual_offset(g, f_agg, f_text, delta)
            }
            CompositionKind::Hadamard => g.mul(f_agg, f_text),
            CompositionKind::Concat => {
                let cat = g.concat(&[f_agg, f_text])?;
                let w = b.get(g, "vlc.concat.weight")?;
                let bias = b.get(g, "vlc.concat.bias")?;
                g.affine(w, cat, bias)
            }
            CompositionKind::ResidualGating => {
                let cat = g.concat(&[f_agg, f_text])?;
                let wg = b.get(g, "vlc.gate.weight")?;
                let bg = b.get(g, "vlc.gate.bias")?;
                let wr = b.get(g, "vlc.res.weight")?;
                let br = b.get(g, "vlc.res.bias")?;
                let gate_pre = g.affine(wg, cat, bg)?;
                let gate = g.sigmoid(gate_pre);
                let gated = g.mul(gate, f_agg)?;
                let res = g.affine(wr, cat, br)?;
                g.add(gated, res)
            }
        }
    }

    /// Index-side embedding: identity, or unit direction when configured.
    pub fn compose_target(&self, g: &mut Graph, f_tgt: Var) -> Result<Var> {
        if self.normalize_target {
            g.normalize(f_tgt)
        } else {
            Ok(f_tgt)
        }
    }
}

/// `δ · (f_agg + f_text) / ‖f_agg + f_text‖`.
pub fn residual_offset(g: &mut Graph, f_agg: Var, f_text: Var, delta: Var) -> Result<Var> {
    let sum = g.add(f_agg, f_text)?;
    let unit = g.normalize(sum)?;
    g.mul_scalar(unit, delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn offset(a: &[f64], t: &[f64], delta: f64) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let a = g.constant(a.to_vec(), [a.len()])?;
        let t = g.constant(t.to_vec(), [t.len()])?;
        let d = g.scalar_constant(delta);
        let out = residual_offset(&mut g, a, t, d)?;
        Ok(g.value(out).to_vec())
    }

    #[test]
    fn three_four_five() {
        let out = offset(&[3.0, 0.0], &[0.0, 4.0], 2.0).unwrap();
        assert_abs_diff_eq!(out[0], 1.2, epsilon = 1e-12);
        assert_abs_diff_eq!(out[1], 1.6, epsilon = 1e-12);
    }

    #[test]
    fn zero_text_is_scaled_direction() {
        let out = offset(&[1.0, 2.0, 2.0], &[0.0; 3], 4.0).unwrap();
        for (o, e) in out.iter().zip([4.0 / 3.0, 8.0 / 3.0, 8.0 / 3.0]) {
            assert_abs_diff_eq!(*o, e, epsilon = 1e-12);
        }
    }

    #[test]
    fn norm_equals_delta_and_scale_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let a: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let t: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let delta = rng.gen_range(0.1..10.0);
            let out = offset(&a, &t, delta).unwrap();
            let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - delta).abs() <= 1e-5);
            let a2: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
            let t2: Vec<f64> = t.iter().map(|v| 2.0 * v).collect();
            let out2 = offset(&a2, &t2, delta).unwrap();
            for (x, y) in out.iter().zip(&out2) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_sum_is_error() {
        assert!(matches!(offset(&[1.0, -1.0], &[-1.0, 1.0], 1.0), Err(Error::Degenerate(_))));
    }

    fn composition(kind: CompositionKind) -> (Composition, ParamStore) {
        let c = Composition {
            kind,
            sent_dim: 3,
            dim: 4,
            normalize_target: false,
        };
        let mut store = ParamStore::new();
        c.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        (c, store)
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let (c, store) = composition(CompositionKind::Hadamard);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let a = g.constant(vec![0.5, -1.0, 2.0, 3.0], [4]).unwrap();
        let ones = g.constant(vec![1.0; 4], [4]).unwrap();
        let out = c.compose(&mut g, &mut b, a, ones).unwrap();
        assert_eq!(g.value(out), g.value(a));
    }

    #[test]
    fn project_text_matches_loop_and_zero_case() {
        let (c, mut store) = composition(CompositionKind::ResidualOffset);
        let x = vec![0.3, -0.8, 1.2];
        let w = store.get("vlc.text.weight").unwrap().to_f64();
        let bias = store.get("vlc.text.bias").unwrap().to_f64();
        {
            let mut g = Graph::new();
            let mut b = Binder::new(&store);
            let xv = g.constant(x.clone(), [3]).unwrap();
            let out = c.project_text(&mut g, &mut b, xv).unwrap();
            for r in 0..4 {
                let mut acc = 0.0;
                for k in 0..3 {
                    acc += w[r * 3 + k] * x[k];
                }
                assert_eq!(g.value(out)[r], acc + bias[r]);
            }
        }
        store.get_mut("vlc.text.bias").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let z = g.constant(vec![0.0; 3], [3]).unwrap();
        let out = c.project_text(&mut g, &mut b, z).unwrap();
        assert_eq!(g.value(out), &[0.0; 4]);
    }

    #[test]
    fn identity_text_projection_passes_through() {
        let mut c = composition(CompositionKind::ResidualOffset).0;
        c.sent_dim = 4;
        let mut store = ParamStore::new();
        c.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let w = store.get_mut("vlc.text.weight").unwrap();
        w.data_mut().fill(0.0);
        for i in 0..4 {
            w.data_mut()[i * 5] = 1.0;
        }
        store.get_mut("vlc.text.bias").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let x = g.constant(vec![0.1, 0.2, 0.3, 0.4], [4]).unwrap();
        let out = c.project_text(&mut g, &mut b, x).unwrap();
        assert_eq!(g.value(out), g.value(x));
    }

    #[test]
    fn delta_starts_at_init() {
        let (c, store) = composition(CompositionKind::ResidualOffset);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let d = c.delta(&mut g, &mut b).unwrap();
        assert_abs_diff_eq!(g.scalar(d), DELTA_INIT, epsilon = 1e-6);
    }

    #[test]
    fn compose_target_modes() {
        let (mut c, _) = composition(CompositionKind::ResidualOffset);
        let mut g = Graph::new();
        let t = g.constant(vec![3.0, 4.0, 0.0, 0.0], [4]).unwrap();
        let raw = c.compose_target(&mut g, t).unwrap();
        assert_eq!(g.value(raw), g.value(t));
        c.normalize_target = true;
        let unit = c.compose_target(&mut g, t).unwrap();
        for (u, e) in g.value(unit).iter().zip([0.6, 0.8, 0.0, 0.0]) {
            assert_abs_diff_eq!(*u, e, epsilon = 1e-15);
        }
        let ratio: Vec<f64> = g
            .value(raw)
            .iter()
            .zip(g.value(unit))
            .filter(|(_, u)| **u != 0.0)
            .map(|(r, u)| r / u)
            .collect();
        assert!(ratio.iter().all(|r| (r - 5.0).abs() < 1e-12));
    }

    #[test]
    fn other_kinds_produce_width() {
        for kind in [CompositionKind::Concat, CompositionKind::ResidualGating] {
            let (c, store) = composition(kind);
            let mut g = Graph::new();
            let mut b = Binder::new(&store);
            let a = g.constant(vec![0.5, -1.0, 2.0, 3.0], [4]).unwrap();
            let t = g.constant(vec![0.1, 0.2, 0.3, 0.4], [4]).unwrap();
            let out = c.compose(&mut g, &mut b, a, t).unwrap();
            assert_eq!(g.shape(out), [4]);
        }
        for k in CompositionKind::ALL {
            assert_eq!(k.as_str().parse::<CompositionKind>().unwrap(), k);
        }
    }
}
