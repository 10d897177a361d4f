//! Triplet, adversarial and consistency objectives.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Binder, ParamStore};
use crate::tensor::{Graph, Var};

/// Discriminator outputs are clamped into `[PROB_EPS, 1 - PROB_EPS]` before logs.
pub const PROB_EPS: f64 = 1e-7;

pub const DISC_PREFIX: &str = "disc.";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub alpha_t: f64,
    pub alpha_i: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda1: 1.0,
            lambda2: 0.6,
            lambda3: 0.1,
            alpha_t: 1.0,
            alpha_i: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("loss.lambda1", self.lambda1),
            ("loss.lambda2", self.lambda2),
            ("loss.lambda3", self.lambda3),
            ("loss.alpha_t", self.alpha_t),
            ("loss.alpha_i", self.alpha_i),
        ];
        for (name, v) in all {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// `log(1 + exp(d⁺ − d⁻))` with Euclidean distances.
pub fn triplet_loss(g: &mut Graph, f_com: Var, pos: Var, neg: Var) -> Result<Var> {
    let d_pos = g.distance(f_com, pos)?;
    let d_neg = g.distance(f_com, neg)?;
    let gap = g.sub(d_pos, d_neg)?;
    Ok(g.softplus(gap))
}

/// Two-layer critic `C → C/2 → 1` with a sigmoid head.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct DiscWeights {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl Discriminator {
    pub fn hidden(&self) -> usize {
        (self.dim / 2).max(1)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let (d, h) = (self.dim, self.hidden());
        store.insert("disc.l1.weight", fan_in_uniform(rng, &[h, d], d));
        store.insert("disc.l1.bias", fan_in_uniform(rng, &[h], d));
        store.insert("disc.l2.weight", fan_in_uniform(rng, &[1, h], h));
        store.insert("disc.l2.bias", fan_in_uniform(rng, &[1], h));
    }

    /// Binds the critic either as trainable leaves or as constants.
    pub fn weights(&self, g: &mut Graph, b: &mut Binder<'_>, trainable: bool) -> Result<DiscWeights> {
        let mut get = |name: &str| if trainable { b.get(g, name) } else { b.constant(g, name) };
        Ok(DiscWeights {
            w1: get("disc.l1.weight")?,
            b1: get("disc.l1.bias")?,
            w2: get("disc.l2.weight")?,
            b2: get("disc.l2.bias")?,
        })
    }

    /// Clamped probability that `x` is a target embedding.
    pub fn prob(&self, g: &mut Graph, w: &DiscWeights, x: Var) -> Result<Var> {
        let h = g.affine(w.w1, x, w.b1)?;
        let h = g.relu(h);
        let logit = g.affine(w.w2, h, w.b2)?;
        let p = g.sigmoid(logit);
        Ok(g.clamp(p, PROB_EPS, 1.0 - PROB_EPS))
    }
}

fn mean_log(g: &mut Graph, disc: &Discriminator, w: &DiscWeights, xs: &[Var], flip: bool) -> Result<Var> {
    if xs.is_empty() {
        return Err(Error::Usage("discriminator loss needs a non-empty batch".into()));
    }
    let mut terms = Vec::with_capacity(xs.len());
    for &x in xs {
        let p = disc.prob(g, w, x)?;
        let p = if flip {
            let neg = g.scale(p, -1.0);
            g.add_scalar(neg, 1.0)
        } else {
            p
        };
        terms.push(g.log(p));
    }
    let stacked = g.concat(&terms)?;
    Ok(g.mean(stacked))
}

/// Critic objective `−E[log D(f_tgt)] − E[log(1 − D(f_com))]`. Callers pass
/// detached embeddings and trainable critic weights.
pub fn critic_loss(g: &mut Graph, disc: &Discriminator, w: &DiscWeights, f_tgt: &[Var], f_com: &[Var]) -> Result<Var> {
    let real = mean_log(g, disc, w, f_tgt, false)?;
    let fake = mean_log(g, disc, w, f_com, true)?;
    let s = g.add(real, fake)?;
    Ok(g.scale(s, -1.0))
}

/// Non-saturating generator objective `−E[log D(f_com)]`. Callers pass
/// constant critic weights.
pub fn generator_loss(g: &mut Graph, disc: &Discriminator, w: &DiscWeights, f_com: &[Var]) -> Result<Var> {
    let s = mean_log(g, disc, w, f_com, false)?;
    Ok(g.scale(s, -1.0))
}

/// Both adversarial objectives in one graph: the critic sees detached
/// embeddings, the generator sees a constant critic.
pub fn discriminator_loss(
    g: &mut Graph,
    disc: &Discriminator,
    b: &mut Binder<'_>,
    f_tgt: &[Var],
    f_com: &[Var],
) -> Result<(Var, Var)> {
    let train_w = disc.weights(g, b, true)?;
    let const_w = disc.weights(g, b, false)?;
    let tgt: Vec<Var> = f_tgt.iter().map(|&v| g.detach(v)).collect();
    let com: Vec<Var> = f_com.iter().map(|&v| g.detach(v)).collect();
    let loss_d = critic_loss(g, disc, &train_w, &tgt, &com)?;
    let loss_g = generator_loss(g, disc, &const_w, f_com)?;
    Ok((loss_d, loss_g))
}

/// Learnable projections of `f_com` back into image and text space.
#[derive(Clone, Debug)]
pub struct ConsistencyHeads {
    pub dim: usize,
}

impl ConsistencyHeads {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.dim;
        for head in ["img", "text"] {
            store.insert(format!("cons.{head}.weight"), fan_in_uniform(rng, &[d, d], d));
            store.insert(format!("cons.{head}.bias"), fan_in_uniform(rng, &[d], d));
        }
    }

    pub fn generate(&self, g: &mut Graph, b: &mut Binder<'_>, f_com: Var) -> Result<(Var, Var)> {
        let mut head = |name: &str| -> Result<Var> {
            let w = b.get(g, &format!("cons.{name}.weight"))?;
            let bias = b.get(g, &format!("cons.{name}.bias"))?;
            g.affine(w, f_com, bias)
        };
        let img = head("img")?;
        let text = head("text")?;
        Ok((img, text))
    }
}

/// `α_t‖f_gen^text − f_text‖ + α_i‖f_gen^img − f_tgt‖` on generated vectors.
pub fn consistency_terms(
    g: &mut Graph,
    gen_img: Var,
    gen_text: Var,
    f_text: Var,
    f_tgt: Var,
    alpha_t: f64,
    alpha_i: f64,
) -> Result<Var> {
    let dt = g.distance(gen_text, f_text)?;
    let di = g.distance(gen_img, f_tgt)?;
    let dt = g.scale(dt, alpha_t);
    let di = g.scale(di, alpha_i);
    g.add(dt, di)
}

pub fn consistency_loss(
    g: &mut Graph,
    heads: &ConsistencyHeads,
    b: &mut Binder<'_>,
    f_com: Var,
    f_text: Var,
    f_tgt: Var,
    weights: &LossWeights,
) -> Result<Var> {
    let (img, text) = heads.generate(g, b, f_com)?;
    consistency_terms(g, img, text, f_text, f_tgt, weights.alpha_t, weights.alpha_i)
}

/// `λ1·L_triplet + λ2·L_disc + λ3·L_cons`.
pub fn total_loss(g: &mut Graph, triplet: Var, disc: Var, cons: Var, w: &LossWeights) -> Result<Var> {
    let t = g.scale(triplet, w.lambda1);
    let d = g.scale(disc, w.lambda2);
    let c = g.scale(cons, w.lambda3);
    let td = g.add(t, d)?;
    g.add(td, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;

    fn triplet_at(dp: f64, dn: f64) -> f64 {
        let mut g = Graph::new();
        let a = g.constant(vec![0.0, 0.0], [2]).unwrap();
        let p = g.constant(vec![dp, 0.0], [2]).unwrap();
        let n = g.constant(vec![0.0, dn], [2]).unwrap();
        let l = triplet_loss(&mut g, a, p, n).unwrap();
        g.scalar(l)
    }

    #[test]
    fn triplet_values() {
        assert_abs_diff_eq!(triplet_at(1.5, 1.5), std::f64::consts::LN_2, epsilon = 1e-12);
        assert_abs_diff_eq!(triplet_at(0.0, 20.0), (-20.0f64).exp().ln_1p(), epsilon = 1e-18);
        assert_abs_diff_eq!(triplet_at(1.0, 0.5), 0.974_076_984_180_106_7, epsilon = 1e-12);
    }

    #[test]
    fn triplet_monotone() {
        for (dp, dn) in [(0.3, 0.9), (2.0, 1.0), (1.0, 1.0)] {
            let base = triplet_at(dp, dn);
            assert!(triplet_at(dp, dn + 0.01) < base);
            assert!(triplet_at(dp + 0.01, dn) > base);
            assert!(base >= 0.0);
        }
    }

    fn constant_disc(g: &mut Graph, logit: f64) -> (Discriminator, DiscWeights) {
        let disc = Discriminator { dim: 2 };
        let w = DiscWeights {
            w1: g.constant(vec![0.0; 2], [1, 2]).unwrap(),
            b1: g.constant(vec![0.0], [1]).unwrap(),
            w2: g.constant(vec![0.0], [1, 1]).unwrap(),
            b2: g.constant(vec![logit], [1]).unwrap(),
        };
        (disc, w)
    }

    #[test]
    fn half_critic_gives_two_ln2() {
        let mut g = Graph::new();
        let (disc, w) = constant_disc(&mut g, 0.0);
        let x = g.constant(vec![1.0, -1.0], [2]).unwrap();
        let l = critic_loss(&mut g, &disc, &w, &[x, x], &[x]).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn perfect_critic_hits_clamp() {
        // Route targets to +∞ logits and composed vectors to −∞ via the sign
        // of the first coordinate.
        let mut g = Graph::new();
        let disc = Discriminator { dim: 2 };
        let w = DiscWeights {
            w1: g.constant(vec![1.0, 0.0], [1, 2]).unwrap(),
            b1: g.constant(vec![0.0], [1]).unwrap(),
            w2: g.constant(vec![1e3], [1, 1]).unwrap(),
            b2: g.constant(vec![-500.0], [1]).unwrap(),
        };
        let tgt = g.constant(vec![10.0, 0.0], [2]).unwrap();
        let com = g.constant(vec![-10.0, 0.0], [2]).unwrap();
        let l = critic_loss(&mut g, &disc, &w, &[tgt], &[com]).unwrap();
        let expected = 2.0 * (1.0 / (1.0 - PROB_EPS)).ln();
        assert_abs_diff_eq!(g.scalar(l), expected, epsilon = 1e-12);
    }

    #[test]
    fn single_sample_bce() {
        let mut g = Graph::new();
        let (disc, w) = constant_disc(&mut g, 0.7);
        let x = g.constant(vec![0.2, 0.1], [2]).unwrap();
        let l = critic_loss(&mut g, &disc, &w, &[x], &[x]).unwrap();
        let p = 1.0 / (1.0 + (-0.7f64).exp());
        assert_abs_diff_eq!(g.scalar(l), -(p.ln()) - (1.0 - p).ln(), epsilon = 1e-12);
        let lg = generator_loss(&mut g, &disc, &w, &[x]).unwrap();
        assert_abs_diff_eq!(g.scalar(lg), -(p.ln()), epsilon = 1e-12);
    }

    #[test]
    fn split_gradients() {
        let disc = Discriminator { dim: 4 };
        let mut store = ParamStore::new();
        disc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let com = g.variable(vec![0.1, 0.2, -0.3, 0.4], [4]).unwrap();
        let tgt = g.variable(vec![0.5, -0.2, 0.3, 0.0], [4]).unwrap();
        let (ld, lg) = discriminator_loss(&mut g, &disc, &mut b, &[tgt], &[com]).unwrap();
        let gd = g.backward(ld).unwrap();
        assert!(gd.get(com).is_none() && gd.get(tgt).is_none());
        let w1 = b.bound().find(|(n, _)| *n == "disc.l1.weight").unwrap().1;
        assert!(gd.get(w1).is_some());
        let gg = g.backward(lg).unwrap();
        assert!(gg.get(com).is_some());
        assert!(gg.get(w1).is_none());
    }

    #[test]
    fn consistency_values() {
        let mut g = Graph::new();
        let v = g.constant(vec![0.5, 0.5], [2]).unwrap();
        let l = consistency_terms(&mut g, v, v, v, v, 1.0, 0.1).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let gen_text = g.constant(vec![3.0, 4.0], [2]).unwrap();
        let zero = g.constant(vec![0.0, 0.0], [2]).unwrap();
        let l = consistency_terms(&mut g, v, gen_text, zero, v, 1.0, 0.1).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 5.0, epsilon = 1e-12);
        let img = g.constant(vec![1.0, 2.0], [2]).unwrap();
        let a = consistency_terms(&mut g, img, v, v, zero, 1.0, 0.1).unwrap();
        let b = consistency_terms(&mut g, img, v, v, zero, 1.0, 0.2).unwrap();
        assert_abs_diff_eq!(2.0 * g.scalar(a), g.scalar(b), epsilon = 1e-12);
    }

    #[test]
    fn identity_heads_zero_loss() {
        let heads = ConsistencyHeads { dim: 3 };
        let mut store = ParamStore::new();
        heads.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        for name in ["img", "text"] {
            let w = store.get_mut(&format!("cons.{name}.weight")).unwrap();
            w.data_mut().fill(0.0);
            for i in 0..3 {
                w.data_mut()[i * 4] = 1.0;
            }
            store.get_mut(&format!("cons.{name}.bias")).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let v = g.constant(vec![0.25, -0.5, 0.75], [3]).unwrap();
        let l = consistency_loss(&mut g, &heads, &mut b, v, v, v, &LossWeights::default()).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn total_weighting() {
        let mut g = Graph::new();
        let one = g.scalar_constant(1.0);
        let two = g.scalar_constant(2.0);
        let three = g.scalar_constant(3.0);
        let t = total_loss(&mut g, one, one, one, &LossWeights::default()).unwrap();
        assert_abs_diff_eq!(g.scalar(t), 1.7, epsilon = 1e-12);
        let w = LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut g, two, three, three, &w).unwrap();
        assert_eq!(g.scalar(t), 2.0);
        let z = LossWeights {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut g, two, three, three, &z).unwrap();
        assert_eq!(g.scalar(t), 0.0);
        assert!(LossWeights { lambda1: -1.0, ..z }.validate().is_err());
    }
}
