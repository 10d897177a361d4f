//! Hierarchical feature aggregation.
//!
//! Each level vector is projected to the coarsest width, then the sequence
//! finest-to-coarsest is fused. The default fuser is an LSTM followed (on the
//! query side) by BatchNorm and an affine head; addition, concatenation and
//! Hadamard fusers are kept for ablations.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, trainable, Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorKind {
    Lstm,
    Add,
    Concat,
    Hadamard,
}

impl AggregatorKind {
    pub const ALL: [AggregatorKind; 4] = [Self::Add, Self::Concat, Self::Hadamard, Self::Lstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lstm => "lstm",
            Self::Add => "add",
            Self::Concat => "concat",
            Self::Hadamard => "hadamard",
        }
    }
}

impl fmt::Display for AggregatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Usage(format!("unknown hfa.kind `{s}` (lstm, add, concat, hadamard)")))
    }
}

/// Whether BatchNorm uses batch statistics (and reports them) or running ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Batch statistics observed in a training forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HierarchicalAggregation {
    pub channels: Vec<usize>,
    pub kind: AggregatorKind,
    /// Also apply BatchNorm and the affine head to the target path.
    pub symmetric_heads: bool,
}

const LSTM_GATES: [&str; 4] = ["i", "f", "g", "o"];

impl HierarchicalAggregation {
    fn width(&self) -> usize {
        *self.channels.last().expect("non-empty pyramid")
    }

    fn uses_norm_head(&self) -> bool {
        self.kind == AggregatorKind::Lstm
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let d = self.width();
        for (l, &c) in self.channels.iter().enumerate() {
            store.insert(format!("hfa.proj{}.weight", l + 1), fan_in_uniform(rng, &[d, c], c));
            store.insert(format!("hfa.proj{}.bias", l + 1), fan_in_uniform(rng, &[d], c));
        }
        match self.kind {
            AggregatorKind::Lstm => {
                for gate in LSTM_GATES {
                    store.insert(format!("hfa.lstm.w_i{gate}"), fan_in_uniform(rng, &[d, d], d));
                    store.insert(format!("hfa.lstm.w_h{gate}"), fan_in_uniform(rng, &[d, d], d));
                    let mut bias = fan_in_uniform(rng, &[d], d);
                    if gate == "f" {
                        bias.data_mut().fill(1.0);
                    }
                    store.insert(format!("hfa.lstm.b_{gate}"), bias);
                }
                store.insert("hfa.bn.weight", trainable(Tensor::full([d], 1.0).expect("d > 0")));
                store.insert("hfa.bn.bias", trainable(Tensor::zeros([d]).expect("d > 0")));
                store.insert("hfa.bn.running_mean", Tensor::zeros([d]).expect("d > 0"));
                store.insert("hfa.bn.running_var", Tensor::full([d], 1.0).expect("d > 0"));
                store.insert("hfa.out.weight", fan_in_uniform(rng, &[d, d], d));
                store.insert("hfa.out.bias", fan_in_uniform(rng, &[d], d));
            }
            AggregatorKind::Concat => {
                let l = self.channels.len();
                store.insert("hfa.concat.weight", fan_in_uniform(rng, &[d, d * l], d * l));
                store.insert("hfa.concat.bias", fan_in_uniform(rng, &[d], d * l));
            }
            AggregatorKind::Add | AggregatorKind::Hadamard => {}
        }
    }

    /// `G^ℓ = Ω^ℓ(O^ℓ)`.
    pub fn project_level(&self, g: &mut Graph, b: &mut Binder<'_>, level_vec: Var, level: usize) -> Result<Var> {
        let w = b.get(g, &format!("hfa.proj{}.weight", level + 1))?;
        let bias = b.get(g, &format!("hfa.proj{}.bias", level + 1))?;
        g.affine(w, level_vec, bias)
    }

    fn project_all(&self, g: &mut Graph, b: &mut Binder<'_>, levels: &[Var]) -> Result<Vec<Var>> {
        if levels.len() != self.channels.len() {
            return Err(Error::Usage(format!(
                "aggregation expects {} levels, got {}",
                self.channels.len(),
                levels.len()
            )));
        }
        levels
            .iter()
            .enumerate()
            .map(|(l, &v)| self.project_level(g, b, v, l))
            .collect()
    }

    /// Final hidden state of the LSTM run over `seq` from zero state.
    pub fn lstm(&self, g: &mut Graph, b: &mut Binder<'_>, seq: &[Var]) -> Result<Var> {
        let d = self.width();
        let mut h = g.constant(vec![0.0; d], [d])?;
        let mut c = g.constant(vec![0.0; d], [d])?;
        for &x in seq {
            let mut gates = Vec::with_capacity(4);
            for gate in LSTM_GATES {
                let wi = b.get(g, &format!("hfa.lstm.w_i{gate}"))?;
                let wh = b.get(g, &format!("hfa.lstm.w_h{gate}"))?;
                let bias = b.get(g, &format!("hfa.lstm.b_{gate}"))?;
                let xi = g.affine(wi, x, bias)?;
                let hh = g.matvec(wh, h)?;
                let pre = g.add(xi, hh)?;
                gates.push(if gate == "g" { g.tanh(pre) } else { g.sigmoid(pre) });
            }
            let (i, f, cand, o) = (gates[0], gates[1], gates[2], gates[3]);
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c);
            h = g.mul(o, tc)?;
        }
        Ok(h)
    }

    /// Fuses already-projected level vectors with the configured operator
    /// (no normalisation head).
    pub fn fuse(&self, g: &mut Graph, b: &mut Binder<'_>, projected: &[Var]) -> Result<Var> {
        let d = self.width();
        if projected.is_empty() || projected.iter().any(|&v| g.shape(v) != [d]) {
            return Err(Error::Usage(format!(
                "aggregation expects {} vectors of width {d}",
                self.channels.len()
            )));
        }
        match self.kind {
            AggregatorKind::Lstm => self.lstm(g, b, projected),
            AggregatorKind::Add => projected[1..].iter().try_fold(projected[0], |acc, &v| g.add(acc, v)),
            AggregatorKind::Hadamard => projected[1..].iter().try_fold(projected[0], |acc, &v| g.mul(acc, v)),
            AggregatorKind::Concat => {
                let cat = g.concat(projected)?;
                let w = b.get(g, "hfa.concat.weight")?;
                let bias = b.get(g, "hfa.concat.bias")?;
                g.affine(w, cat, bias)
            }
        }
    }

    /// BatchNorm + affine head over a batch of fused vectors.
    fn norm_head(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        hidden: &[Var],
        mode: NormMode,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        let d = self.width();
        let stacked = g.stack(hidden)?;
        let batch = hidden.len();
        let (normed, stats) = if mode == NormMode::Train && batch >= 2 {
            let stats = {
                let (mean, var) = crate::tensor::column_stats(g.value(stacked), batch, d);
                BatchStats { mean, var }
            };
            (g.batch_norm(stacked, BN_EPS)?, Some(stats))
        } else {
            let rm = b.store().get("hfa.bn.running_mean")?.to_f64();
            let rv = b.store().get("hfa.bn.running_var")?.to_f64();
            let neg_mean = g.constant(rm.iter().map(|m| -m).collect(), [d])?;
            let inv_std = g.constant(rv.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect(), [d])?;
            let centered = g.add_rows(stacked, neg_mean)?;
            (g.mul_rows(centered, inv_std)?, None)
        };
        let scale = b.get(g, "hfa.bn.weight")?;
        let shift = b.get(g, "hfa.bn.bias")?;
        let scaled = g.mul_rows(normed, scale)?;
        let shifted = g.add_rows(scaled, shift)?;
        let w = b.get(g, "hfa.out.weight")?;
        let bias = b.get(g, "hfa.out.bias")?;
        let out = (0..batch)
            .map(|i| {
                let row = g.row(shifted, i)?;
                g.affine(w, row, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((out, stats))
    }

    /// `f_agg` for every query in a batch. BatchNorm couples the batch; a
    /// batch of one falls back to running statistics.
    pub fn aggregate_query(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        batch: &[Vec<Var>],
        mode: NormMode,
    ) -> Result<(Vec<Var>, Option<BatchStats>)> {
        let fused = batch
            .iter()
            .map(|levels| {
                let projected = self.project_all(g, b, levels)?;
                self.fuse(g, b, &projected)
            })
            .collect::<Result<Vec<_>>>()?;
        if self.uses_norm_head() {
            self.norm_head(g, b, &fused, mode)
        } else {
            Ok((fused, None))
        }
    }

    /// `f_tgt` for every target in a batch: the fused vector itself, or with
    /// the query-side head when `symmetric_heads` is set (running statistics
    /// are only ever updated from the query side).
    pub fn aggregate_target(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        batch: &[Vec<Var>],
        mode: NormMode,
    ) -> Result<Vec<Var>> {
        let fused = batch
            .iter()
            .map(|levels| {
                let projected = self.project_all(g, b, levels)?;
                self.fuse(g, b, &projected)
            })
            .collect::<Result<Vec<_>>>()?;
        if self.symmetric_heads && self.uses_norm_head() {
            Ok(self.norm_head(g, b, &fused, mode)?.0)
        } else {
            Ok(fused)
        }
    }

    /// Exponential moving update of the running statistics.
    pub fn update_running_stats(&self, store: &mut ParamStore, stats: &BatchStats) -> Result<()> {
        for (name, batch) in [("hfa.bn.running_mean", &stats.mean), ("hfa.bn.running_var", &stats.var)] {
            let t = store.get_mut(name)?;
            for (r, s) in t.data_mut().iter_mut().zip(batch) {
                *r = ((1.0 - BN_MOMENTUM) * *r as f64 + BN_MOMENTUM * s) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn agg(kind: AggregatorKind) -> (HierarchicalAggregation, ParamStore) {
        let h = HierarchicalAggregation {
            channels: vec![2, 3, 4],
            kind,
            symmetric_heads: false,
        };
        let mut store = ParamStore::new();
        h.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(11));
        (h, store)
    }

    fn fuse_values(kind: AggregatorKind, vecs: &[Vec<f64>]) -> Vec<f64> {
        let h = HierarchicalAggregation {
            channels: vec![1, vecs[0].len()],
            kind,
            symmetric_heads: false,
        };
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let vars: Vec<Var> = vecs.iter().map(|v| g.constant(v.clone(), [v.len()]).unwrap()).collect();
        let out = h.fuse(&mut g, &mut b, &vars).unwrap();
        g.value(out).to_vec()
    }

    #[test]
    fn add_and_hadamard() {
        let v = vec![vec![1.0, 2.0], vec![3.0, 4.0]];
        assert_eq!(fuse_values(AggregatorKind::Add, &v), vec![4.0, 6.0]);
        assert_eq!(fuse_values(AggregatorKind::Hadamard, &v), vec![3.0, 8.0]);
    }

    #[test]
    fn zero_lstm_gives_zero_hidden() {
        let (h, mut store) = agg(AggregatorKind::Lstm);
        for (name, t) in store.iter_mut() {
            if name.starts_with("hfa.lstm") {
                t.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let x1 = g.constant(vec![0.5, -1.0, 2.0, 0.1], [4]).unwrap();
        let x2 = g.constant(vec![1.5, 1.0, -2.0, 0.3], [4]).unwrap();
        let out = h.lstm(&mut g, &mut b, &[x1, x2]).unwrap();
        assert_eq!(g.value(out), &[0.0; 4]);
        let levels = vec![
            g.constant(vec![1.0, 2.0], [2]).unwrap(),
            g.constant(vec![1.0, 2.0, 3.0], [3]).unwrap(),
            g.constant(vec![1.0, 2.0, 3.0, 4.0], [4]).unwrap(),
        ];
        let tgt = h.aggregate_target(&mut g, &mut b, &[levels], NormMode::Eval).unwrap();
        assert_eq!(g.value(tgt[0]), &[0.0; 4]);
    }

    #[test]
    fn hand_unrolled_two_steps() {
        let (h, store) = agg(AggregatorKind::Lstm);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let xs = [vec![0.3, -0.2, 0.5, 0.1], vec![-0.4, 0.6, 0.2, -0.3]];
        let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone(), [4]).unwrap()).collect();
        let out = h.lstm(&mut g, &mut b, &vars).unwrap();

        let p = |n: &str| store.get(n).unwrap().to_f64();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let (mut hs, mut cs) = (vec![0.0; 4], vec![0.0; 4]);
        for x in &xs {
            let pre = |gate: &str, r: usize| {
                let wi = p(&format!("hfa.lstm.w_i{gate}"));
                let wh = p(&format!("hfa.lstm.w_h{gate}"));
                let bias = p(&format!("hfa.lstm.b_{gate}"))[r];
                (0..4).map(|k| wi[r * 4 + k] * x[k] + wh[r * 4 + k] * hs[k]).sum::<f64>() + bias
            };
            let mut nh = vec![0.0; 4];
            let mut nc = vec![0.0; 4];
            for r in 0..4 {
                let (i, f, c, o) = (sig(pre("i", r)), sig(pre("f", r)), pre("g", r).tanh(), sig(pre("o", r)));
                nc[r] = f * cs[r] + i * c;
                nh[r] = o * nc[r].tanh();
            }
            hs = nh;
            cs = nc;
        }
        for (got, want) in g.value(out).iter().zip(&hs) {
            assert_abs_diff_eq!(*got, *want, epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_matches_loop() {
        let (h, store) = agg(AggregatorKind::Add);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let x = vec![0.7, -1.1, 0.4];
        let xv = g.constant(x.clone(), [3]).unwrap();
        let out = h.project_level(&mut g, &mut b, xv, 1).unwrap();
        let w = store.get("hfa.proj2.weight").unwrap().to_f64();
        let bias = store.get("hfa.proj2.bias").unwrap().to_f64();
        for r in 0..4 {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += w[r * 3 + c] * x[c];
            }
            assert_eq!(g.value(out)[r], acc + bias[r]);
        }
    }

    #[test]
    fn identity_projection_at_top_level_and_zero_input() {
        let (h, mut store) = agg(AggregatorKind::Add);
        let w = store.get_mut("hfa.proj3.weight").unwrap();
        w.data_mut().fill(0.0);
        for i in 0..4 {
            w.data_mut()[i * 4 + i] = 1.0;
        }
        store.get_mut("hfa.proj3.bias").unwrap().data_mut().fill(0.0);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let x = g.constant(vec![0.1, 0.2, 0.3, 0.4], [4]).unwrap();
        let out = h.project_level(&mut g, &mut b, x, 2).unwrap();
        assert_eq!(g.value(out), g.value(x));
        let z = g.constant(vec![0.0; 4], [4]).unwrap();
        let out = h.project_level(&mut g, &mut b, z, 2).unwrap();
        assert_eq!(g.value(out), &[0.0; 4]);
    }

    #[test]
    fn order_sensitivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vecs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let rev: Vec<Vec<f64>> = vecs.iter().rev().cloned().collect();
        for kind in [AggregatorKind::Add, AggregatorKind::Hadamard] {
            let a = fuse_values(kind, &vecs);
            let b = fuse_values(kind, &rev);
            for (x, y) in a.iter().zip(&b) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        let (h, store) = agg(AggregatorKind::Lstm);
        let run = |vs: &[Vec<f64>]| {
            let mut g = Graph::new();
            let mut b = Binder::new(&store);
            let vars: Vec<Var> = vs.iter().map(|v| g.constant(v.clone(), [4]).unwrap()).collect();
            let out = h.lstm(&mut g, &mut b, &vars).unwrap();
            g.value(out).to_vec()
        };
        assert_ne!(run(&vecs), run(&rev));
    }

    #[test]
    fn batch_norm_train_and_eval() {
        let (h, store) = agg(AggregatorKind::Lstm);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let mut b = Binder::new(&store);
        let batch: Vec<Var> = (0..10)
            .map(|_| g.constant((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(), [4]).unwrap())
            .collect();
        let (_, stats) = h.norm_head(&mut g, &mut b, &batch, NormMode::Train).unwrap();
        assert!(stats.is_some());
        let stacked = g.stack(&batch).unwrap();
        let normed = g.batch_norm(stacked, BN_EPS).unwrap();
        let (mean, var) = crate::tensor::column_stats(g.value(normed), 10, 4);
        for c in 0..4 {
            assert_abs_diff_eq!(mean[c], 0.0, epsilon = 1e-4);
            assert_abs_diff_eq!(var[c], 1.0, epsilon = 1e-4);
        }
        let (a, s1) = h.norm_head(&mut g, &mut b, &batch, NormMode::Eval).unwrap();
        let (c, _) = h.norm_head(&mut g, &mut b, &batch, NormMode::Eval).unwrap();
        assert!(s1.is_none());
        assert_eq!(g.value(a[3]), g.value(c[3]));
        // A batch of one silently uses running statistics.
        let (_, s) = h.norm_head(&mut g, &mut b, &batch[..1], NormMode::Train).unwrap();
        assert!(s.is_none());
    }

    #[test]
    fn kind_parsing() {
        for k in AggregatorKind::ALL {
            assert_eq!(k.as_str().parse::<AggregatorKind>().unwrap(), k);
        }
        assert!("mean".parse::<AggregatorKind>().is_err());
    }
}
