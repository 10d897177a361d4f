//! Randomized probes of closed-form properties and explicit-loop oracles,
//! shared by the property tests and the acceptance report. Each probe
//! derives all of its draws from one seed.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trace_core::eval::{recall_at_k, RetrievalIndex};
use trace_core::losses::triplet_loss;
use trace_core::sft::{cross_modal_mask, gem_pool, self_attend, vl_pool, AttentionWeights, GemExponent};
use trace_core::vlc::residual_offset;
use trace_core::{Graph, Var};

fn draw(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn volume(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=8))
}

fn constant(g: &mut Graph, v: Vec<f64>, shape: &[usize]) -> Var {
    g.constant(v, shape.to_vec()).unwrap()
}

/// `|Σ M − 1|` for a random volume, text vector and temperature.
pub fn mask_sum_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = volume(&mut rng);
    let mut g = Graph::new();
    let v = constant(&mut g, draw(&mut rng, c * h * w, -3.0, 3.0), &[c, h, w]);
    let t = constant(&mut g, draw(&mut rng, c, -3.0, 3.0), &[c]);
    let m = cross_modal_mask(&mut g, v, t, rng.gen_range(0.1..20.0)).unwrap();
    (g.value(m).iter().sum::<f64>() - 1.0).abs()
}

/// Self-attention with γ = 0 returns its input bit for bit.
pub fn gamma_zero_is_identity(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = volume(&mut rng);
    let mut g = Graph::new();
    let x = draw(&mut rng, c * h * w, -2.0, 2.0);
    let v = constant(&mut g, x.clone(), &[c, h, w]);
    let mut mat = |g: &mut Graph, shape: &[usize]| {
        let n = shape.iter().product();
        constant(g, draw(&mut rng, n, -1.0, 1.0), shape)
    };
    let p = AttentionWeights {
        wq: mat(&mut g, &[c, c]),
        bq: mat(&mut g, &[c]),
        wk: mat(&mut g, &[c, c]),
        bk: mat(&mut g, &[c]),
        wv: mat(&mut g, &[c, c]),
        bv: mat(&mut g, &[c]),
        gamma: constant(&mut g, vec![0.0], &[1]),
    };
    let out = self_attend(&mut g, v, &p).unwrap();
    g.value(out) == x.as_slice()
}

/// `|‖f_com‖ − δ|` under residual offsetting.
pub fn offset_norm_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=64);
    let delta = rng.gen_range(0.1..10.0);
    let mut g = Graph::new();
    let a = constant(&mut g, draw(&mut rng, d, -2.0, 2.0), &[d]);
    let t = constant(&mut g, draw(&mut rng, d, -2.0, 2.0), &[d]);
    let dv = constant(&mut g, vec![delta], &[1]);
    let f = residual_offset(&mut g, a, t, dv).unwrap();
    (g.value(f).iter().map(|x| x * x).sum::<f64>().sqrt() - delta).abs()
}

/// `|L − ln 2|` when the positive and negative are equidistant.
pub fn triplet_tie_deviation(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(1..=16);
    let anchor = draw(&mut rng, d, -1.0, 1.0);
    let offset = draw(&mut rng, d, -1.0, 1.0);
    // The negative mirrors the positive through the anchor.
    let pos: Vec<f64> = anchor.iter().zip(&offset).map(|(a, o)| a + o).collect();
    let neg: Vec<f64> = anchor.iter().zip(&offset).map(|(a, o)| a - o).collect();
    let mut g = Graph::new();
    let (a, p, n) = (constant(&mut g, anchor, &[d]), constant(&mut g, pos, &[d]), constant(&mut g, neg, &[d]));
    let l = triplet_loss(&mut g, a, p, n).unwrap();
    (g.scalar(l) - std::f64::consts::LN_2).abs()
}

/// GeM with `p = 1` equals the per-channel arithmetic mean, bit for bit.
pub fn gem_p1_is_mean(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = volume(&mut rng);
    let x = draw(&mut rng, c * h * w, 0.01, 3.0);
    let mut g = Graph::new();
    let v = constant(&mut g, x.clone(), &[c, h, w]);
    let out = gem_pool(&mut g, v, GemExponent::Fixed(1.0)).unwrap();
    let n = h * w;
    let want: Vec<f64> = (0..c)
        .map(|ch| {
            let mut s = 0.0;
            for i in 0..n {
                s += x[ch * n + i];
            }
            s / n as f64
        })
        .collect();
    g.value(out) == want.as_slice()
}

/// Recall@n over a gallery holding every target.
pub fn full_gallery_recall(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(1..=64);
    let rows: Vec<(usize, Vec<f64>)> = (0..n).map(|i| (i, draw(&mut rng, 4, -1.0, 1.0))).collect();
    let idx = RetrievalIndex::build(rows).unwrap();
    let ranks: Vec<usize> = (0..50)
        .map(|_| idx.rank_of(&draw(&mut rng, 4, -1.0, 1.0), rng.gen_range(0..n)).unwrap())
        .collect();
    recall_at_k(&ranks, n).unwrap()
}

/// `S(c) = Σ_{h,w} M(h,w)·V̄(c,h,w)` against nested loops, bit for bit.
pub fn vl_pool_matches_loops(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = volume(&mut rng);
    let v = draw(&mut rng, c * h * w, -2.0, 2.0);
    let m = draw(&mut rng, h * w, 0.0, 1.0);
    let mut g = Graph::new();
    let vv = constant(&mut g, v.clone(), &[c, h, w]);
    let mv = constant(&mut g, m.clone(), &[h, w]);
    let out = vl_pool(&mut g, vv, mv).unwrap();
    let mut want = vec![0.0; c];
    for (ch, slot) in want.iter_mut().enumerate() {
        for y in 0..h {
            for x in 0..w {
                *slot += m[y * w + x] * v[(ch * h + y) * w + x];
            }
        }
    }
    g.value(out) == want.as_slice()
}

/// `W·x + b` against nested loops, bit for bit.
pub fn affine_matches_loops(seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k) = (rng.gen_range(1..=16), rng.gen_range(1..=16));
    let w = draw(&mut rng, m * k, -2.0, 2.0);
    let x = draw(&mut rng, k, -2.0, 2.0);
    let b = draw(&mut rng, m, -2.0, 2.0);
    let mut g = Graph::new();
    let (wv, xv, bv) = (constant(&mut g, w.clone(), &[m, k]), constant(&mut g, x.clone(), &[k]), constant(&mut g, b.clone(), &[m]));
    let y = g.affine(wv, xv, bv).unwrap();
    let mut want = vec![0.0; m];
    for i in 0..m {
        let mut s = 0.0;
        for j in 0..k {
            s += w[i * k + j] * x[j];
        }
        want[i] = s + b[i];
    }
    g.value(y) == want.as_slice()
}
