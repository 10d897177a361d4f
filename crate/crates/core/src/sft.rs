//! Per-level semantic feature transformation: positional self-attention over
//! the spatial sites of a feature volume, a text-derived softmax mask used as
//! a pooling kernel, and generalized-mean pooling.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, trainable, Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Floor applied before the GeM power; doubles as the ReLU on raw activations.
pub const GEM_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    /// Softmax temperature of the cross-modal mask.
    pub temperature: f64,
    pub gem_p: f64,
    pub learn_p: bool,
    pub gamma_init: f32,
    pub beta_init: f32,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig {
            temperature: 8.0,
            gem_p: 3.0,
            learn_p: false,
            gamma_init: 0.0,
            beta_init: 0.1,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Parameter(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.gem_p >= 1.0) {
            return Err(Error::Parameter(format!("GeM exponent must be >= 1, got {}", self.gem_p)));
        }
        Ok(())
    }
}

/// GeM exponent: a fixed value or a single-element graph node.
#[derive(Clone, Copy, Debug)]
pub enum GemExponent {
    Fixed(f64),
    Learned(Var),
}

/// Graph handles of one level's attention weights.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub gamma: Var,
}

fn volume_dims(g: &Graph, v: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match g.shape(v) {
        &[c, h, w] => Ok((c, h, w)),
        other => Err(Error::dim(op, other, &[0, 0, 0])),
    }
}

/// `Θ · V + b` applied at every site of a `[C, N]` matrix (a 1×1 convolution).
fn conv1x1(g: &mut Graph, w: Var, b: Var, flat: Var) -> Result<Var> {
    let y = g.matmul(w, flat)?;
    g.add_col_bias(y, b)
}

/// Row-stochastic `[N, N]` attention map: row `i` is the distribution of
/// output site `i` over the `N` source sites.
pub fn attention_map(g: &mut Graph, v: Var, p: &AttentionWeights) -> Result<Var> {
    let (c, h, w) = volume_dims(g, v, "attention_map")?;
    let flat = g.reshape(v, [c, h * w])?;
    let q = conv1x1(g, p.wq, p.bq, flat)?;
    let k = conv1x1(g, p.wk, p.bk, flat)?;
    let qt = g.transpose(q)?;
    let scores = g.matmul(qt, k)?;
    g.softmax(scores, 1, 1.0)
}

/// `V̄ = γ·E + V` with `E = Θ_v(V) · Aᵀ`.
pub fn self_attend(g: &mut Graph, v: Var, p: &AttentionWeights) -> Result<Var> {
    let (c, h, w) = volume_dims(g, v, "self_attend")?;
    let attn = attention_map(g, v, p)?;
    let flat = g.reshape(v, [c, h * w])?;
    let values = conv1x1(g, p.wv, p.bv, flat)?;
    let attn_t = g.transpose(attn)?;
    let e = g.matmul(values, attn_t)?;
    let e = g.reshape(e, [c, h, w])?;
    let scaled = g.mul_scalar(e, p.gamma)?;
    g.add(scaled, v)
}

/// Softmax over all sites of `(V̄ ⊛ T) / temperature`, shaped `[H, W]`.
pub fn cross_modal_mask(g: &mut Graph, vbar: Var, text: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Parameter(format!("mask temperature must be > 0, got {temperature}")));
    }
    let (_, h, w) = volume_dims(g, vbar, "cross_modal_mask")?;
    let cross = g.xcorr(vbar, text)?;
    let flat = g.reshape(cross, [h * w])?;
    let mask = g.softmax(flat, 0, temperature)?;
    g.reshape(mask, [h, w])
}

/// `S(c) = Σ_{h,w} M(h,w)·V̄(c,h,w)`.
pub fn vl_pool(g: &mut Graph, vbar: Var, mask: Var) -> Result<Var> {
    let (c, h, w) = volume_dims(g, vbar, "vl_pool")?;
    if g.shape(mask) != [h, w] {
        return Err(Error::dim("vl_pool", g.shape(vbar), g.shape(mask)));
    }
    let flat = g.reshape(vbar, [c, h * w])?;
    let m = g.reshape(mask, [h * w])?;
    g.matvec(flat, m)
}

/// Per-channel `(mean_sites max(v, ε)^p)^(1/p)`.
pub fn gem_pool(g: &mut Graph, v: Var, p: GemExponent) -> Result<Var> {
    let (c, h, w) = volume_dims(g, v, "gem_pool")?;
    let flat = g.reshape(v, [c, h * w])?;
    let pos = g.clamp(flat, GEM_EPS, f64::INFINITY);
    match p {
        GemExponent::Fixed(1.0) => g.mean_axis(pos, 1),
        GemExponent::Fixed(p) => {
            if !(p >= 1.0) {
                return Err(Error::Parameter(format!("GeM exponent must be >= 1, got {p}")));
            }
            let powered = g.powf(pos, p);
            let mean = g.mean_axis(powered, 1)?;
            Ok(g.powf(mean, 1.0 / p))
        }
        GemExponent::Learned(pv) => {
            let powered = g.pow(pos, pv)?;
            let mean = g.mean_axis(powered, 1)?;
            let inv = g.recip(pv);
            g.pow(mean, inv)
        }
    }
}

/// `O_q = GeM(V̄) + β·S` for one level of the query pyramid.
pub fn transform_query_level(
    g: &mut Graph,
    v: Var,
    text: Var,
    attn: &AttentionWeights,
    beta: Var,
    p: GemExponent,
    temperature: f64,
) -> Result<Var> {
    let vbar = self_attend(g, v, attn)?;
    let mask = cross_modal_mask(g, vbar, text, temperature)?;
    let s = vl_pool(g, vbar, mask)?;
    let pooled = gem_pool(g, vbar, p)?;
    let weighted = g.mul_scalar(s, beta)?;
    g.add(pooled, weighted)
}

/// `O_t = GeM(V_t)`; no attention and no text on the target side.
pub fn transform_target_level(g: &mut Graph, v: Var, p: GemExponent) -> Result<Var> {
    gem_pool(g, v, p)
}

/// Per-level vectors `O^1..O^L`.
#[derive(Clone, Debug)]
pub struct TransformedPyramid {
    pub levels: Vec<Var>,
}

/// Parameter layout and binding for all levels.
#[derive(Clone, Debug)]
pub struct SemanticTransform {
    pub cfg: SftConfig,
    pub channels: Vec<usize>,
}

impl SemanticTransform {
    fn name(level: usize, part: &str) -> String {
        format!("sft{}.{part}", level + 1)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (l, &c) in self.channels.iter().enumerate() {
            for m in ["q", "k", "v"] {
                store.insert(Self::name(l, &format!("w{m}")), fan_in_uniform(rng, &[c, c], c));
                store.insert(Self::name(l, &format!("b{m}")), fan_in_uniform(rng, &[c], c));
            }
            store.insert(Self::name(l, "gamma"), trainable(Tensor::scalar(self.cfg.gamma_init)));
            store.insert(Self::name(l, "beta"), trainable(Tensor::scalar(self.cfg.beta_init)));
            if self.cfg.learn_p {
                store.insert(Self::name(l, "p"), trainable(Tensor::scalar(self.cfg.gem_p as f32)));
            }
        }
    }

    /// Keeps learned GeM exponents at or above 1.
    pub fn project(&self, store: &mut ParamStore) -> Result<()> {
        if self.cfg.learn_p {
            for l in 0..self.channels.len() {
                let p = store.get_mut(&Self::name(l, "p"))?;
                let v = &mut p.data_mut()[0];
                *v = v.max(1.0);
            }
        }
        Ok(())
    }

    pub fn attention(&self, g: &mut Graph, b: &mut Binder<'_>, level: usize) -> Result<AttentionWeights> {
        let mut get = |part: &str| b.get(g, &Self::name(level, part));
        Ok(AttentionWeights {
            wq: get("wq")?,
            bq: get("bq")?,
            wk: get("wk")?,
            bk: get("bk")?,
            wv: get("wv")?,
            bv: get("bv")?,
            gamma: get("gamma")?,
        })
    }

    pub fn exponent(&self, g: &mut Graph, b: &mut Binder<'_>, level: usize) -> Result<GemExponent> {
        if self.cfg.learn_p {
            Ok(GemExponent::Learned(b.get(g, &Self::name(level, "p"))?))
        } else {
            Ok(GemExponent::Fixed(self.cfg.gem_p))
        }
    }

    pub fn transform_query(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        pyramid: &[Var],
        text_levels: &[Var],
    ) -> Result<TransformedPyramid> {
        if pyramid.len() != self.channels.len() || text_levels.len() != self.channels.len() {
            return Err(Error::Usage(format!(
                "expected {} pyramid and text levels, got {} and {}",
                self.channels.len(),
                pyramid.len(),
                text_levels.len()
            )));
        }
        let mut levels = Vec::with_capacity(pyramid.len());
        for l in 0..pyramid.len() {
            let attn = self.attention(g, b, l)?;
            let beta = b.get(g, &Self::name(l, "beta"))?;
            let p = self.exponent(g, b, l)?;
            levels.push(transform_query_level(
                g,
                pyramid[l],
                text_levels[l],
                &attn,
                beta,
                p,
                self.cfg.temperature,
            )?);
        }
        Ok(TransformedPyramid { levels })
    }

    pub fn transform_target(&self, g: &mut Graph, b: &mut Binder<'_>, pyramid: &[Var]) -> Result<TransformedPyramid> {
        let levels = pyramid
            .iter()
            .enumerate()
            .map(|(l, &v)| {
                let p = self.exponent(g, b, l)?;
                transform_target_level(g, v, p)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TransformedPyramid { levels })
    }

    /// Maps the per-level transforms over a pyramid; `text` selects the query path.
    pub fn transform_pyramid(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        pyramid: &[Var],
        text: Option<&[Var]>,
    ) -> Result<TransformedPyramid> {
        match text {
            Some(t) => self.transform_query(g, b, pyramid, t),
            None => self.transform_target(g, b, pyramid),
        }
    }
}
