//! Image and text encoders.
//!
//! The image side is a small strided CNN whose stage outputs form the feature
//! pyramid; query and target images share one set of weights. The text side
//! embeds tokens, runs a single-layer GRU and projects the final hidden state
//! once per pyramid level.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{fan_in_uniform, Binder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Channels per level, strictly increasing.
    pub channels: Vec<usize>,
    /// `[height, width]` per level, halving from one level to the next.
    pub sizes: Vec<[usize; 2]>,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        PyramidConfig {
            channels: vec![8, 16, 32],
            sizes: vec![[16, 16], [8, 8], [4, 4]],
        }
    }
}

impl PyramidConfig {
    /// Builds a config whose level-1 size is `base` and which halves per level.
    pub fn halving(channels: Vec<usize>, base: [usize; 2]) -> Result<Self> {
        let sizes = (0..channels.len())
            .map(|l| [base[0] >> l, base[1] >> l])
            .collect();
        let cfg = PyramidConfig { channels, sizes };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let l = self.channels.len();
        if l < 2 {
            return Err(Error::Parameter(format!("pyramid needs at least 2 levels, got {l}")));
        }
        if self.sizes.len() != l {
            return Err(Error::Parameter(format!(
                "pyramid has {l} channel entries but {} sizes",
                self.sizes.len()
            )));
        }
        if self.channels[0] == 0 || self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Parameter(format!(
                "pyramid channels must be positive and strictly increasing: {:?}",
                self.channels
            )));
        }
        for w in self.sizes.windows(2) {
            if w[1][0] == 0 || w[1][1] == 0 || w[0][0] != 2 * w[1][0] || w[0][1] != 2 * w[1][1] {
                return Err(Error::Parameter(format!(
                    "pyramid sizes must halve per level: {:?}",
                    self.sizes
                )));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Channel count of the coarsest level, which is also the embedding width.
    pub fn top_channels(&self) -> usize {
        *self.channels.last().expect("validated pyramid")
    }

    /// Expected `[height, width]` of input images (the stem halves once).
    pub fn input_size(&self) -> [usize; 2] {
        [self.sizes[0][0] * 2, self.sizes[0][1] * 2]
    }
}

/// Feature volumes `[C_l, H_l, W_l]`, finest level first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Usage("token sequence must not be empty".into()));
        }
        if let Some(bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Usage(format!("token id {bad} outside vocabulary of {vocab}")));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Graph handles for the sentence vector and its per-level projections.
#[derive(Clone, Debug)]
pub struct SentenceEmbedding {
    pub sentence: Var,
    pub levels: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub pyramid: PyramidConfig,
    pub in_channels: usize,
}

pub const IMAGE_PREFIX: &str = "image.";

impl ImageEncoder {
    pub fn new(pyramid: PyramidConfig, in_channels: usize) -> Self {
        ImageEncoder { pyramid, in_channels }
    }

    fn conv_name(level: usize, part: &str) -> String {
        format!("image.conv{}.{part}", level + 1)
    }

    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let mut c_in = self.in_channels;
        for (l, &c_out) in self.pyramid.channels.iter().enumerate() {
            let fan_in = c_in * 9;
            store.insert(Self::conv_name(l, "weight"), fan_in_uniform(rng, &[c_out, c_in, 3, 3], fan_in));
            store.insert(Self::conv_name(l, "bias"), fan_in_uniform(rng, &[c_out], fan_in));
            c_in = c_out;
        }
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, image: Var) -> Result<Vec<Var>> {
        let [h, w] = self.pyramid.input_size();
        if g.shape(image) != [self.in_channels, h, w] {
            return Err(Error::dim("encode_image", g.shape(image), &[self.in_channels, h, w]));
        }
        let mut x = image;
        let mut levels = Vec::with_capacity(self.pyramid.levels());
        for l in 0..self.pyramid.levels() {
            let wv = b.get(g, &Self::conv_name(l, "weight"))?;
            let bv = b.get(g, &Self::conv_name(l, "bias"))?;
            let y = g.conv2d(x, wv, bv, 2, 1)?;
            x = g.relu(y);
            levels.push(x);
        }
        Ok(levels)
    }

    /// Eager pyramid for a query image.
    pub fn encode_image(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let x = g.tensor(image);
        let levels = self.forward(&mut g, &mut b, x)?;
        Ok(FeaturePyramid {
            levels: levels.into_iter().map(|v| g.to_tensor(v)).collect(),
        })
    }

    /// Eager pyramid for a target image; the weights are the query-side ones.
    pub fn encode_target(&self, store: &ParamStore, image: &Tensor) -> Result<FeaturePyramid> {
        self.encode_image(store, image)
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: usize,
    pub embed_dim: usize,
    pub hidden: usize,
    pub level_channels: Vec<usize>,
}

const GRU_GATES: [&str; 3] = ["r", "z", "n"];

impl TextEncoder {
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        store.insert(
            "text.embedding",
            fan_in_uniform(rng, &[self.vocab, self.embed_dim], self.embed_dim),
        );
        let h = self.hidden;
        for gate in GRU_GATES {
            store.insert(format!("text.gru.w_i{gate}"), fan_in_uniform(rng, &[h, self.embed_dim], h));
            store.insert(format!("text.gru.w_h{gate}"), fan_in_uniform(rng, &[h, h], h));
            store.insert(format!("text.gru.b_i{gate}"), fan_in_uniform(rng, &[h], h));
            store.insert(format!("text.gru.b_h{gate}"), fan_in_uniform(rng, &[h], h));
        }
        for (l, &c) in self.level_channels.iter().enumerate() {
            store.insert(format!("text.proj{}.weight", l + 1), fan_in_uniform(rng, &[c, h], h));
            store.insert(format!("text.proj{}.bias", l + 1), fan_in_uniform(rng, &[c], h));
        }
    }

    fn gate(&self, g: &mut Graph, b: &mut Binder<'_>, gate: &str, x: Var, h: Var) -> Result<(Var, Var)> {
        let wi = b.get(g, &format!("text.gru.w_i{gate}"))?;
        let bi = b.get(g, &format!("text.gru.b_i{gate}"))?;
        let wh = b.get(g, &format!("text.gru.w_h{gate}"))?;
        let bh = b.get(g, &format!("text.gru.b_h{gate}"))?;
        Ok((g.affine(wi, x, bi)?, g.affine(wh, h, bh)?))
    }

    /// Runs the GRU over the embedded tokens and returns its final hidden state.
    pub fn sentence(&self, g: &mut Graph, b: &mut Binder<'_>, tokens: &TokenSequence) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::Usage("cannot encode an empty token sequence".into()));
        }
        let table = b.get(g, "text.embedding")?;
        let mut h = g.constant(vec![0.0; self.hidden], [self.hidden])?;
        for &tok in tokens.ids() {
            if tok >= self.vocab {
                return Err(Error::Usage(format!("token id {tok} outside vocabulary of {}", self.vocab)));
            }
            let x = g.row(table, tok)?;
            let (xr, hr) = self.gate(g, b, "r", x, h)?;
            let (xz, hz) = self.gate(g, b, "z", x, h)?;
            let (xn, hn) = self.gate(g, b, "n", x, h)?;
            let r_pre = g.add(xr, hr)?;
            let r = g.sigmoid(r_pre);
            let z_pre = g.add(xz, hz)?;
            let z = g.sigmoid(z_pre);
            let gated = g.mul(r, hn)?;
            let n_pre = g.add(xn, gated)?;
            let n = g.tanh(n_pre);
            // h' = (1 - z) * n + z * h = n + z * (h - n)
            let diff = g.sub(h, n)?;
            let carry = g.mul(z, diff)?;
            h = g.add(n, carry)?;
        }
        Ok(h)
    }

    pub fn forward(&self, g: &mut Graph, b: &mut Binder<'_>, tokens: &TokenSequence) -> Result<SentenceEmbedding> {
        let sentence = self.sentence(g, b, tokens)?;
        let levels = (0..self.level_channels.len())
            .map(|l| {
                let w = b.get(g, &format!("text.proj{}.weight", l + 1))?;
                let bias = b.get(g, &format!("text.proj{}.bias", l + 1))?;
                g.affine(w, sentence, bias)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SentenceEmbedding { sentence, levels })
    }

    /// Eager sentence vector and per-level projections.
    pub fn encode_text(&self, store: &ParamStore, tokens: &TokenSequence) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let emb = self.forward(&mut g, &mut b, tokens)?;
        Ok((
            g.to_tensor(emb.sentence),
            emb.levels.iter().map(|&v| g.to_tensor(v)).collect(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn zeroed(mut store: ParamStore) -> ParamStore {
        for (_, t) in store.iter_mut() {
            t.data_mut().fill(0.0);
        }
        store
    }

    fn random_image(seed: u64, shape: [usize; 3]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn text_encoder() -> TextEncoder {
        TextEncoder {
            vocab: 5,
            embed_dim: 4,
            hidden: 3,
            level_channels: vec![2, 6],
        }
    }

    #[test]
    fn default_shapes() {
        let enc = ImageEncoder::new(PyramidConfig::default(), 3);
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(7));
        let p = enc.encode_image(&store, &random_image(7, [3, 32, 32])).unwrap();
        let shapes: Vec<_> = p.levels.iter().map(|t| t.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 16, 16], vec![16, 8, 8], vec![32, 4, 4]]);
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let enc = ImageEncoder::new(PyramidConfig::default(), 3);
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let store = zeroed(store);
        let p = enc.encode_target(&store, &Tensor::zeros([3, 32, 32]).unwrap()).unwrap();
        assert!(p.levels.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn query_and_target_share_weights_and_are_deterministic() {
        let enc = ImageEncoder::new(PyramidConfig::default(), 3);
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let img = random_image(5, [3, 32, 32]);
        let a = enc.encode_image(&store, &img).unwrap();
        assert_eq!(a, enc.encode_image(&store, &img).unwrap());
        assert_eq!(a, enc.encode_target(&store, &img).unwrap());
        let other = enc.encode_image(&store, &random_image(6, [3, 32, 32])).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn wrong_input_size_is_dimension_error() {
        let enc = ImageEncoder::new(PyramidConfig::default(), 3);
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let err = enc.encode_image(&store, &Tensor::zeros([3, 16, 16]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn pyramid_validation() {
        assert!(PyramidConfig::default().validate().is_ok());
        assert!(PyramidConfig::halving(vec![8], [16, 16]).is_err());
        assert!(PyramidConfig::halving(vec![8, 8], [16, 16]).is_err());
        let bad = PyramidConfig {
            channels: vec![4, 8],
            sizes: vec![[8, 8], [3, 3]],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn one_gru_step_by_hand() {
        // Zero recurrent weights: each gate only sees the embedded token.
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(9));
        for gate in GRU_GATES {
            store.get_mut(&format!("text.gru.w_h{gate}")).unwrap().data_mut().fill(0.0);
        }
        let tokens = TokenSequence::new(vec![2], 5).unwrap();
        let (sent, levels) = enc.encode_text(&store, &tokens).unwrap();

        let get = |n: &str| store.get(n).unwrap().to_f64();
        let x: Vec<f64> = get("text.embedding")[2 * 4..3 * 4].to_vec();
        let pre = |gate: &str, r: usize| {
            let w = get(&format!("text.gru.w_i{gate}"));
            let bi = get(&format!("text.gru.b_i{gate}"))[r];
            (0..4).map(|c| w[r * 4 + c] * x[c]).sum::<f64>() + bi
        };
        for r in 0..3 {
            let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
            let rg = sig(pre("r", r) + get("text.gru.b_hr")[r]);
            let z = sig(pre("z", r) + get("text.gru.b_hz")[r]);
            let n = (pre("n", r) + rg * get("text.gru.b_hn")[r]).tanh();
            let h = (1.0 - z) * n;
            assert_abs_diff_eq!(sent.data()[r] as f64, h, epsilon = 1e-6);
        }
        assert_eq!(levels[0].shape(), &[2]);
        assert_eq!(levels[1].shape(), &[6]);
    }

    #[test]
    fn order_sensitive_and_bounded() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let a = enc.encode_text(&store, &TokenSequence::new(vec![0, 1, 3], 5).unwrap()).unwrap().0;
        let b = enc.encode_text(&store, &TokenSequence::new(vec![3, 1, 0], 5).unwrap()).unwrap().0;
        assert_ne!(a, b);
        for v in a.data().iter().chain(b.data()) {
            assert!(v.abs() < 1.0 + 1e-6);
        }
    }

    #[test]
    fn zero_tables_give_zero_sentence() {
        let enc = text_encoder();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let zero = |store: &mut ParamStore, n: &str| store.get_mut(n).unwrap().data_mut().fill(0.0);
        zero(&mut store, "text.embedding");
        for gate in GRU_GATES {
            zero(&mut store, &format!("text.gru.b_i{gate}"));
            zero(&mut store, &format!("text.gru.b_h{gate}"));
        }
        let (sent, _) = enc.encode_text(&store, &TokenSequence::new(vec![1, 4], 5).unwrap()).unwrap();
        assert!(sent.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn token_validation() {
        assert!(TokenSequence::new(vec![], 5).is_err());
        assert!(TokenSequence::new(vec![5], 5).is_err());
        assert!(TokenSequence::new(vec![4], 5).is_ok());
    }
}
