//! End-to-end query and target embedders built from the encoder, SFT, HFA
//! and VLC stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Config, Variant};
use crate::encoders::{ImageEncoder, TextEncoder, TokenSequence};
use crate::error::{Error, Result};
use crate::hfa::{BatchStats, HierarchicalAggregation, NormMode};
use crate::losses::{ConsistencyHeads, Discriminator};
use crate::params::{fan_in_uniform, Binder, ParamStore};
use crate::sft::{gem_pool, GemExponent, SemanticTransform};
use crate::tensor::{Graph, Tensor, Var};
use crate::vlc::Composition;

/// Composed query embedding and the text vector it was built from.
#[derive(Clone, Copy, Debug)]
pub struct QueryEmbedding {
    pub f_com: Var,
    pub f_text: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub variant: Variant,
    pub vocab: usize,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub sft: SemanticTransform,
    pub hfa: HierarchicalAggregation,
    pub vlc: Composition,
    pub disc: Discriminator,
    pub cons: ConsistencyHeads,
}

impl Model {
    pub fn new(cfg: &Config, image_size: [usize; 3], vocab: usize) -> Result<Model> {
        cfg.validate()?;
        let pyramid = cfg.pyramid.pyramid()?;
        let [c, h, w] = image_size;
        if pyramid.input_size() != [h, w] {
            return Err(Error::Parameter(format!(
                "pyramid level-1 size {:?} expects {:?} images, dataset has {:?}",
                pyramid.sizes[0],
                pyramid.input_size(),
                [h, w]
            )));
        }
        let channels = pyramid.channels.clone();
        let dim = pyramid.top_channels();
        Ok(Model {
            variant: cfg.model.variant,
            vocab,
            image: ImageEncoder::new(pyramid, c),
            text: TextEncoder {
                vocab,
                embed_dim: cfg.text.embed_dim,
                hidden: cfg.text.hidden,
                level_channels: channels.clone(),
            },
            sft: SemanticTransform {
                cfg: cfg.sft.clone(),
                channels: channels.clone(),
            },
            hfa: HierarchicalAggregation {
                channels,
                kind: cfg.hfa.kind,
                symmetric_heads: cfg.hfa.symmetric_heads,
            },
            vlc: Composition {
                kind: cfg.vlc.kind,
                sent_dim: cfg.text.hidden,
                dim,
                normalize_target: cfg.vlc.normalize_target,
            },
            disc: Discriminator { dim },
            cons: ConsistencyHeads { dim },
        })
    }

    pub fn dim(&self) -> usize {
        self.vlc.dim
    }

    /// Expected `[channels, height, width]` of input images.
    pub fn image_size(&self) -> [usize; 3] {
        let [h, w] = self.image.pyramid.input_size();
        [self.image.in_channels, h, w]
    }

    /// Fresh parameters; every initialiser draws from one seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        self.image.init_params(&mut store, &mut rng);
        self.text.init_params(&mut store, &mut rng);
        self.sft.init_params(&mut store, &mut rng);
        self.hfa.init_params(&mut store, &mut rng);
        self.vlc.init_params(&mut store, &mut rng);
        self.disc.init_params(&mut store, &mut rng);
        self.cons.init_params(&mut store, &mut rng);
        let d = self.dim();
        match self.variant {
            Variant::ImageOnly => {
                store.insert("image_only.weight", fan_in_uniform(&mut rng, &[d, d], d));
                store.insert("image_only.bias", fan_in_uniform(&mut rng, &[d], d));
            }
            Variant::ConcatBaseline => {
                store.insert("late_fusion.l1.weight", fan_in_uniform(&mut rng, &[d, 2 * d], 2 * d));
                store.insert("late_fusion.l1.bias", fan_in_uniform(&mut rng, &[d], 2 * d));
                store.insert("late_fusion.l2.weight", fan_in_uniform(&mut rng, &[d, d], d));
                store.insert("late_fusion.l2.bias", fan_in_uniform(&mut rng, &[d], d));
            }
            Variant::Trace | Variant::TextOnly => {}
        }
        store
    }

    pub fn tokens(&self, ids: &[usize]) -> Result<TokenSequence> {
        TokenSequence::new(ids.to_vec(), self.vocab)
    }

    fn target_fused(&self, g: &mut Graph, b: &mut Binder<'_>, pyramids: &[Vec<Var>], mode: NormMode) -> Result<Vec<Var>> {
        let levels = pyramids
            .iter()
            .map(|p| Ok(self.sft.transform_target(g, b, p)?.levels))
            .collect::<Result<Vec<_>>>()?;
        self.hfa.aggregate_target(g, b, &levels, mode)
    }

    /// Composed embeddings for a batch of `(image, caption)` queries. The
    /// returned statistics are the HFA BatchNorm batch moments, if used.
    pub fn embed_queries(
        &self,
        g: &mut Graph,
        b: &mut Binder<'_>,
        queries: &[(Var, &TokenSequence)],
        mode: NormMode,
    ) -> Result<(Vec<QueryEmbedding>, Option<BatchStats>)> {
        let mut pyramids = Vec::with_capacity(queries.len());
        let mut sentences = Vec::with_capacity(queries.len());
        for &(image, tokens) in queries {
            pyramids.push(self.image.forward(g, b, image)?);
            sentences.push(self.text.forward(g, b, tokens)?);
        }
        let f_texts = sentences
            .iter()
            .map(|s| self.vlc.project_text(g, b, s.sentence))
            .collect::<Result<Vec<_>>>()?;

        let (f_coms, stats) = match self.variant {
            Variant::Trace => {
                let levels = pyramids
                    .iter()
                    .zip(&sentences)
                    .map(|(p, s)| Ok(self.sft.transform_query(g, b, p, &s.levels)?.levels))
                    .collect::<Result<Vec<_>>>()?;
                let (f_aggs, stats) = self.hfa.aggregate_query(g, b, &levels, mode)?;
                let coms = f_aggs
                    .iter()
                    .zip(&f_texts)
                    .map(|(&a, &t)| self.vlc.compose(g, b, a, t))
                    .collect::<Result<Vec<_>>>()?;
                (coms, stats)
            }
            Variant::ImageOnly => {
                let fused = self.target_fused(g, b, &pyramids, mode)?;
                let w = b.get(g, "image_only.weight")?;
                let bias = b.get(g, "image_only.bias")?;
                let coms = fused.iter().map(|&f| g.affine(w, f, bias)).collect::<Result<Vec<_>>>()?;
                (coms, None)
            }
            Variant::TextOnly => (f_texts.clone(), None),
            Variant::ConcatBaseline => {
                let mut coms = Vec::with_capacity(queries.len());
                for (p, &t) in pyramids.iter().zip(&f_texts) {
                    let top = *p.last().expect("validated pyramid");
                    let pooled = gem_pool(g, top, GemExponent::Fixed(self.sft.cfg.gem_p))?;
                    let cat = g.concat(&[pooled, t])?;
                    let (w1, b1) = (b.get(g, "late_fusion.l1.weight")?, b.get(g, "late_fusion.l1.bias")?);
                    let (w2, b2) = (b.get(g, "late_fusion.l2.weight")?, b.get(g, "late_fusion.l2.bias")?);
                    let h = g.affine(w1, cat, b1)?;
                    let h = g.relu(h);
                    coms.push(g.affine(w2, h, b2)?);
                }
                (coms, None)
            }
        };
        let out = f_coms
            .into_iter()
            .zip(f_texts)
            .map(|(f_com, f_text)| QueryEmbedding { f_com, f_text })
            .collect();
        Ok((out, stats))
    }

    /// Index-side embeddings `f_tgt` for a batch of images.
    pub fn embed_targets(&self, g: &mut Graph, b: &mut Binder<'_>, images: &[Var], mode: NormMode) -> Result<Vec<Var>> {
        let pyramids = images
            .iter()
            .map(|&img| self.image.forward(g, b, img))
            .collect::<Result<Vec<_>>>()?;
        let fused = self.target_fused(g, b, &pyramids, mode)?;
        fused.into_iter().map(|f| self.vlc.compose_target(g, f)).collect()
    }

    /// Evaluation-mode query vector for one `(image, caption)` pair.
    pub fn query_vector(&self, store: &ParamStore, image: &Tensor, caption: &[usize]) -> Result<Vec<f64>> {
        let tokens = self.tokens(caption)?;
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let img = g.tensor(image);
        let (emb, _) = self.embed_queries(&mut g, &mut b, &[(img, &tokens)], NormMode::Eval)?;
        Ok(g.value(emb[0].f_com).to_vec())
    }

    /// Evaluation-mode target vector for one image.
    pub fn target_vector(&self, store: &ParamStore, image: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let img = g.tensor(image);
        let out = self.embed_targets(&mut g, &mut b, &[img], NormMode::Eval)?;
        Ok(g.value(out[0]).to_vec())
    }
}
