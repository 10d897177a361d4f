//! Training loop: alternating critic/model updates, plateau decay and
//! delayed unfreezing of the image encoder.

pub mod optim;
pub mod schedule;

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, Variant};
use crate::data::{batch_indices, Dataset, Split, Triplet};
use crate::encoders::{TokenSequence, IMAGE_PREFIX};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, SplitMode};
use crate::hfa::{BatchStats, NormMode};
use crate::losses::{
    consistency_loss, discriminator_loss, total_loss, triplet_loss, LossWeights, DISC_PREFIX,
};
use crate::model::Model;
use crate::params::{Binder, ParamStore};
use crate::sampling::{sample_negative, NegativePolicy};
use crate::tensor::{Graph, Var};

pub use optim::{sgd_step, sgd_update, Adam};
pub use schedule::PlateauSchedule;

/// Graph handles of every objective for one batch.
#[derive(Clone, Debug)]
pub struct Objective {
    pub triplet: Var,
    /// Generator-side adversarial term (what the model minimises).
    pub disc_g: Var,
    /// Critic objective (what the discriminator minimises).
    pub disc_d: Var,
    pub cons: Var,
    pub total: Var,
    pub stats: Option<BatchStats>,
}

/// Loss weights actually used for `variant`: the single-modality and
/// late-fusion references train on the triplet term alone.
pub fn effective_weights(variant: Variant, w: &LossWeights) -> LossWeights {
    match variant {
        Variant::Trace => *w,
        _ => LossWeights {
            lambda2: 0.0,
            lambda3: 0.0,
            ..*w
        },
    }
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.scalar_constant(0.0));
    }
    let cat = g.concat(terms)?;
    Ok(g.mean(cat))
}

/// Builds the full objective for a batch of triplets. Negatives come from the
/// other targets in the batch.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder<'_>,
    ds: &Dataset,
    batch: &[&Triplet],
    mode: NormMode,
    policy: &NegativePolicy,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    let tokens = batch
        .iter()
        .map(|t| model.tokens(&t.caption))
        .collect::<Result<Vec<TokenSequence>>>()?;
    let mut queries = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (t, tok) in batch.iter().zip(&tokens) {
        queries.push((g.tensor(ds.image(t.query)?), tok));
        targets.push(g.tensor(ds.image(t.target)?));
    }
    let (emb, stats) = model.embed_queries(g, b, &queries, mode)?;
    let f_tgt = model.embed_targets(g, b, &targets, mode)?;
    objective_from_embeddings(model, g, b, batch, &emb, &f_tgt, stats, policy, weights, rng)
}

#[allow(clippy::too_many_arguments)]
pub fn objective_from_embeddings(
    model: &Model,
    g: &mut Graph,
    b: &mut Binder<'_>,
    batch: &[&Triplet],
    emb: &[crate::model::QueryEmbedding],
    f_tgt: &[Var],
    stats: Option<BatchStats>,
    policy: &NegativePolicy,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
) -> Result<Objective> {
    let mut trip_terms = Vec::with_capacity(batch.len());
    for (i, t) in batch.iter().enumerate() {
        let anchor = g.value(emb[i].f_com).to_vec();
        let candidates: Vec<(usize, f64)> = batch
            .iter()
            .zip(f_tgt)
            .map(|(c, &v)| {
                let d = g.value(v).iter().zip(&anchor).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                (c.target, d)
            })
            .collect();
        let exclude = [t.query, t.target];
        if candidates.iter().all(|(id, _)| exclude.contains(id)) {
            continue;
        }
        let neg_id = sample_negative(rng, &candidates, &exclude, policy)?;
        let j = batch.iter().position(|c| c.target == neg_id).expect("sampled from batch");
        trip_terms.push(triplet_loss(g, emb[i].f_com, f_tgt[i], f_tgt[j])?);
    }
    let triplet = mean_of(g, &trip_terms)?;
    let coms: Vec<Var> = emb.iter().map(|e| e.f_com).collect();
    let (disc_d, disc_g) = discriminator_loss(g, &model.disc, b, f_tgt, &coms)?;
    let cons_terms = emb
        .iter()
        .zip(f_tgt)
        .map(|(e, &t)| {
            let (ft, tt) = (g.detach(e.f_text), g.detach(t));
            consistency_loss(g, &model.cons, b, e.f_com, ft, tt, weights)
        })
        .collect::<Result<Vec<_>>>()?;
    let cons = mean_of(g, &cons_terms)?;
    let total = total_loss(g, triplet, disc_g, cons, weights)?;
    Ok(Objective {
        triplet,
        disc_g,
        disc_d,
        cons,
        total,
        stats,
    })
}

/// Scalar values of one objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossValues {
    pub triplet: f64,
    pub disc: f64,
    pub cons: f64,
    pub total: f64,
}

impl LossValues {
    fn read(g: &Graph, o: &Objective) -> Self {
        LossValues {
            triplet: g.scalar(o.triplet),
            disc: g.scalar(o.disc_g),
            cons: g.scalar(o.cons),
            total: g.scalar(o.total),
        }
    }

    fn check_finite(&self, step: usize) -> Result<()> {
        for (name, v) in [
            ("L_triplet", self.triplet),
            ("L_disc", self.disc),
            ("L_cons", self.cons),
            ("L_total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::Numerical(format!("{name} is {v} at step {step}")));
            }
        }
        Ok(())
    }
}

/// One row of the metrics log, written at every evaluation.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    #[serde(rename = "L_triplet")]
    pub l_triplet: f64,
    #[serde(rename = "L_disc")]
    pub l_disc: f64,
    #[serde(rename = "L_cons")]
    pub l_cons: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    #[serde(rename = "R@1")]
    pub r1: f64,
    #[serde(rename = "R@10")]
    pub r10: f64,
    #[serde(rename = "R@50")]
    pub r50: f64,
    pub lr_main: f64,
    pub lr_disc: f64,
}

pub fn write_metrics<W: Write>(w: W, records: &[MetricsRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    if records.is_empty() {
        out.write_record([
            "step", "L_triplet", "L_disc", "L_cons", "L_total", "R@1", "R@10", "R@50", "lr_main", "lr_disc",
        ])?;
    }
    for r in records {
        out.serialize(r)?;
    }
    out.flush().map_err(|e| Error::io("<metrics>", e))?;
    Ok(())
}

pub fn write_metrics_file(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_metrics(std::io::BufWriter::new(file), records)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub records: Vec<MetricsRecord>,
    /// Training `L_total` of every step.
    pub step_losses: Vec<f64>,
    pub steps: usize,
}

/// Validation losses in evaluation mode with a fixed negative stream.
pub fn validation_losses(
    cfg: &Config,
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    limit: Option<usize>,
) -> Result<LossValues> {
    let split = ds.split(Split::Val);
    let n = limit.map_or(split.queries.len(), |l| l.min(split.queries.len()));
    let queries: Vec<&Triplet> = split.queries[..n].iter().collect();
    let weights = effective_weights(model.variant, &cfg.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0005_EED0_F7A1);
    let mut sum = LossValues::default();
    let mut chunks = 0usize;
    for chunk in queries.chunks(cfg.train.batch) {
        let mut g = Graph::new();
        let mut b = Binder::new(store);
        let o = batch_objective(model, &mut g, &mut b, ds, chunk, NormMode::Eval, &cfg.neg, &weights, &mut rng)?;
        let v = LossValues::read(&g, &o);
        sum.triplet += v.triplet;
        sum.disc += v.disc;
        sum.cons += v.cons;
        sum.total += v.total;
        chunks += 1;
    }
    let k = chunks.max(1) as f64;
    Ok(LossValues {
        triplet: sum.triplet / k,
        disc: sum.disc / k,
        cons: sum.cons / k,
        total: sum.total / k,
    })
}

fn evaluation_record(
    cfg: &Config,
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    step: usize,
    sched: &PlateauSchedule,
) -> Result<MetricsRecord> {
    let limit = (cfg.train.val_queries > 0).then_some(cfg.train.val_queries);
    let losses = validation_losses(cfg, model, store, ds, limit)?;
    let row = evaluate_split(model, store, ds, Split::Val, SplitMode::Original, &[1, 10, 50], limit)?;
    Ok(MetricsRecord {
        step,
        l_triplet: losses.triplet,
        l_disc: losses.disc,
        l_cons: losses.cons,
        l_total: losses.total,
        r1: row.recall(1).unwrap_or(0.0),
        r10: row.recall(10).unwrap_or(0.0),
        r50: row.recall(50).unwrap_or(0.0),
        lr_main: sched.lr_main,
        lr_disc: sched.lr_disc,
    })
}

/// Trains `store` in place of a fresh initialisation. Deterministic for a
/// given config, dataset and starting parameters.
pub fn train(cfg: &Config, model: &Model, ds: &Dataset, mut store: ParamStore) -> Result<TrainOutcome> {
    cfg.validate()?;
    let t = &cfg.train;
    let weights = effective_weights(model.variant, &cfg.loss);
    let mut adam = Adam::new(t.beta1, t.beta2, t.eps);
    let mut sched = PlateauSchedule::new(
        t.lr,
        t.disc_lr,
        t.main_decay,
        t.disc_decay,
        t.patience,
        t.plateau_threshold,
        t.lr_floor,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut records = Vec::new();
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    let train_set = ds.train();
    let train_disc = weights.lambda2 > 0.0;

    for epoch in 0..t.epochs {
        let frozen: &[&str] = if epoch < t.unfreeze_epoch { &[IMAGE_PREFIX] } else { &[] };
        let order_seed = cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(epoch as u64);
        for idx in batch_indices(train_set.len(), t.batch, order_seed)? {
            let batch: Vec<&Triplet> = idx.iter().map(|&i| &train_set[i]).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(&store).with_frozen_prefixes(frozen);
            let obj = batch_objective(model, &mut g, &mut b, ds, &batch, NormMode::Train, &cfg.neg, &weights, &mut rng)?;
            let values = LossValues::read(&g, &obj);
            values.check_finite(step)?;
            step_losses.push(values.total);

            let main_grads = g.backward(obj.total)?;
            let disc_grads = if train_disc { Some(g.backward(obj.disc_d)?) } else { None };
            let bound: Vec<(String, Var)> = b.bound().map(|(n, v)| (n.to_string(), v)).collect();
            drop(b);
            for (name, var) in &bound {
                let is_disc = name.starts_with(DISC_PREFIX);
                let grads = if is_disc { disc_grads.as_ref() } else { Some(&main_grads) };
                if let Some(grad) = grads.and_then(|gr| gr.get(*var)) {
                    if grad.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Numerical(format!("non-finite gradient for {name} at step {step}")));
                    }
                    store.get_mut(name)?.accumulate_grad(grad)?;
                }
            }
            if train_disc {
                sgd_step(&mut store, sched.lr_disc, |n| n.starts_with(DISC_PREFIX))?;
            }
            adam.step(&mut store, sched.lr_main, |n| !n.starts_with(DISC_PREFIX))?;
            store.zero_grads();
            if let Some(stats) = &obj.stats {
                model.hfa.update_running_stats(&mut store, stats)?;
            }
            model.sft.project(&mut store)?;
            step += 1;

            if step.is_multiple_of(t.eval_every) {
                let rec = evaluation_record(cfg, model, &store, ds, step, &sched)?;
                log::info!(
                    "step {step}: val L_total {:.4} R@10 {:.2} lr {:.2e}",
                    rec.l_total,
                    rec.r10,
                    sched.lr_main
                );
                sched.observe(rec.l_total);
                records.push(rec);
            }
        }
    }
    if step > 0 && !step.is_multiple_of(t.eval_every) {
        records.push(evaluation_record(cfg, model, &store, ds, step, &sched)?);
    }
    Ok(TrainOutcome {
        store,
        records,
        step_losses,
        steps: step,
    })
}
