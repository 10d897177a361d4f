//! Brute-force retrieval index and Recall@K.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EvalSplit, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;

/// Immutable gallery of embeddings, searched by exact L2 distance.
#[derive(Clone, Debug, Default)]
pub struct RetrievalIndex {
    ids: Vec<usize>,
    dim: usize,
    rows: Vec<f64>,
}

impl RetrievalIndex {
    pub fn build(pairs: Vec<(usize, Vec<f64>)>) -> Result<RetrievalIndex> {
        let dim = pairs.first().map_or(0, |p| p.1.len());
        let mut seen = HashSet::with_capacity(pairs.len());
        let mut ids = Vec::with_capacity(pairs.len());
        let mut rows = Vec::with_capacity(pairs.len() * dim);
        for (id, emb) in pairs {
            if !seen.insert(id) {
                return Err(Error::Usage(format!("duplicate id {id} in retrieval index")));
            }
            if emb.len() != dim {
                return Err(Error::dim("build_index", &[dim], &[emb.len()]));
            }
            ids.push(id);
            rows.extend(emb);
        }
        Ok(RetrievalIndex { ids, dim, rows })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn get(&self, id: usize) -> Option<&[f64]> {
        let pos = self.ids.iter().position(|&i| i == id)?;
        Some(&self.rows[pos * self.dim..(pos + 1) * self.dim])
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Usage("cannot query an empty index".into()));
        }
        if query.len() != self.dim {
            return Err(Error::dim("rank", &[self.dim], &[query.len()]));
        }
        Ok(())
    }

    fn distances(&self, query: &[f64]) -> Vec<f64> {
        self.rows
            .chunks(self.dim)
            .map(|row| row.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
            .collect()
    }

    /// Ids by ascending distance, ties broken by ascending id.
    pub fn rank(&self, query: &[f64]) -> Result<Vec<usize>> {
        self.check_query(query)?;
        let d = self.distances(query);
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(self.ids[a].cmp(&self.ids[b])));
        Ok(order.into_iter().map(|i| self.ids[i]).collect())
    }

    /// 1-based rank of `target` under the same ordering as [`rank`](Self::rank).
    pub fn rank_of(&self, query: &[f64], target: usize) -> Result<usize> {
        self.check_query(query)?;
        let pos = self
            .ids
            .iter()
            .position(|&i| i == target)
            .ok_or_else(|| Error::Usage(format!("target {target} is not indexed")))?;
        let d = self.distances(query);
        let dt = d[pos];
        let ahead = d
            .iter()
            .zip(&self.ids)
            .filter(|(&di, &id)| di < dt || (di == dt && id < target))
            .count();
        Ok(ahead + 1)
    }
}

/// `100 · |{rank ≤ k}| / |ranks|`.
pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Usage("recall over zero queries".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

/// Which images the gallery contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    /// The split's whole catalog.
    Original,
    /// Only the candidate (query) and target images of the scored queries.
    Val,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Original => "original",
            SplitMode::Val => "val",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(SplitMode::Original),
            "val" => Ok(SplitMode::Val),
            other => Err(Error::Usage(format!("unknown split `{other}` (original, val)"))),
        }
    }
}

/// Gallery ids for `split` under `mode`.
pub fn gallery_ids(split: &EvalSplit, mode: SplitMode) -> Vec<usize> {
    match mode {
        SplitMode::Original => split.catalog.clone(),
        SplitMode::Val => {
            let pool: HashSet<usize> = split.queries.iter().flat_map(|q| [q.query, q.target]).collect();
            split.catalog.iter().copied().filter(|id| pool.contains(id)).collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecallRow {
    pub subset: String,
    pub split: SplitMode,
    pub queries: usize,
    pub gallery: usize,
    pub recalls: Vec<(usize, f64)>,
}

impl RecallRow {
    pub fn recall(&self, k: usize) -> Option<f64> {
        self.recalls.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }
}

/// Embeds a gallery and scores the first `limit` queries (all if `None`).
pub fn evaluate_split(
    model: &Model,
    store: &ParamStore,
    ds: &Dataset,
    which: Split,
    mode: SplitMode,
    ks: &[usize],
    limit: Option<usize>,
) -> Result<RecallRow> {
    let split = ds.split(which);
    let n = limit.map_or(split.queries.len(), |l| l.min(split.queries.len()));
    let scored = EvalSplit {
        catalog: split.catalog.clone(),
        queries: split.queries[..n].to_vec(),
    };
    let ids = gallery_ids(&scored, mode);
    let mut cache: HashMap<usize, Vec<f64>> = HashMap::with_capacity(ids.len());
    for &id in &ids {
        cache.insert(id, model.target_vector(store, ds.image(id)?)?);
    }
    let index = RetrievalIndex::build(ids.iter().map(|id| (*id, cache[id].clone())).collect())?;
    let mut ranks = Vec::with_capacity(n);
    for q in &scored.queries {
        let v = model.query_vector(store, ds.image(q.query)?, &q.caption)?;
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!("non-finite query embedding for target {}", q.target)));
        }
        ranks.push(index.rank_of(&v, q.target)?);
    }
    let recalls = ks
        .iter()
        .map(|&k| Ok((k, recall_at_k(&ranks, k)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(RecallRow {
        subset: which.as_str().to_string(),
        split: mode,
        queries: n,
        gallery: index.len(),
        recalls,
    })
}
