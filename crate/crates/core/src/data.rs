//! Synthetic text-conditioned retrieval benchmark.
//!
//! Every attribute token owns a fixed visual edit (channel tint, striped
//! overlay in one quadrant, or quadrant inversion). A target image is its
//! query image with the caption's edits applied in token order. Evaluation
//! catalogs are grids of held-out base images × shared captions, so neither
//! the image nor the text alone pins down the target.
//!
//! On disk a dataset is `manifest.json` plus one TNSR file per image under
//! `images/`.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tnsr, write_tnsr, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    /// `[channels, height, width]`.
    pub image_size: [usize; 3],
    /// Number of attribute tokens.
    pub vocab: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub train_triplets: usize,
    pub train_bases: usize,
    /// Test gallery size: `catalog_bases` base images plus their edited variants.
    pub catalog: usize,
    pub catalog_bases: usize,
    pub val_catalog: usize,
    pub val_bases: usize,
    /// Share of grid cells used as evaluation queries.
    pub query_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            image_size: [3, 32, 32],
            vocab: 12,
            min_tokens: 1,
            max_tokens: 3,
            train_triplets: 2000,
            train_bases: 200,
            catalog: 256,
            catalog_bases: 16,
            val_catalog: 64,
            val_bases: 8,
            query_fraction: 1.0,
        }
    }
}

/// Number of distinct ordered captions of length `min..=max` over `k` tokens.
fn caption_count(k: usize, min: usize, max: usize) -> usize {
    (min..=max)
        .map(|n| (0..n).map(|i| k.saturating_sub(i)).product::<usize>())
        .sum()
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        let [c, h, w] = self.image_size;
        if c == 0 || h < 4 || w < 4 || h % 2 != 0 || w % 2 != 0 {
            return bad(format!("image_size {:?} must have channels >= 1 and even sides >= 4", self.image_size));
        }
        if self.min_tokens == 0 {
            return bad("min_tokens must be >= 1".into());
        }
        if self.max_tokens < self.min_tokens || self.vocab < self.max_tokens {
            return bad(format!(
                "need 1 <= min_tokens <= max_tokens <= vocab, got {} / {} / {}",
                self.min_tokens, self.max_tokens, self.vocab
            ));
        }
        if self.catalog < 50 {
            return bad(format!("catalog must be >= 50, got {}", self.catalog));
        }
        if self.train_triplets == 0 || self.train_bases == 0 {
            return bad("train_triplets and train_bases must be positive".into());
        }
        if !(self.query_fraction > 0.0 && self.query_fraction <= 1.0) {
            return bad(format!("query_fraction must lie in (0, 1], got {}", self.query_fraction));
        }
        let available = caption_count(self.vocab, self.min_tokens, self.max_tokens);
        for (name, size, bases) in [
            ("catalog", self.catalog, self.catalog_bases),
            ("val_catalog", self.val_catalog, self.val_bases),
        ] {
            if bases == 0 || size % bases != 0 || size / bases < 2 {
                return bad(format!("{name} ({size}) must be a multiple >= 2x of its base count ({bases})"));
            }
            if size / bases - 1 > available {
                return bad(format!(
                    "{name} needs {} distinct captions but only {available} exist",
                    size / bases - 1
                ));
            }
        }
        Ok(())
    }

    pub fn captions_per_base(size: usize, bases: usize) -> usize {
        size / bases - 1
    }
}

/// A token's visual edit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transform {
    Tint { channel: usize, amount: f32 },
    Stripes {
        quadrant: usize,
        channel: usize,
        vertical: bool,
        period: usize,
        amplitude: f32,
    },
    InvertQuadrant { quadrant: usize },
}

fn quadrant_bounds(q: usize, h: usize, w: usize) -> ([usize; 2], [usize; 2]) {
    let rows = if q < 2 { [0, h / 2] } else { [h / 2, h] };
    let cols = if q.is_multiple_of(2) { [0, w / 2] } else { [w / 2, w] };
    (rows, cols)
}

impl Transform {
    /// Edit for token `k` under master seed `seed`.
    pub fn for_token(k: usize, seed: u64, channels: usize) -> Transform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(k as u64 + 1)));
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match k % 3 {
            0 => Transform::Tint {
                channel: (k / 3) % channels,
                amount: sign * rng.gen_range(0.6f32..1.0),
            },
            1 => Transform::Stripes {
                quadrant: (k / 3) % 4,
                channel: rng.gen_range(0..channels),
                vertical: rng.gen_bool(0.5),
                period: rng.gen_range(2..=4),
                amplitude: sign * rng.gen_range(0.8f32..1.2),
            },
            _ => Transform::InvertQuadrant { quadrant: (k / 3) % 4 },
        }
    }

    pub fn apply(&self, img: &mut Tensor) -> Result<()> {
        let [c, h, w] = match *img.shape() {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::dim("transform", img.shape(), &[0, 0, 0])),
        };
        let data = img.data_mut();
        match *self {
            Transform::Tint { channel, amount } => {
                if channel >= c {
                    return Err(Error::Parameter(format!("tint channel {channel} out of range")));
                }
                data[channel * h * w..(channel + 1) * h * w].iter_mut().for_each(|v| *v += amount);
            }
            Transform::Stripes {
                quadrant,
                channel,
                vertical,
                period,
                amplitude,
            } => {
                if channel >= c || quadrant > 3 || period == 0 {
                    return Err(Error::Parameter(format!("invalid stripes transform {self:?}")));
                }
                let (rows, cols) = quadrant_bounds(quadrant, h, w);
                for y in rows[0]..rows[1] {
                    for x in cols[0]..cols[1] {
                        let pos = if vertical { x } else { y };
                        let s = if (pos / period) % 2 == 0 { amplitude } else { -amplitude };
                        data[(channel * h + y) * w + x] += s;
                    }
                }
            }
            Transform::InvertQuadrant { quadrant } => {
                if quadrant > 3 {
                    return Err(Error::Parameter(format!("quadrant {quadrant} out of range")));
                }
                let (rows, cols) = quadrant_bounds(quadrant, h, w);
                for ch in 0..c {
                    for y in rows[0]..rows[1] {
                        for x in cols[0]..cols[1] {
                            let v = &mut data[(ch * h + y) * w + x];
                            *v = -*v;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Applies the caption's edits in token order.
pub fn apply_caption(base: &Tensor, caption: &[usize], transforms: &[Transform]) -> Result<Tensor> {
    let mut img = base.clone();
    for &tok in caption {
        let t = transforms
            .get(tok)
            .ok_or_else(|| Error::Usage(format!("token {tok} outside vocabulary of {}", transforms.len())))?;
        t.apply(&mut img)?;
    }
    Ok(img)
}

/// Smooth random pattern: a few low-frequency plane waves per channel.
pub fn base_pattern(rng: &mut ChaCha8Rng, [c, h, w]: [usize; 3]) -> Tensor {
    let mut data = vec![0f32; c * h * w];
    for ch in 0..c {
        let waves: Vec<[f64; 4]> = (0..3)
            .map(|_| {
                [
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(0.0..std::f64::consts::TAU),
                    rng.gen_range(0.2..0.6),
                ]
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let (u, v) = (x as f64 / w as f64, y as f64 / h as f64);
                let s: f64 = waves
                    .iter()
                    .map(|[fx, fy, ph, a]| a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin())
                    .sum();
                data[(ch * h + y) * w + x] = s as f32;
            }
        }
    }
    Tensor::new([c, h, w], data).expect("pattern shape matches data")
}

fn random_caption(rng: &mut ChaCha8Rng, spec: &SynthSpec) -> Vec<usize> {
    let n = rng.gen_range(spec.min_tokens..=spec.max_tokens);
    let mut tokens: Vec<usize> = (0..spec.vocab).collect();
    tokens.shuffle(rng);
    tokens.truncate(n);
    tokens
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub query: usize,
    pub caption: Vec<usize>,
    pub target: usize,
}

/// An evaluation gallery and the queries whose targets it contains.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSplit {
    pub catalog: Vec<usize>,
    pub queries: Vec<Triplet>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageRole {
    Base,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub id: usize,
    pub path: String,
    pub role: ImageRole,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub spec: SynthSpec,
    pub transforms: Vec<Transform>,
    pub images: Vec<ImageEntry>,
    pub train: Vec<Triplet>,
    pub val: EvalSplit,
    pub test: EvalSplit,
}

/// Loaded dataset: manifest plus every image in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    images: HashMap<usize, Tensor>,
}

/// Example materialised from a triplet.
#[derive(Clone, Debug)]
pub struct TripletExample<'a> {
    pub query_id: usize,
    pub target_id: usize,
    pub query: &'a Tensor,
    pub caption: &'a [usize],
    pub target: &'a Tensor,
}

struct Builder {
    images: Vec<(ImageEntry, Tensor)>,
}

impl Builder {
    fn add(&mut self, role: ImageRole, t: Tensor) -> usize {
        let id = self.images.len();
        let path = format!("{IMAGE_DIR}/{id:06}.tnsr");
        self.images.push((ImageEntry { id, path, role }, t));
        id
    }

    fn eval_split(
        &mut self,
        rng: &mut ChaCha8Rng,
        spec: &SynthSpec,
        transforms: &[Transform],
        size: usize,
        bases: usize,
    ) -> Result<EvalSplit> {
        let per_base = SynthSpec::captions_per_base(size, bases);
        let mut captions: Vec<Vec<usize>> = Vec::with_capacity(per_base);
        let mut seen = HashSet::new();
        while captions.len() < per_base {
            let c = random_caption(rng, spec);
            if seen.insert(c.clone()) {
                captions.push(c);
            }
        }
        let mut catalog = Vec::with_capacity(size);
        let mut cells = Vec::with_capacity(bases * per_base);
        for _ in 0..bases {
            let base = base_pattern(rng, spec.image_size);
            let base_id = self.add(ImageRole::Base, base.clone());
            catalog.push(base_id);
            for caption in &captions {
                let target = apply_caption(&base, caption, transforms)?;
                let target_id = self.add(ImageRole::Target, target);
                catalog.push(target_id);
                cells.push(Triplet {
                    query: base_id,
                    caption: caption.clone(),
                    target: target_id,
                });
            }
        }
        let n_queries = ((cells.len() as f64 * spec.query_fraction).round() as usize).clamp(1, cells.len());
        cells.shuffle(rng);
        cells.truncate(n_queries);
        cells.sort_by_key(|t| t.target);
        Ok(EvalSplit { catalog, queries: cells })
    }
}

/// Builds the manifest and images for `spec` without touching the disk.
pub fn synthesize(spec: &SynthSpec) -> Result<(Manifest, Vec<Tensor>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let transforms: Vec<Transform> = (0..spec.vocab)
        .map(|k| Transform::for_token(k, spec.seed, spec.image_size[0]))
        .collect();
    let mut b = Builder { images: Vec::new() };

    let bases: Vec<(usize, Tensor)> = (0..spec.train_bases)
        .map(|_| {
            let t = base_pattern(&mut rng, spec.image_size);
            (b.add(ImageRole::Base, t.clone()), t)
        })
        .collect();
    let mut train = Vec::with_capacity(spec.train_triplets);
    for i in 0..spec.train_triplets {
        let (query, base) = &bases[i % bases.len()];
        let caption = random_caption(&mut rng, spec);
        let target = b.add(ImageRole::Target, apply_caption(base, &caption, &transforms)?);
        train.push(Triplet {
            query: *query,
            caption,
            target,
        });
    }
    let val = b.eval_split(&mut rng, spec, &transforms, spec.val_catalog, spec.val_bases)?;
    let test = b.eval_split(&mut rng, spec, &transforms, spec.catalog, spec.catalog_bases)?;

    let (entries, tensors): (Vec<_>, Vec<_>) = b.images.into_iter().unzip();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        spec: spec.clone(),
        transforms,
        images: entries,
        train,
        val,
        test,
    };
    Ok((manifest, tensors))
}

/// Writes a freshly generated dataset under `out`.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    let (manifest, tensors) = synthesize(spec)?;
    let image_dir = out.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for (entry, t) in manifest.images.iter().zip(&tensors) {
        write_tnsr(&out.join(&entry.path), t)?;
    }
    let path = out.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, format!("bad manifest: {e}")))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported format_version {}", manifest.format_version),
        ));
    }
    Ok(manifest)
}

impl Dataset {
    /// Loads `dir/manifest.json` and every image it lists.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = load_manifest(&manifest_path)?;
        let mut images = HashMap::with_capacity(manifest.images.len());
        for entry in &manifest.images {
            let t = read_tnsr(&dir.join(&entry.path))?;
            if t.shape() != manifest.spec.image_size {
                return Err(Error::format(
                    dir.join(&entry.path),
                    format!("image shape {:?}, manifest says {:?}", t.shape(), manifest.spec.image_size),
                ));
            }
            if images.insert(entry.id, t).is_some() {
                return Err(Error::format(&manifest_path, format!("duplicate image id {}", entry.id)));
            }
        }
        let ds = Dataset { manifest, images };
        ds.check_references(&manifest_path)?;
        Ok(ds)
    }

    /// In-memory dataset, mainly for tests and benchmarks.
    pub fn from_parts(manifest: Manifest, tensors: Vec<Tensor>) -> Result<Dataset> {
        let images = manifest.images.iter().map(|e| e.id).zip(tensors).collect();
        let ds = Dataset { manifest, images };
        ds.check_references(Path::new("<memory>"))?;
        Ok(ds)
    }

    fn check_references(&self, origin: &Path) -> Result<()> {
        let m = &self.manifest;
        let vocab = m.spec.vocab;
        let splits = [&m.val, &m.test];
        let triplets = m.train.iter().chain(splits.iter().flat_map(|s| s.queries.iter()));
        for t in triplets {
            if t.query == t.target {
                return Err(Error::format(origin, format!("triplet with query == target ({})", t.query)));
            }
            for id in [t.query, t.target] {
                if !self.images.contains_key(&id) {
                    return Err(Error::format(origin, format!("unknown image id {id}")));
                }
            }
            if t.caption.is_empty() || t.caption.iter().any(|&k| k >= vocab) {
                return Err(Error::format(origin, format!("invalid caption {:?}", t.caption)));
            }
        }
        for s in splits {
            if let Some(id) = s.catalog.iter().find(|id| !self.images.contains_key(id)) {
                return Err(Error::format(origin, format!("catalog references unknown image {id}")));
            }
        }
        Ok(())
    }

    pub fn image(&self, id: usize) -> Result<&Tensor> {
        self.images
            .get(&id)
            .ok_or_else(|| Error::Usage(format!("unknown image id {id}")))
    }

    pub fn spec(&self) -> &SynthSpec {
        &self.manifest.spec
    }

    pub fn train(&self) -> &[Triplet] {
        &self.manifest.train
    }

    pub fn split(&self, which: Split) -> &EvalSplit {
        match which {
            Split::Val => &self.manifest.val,
            Split::Test => &self.manifest.test,
        }
    }

    pub fn example<'a>(&'a self, t: &'a Triplet) -> Result<TripletExample<'a>> {
        Ok(TripletExample {
            query_id: t.query,
            target_id: t.target,
            query: self.image(t.query)?,
            caption: &t.caption,
            target: self.image(t.target)?,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Index batches over `n` items in a seeded shuffled order; the final short
/// batch is kept.
pub fn batch_indices(n: usize, batch: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks(batch).map(<[usize]>::to_vec).collect())
}

/// Stream of triplet batches for one epoch.
pub fn batch_iter(ds: &Dataset, batch: usize, seed: u64) -> Result<impl Iterator<Item = Vec<&Triplet>>> {
    let train = ds.train();
    Ok(batch_indices(train.len(), batch, seed)?
        .into_iter()
        .map(move |idx| idx.into_iter().map(|i| &train[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SynthSpec {
        SynthSpec {
            image_size: [3, 8, 8],
            train_triplets: 20,
            train_bases: 5,
            catalog: 50,
            catalog_bases: 5,
            val_catalog: 12,
            val_bases: 3,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn spec_validation() {
        assert!(SynthSpec::default().validate().is_ok());
        assert!(SynthSpec { min_tokens: 0, ..tiny_spec() }.validate().is_err());
        assert!(SynthSpec { vocab: 2, ..tiny_spec() }.validate().is_err());
        assert!(SynthSpec { catalog: 40, ..tiny_spec() }.validate().is_err());
        assert!(SynthSpec { catalog: 51, ..tiny_spec() }.validate().is_err());
    }

    #[test]
    fn invert_is_involutive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = base_pattern(&mut rng, [3, 8, 8]);
        for q in 0..4 {
            let t = Transform::InvertQuadrant { quadrant: q };
            let mut twice = img.clone();
            t.apply(&mut twice).unwrap();
            assert_ne!(twice, img);
            t.apply(&mut twice).unwrap();
            assert_eq!(twice, img);
        }
    }

    #[test]
    fn quadrant_edit_is_local() {
        let img = Tensor::full([1, 4, 4], 1.0).unwrap();
        let mut out = img.clone();
        Transform::InvertQuadrant { quadrant: 3 }.apply(&mut out).unwrap();
        let changed: Vec<usize> = (0..16).filter(|&i| out.data()[i] != 1.0).collect();
        assert_eq!(changed, vec![10, 11, 14, 15]);
    }

    #[test]
    fn tokens_cover_all_edit_kinds() {
        let ts: Vec<Transform> = (0..12).map(|k| Transform::for_token(k, 0, 3)).collect();
        assert!(ts.iter().any(|t| matches!(t, Transform::Tint { .. })));
        assert!(ts.iter().any(|t| matches!(t, Transform::Stripes { .. })));
        assert!(ts.iter().any(|t| matches!(t, Transform::InvertQuadrant { .. })));
        assert_eq!(Transform::for_token(4, 9, 3), Transform::for_token(4, 9, 3));
    }

    #[test]
    fn synthesized_layout() {
        let spec = tiny_spec();
        let (m, imgs) = synthesize(&spec).unwrap();
        assert_eq!(m.images.len(), imgs.len());
        assert_eq!(m.train.len(), 20);
        assert_eq!(m.test.catalog.len(), 50);
        assert_eq!(m.val.catalog.len(), 12);
        // 5 bases × 9 captions, every cell a query by default.
        assert_eq!(m.test.queries.len(), 45);
        let half = synthesize(&SynthSpec { query_fraction: 0.5, ..spec.clone() }).unwrap().0;
        assert_eq!(half.test.queries.len(), 23);
        for t in &m.train {
            assert_ne!(t.query, t.target);
            assert!((1..=3).contains(&t.caption.len()));
            let distinct: HashSet<_> = t.caption.iter().collect();
            assert_eq!(distinct.len(), t.caption.len());
            let regenerated = apply_caption(&imgs[t.query], &t.caption, &m.transforms).unwrap();
            assert_eq!(regenerated, imgs[t.target]);
        }
        let catalog: HashSet<_> = m.test.catalog.iter().collect();
        assert!(m.test.queries.iter().all(|q| catalog.contains(&q.target) && catalog.contains(&q.query)));
    }

    #[test]
    fn batches_keep_short_tail() {
        let b = batch_indices(100, 32, 5).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![32, 32, 32, 4]);
        assert_eq!(b, batch_indices(100, 32, 5).unwrap());
        let mut all: Vec<usize> = b.concat();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(batch_indices(10, 0, 0).is_err());
    }
}
