//! Train-then-evaluate runs: single runs, config arms repeated over seeds,
//! and operator grids. Runs are independent, so they are spread over worker
//! threads; every run owns its model, parameters and RNG, and results are
//! merged back in submission order.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde_json::Value;

use crate::config::{Config, Variant};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::eval::{evaluate_split, RecallRow, SplitMode};
use crate::hfa::AggregatorKind;
use crate::model::Model;
use crate::train::{train, TrainOutcome};
use crate::vlc::CompositionKind;

/// Worker threads to use when the caller has no preference.
pub fn default_threads() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Evaluates `job(0..n)` on up to `threads` workers; the output is in index
/// order regardless of completion order.
pub fn run_parallel<T, F>(n: usize, threads: usize, job: F) -> Vec<Result<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    let workers = threads.clamp(1, n.max(1));
    if workers == 1 {
        return (0..n).map(&job).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                slots.lock().expect("no worker panics while holding the lock")[i] = Some(out);
            });
        }
    });
    slots
        .into_inner()
        .expect("workers joined")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub seed: u64,
    pub row: RecallRow,
    pub steps: usize,
    pub train_time: Duration,
}

/// Trains a fresh model (initialised from `cfg.seed`) and scores the test split.
pub fn train_and_evaluate(cfg: &Config, ds: &Dataset, mode: SplitMode, ks: &[usize]) -> Result<(TrainOutcome, RunResult)> {
    let spec = ds.spec();
    let model = Model::new(cfg, spec.image_size, spec.vocab)?;
    let start = Instant::now();
    let outcome = train(cfg, &model, ds, model.init_params(cfg.seed))?;
    let train_time = start.elapsed();
    let row = evaluate_split(&model, &outcome.store, ds, Split::Test, mode, ks, None)?;
    let result = RunResult {
        seed: cfg.seed,
        row,
        steps: outcome.steps,
        train_time,
    };
    Ok((outcome, result))
}

/// A labelled configuration to be repeated over seeds.
#[derive(Clone, Debug)]
pub struct Arm {
    pub label: String,
    pub config: Config,
}

impl Arm {
    pub fn new(label: impl Into<String>, config: Config) -> Arm {
        Arm {
            label: label.into(),
            config,
        }
    }

    /// The base config with `model.variant` replaced.
    pub fn variant(base: &Config, variant: Variant) -> Arm {
        let mut config = base.clone();
        config.model.variant = variant;
        Arm::new(variant.as_str(), config)
    }
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub label: String,
    pub runs: Vec<RunResult>,
    /// Per-K recall averaged over the runs.
    pub mean: Vec<(usize, f64)>,
}

impl ArmResult {
    pub fn mean_recall(&self, k: usize) -> Option<f64> {
        self.mean.iter().find(|(kk, _)| *kk == k).map(|(_, r)| *r)
    }

    fn from_runs(label: String, runs: Vec<RunResult>, ks: &[usize]) -> ArmResult {
        let n = runs.len().max(1) as f64;
        let mean = ks
            .iter()
            .map(|&k| (k, runs.iter().filter_map(|r| r.row.recall(k)).sum::<f64>() / n))
            .collect();
        ArmResult { label, runs, mean }
    }
}

/// Runs every arm once per `(seed, dataset)` pair, with the arm's seed
/// replaced by the pair's. Pairs may share a dataset.
pub fn run_arms(
    arms: &[Arm],
    datasets: &[(u64, &Dataset)],
    mode: SplitMode,
    ks: &[usize],
    threads: usize,
) -> Result<Vec<ArmResult>> {
    if datasets.is_empty() {
        return Err(Error::Usage("at least one seed is required".into()));
    }
    let per = datasets.len();
    let results = run_parallel(arms.len() * per, threads, |i| {
        let (arm, (seed, ds)) = (&arms[i / per], datasets[i % per]);
        let mut cfg = arm.config.clone();
        cfg.seed = seed;
        let (_, run) = train_and_evaluate(&cfg, ds, mode, ks)?;
        log::info!(
            "{} seed {seed}: R@10 {:.2} ({} steps, {:.1?})",
            arm.label,
            run.row.recall(10).unwrap_or(f64::NAN),
            run.steps,
            run.train_time
        );
        Ok(run)
    });
    let mut results = results.into_iter();
    arms.iter()
        .map(|arm| {
            let runs = results.by_ref().take(per).collect::<Result<Vec<_>>>()?;
            Ok(ArmResult::from_runs(arm.label.clone(), runs, ks))
        })
        .collect()
}

/// One swept config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct GridAxis {
    pub key: String,
    pub values: Vec<Value>,
}

impl GridAxis {
    /// Every value of an enumerated key: `hfa.kind`, `vlc.kind`,
    /// `model.variant` or a boolean key such as `hfa.symmetric_heads`.
    pub fn full(key: &str) -> Result<GridAxis> {
        let values: Vec<Value> = match key {
            "hfa.kind" => AggregatorKind::ALL.iter().map(|k| k.as_str().into()).collect(),
            "vlc.kind" => CompositionKind::ALL.iter().map(|k| k.as_str().into()).collect(),
            "model.variant" => [Variant::ImageOnly, Variant::TextOnly, Variant::ConcatBaseline, Variant::Trace]
                .iter()
                .map(|v| v.as_str().into())
                .collect(),
            other => match Config::default().to_flat().get(other) {
                Some(Value::Bool(_)) => vec![false.into(), true.into()],
                Some(_) => {
                    return Err(Error::Usage(format!(
                        "`{other}` has no fixed value set; list values as `{other}=a|b|c`"
                    )))
                }
                None => return Err(Error::Usage(format!("unknown config key `{other}`"))),
            },
        };
        Ok(GridAxis {
            key: key.to_string(),
            values,
        })
    }

    /// `key` for an enumerated key, or `key=v1|v2|…` with JSON (or bare
    /// string) values.
    pub fn parse(spec: &str) -> Result<GridAxis> {
        let Some((key, list)) = spec.split_once('=') else {
            return GridAxis::full(spec.trim());
        };
        let values = list
            .split('|')
            .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
            .collect::<Vec<Value>>();
        if values.is_empty() || list.is_empty() {
            return Err(Error::Usage(format!("grid axis `{spec}` lists no values")));
        }
        Ok(GridAxis {
            key: key.trim().to_string(),
            values,
        })
    }
}

/// Parses a comma-separated grid such as `hfa.kind,vlc.kind`.
pub fn parse_grid(spec: &str) -> Result<Vec<GridAxis>> {
    let axes = spec
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(GridAxis::parse)
        .collect::<Result<Vec<_>>>()?;
    if axes.is_empty() {
        return Err(Error::Usage("empty grid".into()));
    }
    Ok(axes)
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    /// Position in the row-major enumeration of the grid.
    pub index: usize,
    pub settings: Vec<(String, Value)>,
    pub result: ArmResult,
}

impl AblationCell {
    pub fn label(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// One grid cell: its `(key, value)` settings and the resulting config.
pub type GridCell = (Vec<(String, Value)>, Config);

/// Row-major cell configs for `axes` applied to `base`.
pub fn grid_cells(base: &Config, axes: &[GridAxis]) -> Result<Vec<GridCell>> {
    let mut cells = vec![(Vec::new(), base.clone())];
    for axis in axes {
        let mut next = Vec::with_capacity(cells.len() * axis.values.len());
        for (settings, cfg) in &cells {
            for v in &axis.values {
                let mut cfg = cfg.clone();
                cfg.set(&axis.key, v.clone())?;
                let mut settings = settings.clone();
                settings.push((axis.key.clone(), v.clone()));
                next.push((settings, cfg));
            }
        }
        cells = next;
    }
    Ok(cells)
}

/// Trains every grid cell on `ds` once per seed (the same seeds for every
/// cell) and returns the cells sorted by mean R@10, best first; ties keep
/// grid order.
pub fn ablate(
    base: &Config,
    ds: &Dataset,
    axes: &[GridAxis],
    seeds: &[u64],
    ks: &[usize],
    threads: usize,
) -> Result<Vec<AblationCell>> {
    let mut ks = ks.to_vec();
    if !ks.contains(&10) {
        ks.push(10);
    }
    let cells = grid_cells(base, axes)?;
    let arms: Vec<Arm> = cells
        .iter()
        .enumerate()
        .map(|(i, (_, cfg))| Arm::new(format!("cell {i}"), cfg.clone()))
        .collect();
    let datasets: Vec<(u64, &Dataset)> = seeds.iter().map(|&s| (s, ds)).collect();
    let results = run_arms(&arms, &datasets, SplitMode::Original, &ks, threads)?;
    let mut out: Vec<AblationCell> = cells
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(index, ((settings, _), result))| AblationCell { index, settings, result })
        .collect();
    out.sort_by(|a, b| {
        let ra = a.result.mean_recall(10).unwrap_or(f64::NEG_INFINITY);
        let rb = b.result.mean_recall(10).unwrap_or(f64::NEG_INFINITY);
        rb.total_cmp(&ra).then(a.index.cmp(&b.index))
    });
    Ok(out)
}
