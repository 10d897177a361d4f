//! The finite-difference suite behind `grad-check`: randomized checks of every
//! differentiable graph op, per-module checks, and the full
//! transform → aggregate → compose → total-loss chain.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoders::TokenSequence;
use crate::error::Result;
use crate::hfa::{AggregatorKind, NormMode};
use crate::losses::{self, LossWeights};
use crate::model::Model;
use crate::params::{Binder, ParamStore};
use crate::sft::{self, GemExponent};
use crate::tensor::gradcheck::{check, numeric_gradient, relative_error, CheckInput, CheckReport, DEFAULT_STEP};
use crate::tensor::{Fault, Graph, Var};
use crate::vlc::CompositionKind;

pub const TOLERANCE: f64 = 1e-4;

/// Random draws per op.
pub const OP_TRIALS: usize = 10;

/// Input redraws allowed per module group before a draw is reported as is.
const MAX_DRAWS: u64 = 16;

/// Agreement required between step sizes `h` and `h/2`, as a fraction of
/// [`TOLERANCE`]. Truncation error shrinks 4× when the step halves, so this
/// bounds the error at `h` to about a third of the tolerance.
const SMOOTH_FRACTION: f64 = 0.25;

pub const MODULES: [&str; 7] = ["ops", "encoders", "sft", "hfa", "vlc", "losses", "chain"];

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync>;

pub struct Case {
    pub module: &'static str,
    pub name: String,
    pub inputs: Vec<CheckInput>,
    build: Build,
}

impl Case {
    fn new<F>(module: &'static str, name: impl Into<String>, inputs: Vec<CheckInput>, build: F) -> Case
    where
        F: Fn(&mut Graph, &[Var]) -> Result<Var> + Send + Sync + 'static,
    {
        Case {
            module,
            name: name.into(),
            inputs,
            build: Box::new(build),
        }
    }

    /// Whether the difference quotient is stable at this point: central
    /// differences at `h` and `h/2` agree to a small fraction of the
    /// tolerance. Draws landing on a kink (ReLU, clamp) or in a region of
    /// extreme curvature (near-constant BatchNorm columns) fail this and are
    /// redrawn; the analytic gradient plays no part, so an injected fault
    /// cannot be screened away.
    pub fn is_smooth(&self) -> Result<bool> {
        let a = numeric_gradient(&self.inputs, DEFAULT_STEP, &self.build)?;
        let b = numeric_gradient(&self.inputs, DEFAULT_STEP / 2.0, &self.build)?;
        Ok(a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .all(|(&x, &y)| relative_error(x, y) <= SMOOTH_FRACTION * TOLERANCE))
    }

    pub fn run(&self, fault: Option<Fault>) -> Result<CaseResult> {
        let report = check(&self.inputs, DEFAULT_STEP, fault, &self.build)?;
        Ok(CaseResult {
            module: self.module,
            case: self.name.clone(),
            report,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub module: &'static str,
    pub case: String,
    pub report: CheckReport,
}

#[derive(Clone, Debug)]
pub struct ModuleSummary {
    pub module: &'static str,
    pub cases: usize,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_case: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
    pub elapsed: Duration,
}

impl SuiteReport {
    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.report.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.cases.iter().all(|c| c.report.passes(tolerance))
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&CaseResult> {
        self.cases.iter().filter(|c| !c.report.passes(tolerance)).collect()
    }

    /// One row per module that ran, in [`MODULES`] order.
    pub fn modules(&self) -> Vec<ModuleSummary> {
        MODULES
            .iter()
            .filter_map(|&m| {
                let cases: Vec<&CaseResult> = self.cases.iter().filter(|c| c.module == m).collect();
                let worst = cases.iter().max_by(|a, b| a.report.max_rel_err.total_cmp(&b.report.max_rel_err))?;
                Some(ModuleSummary {
                    module: m,
                    cases: cases.len(),
                    checked: cases.iter().map(|c| c.report.checked).sum(),
                    max_rel_err: worst.report.max_rel_err,
                    worst_case: worst.case.clone(),
                })
            })
            .collect()
    }
}

/// Every case of the suite, in module order.
pub fn cases(seed: u64) -> Result<Vec<Case>> {
    let mut out = op_cases(seed, OP_TRIALS);
    out.extend(module_cases(seed)?);
    out.push(chain_case(seed)?);
    Ok(out)
}

pub fn run(seed: u64, fault: Option<Fault>) -> Result<SuiteReport> {
    let start = Instant::now();
    let results = cases(seed)?.iter().map(|c| c.run(fault)).collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport {
        cases: results,
        elapsed: start.elapsed(),
    })
}

// ---------------------------------------------------------------------------
// sampling helpers

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Random sign, magnitude in `[lo, hi)`: keeps draws off kinks and poles at 0.
fn signed(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(lo..hi);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=8)
}

fn input(name: &str, value: Vec<f64>, shape: &[usize]) -> CheckInput {
    CheckInput::new(name, value, shape.to_vec())
}

/// `Σ r ⊙ out` with fixed pseudo-random weights, so that every output entry
/// contributes a distinct amount to the checked scalar.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = g.constant(uniform(&mut rng, n, -1.0, 1.0), shape)?;
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

// ---------------------------------------------------------------------------
// op level

/// `trials` randomized cases for every differentiable op; dimensions are
/// drawn from `1..=8`.
pub fn op_cases(seed: u64, trials: usize) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6f70);
    let mut out = Vec::new();
    for t in 0..trials {
        out.extend(op_trial(&mut rng, t));
    }
    out
}

fn op_trial(rng: &mut ChaCha8Rng, t: usize) -> Vec<Case> {
    let mut cases = Vec::new();
    let ps: u64 = rng.gen();
    let (m, n, k) = (dim(rng), dim(rng), dim(rng));
    let mn = [m, n];
    let mut add = |name: &str, inputs: Vec<CheckInput>, f: Build| {
        cases.push(Case {
            module: "ops",
            name: format!("{name}#{t}"),
            inputs,
            build: f,
        });
    };
    let ab = |rng: &mut ChaCha8Rng| {
        vec![
            input("a", uniform(rng, m * n, -2.0, 2.0), &mn),
            input("b", uniform(rng, m * n, -2.0, 2.0), &mn),
        ]
    };

    add("add", ab(rng), Box::new(move |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, ps)
    }));
    add("sub", ab(rng), Box::new(move |g, v| {
        let y = g.sub(v[0], v[1])?;
        probe(g, y, ps)
    }));
    add("mul", ab(rng), Box::new(move |g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, ps)
    }));

    let c = rng.gen_range(-2.0..2.0);
    let x = vec![input("x", uniform(rng, m * n, -2.0, 2.0), &mn)];
    add("scale", x.clone(), Box::new(move |g, v| {
        let y = g.scale(v[0], c);
        probe(g, y, ps)
    }));
    add("add_scalar", x.clone(), Box::new(move |g, v| {
        let y = g.add_scalar(v[0], c);
        probe(g, y, ps)
    }));
    let xs = vec![x[0].clone(), input("s", uniform(rng, 1, -2.0, 2.0), &[1])];
    add("mul_scalar", xs, Box::new(move |g, v| {
        let y = g.mul_scalar(v[0], v[1])?;
        probe(g, y, ps)
    }));

    let mm = vec![
        input("a", uniform(rng, m * k, -1.0, 1.0), &[m, k]),
        input("b", uniform(rng, k * n, -1.0, 1.0), &[k, n]),
    ];
    add("matmul", mm, Box::new(move |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, ps)
    }));
    let mv = vec![
        input("w", uniform(rng, m * k, -1.0, 1.0), &[m, k]),
        input("x", uniform(rng, k, -1.0, 1.0), &[k]),
        input("b", uniform(rng, m, -1.0, 1.0), &[m]),
    ];
    add("matvec", mv[..2].to_vec(), Box::new(move |g, v| {
        let y = g.matvec(v[0], v[1])?;
        probe(g, y, ps)
    }));
    add("affine", mv, Box::new(move |g, v| {
        let y = g.affine(v[0], v[1], v[2])?;
        probe(g, y, ps)
    }));

    add("transpose", x.clone(), Box::new(move |g, v| {
        let y = g.transpose(v[0])?;
        probe(g, y, ps)
    }));
    add("reshape", x.clone(), Box::new(move |g, v| {
        let y = g.reshape(v[0], [n, m])?;
        probe(g, y, ps)
    }));
    let m2 = dim(rng);
    let parts = vec![x[0].clone(), input("y", uniform(rng, m2 * n, -2.0, 2.0), &[m2, n])];
    add("concat", parts, Box::new(move |g, v| {
        let y = g.concat(&[v[0], v[1]])?;
        probe(g, y, ps)
    }));
    let rows: Vec<CheckInput> = (0..3).map(|i| input(&format!("r{i}"), uniform(rng, n, -2.0, 2.0), &[n])).collect();
    add("stack", rows, Box::new(move |g, v| {
        let y = g.stack(v)?;
        probe(g, y, ps)
    }));
    let ri = rng.gen_range(0..m);
    add("row", x.clone(), Box::new(move |g, v| {
        let y = g.row(v[0], ri)?;
        probe(g, y, ps)
    }));
    add("sum", x.clone(), Box::new(move |g, v| {
        let y = g.sum(v[0]);
        Ok(g.scale(y, 0.5))
    }));
    add("mean", x.clone(), Box::new(move |g, v| Ok(g.mean(v[0]))));
    let axis = rng.gen_range(0..2);
    add("mean_axis", x.clone(), Box::new(move |g, v| {
        let y = g.mean_axis(v[0], axis)?;
        probe(g, y, ps)
    }));

    type Unary = fn(&mut Graph, Var) -> Var;
    let smooth: [(&str, Unary, f64, f64, bool); 9] = [
        ("exp", Graph::exp, -2.0, 2.0, false),
        ("log", Graph::log, 0.5, 3.0, false),
        ("sigmoid", Graph::sigmoid, -3.0, 3.0, false),
        ("tanh", Graph::tanh, -2.0, 2.0, false),
        ("relu", Graph::relu, 0.05, 2.0, true),
        ("sqrt", Graph::sqrt, 0.5, 3.0, false),
        ("softplus", Graph::softplus, -3.0, 3.0, false),
        ("recip", Graph::recip, 0.5, 2.0, true),
        ("l2_norm", Graph::l2_norm, 0.2, 1.5, true),
    ];
    for (name, op, lo, hi, sign) in smooth {
        let values = if sign { signed(rng, m * n, lo, hi) } else { uniform(rng, m * n, lo, hi) };
        add(name, vec![input("x", values, &mn)], Box::new(move |g, v| {
            let y = op(g, v[0]);
            probe(g, y, ps)
        }));
    }

    let pos = vec![input("x", uniform(rng, m * n, 0.5, 2.0), &mn)];
    let c = rng.gen_range(-2.0..3.0);
    add("powf", pos.clone(), Box::new(move |g, v| {
        let y = g.powf(v[0], c);
        probe(g, y, ps)
    }));
    let pp = vec![pos[0].clone(), input("p", uniform(rng, 1, 0.5, 3.0), &[1])];
    add("pow", pp, Box::new(move |g, v| {
        let y = g.pow(v[0], v[1])?;
        probe(g, y, ps)
    }));
    // Draws stay at least 0.05 away from the clamp bounds.
    let cl: Vec<f64> = (0..m * n)
        .map(|_| match rng.gen_range(0..3) {
            0 => rng.gen_range(-2.0..-0.55),
            1 => rng.gen_range(-0.45..0.45),
            _ => rng.gen_range(0.55..2.0),
        })
        .collect();
    add("clamp", vec![input("x", cl, &mn)], Box::new(move |g, v| {
        let y = g.clamp(v[0], -0.5, 0.5);
        probe(g, y, ps)
    }));

    let axis = rng.gen_range(0..2);
    let temp = rng.gen_range(0.5..8.0);
    add("softmax", vec![input("x", uniform(rng, m * n, -3.0, 3.0), &mn)], Box::new(move |g, v| {
        let y = g.softmax(v[0], axis, temp)?;
        probe(g, y, ps)
    }));
    add("normalize", vec![input("x", signed(rng, n, 0.2, 1.5), &[n])], Box::new(move |g, v| {
        let y = g.normalize(v[0])?;
        probe(g, y, ps)
    }));
    let a = uniform(rng, n, -1.0, 1.0);
    let b: Vec<f64> = a.iter().zip(signed(rng, n, 0.2, 1.0)).map(|(x, d)| x + d).collect();
    add("distance", vec![input("a", a, &[n]), input("b", b, &[n])], Box::new(move |g, v| {
        let d = g.distance(v[0], v[1])?;
        Ok(g.scale(d, 1.5))
    }));

    let (c, h, w) = (dim(rng), dim(rng), dim(rng));
    let xc = vec![
        input("v", uniform(rng, c * h * w, -1.0, 1.0), &[c, h, w]),
        input("k", uniform(rng, c, -1.0, 1.0), &[c]),
    ];
    add("xcorr", xc, Box::new(move |g, v| {
        let y = g.xcorr(v[0], v[1])?;
        probe(g, y, ps)
    }));

    let (kh, kw) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let stride = rng.gen_range(1..=2);
    let pad = rng.gen_range(0..=1);
    let (ih, iw) = (rng.gen_range(kh.max(2)..=8), rng.gen_range(kw.max(2)..=8));
    let (ci, co) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
    let conv = vec![
        input("x", uniform(rng, ci * ih * iw, -1.0, 1.0), &[ci, ih, iw]),
        input("w", uniform(rng, co * ci * kh * kw, -1.0, 1.0), &[co, ci, kh, kw]),
        input("b", uniform(rng, co, -1.0, 1.0), &[co]),
    ];
    add("conv2d", conv, Box::new(move |g, v| {
        let y = g.conv2d(v[0], v[1], v[2], stride, pad)?;
        probe(g, y, ps)
    }));

    let bias_m = vec![x[0].clone(), input("b", uniform(rng, m, -1.0, 1.0), &[m])];
    add("add_col_bias", bias_m, Box::new(move |g, v| {
        let y = g.add_col_bias(v[0], v[1])?;
        probe(g, y, ps)
    }));
    let rows_n = vec![x[0].clone(), input("s", uniform(rng, n, -1.5, 1.5), &[n])];
    add("mul_rows", rows_n.clone(), Box::new(move |g, v| {
        let y = g.mul_rows(v[0], v[1])?;
        probe(g, y, ps)
    }));
    add("add_rows", rows_n, Box::new(move |g, v| {
        let y = g.add_rows(v[0], v[1])?;
        probe(g, y, ps)
    }));

    // Batch statistics are ill-conditioned for near-constant columns, so
    // each column is redrawn until its spread is comfortably non-zero.
    let bm = rng.gen_range(2..=8);
    let mut bx = vec![0.0; bm * n];
    for j in 0..n {
        loop {
            let col = uniform(rng, bm, -2.0, 2.0);
            let mean = col.iter().sum::<f64>() / bm as f64;
            let var = col.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / bm as f64;
            if var.sqrt() >= 0.3 {
                for (i, x) in col.into_iter().enumerate() {
                    bx[i * n + j] = x;
                }
                break;
            }
        }
    }
    add("batch_norm", vec![input("x", bx, &[bm, n])], Box::new(move |g, v| {
        let y = g.batch_norm(v[0], 1e-5)?;
        probe(g, y, ps)
    }));

    cases
}

// ---------------------------------------------------------------------------
// module level

fn tiny_config(hfa: AggregatorKind, vlc: CompositionKind) -> Config {
    let mut cfg = Config::default();
    cfg.pyramid.channels = vec![4, 8];
    cfg.pyramid.size = [4, 4];
    cfg.text.embed_dim = 4;
    cfg.text.hidden = 5;
    cfg.hfa.kind = hfa;
    cfg.vlc.kind = vlc;
    cfg
}

const TINY_IMAGE: [usize; 3] = [3, 8, 8];
const TINY_VOCAB: usize = 6;

fn tiny_model(hfa: AggregatorKind, vlc: CompositionKind) -> Result<Model> {
    Model::new(&tiny_config(hfa, vlc), TINY_IMAGE, TINY_VOCAB)
}

/// Trainable parameters under `prefixes` as check inputs. The attention
/// residual weight starts at zero, which would hide the attention branch, so
/// it is moved off zero.
fn param_inputs(store: &ParamStore, prefixes: &[&str]) -> (Vec<CheckInput>, Vec<String>) {
    let mut inputs = Vec::new();
    let mut names = Vec::new();
    for (name, t) in store.iter() {
        if !t.requires_grad() || !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let mut value = t.to_f64();
        if name.ends_with(".gamma") {
            value = vec![0.5];
        }
        inputs.push(CheckInput::new(name, value, t.shape().to_vec()));
        names.push(name.to_string());
    }
    (inputs, names)
}

fn bind_all<'a>(store: &'a ParamStore, names: &[String], vars: &[Var]) -> Binder<'a> {
    let mut b = Binder::new(store);
    for (name, &v) in names.iter().zip(vars) {
        b.bind(name.clone(), v);
    }
    b
}

/// Positive feature volumes, as produced after the encoder's ReLU.
fn volume(rng: &mut ChaCha8Rng, name: &str, c: usize, h: usize, w: usize) -> CheckInput {
    input(name, uniform(rng, c * h * w, 0.1, 1.0), &[c, h, w])
}

/// Redraws `make`'s inputs (the parameters stay fixed by `seed`) until every
/// case is smooth at the checking scale, or gives up and returns the last
/// draw, which will then be reported as it is.
fn screened<F>(seed: u64, salt: u64, make: F) -> Result<Vec<Case>>
where
    F: Fn(&mut ChaCha8Rng) -> Result<Vec<Case>>,
{
    let mut last = Vec::new();
    for draw in 0..MAX_DRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
        rng.set_stream(draw);
        let cases = make(&mut rng)?;
        let mut smooth = true;
        for c in &cases {
            if !c.is_smooth()? {
                smooth = false;
                break;
            }
        }
        if smooth {
            return Ok(cases);
        }
        log::debug!("gradient suite: redrawing non-smooth inputs (draw {draw})");
        last = cases;
    }
    Ok(last)
}

pub fn module_cases(seed: u64) -> Result<Vec<Case>> {
    let mut cases = screened(seed, 0x74, |rng| Ok(vec![text_encoder_case(rng, seed)?]))?;
    cases.extend(screened(seed, 0x73, |rng| sft_cases(rng, seed))?);
    cases.extend(screened(seed, 0x68, |rng| hfa_cases(rng, seed))?);
    cases.extend(screened(seed, 0x76, |rng| vlc_cases(rng, seed))?);
    cases.extend(screened(seed, 0x6c, |rng| loss_cases(rng, seed))?);
    Ok(cases)
}

fn text_encoder_case(rng: &mut ChaCha8Rng, seed: u64) -> Result<Case> {
    let model = tiny_model(AggregatorKind::Lstm, CompositionKind::ResidualOffset)?;
    let store = model.init_params(seed);
    let (inputs, names) = param_inputs(&store, &["text."]);
    let ids: Vec<usize> = (0..4).map(|_| rng.gen_range(0..TINY_VOCAB)).collect();
    let tokens = TokenSequence::new(ids, TINY_VOCAB)?;
    Ok(Case::new("encoders", "text_gru", inputs, move |g, v| {
        let mut b = bind_all(&store, &names, v);
        let s = model.text.forward(g, &mut b, &tokens)?;
        let mut parts = vec![s.sentence];
        parts.extend(s.levels);
        let cat = g.concat(&parts)?;
        probe(g, cat, seed)
    }))
}

fn sft_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for learn_p in [false, true] {
        let mut cfg = tiny_config(AggregatorKind::Lstm, CompositionKind::ResidualOffset);
        cfg.sft.learn_p = learn_p;
        let model = Model::new(&cfg, TINY_IMAGE, TINY_VOCAB)?;
        let store = model.init_params(seed);
        let (mut inputs, names) = param_inputs(&store, &["sft1."]);
        let np = names.len();
        inputs.push(volume(rng, "v", 4, 4, 4));
        inputs.push(input("text", uniform(rng, 4, -1.0, 1.0), &[4]));
        let name = if learn_p { "query_level_learned_p" } else { "query_level" };
        let sft = model.sft.clone();
        cases.push(Case::new("sft", name, inputs, move |g, v| {
            let mut b = bind_all(&store, &names, &v[..np]);
            let attn = sft.attention(g, &mut b, 0)?;
            let beta = b.get(g, "sft1.beta")?;
            let p = sft.exponent(g, &mut b, 0)?;
            let o = sft::transform_query_level(g, v[np], v[np + 1], &attn, beta, p, sft.cfg.temperature)?;
            probe(g, o, seed)
        }));
    }
    let tv = vec![volume(rng, "v", 8, 2, 2), input("p", uniform(rng, 1, 1.5, 4.0), &[1])];
    cases.push(Case::new("sft", "target_level", tv, move |g, v| {
        let o = sft::transform_target_level(g, v[0], GemExponent::Learned(v[1]))?;
        probe(g, o, seed)
    }));
    Ok(cases)
}

fn hfa_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for kind in AggregatorKind::ALL {
        let model = tiny_model(kind, CompositionKind::ResidualOffset)?;
        let store = model.init_params(seed);
        let (mut inputs, names) = param_inputs(&store, &["hfa."]);
        let np = names.len();
        let batch = 3;
        for q in 0..batch {
            inputs.push(input(&format!("o1_{q}"), uniform(rng, 4, -1.0, 1.0), &[4]));
            inputs.push(input(&format!("o2_{q}"), uniform(rng, 8, -1.0, 1.0), &[8]));
        }
        let hfa = model.hfa.clone();
        cases.push(Case::new("hfa", format!("{}_query_and_target", kind.as_str()), inputs, move |g, v| {
            let mut b = bind_all(&store, &names, &v[..np]);
            let levels: Vec<Vec<Var>> = (0..batch).map(|q| vec![v[np + 2 * q], v[np + 2 * q + 1]]).collect();
            let (agg, _) = hfa.aggregate_query(g, &mut b, &levels, NormMode::Train)?;
            let tgt = hfa.aggregate_target(g, &mut b, &levels, NormMode::Train)?;
            let mut all = agg;
            all.extend(tgt);
            let cat = g.concat(&all)?;
            probe(g, cat, seed)
        }));
    }
    Ok(cases)
}

fn vlc_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Case>> {
    let mut cases = Vec::new();
    for kind in CompositionKind::ALL {
        let model = tiny_model(AggregatorKind::Lstm, kind)?;
        let store = model.init_params(seed);
        let (mut inputs, names) = param_inputs(&store, &["vlc."]);
        let np = names.len();
        inputs.push(input("f_agg", uniform(rng, 8, -1.0, 1.0), &[8]));
        inputs.push(input("sentence", uniform(rng, 5, -1.0, 1.0), &[5]));
        let vlc = model.vlc.clone();
        cases.push(Case::new("vlc", kind.as_str(), inputs, move |g, v| {
            let mut b = bind_all(&store, &names, &v[..np]);
            let f_text = vlc.project_text(g, &mut b, v[np + 1])?;
            let f_com = vlc.compose(g, &mut b, v[np], f_text)?;
            probe(g, f_com, seed)
        }));
    }
    Ok(cases)
}

fn loss_cases(rng: &mut ChaCha8Rng, seed: u64) -> Result<Vec<Case>> {
    let model = tiny_model(AggregatorKind::Lstm, CompositionKind::ResidualOffset)?;
    let store = model.init_params(seed);
    let mut cases = Vec::new();

    let emb = |rng: &mut ChaCha8Rng, name: &str| input(name, uniform(rng, 8, -1.0, 1.0), &[8]);
    let trip = vec![emb(rng, "f_com"), emb(rng, "pos"), emb(rng, "neg")];
    cases.push(Case::new("losses", "triplet", trip, |g, v| losses::triplet_loss(g, v[0], v[1], v[2])));

    let disc = model.disc.clone();
    let (mut inputs, names) = param_inputs(&store, &[losses::DISC_PREFIX]);
    let np = names.len();
    for i in 0..2 {
        inputs.push(emb(rng, &format!("f_tgt{i}")));
        inputs.push(emb(rng, &format!("f_com{i}")));
    }
    let st = store.clone();
    let d2 = disc.clone();
    cases.push(Case::new("losses", "critic", inputs.clone(), move |g, v| {
        let mut b = bind_all(&st, &names, &v[..np]);
        let w = d2.weights(g, &mut b, true)?;
        losses::critic_loss(g, &d2, &w, &[v[np], v[np + 2]], &[v[np + 1], v[np + 3]])
    }));
    let st = store.clone();
    cases.push(Case::new("losses", "generator", inputs[np..].to_vec(), move |g, v| {
        let mut b = Binder::new(&st);
        let w = disc.weights(g, &mut b, false)?;
        losses::generator_loss(g, &disc, &w, &[v[1], v[3]])
    }));

    let cons = model.cons.clone();
    let (mut inputs, names) = param_inputs(&store, &["cons."]);
    let np = names.len();
    inputs.extend([emb(rng, "f_com"), emb(rng, "f_text"), emb(rng, "f_tgt")]);
    let weights = LossWeights::default();
    cases.push(Case::new("losses", "consistency", inputs, move |g, v| {
        let mut b = bind_all(&store, &names, &v[..np]);
        losses::consistency_loss(g, &cons, &mut b, v[np], v[np + 1], v[np + 2], &weights)
    }));

    let parts = vec![
        input("triplet", uniform(rng, 1, 0.0, 2.0), &[1]),
        input("disc", uniform(rng, 1, 0.0, 2.0), &[1]),
        input("cons", uniform(rng, 1, 0.0, 2.0), &[1]),
    ];
    cases.push(Case::new("losses", "total", parts, move |g, v| losses::total_loss(g, v[0], v[1], v[2], &weights)));
    Ok(cases)
}

// ---------------------------------------------------------------------------
// full chain

/// Two queries and their targets through transform, aggregate (LSTM with
/// batch-statistics BatchNorm) and residual-offset composition into the
/// weighted total loss; each query's negative is the other query's target.
/// Inputs are the level feature volumes, per-level text vectors, sentence
/// vectors and every trainable transform/aggregate/compose/consistency
/// parameter. The critic enters the generator loss as a constant, so its
/// weights are not inputs here. Training detaches the consistency targets,
/// which makes its update a surrogate rather than a gradient; this check
/// differentiates the undetached objective so that finite differences of
/// the same function are a valid oracle.
pub fn chain_case(seed: u64) -> Result<Case> {
    let mut cases = screened(seed, 0x6368, |rng| Ok(vec![chain_draw(rng, seed)?]))?;
    Ok(cases.pop().expect("one chain case"))
}

fn chain_draw(rng: &mut ChaCha8Rng, seed: u64) -> Result<Case> {
    let model = tiny_model(AggregatorKind::Lstm, CompositionKind::ResidualOffset)?;
    let store = model.init_params(seed);
    let (mut inputs, names) = param_inputs(&store, &["sft", "hfa.", "vlc.", "cons."]);
    let np = names.len();
    let batch = 2;
    for q in 0..batch {
        inputs.push(volume(rng, &format!("q{q}.v1"), 4, 4, 4));
        inputs.push(volume(rng, &format!("q{q}.v2"), 8, 2, 2));
        inputs.push(input(&format!("q{q}.t1"), uniform(rng, 4, -1.0, 1.0), &[4]));
        inputs.push(input(&format!("q{q}.t2"), uniform(rng, 8, -1.0, 1.0), &[8]));
        inputs.push(input(&format!("q{q}.sent"), uniform(rng, 5, -1.0, 1.0), &[5]));
        inputs.push(volume(rng, &format!("t{q}.v1"), 4, 4, 4));
        inputs.push(volume(rng, &format!("t{q}.v2"), 8, 2, 2));
    }
    let weights = LossWeights::default();
    Ok(Case::new("chain", "sft_hfa_vlc_total", inputs, move |g, v| {
        let mut b = bind_all(&store, &names, &v[..np]);
        let at = |q: usize, k: usize| v[np + 7 * q + k];
        let mut query_levels = Vec::with_capacity(batch);
        let mut target_levels = Vec::with_capacity(batch);
        for q in 0..batch {
            let tq = model.sft.transform_query(g, &mut b, &[at(q, 0), at(q, 1)], &[at(q, 2), at(q, 3)])?;
            query_levels.push(tq.levels);
            target_levels.push(model.sft.transform_target(g, &mut b, &[at(q, 5), at(q, 6)])?.levels);
        }
        let (agg, _) = model.hfa.aggregate_query(g, &mut b, &query_levels, NormMode::Train)?;
        let fused = model.hfa.aggregate_target(g, &mut b, &target_levels, NormMode::Train)?;
        let mut f_com = Vec::with_capacity(batch);
        let mut f_text = Vec::with_capacity(batch);
        let mut f_tgt = Vec::with_capacity(batch);
        for q in 0..batch {
            let t = model.vlc.project_text(g, &mut b, at(q, 4))?;
            f_com.push(model.vlc.compose(g, &mut b, agg[q], t)?);
            f_text.push(t);
            f_tgt.push(model.vlc.compose_target(g, fused[q])?);
        }
        let mut trip = Vec::with_capacity(batch);
        let mut cons = Vec::with_capacity(batch);
        for q in 0..batch {
            trip.push(losses::triplet_loss(g, f_com[q], f_tgt[q], f_tgt[(q + 1) % batch])?);
            cons.push(losses::consistency_loss(g, &model.cons, &mut b, f_com[q], f_text[q], f_tgt[q], &weights)?);
        }
        let (_, gen) = losses::discriminator_loss(g, &model.disc, &mut b, &f_tgt, &f_com)?;
        let trip = g.concat(&trip)?;
        let trip = g.mean(trip);
        let cons = g.concat(&cons)?;
        let cons = g.mean(cons);
        losses::total_loss(g, trip, gen, cons, &weights)
    }))
}
