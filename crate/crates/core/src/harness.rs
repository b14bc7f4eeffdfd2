//! Experiment runner: seed fan-out, Class-IL / Task-IL evaluation, summaries,
//! reference bounds, hyperparameter grids and the meta-gradient check suite.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::buffer::BufferBatch;
use crate::classes::ClassSet;
use crate::error::{config, contract, Error, Result};
use crate::main_net::{masked_accuracy, MainNet, MainNetConfig};
use crate::metrics::{compute_acc, compute_bwt, mean_std, AccuracyMatrix};
use crate::objectives::{outer_loss, BaseLoss, ClassContext, PairBatch};
use crate::rrn::{RelationNet, RelationNetConfig};
use crate::scalar::l2_norm;
use crate::stream::{ScenarioSpec, TaskStream};
use crate::tensor::{Activation, Tensor};
use crate::trainer::{
    assemble_meta_gradient, inner_step, meta_coefficients_grouped, meta_gradient, relational_step, GradPoint, Learner,
    StepRecord, TaskReport, TrainerConfig, Variant, WeightSource,
};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "RER_OUTPUT_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    ClassIl,
    TaskIl,
    Both,
}

/// One evaluation protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ClassIl,
    TaskIl,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::ClassIl => "class_il",
            Protocol::TaskIl => "task_il",
        }
    }
}

impl EvalMode {
    pub fn protocols(self) -> Vec<Protocol> {
        match self {
            EvalMode::ClassIl => vec![Protocol::ClassIl],
            EvalMode::TaskIl => vec![Protocol::TaskIl],
            EvalMode::Both => vec![Protocol::ClassIl, Protocol::TaskIl],
        }
    }
}

fn d_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: ScenarioSpec,
    pub trainer: TrainerConfig,
    pub buffer_size: usize,
    #[serde(default)]
    pub eval_mode: EvalMode,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "d_true")]
    pub write_traces: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.buffer_size == 0 {
            return config("buffer_size must be at least 1");
        }
        if self.seeds.is_empty() {
            return config("seeds must not be empty");
        }
        self.trainer.validate()
    }

    /// `RER_OUTPUT_DIR` if set, else `output_dir`, else `./results`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone().unwrap_or_else(|| PathBuf::from("results")),
        }
    }

    /// Stream used by `seed`; each seed sees its own draw of the scenario.
    pub fn stream_for(&self, seed: u64) -> Result<TaskStream<f64>> {
        let mut spec = self.scenario.clone();
        spec.seed = spec.seed.wrapping_add(seed);
        spec.build()
    }
}

/// Accuracy of each of the first `upto + 1` tasks under `protocol`.
pub fn evaluate_tasks(net: &MainNet<f64>, stream: &TaskStream<f64>, upto: usize, protocol: Protocol) -> Result<Vec<f64>> {
    let seen = net.seen_classes();
    stream.tasks[..=upto]
        .iter()
        .map(|t| {
            let pred = net.predict(&t.test_x)?;
            let mask = match protocol {
                Protocol::ClassIl => seen,
                Protocol::TaskIl => &t.classes,
            };
            masked_accuracy(&pred, &t.test_y, mask)
        })
        .collect()
}

/// Everything one seed produced; `error` is set when training aborted.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub matrices: BTreeMap<Protocol, AccuracyMatrix>,
    pub reports: Vec<TaskReport>,
    pub trace: Vec<StepRecord>,
    pub error: Option<String>,
}

impl SeedRun {
    pub fn acc(&self, p: Protocol) -> Option<f64> {
        self.matrices.get(&p).and_then(|m| compute_acc(m).ok())
    }

    pub fn bwt(&self, p: Protocol) -> Option<f64> {
        self.matrices.get(&p).and_then(compute_bwt)
    }

    /// Mean buffer-sample weight over the steps where the relation net drove the Main Net.
    pub fn mean_rrn_lambda_buf(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .trace
            .iter()
            .filter(|r| r.weights == WeightSource::Rrn)
            .map(|r| r.mean_lambda_buf)
            .collect();
        mean_std(&v).map(|(m, _)| m)
    }
}

fn train_seed(cfg: &ExperimentConfig, seed: u64, run: &mut SeedRun, learner: &mut Option<Learner<f64>>) -> Result<()> {
    let stream = cfg.stream_for(seed)?;
    let l = learner.insert(Learner::new(
        cfg.trainer.clone(),
        stream.feature_dim,
        stream.total_classes,
        cfg.buffer_size,
        seed,
    )?);
    let protocols = cfg.eval_mode.protocols();
    for (t, task) in stream.tasks.iter().enumerate() {
        run.reports.push(l.train_task(task)?);
        let mut rows = BTreeMap::new();
        for &p in &protocols {
            let row = evaluate_tasks(l.net(), &stream, t, p)?;
            run.matrices.entry(p).or_default().push_row(row.clone())?;
            rows.insert(p, row);
        }
        if let (Some(c), Some(k)) = (rows.get(&Protocol::ClassIl), rows.get(&Protocol::TaskIl)) {
            if c.iter().zip(k).any(|(c, k)| k < c) {
                return contract(format!("task-IL accuracy below class-IL accuracy after task {t}"));
            }
        }
    }
    Ok(())
}

/// Trains a fresh learner on the scenario stream for one seed.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> SeedRun {
    let mut run = SeedRun {
        seed,
        matrices: BTreeMap::new(),
        reports: Vec::new(),
        trace: Vec::new(),
        error: None,
    };
    let mut learner = None;
    if let Err(e) = train_seed(cfg, seed, &mut run, &mut learner) {
        run.error = Some(e.to_string());
    }
    if let Some(l) = learner.as_mut() {
        run.trace = l.take_trace();
    }
    run
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSummary {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub bwt_mean: Option<f64>,
    pub bwt_std: Option<f64>,
    pub acc_per_seed: Vec<f64>,
    pub bwt_per_seed: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub protocols: BTreeMap<String, ProtocolSummary>,
    pub mean_rrn_lambda_buf: Option<f64>,
    pub failed_seeds: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

fn summarize(method: &str, runs: &[SeedRun], protocols: &[Protocol]) -> Summary {
    let ok: Vec<&SeedRun> = runs.iter().filter(|r| r.error.is_none()).collect();
    let mut out = BTreeMap::new();
    for &p in protocols {
        let accs: Vec<f64> = ok.iter().filter_map(|r| r.acc(p)).collect();
        let bwts: Vec<Option<f64>> = ok.iter().map(|r| r.bwt(p)).collect();
        let Some((acc_mean, acc_std)) = mean_std(&accs) else { continue };
        let defined: Vec<f64> = bwts.iter().flatten().copied().collect();
        let bwt = if defined.len() == bwts.len() { mean_std(&defined) } else { None };
        out.insert(
            p.name().to_string(),
            ProtocolSummary {
                acc_mean,
                acc_std,
                bwt_mean: bwt.map(|b| b.0),
                bwt_std: bwt.map(|b| b.1),
                acc_per_seed: accs,
                bwt_per_seed: bwts,
            },
        );
    }
    let lambdas: Vec<f64> = ok.iter().filter_map(|r| r.mean_rrn_lambda_buf()).collect();
    Summary {
        method: method.to_string(),
        seeds: ok.iter().map(|r| r.seed).collect(),
        protocols: out,
        mean_rrn_lambda_buf: mean_std(&lambdas).map(|m| m.0),
        failed_seeds: runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| (r.seed.to_string(), e.clone())))
            .collect(),
    }
}

/// Runs every seed (in parallel, one thread per run) and summarizes.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    // build once up front so configuration errors surface before training
    cfg.stream_for(cfg.seeds[0])?;
    let runs: Vec<SeedRun> = cfg.seeds.par_iter().map(|&s| run_seed(cfg, s)).collect();
    let summary = summarize(cfg.trainer.variant.name(), &runs, &cfg.eval_mode.protocols());
    Ok(ExperimentResult { runs, summary })
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub after_task: usize,
    pub eval_task: usize,
    pub eval_mode: Protocol,
    pub accuracy: f64,
}

pub fn result_rows(runs: &[SeedRun]) -> Vec<ResultRow> {
    let mut rows = Vec::new();
    for r in runs {
        for (&p, m) in &r.matrices {
            for (t, row) in m.rows().iter().enumerate() {
                for (i, &a) in row.iter().enumerate() {
                    rows.push(ResultRow {
                        seed: r.seed,
                        after_task: t,
                        eval_task: i,
                        eval_mode: p,
                        accuracy: a,
                    });
                }
            }
        }
    }
    rows
}

/// Rebuilds per-seed accuracy matrices from a results CSV.
pub fn matrices_from_csv(path: &Path) -> Result<BTreeMap<(u64, Protocol), AccuracyMatrix>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut cells: BTreeMap<(u64, Protocol), BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for rec in rdr.deserialize::<ResultRow>() {
        let r = rec.map_err(csv_err)?;
        cells.entry((r.seed, r.eval_mode)).or_default().insert((r.after_task, r.eval_task), r.accuracy);
    }
    let mut out = BTreeMap::new();
    for (key, c) in cells {
        let tasks = c.keys().map(|k| k.0).max().map_or(0, |m| m + 1);
        let rows = (0..tasks)
            .map(|t| {
                (0..=t)
                    .map(|i| c.get(&(t, i)).copied().ok_or_else(|| Error::Config(format!("missing cell ({t}, {i})"))))
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(key, AccuracyMatrix::from_rows(rows)?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Config(format!("csv: {e}"))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `results.csv`, `summary.json` and (optionally) per-seed traces.
pub fn write_outputs(result: &ExperimentResult, dir: &Path, traces: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_csv(&dir.join("results.csv"), &result_rows(&result.runs))?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&result.summary)? + "\n")?;
    if traces {
        for r in &result.runs {
            write_csv(&dir.join(format!("trace_seed{}.csv", r.seed)), &r.trace)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub acc_mean: f64,
    pub acc_std: f64,
    pub acc_per_seed: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsResult {
    /// Joint training on the union of all tasks.
    pub upper: BoundSummary,
    /// Sequential training without a buffer.
    pub lower: BoundSummary,
}

fn reference_trainer(cfg: &ExperimentConfig) -> TrainerConfig {
    TrainerConfig {
        variant: Variant::Er,
        preset_weights: None,
        split_buffer: None,
        ..cfg.trainer.clone()
    }
}

fn bound_seed(cfg: &ExperimentConfig, seed: u64) -> Result<(f64, f64)> {
    let stream = cfg.stream_for(seed)?;
    let tc = reference_trainer(cfg);
    let mut joint = Learner::new(tc.clone(), stream.feature_dim, stream.total_classes, 0, seed)?;
    joint.train_task(&stream.joint()?)?;
    let last = stream.tasks.len() - 1;
    let upper = evaluate_tasks(joint.net(), &stream, last, Protocol::ClassIl)?;
    let mut seq = Learner::new(tc, stream.feature_dim, stream.total_classes, 0, seed)?;
    let mut m = AccuracyMatrix::new();
    for (t, task) in stream.tasks.iter().enumerate() {
        seq.train_task(task)?;
        m.push_row(evaluate_tasks(seq.net(), &stream, t, Protocol::ClassIl)?)?;
    }
    Ok((upper.iter().sum::<f64>() / upper.len() as f64, compute_acc(&m)?))
}

/// Upper (joint) and lower (fine-tuning, no buffer) Class-IL ACC per seed.
pub fn run_bounds(cfg: &ExperimentConfig) -> Result<BoundsResult> {
    cfg.validate()?;
    let per: Vec<(f64, f64)> = cfg
        .seeds
        .par_iter()
        .map(|&s| bound_seed(cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let pack = |v: Vec<f64>| {
        let (m, s) = mean_std(&v).expect("seeds are non-empty");
        BoundSummary {
            acc_mean: m,
            acc_std: s,
            acc_per_seed: v,
        }
    };
    Ok(BoundsResult {
        upper: pack(per.iter().map(|p| p.0).collect()),
        lower: pack(per.iter().map(|p| p.1).collect()),
    })
}

/// Sets `a.b.c` in a JSON object tree.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = cur else {
            return config(format!("grid key {key}: {part} is not inside an object"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cur = map.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    config("empty grid key")
}

/// Parses `key=v1,v2,...`; values are JSON literals where possible, strings otherwise.
pub fn parse_grid_arg(arg: &str) -> Result<(String, Vec<Value>)> {
    let Some((key, vals)) = arg.split_once('=') else {
        return config(format!("grid argument {arg:?} must look like key=v1,v2"));
    };
    if key.is_empty() || vals.is_empty() {
        return config(format!("grid argument {arg:?} has an empty key or value list"));
    }
    let values = vals
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    Ok((key.to_string(), values))
}

/// Cartesian product of the grid applied to `base`, with a label per point.
pub fn expand_grid(base: &Value, grid: &[(String, Vec<Value>)]) -> Result<Vec<(String, Value)>> {
    let mut points = vec![(Vec::<String>::new(), base.clone())];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(points.len() * values.len());
        for (label, doc) in &points {
            for v in values {
                let mut d = doc.clone();
                set_dotted(&mut d, key, v.clone())?;
                let mut l = label.clone();
                let shown = match v {
                    Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                l.push(format!("{key}={shown}"));
                next.push((l, d));
            }
        }
        points = next;
    }
    Ok(points.into_iter().map(|(l, d)| (l.join(","), d)).collect())
}

/// Runs every grid point into `<output>/<label>/` and returns the summaries.
pub fn run_sweep(base: &Value, grid: &[(String, Vec<Value>)], out: &Path) -> Result<Vec<(String, Summary)>> {
    let points = expand_grid(base, grid)?;
    let cfgs = points
        .into_iter()
        .map(|(label, doc)| {
            let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| Error::Config(format!("{label}: {e}")))?;
            cfg.validate()?;
            Ok((label, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut summaries = Vec::with_capacity(cfgs.len());
    for (label, cfg) in cfgs {
        let res = run_experiment(&cfg)?;
        write_outputs(&res, &out.join(&label), cfg.write_traces)?;
        summaries.push((label, res.summary));
    }
    let index: BTreeMap<&str, &Summary> = summaries.iter().map(|(l, s)| (l.as_str(), s)).collect();
    fs::create_dir_all(out)?;
    fs::write(out.join("sweep.json"), serde_json::to_string_pretty(&index)? + "\n")?;
    Ok(summaries)
}

/// Deliberate corruption for checking that the suite detects errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradcheckFault {
    FlipBufferCoefficient,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckOptions {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub group_tolerance: f64,
    pub fault: Option<GradcheckFault>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            trials: 50,
            seed: 0,
            tolerance: 1e-5,
            group_tolerance: 1e-12,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckTrial {
    pub base: BaseLoss,
    pub main_params: usize,
    pub rrn_params: usize,
    pub pairs: usize,
    pub rel_err: f64,
    pub group_err: f64,
    /// Instances discarded for sitting on a relu kink of the relation net.
    pub redrawn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub trials: Vec<GradcheckTrial>,
    pub worst_rel_err: f64,
    pub worst_group_err: f64,
    pub passed: bool,
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor<f64> {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape matches data")
}

/// One random small problem: analytic meta-gradient against central
/// differences of the lookahead buffer loss, plus grouped-vs-flat `G`.
pub fn gradcheck_trial(seed: u64, fault: Option<GradcheckFault>) -> Result<GradcheckTrial> {
    gradcheck_trial_step(seed, fault, 1e-5)
}

/// Minimum distance of every relation-net branch pre-activation from the
/// relu kink; instances closer than this are redrawn, since the finite
/// difference straddles a point without a derivative.
pub const KINK_MARGIN: f64 = 1e-4;

struct Instance {
    base: BaseLoss,
    eta: f64,
    net: MainNet<f64>,
    ctx: ClassContext,
    rrn: RelationNet<f64>,
    pairs: PairBatch<f64>,
    bf: BufferBatch<f64>,
}

fn draw_instance(rng: &mut ChaCha8Rng) -> Result<Instance> {
    let base = [BaseLoss::Er, BaseLoss::ErAce, BaseLoss::DerPP][rng.random_range(0..3)];
    let input_dim = rng.random_range(2..=5);
    let classes = rng.random_range(3..=6);
    let hidden = rng.random_range(3..=10);
    let b = rng.random_range(2..=6);
    let eta = rng.random_range(0.05..1.0);
    let cfg = MainNetConfig {
        input_dim,
        hidden: vec![hidden],
        total_classes: classes,
        hidden_activation: Activation::Relu,
    };
    let mut net: MainNet<f64> = MainNet::new(&cfg, rng)?;
    let split = classes / 2;
    let ctx = ClassContext::new(ClassSet::new((split..classes).collect()), &ClassSet::range(split));
    net.observe_classes(&ctx.seen)?;
    let rrn: RelationNet<f64> = RelationNet::new(RelationNetConfig::new(base.num_weights()), rng)?;
    let batch = |rng: &mut ChaCha8Rng| BufferBatch {
        indices: (0..b).collect(),
        inputs: random_tensor(rng, b, input_dim, 1.5),
        labels: (0..b).map(|_| rng.random_range(0..classes)).collect(),
        stored_logits: random_tensor(rng, b, classes, 1.0),
    };
    let mb = batch(rng);
    let bf = batch(rng);
    let new_x = random_tensor(rng, b, input_dim, 1.5);
    let new_y = (0..b).map(|_| rng.random_range(split..classes)).collect();
    let pairs = PairBatch::new(new_x, new_y, Some(&mb))?;
    Ok(Instance {
        base,
        eta,
        net,
        ctx,
        rrn,
        pairs,
        bf,
    })
}

pub fn gradcheck_trial_step(seed: u64, fault: Option<GradcheckFault>, h: f64) -> Result<GradcheckTrial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut redrawn = 0;
    let (inst, step) = loop {
        let inst = draw_instance(&mut rng)?;
        let step = relational_step(&inst.net, &inst.rrn, &inst.pairs, inst.base, &inst.ctx, inst.eta, None)?;
        if step.rrn_inputs().iter().all(|f| inst.rrn.kink_margin(f) >= KINK_MARGIN) {
            break (inst, step);
        }
        redrawn += 1;
    };
    let Instance {
        base,
        eta,
        net,
        ctx,
        rrn,
        pairs,
        bf,
    } = inst;
    let b = pairs.len();
    let meta = meta_gradient(&net, &step, &rrn, &bf, &ctx, GradPoint::ThetaNext)?;
    let grouped = meta_coefficients_grouped(&net, &step, &bf, &ctx, GradPoint::ThetaNext)?;
    let group_err = meta
        .coefficients
        .iter()
        .zip(&grouped)
        .flat_map(|(a, g)| a.iter().zip(g).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);

    let analytic = match fault {
        None => meta.grad_phi.clone(),
        Some(GradcheckFault::FlipBufferCoefficient) => {
            let mut c = meta.coefficients.clone();
            for g in &mut c {
                g[1] = -g[1];
            }
            let jac = step
                .rrn_inputs()
                .iter()
                .map(|f| rrn.param_jacobian(f))
                .collect::<Result<Vec<_>>>()?;
            assemble_meta_gradient(&c, &jac, eta)?
        }
    };

    let feats = step.rrn_inputs().to_vec();
    let lookahead = |r: &RelationNet<f64>| -> Result<f64> {
        let w = r.batch_weights(&feats)?;
        let next = inner_step(&net, &w, &pairs, base, &ctx, eta)?;
        Ok(outer_loss(&next, &bf, base, &ctx)?.total)
    };
    let mut numeric = Vec::with_capacity(rrn.params().len());
    for i in 0..rrn.params().len() {
        let mut p = rrn.clone();
        p.params_mut().values_mut()[i] += h;
        let mut m = rrn.clone();
        m.params_mut().values_mut()[i] -= h;
        numeric.push((lookahead(&p)? - lookahead(&m)?) / (2.0 * h));
    }
    let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
    let denom = l2_norm(&numeric).max(l2_norm(&analytic)).max(1e-12);
    Ok(GradcheckTrial {
        base,
        main_params: net.params().len(),
        rrn_params: rrn.params().len(),
        pairs: b,
        rel_err: l2_norm(&diff) / denom,
        group_err,
        redrawn,
    })
}

pub fn run_gradcheck(opts: &GradcheckOptions) -> Result<GradcheckReport> {
    if opts.trials == 0 {
        return config("gradcheck needs at least one trial");
    }
    let trials = (0..opts.trials as u64)
        .map(|t| gradcheck_trial(opts.seed.wrapping_mul(1_000_003).wrapping_add(t), opts.fault))
        .collect::<Result<Vec<_>>>()?;
    let worst_rel_err = trials.iter().map(|t| t.rel_err).fold(0.0, f64::max);
    let worst_group_err = trials.iter().map(|t| t.group_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: worst_rel_err <= opts.tolerance && worst_group_err <= opts.group_tolerance,
        trials,
        worst_rel_err,
        worst_group_err,
    })
}
