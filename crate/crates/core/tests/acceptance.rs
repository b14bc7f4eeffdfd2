//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Tolerances are pinned below.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rer_core::buffer::{BufferEntry, ReservoirBuffer};
use rer_core::harness::{
    run_bounds, run_experiment, run_gradcheck, write_outputs, EvalMode, ExperimentConfig, ExperimentResult,
    GradcheckOptions, Protocol,
};
use rer_core::stream::{ScenarioSpec, TaskStream};
use rer_core::trainer::{IterWarm, WarmKeyword, WeightSource};
use rer_core::{Learner, TrainerConfig, Variant};

const GRADCHECK_TRIALS: usize = 50;
const GRADCHECK_TOL: f64 = 1e-5;
const GROUP_TOL: f64 = 1e-12;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(60);
const MAX_MAIN_PARAMS: usize = 500;
const REDUCTION_MIN_STEPS: usize = 10;
const RESERVOIR_M: usize = 200;
const RESERVOIR_N: usize = 1000;
const RESERVOIR_TRIALS: u64 = 20_000;
const RESERVOIR_FREQ_TOL: f64 = 0.01;
// upper 1% point of the standard normal
const Z_99: f64 = 2.326_347_874;
const DESK_BUDGET: Duration = Duration::from_secs(15 * 60);
const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const PROBE_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: usize, name: &'static str, pass: bool, detail: String) -> Outcome {
    let o = Outcome { id, name, pass, detail };
    println!("[{}] {}. {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    o
}

fn desk(variant: Variant) -> ExperimentConfig {
    ExperimentConfig {
        scenario: ScenarioSpec::gaussian(5, 2, 100),
        trainer: TrainerConfig::new(variant),
        buffer_size: 200,
        eval_mode: EvalMode::ClassIl,
        seeds: DESK_SEEDS.to_vec(),
        output_dir: None,
        write_traces: true,
    }
}

fn probe(variant: Variant, overlap: f64) -> ExperimentConfig {
    ExperimentConfig {
        scenario: ScenarioSpec::similarity_probe(overlap, 7),
        seeds: PROBE_SEEDS.to_vec(),
        ..desk(variant)
    }
}

fn class_il(res: &ExperimentResult) -> (f64, Option<f64>, Vec<f64>) {
    let p = &res.summary.protocols[Protocol::ClassIl.name()];
    (p.acc_mean, p.bwt_mean, p.acc_per_seed.clone())
}

fn all_seeds_ok(res: &ExperimentResult) -> bool {
    res.summary.failed_seeds.is_empty()
}

fn gradcheck() -> Vec<Outcome> {
    let t0 = Instant::now();
    let r = run_gradcheck(&GradcheckOptions {
        trials: GRADCHECK_TRIALS,
        tolerance: GRADCHECK_TOL,
        group_tolerance: GROUP_TOL,
        ..GradcheckOptions::default()
    });
    let dt = t0.elapsed();
    let r = match r {
        Ok(r) => r,
        Err(e) => {
            return vec![
                report(1, "meta-gradient oracle", false, format!("error: {e}")),
                report(2, "grouped coefficients", false, format!("error: {e}")),
            ]
        }
    };
    let n = r.trials.len();
    let max_params = r.trials.iter().map(|t| t.main_params).max().unwrap_or(0);
    let redrawn: usize = r.trials.iter().map(|t| t.redrawn).sum();
    let c1 = n >= GRADCHECK_TRIALS
        && r.worst_rel_err <= GRADCHECK_TOL
        && dt <= GRADCHECK_BUDGET
        && max_params <= MAX_MAIN_PARAMS;
    let c2 = n >= GRADCHECK_TRIALS && r.trials.iter().all(|t| t.group_err <= GROUP_TOL);
    vec![
        report(
            1,
            "meta-gradient oracle",
            c1,
            format!(
                "{n} trials, worst rel err {:.2e} (tol {GRADCHECK_TOL:.0e}), main net <= {max_params} params, \
                 {redrawn} kink instances redrawn, {:.1} s (limit {} s)",
                r.worst_rel_err,
                dt.as_secs_f64(),
                GRADCHECK_BUDGET.as_secs()
            ),
        ),
        report(
            2,
            "grouped coefficients",
            c2,
            format!("worst |grouped - flat| {:.2e} over {n} trials (tol {GROUP_TOL:.0e})", r.worst_group_err),
        ),
    ]
}

fn baseline_reduction() -> Outcome {
    let mut spec = ScenarioSpec::gaussian(5, 2, 100);
    spec.samples_per_class = 60;
    let stream: TaskStream<f64> = match spec.build() {
        Ok(s) => s,
        Err(e) => return report(3, "baseline reduction", false, format!("error: {e}")),
    };
    let base = TrainerConfig {
        epochs_per_task: 2,
        preset_weights: Some(vec![1.0, 0.5]),
        ..TrainerConfig::new(Variant::Er)
    };
    let rel = TrainerConfig {
        variant: Variant::Rer,
        iter_warm: IterWarm::Named(WarmKeyword::Infinite),
        interval: Some(1),
        ..base.clone()
    };
    let run = |cfg: TrainerConfig| -> rer_core::Result<(Vec<Vec<u64>>, Learner)> {
        let mut l = Learner::new(cfg, stream.feature_dim, stream.total_classes, 200, 3)?;
        let mut traj = Vec::new();
        for t in &stream.tasks {
            l.train_task_observed(t, |_, net| traj.push(net.params().values().iter().map(|v| v.to_bits()).collect()))?;
        }
        Ok((traj, l))
    };
    match (run(base), run(rel)) {
        (Ok((a, _)), Ok((b, l))) => {
            let same = a.len() == b.len() && a == b;
            let phi_updates = l.trace().iter().filter(|r| r.phi_updated()).count();
            let pass = same && a.len() >= REDUCTION_MIN_STEPS && phi_updates > 0;
            report(
                3,
                "baseline reduction",
                pass,
                format!(
                    "{} theta steps compared bitwise, identical: {same}; relation net updated {phi_updates} times alongside",
                    a.len()
                ),
            )
        }
        (Err(e), _) | (_, Err(e)) => report(3, "baseline reduction", false, format!("error: {e}")),
    }
}

// Wilson-Hilferty: (X/k)^(1/3) is close to normal with mean 1 - 2/(9k)
// and variance 2/(9k) for X ~ chi-square(k).
fn chi_square_z(x: f64, k: f64) -> f64 {
    let v = 2.0 / (9.0 * k);
    ((x / k).cbrt() - (1.0 - v)) / v.sqrt()
}

fn reservoir() -> Outcome {
    let mut counts = vec![0u64; RESERVOIR_N];
    for t in 0..RESERVOIR_TRIALS {
        let mut buf: ReservoirBuffer<f64> = ReservoirBuffer::new(RESERVOIR_M, t);
        for i in 0..RESERVOIR_N {
            buf.insert(BufferEntry {
                input: vec![i as f64],
                label: 0,
                stored_logits: vec![],
                task_id: 0,
            });
        }
        for e in buf.entries() {
            counts[e.input[0] as usize] += 1;
        }
    }
    let p = RESERVOIR_M as f64 / RESERVOIR_N as f64;
    let trials = RESERVOIR_TRIALS as f64;
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / trials).collect();
    let worst = freqs.iter().map(|f| (f - p).abs()).fold(0.0, f64::max);
    // Inclusion indicators of one trial sum to M, so the counts have
    // covariance T p(1-p) N/(N-1) (I - 11'/N): rescaling gives chi-square(N-1).
    let n = RESERVOIR_N as f64;
    let stat = counts.iter().map(|&c| (c as f64 - trials * p).powi(2)).sum::<f64>() / (trials * p * (1.0 - p))
        * (n - 1.0)
        / n;
    let z = chi_square_z(stat, n - 1.0);
    let pass = worst <= RESERVOIR_FREQ_TOL && z < Z_99;
    report(
        4,
        "reservoir uniformity",
        pass,
        format!(
            "max |freq - {p:.3}| = {worst:.4} (tol {RESERVOIR_FREQ_TOL}); chi-square {stat:.1} on {} df, \
             z = {z:.2} (p > 0.01 iff z < {Z_99:.3})",
            RESERVOIR_N - 1
        ),
    )
}

fn desk_runs() -> (BTreeMap<Variant, ExperimentResult>, Duration, Vec<String>) {
    let t0 = Instant::now();
    let mut out = BTreeMap::new();
    let mut errors = Vec::new();
    for v in [Variant::Er, Variant::Rer, Variant::DerPP, Variant::Rder, Variant::Vanilla] {
        match run_experiment(&desk(v)) {
            Ok(r) => {
                if !all_seeds_ok(&r) {
                    errors.push(format!("{}: failed seeds {:?}", v.name(), r.summary.failed_seeds));
                }
                out.insert(v, r);
            }
            Err(e) => errors.push(format!("{}: {e}", v.name())),
        }
    }
    (out, t0.elapsed(), errors)
}

fn table_one(runs: &BTreeMap<Variant, ExperimentResult>, dt: Duration, errors: &[String]) -> Outcome {
    let (Some(er), Some(rer)) = (runs.get(&Variant::Er), runs.get(&Variant::Rer)) else {
        return report(5, "ER vs RER on the desk stream", false, errors.join("; "));
    };
    let (ea, eb, _) = class_il(er);
    let (ra, rb, _) = class_il(rer);
    let (eb, rb) = (eb.unwrap_or(f64::NAN), rb.unwrap_or(f64::NAN));
    let pass = errors.is_empty() && ra > ea && rb > eb && dt <= DESK_BUDGET;
    report(
        5,
        "ER vs RER on the desk stream",
        pass,
        format!(
            "ACC ER {ea:.4} -> RER {ra:.4}; BWT ER {eb:.4} -> RER {rb:.4}; all five methods in {:.0} s (limit {} s)",
            dt.as_secs_f64(),
            DESK_BUDGET.as_secs()
        ),
    )
}

fn table_three(runs: &BTreeMap<Variant, ExperimentResult>) -> Outcome {
    let (Some(rd), Some(va)) = (runs.get(&Variant::Rder), runs.get(&Variant::Vanilla)) else {
        return report(6, "vanilla vs RDER", false, "runs missing".into());
    };
    let (ra, _, _) = class_il(rd);
    let (va, _, _) = class_il(va);
    report(6, "vanilla vs RDER", va <= ra, format!("ACC Vanilla {va:.4} <= RDER {ra:.4}"))
}

fn bounds(runs: &BTreeMap<Variant, ExperimentResult>) -> Outcome {
    let b = match run_bounds(&desk(Variant::Er)) {
        Ok(b) => b,
        Err(e) => return report(7, "bounds sanity", false, format!("error: {e}")),
    };
    let mut pass = runs.len() == 5;
    let mut tightest = (f64::INFINITY, f64::INFINITY);
    for (i, &seed) in DESK_SEEDS.iter().enumerate() {
        let (up, lo) = (b.upper.acc_per_seed[i], b.lower.acc_per_seed[i]);
        for r in runs.values() {
            let Some(acc) = r.runs.iter().find(|s| s.seed == seed).and_then(|s| s.acc(Protocol::ClassIl)) else {
                pass = false;
                continue;
            };
            pass &= up > acc && acc > lo;
            tightest.0 = tightest.0.min(up - acc);
            tightest.1 = tightest.1.min(acc - lo);
        }
    }
    report(
        7,
        "bounds sanity",
        pass,
        format!(
            "upper {:.4}, lower {:.4} (means); smallest per-seed margins: below upper {:.4}, above lower {:.4}",
            b.upper.acc_mean, b.lower.acc_mean, tightest.0, tightest.1
        ),
    )
}

fn similarity_probe() -> Outcome {
    let mut acc = BTreeMap::new();
    let mut lambda = BTreeMap::new();
    for v in [Variant::Er, Variant::Rer] {
        for (k, o) in [(0, 0.0), (1, 1.0)] {
            match run_experiment(&probe(v, o)) {
                Ok(r) if all_seeds_ok(&r) => {
                    acc.insert((v, k), class_il(&r).0);
                    lambda.insert((v, k), r.summary.mean_rrn_lambda_buf);
                }
                Ok(r) => return report(8, "similarity probe", false, format!("failed seeds {:?}", r.summary.failed_seeds)),
                Err(e) => return report(8, "similarity probe", false, format!("error: {e}")),
            }
        }
    }
    let gap = |v| acc[&(v, 0)] - acc[&(v, 1)];
    let (ge, gr) = (gap(Variant::Er), gap(Variant::Rer));
    let (ll, lh) = (lambda[&(Variant::Rer, 0)], lambda[&(Variant::Rer, 1)]);
    let pass = gr < ge && matches!((ll, lh), (Some(l), Some(h)) if h > l);
    report(
        8,
        "similarity probe",
        pass,
        format!(
            "ACC gap (low - high overlap) ER {ge:.4}, RER {gr:.4}; RER mean buffer weight low {:.4} -> high {:.4}",
            ll.unwrap_or(f64::NAN),
            lh.unwrap_or(f64::NAN)
        ),
    )
}

fn read_dir_bytes(dir: &Path) -> std::io::Result<Vec<(String, Vec<u8>)>> {
    let mut v = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        v.push((e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path())?));
    }
    v.sort();
    Ok(v)
}

fn determinism(rer: Option<&ExperimentResult>) -> Outcome {
    let small = |v: Variant| {
        let mut c = desk(v);
        c.eval_mode = EvalMode::Both;
        c.seeds = vec![0, 1];
        c.trainer.epochs_per_task = 5;
        c
    };
    let mut split = small(Variant::Rder);
    split.trainer.split_buffer = Some(0.2);
    let mut cases = vec![("rer (desk)", desk(Variant::Rer), rer), ("vanilla", small(Variant::Vanilla), None)];
    cases.push(("rder split", split, None));
    let check = |cfg: &ExperimentConfig, first: Option<&ExperimentResult>| -> Result<(bool, usize), String> {
        let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
        let r1;
        let first = match first {
            Some(r) => r,
            None => {
                r1 = run_experiment(cfg).map_err(|e| e.to_string())?;
                &r1
            }
        };
        write_outputs(first, a.path(), true).map_err(|e| e.to_string())?;
        write_outputs(&run_experiment(cfg).map_err(|e| e.to_string())?, b.path(), true).map_err(|e| e.to_string())?;
        let (fa, fb) = (read_dir_bytes(a.path()).map_err(|e| e.to_string())?, read_dir_bytes(b.path()).map_err(|e| e.to_string())?);
        Ok((fa == fb, fa.len()))
    };
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, cfg, first) in &cases {
        match check(cfg, *first) {
            Ok((same, files)) => {
                pass &= same;
                parts.push(format!("{name}: {files} files {}", if same { "identical" } else { "DIFFER" }));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: error {e}"));
            }
        }
    }
    report(9, "determinism", pass, parts.join("; "))
}

fn scheduling(runs: &BTreeMap<Variant, ExperimentResult>) -> Outcome {
    let cfg = TrainerConfig::new(Variant::Rer);
    let train_len = 320;
    let s = match cfg.schedule(train_len) {
        Ok(s) => s,
        Err(e) => return report(10, "scheduling", false, format!("error: {e}")),
    };
    let mut pass = cfg.epochs_per_task == 50 && s.interval == 5 && s.iter_warm == s.iters_per_task / 2;
    let mut checked = 0;
    let mut total_updates = 0;
    for v in [Variant::Rer, Variant::Rder] {
        let Some(res) = runs.get(&v) else {
            pass = false;
            continue;
        };
        for run in &res.runs {
            let mut offset = 0;
            for (t, rep) in run.reports.iter().enumerate() {
                let steps = &run.trace[offset..offset + rep.iterations];
                offset += rep.iterations;
                let updates = steps.iter().filter(|r| r.phi_updated()).count();
                let warm = steps.iter().take_while(|r| r.weights == WeightSource::Preset).count();
                pass &= steps.iter().all(|r| r.task == t);
                pass &= updates == (rep.iterations - rep.skipped) / rep.schedule.interval;
                pass &= rep.schedule == s;
                pass &= warm == s.iter_warm;
                pass &= steps[warm..].iter().all(|r| r.weights == WeightSource::Rrn);
                total_updates += updates;
                checked += 1;
            }
        }
    }
    report(
        10,
        "scheduling",
        pass,
        format!(
            "defaults resolve to interval {} and warm-up {} of {} steps; {checked} task traces match \
             floor(eligible / interval) ({total_updates} relation-net updates)",
            s.interval, s.iter_warm, s.iters_per_task
        ),
    )
}

fn main() -> ExitCode {
    let mut outcomes = gradcheck();
    outcomes.push(baseline_reduction());
    outcomes.push(reservoir());
    let (runs, dt, errors) = desk_runs();
    outcomes.push(table_one(&runs, dt, &errors));
    outcomes.push(table_three(&runs));
    outcomes.push(bounds(&runs));
    outcomes.push(similarity_probe());
    outcomes.push(determinism(runs.get(&Variant::Rer)));
    outcomes.push(scheduling(&runs));
    outcomes.sort_by_key(|o| o.id);
    let failed: Vec<String> = outcomes.iter().filter(|o| !o.pass).map(|o| format!("{} ({})", o.id, o.name)).collect();
    println!("acceptance: {}/{} criteria passed", outcomes.len() - failed.len(), outcomes.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
