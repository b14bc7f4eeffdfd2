use std::path::Path;

use rer_core::harness::{
    matrices_from_csv, run_experiment, write_outputs, EvalMode, ExperimentConfig, Protocol, OUTPUT_DIR_ENV,
};
use rer_core::metrics::{compute_acc, compute_bwt};
use rer_core::stream::ScenarioSpec;
use rer_core::trainer::{IterWarm, WarmKeyword};
use rer_core::{Error, TrainerConfig, Variant};

fn tiny(variant: Variant, tasks: usize) -> ExperimentConfig {
    let mut scenario = ScenarioSpec::gaussian(tasks, 2, 5);
    scenario.samples_per_class = 30;
    scenario.feature_dim = 6;
    ExperimentConfig {
        scenario,
        trainer: TrainerConfig {
            hidden_layers: vec![16],
            epochs_per_task: 3,
            batch_size: 8,
            ..TrainerConfig::new(variant)
        },
        buffer_size: 20,
        eval_mode: EvalMode::Both,
        seeds: vec![0, 1],
        output_dir: None,
        write_traces: true,
    }
}

fn read_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn single_task_acc_is_its_accuracy_and_bwt_undefined() {
    let res = run_experiment(&tiny(Variant::Rer, 1)).unwrap();
    for r in &res.runs {
        let m = &r.matrices[&Protocol::ClassIl];
        assert_eq!(compute_acc(m).unwrap(), m.get(0, 0).unwrap());
        assert!(compute_bwt(m).is_none());
    }
    let p = &res.summary.protocols["class_il"];
    assert!(p.bwt_mean.is_none());
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&res, dir.path(), false).unwrap();
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert!(json["protocols"]["class_il"]["bwt_mean"].is_null());
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    for variant in [Variant::Rer, Variant::Vanilla, Variant::Rder] {
        let mut cfg = tiny(variant, 2);
        if variant == Variant::Rder {
            cfg.trainer.split_buffer = Some(0.25);
        }
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_outputs(&run_experiment(&cfg).unwrap(), a.path(), true).unwrap();
        write_outputs(&run_experiment(&cfg).unwrap(), b.path(), true).unwrap();
        let (fa, fb) = (read_all(a.path()), read_all(b.path()));
        assert_eq!(fa.len(), 4);
        assert_eq!(fa, fb);
    }
}

#[test]
fn metrics_recomputed_from_csv_match_summary() {
    let res = run_experiment(&tiny(Variant::Rder, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_outputs(&res, dir.path(), true).unwrap();
    let mats = matrices_from_csv(&dir.path().join("results.csv")).unwrap();
    assert_eq!(mats.len(), 4);
    for (name, p) in [("class_il", Protocol::ClassIl), ("task_il", Protocol::TaskIl)] {
        let s = &res.summary.protocols[name];
        for (i, seed) in res.summary.seeds.iter().enumerate() {
            let m = &mats[&(*seed, p)];
            assert!((compute_acc(m).unwrap() - s.acc_per_seed[i]).abs() < 1e-12);
            assert!((compute_bwt(m).unwrap() - s.bwt_per_seed[i].unwrap()).abs() < 1e-12);
        }
    }
    let trace = std::fs::read_to_string(dir.path().join("trace_seed0.csv")).unwrap();
    assert!(trace.starts_with(
        "step,epoch,task,inner_loss,outer_loss,mean_lambda_new,mean_lambda_buf,mean_gamma_buf,mean_g_new,mean_g_buf"
    ));
}

#[test]
fn relational_run_with_infinite_warm_up_matches_baseline_metrics() {
    let base = run_experiment(&tiny(Variant::DerPP, 2)).unwrap();
    let mut cfg = tiny(Variant::Rder, 2);
    cfg.trainer.iter_warm = IterWarm::Named(WarmKeyword::Infinite);
    let rel = run_experiment(&cfg).unwrap();
    assert_eq!(base.summary.protocols, rel.summary.protocols);
}

#[test]
fn task_il_never_below_class_il() {
    let res = run_experiment(&tiny(Variant::ErAce, 3)).unwrap();
    for r in &res.runs {
        let (c, t) = (&r.matrices[&Protocol::ClassIl], &r.matrices[&Protocol::TaskIl]);
        for (rc, rt) in c.rows().iter().zip(t.rows()) {
            assert!(rc.iter().zip(rt).all(|(a, b)| b >= a));
        }
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        r#"{"scenario":{"kind":"gaussian"},"trainer":{"variant":"er"},"buffer_size":0,"seeds":[0]}"#,
        r#"{"scenario":{"kind":"gaussian"},"trainer":{"variant":"er"},"buffer_size":10,"seeds":[]}"#,
        r#"{"scenario":{"kind":"gaussian"},"trainer":{"variant":"er","typo":1},"buffer_size":10,"seeds":[0]}"#,
        r#"{"scenario":{"kind":"gaussian"},"trainer":{"variant":"rer","split_buffer":1.5},"buffer_size":10,"seeds":[0]}"#,
    ];
    for text in bad {
        assert!(matches!(ExperimentConfig::from_json(text), Err(Error::Config(_))), "{text}");
    }
}

#[test]
fn output_dir_env_overrides_config() {
    let mut cfg = tiny(Variant::Er, 1);
    cfg.output_dir = Some("from-config".into());
    let dir = tempfile::tempdir().unwrap();
    std::env::set_var(OUTPUT_DIR_ENV, dir.path());
    let resolved = cfg.resolved_output_dir();
    std::env::remove_var(OUTPUT_DIR_ENV);
    assert_eq!(resolved, dir.path());
    assert_eq!(cfg.resolved_output_dir(), Path::new("from-config"));
}
