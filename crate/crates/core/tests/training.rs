mod common;

use std::cell::Cell;
use std::fs;

use dcnet::inference::{evaluate, Evaluation};
use dcnet::numerics::RngStream;
use dcnet::tasks::{make_stream, SampleSource, TaskDataset};
use dcnet::trainer::{
    checkpoint_path, restore, run_sequence, run_stream, run_task, run_to_dir, snapshot, RunPhase, RunState,
};
use dcnet::Error;

use common::{small, small_with};

/// Counts every read of an input or label.
struct Counting<'a> {
    inner: &'a dyn SampleSource,
    reads: &'a Cell<usize>,
}

impl SampleSource for Counting<'_> {
    fn task_id(&self) -> usize {
        self.inner.task_id()
    }
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn label_offset(&self) -> usize {
        self.inner.label_offset()
    }
    fn len(&self) -> usize {
        self.inner.len()
    }
    fn input(&self, i: usize) -> &[f64] {
        self.reads.set(self.reads.get() + 1);
        self.inner.input(i)
    }
    fn label(&self, i: usize) -> usize {
        self.reads.set(self.reads.get() + 1);
        self.inner.label(i)
    }
}

/// Presents a split in a fixed shuffled order.
struct Permuted<'a> {
    inner: &'a dyn SampleSource,
    order: Vec<usize>,
}

impl SampleSource for Permuted<'_> {
    fn task_id(&self) -> usize {
        self.inner.task_id()
    }
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn label_offset(&self) -> usize {
        self.inner.label_offset()
    }
    fn len(&self) -> usize {
        self.order.len()
    }
    fn input(&self, i: usize) -> &[f64] {
        self.inner.input(self.order[i])
    }
    fn label(&self, i: usize) -> usize {
        self.inner.label(self.order[i])
    }
}

fn stream(cfg: &dcnet::trainer::ExperimentConfig) -> Vec<TaskDataset> {
    make_stream(&cfg.stream_spec()).unwrap().tasks
}

#[test]
fn earlier_training_data_is_never_read_again() {
    let cfg = small(0);
    let tasks = stream(&cfg);
    let mut state = RunState::new(cfg.clone(), cfg.data.input_dim).unwrap();
    let counters: Vec<Cell<usize>> = (0..tasks.len()).map(|_| Cell::new(0)).collect();
    let trains: Vec<_> = tasks.iter().map(TaskDataset::train_split).collect();
    let tests: Vec<_> = tasks.iter().map(TaskDataset::test_split).collect();
    let test_refs: Vec<&dyn SampleSource> = tests.iter().map(|s| s as &dyn SampleSource).collect();
    let mut after_own_task = Vec::new();
    for t in 0..tasks.len() {
        let counted = Counting {
            inner: &trains[t],
            reads: &counters[t],
        };
        run_task(&mut state, &counted, &test_refs[..=t]).unwrap();
        assert!(counters[t].get() > 0);
        after_own_task.push(counters[t].get());
    }
    for t in 0..tasks.len() {
        assert_eq!(
            counters[t].get(),
            after_own_task[t],
            "task {t} training data read later"
        );
    }
}

#[test]
fn one_task_run_reports_its_only_entry() {
    let cfg = small_with(2, "data.tasks = 1");
    let out = run_sequence(&cfg).unwrap();
    assert_eq!(out.report.acc_matrix.len(), 1);
    assert_eq!(out.report.a_last, out.report.acc_matrix[0][0]);
    assert_eq!(out.report.a_inc, out.report.a_last);
}

#[test]
fn two_separated_tasks_barely_forget() {
    for seed in 0..3 {
        let mut cfg = dcnet::config::parse_config(dcnet::config::DESK_CONFIG, "desk").unwrap();
        cfg.seed = seed;
        cfg.data.tasks = 2;
        let r = run_sequence(&cfg).unwrap().report;
        // with the task given, so routing mistakes between tasks do not count
        let m = &r.oracle_matrix;
        let drop = m[0][0] - m[1][0];
        assert!(drop.abs() <= 0.02, "seed {seed}: {m:?}");
        assert!(r.acc_matrix[1][0] <= m[1][0]);
    }
}

#[test]
fn report_shape_and_fixed_temperature() {
    let out = run_sequence(&small(1)).unwrap();
    let r = &out.report;
    assert_eq!(r.acc_matrix.len(), 3);
    assert!(r.acc_matrix.iter().enumerate().all(|(n, row)| row.len() == n + 1));
    assert_eq!((r.omega_end.len(), r.omega_start.len(), r.tau.len()), (3, 3, 3));
    assert_eq!(r.mask_saturation.len(), 3);
    assert!(r.frozen_violations.iter().all(|&v| v == 0));

    let fixed = run_sequence(&small_with(1, "temperature.fixed = true")).unwrap().report;
    assert!(fixed.tau.iter().all(|&t| t == fixed.config.temperature.tau0));
    // the contrastive phase starts with the same network, so the first task's
    // measurement is shared
    assert_eq!(fixed.omega_start[0], r.omega_start[0]);
}

#[test]
fn all_bases_ioe_differs_only_after_the_first_task() {
    let plain = run_sequence(&small_with(6, "data.tasks = 2")).unwrap();
    let all = run_sequence(&small_with(6, "data.tasks = 2\nablation.ioe_all_bases = true")).unwrap();
    let first = |o: &dcnet::trainer::RunOutput, task| -> Vec<f64> {
        o.state
            .metrics
            .iter()
            .filter(|m| m.task == task)
            .map(|m| m.ioe)
            .collect()
    };
    assert_eq!(first(&plain, 0), first(&all, 0));
    assert_ne!(first(&plain, 1), first(&all, 1));
    assert!(all.state.metrics.iter().all(|m| m.ioe.is_finite()));
}

#[test]
fn lambda_sweep_keeps_its_settings() {
    for lambda in [0.5, 1.0, 2.0] {
        let cfg = small_with(0, &format!("train.lambda = {lambda}\ndata.tasks = 1"));
        let r = run_sequence(&cfg).unwrap().report;
        assert_eq!(r.config.train.lambda, lambda);
    }
}

#[test]
fn no_contrastive_step_before_the_measurement() {
    let out = run_sequence(&small(3)).unwrap();
    let state = &out.state;
    for s in &state.summaries {
        let rows: Vec<_> = state.metrics.iter().filter(|m| m.task == s.task).collect();
        let first_dac = rows.iter().position(|m| m.phase.name() == "dac").unwrap();
        assert_eq!(first_dac, state.config.train.dac_epoch());
        assert!(rows[..first_dac].iter().all(|m| m.dac == 0.0));
        assert!(rows[first_dac..].iter().all(|m| m.tau == s.tau));
    }
}

#[test]
fn identical_runs_write_identical_files() {
    let cfg = small(7);
    let tasks = stream(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_to_dir(&cfg, &tasks, a.path(), false).unwrap();
    run_to_dir(&cfg, &tasks, b.path(), false).unwrap();
    for name in [
        "metrics.csv",
        "report.json",
        "predictions.csv",
        "embeddings.csv",
        "basis.bin",
    ] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let cfg = small(5);
    let tasks = stream(&cfg);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_to_dir(&cfg, &tasks, a.path(), false).unwrap();

    run_to_dir(&cfg, &tasks, b.path(), false).unwrap();
    for t in 2..=tasks.len() {
        fs::remove_file(checkpoint_path(b.path(), t)).unwrap();
    }
    fs::remove_file(b.path().join("metrics.csv")).unwrap();
    let resumed = run_to_dir(&cfg, &tasks, b.path(), true).unwrap();
    assert_eq!(resumed.state.task, tasks.len());
    for name in ["metrics.csv", "report.json", "predictions.csv"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }

    // a different configuration may not pick up these checkpoints
    let other = small(6);
    fs::remove_file(checkpoint_path(b.path(), 3)).unwrap();
    assert!(matches!(
        run_to_dir(&other, &tasks, b.path(), true),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn snapshot_round_trip_is_idempotent() {
    let cfg = small(4);
    let tasks = stream(&cfg);
    let state = RunState::new(cfg.clone(), cfg.data.input_dim).unwrap();
    let out = run_stream(state, &tasks[..2], |_| Ok(())).unwrap();
    let once = snapshot(&out.state).unwrap();
    let back = restore(&once).unwrap();
    assert_eq!(back, out.state);
    assert_eq!(back.phase, RunPhase::Ready);
    let twice = snapshot(&back).unwrap();
    assert_eq!(once, twice);

    let mut flipped = once.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    assert!(matches!(restore(&flipped), Err(Error::Checkpoint(_))));
    assert!(matches!(restore(b"not a checkpoint"), Err(Error::Checkpoint(_))));
}

#[test]
fn accuracy_ignores_evaluation_order() {
    let cfg = small(8);
    let tasks = stream(&cfg);
    let out = run_sequence(&cfg).unwrap();
    let tests: Vec<_> = tasks.iter().map(TaskDataset::test_split).collect();
    let refs: Vec<&dyn SampleSource> = tests.iter().map(|s| s as &dyn SampleSource).collect();
    let mut rng = RngStream::new(9, 0);
    let permuted: Vec<Permuted> = refs
        .iter()
        .map(|s| {
            let mut order: Vec<usize> = (0..s.len()).collect();
            rng.shuffle(&mut order);
            Permuted { inner: *s, order }
        })
        .collect();
    let prefs: Vec<&dyn SampleSource> = permuted.iter().map(|s| s as &dyn SampleSource).collect();
    let classifier = out.state.classifier();
    let plain: Evaluation = evaluate(&classifier, &refs).unwrap();
    let shuffled = evaluate(&classifier, &prefs).unwrap();
    assert_eq!(plain.cil, shuffled.cil);
    assert_eq!(plain.oracle, shuffled.oracle);
    assert_eq!(plain.cil, *out.report.acc_matrix.last().unwrap());
    // the same input gives the same decision
    assert_eq!(evaluate(&classifier, &refs).unwrap(), plain);
}

#[test]
fn oracle_accuracy_dominates_per_sample() {
    let out = run_sequence(&small(2)).unwrap();
    for p in &out.predictions {
        if p.predicted_class == p.true_class {
            assert_eq!(p.oracle_class, p.true_class);
        }
    }
}

#[test]
fn errors_carry_the_task_index() {
    let cfg = small(0);
    let tasks = stream(&cfg);
    let mut state = RunState::new(cfg.clone(), cfg.data.input_dim).unwrap();
    let train = tasks[1].train_split();
    let tests = [&tasks[1].test_split() as &dyn SampleSource];
    // task 1's labels start at offset 2, not 0
    match run_task(&mut state, &train, &tests) {
        Err(Error::Task { task: 0, .. }) => {}
        other => panic!("unexpected {other:?}"),
    }
}
