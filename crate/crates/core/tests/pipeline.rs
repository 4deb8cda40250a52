use std::fs;

use nalgebra::DMatrix;
use ncld_core::data_stream::{read_dense, read_sparse, synthesize_drift, write_sparse, DriftMode};
use ncld_core::drift_monitor::{adapt_retrain, Strategy};
use ncld_core::harness::{emit_reports, prepare_stream, run_on, run_repeats, ExperimentConfig, Pipeline};
use ncld_core::online_model::{Checkpoint, InverseUpdate, ModelState};
use ncld_core::synthetic::generate;
use ncld_core::Error;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed_data: seed,
        chunk_size: 120,
        hidden: 12,
        timing: false,
        ..ExperimentConfig::default()
    };
    cfg.synthetic.instances = 720;
    cfg.synthetic.features = 10;
    cfg.synthetic.labels = 5;
    cfg
}

#[test]
fn sparse_and_dense_examples() {
    let ds = read_sparse("#q=2 d=3\n0 1:0.5\n1 2:1.0\n".as_bytes(), "toy").unwrap();
    assert_eq!(ds.labels, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
    assert_eq!(ds.features[(0, 0)], 0.5);
    assert_eq!(ds.features[(1, 1)], 1.0);
    assert!(matches!(read_sparse("".as_bytes(), "empty"), Err(Error::Parse { .. })));
    assert!(matches!(read_sparse("#q=2 d=3\n2 1:0.5\n".as_bytes(), "x"), Err(Error::Range { .. })));

    let csv = read_dense("f1,f2,l1,l2\n0.1,0.2,1,0\n".as_bytes(), "toy").unwrap();
    assert_eq!(csv.features.row(0).iter().copied().collect::<Vec<_>>(), vec![0.1, 0.2]);
    assert_eq!(csv.labels.row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, -1.0]);

    let mut buf = Vec::new();
    write_sparse(&csv, &mut buf).unwrap();
    assert_eq!(read_sparse(buf.as_slice(), "toy").unwrap(), csv);
}

#[test]
fn drift_halves_have_expected_cardinality() {
    let mut spec = small(0).synthetic;
    spec.min_cardinality = 3;
    spec.max_cardinality = 3;
    let ds = generate(&spec, 1).unwrap();
    let grown = synthesize_drift(&ds, DriftMode::Growth, 0.5, 2).unwrap();
    let split = grown.split_index;
    let card = |rows: std::ops::Range<usize>| {
        let n = rows.len() as f64;
        rows.map(|t| grown.dataset.labels.row(t).iter().filter(|&&v| v > 0.0).count() as f64).sum::<f64>() / n
    };
    assert_eq!(card(0..split), 1.0);
    assert_eq!(card(split..ds.len()), 3.0);
}

#[test]
fn identical_seeds_give_bit_identical_reports() {
    let cfg = ExperimentConfig {
        strategy: Strategy::Adjust,
        repeats: 2,
        ..small(3)
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    emit_reports(&run_repeats(&cfg).unwrap(), a.path()).unwrap();
    emit_reports(&run_repeats(&cfg).unwrap(), b.path()).unwrap();
    for name in ["chunks.csv", "summary.csv", "events.csv", "config.echo"] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
}

#[test]
fn inverse_routes_agree_over_a_run() {
    let cfg = small(4);
    let ds = generate(&cfg.synthetic, cfg.seed_data).unwrap();
    let low = run_on(&cfg, &ds).unwrap();
    let dense = run_on(
        &ExperimentConfig {
            inner_solve: InverseUpdate::DenseFactor,
            ..cfg.clone()
        },
        &ds,
    )
    .unwrap();
    let (a, b) = (&low.final_state.phi, &dense.final_state.phi);
    assert!((a - b).norm() <= 1e-8 * b.norm());
}

#[test]
fn literal_kernel_runs_and_reports_conditioning() {
    let cfg = ExperimentConfig {
        paper_literal_r: true,
        ..small(5)
    };
    let ds = generate(&cfg.synthetic, cfg.seed_data).unwrap();
    match run_on(&cfg, &ds) {
        Ok(rep) => assert!(rep.max_kernel_condition.is_some()),
        Err(e) => assert_eq!(e.exit_code(), 4, "{e}"),
    }
}

#[test]
fn retrain_forgets_pre_drift_order() {
    let cfg = small(6);
    let ds = generate(&cfg.synthetic, cfg.seed_data).unwrap();
    let (chunks, spec, _) = prepare_stream(&cfg, &ds).unwrap();
    let pipe = Pipeline::new(&cfg, &chunks[0], spec).unwrap();
    let ws: Vec<_> = chunks
        .iter()
        .map(|c| {
            let (x, h) = pipe.hidden(c).unwrap();
            pipe.workspace(c, &x, h).unwrap().0
        })
        .collect();
    let run = |order: &[usize]| {
        let mut state = ModelState::initialize(&ws[0], pipe.hyper).unwrap();
        for &i in order {
            state.update(&ws[i]).unwrap();
        }
        let last = &ws[5];
        state.update_inverse(last).unwrap();
        adapt_retrain(&mut state, last).unwrap();
        state.update_coefficients(last);
        state
    };
    let a = run(&[1, 2, 3, 4]);
    let b = run(&[4, 2, 1, 3]);
    assert_eq!(a.phi, b.phi);
    assert_eq!(a.p, b.p);
}

#[test]
fn checkpoint_file_round_trip() {
    let cfg = small(7);
    let ds = generate(&cfg.synthetic, cfg.seed_data).unwrap();
    let rep = run_on(&cfg, &ds).unwrap();
    let (chunks, spec, _) = prepare_stream(&cfg, &ds).unwrap();
    let pipe = Pipeline::new(&cfg, &chunks[0], spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    Checkpoint::capture(&rep.final_state, cfg.seed_model, 10, &pipe.standardizer)
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back.standardizer, pipe.standardizer);
    assert_eq!(back.restore().unwrap(), rep.final_state);
}

#[test]
fn stage_errors_carry_chunk_and_exit_code() {
    let cfg = ExperimentConfig {
        neighbors: 500,
        ..small(8)
    };
    let ds = generate(&cfg.synthetic, cfg.seed_data).unwrap();
    let err = run_on(&cfg, &ds).unwrap_err();
    assert!(matches!(err, Error::Stage { chunk: 0, stage: "build_workspace", .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
}
