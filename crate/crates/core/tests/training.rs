mod common;

use ckge_core::dataset::{load_checkpoint, save_checkpoint};
use ckge_core::eval::{EvalContext, Protocol};
use ckge_core::kg::Split;
use ckge_core::telemetry::{emit_report, read_forgetting_csv, read_metrics_csv, read_report};
use ckge_core::trainer::{
    run_continual, train_stage1, train_stage2, Mode, ModelState, TrainConfig,
};
use ckge_core::Error;

use common::small_sequence;

fn quick() -> TrainConfig {
    TrainConfig {
        dim: 8,
        tokens: 3,
        batch_size: 64,
        learning_rate: 1e-2,
        stage1_epochs: 2,
        max_epochs_first: 8,
        max_epochs: 4,
        patience: 2,
        reproducible: true,
        ..TrainConfig::default()
    }
}

fn fingerprints(s: &ModelState<f32>) -> [String; 4] {
    [
        s.entities.fingerprint(),
        s.relations.fingerprint(),
        s.entity_tokens.z.fingerprint(),
        s.relation_tokens.z.fingerprint(),
    ]
}

#[test]
fn stages_respect_freeze_contracts() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 3, 2);
    let cfg = TrainConfig {
        max_epochs: 1,
        stage1_epochs: 1,
        ..quick()
    };
    let mut s0 = ModelState::<f32>::initial(&seq, &cfg).unwrap();
    train_stage2(&seq, &cfg, 0, None, &mut s0, None).unwrap();
    let prev_before = fingerprints(&s0);

    let mut s1 = s0.grown(&seq, 1, &cfg).unwrap();
    let emb_before = (s1.entities.fingerprint(), s1.relations.fingerprint());
    let summary = train_stage1(&seq, &cfg, 1, &s0, &mut s1).unwrap();
    assert_eq!(summary.epochs, 1);
    // Token learning leaves every embedding alone.
    assert_eq!(
        (s1.entities.fingerprint(), s1.relations.fingerprint()),
        emb_before
    );
    assert_eq!(fingerprints(&s0), prev_before);

    let tokens = (
        s1.entity_tokens.z.fingerprint(),
        s1.relation_tokens.z.fingerprint(),
    );
    let emb = s1.entities.fingerprint();
    train_stage2(&seq, &cfg, 1, Some(&s0), &mut s1, None).unwrap();
    // Embedding training leaves the tokens and the previous model alone.
    assert_eq!(
        (
            s1.entity_tokens.z.fingerprint(),
            s1.relation_tokens.z.fingerprint()
        ),
        tokens
    );
    assert_eq!(fingerprints(&s0), prev_before);
    assert_ne!(s1.entities.fingerprint(), emb);
}

#[test]
fn token_learning_lowers_diversity() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 4, 2);
    let cfg = TrainConfig {
        lambda: 1.0,
        stage1_epochs: 5,
        ..quick()
    };
    let mut s0 = ModelState::<f64>::initial(&seq, &cfg).unwrap();
    train_stage2(&seq, &cfg, 0, None, &mut s0, None).unwrap();
    let mut s1 = s0.grown(&seq, 1, &cfg).unwrap();
    let summary = train_stage1(&seq, &cfg, 1, &s0, &mut s1).unwrap();
    assert!(
        summary.diversity_after < summary.diversity_before,
        "{summary:?}"
    );
}

#[test]
fn single_snapshot_is_plain_transe() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 5, 1);
    let ett = run_continual::<f32>(&seq, &quick()).unwrap();
    let ft = run_continual::<f32>(
        &seq,
        &TrainConfig {
            mode: Mode::FineTune,
            ..quick()
        },
    )
    .unwrap();
    assert_eq!(
        fingerprints(&ett.states[0])[..2],
        fingerprints(&ft.states[0])[..2]
    );
    assert_eq!(ett.report.forgetting, ft.report.forgetting);
}

#[test]
fn all_ablations_reduce_to_fine_tune() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 6, 3);
    let ablated = TrainConfig {
        no_distill: true,
        no_stage1: true,
        no_div: true,
        ..quick()
    };
    let ft = TrainConfig {
        mode: Mode::FineTune,
        ..quick()
    };
    let a = run_continual::<f32>(&seq, &ablated).unwrap();
    let b = run_continual::<f32>(&seq, &ft).unwrap();
    for (x, y) in a.states.iter().zip(&b.states) {
        assert_eq!(x.entities.fingerprint(), y.entities.fingerprint());
        assert_eq!(x.relations.fingerprint(), y.relations.fingerprint());
    }
    assert_eq!(a.report.forgetting, b.report.forgetting);
}

#[test]
fn repeated_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 7, 3);
    let a = run_continual::<f32>(&seq, &quick()).unwrap();
    let b = run_continual::<f32>(&seq, &quick()).unwrap();
    for (x, y) in a.states.iter().zip(&b.states) {
        assert_eq!(fingerprints(x), fingerprints(y));
    }
    assert_eq!(a.report.forgetting, b.report.forgetting);
    let seeded = TrainConfig { seed: 1, ..quick() };
    let c = run_continual::<f32>(&seq, &seeded).unwrap();
    assert_ne!(fingerprints(&a.states[0]), fingerprints(&c.states[0]));
}

#[test]
fn first_epoch_loss_goes_down() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 8, 1);
    let cfg = TrainConfig {
        batch_size: 16,
        ..quick()
    };
    let run = run_continual::<f32>(&seq, &cfg).unwrap();
    let losses = &run.report.snapshots[0].first_epoch_batch_losses;
    assert!(losses.len() >= 10);
    let k = losses.len() / 4;
    let head: f64 = losses[..k].iter().sum::<f64>() / k as f64;
    let tail: f64 = losses[losses.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(tail < head, "{losses:?}");
}

#[test]
fn non_finite_parameters_abort_with_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 9, 1);
    let cfg = quick();
    let mut s = ModelState::<f32>::initial(&seq, &cfg).unwrap();
    s.entities.row_mut(0)[0] = f32::NAN;
    let err = train_stage2(&seq, &cfg, 0, None, &mut s, None).unwrap_err();
    assert!(matches!(err, Error::Numeric(_)), "{err}");
}

#[test]
fn checkpoints_and_reports_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(&dir.path().join("data"), 10, 3);
    let cfg = quick();
    let run = run_continual::<f32>(&seq, &cfg).unwrap();

    let out = dir.path().join("run");
    emit_report(&run.report, &out).unwrap();
    assert_eq!(read_report(&out).unwrap(), run.report);
    let rows = read_metrics_csv(&out).unwrap();
    assert_eq!(rows.len(), 3);
    for (row, snap) in rows.iter().zip(&run.report.snapshots) {
        assert_eq!(row.mrr, snap.test.mrr);
        assert_eq!(row.cumulative_time_s, snap.metrics.cumulative_time_s);
        assert_eq!(
            row.stage1_updated_parameters,
            snap.metrics.stage1_updated_parameters
        );
    }
    let cells = read_forgetting_csv(&out).unwrap();
    assert_eq!(cells.len(), 3 * 4 / 2);
    for c in &cells {
        assert_eq!(Some(c.mrr), run.report.forgetting.mrr(c.model, c.snapshot));
    }

    let path = dir.path().join("s2.ckpt");
    save_checkpoint(&path, &run.states[2], &cfg).unwrap();
    let (back, meta) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(back, run.states[2]);
    assert_eq!(meta.snapshot, 2);
    // Evaluating the reloaded model reproduces the recorded numbers.
    for j in 0..3 {
        let r = EvalContext::new(&seq, j, Split::Test, Protocol::Filtered)
            .evaluate(&back.entities, &back.relations, false)
            .unwrap();
        assert_eq!(Some(r.mrr), run.report.forgetting.mrr(2, j));
    }
}

#[test]
fn token_parameter_count_is_fixed() {
    let dir = tempfile::tempdir().unwrap();
    let seq = small_sequence(dir.path(), 11, 3);
    let cfg = quick();
    let run = run_continual::<f32>(&seq, &cfg).unwrap();
    let want = 2 * cfg.tokens * cfg.dim;
    assert_eq!(run.report.snapshots[0].metrics.stage1_updated_parameters, 0);
    for s in &run.report.snapshots[1..] {
        assert_eq!(s.metrics.stage1_updated_parameters, want);
        assert_eq!(s.metrics.token_parameters, want);
        assert!(s.metrics.stage2_touched_parameters > 0);
    }
    let shared = run_continual::<f32>(
        &seq,
        &TrainConfig {
            shared_tokens: true,
            ..quick()
        },
    )
    .unwrap();
    for s in &shared.report.snapshots[1..] {
        assert_eq!(s.metrics.stage1_updated_parameters, cfg.tokens * cfg.dim);
    }
}
