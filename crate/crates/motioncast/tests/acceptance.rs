//! Acceptance gate: one test per release criterion, each printing a single
//! `[PASS]`/`[FAIL]` line before asserting, so the whole gate can be read
//! off the test output at a glance:
//!
//! ```text
//! cargo test --test acceptance -- --nocapture --test-threads=1
//! ```
//!
//! The numbered criteria:
//!
//! 1. analytic gradients match 64-bit central differences on small
//!    forecasters (max relative error < 1e-4, under 2 minutes),
//! 2. homogeneous-slab projections match the closed-form Beer–Lambert
//!    transmission, and slab splitting is multiplicative,
//! 3. ADE/FDE agree with a brute-force recomputation and their exact
//!    identities,
//! 4. the learning-rate schedule hits its contract points exactly and is
//!    continuous at the warmup boundary,
//! 5. a toy model overfits a single phantom to sub-millimeter accuracy
//!    within 10 minutes,
//! 6. patient-specific training beats multi-patient training in the
//!    planning session and degrades harder across sessions,
//! 7. the decoder is strictly causal and autoregressive inference ignores
//!    target data,
//! 8. repeated runs and file round-trips are bit-stable, and corrupted
//!    files fail with the documented error categories,
//! 9. multi-patient training pools never contain the evaluation patient.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use motioncast::dataset::{
    build_cohort, build_test_set, build_training_set, read_dataset, write_dataset, CohortManifest,
    DrrSample, NormalizationParams, PatientEntry, Session,
};
use motioncast::drr::project_coronal;
use motioncast::eval::{
    ade, evaluate, fde, run_strategy_comparison, ComparisonPlan, Forecaster, Horizon, ReportTags,
    STRATEGY_MP, STRATEGY_PS,
};
use motioncast::model::{
    load_checkpoint, save_checkpoint, ForecastModel, ModelConfig,
};
use motioncast::phantom::{generate_phantom, AttenuationVolume, BreathingParams, PhantomSpec};
use motioncast::train::{gradcheck_forecaster, history_csv, lr_at, train, TrainConfig};

/// Print the criterion verdict, then enforce it.
fn report(criterion: u32, name: &str, ok: bool, detail: &str) {
    let tag = if ok { "PASS" } else { "FAIL" };
    println!("[{tag}] criterion {criterion} ({name}): {detail}");
    assert!(ok, "criterion {criterion} ({name}) failed: {detail}");
}

/// A 64³ phantom at 4 mm spacing: same 256 mm world extent as the default
/// geometry, cheap enough to render thousands of frames in seconds.
fn coarse_spec(patient_id: &str) -> PhantomSpec {
    PhantomSpec {
        patient_id: patient_id.to_string(),
        dims: [64, 64, 64],
        spacing_mm: [4.0, 4.0, 4.0],
        ..PhantomSpec::default()
    }
}

// ---------------------------------------------------------------------------
// 1. Gradient audit

#[test]
fn gradient_audit_matches_finite_differences() {
    // Small image/horizon so that auditing every parameter stays fast while
    // still exercising the full tokenize → encode → decode → head graph.
    let base = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        patch_size: 16,
        image_size: 32,
        t_obs: 8,
        t_pred: 3,
        dropout: 0.0,
    };
    let configs = [
        ("d8-l1", ModelConfig { ..base.clone() }),
        ("d16-l2", ModelConfig { d_model: 16, n_heads: 4, n_layers: 2, d_ff: 32, ..base.clone() }),
        ("d32-l1", ModelConfig { d_model: 32, n_heads: 4, d_ff: 64, ..base.clone() }),
    ];
    let t0 = Instant::now();
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for (i, (tag, cfg)) in configs.iter().enumerate() {
        let err = gradcheck_forecaster(cfg, 11 + i as u64, 1e-4).expect("gradcheck runs");
        lines.push(format!("{tag} {err:.2e}"));
        worst = worst.max(err);
    }
    let secs = t0.elapsed().as_secs_f64();
    report(
        1,
        "gradient audit",
        worst < 1e-4 && secs < 120.0,
        &format!("max rel error {worst:.2e} [{}] in {secs:.1} s (< 1e-4, < 120 s)", lines.join(", ")),
    );
}

// ---------------------------------------------------------------------------
// 2. Projection oracle

fn uniform_slab(mu: f64, ny: usize, dy: f64) -> AttenuationVolume {
    AttenuationVolume::new([3, ny, 2], [1.5, dy, 2.0], [0.0, 0.0, 0.0], vec![mu; 3 * ny * 2])
        .expect("valid slab")
}

/// A stack of homogeneous layers along the ray axis, each `(mu, ny)` thick.
fn layered_slab(layers: &[(f64, usize)], dy: f64) -> AttenuationVolume {
    let ny: usize = layers.iter().map(|&(_, n)| n).sum();
    let (nx, nz) = (3, 2);
    let mut values = vec![0.0; nx * ny * nz];
    for z in 0..nz {
        let mut y = 0;
        for &(mu, n) in layers {
            for _ in 0..n {
                for x in 0..nx {
                    values[(z * ny + y) * nx + x] = mu;
                }
                y += 1;
            }
        }
    }
    AttenuationVolume::new([nx, ny, nz], [1.5, dy, 2.0], [0.0, 0.0, 0.0], values)
        .expect("valid slab")
}

#[test]
fn slab_projection_matches_beer_lambert() {
    // Attenuations span soft tissue to bone-like values (1/mm); depths span
    // thin to body-scale slabs.
    let mus = [0.0008, 0.002, 0.0045, 0.009, 0.019];
    let geometries = [(10_usize, 1.0), (25, 2.0), (8, 3.5)];
    let mut combos = 0;
    let mut worst: f64 = 0.0;
    for &mu in &mus {
        for &(ny, dy) in &geometries {
            let expected = (-mu * ny as f64 * dy).exp();
            let frame = project_coronal(&uniform_slab(mu, ny, dy));
            for &v in &frame.values {
                worst = worst.max((v - expected).abs());
            }
            combos += 1;
        }
    }

    // Splitting a slab into sub-slabs must multiply transmissions: the
    // layered projection equals the product of its parts' projections.
    let mut worst_split: f64 = 0.0;
    let splits: [&[(f64, usize)]; 3] = [
        &[(0.002, 6), (0.011, 9)],
        &[(0.0007, 12), (0.0301, 4)],
        &[(0.001, 5), (0.004, 7), (0.0095, 3)],
    ];
    for layers in splits {
        let dy = 2.0;
        let whole = project_coronal(&layered_slab(layers, dy));
        let mut product = vec![1.0_f64; whole.values.len()];
        for &(mu, n) in layers {
            let part = project_coronal(&uniform_slab(mu, n, dy));
            for (p, &t) in product.iter_mut().zip(&part.values) {
                *p *= t;
            }
        }
        for (&w, &p) in whole.values.iter().zip(&product) {
            worst_split = worst_split.max((w - p).abs());
        }
    }

    report(
        2,
        "projection oracle",
        combos >= 10 && worst < 1e-6 && worst_split < 1e-9,
        &format!(
            "{combos} (mu, L) combos, worst |T - exp(-muL)| {worst:.2e} (< 1e-6), \
             worst split residual {worst_split:.2e} (< 1e-9)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 3. Metric oracle

#[test]
fn displacement_metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.gen_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng| -> Vec<[f64; 3]> {
            (0..t)
                .map(|_| {
                    [
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-40.0..40.0),
                        rng.gen_range(-40.0..40.0),
                    ]
                })
                .collect()
        };
        let pred = draw(&mut rng);
        let target = draw(&mut rng);

        // Brute force, written out with indexed loops.
        let mut sum = 0.0;
        let mut last = 0.0;
        for i in 0..t {
            let dx = pred[i][0] - target[i][0];
            let dy = pred[i][1] - target[i][1];
            let dz = pred[i][2] - target[i][2];
            let d = (dx * dx + dy * dy + dz * dz).sqrt();
            sum += d;
            last = d;
        }
        let brute_ade = sum / t as f64;

        worst = worst.max((ade(&pred, &target).unwrap() - brute_ade).abs());
        worst = worst.max((fde(&pred, &target).unwrap() - last).abs());
    }

    // Exact identities: a (3, 4, 0) displacement is 5 mm on the nose, and a
    // one-point horizon makes ADE and FDE the same number bit for bit.
    let five = ade(&[[3.0, 4.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap();
    let exact_five = five == 5.0 && fde(&[[3.0, 4.0, 0.0]], &[[0.0, 0.0, 0.0]]).unwrap() == 5.0;
    let mut single_step_identity = true;
    for _ in 0..200 {
        let p = [[rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]];
        let q = [[rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0), rng.gen_range(-40.0..40.0)]];
        if ade(&p, &q).unwrap().to_bits() != fde(&p, &q).unwrap().to_bits() {
            single_step_identity = false;
        }
    }

    report(
        3,
        "metric oracle",
        worst < 1e-9 && exact_five && single_step_identity,
        &format!(
            "1000 pairs, worst |metric - brute force| {worst:.2e} (< 1e-9); \
             (3,4,0) -> 5 mm exact: {exact_five}; single-step ADE == FDE: {single_step_identity}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Scheduler contract

#[test]
fn lr_schedule_hits_contract_points() {
    let cfg = TrainConfig::default();
    assert_eq!(
        (cfg.epochs, cfg.warmup_epochs, cfg.lr_min, cfg.lr_max),
        (100, 10, 5e-7, 5e-5),
        "default schedule shape changed"
    );
    let at = |e: f64| lr_at(&cfg, e).expect("in range");

    let endpoints = at(0.0) == 5e-7 && at(10.0) == 5e-5 && at(100.0) == 5e-7;

    let rel = |x: f64, want: f64| (x - want).abs() / want;
    let mid_rel = rel(at(5.0), 2.525e-5).max(rel(at(55.0), 2.525e-5));

    // One-sided limits at the warmup boundary by linear extrapolation: the
    // warmup side is exactly linear, and the cosine side's curvature
    // contributes only ~3e-16 at h = 1e-4, so a genuine jump would show up
    // directly in the difference.
    let h = 1e-4;
    let from_below = 2.0 * at(10.0 - h) - at(10.0 - 2.0 * h);
    let from_above = 2.0 * at(10.0 + h) - at(10.0 + 2.0 * h);
    let jump = (from_below - from_above).abs();

    report(
        4,
        "scheduler contract",
        endpoints && mid_rel < 1e-12 && jump < 1e-15,
        &format!(
            "endpoints exact: {endpoints}; mid-value rel error {mid_rel:.2e} (< 1e-12); \
             warmup-boundary jump {jump:.2e} (< 1e-15)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Overfit sanity

#[test]
fn overfit_on_one_phantom_reaches_submillimeter() {
    let t0 = Instant::now();
    let phantom = generate_phantom(&coarse_spec("overfit"), 101).expect("phantom");
    // 220 frames -> 200 sliding windows.
    let train_set = build_training_set(&phantom, 220, 202).expect("training set");
    assert_eq!(train_set.n_samples(), 200);

    // The production schedule's peak rate and batch size are sized for
    // the full-scale model and corpus; memorising 200 samples with the
    // small preset in 100 epochs needs a hotter peak and per-sample
    // updates (20k optimiser steps instead of 1.3k).
    let train_cfg =
        TrainConfig { lr_max: 1.5e-3, batch_size: 1, seed: 303, ..TrainConfig::default() };
    let outcome = train(&ModelConfig::toy(), &train_cfg, &train_set, None).expect("training runs");

    // Fresh planning-session sequences from the same phantom; the couch
    // shift is zero so only the model's own error is measured.
    let test_set =
        build_test_set(&phantom, Session::T1, 10, 20.0, [0.0; 3], 404).expect("test set");
    let metrics = evaluate(&outcome.model, &test_set, Horizon::Full, &ReportTags::default())
        .expect("evaluation runs");
    let secs = t0.elapsed().as_secs_f64();

    let first = outcome.history.first().expect("nonempty history").mean_loss;
    let last = outcome.history.last().expect("nonempty history").mean_loss;
    let loss_drop = last < 0.1 * first;
    report(
        5,
        "overfit sanity",
        loss_drop && metrics.ade_mean < 0.5 && secs < 600.0,
        &format!(
            "loss {first:.3} -> {last:.4} (need < 10%); test ADE {:.3} mm (< 0.5); \
             {secs:.0} s (< 600)",
            metrics.ade_mean
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Strategy trend

/// Four phantoms with distinct anatomy and breathing, each with a fixed
/// session-to-session change (amplitude scale, baseline shift, tumor scale).
fn trend_cohort() -> CohortManifest {
    let patient = |id: &str,
                   center: [f64; 3],
                   radii: [f64; 3],
                   amp: f64,
                   period: f64,
                   phase: f64,
                   t2: [f64; 3]| PatientEntry {
        patient_id: id.to_string(),
        spec: PhantomSpec {
            tumor_center_mm: center,
            tumor_radii_mm: radii,
            breathing: BreathingParams {
                amplitude_mm: amp,
                period_s: period,
                phase_rad: phase,
                ..BreathingParams::default()
            },
            ..coarse_spec(id)
        },
        seeds: None,
        t2_perturbation: Some(t2),
    };
    CohortManifest {
        patients: vec![
            patient("p01", [45.0, 10.0, -20.0], [9.0, 8.0, 10.0], 8.0, 3.2, 0.4, [0.85, 3.0, 1.15]),
            patient("p02", [-50.0, -5.0, -35.0], [12.0, 10.0, 8.0], 10.0, 4.0, 2.1, [1.2, -2.5, 0.9]),
            patient("p03", [40.0, 20.0, -45.0], [7.0, 7.0, 7.0], 12.0, 4.8, 5.0, [0.9, 4.0, 1.1]),
            patient("p04", [-45.0, 15.0, -15.0], [10.0, 12.0, 9.0], 9.0, 5.6, 1.2, [1.15, 2.0, 1.2]),
        ],
        ..CohortManifest::default()
    }
}

#[test]
fn patient_specific_beats_multi_patient_in_planning_session() {
    let cohort = build_cohort(&trend_cohort()).expect("cohort builds");
    let plan = ComparisonPlan {
        n_train_grid: vec![200, 1000],
        seeds: vec![1, 2, 3],
        model: ModelConfig {
            d_model: 16,
            n_heads: 4,
            n_layers: 2,
            d_ff: 32,
            patch_size: 32,
            image_size: 64,
            t_obs: 16,
            t_pred: 5,
            dropout: 0.1,
        },
        train: TrainConfig {
            epochs: 12,
            warmup_epochs: 2,
            lr_min: 1e-6,
            lr_max: 2e-4,
            ..TrainConfig::default()
        },
        n_test_sequences: 2,
        test_duration_s: 10.0,
        setup_error_bound_mm: 3.0,
    };
    let t0 = Instant::now();
    let result = run_strategy_comparison(&cohort, &plan).expect("comparison runs");
    let secs = t0.elapsed().as_secs_f64();

    let cohort_mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut planning_ok = true;
    let mut planning_lines = Vec::new();
    let mut ps_degradations = Vec::new();
    let mut mp_degradations = Vec::new();
    for &n in &plan.n_train_grid {
        let t1 = result
            .contrasts
            .iter()
            .find(|c| c.n_train == n && c.session == Session::T1)
            .expect("planning-session contrast");
        let t2 = result
            .contrasts
            .iter()
            .find(|c| c.n_train == n && c.session == Session::T2)
            .expect("treatment-session contrast");
        let (ps1, mp1) = (cohort_mean(&t1.ps_patient_means), cohort_mean(&t1.mp_patient_means));
        planning_ok &= ps1 < mp1;
        planning_lines.push(format!("n={n}: PS {ps1:.2} vs MP {mp1:.2} mm"));
        for i in 0..t1.ps_patient_means.len() {
            ps_degradations.push(t2.ps_patient_means[i] - t1.ps_patient_means[i]);
            mp_degradations.push(t2.mp_patient_means[i] - t1.mp_patient_means[i]);
        }
    }
    let ps_deg = cohort_mean(&ps_degradations);
    let mp_deg = cohort_mean(&mp_degradations);

    report(
        6,
        "strategy trend",
        planning_ok && ps_deg > mp_deg,
        &format!(
            "planning session: {} (PS < MP everywhere: {planning_ok}); \
             session-change degradation PS {ps_deg:+.2} vs MP {mp_deg:+.2} mm \
             (PS worse: {}); {secs:.0} s",
            planning_lines.join(", "),
            ps_deg > mp_deg
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Causality

#[test]
fn decoder_is_causal_and_inference_ignores_targets() {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 32,
        patch_size: 32,
        image_size: 64,
        t_obs: 16,
        t_pred: 5,
        dropout: 0.0,
    };
    let model = ForecastModel::init_glorot(cfg.clone(), 77).expect("model");

    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let frames: Vec<Vec<f32>> = (0..cfg.t_obs)
        .map(|_| (0..cfg.image_size * cfg.image_size).map(|_| rng.gen_range(0.0..1.0)).collect())
        .collect();
    let frame_refs: Vec<&[f32]> = frames.iter().map(|f| f.as_slice()).collect();
    let pos = |rng: &mut ChaCha8Rng| {
        [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]
    };
    let observed: Vec<[f64; 3]> = (0..cfg.t_obs).map(|_| pos(&mut rng)).collect();
    let prefix: Vec<[f64; 3]> = (0..cfg.t_pred - 1).map(|_| pos(&mut rng)).collect();

    // Teacher-forced probing: nudging the decoder input for step j must
    // leave predictions up to and including step j bit-identical (the
    // causal mask zeroes that path exactly), while later steps move.
    let bits = |p: &[[f64; 3]]| -> Vec<[u64; 3]> {
        p.iter().map(|q| [q[0].to_bits(), q[1].to_bits(), q[2].to_bits()]).collect()
    };
    let base = model.forward_teacher_forced(&frame_refs, &observed, &prefix).expect("forward");
    let base_bits = bits(&base);
    let mut causal = true;
    let mut probe_live = true;
    for j in 0..cfg.t_pred - 1 {
        let mut nudged = prefix.clone();
        nudged[j][0] += 0.25;
        nudged[j][1] -= 0.5;
        nudged[j][2] += 0.125;
        let out = model.forward_teacher_forced(&frame_refs, &observed, &nudged).expect("forward");
        let out_bits = bits(&out);
        for i in 0..=j {
            causal &= out_bits[i] == base_bits[i];
        }
        probe_live &= (j + 1..cfg.t_pred).any(|i| out_bits[i] != base_bits[i]);
    }

    // Autoregressive inference never reads the targets at all: poisoning
    // them with NaN cannot change a single output bit.
    let norm = NormalizationParams::new([0.0; 3], [10.0; 3]).expect("norm");
    let sample = DrrSample {
        frames: frame_refs.clone(),
        observed_positions: observed.clone(),
        targets: (0..cfg.t_pred).map(|_| pos(&mut rng)).collect(),
        norm,
        patient_id: "probe",
        session: Session::T1,
        sequence: 0,
        t0: 0,
    };
    let clean = model.forecast(&sample).expect("forecast");
    let mut poisoned = sample.clone();
    poisoned.targets = vec![[f64::NAN; 3]; cfg.t_pred];
    let dirty = model.forecast(&poisoned).expect("forecast");
    let targets_unused = bits(&clean) == bits(&dirty);

    report(
        7,
        "causality",
        causal && probe_live && targets_unused,
        &format!(
            "prediction i bit-stable under future-target nudges: {causal} \
             (later steps respond: {probe_live}); poisoned targets leave \
             autoregressive output bit-identical: {targets_unused}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Determinism & formats

#[test]
fn repeated_runs_and_file_formats_are_bit_stable() {
    let dir = tempfile::tempdir().expect("tempdir");
    let at = |name: &str| dir.path().join(name);
    let phantom = generate_phantom(&coarse_spec("stable"), 55).expect("phantom");

    // Same seed, same bytes: datasets.
    let ds1 = build_training_set(&phantom, 64, 9).expect("dataset");
    let ds2 = build_training_set(&phantom, 64, 9).expect("dataset");
    write_dataset(&ds1, &at("a.tmfd")).expect("write");
    write_dataset(&ds2, &at("b.tmfd")).expect("write");
    let bytes_a = std::fs::read(at("a.tmfd")).unwrap();
    let datasets_stable = bytes_a == std::fs::read(at("b.tmfd")).unwrap();

    // Dataset round-trip: read back, write again, compare bytes.
    let reread = read_dataset(&at("a.tmfd")).expect("read");
    write_dataset(&reread, &at("c.tmfd")).expect("write");
    let dataset_round_trip = bytes_a == std::fs::read(at("c.tmfd")).unwrap();

    // Same seed, same bytes: checkpoints and loss histories.
    let model_cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        d_ff: 16,
        patch_size: 32,
        image_size: 64,
        t_obs: 16,
        t_pred: 5,
        dropout: 0.1,
    };
    let train_cfg = TrainConfig {
        epochs: 2,
        warmup_epochs: 1,
        batch_size: 8,
        seed: 66,
        ..TrainConfig::default()
    };
    let run1 = train(&model_cfg, &train_cfg, &ds1, None).expect("train");
    let run2 = train(&model_cfg, &train_cfg, &ds1, None).expect("train");
    save_checkpoint(&run1.model, &at("a.tmck")).expect("save");
    save_checkpoint(&run2.model, &at("b.tmck")).expect("save");
    let ck_bytes = std::fs::read(at("a.tmck")).unwrap();
    let checkpoints_stable = ck_bytes == std::fs::read(at("b.tmck")).unwrap();
    let histories_stable = history_csv(&run1.history) == history_csv(&run2.history);

    // Checkpoint round-trip.
    let reloaded = load_checkpoint(&at("a.tmck")).expect("load");
    save_checkpoint(&reloaded, &at("c.tmck")).expect("save");
    let checkpoint_round_trip = ck_bytes == std::fs::read(at("c.tmck")).unwrap();

    // Corrupted files must fail with the documented categories.
    let category_of = |err: motioncast::error::Error| err.category().to_string();
    std::fs::write(at("short.tmfd"), &bytes_a[..bytes_a.len() / 2]).unwrap();
    let truncated_ds = category_of(read_dataset(&at("short.tmfd")).unwrap_err());
    let mut bad_magic = bytes_a.clone();
    bad_magic[0] ^= 0xff;
    std::fs::write(at("magic.tmfd"), &bad_magic).unwrap();
    let wrong_magic = category_of(read_dataset(&at("magic.tmfd")).unwrap_err());
    std::fs::write(at("short.tmck"), &ck_bytes[..ck_bytes.len() / 2]).unwrap();
    let truncated_ck = category_of(load_checkpoint(&at("short.tmck")).unwrap_err());
    let missing = category_of(read_dataset(&at("nope.tmfd")).unwrap_err());
    let categories_ok = truncated_ds == "format"
        && wrong_magic == "format"
        && truncated_ck == "format"
        && missing == "input-not-found";

    report(
        8,
        "determinism & formats",
        datasets_stable
            && dataset_round_trip
            && checkpoints_stable
            && histories_stable
            && checkpoint_round_trip
            && categories_ok,
        &format!(
            "datasets bit-stable: {datasets_stable}, round-trip: {dataset_round_trip}; \
             checkpoints bit-stable: {checkpoints_stable}, round-trip: {checkpoint_round_trip}; \
             histories bit-stable: {histories_stable}; corruption categories \
             [{truncated_ds}, {wrong_magic}, {truncated_ck}, {missing}] as documented: {categories_ok}"
        ),
    );
}

// ---------------------------------------------------------------------------
// 9. Training-pool exclusion

#[test]
fn multi_patient_pools_never_contain_the_evaluation_patient() {
    let patient = |id: &str, period: f64| PatientEntry {
        patient_id: id.to_string(),
        spec: PhantomSpec {
            breathing: BreathingParams { period_s: period, ..BreathingParams::default() },
            ..coarse_spec(id)
        },
        seeds: None,
        t2_perturbation: None,
    };
    let manifest = CohortManifest {
        patients: vec![patient("e1", 3.6), patient("e2", 4.4), patient("e3", 5.2)],
        ..CohortManifest::default()
    };
    let cohort = build_cohort(&manifest).expect("cohort builds");
    let plan = ComparisonPlan {
        n_train_grid: vec![24, 30],
        seeds: vec![1, 2],
        model: ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            patch_size: 32,
            image_size: 64,
            t_obs: 16,
            t_pred: 5,
            dropout: 0.1,
        },
        train: TrainConfig { epochs: 2, warmup_epochs: 1, batch_size: 8, ..TrainConfig::default() },
        n_test_sequences: 1,
        test_duration_s: 5.0,
        setup_error_bound_mm: 1.0,
    };
    let result = run_strategy_comparison(&cohort, &plan).expect("comparison runs");

    // One cell per (patient, strategy, pool size, seed, session): each
    // trained model is evaluated on both sessions.
    let expected_cells =
        manifest.patients.len() * 2 * plan.n_train_grid.len() * plan.seeds.len() * 2;
    let mut checked = 0;
    let mut exclusion_ok = true;
    let mut ps_pure = true;
    for cell in &result.cells {
        let target = &cell.report.patient_id;
        match cell.report.strategy.as_str() {
            STRATEGY_MP => {
                exclusion_ok &= !cell.train_pool.is_empty()
                    && cell.train_pool.iter().all(|(source, _)| source != target);
                checked += 1;
            }
            STRATEGY_PS => {
                ps_pure &= !cell.train_pool.is_empty()
                    && cell.train_pool.iter().all(|(source, _)| source == target);
                checked += 1;
            }
            other => panic!("unexpected strategy {other}"),
        }
    }

    report(
        9,
        "training-pool exclusion",
        checked == expected_cells && exclusion_ok && ps_pure,
        &format!(
            "{checked}/{expected_cells} cells checked; multi-patient pools exclude the \
             evaluation patient in every cell: {exclusion_ok}; patient-specific pools \
             draw only from it: {ps_pure}"
        ),
    );
}
