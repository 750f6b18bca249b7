//! Forecast evaluation and the patient-specific vs multi-patient
//! comparison study.
//!
//! The metrics live in millimetres: predictions come out of the model in
//! normalized units and are mapped back through the dataset's
//! [`NormalizationParams`] before any distance is taken.  [`evaluate`]
//! runs one forecaster over one session dataset; [`run_strategy_comparison`]
//! sweeps the full `strategy × patient × n_train × seed × session` grid,
//! reusing rendered data across grid cells, and attaches a paired t-test
//! per `(n_train, session)`.  [`write_report`] serializes the grid to two
//! CSV files whose floats carry nine significant digits so a re-read
//! reproduces the summary byte for byte.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;

use crate::dataset::{
    balanced_pools, build_test_set, build_training_set, denormalize_position, mix_seed,
    simulate_t2, truncate_frames, Cohort, DrrSample, Session, SessionDataset,
};
use crate::error::{Error, Result};
use crate::model::{ForecastModel, ModelConfig};
use crate::train::{train_on_samples, TrainConfig};

/// Strategy label for models trained only on the evaluated patient.
pub const STRATEGY_PS: &str = "PS";
/// Strategy label for models trained on the other patients' data.
pub const STRATEGY_MP: &str = "MP";

/// Two-sided significance threshold for the paired test.
pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

/// Default threshold below which a per-patient error is counted as
/// "within tolerance" in [`error_decomposition`].
pub const DECOMPOSITION_THRESHOLD_MM: f64 = 2.0;

// ---------------------------------------------------------------------------
// Trajectory metrics
// ---------------------------------------------------------------------------

fn euclidean(a: [f64; 3], b: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let d = a[k] - b[k];
        s += d * d;
    }
    s.sqrt()
}

/// Average displacement error: mean Euclidean distance between predicted
/// and true positions over the horizon.
pub fn ade(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "ade needs equal lengths, got {} predictions and {} references",
            pred.len(),
            truth.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Parameter("ade of an empty horizon".into()));
    }
    let sum: f64 = pred.iter().zip(truth).map(|(&p, &t)| euclidean(p, t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Final displacement error: Euclidean distance at the last horizon step.
pub fn fde(pred: &[[f64; 3]], truth: &[[f64; 3]]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "fde needs equal lengths, got {} predictions and {} references",
            pred.len(),
            truth.len()
        )));
    }
    match (pred.last(), truth.last()) {
        (Some(&p), Some(&t)) => Ok(euclidean(p, t)),
        _ => Err(Error::Parameter("fde of an empty horizon".into())),
    }
}

// ---------------------------------------------------------------------------
// Forecasters
// ---------------------------------------------------------------------------

/// Anything that can map an observed window to future normalized
/// positions.  Implemented by the transformer and by the reference
/// baselines used to sanity-check the evaluation plumbing.
pub trait Forecaster {
    fn t_obs(&self) -> usize;
    fn t_pred(&self) -> usize;
    /// Predict `t_pred` normalized positions from the sample's observed
    /// frames and positions.  Must not look at `sample.targets`.
    fn forecast(&self, sample: &DrrSample<'_>) -> Result<Vec<[f64; 3]>>;
}

impl Forecaster for ForecastModel {
    fn t_obs(&self) -> usize {
        self.config.t_obs
    }

    fn t_pred(&self) -> usize {
        self.config.t_pred
    }

    fn forecast(&self, sample: &DrrSample<'_>) -> Result<Vec<[f64; 3]>> {
        self.forward_autoregressive(&sample.frames, &sample.observed_positions)
    }
}

/// Baseline that freezes the last observed position for the whole
/// horizon.  Any useful model must beat it on moving targets.
#[derive(Debug, Clone, Copy)]
pub struct PersistenceBaseline {
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Forecaster for PersistenceBaseline {
    fn t_obs(&self) -> usize {
        self.t_obs
    }

    fn t_pred(&self) -> usize {
        self.t_pred
    }

    fn forecast(&self, sample: &DrrSample<'_>) -> Result<Vec<[f64; 3]>> {
        let last = *sample
            .observed_positions
            .last()
            .ok_or_else(|| Error::Parameter("persistence needs at least one observation".into()))?;
        Ok(vec![last; self.t_pred])
    }
}

/// Baseline that returns the ground truth; pins the evaluation pipeline's
/// zero point (its ADE must be exactly 0).
#[derive(Debug, Clone, Copy)]
pub struct OracleForecaster {
    pub t_obs: usize,
    pub t_pred: usize,
}

impl Forecaster for OracleForecaster {
    fn t_obs(&self) -> usize {
        self.t_obs
    }

    fn t_pred(&self) -> usize {
        self.t_pred
    }

    fn forecast(&self, sample: &DrrSample<'_>) -> Result<Vec<[f64; 3]>> {
        Ok(sample.targets.clone())
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// How much of the prediction horizon enters the metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    /// All predicted steps (1 s ahead at the nominal frame rate).
    Full,
    /// Only the first predicted step (200 ms ahead), for latency-style
    /// reporting.  ADE and FDE coincide here.
    FirstStep,
}

/// Labels a [`MetricsReport`] with its grid coordinates.  `strategy`,
/// `n_train` and `seed` describe how the evaluated model was trained.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportTags {
    pub strategy: String,
    pub n_train: usize,
    pub seed: u64,
}

impl Default for ReportTags {
    fn default() -> Self {
        ReportTags {
            strategy: "NA".into(),
            n_train: 0,
            seed: 0,
        }
    }
}

/// Evaluation result of one forecaster on one session dataset, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub patient_id: String,
    pub session: Session,
    pub strategy: String,
    pub n_train: usize,
    pub seed: u64,
    pub per_sample_ade: Vec<f64>,
    pub per_sample_fde: Vec<f64>,
    pub ade_mean: f64,
    /// Sample standard deviation (n − 1) of the per-sample ADEs.
    pub ade_sd: f64,
    pub fde_mean: f64,
    pub fde_sd: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|&x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

/// Run `forecaster` over every window of `dataset` and report ADE/FDE in
/// millimetres.  Predictions and targets are denormalized with the
/// dataset's own parameters before distances are taken.
pub fn evaluate<F: Forecaster + ?Sized>(
    forecaster: &F,
    dataset: &SessionDataset,
    horizon: Horizon,
    tags: &ReportTags,
) -> Result<MetricsReport> {
    if forecaster.t_obs() != dataset.t_obs || forecaster.t_pred() != dataset.t_pred {
        return Err(Error::Contract(format!(
            "forecaster window ({} obs, {} pred) does not match dataset window ({} obs, {} pred)",
            forecaster.t_obs(),
            forecaster.t_pred(),
            dataset.t_obs,
            dataset.t_pred
        )));
    }
    let n = dataset.n_samples();
    if n == 0 {
        return Err(Error::Parameter(
            "dataset has no complete windows to evaluate".into(),
        ));
    }
    let mut per_sample_ade = Vec::with_capacity(n);
    let mut per_sample_fde = Vec::with_capacity(n);
    for i in 0..n {
        let sample = dataset.sample(i)?;
        let pred_norm = forecaster.forecast(&sample)?;
        if pred_norm.len() != dataset.t_pred {
            return Err(Error::Shape(format!(
                "forecaster returned {} positions, expected {}",
                pred_norm.len(),
                dataset.t_pred
            )));
        }
        let pred_mm: Vec<[f64; 3]> = pred_norm
            .iter()
            .map(|&p| denormalize_position(p, &sample.norm))
            .collect();
        let truth_mm: Vec<[f64; 3]> = sample
            .targets
            .iter()
            .map(|&p| denormalize_position(p, &sample.norm))
            .collect();
        let steps = match horizon {
            Horizon::Full => dataset.t_pred,
            Horizon::FirstStep => 1,
        };
        per_sample_ade.push(ade(&pred_mm[..steps], &truth_mm[..steps])?);
        per_sample_fde.push(fde(&pred_mm[..steps], &truth_mm[..steps])?);
    }
    Ok(MetricsReport {
        patient_id: dataset.patient_id.clone(),
        session: dataset.session,
        strategy: tags.strategy.clone(),
        n_train: tags.n_train,
        seed: tags.seed,
        ade_mean: mean(&per_sample_ade),
        ade_sd: sample_sd(&per_sample_ade),
        fde_mean: mean(&per_sample_fde),
        fde_sd: sample_sd(&per_sample_fde),
        per_sample_ade,
        per_sample_fde,
    })
}

// ---------------------------------------------------------------------------
// Paired t-test
// ---------------------------------------------------------------------------

/// Natural log of the gamma function (Lanczos approximation, g = 7,
/// nine coefficients; relative error below 1e-13 on the positive axis).
fn ln_gamma(x: f64) -> f64 {
    const COEFFS: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // Reflection keeps the approximation in its accurate half-plane.
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let z = x - 1.0;
        let mut acc = COEFFS[0];
        for (i, &c) in COEFFS.iter().enumerate().skip(1) {
            acc += c / (z + i as f64);
        }
        let t = z + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Continued fraction for the regularized incomplete beta function
/// (modified Lentz method).  Converges fast for `x < (a+1)/(a+b+2)`.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const MAX_ITER: usize = 300;
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        // Even step.
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        // Odd step.
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)` for `a, b > 0`,
/// `x ∈ [0, 1]`.
pub(crate) fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of
/// freedom: `P(|T| ≥ |t|) = I_x(df/2, 1/2)` with `x = df / (df + t²)`.
pub fn student_t_two_sided_p(t: f64, df: usize) -> Result<f64> {
    if df == 0 {
        return Err(Error::Parameter("t distribution needs df ≥ 1".into()));
    }
    if !t.is_finite() {
        return Ok(0.0);
    }
    let dff = df as f64;
    let x = dff / (dff + t * t);
    Ok(regularized_incomplete_beta(dff / 2.0, 0.5, x))
}

/// Outcome of a two-sided paired t-test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub df: usize,
    /// `p < SIGNIFICANCE_LEVEL`.
    pub significant: bool,
    /// Set when the differences had zero variance around a nonzero mean,
    /// where the statistic is infinite and `p` is reported as 0.
    pub degenerate: bool,
}

/// Two-sided paired t-test on matched samples `a` and `b`.
///
/// Conventions for the zero-variance corner cases: all differences zero
/// gives `t = 0, p = 1`; zero variance around a nonzero mean gives an
/// infinite statistic, `p = 0`, and the `degenerate` flag.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "paired test needs equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Parameter(format!(
            "paired test needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(Error::Numeric("paired test saw a non-finite difference".into()));
    }
    let n = diffs.len();
    let df = n - 1;
    let m = mean(&diffs);
    let sd = sample_sd(&diffs);
    if sd == 0.0 {
        return Ok(if m == 0.0 {
            TTest {
                t: 0.0,
                p: 1.0,
                df,
                significant: false,
                degenerate: false,
            }
        } else {
            TTest {
                t: if m > 0.0 { f64::INFINITY } else { f64::NEG_INFINITY },
                p: 0.0,
                df,
                significant: true,
                degenerate: true,
            }
        });
    }
    let t = m / (sd / (n as f64).sqrt());
    let p = student_t_two_sided_p(t, df)?;
    Ok(TTest {
        t,
        p,
        df,
        significant: p < SIGNIFICANCE_LEVEL,
        degenerate: false,
    })
}

// ---------------------------------------------------------------------------
// Strategy comparison
// ---------------------------------------------------------------------------

/// Everything a comparison run needs beyond the cohort itself.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComparisonPlan {
    /// Training-set sizes (frames per patient) to sweep.
    pub n_train_grid: Vec<usize>,
    /// Independent training repetitions per grid cell.
    pub seeds: Vec<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Test sequences per patient and session.
    pub n_test_sequences: usize,
    /// Duration of each test sequence, seconds.
    pub test_duration_s: f64,
    /// Per-axis bound of the per-sequence setup error, mm.
    pub setup_error_bound_mm: f64,
}

impl Default for ComparisonPlan {
    fn default() -> Self {
        ComparisonPlan {
            n_train_grid: vec![200, 500, 1000, 2500],
            seeds: vec![1, 2, 3],
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            n_test_sequences: 10,
            test_duration_s: 20.0,
            setup_error_bound_mm: 3.0,
        }
    }
}

impl ComparisonPlan {
    pub fn validate(&self) -> Result<()> {
        if self.n_train_grid.is_empty() {
            return Err(Error::Parameter("comparison needs a non-empty n_train grid".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Parameter("comparison needs at least one seed".into()));
        }
        if self.n_test_sequences == 0 {
            return Err(Error::Parameter("comparison needs test sequences".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        let window = self.model.t_obs + self.model.t_pred;
        if let Some(&n) = self.n_train_grid.iter().find(|&&n| n < window) {
            return Err(Error::Parameter(format!(
                "n_train {n} is below the window length {window}"
            )));
        }
        Ok(())
    }
}

/// One trained-and-evaluated grid cell.
#[derive(Debug, Clone)]
pub struct GridCell {
    pub report: MetricsReport,
    /// Exactly which windows the model trained on, as
    /// `(patient_id, sample_index)` pairs in training order.
    pub train_pool: Vec<(String, usize)>,
    pub final_train_loss: f64,
}

/// Paired comparison across patients for one `(n_train, session)` point,
/// on per-patient ADE means (averaged over seeds within each patient).
#[derive(Debug, Clone)]
pub struct StrategyContrast {
    pub n_train: usize,
    pub session: Session,
    /// Per-patient mean ADE (mm) under each strategy, cohort order.
    pub ps_patient_means: Vec<f64>,
    pub mp_patient_means: Vec<f64>,
    pub ttest: TTest,
}

/// Full output of [`run_strategy_comparison`].
#[derive(Debug, Clone)]
pub struct ComparisonResult {
    pub cells: Vec<GridCell>,
    pub contrasts: Vec<StrategyContrast>,
}

impl ComparisonResult {
    /// Cells matching the given coordinates, in stable run order.
    pub fn select(
        &self,
        strategy: &str,
        session: Session,
        n_train: Option<usize>,
        patient_id: Option<&str>,
    ) -> Vec<&GridCell> {
        self.cells
            .iter()
            .filter(|c| {
                c.report.strategy == strategy
                    && c.report.session == session
                    && n_train.map_or(true, |n| c.report.n_train == n)
                    && patient_id.map_or(true, |p| c.report.patient_id == p)
            })
            .collect()
    }
}

fn cell_train_seed(seed: u64, patient_index: usize, n_train: usize, strategy: &str) -> u64 {
    let s = mix_seed(seed, "cell-patient", patient_index as u64);
    let s = mix_seed(s, "cell-ntrain", n_train as u64);
    match strategy {
        STRATEGY_PS => mix_seed(s, "cell-ps", 0),
        _ => mix_seed(s, "cell-mp", 0),
    }
}

/// Run the complete patient-specific vs multi-patient study on a cohort.
///
/// Per patient, the planning-session training sequence is rendered once at
/// the largest requested size and truncated for smaller grid points, so
/// smaller training sets are strict prefixes of larger ones.  For every
/// `(n_train, target patient)` the two training pools are balanced to the
/// same size; each `(strategy, seed)` pair then trains a fresh model and
/// is evaluated on the target patient's planning-day (T1) and
/// follow-up-day (T2) test sets.  Finally each `(n_train, session)` point
/// gets a paired t-test across patients on seed-averaged ADE means.
pub fn run_strategy_comparison(cohort: &Cohort, plan: &ComparisonPlan) -> Result<ComparisonResult> {
    plan.validate()?;
    let n_patients = cohort.patients.len();
    let n_max = *plan.n_train_grid.iter().max().expect("non-empty grid");

    // Render everything once per patient.
    let mut train_full = Vec::with_capacity(n_patients);
    let mut tests_t1 = Vec::with_capacity(n_patients);
    let mut tests_t2 = Vec::with_capacity(n_patients);
    for p in &cohort.patients {
        train_full.push(build_training_set(&p.phantom, n_max, p.seeds.train)?);
        tests_t1.push(build_test_set(
            &p.phantom,
            Session::T1,
            plan.n_test_sequences,
            plan.test_duration_s,
            [plan.setup_error_bound_mm; 3],
            p.seeds.test_t1,
        )?);
        let phantom_t2 = simulate_t2(&p.phantom, &p.t2_perturbation)?;
        tests_t2.push(build_test_set(
            &phantom_t2,
            Session::T2,
            plan.n_test_sequences,
            plan.test_duration_s,
            [plan.setup_error_bound_mm; 3],
            p.seeds.test_t2,
        )?);
    }

    let mut sorted_grid = plan.n_train_grid.clone();
    sorted_grid.sort_unstable();
    sorted_grid.dedup();

    let mut cells = Vec::new();
    let mut contrasts = Vec::new();
    for &n_train in &sorted_grid {
        let truncated: Vec<SessionDataset> = train_full
            .iter()
            .map(|ds| truncate_frames(ds, n_train))
            .collect::<Result<_>>()?;
        for target in 0..n_patients {
            let (ps_refs, mp_refs) = balanced_pools(&truncated, target)?;
            for (strategy, refs) in [(STRATEGY_PS, &ps_refs), (STRATEGY_MP, &mp_refs)] {
                let samples: Vec<DrrSample<'_>> = refs
                    .iter()
                    .map(|r| truncated[r.dataset].sample(r.sample))
                    .collect::<Result<_>>()?;
                let provenance: Vec<(String, usize)> = refs
                    .iter()
                    .map(|r| (truncated[r.dataset].patient_id.clone(), r.sample))
                    .collect();
                for &seed in &plan.seeds {
                    let mut train_cfg = plan.train.clone();
                    train_cfg.seed = mix_seed(
                        cell_train_seed(seed, target, n_train, strategy),
                        "train",
                        0,
                    );
                    let outcome = train_on_samples(&plan.model, &train_cfg, &samples, None)?;
                    let final_loss = outcome
                        .history
                        .last()
                        .map(|h| h.mean_loss)
                        .unwrap_or(f64::NAN);
                    let tags = ReportTags {
                        strategy: strategy.to_string(),
                        n_train,
                        seed,
                    };
                    for test_ds in [&tests_t1[target], &tests_t2[target]] {
                        let report = evaluate(&outcome.model, test_ds, Horizon::Full, &tags)?;
                        cells.push(GridCell {
                            report,
                            train_pool: provenance.clone(),
                            final_train_loss: final_loss,
                        });
                    }
                }
            }
        }
        for session in [Session::T1, Session::T2] {
            let mut ps_means = Vec::with_capacity(n_patients);
            let mut mp_means = Vec::with_capacity(n_patients);
            for p in &cohort.patients {
                for (strategy, out) in [(STRATEGY_PS, &mut ps_means), (STRATEGY_MP, &mut mp_means)]
                {
                    let seed_means: Vec<f64> = cells
                        .iter()
                        .filter(|c| {
                            c.report.strategy == strategy
                                && c.report.session == session
                                && c.report.n_train == n_train
                                && c.report.patient_id == p.patient_id
                        })
                        .map(|c| c.report.ade_mean)
                        .collect();
                    debug_assert_eq!(seed_means.len(), plan.seeds.len());
                    out.push(mean(&seed_means));
                }
            }
            let ttest = paired_t_test(&ps_means, &mp_means)?;
            contrasts.push(StrategyContrast {
                n_train,
                session,
                ps_patient_means: ps_means,
                mp_patient_means: mp_means,
                ttest,
            });
        }
    }
    Ok(ComparisonResult { cells, contrasts })
}

// ---------------------------------------------------------------------------
// Error decomposition
// ---------------------------------------------------------------------------

/// Per-patient, per-strategy split of the forecast error into the
/// planning-day component and the follow-up-day component.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRow {
    pub patient_id: String,
    pub strategy: String,
    /// Mean ADE (mm) over all T1 cells of this patient and strategy:
    /// error with the anatomy the model was trained on.
    pub modeling_error_mm: f64,
    /// Mean ADE (mm) over all T2 cells: modeling error plus the
    /// inter-session change.
    pub interfractional_error_mm: f64,
}

/// Cohort-level tally of [`error_decomposition`].
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub threshold_mm: f64,
    pub rows: Vec<DecompositionRow>,
    /// Patients per strategy whose modeling error is strictly below the
    /// threshold, keyed by strategy label.
    pub within_threshold_t1: BTreeMap<String, usize>,
    /// Same tally for the follow-up session.
    pub within_threshold_t2: BTreeMap<String, usize>,
}

/// Split each patient's error into its planning-day and follow-up-day
/// components and count, per strategy, how many patients stay strictly
/// below `threshold_mm` in each.
pub fn error_decomposition(result: &ComparisonResult, threshold_mm: f64) -> Result<Decomposition> {
    if !(threshold_mm > 0.0) {
        return Err(Error::Parameter(format!(
            "decomposition threshold must be positive, got {threshold_mm}"
        )));
    }
    // patient → strategy → session → ADE means, insertion-ordered by
    // first appearance so the report follows the run order.
    let mut order: Vec<(String, String)> = Vec::new();
    let mut table: BTreeMap<(String, String), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for cell in &result.cells {
        let key = (cell.report.patient_id.clone(), cell.report.strategy.clone());
        if !table.contains_key(&key) {
            order.push(key.clone());
        }
        let entry = table.entry(key).or_default();
        match cell.report.session {
            Session::T1 => entry.0.push(cell.report.ade_mean),
            Session::T2 => entry.1.push(cell.report.ade_mean),
        }
    }
    let mut rows = Vec::with_capacity(order.len());
    for key in order {
        let (t1, t2) = &table[&key];
        if t1.is_empty() || t2.is_empty() {
            return Err(Error::Contract(format!(
                "decomposition needs both sessions for patient {} strategy {}, got {} T1 and {} T2 cells",
                key.0,
                key.1,
                t1.len(),
                t2.len()
            )));
        }
        rows.push(DecompositionRow {
            patient_id: key.0,
            strategy: key.1,
            modeling_error_mm: mean(t1),
            interfractional_error_mm: mean(t2),
        });
    }
    let mut within_t1: BTreeMap<String, usize> = BTreeMap::new();
    let mut within_t2: BTreeMap<String, usize> = BTreeMap::new();
    for row in &rows {
        within_t1.entry(row.strategy.clone()).or_insert(0);
        within_t2.entry(row.strategy.clone()).or_insert(0);
        if row.modeling_error_mm < threshold_mm {
            *within_t1.get_mut(&row.strategy).expect("inserted above") += 1;
        }
        if row.interfractional_error_mm < threshold_mm {
            *within_t2.get_mut(&row.strategy).expect("inserted above") += 1;
        }
    }
    Ok(Decomposition {
        threshold_mm,
        rows,
        within_threshold_t1: within_t1,
        within_threshold_t2: within_t2,
    })
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

/// One detail-CSV line: a grid cell without its pool provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct DetailRow {
    pub patient_id: String,
    pub strategy: String,
    pub session: Session,
    pub n_train: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub ade_mean: f64,
    pub ade_sd: f64,
    pub fde_mean: f64,
    pub fde_sd: f64,
}

impl DetailRow {
    pub fn from_cell(cell: &GridCell) -> DetailRow {
        DetailRow {
            patient_id: cell.report.patient_id.clone(),
            strategy: cell.report.strategy.clone(),
            session: cell.report.session,
            n_train: cell.report.n_train,
            seed: cell.report.seed,
            n_samples: cell.report.per_sample_ade.len(),
            ade_mean: cell.report.ade_mean,
            ade_sd: cell.report.ade_sd,
            fde_mean: cell.report.fde_mean,
            fde_sd: cell.report.fde_sd,
        }
    }

    /// Metrics rounded to what the CSV can carry, so aggregates computed
    /// before writing equal aggregates recomputed after reading.
    fn quantized(&self) -> DetailRow {
        let q = |x: f64| format_metric(x).parse::<f64>().expect("own format parses");
        DetailRow {
            ade_mean: q(self.ade_mean),
            ade_sd: q(self.ade_sd),
            fde_mean: q(self.fde_mean),
            fde_sd: q(self.fde_sd),
            ..self.clone()
        }
    }
}

/// Aggregate of all detail rows sharing a `(strategy, session)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub session: Session,
    pub n_patients: usize,
    /// Total evaluated windows behind this row.
    pub n_samples: usize,
    /// Mean over per-patient mean ADEs (each patient weighted equally).
    pub ade_mean: f64,
    /// Standard deviation of the per-patient mean ADEs.
    pub ade_sd_between_patients: f64,
    pub fde_mean: f64,
    pub fde_sd_between_patients: f64,
}

/// Nine significant digits: enough that `parse ∘ format ∘ parse` is a
/// fixed point, so regenerating a summary from a written detail file
/// reproduces it byte for byte.
pub fn format_metric(x: f64) -> String {
    format!("{x:.8e}")
}

const DETAIL_HEADER: &str =
    "patient_id,strategy,session,n_train,seed,n_samples,ade_mean,ade_sd,fde_mean,fde_sd";
const SUMMARY_HEADER: &str = "strategy,session,n_patients,n_samples,ade_mean,\
                              ade_sd_between_patients,fde_mean,fde_sd_between_patients";

/// Collapse detail rows to one [`SummaryRow`] per `(strategy, session)`,
/// ordered by strategy label then session.
pub fn summarize(rows: &[DetailRow]) -> Result<Vec<SummaryRow>> {
    if rows.is_empty() {
        return Err(Error::Parameter("cannot summarize an empty report".into()));
    }
    // (strategy, session) → patient → (ade means, fde means, samples)
    type PerPatient = BTreeMap<String, (Vec<f64>, Vec<f64>, usize)>;
    let mut groups: BTreeMap<(String, u8), PerPatient> = BTreeMap::new();
    for row in rows {
        let session_key = match row.session {
            Session::T1 => 1,
            Session::T2 => 2,
        };
        let group = groups
            .entry((row.strategy.clone(), session_key))
            .or_default();
        let patient = group.entry(row.patient_id.clone()).or_default();
        patient.0.push(row.ade_mean);
        patient.1.push(row.fde_mean);
        patient.2 += row.n_samples;
    }
    let mut out = Vec::with_capacity(groups.len());
    for ((strategy, session_key), patients) in groups {
        let session = if session_key == 1 { Session::T1 } else { Session::T2 };
        let ade_patient_means: Vec<f64> = patients.values().map(|p| mean(&p.0)).collect();
        let fde_patient_means: Vec<f64> = patients.values().map(|p| mean(&p.1)).collect();
        let n_samples = patients.values().map(|p| p.2).sum();
        out.push(SummaryRow {
            strategy,
            session,
            n_patients: patients.len(),
            n_samples,
            ade_mean: mean(&ade_patient_means),
            ade_sd_between_patients: sample_sd(&ade_patient_means),
            fde_mean: mean(&fde_patient_means),
            fde_sd_between_patients: sample_sd(&fde_patient_means),
        });
    }
    Ok(out)
}

pub fn detail_csv(rows: &[DetailRow]) -> String {
    let mut s = String::from(DETAIL_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.patient_id,
            r.strategy,
            r.session,
            r.n_train,
            r.seed,
            r.n_samples,
            format_metric(r.ade_mean),
            format_metric(r.ade_sd),
            format_metric(r.fde_mean),
            format_metric(r.fde_sd),
        ));
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.session,
            r.n_patients,
            r.n_samples,
            format_metric(r.ade_mean),
            format_metric(r.ade_sd_between_patients),
            format_metric(r.fde_mean),
            format_metric(r.fde_sd_between_patients),
        ));
    }
    s
}

/// Write `detail.csv` and `summary.csv` under `dir` (created if needed).
pub fn write_report(result: &ComparisonResult, dir: &Path) -> Result<()> {
    if result.cells.is_empty() {
        return Err(Error::Parameter("cannot report an empty comparison".into()));
    }
    std::fs::create_dir_all(dir)?;
    let rows: Vec<DetailRow> = result
        .cells
        .iter()
        .map(|c| DetailRow::from_cell(c).quantized())
        .collect();
    let summary = summarize(&rows)?;
    let mut f = std::fs::File::create(dir.join("detail.csv"))?;
    f.write_all(detail_csv(&rows).as_bytes())?;
    let mut f = std::fs::File::create(dir.join("summary.csv"))?;
    f.write_all(summary_csv(&summary).as_bytes())?;
    Ok(())
}

fn parse_field<T: std::str::FromStr>(field: &str, offset: u64, line: usize, what: &str) -> Result<T> {
    field.parse().map_err(|_| {
        Error::format_at(offset, format!("line {line}: cannot parse {what} from {field:?}"))
    })
}

fn parse_session(field: &str, offset: u64, line: usize) -> Result<Session> {
    match field {
        "T1" => Ok(Session::T1),
        "T2" => Ok(Session::T2),
        other => Err(Error::format_at(
            offset,
            format!("line {line}: unknown session {other:?}"),
        )),
    }
}

/// Read a `detail.csv` previously produced by [`write_report`].  Format
/// errors carry the byte offset of the offending line.
pub fn read_detail_csv(path: &Path) -> Result<Vec<DetailRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut rows = Vec::new();
    let mut saw_header = false;
    for line in text.lines() {
        line_no += 1;
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if !saw_header {
            if line != DETAIL_HEADER {
                return Err(Error::format_at(
                    line_start,
                    format!("unexpected detail header {line:?}"),
                ));
            }
            saw_header = true;
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(Error::format_at(
                line_start,
                format!("line {line_no}: expected 10 fields, got {}", fields.len()),
            ));
        }
        rows.push(DetailRow {
            patient_id: fields[0].to_string(),
            strategy: fields[1].to_string(),
            session: parse_session(fields[2], line_start, line_no)?,
            n_train: parse_field(fields[3], line_start, line_no, "n_train")?,
            seed: parse_field(fields[4], line_start, line_no, "seed")?,
            n_samples: parse_field(fields[5], line_start, line_no, "n_samples")?,
            ade_mean: parse_field(fields[6], line_start, line_no, "ade_mean")?,
            ade_sd: parse_field(fields[7], line_start, line_no, "ade_sd")?,
            fde_mean: parse_field(fields[8], line_start, line_no, "fde_mean")?,
            fde_sd: parse_field(fields[9], line_start, line_no, "fde_sd")?,
        });
    }
    if !saw_header {
        return Err(Error::format_at(0, "empty detail file"));
    }
    if rows.is_empty() {
        return Err(Error::format_at(offset, "detail file has a header but no rows"));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{NormalizationParams, Sequence};
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn small_spec(id: &str) -> PhantomSpec {
        PhantomSpec {
            patient_id: id.into(),
            dims: [64, 64, 64],
            spacing_mm: [4.0, 4.0, 4.0],
            ..PhantomSpec::default()
        }
    }

    fn tiny_dataset(patient: &str, n_frames: usize, amplitudes: [f64; 3]) -> SessionDataset {
        // Hand-built sinusoidal trajectory; frames are all-zero images so
        // forecasters that ignore pixels stay cheap.
        let t_obs = 4;
        let t_pred = 2;
        let norm = NormalizationParams::new([10.0, 20.0, 30.0], amplitudes).unwrap();
        let positions: Vec<[f64; 3]> = (0..n_frames)
            .map(|i| {
                let ph = i as f64 * 0.37;
                [
                    10.0 + amplitudes[0] * ph.sin(),
                    20.0 + amplitudes[1] * (ph * 0.8).cos(),
                    30.0 + amplitudes[2] * (ph * 1.3).sin(),
                ]
            })
            .collect();
        SessionDataset {
            patient_id: patient.to_string(),
            session: Session::T1,
            spec_hash: 0,
            seed: 7,
            t_obs,
            t_pred,
            frame_width: 4,
            frame_height: 4,
            norm,
            sequences: vec![Sequence {
                frames: vec![vec![0.0; 16]; n_frames],
                positions_mm: positions,
            }],
        }
    }

    // -- metrics ----------------------------------------------------------

    #[test]
    fn ade_matches_hand_computation() {
        let pred = [[3.0, 4.0, 0.0], [0.0, 0.0, 0.0], [1.0, 2.0, 2.0]];
        let truth = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        // Distances 5, 0, 3 → mean 8/3.
        let got = ade(&pred, &truth).unwrap();
        assert!((got - 8.0 / 3.0).abs() < 1e-15, "got {got}");
        let f = fde(&pred, &truth).unwrap();
        assert!((f - 3.0).abs() < 1e-15, "got {f}");
    }

    #[test]
    fn ade_of_constant_offset_is_the_offset_norm() {
        let truth: Vec<[f64; 3]> = (0..5).map(|i| [i as f64, 2.0 * i as f64, 0.5]).collect();
        let pred: Vec<[f64; 3]> =
            truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0, p[2]]).collect();
        assert!((ade(&pred, &truth).unwrap() - 5.0).abs() < 1e-12);
        assert!((fde(&pred, &truth).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_reject_bad_shapes() {
        let a = [[0.0; 3]; 2];
        let b = [[0.0; 3]; 3];
        assert!(matches!(ade(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(fde(&a, &b), Err(Error::Shape(_))));
        assert!(matches!(ade(&[], &[]), Err(Error::Parameter(_))));
    }

    // -- evaluation plumbing ---------------------------------------------

    #[test]
    fn oracle_forecaster_scores_zero() {
        let ds = tiny_dataset("p0", 30, [5.0, 2.0, 8.0]);
        let oracle = OracleForecaster { t_obs: 4, t_pred: 2 };
        let rep = evaluate(&oracle, &ds, Horizon::Full, &ReportTags::default()).unwrap();
        assert_eq!(rep.per_sample_ade.len(), ds.n_samples());
        assert!(rep.ade_mean.abs() < 1e-9, "oracle ADE {}", rep.ade_mean);
        assert!(rep.fde_mean.abs() < 1e-9);
        assert_eq!(rep.patient_id, "p0");
        assert_eq!(rep.session, Session::T1);
    }

    #[test]
    fn persistence_error_matches_hand_computed_distances() {
        let ds = tiny_dataset("p0", 12, [5.0, 2.0, 8.0]);
        let baseline = PersistenceBaseline { t_obs: 4, t_pred: 2 };
        let rep = evaluate(&baseline, &ds, Horizon::Full, &ReportTags::default()).unwrap();
        // Reimplement per sample with explicit loops.
        let seq = &ds.sequences[0];
        let n = seq.positions_mm.len() - 6 + 1;
        assert_eq!(rep.per_sample_ade.len(), n);
        for (i, &got) in rep.per_sample_ade.iter().enumerate() {
            let held = seq.positions_mm[i + 3];
            let mut acc = 0.0;
            for k in 0..2 {
                let truth = seq.positions_mm[i + 4 + k];
                let mut ss = 0.0;
                for a in 0..3 {
                    let d = held[a] - truth[a];
                    ss += d * d;
                }
                acc += ss.sqrt();
            }
            let want = acc / 2.0;
            assert!(
                (got - want).abs() < 1e-9,
                "sample {i}: got {got}, want {want}"
            );
        }
        // The trajectory moves, so the baseline must be visibly wrong.
        assert!(rep.ade_mean > 0.1, "ADE {}", rep.ade_mean);
    }

    #[test]
    fn first_step_horizon_equals_first_distance() {
        let ds = tiny_dataset("p0", 12, [5.0, 2.0, 8.0]);
        let baseline = PersistenceBaseline { t_obs: 4, t_pred: 2 };
        let rep = evaluate(&baseline, &ds, Horizon::FirstStep, &ReportTags::default()).unwrap();
        let seq = &ds.sequences[0];
        for (i, &got) in rep.per_sample_ade.iter().enumerate() {
            let held = seq.positions_mm[i + 3];
            let truth = seq.positions_mm[i + 4];
            let mut ss = 0.0;
            for a in 0..3 {
                let d = held[a] - truth[a];
                ss += d * d;
            }
            let want = ss.sqrt();
            assert!((got - want).abs() < 1e-9);
            assert!((rep.per_sample_fde[i] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_rejects_window_mismatch() {
        let ds = tiny_dataset("p0", 12, [5.0, 2.0, 8.0]);
        let oracle = OracleForecaster { t_obs: 5, t_pred: 2 };
        let err = evaluate(&oracle, &ds, Horizon::Full, &ReportTags::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err:?}");
    }

    #[test]
    fn evaluate_works_on_rendered_data_with_model() {
        // End-to-end: real phantom, real renderer, untrained tiny model.
        let spec = small_spec("pm");
        let phantom = generate_phantom(&spec, 21).unwrap();
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            patch_size: 16,
            image_size: 64,
            t_obs: 16,
            t_pred: 5,
            dropout: 0.0,
        };
        let ds = build_test_set(&phantom, Session::T1, 1, 5.0, [0.0; 3], 11).unwrap();
        let model = ForecastModel::init_glorot(cfg, 3).unwrap();
        let rep = evaluate(&model, &ds, Horizon::Full, &ReportTags::default()).unwrap();
        assert_eq!(rep.per_sample_ade.len(), ds.n_samples());
        assert!(rep.ade_mean.is_finite() && rep.ade_mean > 0.0);
        // FDE uses only the last step, so it differs from ADE in general.
        assert!((rep.ade_mean - rep.fde_mean).abs() > 1e-12);
    }

    // -- Student t machinery ---------------------------------------------

    #[test]
    fn incomplete_beta_boundary_values() {
        assert_eq!(regularized_incomplete_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(regularized_incomplete_beta(2.0, 3.0, 1.0), 1.0);
        // I_x(1, 1) = x (uniform CDF).
        for &x in &[0.1, 0.37, 0.72, 0.99] {
            let got = regularized_incomplete_beta(1.0, 1.0, x);
            assert!((got - x).abs() < 1e-14, "I_{x}(1,1) = {got}");
        }
        // Symmetry I_x(a,b) = 1 − I_{1−x}(b,a).
        let lhs = regularized_incomplete_beta(2.5, 4.0, 0.3);
        let rhs = 1.0 - regularized_incomplete_beta(4.0, 2.5, 0.7);
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn student_p_matches_reference_values() {
        // Frozen with an independent arbitrary-precision implementation
        // of the t CDF.
        let p = student_t_two_sided_p(3.872983346207417, 3).unwrap();
        assert!(
            (p - 0.030466291662170988).abs() < 1e-13,
            "p(t=3.873, df=3) = {p}"
        );
        // t = 1 with df = 1 is the Cauchy quartile: two-sided p = 1/2.
        let p = student_t_two_sided_p(1.0, 1).unwrap();
        assert!((p - 0.5).abs() < 1e-13, "p(t=1, df=1) = {p}");
        let p = student_t_two_sided_p(2.5, 7).unwrap();
        assert!(
            (p - 0.040992218585752897).abs() < 1e-13,
            "p(t=2.5, df=7) = {p}"
        );
        // Large df approaches the normal tail.  The ln-gamma difference
        // cancels ~6 digits at df = 1e6, so the tolerance is wider here.
        let p = student_t_two_sided_p(1.96, 1_000_000).unwrap();
        assert!(
            (p - 0.049996067585269791).abs() < 1e-9,
            "p(t=1.96, df=1e6) = {p}"
        );
        // Sign symmetry.
        let plus = student_t_two_sided_p(1.7, 9).unwrap();
        let minus = student_t_two_sided_p(-1.7, 9).unwrap();
        assert_eq!(plus, minus);
        // t = 0 means no evidence at all.
        assert!((student_t_two_sided_p(0.0, 5).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn paired_test_matches_reference_statistic() {
        // a − b = [1, 2, 3, 4]: mean 2.5, sd sqrt(5/3),
        // t = 2.5 / sqrt(5/12) = sqrt(15) ≈ 3.872983.
        let a = [2.0, 4.0, 6.0, 8.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert_eq!(r.df, 3);
        assert!((r.t - 15.0_f64.sqrt()).abs() < 1e-12, "t = {}", r.t);
        assert!((r.p - 0.030466291662170988).abs() < 1e-13, "p = {}", r.p);
        assert!(r.significant);
        assert!(!r.degenerate);
        // Swapping the arguments flips the sign but not the p-value.
        let r2 = paired_t_test(&b, &a).unwrap();
        assert!((r2.t + r.t).abs() < 1e-12);
        assert!((r2.p - r.p).abs() < 1e-15);
    }

    #[test]
    fn paired_test_zero_variance_conventions() {
        // Identical samples: no effect, p = 1.
        let a = [1.0, 2.0, 3.0];
        let r = paired_t_test(&a, &a).unwrap();
        assert_eq!(r.t, 0.0);
        assert_eq!(r.p, 1.0);
        assert!(!r.significant);
        assert!(!r.degenerate);
        // Constant nonzero difference: infinite statistic, flagged.
        let b = [0.0, 1.0, 2.0];
        let r = paired_t_test(&a, &b).unwrap();
        assert!(r.t.is_infinite() && r.t > 0.0);
        assert_eq!(r.p, 0.0);
        assert!(r.significant);
        assert!(r.degenerate);
    }

    #[test]
    fn paired_test_rejects_bad_input() {
        assert!(matches!(
            paired_t_test(&[1.0, 2.0], &[1.0]),
            Err(Error::Shape(_))
        ));
        assert!(matches!(paired_t_test(&[1.0], &[1.0]), Err(Error::Parameter(_))));
        assert!(matches!(
            paired_t_test(&[1.0, f64::NAN], &[0.0, 0.0]),
            Err(Error::Numeric(_))
        ));
    }

    // -- decomposition ----------------------------------------------------

    fn fake_cell(
        patient: &str,
        strategy: &str,
        session: Session,
        n_train: usize,
        seed: u64,
        ade_mean: f64,
    ) -> GridCell {
        GridCell {
            report: MetricsReport {
                patient_id: patient.to_string(),
                session,
                strategy: strategy.to_string(),
                n_train,
                seed,
                per_sample_ade: vec![ade_mean; 4],
                per_sample_fde: vec![ade_mean * 1.5; 4],
                ade_mean,
                ade_sd: 0.0,
                fde_mean: ade_mean * 1.5,
                fde_sd: 0.0,
            },
            train_pool: vec![(patient.to_string(), 0)],
            final_train_loss: 0.1,
        }
    }

    #[test]
    fn decomposition_counts_patients_under_threshold() {
        let cells = vec![
            fake_cell("a", STRATEGY_PS, Session::T1, 100, 1, 0.5),
            fake_cell("a", STRATEGY_PS, Session::T2, 100, 1, 1.5),
            fake_cell("b", STRATEGY_PS, Session::T1, 100, 1, 1.0),
            fake_cell("b", STRATEGY_PS, Session::T2, 100, 1, 3.0),
            fake_cell("a", STRATEGY_MP, Session::T1, 100, 1, 2.5),
            fake_cell("a", STRATEGY_MP, Session::T2, 100, 1, 2.6),
            fake_cell("b", STRATEGY_MP, Session::T1, 100, 1, 1.9),
            fake_cell("b", STRATEGY_MP, Session::T2, 100, 1, 2.1),
        ];
        let result = ComparisonResult { cells, contrasts: vec![] };
        let d = error_decomposition(&result, 2.0).unwrap();
        assert_eq!(d.rows.len(), 4);
        // PS: both patients fine on T1, only patient a on T2.
        assert_eq!(d.within_threshold_t1[STRATEGY_PS], 2);
        assert_eq!(d.within_threshold_t2[STRATEGY_PS], 1);
        // MP: patient b squeaks under on T1 (1.9 < 2.0), none on T2.
        assert_eq!(d.within_threshold_t1[STRATEGY_MP], 1);
        assert_eq!(d.within_threshold_t2[STRATEGY_MP], 0);
        // Row means average over the session's cells.
        let row_a_ps = d
            .rows
            .iter()
            .find(|r| r.patient_id == "a" && r.strategy == STRATEGY_PS)
            .unwrap();
        assert!((row_a_ps.modeling_error_mm - 0.5).abs() < 1e-15);
        assert!((row_a_ps.interfractional_error_mm - 1.5).abs() < 1e-15);
    }

    #[test]
    fn decomposition_averages_multiple_cells_per_session() {
        let cells = vec![
            fake_cell("a", STRATEGY_PS, Session::T1, 100, 1, 1.0),
            fake_cell("a", STRATEGY_PS, Session::T1, 200, 1, 3.0),
            fake_cell("a", STRATEGY_PS, Session::T2, 100, 1, 4.0),
        ];
        let result = ComparisonResult { cells, contrasts: vec![] };
        let d = error_decomposition(&result, 2.0).unwrap();
        assert!((d.rows[0].modeling_error_mm - 2.0).abs() < 1e-15);
        assert!((d.rows[0].interfractional_error_mm - 4.0).abs() < 1e-15);
    }

    #[test]
    fn decomposition_requires_both_sessions() {
        let cells = vec![fake_cell("a", STRATEGY_PS, Session::T1, 100, 1, 1.0)];
        let result = ComparisonResult { cells, contrasts: vec![] };
        let err = error_decomposition(&result, 2.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err:?}");
        let empty = ComparisonResult { cells: vec![], contrasts: vec![] };
        assert!(error_decomposition(&empty, 0.0).is_err());
    }

    // -- report serialization --------------------------------------------

    #[test]
    fn metric_format_is_a_fixed_point_of_parse() {
        for &x in &[
            0.030466291662170988,
            8.0 / 3.0,
            1.0,
            0.0,
            1e-12,
            123456.789,
            5.0e-5,
            -2.7182818284,
        ] {
            let s1 = format_metric(x);
            let y: f64 = s1.parse().unwrap();
            let s2 = format_metric(y);
            assert_eq!(s1, s2, "formatting {x} drifted: {s1} vs {s2}");
            // Nine significant digits stay within 5e-9 relative.
            if x != 0.0 {
                assert!(((y - x) / x).abs() < 5e-9);
            }
        }
    }

    #[test]
    fn detail_csv_round_trips_and_summary_is_idempotent() {
        let cells = vec![
            fake_cell("a", STRATEGY_PS, Session::T1, 100, 1, 0.512345678),
            fake_cell("a", STRATEGY_PS, Session::T2, 100, 1, 1.5),
            fake_cell("b", STRATEGY_PS, Session::T1, 100, 2, 1.0 / 3.0),
            fake_cell("b", STRATEGY_PS, Session::T2, 100, 2, 3.0),
            fake_cell("a", STRATEGY_MP, Session::T1, 100, 1, 2.5),
            fake_cell("a", STRATEGY_MP, Session::T2, 100, 1, 2.6),
            fake_cell("b", STRATEGY_MP, Session::T1, 100, 2, 1.9),
            fake_cell("b", STRATEGY_MP, Session::T2, 100, 2, 2.0 / 7.0),
        ];
        let result = ComparisonResult { cells, contrasts: vec![] };
        let dir = tempfile::tempdir().unwrap();
        write_report(&result, dir.path()).unwrap();
        let detail_path = dir.path().join("detail.csv");
        let summary_path = dir.path().join("summary.csv");
        let detail_bytes = std::fs::read(&detail_path).unwrap();
        let summary_bytes = std::fs::read(&summary_path).unwrap();

        // Re-reading the detail file and re-summarizing reproduces the
        // summary byte for byte.
        let rows = read_detail_csv(&detail_path).unwrap();
        assert_eq!(rows.len(), 8);
        let again = summary_csv(&summarize(&rows).unwrap());
        assert_eq!(again.as_bytes(), &summary_bytes[..]);

        // Round-tripping the rows through CSV again is also exact.
        assert_eq!(detail_csv(&rows).as_bytes(), &detail_bytes[..]);

        // Spot-check one summary line against a hand aggregation: PS/T1
        // patients a and b have means 0.512345678 and 1/3.
        let summary = summarize(&rows).unwrap();
        let ps_t1 = summary
            .iter()
            .find(|r| r.strategy == STRATEGY_PS && r.session == Session::T1)
            .unwrap();
        assert_eq!(ps_t1.n_patients, 2);
        assert_eq!(ps_t1.n_samples, 8);
        let m = rows
            .iter()
            .find(|r| r.patient_id == "a" && r.strategy == STRATEGY_PS && r.session == Session::T1)
            .unwrap()
            .ade_mean;
        let m2 = rows
            .iter()
            .find(|r| r.patient_id == "b" && r.strategy == STRATEGY_PS && r.session == Session::T1)
            .unwrap()
            .ade_mean;
        assert!((ps_t1.ade_mean - 0.5 * (m + m2)).abs() < 1e-15);
    }

    #[test]
    fn detail_reader_rejects_malformed_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("detail.csv");
        assert!(matches!(
            read_detail_csv(&path),
            Err(Error::InputNotFound(_))
        ));
        std::fs::write(&path, "nope\n").unwrap();
        assert!(matches!(read_detail_csv(&path), Err(Error::Format { .. })));
        std::fs::write(&path, format!("{DETAIL_HEADER}\n")).unwrap();
        assert!(matches!(read_detail_csv(&path), Err(Error::Format { .. })));
        std::fs::write(
            &path,
            format!("{DETAIL_HEADER}\na,PS,T9,100,1,4,1.0,0.0,1.0,0.0\n"),
        )
        .unwrap();
        let err = read_detail_csv(&path).unwrap_err();
        match err {
            Error::Format { offset, message } => {
                assert!(message.contains("line 2"), "{message}");
                // The offending row starts right after the header line.
                assert_eq!(offset, DETAIL_HEADER.len() as u64 + 1);
            }
            other => panic!("{other:?}"),
        }
        std::fs::write(
            &path,
            format!("{DETAIL_HEADER}\na,PS,T1,many,1,4,1.0,0.0,1.0,0.0\n"),
        )
        .unwrap();
        assert!(matches!(read_detail_csv(&path), Err(Error::Format { .. })));
    }

    // -- full comparison on a miniature cohort ---------------------------

    #[test]
    fn comparison_plan_validation() {
        let mut plan = ComparisonPlan::default();
        plan.model = ModelConfig::toy();
        assert!(plan.validate().is_ok());
        plan.n_train_grid.clear();
        assert!(plan.validate().is_err());
        let mut plan = ComparisonPlan::default();
        plan.n_train_grid = vec![10];
        assert!(plan.validate().is_err(), "below window length");
        let mut plan = ComparisonPlan::default();
        plan.seeds.clear();
        assert!(plan.validate().is_err());
    }

    fn micro_plan() -> ComparisonPlan {
        let model = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ff: 16,
            patch_size: 32,
            image_size: 64,
            t_obs: 16,
            t_pred: 5,
            dropout: 0.0,
        };
        let mut train = TrainConfig::default();
        train.epochs = 2;
        train.warmup_epochs = 1;
        train.batch_size = 8;
        ComparisonPlan {
            n_train_grid: vec![24, 30],
            seeds: vec![1, 2],
            model,
            train,
            n_test_sequences: 1,
            test_duration_s: 5.0,
            setup_error_bound_mm: 1.0,
        }
    }

    fn micro_cohort() -> Cohort {
        use crate::dataset::{build_cohort, CohortManifest, PatientEntry};
        let mut specs = Vec::new();
        for (i, period) in [3.6, 4.4, 5.2].iter().enumerate() {
            let mut spec = small_spec(&format!("p{i}"));
            spec.breathing.period_s = *period;
            specs.push(PatientEntry {
                patient_id: format!("p{i}"),
                spec,
                seeds: None,
                t2_perturbation: None,
            });
        }
        let manifest = CohortManifest {
            n_train_drrs: 30,
            n_test_sequences: 1,
            test_duration_s: 5.0,
            setup_error_bound_mm: 1.0,
            patients: specs,
        };
        build_cohort(&manifest).unwrap()
    }

    #[test]
    fn comparison_produces_full_grid_with_balanced_pools() {
        let cohort = micro_cohort();
        let plan = micro_plan();
        let result = run_strategy_comparison(&cohort, &plan).unwrap();

        // 2 n_train × 3 patients × 2 strategies × 2 seeds × 2 sessions.
        assert_eq!(result.cells.len(), 48);
        assert_eq!(result.contrasts.len(), 4);

        for &n_train in &plan.n_train_grid {
            for patient in ["p0", "p1", "p2"] {
                for session in [Session::T1, Session::T2] {
                    let ps = result.select(STRATEGY_PS, session, Some(n_train), Some(patient));
                    let mp = result.select(STRATEGY_MP, session, Some(n_train), Some(patient));
                    assert_eq!(ps.len(), 2, "{patient} n={n_train}");
                    assert_eq!(mp.len(), 2);
                    // Balanced pools: identical training-set sizes.
                    assert_eq!(ps[0].train_pool.len(), mp[0].train_pool.len());
                    // PS trains only on the target patient; MP never does.
                    assert!(ps[0].train_pool.iter().all(|(p, _)| p == patient));
                    assert!(mp[0].train_pool.iter().all(|(p, _)| p != patient));
                    for cell in ps.iter().chain(&mp) {
                        assert!(cell.report.ade_mean.is_finite());
                        assert!(cell.final_train_loss.is_finite());
                        assert_eq!(cell.report.patient_id, patient);
                    }
                }
            }
        }

        // Window arithmetic: n=24 gives 4 windows per patient, n=30 gives
        // 10; the pool sizes must match exactly.
        let c24 = result.select(STRATEGY_PS, Session::T1, Some(24), Some("p0"));
        assert_eq!(c24[0].train_pool.len(), 4);
        let c30 = result.select(STRATEGY_PS, Session::T1, Some(30), Some("p0"));
        assert_eq!(c30[0].train_pool.len(), 10);

        // Contrasts carry one mean per patient and a finite test.
        for contrast in &result.contrasts {
            assert_eq!(contrast.ps_patient_means.len(), 3);
            assert_eq!(contrast.mp_patient_means.len(), 3);
            assert_eq!(contrast.ttest.df, 2);
            assert!(contrast.ttest.p >= 0.0 && contrast.ttest.p <= 1.0);
        }
    }

    #[test]
    fn comparison_is_deterministic() {
        let cohort = micro_cohort();
        let mut plan = micro_plan();
        plan.n_train_grid = vec![24];
        plan.seeds = vec![5];
        let a = run_strategy_comparison(&cohort, &plan).unwrap();
        let b = run_strategy_comparison(&cohort, &plan).unwrap();
        assert_eq!(a.cells.len(), b.cells.len());
        for (x, y) in a.cells.iter().zip(&b.cells) {
            assert_eq!(x.report, y.report);
            assert_eq!(x.train_pool, y.train_pool);
        }
        // Different seeds give different models, hence different errors.
        plan.seeds = vec![6];
        let c = run_strategy_comparison(&cohort, &plan).unwrap();
        let drifted = a
            .cells
            .iter()
            .zip(&c.cells)
            .any(|(x, y)| (x.report.ade_mean - y.report.ade_mean).abs() > 1e-12);
        assert!(drifted, "changing the seed changed nothing");
    }
}
