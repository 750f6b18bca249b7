//! Sequence datasets: rendered DRR windows with normalized position
//! labels, session simulation (T1 training/test, T2 follow-up), the
//! on-disk `.tmfd` format, cohort manifests, and leave-one-out pooling.
//!
//! A dataset holds whole rendered sequences — frames plus the tumor
//! trajectory in mm — and materializes sliding-window samples on demand:
//! `T_OBS` observed frames, the same positions normalized as decoder
//! context, and `T_PRED` future normalized positions as targets.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::drr::{normalize01, project_coronal_warped, resample, CropBox};
use crate::error::{Error, Result};
use crate::phantom::{generate_phantom, sample_breathing, tumor_center, PatientPhantom, PhantomSpec};

/// Observed context length, in frames.
pub const T_OBS: usize = 16;
/// Forecast horizon, in time-points.
pub const T_PRED: usize = 5;
/// Acquisition rate; 5 Hz makes the horizon exactly one second.
pub const FRAME_RATE_HZ: f64 = 5.0;
/// Rendered frame edge length, in pixels.
pub const FRAME_SIZE: usize = 64;
/// Smallest allowed normalization divisor, in mm.
pub const DIVISOR_FLOOR_MM: f64 = 1.0;
/// Default per-axis bound of the uniform patient setup error, in mm.
pub const SETUP_ERROR_BOUND_MM: f64 = 3.0;

/// Sliding windows of `window` frames in a sequence of `len` frames.
pub fn window_count(len: usize, window: usize) -> usize {
    if len >= window {
        len - window + 1
    } else {
        0
    }
}

/// Which acquisition session a dataset belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Session {
    T1,
    T2,
}

impl std::fmt::Display for Session {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Session::T1 => write!(f, "T1"),
            Session::T2 => write!(f, "T2"),
        }
    }
}

impl Session {
    fn to_u8(self) -> u8 {
        match self {
            Session::T1 => 1,
            Session::T2 => 2,
        }
    }

    fn from_u8(v: u8, offset: u64) -> Result<Self> {
        match v {
            1 => Ok(Session::T1),
            2 => Ok(Session::T2),
            _ => Err(Error::format_at(offset, format!("unknown session tag {v}"))),
        }
    }
}

/// Position normalization: center on the planning GTV centroid and divide
/// per axis by the motion amplitude, floored to avoid dividing by a
/// near-zero amplitude on a still axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizationParams {
    pub p_ref_mm: [f64; 3],
    pub amplitudes_mm: [f64; 3],
    pub floor_mm: f64,
}

impl NormalizationParams {
    pub fn new(p_ref_mm: [f64; 3], amplitudes_mm: [f64; 3]) -> Result<Self> {
        if amplitudes_mm.iter().any(|&a| !(a >= 0.0)) {
            return Err(Error::Parameter(format!("amplitudes must be ≥ 0, got {amplitudes_mm:?}")));
        }
        Ok(NormalizationParams {
            p_ref_mm,
            amplitudes_mm,
            floor_mm: DIVISOR_FLOOR_MM,
        })
    }

    pub fn for_phantom(phantom: &PatientPhantom) -> Result<Self> {
        NormalizationParams::new(phantom.p_ref_mm, phantom.amplitudes_mm)
    }

    #[inline]
    fn divisor(&self, axis: usize) -> f64 {
        self.amplitudes_mm[axis].max(self.floor_mm)
    }
}

/// `(p − p_ref) ⊘ max(A, floor)`, componentwise.
pub fn normalize_position(p_mm: [f64; 3], norm: &NormalizationParams) -> [f64; 3] {
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = (p_mm[a] - norm.p_ref_mm[a]) / norm.divisor(a);
    }
    out
}

/// Inverse of [`normalize_position`].
pub fn denormalize_position(p: [f64; 3], norm: &NormalizationParams) -> [f64; 3] {
    let mut out = [0.0; 3];
    for a in 0..3 {
        out[a] = p[a] * norm.divisor(a) + norm.p_ref_mm[a];
    }
    out
}

/// One rendered sequence: frames and the tumor trajectory, frame `i` taken
/// at `i / FRAME_RATE_HZ` seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    /// Normalized frames, `FRAME_SIZE²` values each, row-major, in [0, 1].
    pub frames: Vec<Vec<f32>>,
    /// Tumor center per frame in world mm (setup error included).
    pub positions_mm: Vec<[f64; 3]>,
}

/// One training/evaluation sample, borrowing frame storage from its
/// dataset.
#[derive(Debug, Clone)]
pub struct DrrSample<'a> {
    /// `T_OBS` observed frames.
    pub frames: Vec<&'a [f32]>,
    /// Normalized positions of the observed frames (decoder context).
    pub observed_positions: Vec<[f64; 3]>,
    /// `T_PRED` future normalized positions.
    pub targets: Vec<[f64; 3]>,
    pub norm: NormalizationParams,
    pub patient_id: &'a str,
    pub session: Session,
    /// Sequence index within the dataset and start frame within it.
    pub sequence: usize,
    pub t0: usize,
}

/// All samples of one patient and session.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionDataset {
    pub patient_id: String,
    pub session: Session,
    /// Hash of the generating phantom spec, for provenance checks.
    pub spec_hash: u64,
    pub seed: u64,
    pub t_obs: usize,
    pub t_pred: usize,
    pub frame_width: usize,
    pub frame_height: usize,
    pub norm: NormalizationParams,
    pub sequences: Vec<Sequence>,
}

impl SessionDataset {
    /// Total sliding-window sample count.
    pub fn n_samples(&self) -> usize {
        let w = self.t_obs + self.t_pred;
        self.sequences.iter().map(|s| window_count(s.frames.len(), w)).sum()
    }

    /// Materialize sample `idx` (ordered by sequence, then start frame).
    pub fn sample(&self, idx: usize) -> Result<DrrSample<'_>> {
        let mut remaining = idx;
        for (si, seq) in self.sequences.iter().enumerate() {
            let count = window_count(seq.frames.len(), self.t_obs + self.t_pred);
            if remaining < count {
                return self.sample_at(si, remaining);
            }
            remaining -= count;
        }
        Err(Error::Parameter(format!(
            "sample index {idx} out of bounds for {} samples",
            self.n_samples()
        )))
    }

    fn sample_at(&self, sequence: usize, t0: usize) -> Result<DrrSample<'_>> {
        let seq = &self.sequences[sequence];
        let frames: Vec<&[f32]> = (0..self.t_obs).map(|i| seq.frames[t0 + i].as_slice()).collect();
        let observed_positions = (0..self.t_obs)
            .map(|i| normalize_position(seq.positions_mm[t0 + i], &self.norm))
            .collect();
        let targets = (0..self.t_pred)
            .map(|i| normalize_position(seq.positions_mm[t0 + self.t_obs + i], &self.norm))
            .collect();
        Ok(DrrSample {
            frames,
            observed_positions,
            targets,
            norm: self.norm,
            patient_id: &self.patient_id,
            session: self.session,
            sequence,
            t0,
        })
    }

    pub fn samples(&self) -> impl Iterator<Item = DrrSample<'_>> {
        (0..self.n_samples()).map(|i| self.sample(i).expect("index in range"))
    }
}

/// FNV-1a over a byte string.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325_u64;
    for &b in bytes {
        h = (h ^ b as u64).wrapping_mul(0x100000001b3);
    }
    h
}

/// Stable hash of a phantom spec via its canonical JSON encoding.
pub fn spec_hash(spec: &PhantomSpec) -> u64 {
    let text = serde_json::to_string(spec).expect("spec serializes");
    fnv1a(text.as_bytes())
}

/// Derive independent sub-seeds for the different random roles of one
/// generation step.
pub fn mix_seed(base: u64, role: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(16 + role.len());
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(role.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}

/// Render one sequence of `n_frames` driven by `signal`, with a constant
/// rigid setup offset, and record the tumor trajectory.
fn render_sequence(
    phantom: &PatientPhantom,
    signal: &[f64],
    offset_mm: [f64; 3],
    cbox: &CropBox,
) -> Result<Sequence> {
    let frames: Vec<Vec<f32>> = signal
        .par_iter()
        .enumerate()
        .map(|(i, &s)| -> Result<Vec<f32>> {
            let raw = project_coronal_warped(phantom, s, offset_mm, cbox)?;
            let small = resample(&raw, FRAME_SIZE, FRAME_SIZE)?;
            let mut norm = normalize01(&small).map_err(|e| {
                Error::Numeric(format!("frame {i}: {e}"))
            })?;
            norm.timestamp_s = i as f64 / FRAME_RATE_HZ;
            Ok(norm.values.iter().map(|&v| v as f32).collect())
        })
        .collect::<Result<_>>()?;
    let positions_mm = signal
        .iter()
        .map(|&s| {
            let mut p = tumor_center(phantom, s)?;
            for a in 0..3 {
                p[a] += offset_mm[a];
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;
    Ok(Sequence { frames, positions_mm })
}

/// T1 training set: one long free-breathing sequence of `n_drrs` frames,
/// no setup error, windowed into samples. Deterministic per seed.
pub fn build_training_set(phantom: &PatientPhantom, n_drrs: usize, seed: u64) -> Result<SessionDataset> {
    if n_drrs < T_OBS + T_PRED {
        return Err(Error::Parameter(format!(
            "training set needs at least {} frames for one window, got {n_drrs}",
            T_OBS + T_PRED
        )));
    }
    let signal = sample_breathing(&phantom.breathing_params, n_drrs, FRAME_RATE_HZ, mix_seed(seed, "breathing", 0))?;
    let cbox = CropBox::around_gtv(phantom)?;
    let sequence = render_sequence(phantom, &signal.samples, [0.0; 3], &cbox)?;
    Ok(SessionDataset {
        patient_id: phantom.patient_id.clone(),
        session: Session::T1,
        spec_hash: spec_hash(&phantom.spec),
        seed,
        t_obs: T_OBS,
        t_pred: T_PRED,
        frame_width: FRAME_SIZE,
        frame_height: FRAME_SIZE,
        norm: NormalizationParams::for_phantom(phantom)?,
        sequences: vec![sequence],
    })
}

/// Test set: `n_sequences` independent free-breathing sequences of
/// `duration_s` seconds each. Every sequence gets its own breathing
/// realization and its own rigid setup error, drawn uniformly from
/// `±setup_bound_mm` per axis; targets stay normalized against the
/// planning `p_ref`, so the residual misalignment shows up in the labels.
pub fn build_test_set(
    phantom: &PatientPhantom,
    session: Session,
    n_sequences: usize,
    duration_s: f64,
    setup_bound_mm: [f64; 3],
    seed: u64,
) -> Result<SessionDataset> {
    if n_sequences == 0 {
        return Err(Error::Parameter("test set needs at least one sequence".into()));
    }
    if setup_bound_mm.iter().any(|&b| !(b >= 0.0)) {
        return Err(Error::Parameter(format!("setup error bounds must be ≥ 0, got {setup_bound_mm:?}")));
    }
    let n_frames = (duration_s * FRAME_RATE_HZ).round() as usize;
    if n_frames < T_OBS + T_PRED {
        return Err(Error::Parameter(format!(
            "test sequences of {duration_s} s hold {n_frames} frames; at least {} are needed",
            T_OBS + T_PRED
        )));
    }
    let cbox = CropBox::around_gtv(phantom)?;
    let norm = NormalizationParams::for_phantom(phantom)?;

    let sequences: Vec<Sequence> = (0..n_sequences)
        .map(|q| -> Result<Sequence> {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, "setup", q as u64));
            let mut offset = [0.0_f64; 3];
            for (a, o) in offset.iter_mut().enumerate() {
                let b = setup_bound_mm[a];
                if b > 0.0 {
                    *o = rng.gen_range(-b..=b);
                }
            }
            let signal = sample_breathing(
                &phantom.breathing_params,
                n_frames,
                FRAME_RATE_HZ,
                mix_seed(seed, "breathing", q as u64),
            )?;
            render_sequence(phantom, &signal.samples, offset, &cbox)
        })
        .collect::<Result<_>>()?;

    Ok(SessionDataset {
        patient_id: phantom.patient_id.clone(),
        session,
        spec_hash: spec_hash(&phantom.spec),
        seed,
        t_obs: T_OBS,
        t_pred: T_PRED,
        frame_width: FRAME_SIZE,
        frame_height: FRAME_SIZE,
        norm,
        sequences,
    })
}

/// Prefix of a single-sequence dataset: the first `n_frames` frames and
/// positions. Because breathing sampling and rendering are prefix-stable
/// per seed, this equals rebuilding the set at the smaller size.
pub fn truncate_frames(ds: &SessionDataset, n_frames: usize) -> Result<SessionDataset> {
    if ds.sequences.len() != 1 {
        return Err(Error::Contract(format!(
            "truncation expects a single-sequence dataset, got {} sequences",
            ds.sequences.len()
        )));
    }
    let seq = &ds.sequences[0];
    if n_frames < ds.t_obs + ds.t_pred || n_frames > seq.frames.len() {
        return Err(Error::Parameter(format!(
            "cannot truncate {} frames to {n_frames} (window needs {})",
            seq.frames.len(),
            ds.t_obs + ds.t_pred
        )));
    }
    let mut out = ds.clone();
    out.sequences[0].frames.truncate(n_frames);
    out.sequences[0].positions_mm.truncate(n_frames);
    Ok(out)
}

/// Concrete inter-session change applied to a phantom for its follow-up
/// scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct T2Perturbation {
    pub amplitude_scale: f64,
    pub baseline_shift_mm: [f64; 3],
    pub tumor_scale: f64,
}

impl T2Perturbation {
    pub fn identity() -> Self {
        T2Perturbation {
            amplitude_scale: 1.0,
            baseline_shift_mm: [0.0; 3],
            tumor_scale: 1.0,
        }
    }
}

/// Re-image the patient on a later day: breathing amplitude scaled, tumor
/// shifted and rescaled, anatomy regenerated from the same texture seed.
pub fn simulate_t2(phantom: &PatientPhantom, perturbation: &T2Perturbation) -> Result<PatientPhantom> {
    if !(perturbation.amplitude_scale > 0.0) || !(perturbation.tumor_scale > 0.0) {
        return Err(Error::Parameter(format!(
            "perturbation scales must be positive, got amplitude {} tumor {}",
            perturbation.amplitude_scale, perturbation.tumor_scale
        )));
    }
    if perturbation.baseline_shift_mm.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter("baseline shift must be finite".into()));
    }
    let mut spec = phantom.spec.clone();
    spec.breathing.amplitude_mm *= perturbation.amplitude_scale;
    for a in 0..3 {
        spec.tumor_center_mm[a] += perturbation.baseline_shift_mm[a];
        spec.tumor_radii_mm[a] *= perturbation.tumor_scale;
    }
    generate_phantom(&spec, phantom.seed)
}

// ---------------------------------------------------------------------------
// On-disk format: magic "TMFD", version 1, little-endian. Frames are f32;
// trajectories and normalization parameters are f64 so that labels
// round-trip below the 1e-9 mm consistency bound.

const TMFD_MAGIC: &[u8; 4] = b"TMFD";
const TMFD_VERSION: u16 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format_at(
                self.pos as u64,
                format!("truncated while reading {what}: needed {n} bytes, {} left", self.buf.len() - self.pos),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Serialize the dataset to its binary form.
pub fn write_dataset(ds: &SessionDataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(TMFD_MAGIC)?;
    w.write_all(&TMFD_VERSION.to_le_bytes())?;
    w.write_all(&[ds.session.to_u8()])?;
    let id = ds.patient_id.as_bytes();
    if id.len() > u16::MAX as usize {
        return Err(Error::Parameter("patient id longer than 65535 bytes".into()));
    }
    w.write_all(&(id.len() as u16).to_le_bytes())?;
    w.write_all(id)?;
    w.write_all(&ds.spec_hash.to_le_bytes())?;
    w.write_all(&ds.seed.to_le_bytes())?;
    for v in [ds.t_obs, ds.t_pred, ds.frame_width, ds.frame_height] {
        w.write_all(&(v as u16).to_le_bytes())?;
    }
    for a in 0..3 {
        w.write_all(&ds.norm.p_ref_mm[a].to_le_bytes())?;
    }
    for a in 0..3 {
        w.write_all(&ds.norm.amplitudes_mm[a].to_le_bytes())?;
    }
    w.write_all(&ds.norm.floor_mm.to_le_bytes())?;
    w.write_all(&(ds.sequences.len() as u32).to_le_bytes())?;
    for seq in &ds.sequences {
        if seq.positions_mm.len() != seq.frames.len() {
            return Err(Error::Shape(format!(
                "sequence has {} frames but {} positions",
                seq.frames.len(),
                seq.positions_mm.len()
            )));
        }
        w.write_all(&(seq.frames.len() as u32).to_le_bytes())?;
        for frame in &seq.frames {
            if frame.len() != ds.frame_width * ds.frame_height {
                return Err(Error::Shape(format!(
                    "frame holds {} pixels, expected {}",
                    frame.len(),
                    ds.frame_width * ds.frame_height
                )));
            }
            for &v in frame {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for p in &seq.positions_mm {
            for a in 0..3 {
                w.write_all(&p[a].to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a dataset back; errors carry the byte offset of the failure.
pub fn read_dataset(path: &Path) -> Result<SessionDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::InputNotFound(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?
        .read_to_end(&mut buf)?;
    let mut c = Cursor { buf: &buf, pos: 0 };

    let magic = c.take(4, "magic")?;
    if magic != TMFD_MAGIC {
        return Err(Error::format_at(0, format!("bad magic {magic:02x?}, expected \"TMFD\"")));
    }
    let version = c.u16("version")?;
    if version != TMFD_VERSION {
        return Err(Error::format_at(4, format!("unsupported version {version}, expected {TMFD_VERSION}")));
    }
    let session_off = c.pos as u64;
    let session = Session::from_u8(c.u8("session")?, session_off)?;
    let id_len = c.u16("patient id length")? as usize;
    let id_bytes = c.take(id_len, "patient id")?;
    let patient_id = String::from_utf8(id_bytes.to_vec())
        .map_err(|_| Error::format_at(c.pos as u64 - id_len as u64, "patient id is not UTF-8"))?;
    let spec_hash = c.u64("spec hash")?;
    let seed = c.u64("seed")?;
    let t_obs = c.u16("t_obs")? as usize;
    let t_pred = c.u16("t_pred")? as usize;
    let frame_width = c.u16("frame width")? as usize;
    let frame_height = c.u16("frame height")? as usize;
    if t_obs == 0 || t_pred == 0 || frame_width == 0 || frame_height == 0 {
        return Err(Error::format_at(c.pos as u64, "zero window or frame dimension"));
    }
    let mut p_ref_mm = [0.0; 3];
    for v in p_ref_mm.iter_mut() {
        *v = c.f64("p_ref")?;
    }
    let mut amplitudes_mm = [0.0; 3];
    for v in amplitudes_mm.iter_mut() {
        *v = c.f64("amplitudes")?;
    }
    let floor_mm = c.f64("divisor floor")?;
    let n_sequences = c.u32("sequence count")? as usize;
    let mut sequences = Vec::with_capacity(n_sequences);
    let frame_len = frame_width * frame_height;
    for s in 0..n_sequences {
        let n_frames = c.u32("frame count")? as usize;
        let mut frames = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let bytes = c.take(frame_len * 4, "frame pixels")?;
            let frame: Vec<f32> = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            frames.push(frame);
        }
        let mut positions_mm = Vec::with_capacity(n_frames);
        for _ in 0..n_frames {
            let mut p = [0.0_f64; 3];
            for v in p.iter_mut() {
                *v = c.f64("position")?;
            }
            positions_mm.push(p);
        }
        if n_frames < t_obs + t_pred {
            return Err(Error::format_at(
                c.pos as u64,
                format!("sequence {s} holds {n_frames} frames, below one window"),
            ));
        }
        sequences.push(Sequence { frames, positions_mm });
    }
    if c.pos != buf.len() {
        return Err(Error::format_at(
            c.pos as u64,
            format!("{} trailing bytes after the last sequence", buf.len() - c.pos),
        ));
    }
    Ok(SessionDataset {
        patient_id,
        session,
        spec_hash,
        seed,
        t_obs,
        t_pred,
        frame_width,
        frame_height,
        norm: NormalizationParams {
            p_ref_mm,
            amplitudes_mm,
            floor_mm,
        },
        sequences,
    })
}

// ---------------------------------------------------------------------------
// Cohort manifest and leave-one-out pooling.

/// Per-patient seeds for the independent random roles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatientSeeds {
    pub phantom: u64,
    pub train: u64,
    pub test_t1: u64,
    pub test_t2: u64,
}

impl Default for PatientSeeds {
    fn default() -> Self {
        PatientSeeds {
            phantom: 1,
            train: 2,
            test_t1: 3,
            test_t2: 4,
        }
    }
}

/// One patient row of the manifest. Omitted seeds are derived from the
/// patient id, so distinct patients never share randomness by accident.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatientEntry {
    pub patient_id: String,
    #[serde(default)]
    pub spec: PhantomSpec,
    #[serde(default)]
    pub seeds: Option<PatientSeeds>,
    /// Three numbers: amplitude scale, baseline shift bound (mm, per
    /// axis), tumor scale. Omitted → drawn from the default ranges.
    #[serde(default)]
    pub t2_perturbation: Option<[f64; 3]>,
}

impl PatientEntry {
    pub fn effective_seeds(&self) -> PatientSeeds {
        match self.seeds {
            Some(s) => s,
            None => {
                let base = fnv1a(self.patient_id.as_bytes());
                PatientSeeds {
                    phantom: mix_seed(base, "phantom", 0),
                    train: mix_seed(base, "train", 0),
                    test_t1: mix_seed(base, "test-t1", 0),
                    test_t2: mix_seed(base, "test-t2", 0),
                }
            }
        }
    }
}

/// Cohort description: patient list plus cohort-level defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CohortManifest {
    pub n_train_drrs: usize,
    pub n_test_sequences: usize,
    pub test_duration_s: f64,
    pub setup_error_bound_mm: f64,
    pub patients: Vec<PatientEntry>,
}

impl Default for CohortManifest {
    fn default() -> Self {
        CohortManifest {
            n_train_drrs: 500,
            n_test_sequences: 10,
            test_duration_s: 20.0,
            setup_error_bound_mm: SETUP_ERROR_BOUND_MM,
            patients: Vec::new(),
        }
    }
}

pub fn read_manifest(path: &Path) -> Result<CohortManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::InputNotFound(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

pub fn write_manifest(manifest: &CohortManifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| Error::Manifest(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

/// Resolve a patient's follow-up perturbation: fixed scales from the
/// manifest when given (with the shift drawn inside ±bound), otherwise
/// everything drawn from the default ranges. Deterministic per seed.
pub fn resolve_t2_perturbation(entry: &PatientEntry, seed: u64) -> T2Perturbation {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(seed, "t2-perturbation", 0));
    let (amplitude_scale, shift_bound, tumor_scale) = match entry.t2_perturbation {
        Some([a, b, t]) => (a, b.abs(), t),
        None => {
            let a = rng.gen_range(0.8..=1.2);
            let t = rng.gen_range(0.8..=1.2);
            (a, 5.0, t)
        }
    };
    let mut baseline_shift_mm = [0.0; 3];
    if shift_bound > 0.0 {
        for v in baseline_shift_mm.iter_mut() {
            *v = rng.gen_range(-shift_bound..=shift_bound);
        }
    }
    T2Perturbation {
        amplitude_scale,
        baseline_shift_mm,
        tumor_scale,
    }
}

/// One generated cohort member.
#[derive(Debug, Clone)]
pub struct CohortPatient {
    pub patient_id: String,
    pub seeds: PatientSeeds,
    pub phantom: PatientPhantom,
    pub t2_perturbation: T2Perturbation,
}

/// Generated cohort plus its leave-one-out structure.
#[derive(Debug, Clone)]
pub struct Cohort {
    pub manifest: CohortManifest,
    pub patients: Vec<CohortPatient>,
}

/// Leave-one-out split: the held-out target patient and the training
/// sources for the multi-patient pool.
#[derive(Debug, Clone, PartialEq)]
pub struct LoocvSplit {
    pub target: usize,
    pub others: Vec<usize>,
}

/// Generate every patient of the manifest and set up LOOCV splits.
pub fn build_cohort(manifest: &CohortManifest) -> Result<Cohort> {
    if manifest.patients.len() < 2 {
        return Err(Error::Manifest(format!(
            "leave-one-out needs at least 2 patients, manifest has {}",
            manifest.patients.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    for p in &manifest.patients {
        if !seen.insert(p.patient_id.as_str()) {
            return Err(Error::Manifest(format!("duplicate patient id \"{}\"", p.patient_id)));
        }
    }
    let patients = manifest
        .patients
        .iter()
        .map(|entry| -> Result<CohortPatient> {
            let seeds = entry.effective_seeds();
            let mut spec = entry.spec.clone();
            spec.patient_id = entry.patient_id.clone();
            let phantom = generate_phantom(&spec, seeds.phantom)?;
            let t2_perturbation = resolve_t2_perturbation(entry, seeds.test_t2);
            Ok(CohortPatient {
                patient_id: entry.patient_id.clone(),
                seeds,
                phantom,
                t2_perturbation,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Cohort {
        manifest: manifest.clone(),
        patients,
    })
}

impl Cohort {
    /// One split per patient, in manifest order.
    pub fn splits(&self) -> Vec<LoocvSplit> {
        (0..self.patients.len())
            .map(|target| LoocvSplit {
                target,
                others: (0..self.patients.len()).filter(|&i| i != target).collect(),
            })
            .collect()
    }
}

/// Reference to a sample held by one of several datasets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolRef {
    pub dataset: usize,
    pub sample: usize,
}

/// Patient-specific and multi-patient training pools for one LOOCV target,
/// balanced to the same sample count. The MP pool interleaves the other
/// patients' samples round-robin, never touching the target's.
pub fn balanced_pools(datasets: &[SessionDataset], target: usize) -> Result<(Vec<PoolRef>, Vec<PoolRef>)> {
    if target >= datasets.len() {
        return Err(Error::Parameter(format!(
            "target index {target} out of bounds for {} datasets",
            datasets.len()
        )));
    }
    if datasets.len() < 2 {
        return Err(Error::Manifest("pooling needs at least 2 patients".into()));
    }
    let n = datasets[target].n_samples();
    let ps: Vec<PoolRef> = (0..n).map(|sample| PoolRef { dataset: target, sample }).collect();

    let others: Vec<usize> = (0..datasets.len()).filter(|&i| i != target).collect();
    let available: usize = others.iter().map(|&i| datasets[i].n_samples()).sum();
    if available < n {
        return Err(Error::Parameter(format!(
            "multi-patient pool needs {n} samples but other patients only hold {available}"
        )));
    }
    let mut cursors = vec![0_usize; others.len()];
    let mut mp = Vec::with_capacity(n);
    let mut turn = 0_usize;
    while mp.len() < n {
        let k = turn % others.len();
        turn += 1;
        let ds = others[k];
        if cursors[k] < datasets[ds].n_samples() {
            mp.push(PoolRef {
                dataset: ds,
                sample: cursors[k],
            });
            cursors[k] += 1;
        }
    }
    Ok((ps, mp))
}
