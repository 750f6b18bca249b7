//! Synthetic breathing patients: parametric thorax anatomy, an irregular
//! breathing signal, and a separable motion model.
//!
//! A phantom is built from ellipsoids — thorax, two lungs, a tumor, rib
//! bands — rasterized onto a regular attenuation grid. Motion is the
//! separable field `D(r, t) = s(t) · w(r) · u`: one scalar breathing signal
//! `s`, a smooth axial weight ramp `w` (1 near the diaphragm, falling to 0
//! toward the apex), and a fixed unit direction `u`. Everything is a pure
//! function of `(spec, seed)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar attenuation field on a regular grid. Values are linear
/// attenuation coefficients in mm⁻¹; `origin` is the world position of the
/// center of voxel (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct AttenuationVolume {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
    pub values: Vec<f64>,
}

impl AttenuationVolume {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3], values: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!("volume dims must be ≥ 1, got {dims:?}")));
        }
        if spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Parameter(format!("voxel spacing must be positive, got {spacing_mm:?}")));
        }
        if values.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Shape(format!(
                "volume of dims {dims:?} needs {} values, got {}",
                dims[0] * dims[1] * dims[2],
                values.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Numeric("attenuation values must be finite and ≥ 0".into()));
        }
        Ok(AttenuationVolume { dims, spacing_mm, origin_mm, values })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    /// World position of the center of voxel (x, y, z).
    #[inline]
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + x as f64 * self.spacing_mm[0],
            self.origin_mm[1] + y as f64 * self.spacing_mm[1],
            self.origin_mm[2] + z as f64 * self.spacing_mm[2],
        ]
    }

    /// Trilinear interpolation at a world position; zero outside the grid.
    pub fn sample_trilinear(&self, pos_mm: [f64; 3]) -> f64 {
        let mut u = [0.0_f64; 3];
        for a in 0..3 {
            u[a] = (pos_mm[a] - self.origin_mm[a]) / self.spacing_mm[a];
        }
        let base = [u[0].floor(), u[1].floor(), u[2].floor()];
        let frac = [u[0] - base[0], u[1] - base[1], u[2] - base[2]];
        let b = [base[0] as i64, base[1] as i64, base[2] as i64];

        let fetch = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0
                || y < 0
                || z < 0
                || x >= self.dims[0] as i64
                || y >= self.dims[1] as i64
                || z >= self.dims[2] as i64
            {
                0.0
            } else {
                self.values[self.index(x as usize, y as usize, z as usize)]
            }
        };

        let mut acc = 0.0;
        for dz in 0..2_i64 {
            let wz = if dz == 0 { 1.0 - frac[2] } else { frac[2] };
            if wz == 0.0 {
                continue;
            }
            for dy in 0..2_i64 {
                let wy = if dy == 0 { 1.0 - frac[1] } else { frac[1] };
                if wy == 0.0 {
                    continue;
                }
                for dx in 0..2_i64 {
                    let wx = if dx == 0 { 1.0 - frac[0] } else { frac[0] };
                    if wx == 0.0 {
                        continue;
                    }
                    acc += wx * wy * wz * fetch(b[0] + dx, b[1] + dy, b[2] + dz);
                }
            }
        }
        acc
    }

    /// Attenuation-weighted center of mass in world mm.
    pub fn center_of_mass(&self) -> Result<[f64; 3]> {
        let mut mass = 0.0;
        let mut com = [0.0_f64; 3];
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let v = self.values[self.index(x, y, z)];
                    if v > 0.0 {
                        let p = self.voxel_center(x, y, z);
                        mass += v;
                        for a in 0..3 {
                            com[a] += v * p[a];
                        }
                    }
                }
            }
        }
        if mass == 0.0 {
            return Err(Error::Geometry("center of mass of an empty volume".into()));
        }
        Ok([com[0] / mass, com[1] / mass, com[2] / mass])
    }
}

/// Parameters of the plateau-shaped breathing signal
/// `s(t) = b(t) − A_c · cos^{2n}(π t / τ_c + φ)` with per-cycle Gaussian
/// jitter on amplitude and period and a linear baseline drift `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BreathingParams {
    /// Peak-to-trough amplitude A in mm.
    pub amplitude_mm: f64,
    /// Nominal cycle period τ in seconds.
    pub period_s: f64,
    /// Shape exponent n; the cosine is raised to 2n.
    pub shape_exponent: u32,
    /// Phase offset φ in radians.
    pub phase_rad: f64,
    /// Relative SD of the per-cycle amplitude jitter.
    pub amplitude_jitter_sd: f64,
    /// Relative SD of the per-cycle period jitter.
    pub period_jitter_sd: f64,
    /// Linear baseline drift in mm per minute.
    pub drift_mm_per_min: f64,
}

impl Default for BreathingParams {
    fn default() -> Self {
        BreathingParams {
            amplitude_mm: 10.0,
            period_s: 4.0,
            shape_exponent: 2,
            phase_rad: 0.0,
            amplitude_jitter_sd: 0.08,
            period_jitter_sd: 0.06,
            drift_mm_per_min: 0.5,
        }
    }
}

impl BreathingParams {
    fn validate(&self) -> Result<()> {
        if !(self.amplitude_mm >= 0.0) {
            return Err(Error::Parameter(format!("breathing amplitude must be ≥ 0, got {}", self.amplitude_mm)));
        }
        if !(self.period_s > 0.0) {
            return Err(Error::Parameter(format!("breathing period must be > 0, got {}", self.period_s)));
        }
        if self.shape_exponent < 1 {
            return Err(Error::Parameter("shape exponent must be ≥ 1".into()));
        }
        if !(self.amplitude_jitter_sd >= 0.0) || !(self.period_jitter_sd >= 0.0) {
            return Err(Error::Parameter("jitter SDs must be ≥ 0".into()));
        }
        if !self.drift_mm_per_min.is_finite() || !self.phase_rad.is_finite() {
            return Err(Error::Parameter("drift and phase must be finite".into()));
        }
        Ok(())
    }
}

/// Sampled breathing displacement trace in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct BreathingSignal {
    pub samples: Vec<f64>,
    pub rate_hz: f64,
}

impl BreathingSignal {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Full description of one synthetic patient. All lengths in mm; the world
/// origin sits at the volume center. Unspecified fields take defaults, so a
/// manifest only has to name what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub patient_id: String,
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub thorax_semi_axes_mm: [f64; 3],
    pub lung_centers_mm: [[f64; 3]; 2],
    pub lung_semi_axes_mm: [f64; 3],
    pub tumor_center_mm: [f64; 3],
    pub tumor_radii_mm: [f64; 3],
    /// Attenuation coefficients in mm⁻¹.
    pub body_mu: f64,
    pub lung_mu: f64,
    pub tumor_mu: f64,
    pub bone_mu: f64,
    pub ribs: bool,
    pub rib_period_mm: f64,
    pub rib_thickness_mm: f64,
    /// Inner boundary of the rib shell, as a fraction of the thorax
    /// ellipsoid's normalized radius² (1.0 is the surface).
    pub rib_shell: f64,
    /// Per-tissue attenuation spread drawn per seed, relative, uniform.
    pub attenuation_jitter: f64,
    pub motion_direction: [f64; 3],
    /// Below this z the motion weight is exactly 1 (diaphragm side).
    pub weight_plateau_top_z_mm: f64,
    /// At and above this z the motion weight is 0 (apex side).
    pub weight_zero_z_mm: f64,
    pub breathing: BreathingParams,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            patient_id: "phantom".into(),
            dims: [128, 128, 128],
            spacing_mm: [2.0, 2.0, 2.0],
            thorax_semi_axes_mm: [110.0, 90.0, 120.0],
            lung_centers_mm: [[-45.0, 0.0, 10.0], [45.0, 0.0, 10.0]],
            lung_semi_axes_mm: [38.0, 55.0, 75.0],
            tumor_center_mm: [45.0, 10.0, -20.0],
            tumor_radii_mm: [8.0, 8.0, 8.0],
            body_mu: 0.02,
            lung_mu: 0.002,
            tumor_mu: 0.018,
            bone_mu: 0.048,
            ribs: true,
            rib_period_mm: 26.0,
            rib_thickness_mm: 7.0,
            rib_shell: 0.75,
            attenuation_jitter: 0.03,
            motion_direction: [0.0, 0.316, 0.949],
            weight_plateau_top_z_mm: 0.0,
            weight_zero_z_mm: 118.0,
            breathing: BreathingParams::default(),
        }
    }
}

/// One generated patient: anatomy, tumor mask, and motion model.
#[derive(Debug, Clone)]
pub struct PatientPhantom {
    pub patient_id: String,
    pub reference_volume: AttenuationVolume,
    pub gtv_mask: Vec<bool>,
    pub motion_direction: [f64; 3],
    pub motion_weight_field: Vec<f64>,
    pub breathing_params: BreathingParams,
    /// Peak-to-trough tumor excursion per world axis, in mm.
    pub amplitudes_mm: [f64; 3],
    /// Center of mass of the GTV at rest, in world mm.
    pub p_ref_mm: [f64; 3],
    /// The spec this phantom was generated from, kept for session replays.
    pub spec: PhantomSpec,
    /// Texture seed the volume was rasterized with, kept so follow-up
    /// sessions can regenerate the same anatomy under a changed spec.
    pub seed: u64,
}

#[inline]
fn ellipsoid_value(p: [f64; 3], center: [f64; 3], semi_axes: [f64; 3]) -> f64 {
    let mut e = 0.0;
    for a in 0..3 {
        let d = (p[a] - center[a]) / semi_axes[a];
        e += d * d;
    }
    e
}

/// Motion weight as a function of z: 1 below the plateau top, cosine decay
/// to 0 at `zero_z`, 0 above.
fn axial_weight(z: f64, plateau_top: f64, zero_z: f64) -> f64 {
    if z <= plateau_top {
        1.0
    } else if z >= zero_z {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * (z - plateau_top) / (zero_z - plateau_top)).cos())
    }
}

/// Rasterize a patient from its spec. Pure in `(spec, seed)`: the seed only
/// feeds mild per-patient texture (rib phasing, small attenuation scaling).
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PatientPhantom> {
    if spec.spacing_mm.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Parameter(format!("voxel spacing must be positive, got {:?}", spec.spacing_mm)));
    }
    if spec.dims.iter().any(|&d| d == 0) {
        return Err(Error::Parameter(format!("volume dims must be ≥ 1, got {:?}", spec.dims)));
    }
    for (name, mu) in [
        ("body_mu", spec.body_mu),
        ("lung_mu", spec.lung_mu),
        ("tumor_mu", spec.tumor_mu),
        ("bone_mu", spec.bone_mu),
    ] {
        if !(mu >= 0.0) {
            return Err(Error::Parameter(format!("{name} must be ≥ 0, got {mu}")));
        }
    }
    if spec.tumor_radii_mm.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Geometry(format!(
            "tumor radii must be positive, got {:?}",
            spec.tumor_radii_mm
        )));
    }
    if spec
        .thorax_semi_axes_mm
        .iter()
        .chain(spec.lung_semi_axes_mm.iter())
        .any(|&r| !(r > 0.0))
    {
        return Err(Error::Geometry("thorax and lung semi-axes must be positive".into()));
    }
    spec.breathing.validate()?;

    let norm = spec
        .motion_direction
        .iter()
        .map(|d| d * d)
        .sum::<f64>()
        .sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Parameter(format!(
            "motion direction must be a nonzero finite vector, got {:?}",
            spec.motion_direction
        )));
    }
    let direction = [
        spec.motion_direction[0] / norm,
        spec.motion_direction[1] / norm,
        spec.motion_direction[2] / norm,
    ];

    let [nx, ny, nz] = spec.dims;
    let origin = [
        -((nx - 1) as f64) * spec.spacing_mm[0] / 2.0,
        -((ny - 1) as f64) * spec.spacing_mm[1] / 2.0,
        -((nz - 1) as f64) * spec.spacing_mm[2] / 2.0,
    ];

    // The tumor ellipsoid must stay within the grid.
    for a in 0..3 {
        let half_extent = (spec.dims[a] as f64) * spec.spacing_mm[a] / 2.0;
        if spec.tumor_center_mm[a] - spec.tumor_radii_mm[a] < -half_extent
            || spec.tumor_center_mm[a] + spec.tumor_radii_mm[a] > half_extent
        {
            return Err(Error::Geometry(format!(
                "tumor extends outside the volume along axis {a} (center {:?}, radii {:?})",
                spec.tumor_center_mm, spec.tumor_radii_mm
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rib_phase: f64 = rng.gen_range(0.0..spec.rib_period_mm.max(1e-6));
    let j = spec.attenuation_jitter;
    let mut tissue_scale = [1.0_f64; 4];
    for s in tissue_scale.iter_mut() {
        *s = rng.gen_range(1.0 - j..=1.0 + j).max(0.0);
    }
    let (body_mu, lung_mu, tumor_mu, bone_mu) = (
        spec.body_mu * tissue_scale[0],
        spec.lung_mu * tissue_scale[1],
        spec.tumor_mu * tissue_scale[2],
        spec.bone_mu * tissue_scale[3],
    );

    let n_vox = nx * ny * nz;
    let mut values = vec![0.0_f64; n_vox];
    let mut gtv_mask = vec![false; n_vox];
    let mut weight = vec![0.0_f64; n_vox];
    let mut tumor_in_lung = true;

    let weight_of_z: Vec<f64> = (0..nz)
        .map(|z| {
            axial_weight(
                origin[2] + z as f64 * spec.spacing_mm[2],
                spec.weight_plateau_top_z_mm,
                spec.weight_zero_z_mm,
            )
        })
        .collect();

    for z in 0..nz {
        let wz = weight_of_z[z];
        for y in 0..ny {
            for x in 0..nx {
                let idx = (z * ny + y) * nx + x;
                weight[idx] = wz;
                let p = [
                    origin[0] + x as f64 * spec.spacing_mm[0],
                    origin[1] + y as f64 * spec.spacing_mm[1],
                    origin[2] + z as f64 * spec.spacing_mm[2],
                ];
                let e_thorax = ellipsoid_value(p, [0.0; 3], spec.thorax_semi_axes_mm);
                if e_thorax > 1.0 {
                    continue;
                }
                let in_lung = spec
                    .lung_centers_mm
                    .iter()
                    .any(|c| ellipsoid_value(p, *c, spec.lung_semi_axes_mm) <= 1.0);
                let in_tumor = ellipsoid_value(p, spec.tumor_center_mm, spec.tumor_radii_mm) <= 1.0;
                let mut mu = if in_lung { lung_mu } else { body_mu };
                if spec.ribs && !in_lung && e_thorax >= spec.rib_shell {
                    let band = (p[2] - rib_phase).rem_euclid(spec.rib_period_mm);
                    if band < spec.rib_thickness_mm {
                        mu = bone_mu;
                    }
                }
                if in_tumor {
                    mu = tumor_mu;
                    gtv_mask[idx] = true;
                    if !in_lung {
                        tumor_in_lung = false;
                    }
                }
                values[idx] = mu;
            }
        }
    }

    let n_gtv = gtv_mask.iter().filter(|&&m| m).count();
    if n_gtv == 0 {
        return Err(Error::Geometry(
            "tumor mask is empty: radii are below the voxel spacing".into(),
        ));
    }
    if !tumor_in_lung {
        return Err(Error::Geometry(
            "tumor is not fully inside a lung region".into(),
        ));
    }

    let reference_volume = AttenuationVolume::new(spec.dims, spec.spacing_mm, origin, values)?;

    // GTV centroid (unweighted: every tumor voxel counts the same) and the
    // motion weight across the tumor. The tumor must sit entirely on the
    // full-weight plateau so that its rigid excursion matches the breathing
    // amplitude exactly.
    let mut p_ref = [0.0_f64; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = (z * ny + y) * nx + x;
                if gtv_mask[idx] {
                    if weight[idx] != 1.0 {
                        return Err(Error::Geometry(
                            "tumor must lie below the motion ramp's plateau top so its \
                             excursion equals the breathing amplitude"
                                .into(),
                        ));
                    }
                    let p = reference_volume.voxel_center(x, y, z);
                    for a in 0..3 {
                        p_ref[a] += p[a];
                    }
                }
            }
        }
    }
    for a in 0..3 {
        p_ref[a] /= n_gtv as f64;
    }

    let amp = spec.breathing.amplitude_mm;
    let amplitudes_mm = [
        amp * direction[0].abs(),
        amp * direction[1].abs(),
        amp * direction[2].abs(),
    ];

    Ok(PatientPhantom {
        patient_id: spec.patient_id.clone(),
        reference_volume,
        gtv_mask,
        motion_direction: direction,
        motion_weight_field: weight,
        breathing_params: spec.breathing.clone(),
        amplitudes_mm,
        p_ref_mm: p_ref,
        spec: spec.clone(),
        seed,
    })
}

/// Draw a standard normal via Box–Muller from two uniform draws.
fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Sample `n_points` of the breathing signal at `rate_hz`.
///
/// Amplitude and period are redrawn at each cycle seam — the zeros of
/// `cos(θ)`, where the signal value and slope both vanish, so jittered
/// cycles join smoothly. Generation walks cycles forward in time, so a
/// longer signal extends a shorter one with the same parameters and seed.
pub fn sample_breathing(
    params: &BreathingParams,
    n_points: usize,
    rate_hz: f64,
    seed: u64,
) -> Result<BreathingSignal> {
    params.validate()?;
    if n_points == 0 {
        return Err(Error::Parameter("breathing signal length must be ≥ 1".into()));
    }
    if !(rate_hz > 0.0) {
        return Err(Error::Parameter(format!("sampling rate must be > 0, got {rate_hz}")));
    }

    let pi = std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_cycle = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        let ga = standard_normal(rng);
        let gt = standard_normal(rng);
        let a_c = (params.amplitude_mm * (1.0 + params.amplitude_jitter_sd * ga)).max(0.0);
        let tau_c = (params.period_s * (1.0 + params.period_jitter_sd * gt)).max(0.1 * params.period_s);
        (a_c, tau_c)
    };

    // Phase bookkeeping: θ advances continuously; seams sit at the odd
    // multiples of π/2 (zeros of cos θ).
    let mut theta_seam = params.phase_rad;
    let mut t_seam = 0.0_f64;
    let (mut a_c, mut tau_c) = draw_cycle(&mut rng);
    let next_seam = |theta: f64| -> f64 {
        let mut k = (theta / pi - 0.5).floor() + 1.0;
        while (k + 0.5) * pi <= theta {
            k += 1.0;
        }
        (k + 0.5) * pi
    };
    let mut theta_next = next_seam(theta_seam);

    let n = params.shape_exponent as i32;
    let drift_per_s = params.drift_mm_per_min / 60.0;
    let mut samples = Vec::with_capacity(n_points);
    for i in 0..n_points {
        let t = i as f64 / rate_hz;
        while t >= t_seam + (theta_next - theta_seam) * tau_c / pi {
            t_seam += (theta_next - theta_seam) * tau_c / pi;
            theta_seam = theta_next;
            theta_next = theta_seam + pi;
            let c = draw_cycle(&mut rng);
            a_c = c.0;
            tau_c = c.1;
        }
        let theta = theta_seam + pi * (t - t_seam) / tau_c;
        let cos = theta.cos();
        samples.push(drift_per_s * t - a_c * (cos * cos).powi(n));
    }
    Ok(BreathingSignal { samples, rate_hz })
}

/// Resample `volume` under the displacement field `d · w(r) · u` by inverse
/// warping: `out(r) = volume(r − d · w(r) · u)`, trilinear, zero outside.
pub fn warp(
    volume: &AttenuationVolume,
    weight_field: &[f64],
    direction: [f64; 3],
    displacement_mm: f64,
) -> Result<AttenuationVolume> {
    if !displacement_mm.is_finite() {
        return Err(Error::Parameter(format!("displacement must be finite, got {displacement_mm}")));
    }
    if weight_field.len() != volume.values.len() {
        return Err(Error::Shape(format!(
            "weight field has {} entries for a volume of {}",
            weight_field.len(),
            volume.values.len()
        )));
    }
    if displacement_mm == 0.0 {
        return Ok(volume.clone());
    }
    let [nx, ny, nz] = volume.dims;
    let mut out = vec![0.0_f64; volume.values.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = (z * ny + y) * nx + x;
                let w = weight_field[idx];
                if w == 0.0 {
                    out[idx] = volume.values[idx];
                    continue;
                }
                let p = volume.voxel_center(x, y, z);
                let src = [
                    p[0] - displacement_mm * w * direction[0],
                    p[1] - displacement_mm * w * direction[1],
                    p[2] - displacement_mm * w * direction[2],
                ];
                out[idx] = volume.sample_trilinear(src);
            }
        }
    }
    AttenuationVolume::new(volume.dims, volume.spacing_mm, volume.origin_mm, out)
}

/// Anatomy at breathing displacement `displacement_mm` (0 is the reference).
pub fn deform(phantom: &PatientPhantom, displacement_mm: f64) -> Result<AttenuationVolume> {
    warp(
        &phantom.reference_volume,
        &phantom.motion_weight_field,
        phantom.motion_direction,
        displacement_mm,
    )
}

/// Center of mass of the displaced GTV in world mm. The GTV rides the
/// full-weight plateau, so the displaced centroid is the rest centroid
/// translated by `displacement_mm · u` — no resampling involved.
pub fn tumor_center(phantom: &PatientPhantom, displacement_mm: f64) -> Result<[f64; 3]> {
    if !displacement_mm.is_finite() {
        return Err(Error::Parameter(format!("displacement must be finite, got {displacement_mm}")));
    }
    if !phantom.gtv_mask.iter().any(|&m| m) {
        return Err(Error::Geometry("tumor mask is empty".into()));
    }
    let mut p = phantom.p_ref_mm;
    for a in 0..3 {
        p[a] += displacement_mm * phantom.motion_direction[a];
    }
    Ok(p)
}
