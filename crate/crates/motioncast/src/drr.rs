//! Fluoroscopy-like image formation: parallel-beam coronal projections
//! under the Beer–Lambert absorption-only model, plus the per-frame
//! preprocessing steps (crop, resample, intensity normalization).
//!
//! A raw projection integrates attenuation along anterior–posterior rays at
//! voxel-center sample points, one ray per detector pixel, and maps optical
//! depth to transmission `exp(−∫μ ds)`. Frames keep their world geometry
//! (pixel spacing and origin in the coronal x/z plane) so crops can be
//! placed in mm.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::phantom::{AttenuationVolume, PatientPhantom};

/// One rendered frame. Pixels are stored row-major; row `r`, column `c`
/// maps to world x = `origin_mm[0] + c·pixel_spacing_mm[0]` (sagittal
/// left–right) and z = `origin_mm[1] + r·pixel_spacing_mm[1]` (axial
/// inferior–superior).
#[derive(Debug, Clone, PartialEq)]
pub struct DrrFrame {
    pub width: usize,
    pub height: usize,
    pub pixel_spacing_mm: [f64; 2],
    pub origin_mm: [f64; 2],
    pub timestamp_s: f64,
    pub values: Vec<f64>,
}

impl DrrFrame {
    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.values {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }
}

/// Rectangular region of the coronal plane, in world mm: the projected GTV
/// center plus half-widths that already include the safety margins.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropBox {
    /// (x, z) of the box center.
    pub center_mm: [f64; 2],
    /// Half-widths along (x, z); both must be positive.
    pub extent_mm: [f64; 2],
}

/// Margin added to the GTV half-extent along the sagittal (left–right)
/// axis of the coronal plane, in mm.
pub const SAGITTAL_MARGIN_MM: f64 = 100.0;
/// Margin added along the axial (superior–inferior) axis, in mm.
pub const AXIAL_MARGIN_MM: f64 = 50.0;

impl CropBox {
    pub fn new(center_mm: [f64; 2], extent_mm: [f64; 2]) -> Result<Self> {
        if extent_mm.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::Geometry(format!("crop extent must be positive, got {extent_mm:?}")));
        }
        if center_mm.iter().any(|c| !c.is_finite()) {
            return Err(Error::Geometry(format!("crop center must be finite, got {center_mm:?}")));
        }
        Ok(CropBox { center_mm, extent_mm })
    }

    /// Box around the phantom's resting GTV: projected center, GTV
    /// half-extent plus 100 mm sagittal / 50 mm axial margins.
    pub fn around_gtv(phantom: &PatientPhantom) -> Result<Self> {
        let vol = &phantom.reference_volume;
        let [nx, ny, nz] = vol.dims;
        let mut lo = [f64::INFINITY; 2];
        let mut hi = [f64::NEG_INFINITY; 2];
        let mut any = false;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if phantom.gtv_mask[(z * ny + y) * nx + x] {
                        any = true;
                        let p = vol.voxel_center(x, y, z);
                        lo[0] = lo[0].min(p[0]);
                        hi[0] = hi[0].max(p[0]);
                        lo[1] = lo[1].min(p[2]);
                        hi[1] = hi[1].max(p[2]);
                    }
                }
            }
        }
        if !any {
            return Err(Error::Geometry("tumor mask is empty".into()));
        }
        let center = [phantom.p_ref_mm[0], phantom.p_ref_mm[2]];
        let extent = [
            (hi[0] - lo[0]) / 2.0 + SAGITTAL_MARGIN_MM,
            (hi[1] - lo[1]) / 2.0 + AXIAL_MARGIN_MM,
        ];
        CropBox::new(center, extent)
    }
}

/// Parallel-beam coronal projection: one ray per (x, z) voxel column,
/// integrating along y at voxel centers with step = voxel spacing.
pub fn project_coronal(volume: &AttenuationVolume) -> DrrFrame {
    let [nx, ny, nz] = volume.dims;
    let dy = volume.spacing_mm[1];
    let mut values = vec![0.0_f64; nx * nz];
    let mut depth = vec![0.0_f64; nx];
    for z in 0..nz {
        depth.iter_mut().for_each(|d| *d = 0.0);
        for y in 0..ny {
            let row = &volume.values[(z * ny + y) * nx..(z * ny + y + 1) * nx];
            for (d, &mu) in depth.iter_mut().zip(row) {
                *d += mu;
            }
        }
        for (x, &d) in depth.iter().enumerate() {
            values[z * nx + x] = (-d * dy).exp();
        }
    }
    DrrFrame {
        width: nx,
        height: nz,
        pixel_spacing_mm: [volume.spacing_mm[0], volume.spacing_mm[2]],
        origin_mm: [volume.origin_mm[0], volume.origin_mm[2]],
        timestamp_s: 0.0,
        values,
    }
}

/// Index of the first pixel of the crop window along one axis, and the
/// window length in pixels.
fn crop_axis(center: f64, extent: f64, origin: f64, spacing: f64) -> (i64, usize) {
    let len = ((2.0 * extent / spacing) + 0.5).floor().max(1.0) as usize;
    let first = ((center - extent - origin) / spacing + 0.5).floor() as i64;
    (first, len)
}

/// Cut the box out of the frame on the frame's own pixel grid. Pixels of
/// the box that fall outside the frame are zero-padded; a box that misses
/// the frame entirely is a geometry error.
pub fn crop(frame: &DrrFrame, cbox: &CropBox) -> Result<DrrFrame> {
    let (col0, out_w) = crop_axis(
        cbox.center_mm[0],
        cbox.extent_mm[0],
        frame.origin_mm[0],
        frame.pixel_spacing_mm[0],
    );
    let (row0, out_h) = crop_axis(
        cbox.center_mm[1],
        cbox.extent_mm[1],
        frame.origin_mm[1],
        frame.pixel_spacing_mm[1],
    );
    if col0 >= frame.width as i64
        || row0 >= frame.height as i64
        || col0 + out_w as i64 <= 0
        || row0 + out_h as i64 <= 0
    {
        return Err(Error::Geometry(format!(
            "crop box at {:?} ± {:?} mm does not overlap the {}×{} frame",
            cbox.center_mm, cbox.extent_mm, frame.width, frame.height
        )));
    }
    let mut values = vec![0.0_f64; out_w * out_h];
    for r in 0..out_h {
        let src_r = row0 + r as i64;
        if src_r < 0 || src_r >= frame.height as i64 {
            continue;
        }
        for c in 0..out_w {
            let src_c = col0 + c as i64;
            if src_c < 0 || src_c >= frame.width as i64 {
                continue;
            }
            values[r * out_w + c] = frame.values[src_r as usize * frame.width + src_c as usize];
        }
    }
    Ok(DrrFrame {
        width: out_w,
        height: out_h,
        pixel_spacing_mm: frame.pixel_spacing_mm,
        origin_mm: [
            frame.origin_mm[0] + col0 as f64 * frame.pixel_spacing_mm[0],
            frame.origin_mm[1] + row0 as f64 * frame.pixel_spacing_mm[1],
        ],
        timestamp_s: frame.timestamp_s,
        values,
    })
}

/// Affine rescale of intensities so the minimum maps to 0 and the maximum
/// to 1. A constant frame (a broken render) is an error, not a silent 0.5.
pub fn normalize01(frame: &DrrFrame) -> Result<DrrFrame> {
    let (lo, hi) = frame.min_max();
    if !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Numeric("normalize: frame contains non-finite values".into()));
    }
    if lo == hi {
        return Err(Error::Numeric(format!(
            "normalize: constant frame (all pixels {lo}); nothing to scale"
        )));
    }
    // True division: `(hi − lo) / (hi − lo)` is exactly 1, so attained
    // bounds map to exactly {0, 1} and renormalizing is a no-op.
    let span = hi - lo;
    let values = frame.values.iter().map(|&v| (v - lo) / span).collect();
    Ok(DrrFrame { values, ..frame.clone() })
}

/// Bilinear resample to exactly `out_w × out_h`. Sample positions follow
/// the pixel-area convention: `src = (dst + 0.5)·in/out − 0.5`, clamped to
/// the frame, so equal sizes reproduce the input bit for bit and outputs
/// stay within the input's value range.
pub fn resample(frame: &DrrFrame, out_w: usize, out_h: usize) -> Result<DrrFrame> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Parameter(format!("resample: output size {out_w}×{out_h} must be positive")));
    }
    if frame.values.is_empty() {
        return Err(Error::Parameter("resample: empty frame".into()));
    }
    let scale_x = frame.width as f64 / out_w as f64;
    let scale_y = frame.height as f64 / out_h as f64;
    let mut values = vec![0.0_f64; out_w * out_h];
    for r in 0..out_h {
        let sy = ((r as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (frame.height - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(frame.height - 1);
        let fy = sy - y0 as f64;
        for c in 0..out_w {
            let sx = ((c as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (frame.width - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(frame.width - 1);
            let fx = sx - x0 as f64;
            let v00 = frame.values[y0 * frame.width + x0];
            let v01 = frame.values[y0 * frame.width + x1];
            let v10 = frame.values[y1 * frame.width + x0];
            let v11 = frame.values[y1 * frame.width + x1];
            let top = v00 + (v01 - v00) * fx;
            let bottom = v10 + (v11 - v10) * fx;
            values[r * out_w + c] = top + (bottom - top) * fy;
        }
    }
    Ok(DrrFrame {
        width: out_w,
        height: out_h,
        pixel_spacing_mm: [
            frame.pixel_spacing_mm[0] * scale_x,
            frame.pixel_spacing_mm[1] * scale_y,
        ],
        origin_mm: [
            frame.origin_mm[0] + (0.5 * scale_x - 0.5) * frame.pixel_spacing_mm[0],
            frame.origin_mm[1] + (0.5 * scale_y - 0.5) * frame.pixel_spacing_mm[1],
        ],
        timestamp_s: frame.timestamp_s,
        values,
    })
}

/// Additive Gaussian detector noise, clamped at zero. `sd = 0` is the
/// identity; the noise is a pure function of the seed.
pub fn with_gaussian_noise(frame: &DrrFrame, sd: f64, seed: u64) -> Result<DrrFrame> {
    if !(sd >= 0.0) {
        return Err(Error::Parameter(format!("noise SD must be ≥ 0, got {sd}")));
    }
    if sd == 0.0 {
        return Ok(frame.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = frame
        .values
        .iter()
        .map(|&v| {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            (v + sd * g).max(0.0)
        })
        .collect();
    Ok(DrrFrame { values, ..frame.clone() })
}

/// Render the cropped coronal projection of the phantom displaced by
/// `displacement_mm`, without materializing the warped volume: each ray
/// samples the warped anatomy directly. With `rigid_offset_mm = 0` this is
/// pixelwise identical to `deform → project_coronal → crop` (same sample
/// points, same summation order), but only touches rays inside the crop
/// box. A nonzero `rigid_offset_mm` translates the whole anatomy — tumor
/// included — by that vector before projecting (sub-voxel, via the same
/// trilinear sampler), which is how patient setup errors enter the images.
pub fn project_coronal_warped(
    phantom: &PatientPhantom,
    displacement_mm: f64,
    rigid_offset_mm: [f64; 3],
    cbox: &CropBox,
) -> Result<DrrFrame> {
    if !displacement_mm.is_finite() || rigid_offset_mm.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parameter(format!(
            "displacement {displacement_mm} and offset {rigid_offset_mm:?} must be finite"
        )));
    }
    let vol = &phantom.reference_volume;
    let [nx, ny, nz] = vol.dims;
    let dy = vol.spacing_mm[1];
    let (col0, out_w) = crop_axis(
        cbox.center_mm[0],
        cbox.extent_mm[0],
        vol.origin_mm[0],
        vol.spacing_mm[0],
    );
    let (row0, out_h) = crop_axis(
        cbox.center_mm[1],
        cbox.extent_mm[1],
        vol.origin_mm[2],
        vol.spacing_mm[2],
    );
    if col0 >= nx as i64 || row0 >= nz as i64 || col0 + out_w as i64 <= 0 || row0 + out_h as i64 <= 0 {
        return Err(Error::Geometry(format!(
            "crop box at {:?} ± {:?} mm does not overlap the detector",
            cbox.center_mm, cbox.extent_mm
        )));
    }
    let d = displacement_mm;
    let u = phantom.motion_direction;
    let off = rigid_offset_mm;
    let pure_breathing = off == [0.0; 3];
    let mut values = vec![0.0_f64; out_w * out_h];
    for r in 0..out_h {
        let zi = row0 + r as i64;
        if zi < 0 || zi >= nz as i64 {
            continue;
        }
        let z = zi as usize;
        for c in 0..out_w {
            let xi = col0 + c as i64;
            if xi < 0 || xi >= nx as i64 {
                continue;
            }
            let x = xi as usize;
            let mut depth = 0.0_f64;
            for y in 0..ny {
                let idx = (z * ny + y) * nx + x;
                let w = phantom.motion_weight_field[idx];
                let mu = if pure_breathing && (d == 0.0 || w == 0.0) {
                    vol.values[idx]
                } else {
                    let p = vol.voxel_center(x, y, z);
                    vol.sample_trilinear([
                        p[0] - d * w * u[0] - off[0],
                        p[1] - d * w * u[1] - off[1],
                        p[2] - d * w * u[2] - off[2],
                    ])
                };
                depth += mu;
            }
            values[r * out_w + c] = (-depth * dy).exp();
        }
    }
    Ok(DrrFrame {
        width: out_w,
        height: out_h,
        pixel_spacing_mm: [vol.spacing_mm[0], vol.spacing_mm[2]],
        origin_mm: [
            vol.origin_mm[0] + col0 as f64 * vol.spacing_mm[0],
            vol.origin_mm[2] + row0 as f64 * vol.spacing_mm[2],
        ],
        timestamp_s: 0.0,
        values,
    })
}

/// Write the frame as a binary 16-bit PGM (`P5`, maxval 65535, big-endian
/// samples). Values are clamped to [0, 1] and scaled to the full range.
pub fn write_pgm<W: Write>(frame: &DrrFrame, mut out: W) -> Result<()> {
    write!(out, "P5\n{} {}\n65535\n", frame.width, frame.height)?;
    let mut buf = Vec::with_capacity(frame.values.len() * 2);
    for &v in &frame.values {
        let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
        buf.extend_from_slice(&q.to_be_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}
