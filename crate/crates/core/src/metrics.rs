//! Evaluation: grid divergence, masked velocity errors, PSNR and re-simulation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::advection::{rollout_with, AdvectionConfig};
use crate::dfk_field::{divergence_fd, TimeVaryingField, VelocityField};
use crate::error::{Error, Result};
use crate::gaussians::{DensityEvaluator, GaussianCloud, InflowRegion};
use crate::geometry::{Aabb, Vec3};
use crate::render2d::{splat, ssim, Image, ObservationSet};

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Cell-centered grid with cached ground-truth density and velocity.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub resolution: [usize; 3],
    pub domain: Aabb,
    pub density: Vec<f64>,
    pub velocity: Vec<Vec3>,
}

impl EvalGrid {
    pub fn new(resolution: [usize; 3], domain: Aabb) -> Result<Self> {
        if resolution.iter().any(|r| *r < 4) {
            return Err(Error::domain(format!("eval grid resolution must be at least 4 per axis, got {resolution:?}")));
        }
        domain.validate()?;
        let n = resolution.iter().product();
        Ok(EvalGrid { resolution, domain, density: vec![0.0; n], velocity: vec![Vec3::zeros(); n] })
    }

    /// Grid whose caches hold the density of `cloud` and the velocity of `field`.
    pub fn from_ground_truth(resolution: [usize; 3], domain: Aabb, cloud: &GaussianCloud, field: &dyn VelocityField) -> Result<Self> {
        let mut g = EvalGrid::new(resolution, domain)?;
        let dens = DensityEvaluator::new(cloud);
        for i in 0..g.len() {
            let x = g.center(i);
            g.density[i] = dens.density(&x);
            g.velocity[i] = field.velocity(&x);
        }
        Ok(g)
    }

    pub fn len(&self) -> usize {
        self.density.len()
    }

    pub fn is_empty(&self) -> bool {
        self.density.is_empty()
    }

    pub fn cell_size(&self) -> Vec3 {
        let r = self.resolution;
        self.domain.extent().component_div(&Vec3::new(r[0] as f64, r[1] as f64, r[2] as f64))
    }

    /// Center of cell `i`, x fastest.
    pub fn center(&self, i: usize) -> Vec3 {
        let [nx, ny, _] = self.resolution;
        let (ix, iy, iz) = (i % nx, (i / nx) % ny, i / (nx * ny));
        self.domain.lo() + Vec3::new(ix as f64 + 0.5, iy as f64 + 0.5, iz as f64 + 0.5).component_mul(&self.cell_size())
    }

    /// Cells with positive ground-truth density.
    pub fn mask_count(&self) -> usize {
        self.density.iter().filter(|d| **d > 0.0).count()
    }
}

/// Mean over cell centers of `|div v|` by central differences.
pub fn divergence_metric(field: &dyn VelocityField, grid: &EvalGrid, fd_step: f64) -> Result<f64> {
    let mut sum = 0.0;
    for i in 0..grid.len() {
        sum += divergence_fd(field, &grid.center(i), fd_step)?.abs();
    }
    Ok(sum / grid.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityErrors {
    pub mse_v: f64,
    pub cos_v: f64,
    /// Masked cells the means run over.
    pub cells: usize,
}

/// MSE and mean cosine similarity against the grid's ground truth over cells with
/// positive density. Cells where either speed is below `1e-12` add 0 to the cosine.
pub fn velocity_errors(pred: &dyn VelocityField, grid: &EvalGrid) -> Result<VelocityErrors> {
    let (mut se, mut cs, mut n) = (0.0, 0.0, 0usize);
    for i in 0..grid.len() {
        if grid.density[i] <= 0.0 {
            continue;
        }
        let gt = grid.velocity[i];
        let v = pred.velocity(&grid.center(i));
        se += (v - gt).norm_squared();
        let (a, b) = (v.norm(), gt.norm());
        if a >= 1e-12 && b >= 1e-12 {
            cs += (v.dot(&gt) / (a * b)).clamp(-1.0, 1.0);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::domain("velocity error mask is empty: no cell has positive ground-truth density"));
    }
    Ok(VelocityErrors { mse_v: se / n as f64, cos_v: cs / n as f64, cells: n })
}

/// `10 log10(peak^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.same_shape(b)?;
    if !(peak.is_finite() && peak > 0.0) {
        return Err(Error::domain(format!("PSNR peak must be positive, got {peak}")));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub frame: usize,
    pub camera: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResimSummary {
    pub frames: usize,
    pub cameras: usize,
    pub peak: f64,
    pub psnr_cap: f64,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

#[derive(Clone, Debug)]
pub struct ResimReport {
    pub rows: Vec<FrameScore>,
    pub summary: ResimSummary,
    /// `[frame][camera]`.
    pub renders: Vec<Vec<Image>>,
}

impl ResimReport {
    /// Per-frame rows with header `frame,camera,psnr,ssim`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("frame,camera,psnr,ssim\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.frame, r.camera, r.psnr, r.ssim);
        }
        s
    }
}

/// Advects `cloud0` from frame 0 with `field` alone, renders every frame with every
/// camera and scores it against the references. `peak` defaults to the brightest
/// reference pixel.
pub fn resimulate_and_score(
    cloud0: &GaussianCloud,
    field: &TimeVaryingField,
    references: &ObservationSet,
    cfg: &AdvectionConfig,
    inflow: Option<(&InflowRegion, u64)>,
    peak: Option<f64>,
) -> Result<ResimReport> {
    let frames: Vec<&dyn VelocityField> = field.frames.iter().map(|f| f as &dyn VelocityField).collect();
    resimulate_with(cloud0, &frames, field.frame_dt, references, cfg, inflow, peak)
}

/// [`resimulate_and_score`] over any per-frame velocity fields (`frames[k]` drives frame `k`).
pub fn resimulate_with(
    cloud0: &GaussianCloud,
    frames: &[&dyn VelocityField],
    frame_dt: f64,
    references: &ObservationSet,
    cfg: &AdvectionConfig,
    inflow: Option<(&InflowRegion, u64)>,
    peak: Option<f64>,
) -> Result<ResimReport> {
    let n = references.frame_count();
    if n == 0 {
        return Err(Error::domain("no reference frames"));
    }
    if frames.len() + 1 < n {
        return Err(Error::domain(format!("{n} reference frames need {} field frames, have {}", n - 1, frames.len())));
    }
    let peak = match peak {
        Some(p) => p,
        None => references.peak().max(f64::MIN_POSITIVE),
    };
    let traj = rollout_with(cloud0, &frames[..n - 1], frame_dt, 0, cfg, inflow)?;
    let mut rows = Vec::with_capacity(n * references.cameras.len());
    let mut renders = Vec::with_capacity(n);
    for f in 0..n {
        let cloud = traj.cloud_at(f);
        let mut row = Vec::with_capacity(references.cameras.len());
        for (c, cam) in references.cameras.iter().enumerate() {
            let img = splat(&cloud, cam);
            let reference = references.get(f, c)?;
            rows.push(FrameScore { frame: f, camera: c, psnr: psnr(&img, reference, peak)?, ssim: ssim(&img, reference)? });
            row.push(img);
        }
        renders.push(row);
    }
    let m = rows.len() as f64;
    let summary = ResimSummary {
        frames: n,
        cameras: references.cameras.len(),
        peak,
        psnr_cap: PSNR_CAP,
        mean_psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / m,
        mean_ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / m,
    };
    Ok(ResimReport { rows, summary, renders })
}
