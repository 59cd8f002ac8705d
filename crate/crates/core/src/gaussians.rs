//! Smoke representation: anisotropic Gaussian primitives with `Sigma = R S S^T R^T`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::io::{read_file, substream, write_file, ByteReader, ByteWriter};

/// Quaternion stored as `[w, x, y, z]`.
pub type Quat = [f64; 4];

pub const IDENTITY_QUAT: Quat = [1.0, 0.0, 0.0, 0.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPrimitive {
    pub position: Vec3,
    pub log_scales: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    /// Grayscale radiance.
    pub emission: f64,
}

impl GaussianPrimitive {
    pub fn isotropic(position: Vec3, scale: f64, opacity: f64, emission: f64) -> Self {
        GaussianPrimitive {
            position,
            log_scales: Vec3::repeat(scale.ln()),
            rotation: IDENTITY_QUAT,
            opacity_logit: logit(opacity),
            emission,
        }
    }

    pub fn scales(&self) -> Vec3 {
        self.log_scales.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn covariance(&self) -> Mat3 {
        covariance(&self.rotation, &self.log_scales)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn normalize_quat(q: &Quat) -> Quat {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n == 0.0 || !n.is_finite() {
        return IDENTITY_QUAT;
    }
    [q[0] / n, q[1] / n, q[2] / n, q[3] / n]
}

/// Rotation of the normalized quaternion.
pub fn rotation_matrix(q: &Quat) -> Mat3 {
    let [w, x, y, z] = normalize_quat(q);
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
        2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
        2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls `dL/dR` back to the raw (unnormalized) quaternion. The result is
/// tangent to the sphere through `q`.
pub fn rotation_matrix_backward(q: &Quat, grad_r: &Mat3) -> Quat {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    let [w, x, y, z] = normalize_quat(q);
    let dw = Mat3::new(0.0, -2.0 * z, 2.0 * y, 2.0 * z, 0.0, -2.0 * x, -2.0 * y, 2.0 * x, 0.0);
    let dx = Mat3::new(0.0, 2.0 * y, 2.0 * z, 2.0 * y, -4.0 * x, -2.0 * w, 2.0 * z, 2.0 * w, -4.0 * x);
    let dy = Mat3::new(-4.0 * y, 2.0 * x, 2.0 * w, 2.0 * x, 0.0, 2.0 * z, -2.0 * w, 2.0 * z, -4.0 * y);
    let dz = Mat3::new(-4.0 * z, -2.0 * w, 2.0 * x, 2.0 * w, -4.0 * z, 2.0 * y, 2.0 * x, 2.0 * y, 0.0);
    let gu = [grad_r.dot(&dw), grad_r.dot(&dx), grad_r.dot(&dy), grad_r.dot(&dz)];
    let qn = [w, x, y, z];
    let radial: f64 = gu.iter().zip(&qn).map(|(g, c)| g * c).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (gu[k] - radial * qn[k]) / n;
    }
    out
}

pub fn covariance(q: &Quat, log_scales: &Vec3) -> Mat3 {
    let r = rotation_matrix(q);
    let s2 = log_scales.map(|l| (2.0 * l).exp());
    r * Mat3::from_diagonal(&s2) * r.transpose()
}

/// Given symmetric `dL/dSigma`, returns `(dL/dlog_scales, dL/dq)`.
pub fn covariance_backward(q: &Quat, log_scales: &Vec3, grad_cov: &Mat3) -> (Vec3, Quat) {
    let r = rotation_matrix(q);
    let s2 = log_scales.map(|l| (2.0 * l).exp());
    let g = (grad_cov + grad_cov.transpose()) * 0.5;
    let mut dls = Vec3::zeros();
    for k in 0..3 {
        let col = r.column(k);
        dls[k] = 2.0 * s2[k] * (col.transpose() * g * col)[(0, 0)];
    }
    let grad_r = g * r * Mat3::from_diagonal(&s2) * 2.0;
    (dls, rotation_matrix_backward(q, &grad_r))
}

/// Ordered primitives at one frame.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct GaussianCloud {
    pub primitives: Vec<GaussianPrimitive>,
    pub frame_index: usize,
}

impl GaussianCloud {
    pub fn new(primitives: Vec<GaussianPrimitive>, frame_index: usize) -> Self {
        GaussianCloud { primitives, frame_index }
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.primitives.iter().map(|g| g.position).collect()
    }

    pub fn with_positions(&self, positions: &[Vec3]) -> GaussianCloud {
        let mut c = self.clone();
        for (g, p) in c.primitives.iter_mut().zip(positions) {
            g.position = *p;
        }
        c
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.len();
        let mut w = ByteWriter::new(b"GCL1");
        let header = serde_json::to_vec(&GclHeader { count: n, frame_index: self.frame_index })?;
        w.bytes(&header);
        w.f64s(self.primitives.iter().flat_map(|g| g.position.iter().copied().collect::<Vec<_>>()));
        w.f64s(self.primitives.iter().flat_map(|g| g.log_scales.iter().copied().collect::<Vec<_>>()));
        w.f64s(self.primitives.iter().flat_map(|g| g.rotation));
        w.f64s(self.primitives.iter().map(|g| g.opacity_logit));
        w.f64s(self.primitives.iter().map(|g| g.emission));
        write_file(path, &w.buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, b"GCL1", "GCL1")?;
        let header: GclHeader = serde_json::from_slice(r.bytes()?).map_err(|e| Error::format("GCL1", e.to_string()))?;
        let n = header.count;
        let pos = r.f64s(3 * n)?;
        let ls = r.f64s(3 * n)?;
        let rot = r.f64s(4 * n)?;
        let op = r.f64s(n)?;
        let em = r.f64s(n)?;
        r.finish()?;
        let primitives = (0..n)
            .map(|i| GaussianPrimitive {
                position: Vec3::new(pos[3 * i], pos[3 * i + 1], pos[3 * i + 2]),
                log_scales: Vec3::new(ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]),
                rotation: [rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]],
                opacity_logit: op[i],
                emission: em[i],
            })
            .collect();
        Ok(GaussianCloud { primitives, frame_index: header.frame_index })
    }
}

#[derive(Serialize, Deserialize)]
struct GclHeader {
    count: usize,
    frame_index: usize,
}

/// Sum over primitives of `(sx-sy)^2 + (sy-sz)^2 + (sx-sz)^2`.
pub fn aniso_loss(cloud: &GaussianCloud) -> f64 {
    cloud.primitives.iter().map(|g| aniso_term(&g.log_scales)).sum()
}

pub(crate) fn aniso_term(log_scales: &Vec3) -> f64 {
    let s = log_scales.map(f64::exp);
    (s.x - s.y).powi(2) + (s.y - s.z).powi(2) + (s.x - s.z).powi(2)
}

/// Gradient of [`aniso_term`] with respect to the log-scales.
pub(crate) fn aniso_term_grad(log_scales: &Vec3) -> Vec3 {
    let s = log_scales.map(f64::exp);
    Vec3::new(
        2.0 * (s.x - s.y) + 2.0 * (s.x - s.z),
        -2.0 * (s.x - s.y) + 2.0 * (s.y - s.z),
        -2.0 * (s.y - s.z) - 2.0 * (s.x - s.z),
    )
    .component_mul(&s)
}

/// Box where fresh primitives are injected whenever a new frame enters the window.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InflowRegion {
    pub region: Aabb,
    pub injections_per_frame: usize,
    pub init_opacity_logit: f64,
    pub init_log_scale: f64,
    pub init_emission: f64,
}

impl InflowRegion {
    /// Faint small puffs: opacity 0.1, scale = smallest extent / 20, emission 1.
    pub fn with_defaults(region: Aabb, injections_per_frame: usize) -> Self {
        let smallest = region.extent().min();
        InflowRegion {
            region,
            injections_per_frame,
            init_opacity_logit: logit(0.1),
            init_log_scale: (smallest / 20.0).ln(),
            init_emission: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.injections_per_frame > 0 {
            self.region.validate()?;
        }
        Ok(())
    }

    /// The primitives injected when `frame` enters the window.
    pub fn injected(&self, seed: u64, frame: usize) -> Vec<GaussianPrimitive> {
        let mut rng = substream(seed, "inflow", frame as u64);
        (0..self.injections_per_frame)
            .map(|_| GaussianPrimitive {
                position: self.region.sample(&mut rng),
                log_scales: Vec3::repeat(self.init_log_scale),
                rotation: IDENTITY_QUAT,
                opacity_logit: self.init_opacity_logit,
                emission: self.init_emission,
            })
            .collect()
    }
}

/// Appends `injections_per_frame` primitives drawn uniformly in the region.
pub fn inject_inflow(cloud: &GaussianCloud, region: &InflowRegion, seed: u64) -> Result<GaussianCloud> {
    region.validate()?;
    let mut out = cloud.clone();
    out.primitives.extend(region.injected(seed, cloud.frame_index));
    Ok(out)
}

/// Density `sum alpha exp(-m/2)` truncated at Mahalanobis distance 3.
pub struct DensityEvaluator {
    items: Vec<(Vec3, Mat3, f64, f64)>,
}

impl DensityEvaluator {
    pub fn new(cloud: &GaussianCloud) -> Self {
        let items = cloud
            .primitives
            .iter()
            .filter_map(|g| {
                let cov = g.covariance();
                let inv = cov.try_inverse()?;
                let reach = 3.0 * cov.diagonal().max().sqrt();
                Some((g.position, inv, g.opacity(), reach))
            })
            .collect();
        DensityEvaluator { items }
    }

    pub fn density(&self, x: &Vec3) -> f64 {
        let mut d = 0.0;
        for (mu, inv, alpha, reach) in &self.items {
            let r = x - mu;
            if r.amax() > *reach {
                continue;
            }
            let m = (r.transpose() * inv * r)[(0, 0)];
            if m <= 9.0 {
                d += alpha * (-0.5 * m).exp();
            }
        }
        d
    }
}
