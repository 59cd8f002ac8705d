//! Lagrangian transport `d mu/dt = v(mu, t)` of primitive centers with explicit
//! Runge-Kutta schemes. Covariances are not deformed by the flow.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dfk_field::{DfkField, TimeVaryingField, VelocityField};
use crate::error::{Error, Result};
use crate::gaussians::{GaussianCloud, GaussianPrimitive, InflowRegion};
use crate::geometry::Vec3;
use crate::io::{read_file, write_file, ByteReader, ByteWriter};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "RK4")]
    Rk4,
    Midpoint,
    Euler,
}

impl Scheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk4" => Ok(Scheme::Rk4),
            "midpoint" => Ok(Scheme::Midpoint),
            "euler" => Ok(Scheme::Euler),
            _ => Err(Error::domain(format!("unknown integration scheme {s:?}"))),
        }
    }

    /// Butcher tableau `(a, b)`; `a[s]` holds the coefficients of stage `s`.
    fn tableau(self) -> (&'static [&'static [f64]], &'static [f64]) {
        match self {
            Scheme::Euler => (&[&[]], &[1.0]),
            Scheme::Midpoint => (&[&[], &[0.5]], &[0.0, 1.0]),
            Scheme::Rk4 => (
                &[&[], &[0.5], &[0.0, 0.5], &[0.0, 0.0, 1.0]],
                &[1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 6.0],
            ),
        }
    }

    pub fn order(self) -> usize {
        match self {
            Scheme::Euler => 1,
            Scheme::Midpoint => 2,
            Scheme::Rk4 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdvectionConfig {
    pub substeps_per_frame: usize,
    pub scheme: Scheme,
}

impl Default for AdvectionConfig {
    fn default() -> Self {
        AdvectionConfig { substeps_per_frame: 4, scheme: Scheme::Rk4 }
    }
}

impl AdvectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.substeps_per_frame == 0 {
            return Err(Error::domain("substeps_per_frame must be at least 1"));
        }
        Ok(())
    }
}

#[inline]
fn rk_step<F: VelocityField + ?Sized>(field: &F, x: &Vec3, h: f64, scheme: Scheme, mut stages: Option<&mut Vec<Vec3>>) -> Vec3 {
    let (a, b) = scheme.tableau();
    let mut k = [Vec3::zeros(); 4];
    let mut out = *x;
    for s in 0..b.len() {
        let mut y = *x;
        for (j, coef) in a[s].iter().enumerate() {
            if *coef != 0.0 {
                y += k[j] * (h * coef);
            }
        }
        if let Some(st) = stages.as_deref_mut() {
            st.push(y);
        }
        k[s] = field.velocity(&y);
    }
    for s in 0..b.len() {
        if b[s] != 0.0 {
            out += k[s] * (h * b[s]);
        }
    }
    out
}

fn check_dt(dt: f64) -> Result<()> {
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::domain(format!("time step must be positive, got {dt}")));
    }
    Ok(())
}

fn check_finite(out: &[Vec3]) -> Result<()> {
    if let Some(i) = out.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(Error::NonFinite(format!("advection produced a non-finite position for primitive {i}")));
    }
    Ok(())
}

/// Integrates every position through one frame of length `dt`, field held fixed.
pub fn advect_frame<F: VelocityField + ?Sized>(positions: &[Vec3], field: &F, dt: f64, cfg: &AdvectionConfig) -> Result<Vec<Vec3>> {
    check_dt(dt)?;
    cfg.validate()?;
    let h = dt / cfg.substeps_per_frame as f64;
    let out: Vec<Vec3> = positions
        .iter()
        .map(|p| {
            let mut x = *p;
            for _ in 0..cfg.substeps_per_frame {
                x = rk_step(field, &x, h, cfg.scheme, None);
            }
            x
        })
        .collect();
    check_finite(&out)?;
    Ok(out)
}

/// Stage positions of one frame step, kept for the reverse pass.
pub(crate) struct FrameTape {
    /// `[primitive][substep * stages + stage]`.
    stages: Vec<Vec<Vec3>>,
    h: f64,
    scheme: Scheme,
    substeps: usize,
}

pub(crate) fn advect_frame_recorded(positions: &[Vec3], field: &DfkField, dt: f64, cfg: &AdvectionConfig) -> Result<(Vec<Vec3>, FrameTape)> {
    check_dt(dt)?;
    cfg.validate()?;
    let h = dt / cfg.substeps_per_frame as f64;
    let nst = cfg.scheme.tableau().1.len();
    let mut stages = Vec::with_capacity(positions.len());
    let out: Vec<Vec3> = positions
        .iter()
        .map(|p| {
            let mut rec = Vec::with_capacity(cfg.substeps_per_frame * nst);
            let mut x = *p;
            for _ in 0..cfg.substeps_per_frame {
                x = rk_step(field, &x, h, cfg.scheme, Some(&mut rec));
            }
            stages.push(rec);
            x
        })
        .collect();
    check_finite(&out)?;
    Ok((out, FrameTape { stages, h, scheme: cfg.scheme, substeps: cfg.substeps_per_frame }))
}

/// Discrete adjoint of [`advect_frame_recorded`]: maps `dL/d(out)` to `dL/d(in)`,
/// accumulating `dL/d(weights)` into `grad_weights` when given.
pub(crate) fn advect_frame_backward(
    tape: &FrameTape,
    field: &DfkField,
    grad_out: &[Vec3],
    mut grad_weights: Option<&mut [Vec3]>,
) -> Vec<Vec3> {
    let (a, b) = tape.scheme.tableau();
    let nst = b.len();
    let layout = &field.layout;
    let mut cand = Vec::new();
    let mut samples = Vec::new();
    let mut grad_in = Vec::with_capacity(grad_out.len());
    for (p, g_out) in grad_out.iter().enumerate() {
        let mut gx = *g_out;
        for sub in (0..tape.substeps).rev() {
            let ys = &tape.stages[p][sub * nst..(sub + 1) * nst];
            let mut gk = [Vec3::zeros(); 4];
            for s in 0..nst {
                gk[s] = gx * (tape.h * b[s]);
            }
            let mut g_prev = gx;
            for s in (0..nst).rev() {
                if gk[s] == Vec3::zeros() {
                    continue;
                }
                layout.samples_at(&ys[s], &mut cand, &mut samples);
                let mut gy = Vec3::zeros();
                for (i, smp) in samples.iter() {
                    let w = &field.weights[*i as usize];
                    gy += smp.jacobian_transpose_apply(w, &gk[s]);
                    if let Some(gw) = grad_weights.as_deref_mut() {
                        gw[*i as usize] += smp.apply(&gk[s]);
                    }
                }
                g_prev += gy;
                for (j, coef) in a[s].iter().enumerate() {
                    if *coef != 0.0 {
                        gk[j] += gy * (tape.h * coef);
                    }
                }
            }
            gx = g_prev;
        }
        grad_in.push(gx);
    }
    grad_in
}

/// Per-frame center snapshots. Snapshot `k` belongs to frame `start_frame + k`;
/// primitives injected later only appear in later snapshots.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub start_frame: usize,
    pub snapshots: Vec<Vec<Vec3>>,
    /// Attributes for every primitive in the last snapshot; positions are those at
    /// the primitive's first appearance.
    pub primitives: Vec<GaussianPrimitive>,
}

impl Trajectory {
    pub fn cloud_at(&self, k: usize) -> GaussianCloud {
        let pos = &self.snapshots[k];
        GaussianCloud::new(
            self.primitives[..pos.len()].iter().zip(pos).map(|(g, p)| GaussianPrimitive { position: *p, ..*g }).collect(),
            self.start_frame + k,
        )
    }

    pub fn final_cloud(&self) -> GaussianCloud {
        self.cloud_at(self.snapshots.len() - 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(b"TRJ1");
        w.u64(self.start_frame as u64);
        w.u64(self.snapshots.len() as u64);
        for snap in &self.snapshots {
            w.u64(snap.len() as u64);
            for p in snap {
                w.f64s(p.iter().copied());
            }
        }
        write_file(path, &w.buf)
    }

    /// Loads snapshots only; attributes are not part of the format.
    pub fn load_snapshots(path: &Path) -> Result<(usize, Vec<Vec<Vec3>>)> {
        let data = read_file(path)?;
        let mut r = ByteReader::new(&data, b"TRJ1", "TRJ1")?;
        let start = r.usize()?;
        let n = r.usize()?;
        let mut snaps = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let m = r.usize()?;
            let v = r.f64s(3 * m)?;
            snaps.push(v.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect());
        }
        r.finish()?;
        Ok((start, snaps))
    }
}

/// Chains [`advect_frame`] over `n_frames` frames starting at `start_frame`,
/// injecting inflow primitives at each new frame boundary.
pub fn rollout(
    anchor: &GaussianCloud,
    field: &TimeVaryingField,
    start_frame: usize,
    n_frames: usize,
    cfg: &AdvectionConfig,
    inflow: Option<(&InflowRegion, u64)>,
) -> Result<Trajectory> {
    if start_frame + n_frames > field.len() {
        return Err(Error::domain(format!(
            "rollout over frames {start_frame}..{} needs {} field frames, have {}",
            start_frame + n_frames,
            start_frame + n_frames,
            field.len()
        )));
    }
    let frames: Vec<&dyn VelocityField> = field.frames[start_frame..start_frame + n_frames].iter().map(|f| f as &dyn VelocityField).collect();
    rollout_with(anchor, &frames, field.frame_dt, start_frame, cfg, inflow)
}

/// [`rollout`] over an arbitrary sequence of per-frame velocity fields;
/// `frames[k]` drives frame `start_frame + k`.
pub fn rollout_with(
    anchor: &GaussianCloud,
    frames: &[&dyn VelocityField],
    frame_dt: f64,
    start_frame: usize,
    cfg: &AdvectionConfig,
    inflow: Option<(&InflowRegion, u64)>,
) -> Result<Trajectory> {
    if let Some((region, _)) = inflow {
        region.validate()?;
    }
    let mut primitives = anchor.primitives.clone();
    let mut snapshots = vec![anchor.positions()];
    for (k, field) in frames.iter().enumerate() {
        let f = start_frame + k;
        let mut next = advect_frame(snapshots.last().unwrap(), *field, frame_dt, cfg).map_err(|e| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("frame {f}: {m}")),
            other => other,
        })?;
        if let Some((region, seed)) = inflow {
            let fresh = region.injected(seed, f + 1);
            next.extend(fresh.iter().map(|g| g.position));
            primitives.extend(fresh);
        }
        snapshots.push(next);
    }
    Ok(Trajectory { start_frame, snapshots, primitives })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfk_field::{AnalyticField, NodeLayout};
    use crate::geometry::{Aabb, Mat3};
    use crate::rbf_kernel::KernelNode;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_tv(seed: u64, frames: usize) -> TimeVaryingField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Arc::new(NodeLayout::lattice(Aabb::unit(), [4, 4, 4], 1.5).unwrap());
        let mut tv = TimeVaryingField::zeros(layout, frames, 1.0).unwrap();
        for f in tv.frames.iter_mut() {
            for w in f.weights.iter_mut() {
                *w = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 2e-4;
            }
        }
        tv
    }

    fn cloud(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianCloud::new(
            (0..n)
                .map(|_| GaussianPrimitive::isotropic(Aabb::new([0.3; 3], [0.7; 3]).sample(&mut rng), 0.05, 0.5, 1.0))
                .collect(),
            0,
        )
    }

    #[test]
    fn zero_field_keeps_positions() {
        let tv = TimeVaryingField::zeros(random_tv(1, 1).layout().clone(), 1, 1.0).unwrap();
        let p = cloud(2, 10).positions();
        assert_eq!(advect_frame(&p, &tv.frames[0], 0.5, &AdvectionConfig::default()).unwrap(), p);
    }

    #[test]
    fn rejects_bad_step() {
        let p = vec![Vec3::zeros()];
        assert!(advect_frame(&p, &AnalyticField::zero(), 0.0, &AdvectionConfig::default()).is_err());
        let cfg = AdvectionConfig { substeps_per_frame: 0, scheme: Scheme::Rk4 };
        assert!(advect_frame(&p, &AnalyticField::zero(), 0.1, &cfg).is_err());
    }

    #[test]
    fn non_finite_positions_are_reported() {
        struct Blowup;
        impl VelocityField for Blowup {
            fn velocity(&self, x: &Vec3) -> Vec3 {
                if x.x > 0.5 { Vec3::repeat(f64::INFINITY) } else { Vec3::zeros() }
            }
            fn jacobian(&self, _: &Vec3) -> Mat3 {
                Mat3::zeros()
            }
        }
        let p = vec![Vec3::zeros(), Vec3::repeat(1.0)];
        let err = advect_frame(&p, &Blowup, 0.1, &AdvectionConfig::default()).unwrap_err();
        assert!(err.is_numerical());
        assert!(err.to_string().contains("primitive 1"));
    }

    #[test]
    fn near_uniform_translation() {
        // One very wide node: near its center psi ~ a(0) I, so v ~ const.
        let layout = Arc::new(NodeLayout::new(Aabb::new([-1.0; 3], [1.0; 3]), vec![KernelNode::new(Vec3::zeros(), 1000.0).unwrap()]).unwrap());
        let w = Vec3::new(0.3, -0.2, 0.1) * (1000.0f64.powi(2) / 112.0);
        let f = DfkField::new(layout, vec![w]).unwrap();
        let u = f.evaluate(&Vec3::zeros());
        let p = vec![Vec3::new(1e-3, 2e-3, -1e-3)];
        let out = advect_frame(&p, &f, 0.01, &AdvectionConfig::default()).unwrap();
        let disp = out[0] - p[0];
        assert_relative_eq!(disp, u * 0.01, max_relative = 1e-6);
    }

    fn self_convergence(scheme: Scheme) -> f64 {
        let abc = AnalyticField::abc(1.0, 1.0, 1.0, 1.0);
        let x0 = vec![Vec3::new(0.3, 0.7, -0.2), Vec3::new(1.1, 0.4, 0.9)];
        let run = |n: usize| advect_frame(&x0, &abc, 0.1, &AdvectionConfig { substeps_per_frame: n, scheme }).unwrap();
        let reference = run(1024);
        let err = |n: usize| run(n).iter().zip(&reference).map(|(a, b)| (a - b).norm()).sum::<f64>();
        (err(1) / err(2)).log2()
    }

    #[test]
    fn convergence_orders() {
        let rk4 = self_convergence(Scheme::Rk4);
        assert!((rk4 - 4.0).abs() <= 0.3, "rk4 order {rk4}");
        let mid = self_convergence(Scheme::Midpoint);
        assert!((mid - 2.0).abs() <= 0.3, "midpoint order {mid}");
        let eul = self_convergence(Scheme::Euler);
        assert!((eul - 1.0).abs() <= 0.3, "euler order {eul}");
    }

    #[test]
    fn rollout_edge_cases() {
        let tv = random_tv(3, 2);
        let c = cloud(4, 6);
        let cfg = AdvectionConfig::default();
        let t0 = rollout(&c, &tv, 0, 0, &cfg, None).unwrap();
        assert_eq!(t0.snapshots, vec![c.positions()]);
        let full = rollout(&c, &tv, 0, 2, &cfg, None).unwrap();
        let first = rollout(&c, &tv, 0, 1, &cfg, None).unwrap();
        let second = rollout(&first.final_cloud(), &tv, 1, 1, &cfg, None).unwrap();
        assert_eq!(full.snapshots[2], second.snapshots[1]);
        assert!(rollout(&c, &tv, 1, 2, &cfg, None).is_err());
    }

    #[test]
    fn rollout_with_inflow_counts() {
        let layout = random_tv(5, 1).layout().clone();
        let tv = TimeVaryingField::zeros(layout, 2, 1.0).unwrap();
        let c = cloud(6, 5);
        let region = InflowRegion::with_defaults(Aabb::new([0.4, 0.4, 0.0], [0.6, 0.6, 0.1]), 3);
        let t = rollout(&c, &tv, 0, 2, &AdvectionConfig::default(), Some((&region, 9))).unwrap();
        let last = t.final_cloud();
        assert_eq!(last.len(), 11);
        assert_eq!(&last.positions()[..5], &c.positions()[..]);
        let again = rollout(&c, &tv, 0, 2, &AdvectionConfig::default(), Some((&region, 9))).unwrap();
        assert_eq!(t, again);
    }

    #[test]
    fn backward_matches_fd() {
        let tv = random_tv(7, 1);
        let field = &tv.frames[0];
        let p = cloud(8, 4).positions();
        let cfg = AdvectionConfig::default();
        let g_out: Vec<Vec3> = (0..4).map(|i| Vec3::new(0.3 + i as f64, -0.7, 0.2)).collect();
        let obj = |pos: &[Vec3], f: &DfkField| {
            advect_frame(pos, f, 1.0, &cfg).unwrap().iter().zip(&g_out).map(|(a, b)| a.dot(b)).sum::<f64>()
        };
        let (_, tape) = advect_frame_recorded(&p, field, 1.0, &cfg).unwrap();
        let mut gw = vec![Vec3::zeros(); field.weights.len()];
        let gp = advect_frame_backward(&tape, field, &g_out, Some(&mut gw));
        let h = 1e-6;
        for i in 0..p.len() {
            for k in 0..3 {
                let mut a = p.clone();
                a[i][k] += h;
                let mut b = p.clone();
                b[i][k] -= h;
                let fd = (obj(&a, field) - obj(&b, field)) / (2.0 * h);
                assert_relative_eq!(gp[i][k], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
        let hw = 1e-9;
        for n in (0..field.weights.len()).step_by(5) {
            for k in 0..3 {
                let mut a = field.clone();
                a.weights[n][k] += hw;
                let mut b = field.clone();
                b.weights[n][k] -= hw;
                let fd = (obj(&p, &a) - obj(&p, &b)) / (2.0 * hw);
                assert!((gw[n][k] - fd).abs() <= 1e-4 * fd.abs().max(1.0), "{} vs {fd}", gw[n][k]);
            }
        }
    }

    #[test]
    fn trj1_roundtrip() {
        let tv = random_tv(9, 2);
        let t = rollout(&cloud(10, 3), &tv, 0, 2, &AdvectionConfig::default(), None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.trj");
        t.save(&p).unwrap();
        let (start, snaps) = Trajectory::load_snapshots(&p).unwrap();
        assert_eq!(start, 0);
        assert_eq!(snaps, t.snapshots);
    }
}
