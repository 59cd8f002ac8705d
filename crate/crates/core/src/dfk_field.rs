//! Velocity fields `v(x) = sum_i psi_i(x) w_i` over a fixed node layout, the
//! per-frame time-varying stack, analytic reference flows, and central-difference
//! derivative operators shared by losses and metrics.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::io::{read_file, write_file, write_json, ByteReader, ByteWriter};
use crate::rbf_kernel::{KernelNode, KernelSample};

/// Anything that can be sampled as a velocity field.
pub trait VelocityField {
    fn velocity(&self, x: &Vec3) -> Vec3;

    /// Analytic spatial Jacobian `J[i][k] = dv_i/dx_k`.
    fn jacobian(&self, x: &Vec3) -> Mat3;
}

/// Uniform grid over node centers. Cell size equals the largest support, so a
/// query needs at most the 27 cells around the query point.
#[derive(Clone, Debug)]
struct NeighborGrid {
    origin: Vec3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    indices: Vec<u32>,
}

impl NeighborGrid {
    fn build(nodes: &[KernelNode]) -> Self {
        let max_h = nodes.iter().map(|n| n.support).fold(0.0, f64::max);
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for n in nodes {
            lo = lo.inf(&n.center);
            hi = hi.sup(&n.center);
        }
        if nodes.is_empty() {
            lo = Vec3::zeros();
            hi = Vec3::zeros();
        }
        let cell = if max_h > 0.0 { max_h } else { 1.0 };
        let mut dims = [1usize; 3];
        for k in 0..3 {
            dims[k] = ((hi[k] - lo[k]) / cell).floor() as usize + 1;
        }
        let ncell = dims[0] * dims[1] * dims[2];
        let cell_of = |c: &Vec3| {
            let mut idx = [0usize; 3];
            for k in 0..3 {
                idx[k] = (((c[k] - lo[k]) / cell).floor() as usize).min(dims[k] - 1);
            }
            idx[0] + dims[0] * (idx[1] + dims[1] * idx[2])
        };
        let mut counts = vec![0u32; ncell + 1];
        for n in nodes {
            counts[cell_of(&n.center) + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut indices = vec![0u32; nodes.len()];
        // Ascending node order inside every cell.
        for (i, n) in nodes.iter().enumerate() {
            let c = cell_of(&n.center);
            indices[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        NeighborGrid { origin: lo, cell, dims, starts: counts, indices }
    }

    /// Node indices whose cell lies within `reach` of `x`, ascending.
    fn candidates(&self, x: &Vec3, reach: f64, out: &mut Vec<u32>) {
        out.clear();
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for k in 0..3 {
            let a = ((x[k] - reach - self.origin[k]) / self.cell).floor();
            let b = ((x[k] + reach - self.origin[k]) / self.cell).floor();
            if b < 0.0 || a > (self.dims[k] - 1) as f64 || a.is_nan() || b.is_nan() {
                return;
            }
            lo[k] = a.max(0.0) as usize;
            hi[k] = (b as usize).min(self.dims[k] - 1);
        }
        for iz in lo[2]..=hi[2] {
            for iy in lo[1]..=hi[1] {
                for ix in lo[0]..=hi[0] {
                    let c = ix + self.dims[0] * (iy + self.dims[1] * iz);
                    let (s, e) = (self.starts[c] as usize, self.starts[c + 1] as usize);
                    out.extend_from_slice(&self.indices[s..e]);
                }
            }
        }
        out.sort_unstable();
    }
}

/// Kernel nodes shared by every frame of a time-varying field.
#[derive(Clone, Debug)]
pub struct NodeLayout {
    pub domain: Aabb,
    /// Lattice resolution, or zeros for a free-form layout.
    pub resolution: [usize; 3],
    /// Support-to-spacing ratio, or zero for a free-form layout.
    pub overlap: f64,
    nodes: Vec<KernelNode>,
    max_support: f64,
    grid: NeighborGrid,
}

impl NodeLayout {
    pub fn new(domain: Aabb, nodes: Vec<KernelNode>) -> Result<Self> {
        Self::with_lattice_info(domain, nodes, [0; 3], 0.0)
    }

    fn with_lattice_info(domain: Aabb, nodes: Vec<KernelNode>, resolution: [usize; 3], overlap: f64) -> Result<Self> {
        domain.validate()?;
        for (i, n) in nodes.iter().enumerate() {
            n.validate()?;
            if !domain.contains(&n.center) {
                return Err(Error::domain(format!("node {i} center lies outside the domain")));
            }
        }
        let max_support = nodes.iter().map(|n| n.support).fold(0.0, f64::max);
        let grid = NeighborGrid::build(&nodes);
        Ok(NodeLayout { domain, resolution, overlap, nodes, max_support, grid })
    }

    /// Regular lattice filling `domain`, support = `overlap` x largest lattice spacing.
    pub fn lattice(domain: Aabb, resolution: [usize; 3], overlap: f64) -> Result<Self> {
        domain.validate()?;
        if resolution.iter().any(|&r| r < 2) {
            return Err(Error::domain("lattice resolution must be at least 2 along every axis"));
        }
        if !(overlap.is_finite() && overlap >= 1.0) {
            return Err(Error::domain(format!("overlap must be >= 1, got {overlap}")));
        }
        let ext = domain.extent();
        let spacing = Vec3::new(
            ext.x / (resolution[0] - 1) as f64,
            ext.y / (resolution[1] - 1) as f64,
            ext.z / (resolution[2] - 1) as f64,
        );
        let h = overlap * spacing.max();
        let mut nodes = Vec::with_capacity(resolution.iter().product());
        for iz in 0..resolution[2] {
            for iy in 0..resolution[1] {
                for ix in 0..resolution[0] {
                    let mut c = domain.lo();
                    for (k, i) in [ix, iy, iz].into_iter().enumerate() {
                        // Pin the last node to the upper face exactly.
                        c[k] = if i + 1 == resolution[k] { domain.max[k] } else { domain.min[k] + i as f64 * spacing[k] };
                    }
                    nodes.push(KernelNode { center: c, support: h });
                }
            }
        }
        Self::with_lattice_info(domain, nodes, resolution, overlap)
    }

    pub fn nodes(&self) -> &[KernelNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn max_support(&self) -> f64 {
        self.max_support
    }

    /// Nonzero kernel samples at `x`, ascending node index.
    pub(crate) fn samples_at(&self, x: &Vec3, scratch: &mut Vec<u32>, out: &mut Vec<(u32, KernelSample)>) {
        out.clear();
        self.grid.candidates(x, self.max_support, scratch);
        for &i in scratch.iter() {
            let n = &self.nodes[i as usize];
            if let Some(s) = KernelSample::at(x, &n.center, n.support) {
                out.push((i, s));
            }
        }
    }
}

/// One frame's divergence-free velocity field.
#[derive(Clone, Debug)]
pub struct DfkField {
    pub layout: Arc<NodeLayout>,
    pub weights: Vec<Vec3>,
}

thread_local! {
    static SCRATCH: std::cell::RefCell<(Vec<u32>, Vec<(u32, KernelSample)>)> =
        const { std::cell::RefCell::new((Vec::new(), Vec::new())) };
}

impl DfkField {
    pub fn new(layout: Arc<NodeLayout>, weights: Vec<Vec3>) -> Result<Self> {
        if weights.len() != layout.len() {
            return Err(Error::domain(format!(
                "{} weights for {} nodes",
                weights.len(),
                layout.len()
            )));
        }
        Ok(DfkField { layout, weights })
    }

    pub fn zeros(layout: Arc<NodeLayout>) -> Self {
        let n = layout.len();
        DfkField { layout, weights: vec![Vec3::zeros(); n] }
    }

    /// Lattice-initialized field with all weights zero.
    pub fn lattice_init(domain: Aabb, resolution: [usize; 3], overlap: f64) -> Result<Self> {
        Ok(Self::zeros(Arc::new(NodeLayout::lattice(domain, resolution, overlap)?)))
    }

    pub fn evaluate(&self, x: &Vec3) -> Vec3 {
        SCRATCH.with(|s| {
            let (cand, samples) = &mut *s.borrow_mut();
            self.layout.samples_at(x, cand, samples);
            let mut v = Vec3::zeros();
            for (i, s) in samples.iter() {
                v += s.apply(&self.weights[*i as usize]);
            }
            v
        })
    }

    /// All-nodes sum without the neighbor grid.
    pub fn evaluate_brute(&self, x: &Vec3) -> Vec3 {
        let mut v = Vec3::zeros();
        for (n, w) in self.layout.nodes().iter().zip(&self.weights) {
            if let Some(s) = KernelSample::at(x, &n.center, n.support) {
                v += s.apply(w);
            }
        }
        v
    }

    pub fn scaled(&self, factor: f64) -> DfkField {
        DfkField { layout: self.layout.clone(), weights: self.weights.iter().map(|w| w * factor).collect() }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new(b"DFK1");
        let l = &self.layout;
        w.u64(l.len() as u64);
        w.f64s(l.domain.min);
        w.f64s(l.domain.max);
        for r in l.resolution {
            w.u64(r as u64);
        }
        w.f64(l.overlap);
        for n in l.nodes() {
            w.f64s(n.center.iter().copied());
        }
        for n in l.nodes() {
            w.f64(n.support);
        }
        for wt in &self.weights {
            w.f64s(wt.iter().copied());
        }
        write_file(path, &w.buf)?;
        write_json(&path.with_extension("json"), &self.header())
    }

    pub fn header(&self) -> DfkHeader {
        DfkHeader {
            format: "DFK1".into(),
            node_count: self.layout.len(),
            domain: self.layout.domain,
            resolution: self.layout.resolution,
            overlap: self.layout.overlap,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, b"DFK1", "DFK1")?;
        let n = r.usize()?;
        let min = [r.f64()?, r.f64()?, r.f64()?];
        let max = [r.f64()?, r.f64()?, r.f64()?];
        let resolution = [r.usize()?, r.usize()?, r.usize()?];
        let overlap = r.f64()?;
        let centers = r.f64s(3 * n)?;
        let supports = r.f64s(n)?;
        let weights = r.f64s(3 * n)?;
        r.finish()?;
        let nodes = (0..n)
            .map(|i| KernelNode { center: Vec3::new(centers[3 * i], centers[3 * i + 1], centers[3 * i + 2]), support: supports[i] })
            .collect();
        let layout = NodeLayout::with_lattice_info(Aabb::new(min, max), nodes, resolution, overlap)
            .map_err(|e| Error::format("DFK1", e.to_string()))?;
        let weights = (0..n).map(|i| Vec3::new(weights[3 * i], weights[3 * i + 1], weights[3 * i + 2])).collect();
        DfkField::new(Arc::new(layout), weights)
    }
}

/// JSON sidecar written next to every DFK1 blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfkHeader {
    pub format: String,
    pub node_count: usize,
    pub domain: Aabb,
    pub resolution: [usize; 3],
    pub overlap: f64,
}

impl VelocityField for DfkField {
    fn velocity(&self, x: &Vec3) -> Vec3 {
        self.evaluate(x)
    }

    fn jacobian(&self, x: &Vec3) -> Mat3 {
        SCRATCH.with(|s| {
            let (cand, samples) = &mut *s.borrow_mut();
            self.layout.samples_at(x, cand, samples);
            let mut j = Mat3::zeros();
            for (i, s) in samples.iter() {
                j += s.jacobian(&self.weights[*i as usize]);
            }
            j
        })
    }
}

/// Piecewise-constant-in-time stack of per-frame fields over a shared layout.
#[derive(Clone, Debug)]
pub struct TimeVaryingField {
    pub frames: Vec<DfkField>,
    pub frame_dt: f64,
}

impl TimeVaryingField {
    pub fn new(frames: Vec<DfkField>, frame_dt: f64) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::domain("time-varying field needs at least one frame"));
        }
        if !(frame_dt.is_finite() && frame_dt > 0.0) {
            return Err(Error::domain("frame_dt must be positive"));
        }
        let layout = &frames[0].layout;
        if frames.iter().any(|f| !Arc::ptr_eq(&f.layout, layout) && f.layout.nodes() != layout.nodes()) {
            return Err(Error::domain("all frames must share one node layout"));
        }
        Ok(TimeVaryingField { frames, frame_dt })
    }

    pub fn zeros(layout: Arc<NodeLayout>, n_frames: usize, frame_dt: f64) -> Result<Self> {
        Self::new((0..n_frames).map(|_| DfkField::zeros(layout.clone())).collect(), frame_dt)
    }

    pub fn layout(&self) -> &Arc<NodeLayout> {
        &self.frames[0].layout
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_index_at(&self, t: f64) -> Result<usize> {
        let end = self.frames.len() as f64 * self.frame_dt;
        if !(t.is_finite() && t >= 0.0 && t <= end) {
            return Err(Error::domain(format!("time {t} outside [0, {end}]")));
        }
        Ok(((t / self.frame_dt).floor() as usize).min(self.frames.len() - 1))
    }

    pub fn field_at_time(&self, t: f64) -> Result<&DfkField> {
        Ok(&self.frames[self.frame_index_at(t)?])
    }

    /// Writes `field_000.dfk`, `field_001.dfk`, ... into `dir`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        for (i, f) in self.frames.iter().enumerate() {
            f.save(&dir.join(format!("field_{i:03}.dfk")))?;
        }
        write_json(&dir.join("fields.json"), &serde_json::json!({ "frames": self.frames.len(), "frame_dt": self.frame_dt }))
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = crate::io::read_json(&dir.join("fields.json"))?;
        let n = meta["frames"].as_u64().ok_or_else(|| Error::format("DFK1", "fields.json lacks frames"))? as usize;
        let dt = meta["frame_dt"].as_f64().ok_or_else(|| Error::format("DFK1", "fields.json lacks frame_dt"))?;
        let mut frames: Vec<DfkField> = Vec::with_capacity(n);
        for i in 0..n {
            let mut f = DfkField::load(&dir.join(format!("field_{i:03}.dfk")))?;
            if let Some(first) = frames.first() {
                if first.layout.nodes() == f.layout.nodes() {
                    f.layout = first.layout.clone();
                }
            }
            frames.push(f);
        }
        Self::new(frames, dt)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnalyticKind {
    #[serde(rename = "ABC")]
    Abc,
    TaylorGreen,
    ZeroField,
}

/// Closed-form divergence-free reference flows.
///
/// ABC: `(A sin kz + C cos ky, B sin kx + A cos kz, C sin ky + B cos kx)`.
/// Taylor-Green: `A (sin kx cos ky cos kz, -cos kx sin ky cos kz, 0)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticField {
    pub kind: AnalyticKind,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub frequency: f64,
}

impl AnalyticField {
    pub fn abc(a: f64, b: f64, c: f64, frequency: f64) -> Self {
        AnalyticField { kind: AnalyticKind::Abc, a, b, c, frequency }
    }

    pub fn taylor_green(amplitude: f64, frequency: f64) -> Self {
        AnalyticField { kind: AnalyticKind::TaylorGreen, a: amplitude, b: 0.0, c: 0.0, frequency }
    }

    pub fn zero() -> Self {
        AnalyticField { kind: AnalyticKind::ZeroField, a: 0.0, b: 0.0, c: 0.0, frequency: 1.0 }
    }
}

impl VelocityField for AnalyticField {
    fn velocity(&self, p: &Vec3) -> Vec3 {
        let k = self.frequency;
        let (x, y, z) = (k * p.x, k * p.y, k * p.z);
        match self.kind {
            AnalyticKind::Abc => Vec3::new(
                self.a * z.sin() + self.c * y.cos(),
                self.b * x.sin() + self.a * z.cos(),
                self.c * y.sin() + self.b * x.cos(),
            ),
            AnalyticKind::TaylorGreen => Vec3::new(
                self.a * x.sin() * y.cos() * z.cos(),
                -self.a * x.cos() * y.sin() * z.cos(),
                0.0,
            ),
            AnalyticKind::ZeroField => Vec3::zeros(),
        }
    }

    fn jacobian(&self, p: &Vec3) -> Mat3 {
        let k = self.frequency;
        let (x, y, z) = (k * p.x, k * p.y, k * p.z);
        match self.kind {
            AnalyticKind::Abc => Mat3::new(
                0.0, -self.c * y.sin(), self.a * z.cos(),
                self.b * x.cos(), 0.0, -self.a * z.sin(),
                -self.b * x.sin(), self.c * y.cos(), 0.0,
            ) * k,
            AnalyticKind::TaylorGreen => {
                let (sx, cx, sy, cy, sz, cz) = (x.sin(), x.cos(), y.sin(), y.cos(), z.sin(), z.cos());
                Mat3::new(
                    cx * cy * cz, -sx * sy * cz, -sx * cy * sz,
                    sx * sy * cz, -cx * cy * cz, cx * sy * sz,
                    0.0, 0.0, 0.0,
                ) * (self.a * k)
            }
            AnalyticKind::ZeroField => Mat3::zeros(),
        }
    }
}

impl<F: VelocityField + ?Sized> VelocityField for &F {
    fn velocity(&self, x: &Vec3) -> Vec3 {
        (**self).velocity(x)
    }

    fn jacobian(&self, x: &Vec3) -> Mat3 {
        (**self).jacobian(x)
    }
}

fn check_step(step: f64) -> Result<()> {
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::domain(format!("finite-difference step must be positive, got {step}")));
    }
    Ok(())
}

/// Central-difference Jacobian from six evaluations.
pub fn jacobian_fd<F: VelocityField + ?Sized>(field: &F, x: &Vec3, step: f64) -> Result<Mat3> {
    check_step(step)?;
    let mut j = Mat3::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = step;
        let col = (field.velocity(&(x + e)) - field.velocity(&(x - e))) / (2.0 * step);
        j.set_column(k, &col);
    }
    Ok(j)
}

/// Curl read off a Jacobian `J[i][k] = dv_i/dx_k`.
#[inline]
pub fn curl_of(j: &Mat3) -> Vec3 {
    Vec3::new(j[(2, 1)] - j[(1, 2)], j[(0, 2)] - j[(2, 0)], j[(1, 0)] - j[(0, 1)])
}

pub fn vorticity_fd<F: VelocityField + ?Sized>(field: &F, x: &Vec3, step: f64) -> Result<Vec3> {
    Ok(curl_of(&jacobian_fd(field, x, step)?))
}

pub fn divergence_fd<F: VelocityField + ?Sized>(field: &F, x: &Vec3, step: f64) -> Result<f64> {
    Ok(jacobian_fd(field, x, step)?.trace())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(seed: u64) -> DfkField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = DfkField::lattice_init(Aabb::unit(), [5, 5, 5], 1.5).unwrap();
        for w in f.weights.iter_mut() {
            *w = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 1e-3;
        }
        f
    }

    #[test]
    fn lattice_counts_and_support() {
        let f = DfkField::lattice_init(Aabb::unit(), [3, 3, 3], 1.5).unwrap();
        assert_eq!(f.layout.len(), 27);
        let f = DfkField::lattice_init(Aabb::new([0.0; 3], [0.4, 0.4, 0.4]), [5, 5, 5], 1.5).unwrap();
        for n in f.layout.nodes() {
            assert_relative_eq!(n.support, 0.15, max_relative = 1e-12);
        }
        assert!(f.weights.iter().all(|w| *w == Vec3::zeros()));
    }

    #[test]
    fn lattice_rejects_bad_inputs() {
        assert!(DfkField::lattice_init(Aabb::new([0.0; 3], [1.0, 0.0, 1.0]), [3, 3, 3], 1.5).is_err());
        assert!(DfkField::lattice_init(Aabb::unit(), [1, 3, 3], 1.5).is_err());
        assert!(DfkField::lattice_init(Aabb::unit(), [3, 3, 3], 0.9).is_err());
    }

    #[test]
    fn lattice_covers_interior() {
        let f = DfkField::lattice_init(Aabb::unit(), [4, 3, 5], 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..2000 {
            let x = Aabb::unit().sample(&mut rng);
            let covered = f.layout.nodes().iter().any(|n| (x - n.center).norm() < n.support);
            assert!(covered);
        }
    }

    #[test]
    fn zero_weights_and_far_points_give_zero() {
        let f = DfkField::lattice_init(Aabb::unit(), [4, 4, 4], 1.5).unwrap();
        assert_eq!(f.evaluate(&Vec3::new(0.3, 0.4, 0.5)), Vec3::zeros());
        let g = random_field(2);
        assert_eq!(g.evaluate(&Vec3::new(5.0, 5.0, 5.0)), Vec3::zeros());
        assert_eq!(g.evaluate(&Vec3::new(-0.6, 0.5, 0.5)), Vec3::zeros());
    }

    #[test]
    fn grid_matches_brute_force_bitwise() {
        let f = random_field(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let x = Vec3::new(rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5), rng.gen_range(-0.5..1.5));
            assert_eq!(f.evaluate(&x), f.evaluate_brute(&x));
        }
    }

    #[test]
    fn linear_in_weights() {
        let f1 = random_field(5);
        let f2 = random_field(6);
        let (a, b) = (0.7, -1.9);
        let combo = DfkField::new(
            f1.layout.clone(),
            f1.weights.iter().zip(&f2.weights).map(|(x, y)| x * a + y * b).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let x = Aabb::unit().sample(&mut rng);
            let lhs = combo.evaluate(&x);
            let rhs = f1.evaluate(&x) * a + f2.evaluate(&x) * b;
            assert_relative_eq!(lhs, rhs, epsilon = 1e-12 * rhs.norm().max(1e-3));
            let jl = combo.jacobian(&x);
            let jr = f1.jacobian(&x) * a + f2.jacobian(&x) * b;
            assert_relative_eq!(jl, jr, epsilon = 1e-11 * jr.norm().max(1e-3));
        }
    }

    #[test]
    fn analytic_jacobian_matches_fd() {
        let f = random_field(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let x = Aabb::unit().sample(&mut rng);
            let ja = f.jacobian(&x);
            let jf = jacobian_fd(&f, &x, 1e-6).unwrap();
            assert_relative_eq!(ja, jf, epsilon = 1e-6 * ja.norm().max(1e-6));
        }
        for field in [AnalyticField::abc(1.0, 0.7, 0.4, 1.3), AnalyticField::taylor_green(0.8, 2.0)] {
            for _ in 0..50 {
                let x = Aabb::unit().sample(&mut rng) * 3.0;
                assert_relative_eq!(field.jacobian(&x), jacobian_fd(&field, &x, 1e-6).unwrap(), epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn zero_field_fd_operators() {
        let z = AnalyticField::zero();
        let x = Vec3::new(0.1, 0.2, 0.3);
        assert_eq!(jacobian_fd(&z, &x, 1e-3).unwrap(), Mat3::zeros());
        assert_eq!(vorticity_fd(&z, &x, 1e-3).unwrap(), Vec3::zeros());
        assert_eq!(divergence_fd(&z, &x, 1e-3).unwrap(), 0.0);
        assert!(jacobian_fd(&z, &x, 0.0).is_err());
        assert!(divergence_fd(&z, &x, -1.0).is_err());
    }

    #[test]
    fn abc_is_beltrami_at_origin() {
        // curl v = k v for ABC flow; with k = 1 vorticity equals velocity.
        let abc = AnalyticField::abc(1.0, 1.0, 1.0, 1.0);
        let x = Vec3::zeros();
        let w = vorticity_fd(&abc, &x, 1e-4).unwrap();
        assert_relative_eq!(w, abc.velocity(&x), epsilon = 1e-6);
    }

    #[test]
    fn random_field_divergence_is_truncation_only() {
        let f = random_field(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Vec3> = (0..500).map(|_| Aabb::unit().sample(&mut rng)).collect();
        let mean_div = |step: f64| pts.iter().map(|x| divergence_fd(&f, x, step).unwrap().abs()).sum::<f64>();
        let steps = [4e-3, 2e-3, 1e-3, 5e-4];
        let divs: Vec<f64> = steps.iter().map(|s| mean_div(*s)).collect();
        for pair in divs.windows(2) {
            let ratio = pair[0] / pair[1];
            assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn field_at_time_floor_and_clamp() {
        let layout = Arc::new(NodeLayout::lattice(Aabb::unit(), [2, 2, 2], 1.5).unwrap());
        let mut tv = TimeVaryingField::zeros(layout, 3, 0.5).unwrap();
        for (i, f) in tv.frames.iter_mut().enumerate() {
            f.weights[0] = Vec3::repeat(i as f64);
        }
        assert_eq!(tv.frame_index_at(0.0).unwrap(), 0);
        assert_eq!(tv.frame_index_at(0.75).unwrap(), 1);
        assert_eq!(tv.frame_index_at(1.5).unwrap(), 2);
        assert_eq!(tv.field_at_time(1.5).unwrap().weights[0], Vec3::repeat(2.0));
        assert!(tv.frame_index_at(1.6).is_err());
        assert!(tv.frame_index_at(-0.1).is_err());
    }

    #[test]
    fn dfk1_roundtrip_is_bit_exact() {
        let f = random_field(12);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.dfk");
        f.save(&p).unwrap();
        let g = DfkField::load(&p).unwrap();
        assert_eq!(f.weights, g.weights);
        assert_eq!(f.layout.nodes(), g.layout.nodes());
        assert_eq!(f.header(), g.header());
        let sidecar: DfkHeader = crate::io::read_json(&p.with_extension("json")).unwrap();
        assert_eq!(sidecar, f.header());
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(DfkField::from_bytes(&bytes).is_err());
        assert!(DfkField::from_bytes(&std::fs::read(&p).unwrap()[..40]).is_err());
    }
}
