//! Synthetic ground truth: DFK and analytic flows, GT clouds and rendered
//! observation sets.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adjoint::{Group, ParameterSet, WindowSpec};
use crate::advection::{rollout, rollout_with, AdvectionConfig};
use crate::dfk_field::{AnalyticField, DfkField, NodeLayout, TimeVaryingField, VelocityField};
use crate::error::{Error, Result};
use crate::gaussians::{logit, normalize_quat, GaussianCloud, GaussianPrimitive, InflowRegion};
use crate::geometry::{Aabb, Vec3};
use crate::io::{read_json, substream, write_json};
use crate::metrics::EvalGrid;
use crate::render2d::{Image, ObservationSet, OrthoCamera, ViewAxis};
use crate::sliding_window::ReconstructionProblem;

pub const SCENE_FORMAT_VERSION: u32 = 1;

/// Ground-truth flow: a DFK sequence or a steady analytic field.
#[derive(Clone, Debug)]
pub enum GtField {
    Dfk(TimeVaryingField),
    Analytic { field: AnalyticField, frames: usize, frame_dt: f64 },
}

impl GtField {
    /// Number of per-frame fields (observed frames minus one).
    pub fn len(&self) -> usize {
        match self {
            GtField::Dfk(tv) => tv.len(),
            GtField::Analytic { frames, .. } => *frames,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frame_dt(&self) -> f64 {
        match self {
            GtField::Dfk(tv) => tv.frame_dt,
            GtField::Analytic { frame_dt, .. } => *frame_dt,
        }
    }

    pub fn frame(&self, k: usize) -> &dyn VelocityField {
        match self {
            GtField::Dfk(tv) => &tv.frames[k],
            GtField::Analytic { field, .. } => field,
        }
    }

    pub fn frames(&self) -> Vec<&dyn VelocityField> {
        (0..self.len()).map(|k| self.frame(k)).collect()
    }

    pub fn as_dfk(&self) -> Option<&TimeVaryingField> {
        match self {
            GtField::Dfk(tv) => Some(tv),
            GtField::Analytic { .. } => None,
        }
    }
}

/// Distribution of a generated GT cloud.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CloudSpec {
    pub count: usize,
    pub center: [f64; 3],
    /// Standard deviation of the isotropic normal the centers are drawn from.
    pub spread: f64,
    pub scale_range: [f64; 2],
    /// Per-axis scale multipliers are drawn from `[1 - a, 1 + a]`.
    pub anisotropy: f64,
    pub opacity_range: [f64; 2],
    pub emission_range: [f64; 2],
}

impl CloudSpec {
    /// Clustered puff near the bottom of the unit cube.
    pub fn plume(count: usize) -> Self {
        CloudSpec {
            count,
            center: [0.5, 0.25, 0.5],
            spread: 0.07,
            scale_range: [0.03, 0.05],
            anisotropy: 0.15,
            opacity_range: [0.3, 0.6],
            emission_range: [0.8, 1.2],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2], name: &str, lo: f64, hi: f64| {
            if r[0].is_finite() && r[1].is_finite() && lo <= r[0] && r[0] <= r[1] && r[1] <= hi {
                Ok(())
            } else {
                Err(Error::domain(format!("{name} range {r:?} must be ordered within [{lo}, {hi}]")))
            }
        };
        if self.count == 0 {
            return Err(Error::domain("cloud needs at least one primitive"));
        }
        if !(self.spread.is_finite() && self.spread >= 0.0) {
            return Err(Error::domain(format!("spread must be non-negative, got {}", self.spread)));
        }
        if !(0.0..1.0).contains(&self.anisotropy) {
            return Err(Error::domain(format!("anisotropy must lie in [0, 1), got {}", self.anisotropy)));
        }
        ordered(self.scale_range, "scale", f64::MIN_POSITIVE, f64::INFINITY)?;
        ordered(self.opacity_range, "opacity", 1e-6, 1.0 - 1e-6)?;
        ordered(self.emission_range, "emission", 0.0, f64::INFINITY)
    }

    /// Draws the cloud; centers are clamped into `domain`.
    pub fn sample(&self, domain: &Aabb, rng: &mut impl Rng) -> Result<GaussianCloud> {
        self.validate()?;
        let normal = Normal::new(0.0, self.spread.max(f64::MIN_POSITIVE)).map_err(|e| Error::domain(e.to_string()))?;
        let range = |r: [f64; 2], rng: &mut dyn rand::RngCore| if r[0] < r[1] { rng.gen_range(r[0]..r[1]) } else { r[0] };
        let mut prims = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let mut p = Vec3::from(self.center) + Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            for k in 0..3 {
                p[k] = p[k].clamp(domain.min[k], domain.max[k]);
            }
            let s = range(self.scale_range, rng);
            let a = self.anisotropy;
            let stretch = |rng: &mut dyn rand::RngCore| if a > 0.0 { rng.gen_range(1.0 - a..1.0 + a) } else { 1.0 };
            let log_scales = Vec3::new((s * stretch(rng)).ln(), (s * stretch(rng)).ln(), (s * stretch(rng)).ln());
            let n = Normal::new(0.0, 1.0).unwrap();
            let rotation = normalize_quat(&[n.sample(rng), n.sample(rng), n.sample(rng), n.sample(rng)]);
            prims.push(GaussianPrimitive {
                position: p,
                log_scales,
                rotation,
                opacity_logit: logit(range(self.opacity_range, rng)),
                emission: range(self.emission_range, rng),
            });
        }
        Ok(GaussianCloud::new(prims, 0))
    }
}

/// Parameters of the rising-plume generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlumeOptions {
    pub seed: u64,
    pub n_frames: usize,
    pub n_gaussians: usize,
    pub node_resolution: usize,
    pub overlap: f64,
    pub image_size: usize,
    /// Time between observed frames.
    pub frame_dt: f64,
    /// Largest displacement rate over all frames, in domain heights per frame.
    pub max_speed: f64,
    /// Width of the buoyant column.
    pub column_sigma: f64,
    /// Amplitude of the swirl noise relative to the column.
    pub swirl: f64,
    pub eval_resolution: usize,
    pub advection: AdvectionConfig,
    /// Replaces the clustered puff of `n_gaussians` primitives near the bottom.
    pub cloud: Option<CloudSpec>,
    /// Primitives injected at the bottom per frame; 0 disables inflow.
    pub inflow_per_frame: usize,
}

impl Default for PlumeOptions {
    fn default() -> Self {
        PlumeOptions {
            seed: 0,
            n_frames: 8,
            n_gaussians: 64,
            node_resolution: 5,
            overlap: 1.5,
            image_size: 64,
            frame_dt: 1.0,
            max_speed: 0.2,
            column_sigma: 0.15,
            swirl: 0.5,
            eval_resolution: 64,
            advection: AdvectionConfig::default(),
            cloud: None,
            inflow_per_frame: 0,
        }
    }
}

impl PlumeOptions {
    pub fn validate(&self) -> Result<()> {
        if self.n_frames < 4 {
            return Err(Error::domain(format!("plume needs at least 4 frames, got {}", self.n_frames)));
        }
        if self.n_gaussians < 8 {
            return Err(Error::domain(format!("plume needs at least 8 Gaussians, got {}", self.n_gaussians)));
        }
        if self.node_resolution < 2 {
            return Err(Error::domain(format!("node resolution must be at least 2, got {}", self.node_resolution)));
        }
        if self.image_size < 8 {
            return Err(Error::domain(format!("image size must be at least 8, got {}", self.image_size)));
        }
        for (name, v) in [("frame_dt", self.frame_dt), ("max_speed", self.max_speed), ("column_sigma", self.column_sigma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.swirl.is_finite() && self.swirl >= 0.0) {
            return Err(Error::domain(format!("swirl must be non-negative, got {}", self.swirl)));
        }
        if self.eval_resolution < 4 {
            return Err(Error::domain(format!("eval resolution must be at least 4, got {}", self.eval_resolution)));
        }
        self.advection.validate()
    }
}

/// Provenance record saved as `manifest.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneManifest {
    pub format_version: u32,
    /// `"plume"` or `"analytic"`.
    pub generator: String,
    pub seed: u64,
    pub n_frames: usize,
    pub n_gaussians: usize,
    pub domain: Aabb,
    pub frame_dt: f64,
    pub cameras: Vec<OrthoCamera>,
    pub advection: AdvectionConfig,
    pub eval_resolution: usize,
    pub plume: Option<PlumeOptions>,
    pub analytic: Option<AnalyticField>,
    pub cloud: Option<CloudSpec>,
    /// Factor the raw plume weights were multiplied by.
    pub weight_scale: f64,
    pub inflow: Option<InflowRegion>,
    pub inflow_seed: u64,
    pub formats: BTreeMap<String, String>,
}

fn formats() -> BTreeMap<String, String> {
    [("field", "DFK1"), ("cloud", "GCL1"), ("observations", "PFM")].into_iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

/// Everything a reconstruction needs plus the answer.
#[derive(Clone, Debug)]
pub struct SceneBundle {
    pub gt_field: GtField,
    pub gt_cloud_t0: GaussianCloud,
    pub cameras: Vec<OrthoCamera>,
    pub observations: ObservationSet,
    /// One grid per field frame, built from the GT cloud at that frame.
    pub eval_grids: Vec<EvalGrid>,
    pub manifest: SceneManifest,
}

/// Rounds every pixel through `f32`, the precision observations are stored at.
fn quantize(img: &mut Image) {
    for v in &mut img.data {
        *v = *v as f32 as f64;
    }
}

fn inflow_of(m: &SceneManifest) -> Option<(&InflowRegion, u64)> {
    m.inflow.as_ref().filter(|r| r.injections_per_frame > 0).map(|r| (r, m.inflow_seed))
}

impl SceneBundle {
    fn assemble(gt_field: GtField, gt_cloud_t0: GaussianCloud, manifest: SceneManifest, observations: Option<ObservationSet>) -> Result<Self> {
        let n = manifest.n_frames;
        if gt_field.len() + 1 != n {
            return Err(Error::domain(format!("{n} frames need {} field frames, have {}", n - 1, gt_field.len())));
        }
        let frames = gt_field.frames();
        let traj = rollout_with(&gt_cloud_t0, &frames, gt_field.frame_dt(), 0, &manifest.advection, inflow_of(&manifest))?;
        let clouds: Vec<GaussianCloud> = (0..n).map(|k| traj.cloud_at(k)).collect();
        let observations = match observations {
            Some(o) => o,
            None => {
                let mut o = ObservationSet::render(manifest.cameras.clone(), &clouds)?;
                o.frames.iter_mut().flatten().for_each(quantize);
                o
            }
        };
        let r = manifest.eval_resolution;
        let eval_grids = (0..n - 1)
            .map(|k| EvalGrid::from_ground_truth([r; 3], manifest.domain, &clouds[k], frames[k]))
            .collect::<Result<Vec<_>>>()?;
        Ok(SceneBundle { gt_field, gt_cloud_t0, cameras: manifest.cameras.clone(), observations, eval_grids, manifest })
    }

    pub fn frame_count(&self) -> usize {
        self.manifest.n_frames
    }

    pub fn domain(&self) -> Aabb {
        self.manifest.domain
    }

    pub fn frame_dt(&self) -> f64 {
        self.manifest.frame_dt
    }

    pub fn inflow(&self) -> Option<(&InflowRegion, u64)> {
        inflow_of(&self.manifest)
    }

    /// GT cloud at every observed frame.
    pub fn gt_clouds(&self) -> Result<Vec<GaussianCloud>> {
        let traj = rollout_with(&self.gt_cloud_t0, &self.gt_field.frames(), self.frame_dt(), 0, &self.manifest.advection, self.inflow())?;
        Ok((0..self.frame_count()).map(|k| traj.cloud_at(k)).collect())
    }

    /// Renders the observations again from the GT cloud, field and manifest.
    pub fn rerender(&self) -> Result<ObservationSet> {
        let mut o = ObservationSet::render(self.cameras.clone(), &self.gt_clouds()?)?;
        o.frames.iter_mut().flatten().for_each(quantize);
        Ok(o)
    }

    /// The inverse problem posed by this bundle.
    pub fn problem(&self) -> ReconstructionProblem {
        ReconstructionProblem {
            observations: self.observations.clone(),
            domain: self.domain(),
            frame_dt: self.frame_dt(),
            inflow: self.manifest.inflow.filter(|r| r.injections_per_frame > 0),
            inflow_seed: self.manifest.inflow_seed,
        }
    }

    /// Writes `manifest.json`, `gt_field/` (DFK scenes), `gt_cloud_t0.gcl` and
    /// `observations/frame_FFF_camC.pfm`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        if let GtField::Dfk(tv) = &self.gt_field {
            tv.save_dir(&dir.join("gt_field"))?;
        }
        self.gt_cloud_t0.save(&dir.join("gt_cloud_t0.gcl"))?;
        for (f, row) in self.observations.frames.iter().enumerate() {
            for (c, img) in row.iter().enumerate() {
                img.write_pfm(&dir.join("observations").join(format!("frame_{f:03}_cam{c}.pfm")))?;
            }
        }
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    /// Reads a bundle; evaluation grids are recomputed from the GT.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SceneManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.format_version != SCENE_FORMAT_VERSION {
            return Err(Error::format("scene manifest", format!("unsupported format version {}", manifest.format_version)));
        }
        if manifest.n_frames < 2 {
            return Err(Error::format("scene manifest", "fewer than 2 frames"));
        }
        let gt_field = match manifest.analytic {
            Some(field) => GtField::Analytic { field, frames: manifest.n_frames - 1, frame_dt: manifest.frame_dt },
            None => GtField::Dfk(TimeVaryingField::load_dir(&dir.join("gt_field"))?),
        };
        let cloud = GaussianCloud::load(&dir.join("gt_cloud_t0.gcl"))?;
        let mut frames = Vec::with_capacity(manifest.n_frames);
        for f in 0..manifest.n_frames {
            let row = (0..manifest.cameras.len())
                .map(|c| Image::read_pfm(&dir.join("observations").join(format!("frame_{f:03}_cam{c}.pfm"))))
                .collect::<Result<Vec<_>>>()?;
            frames.push(row);
        }
        let obs = ObservationSet::new(manifest.cameras.clone(), frames)?;
        Self::assemble(gt_field, cloud, manifest, Some(obs))
    }
}

/// Six-neighbor lattice average of per-node vectors.
fn smooth(values: &[Vec3], res: usize) -> Vec<Vec3> {
    let idx = |x: usize, y: usize, z: usize| x + res * (y + res * z);
    let mut out = vec![Vec3::zeros(); values.len()];
    for z in 0..res {
        for y in 0..res {
            for x in 0..res {
                let mut sum = values[idx(x, y, z)];
                let mut n = 1.0;
                for (dx, dy, dz) in [(-1i64, 0i64, 0i64), (1, 0, 0), (0, -1, 0), (0, 1, 0), (0, 0, -1), (0, 0, 1)] {
                    let (a, b, c) = (x as i64 + dx, y as i64 + dy, z as i64 + dz);
                    let r = res as i64;
                    if (0..r).contains(&a) && (0..r).contains(&b) && (0..r).contains(&c) {
                        sum += values[idx(a as usize, b as usize, c as usize)];
                        n += 1.0;
                    }
                }
                out[idx(x, y, z)] = sum / n;
            }
        }
    }
    out
}

/// Largest speed of any frame sampled on a `res^3` cell-centered grid.
fn max_speed(frames: &[DfkField], domain: &Aabb, res: usize) -> f64 {
    let cell = domain.extent() / res as f64;
    let mut best = 0.0f64;
    for f in frames {
        for i in 0..res * res * res {
            let c = Vec3::new((i % res) as f64 + 0.5, ((i / res) % res) as f64 + 0.5, (i / (res * res)) as f64 + 0.5);
            best = best.max(f.evaluate(&(domain.lo() + c.component_mul(&cell))).norm());
        }
    }
    best
}

/// Default plume: `n_frames` observed frames from +Z and +X.
pub fn generate_plume(seed: u64, n_frames: usize, n_gaussians: usize, node_resolution: usize) -> Result<SceneBundle> {
    generate_plume_with(&PlumeOptions { seed, n_frames, n_gaussians, node_resolution, ..PlumeOptions::default() })
}

/// Rising plume. Every node carries the vector potential weight of a vertical
/// Gaussian column, which the kernel turns into an updraft with a return ring,
/// plus smoothed noise that rotates slowly between two seeded patterns. All
/// frames share one scale chosen so the peak speed equals `max_speed`.
pub fn generate_plume_with(opts: &PlumeOptions) -> Result<SceneBundle> {
    opts.validate()?;
    let domain = Aabb::unit();
    let res = opts.node_resolution;
    let layout = Arc::new(NodeLayout::lattice(domain, [res; 3], opts.overlap)?);
    let mut rng = substream(opts.seed, "scene", 0);
    let std = Normal::new(0.0, 1.0).unwrap();
    let mut noise = || {
        let raw: Vec<Vec3> = (0..layout.len()).map(|_| Vec3::new(std.sample(&mut rng), std.sample(&mut rng), std.sample(&mut rng))).collect();
        smooth(&raw, res)
    };
    let (n1, n2) = (noise(), noise());
    let axis = domain.center();
    let s2 = 2.0 * opts.column_sigma * opts.column_sigma;
    let column: Vec<Vec3> = layout
        .nodes()
        .iter()
        .map(|n| {
            let d2 = (n.center.x - axis.x).powi(2) + (n.center.z - axis.z).powi(2);
            Vec3::new(0.0, (-d2 / s2).exp(), 0.0)
        })
        .collect();
    let n_fields = opts.n_frames - 1;
    let period = 4.0 * opts.n_frames as f64;
    let raw = (0..n_fields)
        .map(|k| {
            let theta = std::f64::consts::TAU * k as f64 / period;
            let w = (0..layout.len()).map(|i| column[i] + opts.swirl * (theta.cos() * n1[i] + theta.sin() * n2[i])).collect();
            DfkField::new(layout.clone(), w)
        })
        .collect::<Result<Vec<_>>>()?;
    let scale = opts.max_speed / opts.frame_dt / max_speed(&raw, &domain, 16);
    if !scale.is_finite() {
        return Err(Error::NonFinite("plume field has no motion".into()));
    }
    let gt = TimeVaryingField::new(raw.iter().map(|f| f.scaled(scale)).collect(), opts.frame_dt)?;

    let spec = opts.cloud.unwrap_or_else(|| CloudSpec::plume(opts.n_gaussians));
    let cloud = spec.sample(&domain, &mut rng)?;
    let view = [domain.min[0], domain.min[1], domain.max[0], domain.max[1]];
    let cameras = vec![
        OrthoCamera::new(ViewAxis::PosZ, opts.image_size, opts.image_size, view)?,
        OrthoCamera::new(ViewAxis::PosX, opts.image_size, opts.image_size, view)?,
    ];
    let inflow = (opts.inflow_per_frame > 0)
        .then(|| InflowRegion::with_defaults(Aabb::new([0.4, 0.05, 0.4], [0.6, 0.15, 0.6]), opts.inflow_per_frame));
    let manifest = SceneManifest {
        format_version: SCENE_FORMAT_VERSION,
        generator: "plume".into(),
        seed: opts.seed,
        n_frames: opts.n_frames,
        n_gaussians: spec.count,
        domain,
        frame_dt: opts.frame_dt,
        cameras,
        advection: opts.advection,
        eval_resolution: opts.eval_resolution,
        plume: Some(*opts),
        analytic: None,
        cloud: Some(spec),
        weight_scale: scale,
        inflow,
        inflow_seed: opts.seed,
        formats: formats(),
    };
    SceneBundle::assemble(GtField::Dfk(gt), cloud, manifest, None)
}

/// Steady analytic flow over the unit cube with frame spacing 1.
pub fn generate_analytic(
    field: AnalyticField,
    cloud: &CloudSpec,
    cameras: Vec<OrthoCamera>,
    n_frames: usize,
    seed: u64,
) -> Result<SceneBundle> {
    if n_frames < 2 {
        return Err(Error::domain(format!("need at least 2 frames, got {n_frames}")));
    }
    if cameras.is_empty() || cameras.len() > 3 {
        return Err(Error::domain(format!("need 1 to 3 cameras, got {}", cameras.len())));
    }
    for c in &cameras {
        c.validate()?;
    }
    for (name, v) in [("a", field.a), ("b", field.b), ("c", field.c), ("frequency", field.frequency)] {
        if !v.is_finite() {
            return Err(Error::domain(format!("analytic parameter {name} must be finite")));
        }
    }
    let domain = Aabb::unit();
    let gt_cloud = cloud.sample(&domain, &mut substream(seed, "scene", 0))?;
    let manifest = SceneManifest {
        format_version: SCENE_FORMAT_VERSION,
        generator: "analytic".into(),
        seed,
        n_frames,
        n_gaussians: cloud.count,
        domain,
        frame_dt: 1.0,
        cameras,
        advection: AdvectionConfig::default(),
        eval_resolution: 32,
        plume: None,
        analytic: Some(field),
        cloud: Some(*cloud),
        weight_scale: 1.0,
        inflow: None,
        inflow_seed: seed,
        formats: formats(),
    };
    SceneBundle::assemble(GtField::Analytic { field, frames: n_frames - 1, frame_dt: 1.0 }, gt_cloud, manifest, None)
}

/// Small scene for gradient verification: 8 anisotropic Gaussians, a 3x3x3 lattice,
/// 3 observed frames from two 32x32 cameras, and 64 collocation points.
pub struct GradientCheckScene {
    pub params: ParameterSet,
    pub spec: WindowSpec,
    pub observations: ObservationSet,
    pub collocation: Vec<Vec3>,
    pub frame_dt: f64,
    pub fd_step: f64,
    /// Weight that gives unit speed at a node center (`h^2 / 112`).
    pub weight_scale: f64,
}

fn random_weights(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * scale).collect()
}

fn random_blob(rng: &mut impl Rng) -> GaussianPrimitive {
    let q = normalize_quat(&[rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)]);
    GaussianPrimitive {
        position: Aabb::new([0.3; 3], [0.7; 3]).sample(rng),
        log_scales: Vec3::new(rng.gen_range(0.05f64..0.1).ln(), rng.gen_range(0.05f64..0.1).ln(), rng.gen_range(0.05f64..0.1).ln()),
        rotation: q,
        opacity_logit: logit(rng.gen_range(0.3..0.7)),
        emission: rng.gen_range(0.5..1.5),
    }
}

/// Trainable parameters are a perturbed copy of the ground truth, so every loss
/// term is away from its minimum. Positions are trainable as well.
pub fn gradient_check_scene(seed: u64) -> Result<GradientCheckScene> {
    let mut rng = substream(seed, "scene", 0);
    let domain = Aabb::unit();
    let layout = Arc::new(NodeLayout::lattice(domain, [3, 3, 3], 1.5)?);
    let frames = 3;
    let unit = layout.nodes()[0].support.powi(2) / 112.0;
    let gt_fields: Vec<DfkField> =
        (0..frames - 1).map(|_| DfkField::new(layout.clone(), random_weights(&mut rng, layout.len(), 0.05 * unit))).collect::<Result<_>>()?;
    let gt = TimeVaryingField::new(gt_fields.clone(), 1.0)?;
    let gt_cloud = GaussianCloud::new((0..8).map(|_| random_blob(&mut rng)).collect(), 0);
    let traj = rollout(&gt_cloud, &gt, 0, frames - 1, &AdvectionConfig::default(), None)?;
    let clouds: Vec<GaussianCloud> = (0..frames).map(|k| traj.cloud_at(k)).collect();
    let cams = vec![
        OrthoCamera::new(ViewAxis::PosZ, 32, 32, [0.0, 0.0, 1.0, 1.0])?,
        OrthoCamera::new(ViewAxis::PosX, 32, 32, [0.0, 0.0, 1.0, 1.0])?,
    ];
    let observations = ObservationSet::render(cams, &clouds)?;

    let fields: Vec<DfkField> = gt_fields
        .iter()
        .map(|f| {
            let noise = random_weights(&mut rng, f.weights.len(), 0.02 * unit);
            DfkField::new(f.layout.clone(), f.weights.iter().zip(noise).map(|(a, b)| a + b).collect())
        })
        .collect::<Result<_>>()?;
    let anchor: Vec<GaussianPrimitive> = gt_cloud
        .primitives
        .iter()
        .map(|g| {
            let mut g = *g;
            g.position += Vec3::new(rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
            g.log_scales += Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
            g.opacity_logit += rng.gen_range(-0.2..0.2);
            g.emission += rng.gen_range(-0.1..0.1);
            g.rotation[1] += rng.gen_range(-0.05..0.05);
            g
        })
        .collect();
    let root_positions = anchor.iter().map(|g| g.position).collect();
    let mut params = ParameterSet::new(fields, root_positions, anchor);
    params.thaw(Group::Positions);
    let collocation = {
        let mut r = substream(seed, "collocation", 0);
        (0..64).map(|_| domain.sample(&mut r)).collect()
    };
    Ok(GradientCheckScene {
        params,
        spec: WindowSpec { root_frame: 0, anchor_frame: 0, horizon: frames - 1 },
        observations,
        collocation,
        frame_dt: 1.0,
        fd_step: 1e-3 * domain.diagonal(),
        weight_scale: unit,
    })
}
