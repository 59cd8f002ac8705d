//! Two-phase window optimization: progressive warm-up from frame 0, then a
//! sliding phase that freezes the past and re-optimizes a full-width window.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adjoint::{anchor_cloud, objective, objective_and_gradient, GradientReport, Group, ObjectiveContext, ObjectiveTerms, ParameterSet, WindowSpec};
use crate::advection::{advect_frame, AdvectionConfig};
use crate::dfk_field::{curl_of, jacobian_fd, vorticity_fd, DfkField, NodeLayout, TimeVaryingField, VelocityField};
use crate::error::{Error, Result};
use crate::gaussians::{logit, normalize_quat, GaussianCloud, GaussianPrimitive, InflowRegion};
use crate::geometry::{Aabb, Mat3, Vec3};
use crate::io::{read_file, read_json, substream, write_file, write_json, ByteReader, ByteWriter};
use crate::physics::{physics_terms, PhysicsRequest};
use crate::render2d::{l1_dssim_loss, Image, ObservationSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_ssim: f64,
    /// Temporal discount applied to frame `anchor + j` as `gamma^j`.
    pub gamma: f64,
    pub lambda_aniso: f64,
    pub lambda_reg: f64,
    pub lambda_vor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_ssim: 0.2, gamma: 0.9, lambda_aniso: 10.0, lambda_reg: 0.01, lambda_vor: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_ssim", self.lambda_ssim),
            ("lambda_aniso", self.lambda_aniso),
            ("lambda_reg", self.lambda_reg),
            ("lambda_vor", self.lambda_vor),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::domain(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.lambda_ssim > 1.0 {
            return Err(Error::domain(format!("lambda_ssim must be at most 1, got {}", self.lambda_ssim)));
        }
        // gamma = 0 is accepted: it degenerates to supervising the anchor frame alone.
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::domain(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    /// `gamma^j` for `j = 0..=horizon`.
    pub fn discounts(&self, horizon: usize) -> Vec<f64> {
        let mut w = Vec::with_capacity(horizon + 1);
        let mut g = 1.0;
        for _ in 0..=horizon {
            w.push(g);
            g *= self.gamma;
        }
        w
    }
}

/// Uniform domain samples for the physics losses, redrawn per iteration.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollocationSampler {
    pub sample_count: usize,
    pub domain: Aabb,
    pub seed: u64,
}

impl CollocationSampler {
    pub fn new(sample_count: usize, domain: Aabb, seed: u64) -> Result<Self> {
        if sample_count == 0 {
            return Err(Error::domain("collocation sample_count must be positive"));
        }
        domain.validate()?;
        Ok(CollocationSampler { sample_count, domain, seed })
    }

    /// The sample set of iteration `counter`.
    pub fn draw(&self, counter: u64) -> Vec<Vec3> {
        let mut rng = substream(self.seed, "collocation", counter);
        (0..self.sample_count).map(|_| self.domain.sample(&mut rng)).collect()
    }
}

/// `sum_j gamma^j * (mean over cameras of the image loss at frame anchor + j)`;
/// `renders[j][c]` is the render of frame `anchor + j` by camera `c`.
pub fn discounted_image_loss(
    renders: &[Vec<Image>],
    observations: &ObservationSet,
    anchor_frame: usize,
    lambda_ssim: f64,
    gamma: f64,
) -> Result<f64> {
    let mut total = 0.0;
    let mut disc = 1.0;
    for (j, row) in renders.iter().enumerate() {
        let frame = anchor_frame + j;
        if row.len() != observations.cameras.len() {
            return Err(Error::domain(format!("frame {frame}: {} renders for {} cameras", row.len(), observations.cameras.len())));
        }
        let mut frame_loss = 0.0;
        for (c, img) in row.iter().enumerate() {
            frame_loss += l1_dssim_loss(img, observations.get(frame, c)?, lambda_ssim)?;
        }
        total += disc * frame_loss / row.len() as f64;
        disc *= gamma;
    }
    Ok(total)
}

/// Mean over the samples of `|v(x)|_1`.
pub fn reg_loss(field: &DfkField, samples: &[Vec3]) -> f64 {
    let fields = std::slice::from_ref(field);
    let req = PhysicsRequest { fields, frame_dt: 1.0, samples, fd_step: 1.0, with_reg: true, with_vor: false };
    physics_terms(&req, None, None).reg
}

/// Mean over the samples of the L1 vorticity transport residual between frames
/// `frame` and `frame + 1`, with central differences of step `fd_step`.
pub fn vorticity_loss(field: &TimeVaryingField, frame: usize, samples: &[Vec3], fd_step: f64) -> Result<f64> {
    if frame + 1 >= field.len() {
        return Err(Error::domain(format!("vorticity loss at frame {frame} needs field frame {}, have {}", frame + 1, field.len())));
    }
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(Error::domain(format!("fd_step must be positive, got {fd_step}")));
    }
    let req = PhysicsRequest {
        fields: &field.frames[frame..frame + 2],
        frame_dt: field.frame_dt,
        samples,
        fd_step,
        with_reg: false,
        with_vor: true,
    };
    Ok(physics_terms(&req, None, None).vor)
}

/// Vorticity transport residual `(w1 - w0)/dt + (grad w0) v0 - J0 w0` at `x` for any
/// pair of velocity fields, every derivative by central differences of step `h`.
pub fn vorticity_residual(f0: &dyn VelocityField, f1: &dyn VelocityField, frame_dt: f64, x: &Vec3, h: f64) -> Result<Vec3> {
    let j0 = jacobian_fd(f0, x, h)?;
    let w0 = curl_of(&j0);
    let w1 = vorticity_fd(f1, x, h)?;
    let mut grad_w = Mat3::zeros();
    for k in 0..3 {
        let mut e = Vec3::zeros();
        e[k] = h;
        let d = (vorticity_fd(f0, &(x + e), h)? - vorticity_fd(f0, &(x - e), h)?) / (2.0 * h);
        grad_w.set_column(k, &d);
    }
    Ok((w1 - w0) / frame_dt + grad_w * f0.velocity(x) - j0 * w0)
}

/// [`vorticity_loss`] for arbitrary velocity fields: mean of `|R|_1` over the samples.
pub fn vorticity_loss_with(f0: &dyn VelocityField, f1: &dyn VelocityField, frame_dt: f64, samples: &[Vec3], fd_step: f64) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for x in samples {
        sum += vorticity_residual(f0, f1, frame_dt, x, fd_step)?.abs().sum();
    }
    Ok(sum / samples.len() as f64)
}

/// Weighted sum of the discounted image loss, anisotropy, and the physics terms
/// summed over the window's fields.
pub fn total_objective(params: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<ObjectiveTerms> {
    objective(params, spec, ctx)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub resolution: [usize; 3],
    pub overlap: f64,
}

impl Default for LatticeSpec {
    fn default() -> Self {
        LatticeSpec { resolution: [5, 5, 5], overlap: 1.5 }
    }
}

/// Effective configuration of one reconstruction run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: PathBuf,
    pub out: PathBuf,
    /// Capped at `frames - 1` by the driver.
    pub window_size: usize,
    pub loss: LossWeights,
    pub advection: AdvectionConfig,
    pub lattice: LatticeSpec,
    pub warmup_iterations: usize,
    pub sliding_iterations: usize,
    /// Budget of the initial frame-0 fit (positions free).
    pub frame0_iterations: usize,
    pub lr_weights_start: f64,
    pub lr_weights_end: f64,
    pub lr_attributes: f64,
    pub lr_positions: f64,
    /// Speed that one normalized weight unit produces at a node center; the
    /// optimizer steps weights in these units.
    pub velocity_scale: f64,
    pub collocation_samples: usize,
    /// Finite-difference step as a fraction of the domain diagonal.
    pub fd_step_fraction: f64,
    /// Primitives created by the frame-0 initialization.
    pub gaussians: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: PathBuf::new(),
            out: PathBuf::new(),
            window_size: 10,
            loss: LossWeights::default(),
            advection: AdvectionConfig::default(),
            lattice: LatticeSpec::default(),
            warmup_iterations: 500,
            sliding_iterations: 100,
            frame0_iterations: 300,
            lr_weights_start: 0.1,
            lr_weights_end: 0.001,
            lr_attributes: 1e-2,
            lr_positions: 2e-3,
            velocity_scale: 0.3,
            collocation_samples: 4096,
            fd_step_fraction: 1e-3,
            gaussians: 64,
            seed: 0,
        }
    }
}

impl RunConfig {
    /// Exponential decay from `lr_weights_start` at step 0 to `lr_weights_end` at
    /// step `total - 1`, held there afterwards.
    pub fn weight_learning_rate(&self, k: u64, total: u64) -> f64 {
        let (a, b) = (self.lr_weights_start, self.lr_weights_end);
        if total <= 1 {
            return a;
        }
        a * (b / a).powf(k.min(total - 1) as f64 / (total - 1) as f64)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.advection.validate()?;
        if self.window_size == 0 {
            return Err(Error::domain("window_size must be at least 1"));
        }
        if self.lattice.resolution.iter().any(|r| *r < 2) || !(self.lattice.overlap >= 1.0) {
            return Err(Error::domain("lattice needs resolution >= 2 per axis and overlap >= 1"));
        }
        for (name, v) in [
            ("lr_weights_start", self.lr_weights_start),
            ("lr_weights_end", self.lr_weights_end),
            ("lr_attributes", self.lr_attributes),
            ("lr_positions", self.lr_positions),
            ("velocity_scale", self.velocity_scale),
            ("fd_step_fraction", self.fd_step_fraction),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if self.collocation_samples == 0 || self.gaussians == 0 {
            return Err(Error::domain("collocation_samples and gaussians must be positive"));
        }
        Ok(())
    }
}

/// What the inverse problem is given: observations and the scene's known geometry.
#[derive(Clone, Debug)]
pub struct ReconstructionProblem {
    pub observations: ObservationSet,
    pub domain: Aabb,
    pub frame_dt: f64,
    pub inflow: Option<InflowRegion>,
    pub inflow_seed: u64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Adaptive-moment state, one moment pair per scalar of every group.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: [Vec<f64>; 6],
    pub v: [Vec<f64>; 6],
}

/// Per-group learning rates, indexed like [`Group::ALL`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LearningRates(pub [f64; 6]);

impl AdamState {
    pub fn reset(&mut self) {
        *self = AdamState::default();
    }

    /// One bias-corrected step on every group present in `grad`. Weight gradients
    /// are taken in units of `weight_unit`, and rotations that moved are renormalized.
    pub fn step(&mut self, params: &mut ParameterSet, grad: &GradientReport, lr: &LearningRates, weight_unit: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let mut rotated = vec![false; params.anchor.len()];
        for (gi, g) in Group::ALL.into_iter().enumerate() {
            if !grad.has(g) {
                continue;
            }
            let n = params.count(g);
            if self.m[gi].len() != n {
                self.m[gi] = vec![0.0; n];
                self.v[gi] = vec![0.0; n];
            }
            let unit = if g == Group::Weights { weight_unit } else { 1.0 };
            for i in 0..n {
                let gr = grad.get(g, i) * unit;
                let m = BETA1 * self.m[gi][i] + (1.0 - BETA1) * gr;
                let v = BETA2 * self.v[gi][i] + (1.0 - BETA2) * gr * gr;
                self.m[gi][i] = m;
                self.v[gi][i] = v;
                let delta = lr.0[gi] * (m / c1) / ((v / c2).sqrt() + ADAM_EPS);
                if delta != 0.0 {
                    params.set(g, i, params.get(g, i) - delta * unit);
                    if g == Group::Rotations {
                        rotated[i / 4] = true;
                    }
                }
            }
        }
        for (a, moved) in params.anchor.iter_mut().zip(&rotated) {
            if *moved {
                a.rotation = normalize_quat(&a.rotation);
            }
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new(b"ADM1");
        w.u64(self.step);
        for k in 0..6 {
            w.u64(self.m[k].len() as u64);
            w.f64s(self.m[k].iter().copied());
            w.f64s(self.v[k].iter().copied());
        }
        w.buf
    }

    fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, b"ADM1", "ADM1")?;
        let mut s = AdamState { step: r.u64()?, ..Default::default() };
        for k in 0..6 {
            let n = r.usize()?;
            s.m[k] = r.f64s(n)?;
            s.v[k] = r.f64s(n)?;
        }
        r.finish()?;
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    WarmUp,
    Sliding,
}

/// Optimizer bookkeeping between windows.
#[derive(Clone, Debug)]
pub struct WindowState {
    pub spec: WindowSpec,
    pub window_size: usize,
    pub phase: Phase,
    pub params: ParameterSet,
    /// Fields of frames before the root, never touched again.
    pub frozen_fields: Vec<DfkField>,
    /// Clouds of frames before the anchor (index = frame), never touched again.
    pub frozen_clouds: Vec<GaussianCloud>,
    pub optimizer: AdamState,
    /// Optimizer steps taken so far, over all stages.
    pub iteration: u64,
    /// Steps that counted towards the weight learning-rate decay.
    pub weight_iteration: u64,
    /// Completed windows (0 = warm-up).
    pub window_index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: u64,
    pub window: usize,
    pub objective: f64,
    pub l_img: f64,
    pub l_aniso: f64,
    pub l_reg: f64,
    pub l_vor: f64,
}

pub const LOG_HEADER: &str = "iter,window,objective,l_img,l_aniso,l_reg,l_vor";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{},{},{}", r.iter, r.window, r.objective, r.l_img, r.l_aniso, r.l_reg, r.l_vor);
    }
    s
}

fn parse_log_csv(text: &str) -> Result<Vec<LogRow>> {
    let bad = |line: usize| Error::format("training log", format!("malformed row {line}"));
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(n));
        }
        let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(n));
        rows.push(LogRow {
            iter: f[0].parse().map_err(|_| bad(n))?,
            window: f[1].parse().map_err(|_| bad(n))?,
            objective: num(2)?,
            l_img: num(3)?,
            l_aniso: num(4)?,
            l_reg: num(5)?,
            l_vor: num(6)?,
        });
    }
    Ok(rows)
}

/// Outcome of the structural checks after one sliding step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlideCheck {
    pub anchor_frame: usize,
    /// Anchor centers equal `advect_frame(frozen root centers, v_root)` bit for bit.
    pub anchor_continuity: bool,
    /// Frozen fields, clouds and root centers are bit-identical before and after.
    pub frozen_unchanged: bool,
}

pub struct Reconstruction {
    pub field: TimeVaryingField,
    /// Reconstructed frame-0 cloud, the root of re-simulation.
    pub cloud0: GaussianCloud,
    /// Anchor cloud of the last window.
    pub final_anchor: GaussianCloud,
    pub log: Vec<LogRow>,
    pub slides: Vec<SlideCheck>,
    pub window_size: usize,
    /// Windows restored from checkpoints instead of recomputed.
    pub resumed_windows: usize,
}

/// Shared read-only inputs of a run.
struct Runner<'a> {
    problem: &'a ReconstructionProblem,
    cfg: &'a RunConfig,
    layout: Arc<NodeLayout>,
    weight_unit: f64,
    fd_step: f64,
    total_weight_iterations: u64,
    checkpoints: Option<&'a Path>,
}

impl Runner<'_> {
    fn ctx<'b>(&'b self, collocation: &'b [Vec3]) -> ObjectiveContext<'b> {
        ObjectiveContext {
            observations: &self.problem.observations,
            weights: &self.cfg.loss,
            advection: self.cfg.advection,
            frame_dt: self.problem.frame_dt,
            inflow: self.problem.inflow.as_ref().map(|r| (r, self.problem.inflow_seed)),
            collocation,
            fd_step: self.fd_step,
        }
    }

    fn weight_lr(&self, k: u64) -> f64 {
        self.cfg.weight_learning_rate(k, self.total_weight_iterations)
    }

    /// Runs `iters` Adam steps on the current window; moments start fresh.
    fn stage(&self, st: &mut WindowState, iters: usize, log: &mut Vec<LogRow>, check_continuity: bool) -> Result<()> {
        st.optimizer.reset();
        let sampler = CollocationSampler::new(self.cfg.collocation_samples, self.problem.domain, self.cfg.seed)?;
        let trains_weights = !st.params.fields.is_empty() && !st.params.is_frozen(Group::Weights);
        let needs_samples = !st.params.fields.is_empty() && (self.cfg.loss.lambda_reg > 0.0 || self.cfg.loss.lambda_vor > 0.0);
        for _ in 0..iters {
            let samples = if needs_samples { sampler.draw(st.iteration) } else { Vec::new() };
            let ctx = self.ctx(&samples);
            let r = objective_and_gradient(&st.params, &st.spec, &ctx).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!(
                    "{m}; last finite state is the checkpoint before window {} (iteration {})",
                    st.window_index, st.iteration
                )),
                other => other,
            })?;
            if check_continuity {
                let expected = advect_frame(&st.params.root_positions, &st.params.fields[0], self.problem.frame_dt, &self.cfg.advection)?;
                if r.anchor_positions[..expected.len()] != expected[..] {
                    return Err(Error::domain(format!(
                        "anchor continuity violated at frame {} (iteration {})",
                        st.spec.anchor_frame, st.iteration
                    )));
                }
            }
            log.push(LogRow {
                iter: st.iteration,
                window: st.window_index,
                objective: r.terms.total,
                l_img: r.terms.image,
                l_aniso: r.terms.aniso,
                l_reg: r.terms.reg,
                l_vor: r.terms.vor,
            });
            let mut lrs = [self.cfg.lr_attributes; 6];
            lrs[Group::Weights as usize] = self.weight_lr(st.weight_iteration);
            lrs[Group::Positions as usize] = self.cfg.lr_positions;
            st.optimizer.step(&mut st.params, &r, &LearningRates(lrs), self.weight_unit);
            st.iteration += 1;
            if trains_weights {
                st.weight_iteration += 1;
            }
        }
        Ok(())
    }

    fn injected_at(&self, frame: usize) -> Vec<GaussianPrimitive> {
        match &self.problem.inflow {
            Some(r) => r.injected(self.problem.inflow_seed, frame),
            None => Vec::new(),
        }
    }

    /// Frame-0 fit followed by the progressive horizons `1..=w`.
    fn warmup(&self, w: usize, log: &mut Vec<LogRow>) -> Result<WindowState> {
        let cloud = initial_cloud(&self.problem.observations, self.problem.domain, self.cfg.gaussians, self.cfg.seed)?;
        let mut params = ParameterSet::new(Vec::new(), cloud.positions(), cloud.primitives.clone());
        params.thaw(Group::Positions);
        let mut st = WindowState {
            spec: WindowSpec { root_frame: 0, anchor_frame: 0, horizon: 0 },
            window_size: w,
            phase: Phase::WarmUp,
            params,
            frozen_fields: Vec::new(),
            frozen_clouds: Vec::new(),
            optimizer: AdamState::default(),
            iteration: 0,
            weight_iteration: 0,
            window_index: 0,
        };
        self.stage(&mut st, self.cfg.frame0_iterations, log, false)?;
        st.params.freeze(Group::Positions);
        // Keep anchor records in sync with the fitted roots.
        for (a, p) in st.params.anchor.iter_mut().zip(&st.params.root_positions) {
            a.position = *p;
        }
        for h in 1..=w {
            let next = match st.params.fields.last() {
                Some(f) => f.clone(),
                None => DfkField::zeros(self.layout.clone()),
            };
            st.params.fields.push(next);
            st.spec.horizon = h;
            let iters = self.cfg.warmup_iterations / w + usize::from(h <= self.cfg.warmup_iterations % w);
            self.stage(&mut st, iters, log, false)?;
        }
        Ok(st)
    }

    /// Advances the window by one frame and optimizes it.
    fn slide(&self, st: &mut WindowState, log: &mut Vec<LogRow>) -> Result<SlideCheck> {
        let s = st.spec.anchor_frame + 1;
        let w = st.window_size;
        let empty: [Vec3; 0] = [];
        let prev_anchor = anchor_cloud(&st.params, &st.spec, &self.ctx(&empty))?;
        st.frozen_clouds.push(prev_anchor.clone());
        while st.spec.root_frame < s - 1 {
            st.frozen_fields.push(st.params.fields.remove(0));
            st.spec.root_frame += 1;
        }
        let last = st.params.fields.last().expect("window has fields").clone();
        st.params.fields.push(last);
        st.params.root_positions = prev_anchor.positions();
        let mut anchor = prev_anchor.primitives.clone();
        anchor.extend(self.injected_at(s));
        st.params.anchor = anchor;
        st.spec = WindowSpec { root_frame: s - 1, anchor_frame: s, horizon: w };
        st.phase = Phase::Sliding;
        st.window_index += 1;

        let frozen_before = (st.frozen_fields.clone(), st.frozen_clouds.clone(), st.params.root_positions.clone());
        self.stage(st, self.cfg.sliding_iterations, log, true)?;
        let final_anchor = anchor_cloud(&st.params, &st.spec, &self.ctx(&empty))?;
        let expected = advect_frame(&st.params.root_positions, &st.params.fields[0], self.problem.frame_dt, &self.cfg.advection)?;
        let anchor_continuity = final_anchor.positions()[..expected.len()] == expected[..];
        let frozen_unchanged = fields_identical(&frozen_before.0, &st.frozen_fields)
            && frozen_before.1 == st.frozen_clouds
            && frozen_before.2 == st.params.root_positions;
        if !anchor_continuity || !frozen_unchanged {
            return Err(Error::domain(format!("sliding invariants violated at anchor frame {s}")));
        }
        Ok(SlideCheck { anchor_frame: s, anchor_continuity, frozen_unchanged })
    }
}

fn fields_identical(a: &[DfkField], b: &[DfkField]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| x.weights.iter().zip(&y.weights).all(|(p, q)| p.iter().zip(q.iter()).all(|(u, v)| u.to_bits() == v.to_bits())))
}

/// Seeds the frame-0 cloud: points whose projections land on bright pixels in
/// every camera, sized from the volume they cover.
pub fn initial_cloud(obs: &ObservationSet, domain: Aabb, count: usize, seed: u64) -> Result<GaussianCloud> {
    let mut rng = substream(seed, "init", 0);
    let projections: Vec<_> = obs.cameras.iter().map(|c| c.projection()).collect();
    let thresholds: Vec<f64> = (0..obs.cameras.len()).map(|c| obs.get(0, c).map(|img| 0.2 * img.max())).collect::<Result<_>>()?;
    let bright = |x: &Vec3| {
        obs.cameras.iter().enumerate().all(|(c, cam)| {
            let (m, off) = &projections[c];
            let p = m * x + off;
            if !(p.x >= 0.0 && p.y >= 0.0 && p.x < cam.width as f64 && p.y < cam.height as f64) {
                return false;
            }
            let img = &obs.frames[0][c];
            thresholds[c] > 0.0 && img.get(p.x as usize, p.y as usize) > thresholds[c]
        })
    };
    let mut points = Vec::with_capacity(count);
    let max_tries = 2000 * count;
    let mut tries = 0;
    while points.len() < count && tries < max_tries {
        let x = domain.sample(&mut rng);
        tries += 1;
        if bright(&x) {
            points.push(x);
        }
    }
    let covered = if points.len() == count { points.len() as f64 / tries as f64 } else { 1.0 };
    while points.len() < count {
        points.push(domain.sample(&mut rng));
    }
    let volume = covered * domain.volume();
    let scale = 0.5 * (volume / count as f64).cbrt();
    let prims = points
        .into_iter()
        .map(|x| GaussianPrimitive {
            position: x,
            log_scales: Vec3::repeat(scale.ln() + rng.gen_range(-0.05..0.05)),
            rotation: crate::gaussians::IDENTITY_QUAT,
            opacity_logit: logit(0.5),
            emission: 1.0,
        })
        .collect();
    Ok(GaussianCloud::new(prims, 0))
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format_version: u32,
    window_index: usize,
    phase: Phase,
    root_frame: usize,
    anchor_frame: usize,
    horizon: usize,
    window_size: usize,
    iteration: u64,
    weight_iteration: u64,
    frozen_field_count: usize,
    frozen_cloud_count: usize,
    loss: LossWeights,
    files: Vec<String>,
}

fn checkpoint_dir(root: &Path, index: usize) -> PathBuf {
    root.join(format!("window_{index:03}"))
}

fn save_checkpoint(root: &Path, st: &WindowState, log: &[LogRow], loss: &LossWeights) -> Result<()> {
    let dir = checkpoint_dir(root, st.window_index);
    let mut all = st.frozen_fields.clone();
    all.extend(st.params.fields.iter().cloned());
    let mut files = vec!["fields/".to_string(), "anchor.gcl".into(), "root.bin".into(), "optimizer.adm".into(), "log.csv".into()];
    TimeVaryingField::new(all, 1.0)?.save_dir(&dir.join("fields"))?;
    GaussianCloud::new(st.params.anchor.clone(), st.spec.anchor_frame).save(&dir.join("anchor.gcl"))?;
    let mut w = ByteWriter::new(b"RTP1");
    w.u64(st.params.root_positions.len() as u64);
    for p in &st.params.root_positions {
        w.f64s(p.iter().copied());
    }
    write_file(&dir.join("root.bin"), &w.buf)?;
    for c in &st.frozen_clouds {
        let name = format!("frozen_{:03}.gcl", c.frame_index);
        c.save(&dir.join(&name))?;
        files.push(name);
    }
    write_file(&dir.join("optimizer.adm"), &st.optimizer.to_bytes())?;
    write_file(&dir.join("log.csv"), log_csv(log).as_bytes())?;
    // The manifest goes last: its presence marks a complete checkpoint.
    write_json(
        &dir.join("manifest.json"),
        &CheckpointManifest {
            format_version: 1,
            window_index: st.window_index,
            phase: st.phase,
            root_frame: st.spec.root_frame,
            anchor_frame: st.spec.anchor_frame,
            horizon: st.spec.horizon,
            window_size: st.window_size,
            iteration: st.iteration,
            weight_iteration: st.weight_iteration,
            frozen_field_count: st.frozen_fields.len(),
            frozen_cloud_count: st.frozen_clouds.len(),
            loss: *loss,
            files,
        },
    )
}

/// Index of the newest complete checkpoint under `root`.
pub fn latest_checkpoint(root: &Path) -> Option<usize> {
    let mut best = None;
    for entry in std::fs::read_dir(root).ok()?.flatten() {
        let name = entry.file_name();
        let name = name.to_string_lossy();
        if let Some(idx) = name.strip_prefix("window_").and_then(|s| s.parse::<usize>().ok()) {
            if entry.path().join("manifest.json").is_file() && best.is_none_or(|b| idx > b) {
                best = Some(idx);
            }
        }
    }
    best
}

fn load_checkpoint(root: &Path, index: usize, layout: &Arc<NodeLayout>) -> Result<(WindowState, Vec<LogRow>)> {
    let dir = checkpoint_dir(root, index);
    let m: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    let fields = TimeVaryingField::load_dir(&dir.join("fields"))?;
    if fields.layout().nodes() != layout.nodes() {
        return Err(Error::domain("checkpoint node lattice differs from the configured lattice"));
    }
    let mut frames: Vec<DfkField> = fields.frames.into_iter().map(|f| DfkField { layout: layout.clone(), weights: f.weights }).collect();
    let trainable = frames.split_off(m.frozen_field_count);
    let anchor = GaussianCloud::load(&dir.join("anchor.gcl"))?;
    let data = read_file(&dir.join("root.bin"))?;
    let mut r = ByteReader::new(&data, b"RTP1", "RTP1")?;
    let n = r.usize()?;
    let root: Vec<Vec3> = r.f64s(3 * n)?.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect();
    r.finish()?;
    let frozen_clouds = (0..m.frozen_cloud_count).map(|f| GaussianCloud::load(&dir.join(format!("frozen_{f:03}.gcl")))).collect::<Result<_>>()?;
    let optimizer = AdamState::from_bytes(&read_file(&dir.join("optimizer.adm"))?)?;
    let log = parse_log_csv(&String::from_utf8_lossy(&read_file(&dir.join("log.csv"))?))?;
    let params = ParameterSet::new(trainable, root, anchor.primitives);
    Ok((
        WindowState {
            spec: WindowSpec { root_frame: m.root_frame, anchor_frame: m.anchor_frame, horizon: m.horizon },
            window_size: m.window_size,
            phase: m.phase,
            params,
            frozen_fields: frames,
            frozen_clouds,
            optimizer,
            iteration: m.iteration,
            weight_iteration: m.weight_iteration,
            window_index: m.window_index,
        },
        log,
    ))
}

/// Runs the whole two-phase optimization. With `checkpoints` set, each completed
/// window is written to `window_NNN/`; with `resume` also set, the newest complete
/// checkpoint is loaded and only the remaining windows are computed.
pub fn reconstruct(problem: &ReconstructionProblem, cfg: &RunConfig, checkpoints: Option<&Path>, resume: bool) -> Result<Reconstruction> {
    cfg.validate()?;
    let n_frames = problem.observations.frame_count();
    if n_frames < 2 {
        return Err(Error::domain("reconstruction needs at least two observed frames"));
    }
    let w = cfg.window_size.min(n_frames - 1);
    let layout = Arc::new(NodeLayout::lattice(problem.domain, cfg.lattice.resolution, cfg.lattice.overlap)?);
    let support = layout.max_support();
    let slides = n_frames - 1 - w;
    let runner = Runner {
        problem,
        cfg,
        weight_unit: cfg.velocity_scale * support * support / 112.0,
        fd_step: cfg.fd_step_fraction * problem.domain.diagonal(),
        total_weight_iterations: (cfg.warmup_iterations + slides * cfg.sliding_iterations) as u64,
        checkpoints,
        layout,
    };
    let mut log = Vec::new();
    let mut resumed_windows = 0;
    let restored = match (checkpoints, resume) {
        (Some(root), true) => match latest_checkpoint(root) {
            Some(idx) => {
                let (st, l) = load_checkpoint(root, idx, &runner.layout)?;
                if st.window_size != w {
                    return Err(Error::domain(format!("checkpoint window size {} differs from {w}", st.window_size)));
                }
                log = l;
                resumed_windows = idx + 1;
                Some(st)
            }
            None => None,
        },
        _ => None,
    };
    let mut st = match restored {
        Some(st) => st,
        None => {
            let st = runner.warmup(w, &mut log)?;
            if let Some(root) = runner.checkpoints {
                save_checkpoint(root, &st, &log, &cfg.loss)?;
            }
            st
        }
    };
    let mut checks = Vec::new();
    while st.spec.anchor_frame + w < n_frames - 1 {
        checks.push(runner.slide(&mut st, &mut log)?);
        if let Some(root) = runner.checkpoints {
            save_checkpoint(root, &st, &log, &cfg.loss)?;
        }
    }
    let empty: [Vec3; 0] = [];
    let final_anchor = anchor_cloud(&st.params, &st.spec, &runner.ctx(&empty))?;
    let cloud0 = match st.frozen_clouds.first() {
        Some(c) => c.clone(),
        None => final_anchor.clone(),
    };
    let mut frames = st.frozen_fields.clone();
    frames.extend(st.params.fields.iter().cloned());
    Ok(Reconstruction {
        field: TimeVaryingField::new(frames, problem.frame_dt)?,
        cloud0,
        final_anchor,
        log,
        slides: checks,
        window_size: w,
        resumed_windows,
    })
}
