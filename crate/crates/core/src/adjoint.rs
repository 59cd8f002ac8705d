//! Reverse-mode gradient of the window objective with respect to the DFK weights
//! and the anchor attributes.
//!
//! The forward pass advects root positions through every field of the window,
//! splats each supervised frame with every camera and scores it. The reverse pass
//! walks the same steps backwards: image-loss gradients go through the splatting
//! transmittance product, then through every Runge-Kutta stage of every substep
//! (the discrete adjoint of the integrator, so gradients match the forward
//! discretization exactly).

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use serde::{Deserialize, Serialize};

use crate::advection::{advect_frame, advect_frame_backward, advect_frame_recorded, AdvectionConfig, FrameTape};
use crate::dfk_field::DfkField;
use crate::error::{Error, Result};
use crate::gaussians::{aniso_term, aniso_term_grad, GaussianCloud, GaussianPrimitive, InflowRegion, Quat};
use crate::geometry::Vec3;
use crate::physics::{physics_terms, PhysicsRequest};
use crate::render2d::{l1_dssim_loss, l1_dssim_loss_with_grad, sign, splat_backward, splat_primitives, splat_signature, ObservationSet};
use crate::sliding_window::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Weights,
    Positions,
    OpacityLogits,
    LogScales,
    Rotations,
    Emissions,
}

impl Group {
    pub const ALL: [Group; 6] =
        [Group::Weights, Group::Positions, Group::OpacityLogits, Group::LogScales, Group::Rotations, Group::Emissions];

    pub fn name(self) -> &'static str {
        match self {
            Group::Weights => "weights",
            Group::Positions => "positions",
            Group::OpacityLogits => "opacity_logits",
            Group::LogScales => "log_scales",
            Group::Rotations => "rotations",
            Group::Emissions => "emissions",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

/// Trainable state of one window.
///
/// `fields[k]` drives frame `root + k`. `root_positions` are the centers at the
/// root frame; the first `root_positions.len()` entries of `anchor` take their
/// positions from advection, the rest (primitives injected between root and
/// anchor) keep their stored injection positions.
#[derive(Clone, Debug)]
pub struct ParameterSet {
    pub fields: Vec<DfkField>,
    pub root_positions: Vec<Vec3>,
    pub anchor: Vec<GaussianPrimitive>,
    frozen: u8,
}

impl ParameterSet {
    /// Positions start frozen; everything else is trainable.
    pub fn new(fields: Vec<DfkField>, root_positions: Vec<Vec3>, anchor: Vec<GaussianPrimitive>) -> Self {
        ParameterSet { fields, root_positions, anchor, frozen: Group::Positions.bit() }
    }

    pub fn freeze(&mut self, g: Group) {
        self.frozen |= g.bit();
    }

    pub fn thaw(&mut self, g: Group) {
        self.frozen &= !g.bit();
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen & g.bit() != 0
    }

    pub fn trainable(&self) -> Vec<Group> {
        Group::ALL.into_iter().filter(|g| !self.is_frozen(*g)).collect()
    }

    /// Number of scalars in a group.
    pub fn count(&self, g: Group) -> usize {
        let n = self.anchor.len();
        match g {
            Group::Weights => self.fields.iter().map(|f| 3 * f.weights.len()).sum(),
            Group::Positions => 3 * self.root_positions.len(),
            Group::OpacityLogits | Group::Emissions => n,
            Group::LogScales => 3 * n,
            Group::Rotations => 4 * n,
        }
    }

    fn weight_index(&self, i: usize) -> (usize, usize, usize) {
        let per = 3 * self.fields[0].weights.len();
        (i / per, (i % per) / 3, i % 3)
    }

    /// Flat scalar access used by finite differences and the optimizer.
    pub fn get(&self, g: Group, i: usize) -> f64 {
        match g {
            Group::Weights => {
                let (f, n, k) = self.weight_index(i);
                self.fields[f].weights[n][k]
            }
            Group::Positions => self.root_positions[i / 3][i % 3],
            Group::OpacityLogits => self.anchor[i].opacity_logit,
            Group::LogScales => self.anchor[i / 3].log_scales[i % 3],
            Group::Rotations => self.anchor[i / 4].rotation[i % 4],
            Group::Emissions => self.anchor[i].emission,
        }
    }

    pub fn set(&mut self, g: Group, i: usize, v: f64) {
        match g {
            Group::Weights => {
                let (f, n, k) = self.weight_index(i);
                self.fields[f].weights[n][k] = v;
            }
            Group::Positions => self.root_positions[i / 3][i % 3] = v,
            Group::OpacityLogits => self.anchor[i].opacity_logit = v,
            Group::LogScales => self.anchor[i / 3].log_scales[i % 3] = v,
            Group::Rotations => self.anchor[i / 4].rotation[i % 4] = v,
            Group::Emissions => self.anchor[i].emission = v,
        }
    }
}

/// Frames covered by one objective evaluation: advection starts at `root_frame`,
/// supervision covers `anchor_frame ..= anchor_frame + horizon`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub root_frame: usize,
    pub anchor_frame: usize,
    pub horizon: usize,
}

impl WindowSpec {
    pub fn last_frame(&self) -> usize {
        self.anchor_frame + self.horizon
    }

    /// Number of fields the window drives (`root .. last`).
    pub fn field_count(&self) -> usize {
        self.last_frame() - self.root_frame
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchor_frame < self.root_frame {
            return Err(Error::domain(format!(
                "anchor frame {} precedes root frame {}",
                self.anchor_frame, self.root_frame
            )));
        }
        Ok(())
    }
}

/// Everything the objective needs besides the trainable parameters.
#[derive(Clone, Copy)]
pub struct ObjectiveContext<'a> {
    pub observations: &'a ObservationSet,
    pub weights: &'a LossWeights,
    pub advection: AdvectionConfig,
    pub frame_dt: f64,
    pub inflow: Option<(&'a InflowRegion, u64)>,
    pub collocation: &'a [Vec3],
    pub fd_step: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveTerms {
    /// Discounted image loss, already summed over the horizon.
    pub image: f64,
    pub aniso: f64,
    /// Only evaluated when its weight is positive; zero otherwise.
    pub reg: f64,
    /// Only evaluated when its weight is positive; zero otherwise.
    pub vor: f64,
    pub total: f64,
}

/// Result of comparing the reverse gradient with central differences.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FdCheck {
    pub checked: usize,
    /// Entries skipped because the perturbation crossed a render or L1 discontinuity.
    pub rejected: usize,
    /// Over entries with magnitude at least `1e-6`.
    pub max_rel_error: f64,
    /// Over entries with magnitude below `1e-6`.
    pub max_abs_error_small: f64,
    pub worst: Option<(Group, usize)>,
}

impl FdCheck {
    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_error <= rel_tol && self.max_abs_error_small <= abs_tol
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradientReport {
    pub terms: ObjectiveTerms,
    /// `[field][node]`.
    pub weights: Option<Vec<Vec<Vec3>>>,
    pub positions: Option<Vec<Vec3>>,
    pub opacity_logits: Option<Vec<f64>>,
    pub log_scales: Option<Vec<Vec3>>,
    pub rotations: Option<Vec<Quat>>,
    pub emissions: Option<Vec<f64>>,
    /// Anchor-frame centers produced by the forward pass.
    pub anchor_positions: Vec<Vec3>,
    pub fd_check: Option<FdCheck>,
}

impl GradientReport {
    pub fn objective(&self) -> f64 {
        self.terms.total
    }

    pub fn has(&self, g: Group) -> bool {
        match g {
            Group::Weights => self.weights.is_some(),
            Group::Positions => self.positions.is_some(),
            Group::OpacityLogits => self.opacity_logits.is_some(),
            Group::LogScales => self.log_scales.is_some(),
            Group::Rotations => self.rotations.is_some(),
            Group::Emissions => self.emissions.is_some(),
        }
    }

    /// Flat entry in the same order as [`ParameterSet::get`]; 0 for frozen groups.
    pub fn get(&self, g: Group, i: usize) -> f64 {
        match g {
            Group::Weights => self.weights.as_ref().map_or(0.0, |w| {
                let per = 3 * w[0].len();
                w[i / per][(i % per) / 3][i % 3]
            }),
            Group::Positions => self.positions.as_ref().map_or(0.0, |p| p[i / 3][i % 3]),
            Group::OpacityLogits => self.opacity_logits.as_ref().map_or(0.0, |v| v[i]),
            Group::LogScales => self.log_scales.as_ref().map_or(0.0, |v| v[i / 3][i % 3]),
            Group::Rotations => self.rotations.as_ref().map_or(0.0, |v| v[i / 4][i % 4]),
            Group::Emissions => self.emissions.as_ref().map_or(0.0, |v| v[i]),
        }
    }
}

fn injected_between(ctx: &ObjectiveContext<'_>, after: usize, upto: usize) -> usize {
    ctx.inflow.map_or(0, |(r, _)| r.injections_per_frame * upto.saturating_sub(after))
}

fn check_shapes(p: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<()> {
    spec.validate()?;
    ctx.weights.validate()?;
    if p.fields.len() != spec.field_count() {
        return Err(Error::domain(format!(
            "window {}..={} needs {} fields, parameter set has {}",
            spec.root_frame,
            spec.last_frame(),
            spec.field_count(),
            p.fields.len()
        )));
    }
    if let Some(f) = p.fields.iter().find(|f| f.weights.len() != p.fields[0].weights.len()) {
        return Err(Error::domain(format!("fields disagree on node count ({} vs {})", f.weights.len(), p.fields[0].weights.len())));
    }
    let want = p.root_positions.len() + injected_between(ctx, spec.root_frame, spec.anchor_frame);
    if p.anchor.len() != want {
        return Err(Error::domain(format!("anchor has {} primitives, expected {want}", p.anchor.len())));
    }
    if !(ctx.frame_dt.is_finite() && ctx.frame_dt > 0.0) {
        return Err(Error::domain(format!("frame_dt must be positive, got {}", ctx.frame_dt)));
    }
    if !(ctx.fd_step.is_finite() && ctx.fd_step > 0.0) {
        return Err(Error::domain(format!("fd_step must be positive, got {}", ctx.fd_step)));
    }
    for j in 0..=spec.horizon {
        for c in 0..ctx.observations.cameras.len() {
            ctx.observations.get(spec.anchor_frame + j, c)?;
        }
    }
    Ok(())
}

struct Forward {
    terms: ObjectiveTerms,
    /// Centers per frame `root ..= last`.
    snapshots: Vec<Vec<Vec3>>,
    tapes: Vec<FrameTape>,
}

type Advanced = (Vec<Vec<Vec3>>, Vec<FrameTape>, Vec<GaussianPrimitive>);

/// Advects the root positions through the window. Returns the per-frame centers
/// (`root ..= last`), the tapes when `record` is set, and the fixed attributes of
/// primitives injected after the anchor frame.
fn advance(p: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>, record: bool) -> Result<Advanced> {
    let mut snapshots = vec![p.root_positions.clone()];
    let mut tapes = Vec::new();
    let mut late = Vec::new();
    for (k, field) in p.fields.iter().enumerate() {
        let frame = spec.root_frame + k;
        let cur = snapshots.last().expect("root snapshot");
        let mut next = if record {
            let (out, tape) = advect_frame_recorded(cur, field, ctx.frame_dt, &ctx.advection)
                .map_err(|e| Error::NonFinite(format!("frame {frame}: {e}")))?;
            tapes.push(tape);
            out
        } else {
            advect_frame(cur, field, ctx.frame_dt, &ctx.advection).map_err(|e| Error::NonFinite(format!("frame {frame}: {e}")))?
        };
        if let Some((region, seed)) = ctx.inflow {
            let fresh = region.injected(seed, frame + 1);
            if frame < spec.anchor_frame {
                // Positions of anchor-time injections come from the anchor record.
                let base = next.len();
                next.extend(p.anchor[base..base + fresh.len()].iter().map(|g| g.position));
            } else {
                next.extend(fresh.iter().map(|g| g.position));
                late.extend(fresh);
            }
        }
        snapshots.push(next);
    }
    Ok((snapshots, tapes, late))
}

/// The anchor-frame cloud the window renders: anchor attributes at advected centers.
pub fn anchor_cloud(params: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<GaussianCloud> {
    spec.validate()?;
    if params.fields.len() < spec.anchor_frame - spec.root_frame {
        return Err(Error::domain("window has fewer fields than anchor offset"));
    }
    let mut p = params.clone();
    p.fields.truncate(spec.anchor_frame - spec.root_frame);
    let sub = WindowSpec { horizon: 0, ..*spec };
    let (snaps, _, _) = advance(&p, &sub, ctx, false)?;
    let pos = snaps.last().expect("anchor snapshot");
    Ok(GaussianCloud::new(
        params.anchor.iter().zip(pos).map(|(g, x)| GaussianPrimitive { position: *x, ..*g }).collect(),
        spec.anchor_frame,
    ))
}

/// Shared forward pass; records what the reverse pass needs when `grads` is given.
fn forward(
    p: &ParameterSet,
    spec: &WindowSpec,
    ctx: &ObjectiveContext<'_>,
    mut grads: Option<&mut Accum>,
    mut signature: Option<&mut dyn FnMut(u64)>,
) -> Result<Forward> {
    check_shapes(p, spec, ctx)?;
    let lw = ctx.weights;
    let (snapshots, tapes, late) = advance(p, spec, ctx, grads.is_some())?;

    let n_anchor = p.anchor.len();
    let ncam = ctx.observations.cameras.len();
    let discounts = lw.discounts(spec.horizon);
    let mut terms = ObjectiveTerms::default();
    for (j, disc) in discounts.iter().enumerate() {
        let frame = spec.anchor_frame + j;
        let si = frame - spec.root_frame;
        let pos = &snapshots[si];
        let prims: Vec<GaussianPrimitive> = pos
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let attrs = if i < n_anchor { &p.anchor[i] } else { &late[i - n_anchor] };
                GaussianPrimitive { position: *x, ..*attrs }
            })
            .collect();
        let scale = disc / ncam as f64;
        let mut frame_loss = 0.0;
        for (c, cam) in ctx.observations.cameras.iter().enumerate() {
            let obs = ctx.observations.get(frame, c)?;
            let out = splat_primitives(&prims, cam);
            if let Some(sig) = signature.as_deref_mut() {
                splat_signature(&out, sig);
                for (a, b) in out.image.data.iter().zip(&obs.data) {
                    sig((sign(a - b) + 1.0) as u64);
                }
                let argmax = out.image.data.iter().enumerate().fold((0usize, f64::NEG_INFINITY), |m, (i, &v)| if v > m.1 { (i, v) } else { m });
                sig(argmax.0 as u64);
                sig((argmax.1 > 1.0 && argmax.1 >= obs.max()) as u64);
            }
            let loss = match grads.as_deref_mut() {
                Some(acc) => {
                    let (loss, mut g) = l1_dssim_loss_with_grad(&out.image, obs, lw.lambda_ssim)?;
                    if *disc != 0.0 {
                        for v in g.iter_mut() {
                            *v *= scale;
                        }
                        let pg = splat_backward(&prims, cam, &out, &g);
                        for (i, gi) in pg.iter().enumerate() {
                            acc.pos[si][i] += gi.position;
                            if i < n_anchor {
                                acc.attr[i].add(gi);
                            }
                        }
                    }
                    loss
                }
                None => l1_dssim_loss(&out.image, obs, lw.lambda_ssim)?,
            };
            frame_loss += loss;
        }
        terms.image += disc * frame_loss / ncam as f64;
    }

    terms.aniso = p.anchor.iter().map(|g| aniso_term(&g.log_scales)).sum();
    if let Some(acc) = grads.as_deref_mut() {
        if lw.lambda_aniso != 0.0 {
            for (i, g) in p.anchor.iter().enumerate() {
                acc.attr[i].log_scales += aniso_term_grad(&g.log_scales) * lw.lambda_aniso;
            }
        }
    }

    let req = PhysicsRequest {
        fields: &p.fields,
        frame_dt: ctx.frame_dt,
        samples: ctx.collocation,
        fd_step: ctx.fd_step,
        with_reg: lw.lambda_reg > 0.0,
        with_vor: lw.lambda_vor > 0.0,
    };
    let phys = match grads.as_deref_mut().and_then(|a| a.weights.as_mut()) {
        Some(gw) => physics_terms(&req, Some((gw, lw.lambda_reg, lw.lambda_vor)), signature),
        None => physics_terms(&req, None, signature),
    };
    terms.reg = phys.reg;
    terms.vor = phys.vor;
    terms.total = terms.image + lw.lambda_aniso * terms.aniso + lw.lambda_reg * terms.reg + lw.lambda_vor * terms.vor;
    if !terms.total.is_finite() {
        return Err(Error::NonFinite(format!(
            "objective is not finite for window anchored at frame {} (image {}, aniso {}, reg {}, vor {})",
            spec.anchor_frame, terms.image, terms.aniso, terms.reg, terms.vor
        )));
    }
    Ok(Forward { terms, snapshots, tapes })
}

struct Accum {
    pos: Vec<Vec<Vec3>>,
    attr: Vec<crate::render2d::PrimitiveGrad>,
    weights: Option<Vec<Vec<Vec3>>>,
}

/// Objective only, without recording anything.
pub fn objective(params: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<ObjectiveTerms> {
    Ok(forward(params, spec, ctx, None, None)?.terms)
}

/// Objective plus a hash of every discrete choice made while evaluating it.
fn objective_with_signature(params: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<(f64, u64)> {
    let mut h = DefaultHasher::new();
    let mut sink = |v: u64| h.write_u64(v);
    let t = forward(params, spec, ctx, None, Some(&mut sink))?.terms;
    Ok((t.total, h.finish()))
}

/// Total objective and its exact reverse-mode gradient for every unfrozen group.
pub fn objective_and_gradient(params: &ParameterSet, spec: &WindowSpec, ctx: &ObjectiveContext<'_>) -> Result<GradientReport> {
    check_shapes(params, spec, ctx)?;
    let n_frames = spec.field_count() + 1;
    let mut max_count = params.root_positions.len() + injected_between(ctx, spec.root_frame, spec.last_frame());
    max_count = max_count.max(params.anchor.len());
    let weights_on = !params.is_frozen(Group::Weights);
    let mut acc = Accum {
        pos: vec![vec![Vec3::zeros(); max_count]; n_frames],
        attr: vec![Default::default(); params.anchor.len()],
        weights: weights_on.then(|| params.fields.iter().map(|f| vec![Vec3::zeros(); f.weights.len()]).collect()),
    };
    let fwd = forward(params, spec, ctx, Some(&mut acc), None)?;

    let positions_on = !params.is_frozen(Group::Positions);
    let mut g_root = None;
    if weights_on || positions_on {
        let mut g = acc.pos[n_frames - 1].clone();
        for k in (0..params.fields.len()).rev() {
            let count = fwd.snapshots[k].len();
            g.truncate(count);
            let g_in = advect_frame_backward(&fwd.tapes[k], &params.fields[k], &g, acc.weights.as_mut().map(|w| &mut w[k][..]));
            g = g_in.iter().zip(&acc.pos[k]).map(|(a, b)| a + b).collect();
        }
        g.truncate(params.root_positions.len());
        g_root = Some(g);
    }

    let anchor_positions = fwd.snapshots[spec.anchor_frame - spec.root_frame].clone();
    let attr = &acc.attr;
    let on = |g: Group| !params.is_frozen(g);
    let report = GradientReport {
        terms: fwd.terms,
        weights: acc.weights,
        positions: if positions_on { g_root } else { None },
        opacity_logits: on(Group::OpacityLogits).then(|| attr.iter().map(|a| a.opacity_logit).collect()),
        log_scales: on(Group::LogScales).then(|| attr.iter().map(|a| a.log_scales).collect()),
        rotations: on(Group::Rotations).then(|| attr.iter().map(|a| a.rotation).collect()),
        emissions: on(Group::Emissions).then(|| attr.iter().map(|a| a.emission).collect()),
        anchor_positions,
        fd_check: None,
    };
    check_finite(&report, params, spec)?;
    Ok(report)
}

fn check_finite(r: &GradientReport, p: &ParameterSet, spec: &WindowSpec) -> Result<()> {
    if let Some(w) = &r.weights {
        for (k, f) in w.iter().enumerate() {
            if f.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
                return Err(Error::NonFinite(format!("gradient of group weights at frame {} is not finite", spec.root_frame + k)));
            }
        }
    }
    for g in Group::ALL.into_iter().skip(1) {
        if r.has(g) && (0..p.count(g)).any(|i| !r.get(g, i).is_finite()) {
            let frame = if g == Group::Positions { spec.root_frame } else { spec.anchor_frame };
            return Err(Error::NonFinite(format!("gradient of group {} at frame {frame} is not finite", g.name())));
        }
    }
    Ok(())
}

/// Central-difference check of a reverse gradient.
///
/// Every `stride`-th entry of every unfrozen group is perturbed by `±step`; weights
/// are perturbed by `±step * weight_scale`, i.e. `step` in the normalized units the
/// optimizer works in, and compared as `dL/dtheta = weight_scale * dL/dw`. Entries
/// whose perturbation changes the discrete structure of the objective (footprint
/// coverage, draw order, opacity clamp, L1 sign pattern, SSIM range pixel) are
/// counted as rejected instead of compared.
pub fn finite_difference_check(
    params: &ParameterSet,
    spec: &WindowSpec,
    ctx: &ObjectiveContext<'_>,
    report: &GradientReport,
    step: f64,
    weight_scale: f64,
    stride: usize,
) -> Result<FdCheck> {
    if !(step > 0.0 && weight_scale > 0.0) || stride == 0 {
        return Err(Error::domain("finite-difference step, weight scale and stride must be positive"));
    }
    let (_, base_sig) = objective_with_signature(params, spec, ctx)?;
    let mut out = FdCheck::default();
    let mut worst = 0.0;
    let mut work = params.clone();
    for g in params.trainable() {
        for i in (0..params.count(g)).step_by(stride) {
            let unit = if g == Group::Weights { weight_scale } else { 1.0 };
            let v = params.get(g, i);
            work.set(g, i, v + step * unit);
            let (fp, sp) = objective_with_signature(&work, spec, ctx)?;
            work.set(g, i, v - step * unit);
            let (fm, sm) = objective_with_signature(&work, spec, ctx)?;
            work.set(g, i, v);
            if sp != base_sig || sm != base_sig {
                out.rejected += 1;
                continue;
            }
            out.checked += 1;
            let fd = (fp - fm) / (2.0 * step);
            let an = report.get(g, i) * unit;
            let mag = fd.abs().max(an.abs());
            let err = (fd - an).abs();
            if mag < 1e-6 {
                out.max_abs_error_small = out.max_abs_error_small.max(err);
            } else {
                let rel = err / mag;
                if rel > out.max_rel_error {
                    out.max_rel_error = rel;
                }
                if rel > worst {
                    worst = rel;
                    out.worst = Some((g, i));
                }
            }
        }
    }
    Ok(out)
}

/// [`objective_and_gradient`] followed by [`finite_difference_check`]; the summary
/// lands in `fd_check`.
pub fn verified_gradient(
    params: &ParameterSet,
    spec: &WindowSpec,
    ctx: &ObjectiveContext<'_>,
    step: f64,
    weight_scale: f64,
    stride: usize,
) -> Result<GradientReport> {
    let mut r = objective_and_gradient(params, spec, ctx)?;
    r.fd_check = Some(finite_difference_check(params, spec, ctx, &r, step, weight_scale, stride)?);
    Ok(r)
}

/// Reverse-mode product of `w -> v(x)` at one point: `dL/dw_i = psi_i(x) g`,
/// using that each `psi_i` is symmetric.
pub fn weight_vjp(field: &DfkField, x: &Vec3, g: &Vec3) -> Vec<Vec3> {
    let mut out = vec![Vec3::zeros(); field.weights.len()];
    let mut cand = Vec::new();
    let mut samples = Vec::new();
    field.layout.samples_at(x, &mut cand, &mut samples);
    for (i, s) in &samples {
        out[*i as usize] += s.apply(g);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rbf_kernel::scalar_kernel_parts;
    use crate::render2d::ObservationSet;
    use crate::scenes::{gradient_check_scene, GradientCheckScene};
    use crate::geometry::{Aabb, Mat3};

    fn ctx<'a>(s: &'a GradientCheckScene, w: &'a LossWeights, inflow: Option<(&'a InflowRegion, u64)>) -> ObjectiveContext<'a> {
        ObjectiveContext {
            observations: &s.observations,
            weights: w,
            advection: AdvectionConfig::default(),
            frame_dt: s.frame_dt,
            inflow,
            collocation: &s.collocation,
            fd_step: s.fd_step,
        }
    }

    #[test]
    fn identity_observations_give_zero() {
        let mut s = gradient_check_scene(1).unwrap();
        let w = LossWeights { lambda_aniso: 0.0, lambda_reg: 0.0, lambda_vor: 0.0, ..Default::default() };
        // Re-render the observations from the current parameters.
        let traj_fields = crate::dfk_field::TimeVaryingField::new(s.params.fields.clone(), 1.0).unwrap();
        let cloud = GaussianCloud::new(s.params.anchor.clone(), 0);
        let t = crate::advection::rollout(&cloud, &traj_fields, 0, 2, &AdvectionConfig::default(), None).unwrap();
        let clouds: Vec<_> = (0..3).map(|k| t.cloud_at(k)).collect();
        s.observations = ObservationSet::render(s.observations.cameras.clone(), &clouds).unwrap();
        let r = objective_and_gradient(&s.params, &s.spec, &ctx(&s, &w, None)).unwrap();
        assert!(r.objective().abs() < 1e-14, "{}", r.objective());
        for g in Group::ALL {
            for i in 0..s.params.count(g) {
                assert!(r.get(g, i).abs() < 1e-10, "{} {i}: {}", g.name(), r.get(g, i));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let s = gradient_check_scene(2).unwrap();
        let w = LossWeights::default();
        let r = verified_gradient(&s.params, &s.spec, &ctx(&s, &w, None), 1e-6, s.weight_scale, 1).unwrap();
        let fd = r.fd_check.unwrap();
        assert!(fd.passes(1e-4, 1e-8), "{fd:?}");
        assert!(fd.rejected * 10 <= fd.checked, "{fd:?}");
    }

    #[test]
    fn sliding_shape_with_inflow_matches_fd() {
        let s = gradient_check_scene(3).unwrap();
        let region = InflowRegion::with_defaults(Aabb::new([0.4, 0.4, 0.3], [0.6, 0.6, 0.4]), 2);
        let w = LossWeights::default();
        let spec = WindowSpec { root_frame: 0, anchor_frame: 1, horizon: 1 };
        let mut p = s.params.clone();
        // Anchor-time injections join the anchor with their default attributes.
        p.anchor.extend(region.injected(5, 1));
        let c = ctx(&s, &w, Some((&region, 5)));
        let r = verified_gradient(&p, &spec, &c, 1e-6, s.weight_scale, 1).unwrap();
        let fd = r.fd_check.clone().unwrap();
        assert!(fd.passes(1e-4, 1e-8), "{fd:?}");
        assert_eq!(r.anchor_positions.len(), 10);
    }

    #[test]
    fn frozen_groups_leave_others_bit_identical() {
        let s = gradient_check_scene(4).unwrap();
        let w = LossWeights::default();
        let c = ctx(&s, &w, None);
        let full = objective_and_gradient(&s.params, &s.spec, &c).unwrap();
        for g in Group::ALL {
            let mut p = s.params.clone();
            p.freeze(g);
            let r = objective_and_gradient(&p, &s.spec, &c).unwrap();
            assert!(!r.has(g));
            assert_eq!(r.terms, full.terms);
            for other in Group::ALL.into_iter().filter(|o| *o != g) {
                for i in 0..p.count(other) {
                    assert_eq!(r.get(other, i).to_bits(), full.get(other, i).to_bits(), "{} frozen, {} differs", g.name(), other.name());
                }
            }
        }
    }

    #[test]
    fn tape_free_objective_is_exact() {
        let s = gradient_check_scene(5).unwrap();
        let w = LossWeights::default();
        let c = ctx(&s, &w, None);
        let r = objective_and_gradient(&s.params, &s.spec, &c).unwrap();
        let t = objective(&s.params, &s.spec, &c).unwrap();
        assert_eq!(r.terms, t);
        let sum = t.image + w.lambda_aniso * t.aniso + w.lambda_reg * t.reg + w.lambda_vor * t.vor;
        assert_eq!(sum, t.total);
    }

    #[test]
    fn shape_errors() {
        let s = gradient_check_scene(6).unwrap();
        let w = LossWeights::default();
        let c = ctx(&s, &w, None);
        let too_long = WindowSpec { root_frame: 0, anchor_frame: 0, horizon: 3 };
        assert!(objective(&s.params, &too_long, &c).is_err());
        let mut p = s.params.clone();
        p.fields.push(p.fields[0].clone());
        let msg = objective(&p, &too_long, &c).unwrap_err().to_string();
        assert!(msg.contains("missing observation for frame 3"), "{msg}");
    }

    #[test]
    fn quadratic_surrogate_weight_gradient() {
        let s = gradient_check_scene(7).unwrap();
        let f = &s.params.fields[0];
        let x0 = Vec3::new(0.41, 0.57, 0.33);
        let target = Vec3::new(0.01, -0.02, 0.03);
        let resid = f.evaluate(&x0) - target;
        let g = weight_vjp(f, &x0, &(resid * 2.0));
        for (i, node) in f.layout.nodes().iter().enumerate() {
            let parts = scalar_kernel_parts(&x0, node);
            let psi = parts.hessian - Mat3::identity() * parts.laplacian;
            let want = psi.transpose() * resid * 2.0;
            assert!((g[i] - want).norm() <= 1e-9 * want.norm().max(1e-12), "node {i}");
        }
        let loss = |f: &DfkField| (f.evaluate(&x0) - target).norm_squared();
        let h = 1e-7;
        for i in 0..f.weights.len() {
            for k in 0..3 {
                let mut a = f.clone();
                a.weights[i][k] += h;
                let mut b = f.clone();
                b.weights[i][k] -= h;
                let fd = (loss(&a) - loss(&b)) / (2.0 * h);
                assert!((fd - g[i][k]).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }
}
