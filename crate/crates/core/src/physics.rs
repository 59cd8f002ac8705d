//! Collocation-point physics losses: L1 velocity magnitude and the vorticity
//! transport residual, both with hand-derived reverse passes.
//!
//! Derivatives use central differences of `v` on a 25-point stencil around each
//! sample: the center, `±d e_k`, `±2d e_k` and the twelve `±d e_k ± d e_l`. The
//! kernel geometry at those points is computed once and shared by every field.

use std::sync::OnceLock;

use crate::dfk_field::{curl_of, DfkField};
use crate::geometry::{Mat3, Vec3};
use crate::rbf_kernel::KernelSample;
use crate::render2d::sign;

const POINTS: usize = 25;
/// Stencil bases where a Jacobian is formed: center, then `+d e_l`, `-d e_l`.
const BASES: usize = 7;

struct Stencil {
    offsets: [[i8; 3]; POINTS],
    /// `jac[b][k] = (plus, minus)` point indices for column `k` at base `b`.
    jac: [[(usize, usize); 3]; BASES],
}

fn stencil() -> &'static Stencil {
    static S: OnceLock<Stencil> = OnceLock::new();
    S.get_or_init(|| {
        let mut offsets = vec![[0i8; 3]];
        for k in 0..3 {
            for s in [1i8, -1] {
                let mut o = [0; 3];
                o[k] = s;
                offsets.push(o);
            }
        }
        for k in 0..3 {
            for s in [2i8, -2] {
                let mut o = [0; 3];
                o[k] = s;
                offsets.push(o);
            }
        }
        for k in 0..3 {
            for l in k + 1..3 {
                for (a, b) in [(1i8, 1i8), (1, -1), (-1, 1), (-1, -1)] {
                    let mut o = [0; 3];
                    o[k] = a;
                    o[l] = b;
                    offsets.push(o);
                }
            }
        }
        let find = |o: [i8; 3]| offsets.iter().position(|p| *p == o).expect("stencil point");
        let mut jac = [[(0, 0); 3]; BASES];
        for (b, row) in jac.iter_mut().enumerate() {
            let base = offsets[b];
            for (k, e) in row.iter_mut().enumerate() {
                let mut p = base;
                p[k] += 1;
                let mut m = base;
                m[k] -= 1;
                *e = (find(p), find(m));
            }
        }
        Stencil { offsets: offsets.try_into().expect("25 points"), jac }
    })
}

/// Gradient of `curl(J)` with respect to `J`, contracted with `g`.
fn curl_transpose(g: &Vec3) -> Mat3 {
    let mut m = Mat3::zeros();
    m[(2, 1)] += g.x;
    m[(1, 2)] -= g.x;
    m[(0, 2)] += g.y;
    m[(2, 0)] -= g.y;
    m[(1, 0)] += g.z;
    m[(0, 1)] -= g.z;
    m
}

/// Per-sample FD quantities of one field.
struct Local {
    v: [Vec3; POINTS],
    jac: [Mat3; BASES],
    omega: [Vec3; BASES],
    /// `d omega / dx` at the center.
    grad_omega: Mat3,
}

impl Local {
    fn new(v: [Vec3; POINTS], inv2d: f64) -> Self {
        let st = stencil();
        let mut jac = [Mat3::zeros(); BASES];
        let mut omega = [Vec3::zeros(); BASES];
        for b in 0..BASES {
            for k in 0..3 {
                let (p, m) = st.jac[b][k];
                jac[b].set_column(k, &((v[p] - v[m]) * inv2d));
            }
            omega[b] = curl_of(&jac[b]);
        }
        let mut grad_omega = Mat3::zeros();
        for l in 0..3 {
            grad_omega.set_column(l, &((omega[1 + 2 * l] - omega[2 + 2 * l]) * inv2d));
        }
        Local { v, jac, omega, grad_omega }
    }
}

/// Accumulates `dL/dv` at the stencil points given gradients on the derived quantities.
fn backprop_local(g_jac: &mut [Mat3; BASES], g_grad_omega: &Mat3, inv2d: f64, g_v: &mut [Vec3; POINTS]) {
    let st = stencil();
    for l in 0..3 {
        let gc = g_grad_omega.column(l) * inv2d;
        g_jac[1 + 2 * l] += curl_transpose(&gc.into());
        g_jac[2 + 2 * l] -= curl_transpose(&gc.into());
    }
    for b in 0..BASES {
        for k in 0..3 {
            let (p, m) = st.jac[b][k];
            let gc: Vec3 = (g_jac[b].column(k) * inv2d).into();
            g_v[p] += gc;
            g_v[m] -= gc;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct PhysicsTerms {
    /// Sum over fields of the mean L1 velocity magnitude.
    pub reg: f64,
    /// Sum over consecutive field pairs of the mean L1 vorticity residual.
    pub vor: f64,
}

pub(crate) struct PhysicsRequest<'a> {
    pub fields: &'a [DfkField],
    pub frame_dt: f64,
    pub samples: &'a [Vec3],
    pub fd_step: f64,
    pub with_reg: bool,
    pub with_vor: bool,
}

/// Evaluates the requested terms. When `grads` is given, adds
/// `scale_reg * dreg/dW + scale_vor * dvor/dW` per field.
pub(crate) fn physics_terms(
    req: &PhysicsRequest<'_>,
    mut grads: Option<(&mut [Vec<Vec3>], f64, f64)>,
    mut signature: Option<&mut dyn FnMut(u64)>,
) -> PhysicsTerms {
    let mut out = PhysicsTerms::default();
    let nf = req.fields.len();
    if nf == 0 || req.samples.is_empty() || !(req.with_reg || req.with_vor) {
        return out;
    }
    let with_vor = req.with_vor && nf >= 2;
    let layout = &req.fields[0].layout;
    let inv_m = 1.0 / req.samples.len() as f64;
    let st = stencil();
    let npts = if with_vor { POINTS } else { 1 };
    let d = req.fd_step;
    let inv2d = 0.5 / d;
    let inv_dt = 1.0 / req.frame_dt;
    let mut cand = Vec::new();
    let mut geo: Vec<Vec<(u32, KernelSample)>> = (0..npts).map(|_| Vec::new()).collect();
    let mut locals: Vec<Local> = Vec::with_capacity(nf);
    let mut g_vs: Vec<[Vec3; POINTS]> = vec![[Vec3::zeros(); POINTS]; nf];
    let mut g_jacs: Vec<[Mat3; BASES]> = vec![[Mat3::zeros(); BASES]; nf];
    let mut g_gw: Vec<Mat3> = vec![Mat3::zeros(); nf];

    for x in req.samples {
        for (p, g) in geo.iter_mut().enumerate() {
            let o = st.offsets[p];
            let pt = x + Vec3::new(o[0] as f64, o[1] as f64, o[2] as f64) * d;
            layout.samples_at(&pt, &mut cand, g);
        }
        locals.clear();
        for f in req.fields {
            let mut v = [Vec3::zeros(); POINTS];
            for (p, g) in geo.iter().enumerate() {
                for (i, s) in g {
                    v[p] += s.apply(&f.weights[*i as usize]);
                }
            }
            locals.push(if with_vor {
                Local::new(v, inv2d)
            } else {
                Local { v, jac: [Mat3::zeros(); BASES], omega: [Vec3::zeros(); BASES], grad_omega: Mat3::zeros() }
            });
        }
        let want_grad = grads.is_some();
        if want_grad {
            for k in 0..nf {
                g_vs[k] = [Vec3::zeros(); POINTS];
                g_jacs[k] = [Mat3::zeros(); BASES];
                g_gw[k] = Mat3::zeros();
            }
        }
        let (sr, sv) = grads.as_ref().map(|(_, a, b)| (*a, *b)).unwrap_or((0.0, 0.0));
        if req.with_reg {
            for (k, l) in locals.iter().enumerate() {
                out.reg += l.v[0].abs().sum() * inv_m;
                if let Some(sig) = signature.as_deref_mut() {
                    sig(sign_bits(&l.v[0]));
                }
                if want_grad {
                    g_vs[k][0] += l.v[0].map(sign) * (sr * inv_m);
                }
            }
        }
        if with_vor {
            for t in 0..nf - 1 {
                let (a, b) = (&locals[t], &locals[t + 1]);
                let r = (b.omega[0] - a.omega[0]) * inv_dt + a.grad_omega * a.v[0] - a.jac[0] * a.omega[0];
                out.vor += r.abs().sum() * inv_m;
                if let Some(sig) = signature.as_deref_mut() {
                    sig(sign_bits(&r));
                }
                if want_grad {
                    let g = r.map(sign) * (sv * inv_m);
                    let g_om_b = g * inv_dt;
                    g_jacs[t + 1][0] += curl_transpose(&g_om_b);
                    let mut g_om_a = -g * inv_dt;
                    g_gw[t] += g * a.v[0].transpose();
                    g_vs[t][0] += a.grad_omega.transpose() * g;
                    g_jacs[t][0] -= g * a.omega[0].transpose();
                    g_om_a -= a.jac[0].transpose() * g;
                    g_jacs[t][0] += curl_transpose(&g_om_a);
                }
            }
        }
        if let Some((gw, _, _)) = grads.as_mut() {
            for k in 0..nf {
                if with_vor {
                    let gg = g_gw[k];
                    backprop_local(&mut g_jacs[k], &gg, inv2d, &mut g_vs[k]);
                }
                for (p, g) in geo.iter().enumerate() {
                    let gv = g_vs[k][p];
                    if gv == Vec3::zeros() {
                        continue;
                    }
                    for (i, s) in g {
                        gw[k][*i as usize] += s.apply(&gv);
                    }
                }
            }
        }
    }
    out
}

fn sign_bits(v: &Vec3) -> u64 {
    v.iter().fold(0u64, |acc, c| acc * 3 + (sign(*c) + 1.0) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dfk_field::{jacobian_fd, vorticity_fd, NodeLayout, VelocityField};
    use crate::geometry::Aabb;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn fields(seed: u64, n: usize) -> Vec<DfkField> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Arc::new(NodeLayout::lattice(Aabb::unit(), [3, 3, 3], 1.5).unwrap());
        (0..n)
            .map(|_| {
                let w = (0..layout.len())
                    .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)) * 1e-3)
                    .collect();
                DfkField::new(layout.clone(), w).unwrap()
            })
            .collect()
    }

    fn samples(seed: u64, n: usize) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Aabb::new([0.1; 3], [0.9; 3]).sample(&mut rng)).collect()
    }

    #[test]
    fn stencil_is_consistent() {
        let st = stencil();
        let mut seen = std::collections::HashSet::new();
        for o in st.offsets {
            assert!(seen.insert(o));
        }
        for b in 0..BASES {
            for k in 0..3 {
                let (p, m) = st.jac[b][k];
                let mut diff = [0i8; 3];
                for c in 0..3 {
                    diff[c] = st.offsets[p][c] - st.offsets[m][c];
                }
                let mut want = [0i8; 3];
                want[k] = 2;
                assert_eq!(diff, want);
            }
        }
    }

    #[test]
    fn residual_matches_independent_fd() {
        let fs = fields(1, 2);
        let xs = samples(2, 5);
        let d = 1e-3;
        let req = PhysicsRequest { fields: &fs, frame_dt: 0.5, samples: &xs, fd_step: d, with_reg: true, with_vor: true };
        let t = physics_terms(&req, None, None);
        let mut reg = 0.0;
        let mut vor = 0.0;
        for x in &xs {
            reg += fs[0].velocity(x).abs().sum() + fs[1].velocity(x).abs().sum();
            let om0 = vorticity_fd(&fs[0], x, d).unwrap();
            let om1 = vorticity_fd(&fs[1], x, d).unwrap();
            let mut gom = Mat3::zeros();
            for l in 0..3 {
                let mut e = Vec3::zeros();
                e[l] = d;
                let c = (vorticity_fd(&fs[0], &(x + e), d).unwrap() - vorticity_fd(&fs[0], &(x - e), d).unwrap()) / (2.0 * d);
                gom.set_column(l, &c);
            }
            let j = jacobian_fd(&fs[0], x, d).unwrap();
            let r = (om1 - om0) / 0.5 + gom * fs[0].velocity(x) - j * om0;
            vor += r.abs().sum();
        }
        assert_relative_eq!(t.reg, reg / 5.0, max_relative = 1e-12);
        assert_relative_eq!(t.vor, vor / 5.0, max_relative = 1e-9);
    }

    #[test]
    fn gradient_matches_fd() {
        let fs = fields(3, 3);
        let xs = samples(4, 8);
        let eval = |fs: &[DfkField]| {
            let req = PhysicsRequest { fields: fs, frame_dt: 1.0, samples: &xs, fd_step: 1e-3, with_reg: true, with_vor: true };
            let t = physics_terms(&req, None, None);
            0.3 * t.reg + 0.7 * t.vor
        };
        let req = PhysicsRequest { fields: &fs, frame_dt: 1.0, samples: &xs, fd_step: 1e-3, with_reg: true, with_vor: true };
        let mut g: Vec<Vec<Vec3>> = fs.iter().map(|f| vec![Vec3::zeros(); f.weights.len()]).collect();
        physics_terms(&req, Some((&mut g, 0.3, 0.7)), None);
        let h = 1e-8;
        for f in 0..3 {
            for n in (0..27).step_by(4) {
                for k in 0..3 {
                    let mut a = fs.clone();
                    a[f].weights[n][k] += h;
                    let mut b = fs.clone();
                    b[f].weights[n][k] -= h;
                    let fd = (eval(&a) - eval(&b)) / (2.0 * h);
                    assert!((g[f][n][k] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "field {f} node {n} axis {k}: {} vs {fd}", g[f][n][k]);
                }
            }
        }
    }
}
