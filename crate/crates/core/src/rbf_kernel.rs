//! Wendland C4 radial profile and the divergence-free matrix kernel
//! `psi = (-I laplacian + hessian) phi`.
//!
//! With `q = |x - c| / h` and `u = (x - c) / h` the kernel reduces to
//!
//! ```text
//! psi(x) = (a(q) I + b(q) u u^T) / h^2
//! a(q) = 112 (1-q)^4 (1 + 4q - 20q^2)
//! b(q) = 1680 (1-q)^4
//! ```
//!
//! which is a polynomial in `u` and `q` with no singularity at the center.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};

/// Profile value and radial derivatives at one radius.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialDerivatives {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
}

/// A kernel center with its support radius.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelNode {
    pub center: Vec3,
    pub support: f64,
}

impl KernelNode {
    pub fn new(center: Vec3, support: f64) -> Result<Self> {
        let node = KernelNode { center, support };
        node.validate()?;
        Ok(node)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.support.is_finite() && self.support > 0.0) {
            return Err(Error::domain(format!("kernel support must be positive and finite, got {}", self.support)));
        }
        if !self.center.iter().all(|c| c.is_finite()) {
            return Err(Error::domain("kernel center must be finite"));
        }
        Ok(())
    }
}

/// Relative distance below which the radial Hessian switches to its limit at the center.
pub const CENTER_EPS: f64 = 1e-7;

/// `phi(r) = (1-r)^6 (35 r^2 + 18 r + 3)` on `[0, 1]`, zero beyond.
pub fn wendland_c4(r: f64) -> Result<RadialDerivatives> {
    if !r.is_finite() || r < 0.0 {
        return Err(Error::domain(format!("radius must be finite and nonnegative, got {r}")));
    }
    Ok(wendland_c4_unchecked(r))
}

#[inline]
pub(crate) fn wendland_c4_unchecked(r: f64) -> RadialDerivatives {
    if r >= 1.0 {
        return RadialDerivatives { value: 0.0, d1: 0.0, d2: 0.0 };
    }
    let s = 1.0 - r;
    let s2 = s * s;
    let s4 = s2 * s2;
    RadialDerivatives {
        value: s4 * s2 * (35.0 * r * r + 18.0 * r + 3.0),
        d1: -56.0 * r * (5.0 * r + 1.0) * s4 * s,
        d2: -56.0 * s4 * (1.0 + 4.0 * r - 35.0 * r * r),
    }
}

/// Value, gradient, Hessian and Laplacian of `phi(|x - c| / h)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScalarKernelParts {
    pub value: f64,
    pub gradient: Vec3,
    pub hessian: Mat3,
    pub laplacian: f64,
}

pub fn scalar_kernel_parts(x: &Vec3, node: &KernelNode) -> ScalarKernelParts {
    let h = node.support;
    let rel = x - node.center;
    let d = rel.norm();
    let q = d / h;
    if q >= 1.0 {
        return ScalarKernelParts {
            value: 0.0,
            gradient: Vec3::zeros(),
            hessian: Mat3::zeros(),
            laplacian: 0.0,
        };
    }
    let rd = wendland_c4_unchecked(q);
    let h2 = h * h;
    if d < CENTER_EPS * h {
        // phi'(0) = 0, so the tangential term phi'/(h d) tends to phi''(0)/h^2.
        let c = rd.d2 / h2;
        return ScalarKernelParts {
            value: rd.value,
            gradient: Vec3::zeros(),
            hessian: Mat3::identity() * c,
            laplacian: 3.0 * c,
        };
    }
    let dir = rel / d;
    let radial = rd.d2 / h2;
    let tangential = rd.d1 / (h * d);
    let rr = dir * dir.transpose();
    ScalarKernelParts {
        value: rd.value,
        gradient: dir * (rd.d1 / h),
        hessian: rr * radial + (Mat3::identity() - rr) * tangential,
        laplacian: radial + 2.0 * tangential,
    }
}

/// Coefficients of `psi` for one node at one point: `psi = a I + b u u^T` (the `1/h^2`
/// already folded into `a` and `b`). `None` outside the support.
#[derive(Clone, Copy, Debug)]
pub(crate) struct KernelSample {
    pub a: f64,
    pub b: f64,
    pub u: Vec3,
    /// `1/h`, kept for the spatial Jacobian.
    pub inv_h: f64,
    pub q: f64,
}

impl KernelSample {
    #[inline]
    pub fn at(x: &Vec3, center: &Vec3, support: f64) -> Option<Self> {
        let inv_h = 1.0 / support;
        let u = (x - center) * inv_h;
        let q2 = u.norm_squared();
        if q2 >= 1.0 {
            return None;
        }
        let q = q2.sqrt();
        let s = 1.0 - q;
        let s2 = s * s;
        let s4 = s2 * s2;
        let inv_h2 = inv_h * inv_h;
        Some(KernelSample {
            a: 112.0 * s4 * (1.0 + 4.0 * q - 20.0 * q2) * inv_h2,
            b: 1680.0 * s4 * inv_h2,
            u,
            inv_h,
            q,
        })
    }

    /// `psi w`; `psi` is symmetric so this is also the transpose product.
    #[inline]
    pub fn apply(&self, w: &Vec3) -> Vec3 {
        w * self.a + self.u * (self.b * self.u.dot(w))
    }

    pub fn matrix(&self) -> Mat3 {
        Mat3::identity() * self.a + self.u * self.u.transpose() * self.b
    }

    /// Spatial Jacobian `d(psi w)/dx`.
    pub fn jacobian(&self, w: &Vec3) -> Mat3 {
        let (ap, bp) = self.radial_slopes();
        let uw = self.u.dot(w);
        let uut = self.u * self.u.transpose();
        let mut j = w * self.u.transpose() * ap + uut * (bp * uw) + self.u * w.transpose() * self.b;
        j[(0, 0)] += self.b * uw;
        j[(1, 1)] += self.b * uw;
        j[(2, 2)] += self.b * uw;
        j * self.inv_h
    }

    /// `(d(psi w)/dx)^T g` without forming the matrix.
    #[inline]
    pub fn jacobian_transpose_apply(&self, w: &Vec3, g: &Vec3) -> Vec3 {
        let (ap, bp) = self.radial_slopes();
        let uw = self.u.dot(w);
        let ug = self.u.dot(g);
        (self.u * (ap * w.dot(g) + bp * uw * ug) + g * (self.b * uw) + w * (self.b * ug)) * self.inv_h
    }

    /// `a'(q)/q` and `b'(q)/q`, both already divided by `h^2`. The second is singular
    /// at the center but is always multiplied by a quadratic in `u`.
    #[inline]
    fn radial_slopes(&self) -> (f64, f64) {
        let q = self.q;
        let s = 1.0 - q;
        let s3 = s * s * s;
        let inv_h2 = self.inv_h * self.inv_h;
        let ap = -6720.0 * s3 * (1.0 - 2.0 * q) * inv_h2;
        let bp = if q > CENTER_EPS { -6720.0 * s3 / q * inv_h2 } else { 0.0 };
        (ap, bp)
    }
}

/// The matrix-valued kernel `psi_i(x)`; symmetric and zero outside the support.
pub fn dfk_matrix(x: &Vec3, node: &KernelNode) -> Mat3 {
    KernelSample::at(x, &node.center, node.support)
        .map(|s| s.matrix())
        .unwrap_or_else(Mat3::zeros)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn node() -> KernelNode {
        KernelNode::new(Vec3::new(0.3, -0.2, 0.5), 0.7).unwrap()
    }

    fn random_inside<R: Rng>(rng: &mut R, n: &KernelNode) -> Vec3 {
        loop {
            let d = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if d.norm() < 0.98 && d.norm() > 0.02 {
                return n.center + d * n.support;
            }
        }
    }

    #[test]
    fn profile_at_special_radii() {
        let at1 = wendland_c4(1.0).unwrap();
        assert_eq!((at1.value, at1.d1, at1.d2), (0.0, 0.0, 0.0));
        let at2 = wendland_c4(2.0).unwrap();
        assert_eq!((at2.value, at2.d1, at2.d2), (0.0, 0.0, 0.0));
        let at0 = wendland_c4(0.0).unwrap();
        assert_eq!(at0.value, 3.0);
        assert_eq!(at0.d1, 0.0);
        // d2(0) = -56, from differentiating the polynomial twice.
        assert_eq!(at0.d2, -56.0);
    }

    #[test]
    fn profile_rejects_bad_radius() {
        assert!(wendland_c4(-0.1).is_err());
        assert!(wendland_c4(f64::NAN).is_err());
        assert!(wendland_c4(f64::INFINITY).is_err());
    }

    #[test]
    fn profile_derivatives_match_finite_differences() {
        let h = 1e-5;
        for i in 1..99 {
            let r = i as f64 / 100.0;
            let p = |r: f64| wendland_c4(r).unwrap();
            let d1 = (p(r + h).value - p(r - h).value) / (2.0 * h);
            let d2 = (p(r + h).d1 - p(r - h).d1) / (2.0 * h);
            assert_relative_eq!(p(r).d1, d1, epsilon = 1e-7, max_relative = 1e-7);
            assert_relative_eq!(p(r).d2, d2, epsilon = 1e-7, max_relative = 1e-7);
            assert!(p(r).value >= 0.0);
        }
    }

    #[test]
    fn parts_vanish_outside_support() {
        let n = node();
        let x = n.center + Vec3::new(n.support, 0.0, 0.0);
        let p = scalar_kernel_parts(&x, &n);
        assert_eq!(p.value, 0.0);
        assert_eq!(p.gradient, Vec3::zeros());
        assert_eq!(p.hessian, Mat3::zeros());
        assert_eq!(dfk_matrix(&x, &n), Mat3::zeros());
        assert_eq!(dfk_matrix(&(n.center + Vec3::new(2.0, 1.0, 0.0)), &n), Mat3::zeros());
    }

    #[test]
    fn parts_at_center() {
        let n = node();
        let p = scalar_kernel_parts(&n.center, &n);
        assert_eq!(p.gradient, Vec3::zeros());
        let expect = Mat3::identity() * (-56.0 / (n.support * n.support));
        assert_relative_eq!(p.hessian, expect, max_relative = 1e-14);
    }

    #[test]
    fn gradient_and_hessian_match_fd() {
        let n = node();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let step = 1e-5 * n.support;
        for _ in 0..200 {
            let x = random_inside(&mut rng, &n);
            let p = scalar_kernel_parts(&x, &n);
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = step;
                let fp = scalar_kernel_parts(&(x + e), &n);
                let fm = scalar_kernel_parts(&(x - e), &n);
                let g = (fp.value - fm.value) / (2.0 * step);
                assert_relative_eq!(p.gradient[k], g, epsilon = 1e-6 * p.gradient.norm().max(1.0), max_relative = 1e-6);
                let hcol = (fp.gradient - fm.gradient) / (2.0 * step);
                let scale = p.hessian.norm().max(1.0);
                for r in 0..3 {
                    assert!((p.hessian[(r, k)] - hcol[r]).abs() <= 1e-6 * scale);
                }
            }
            assert_relative_eq!(p.laplacian, p.hessian.trace(), max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn closed_form_matches_operator_definition() {
        let n = node();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let x = random_inside(&mut rng, &n);
            let p = scalar_kernel_parts(&x, &n);
            let from_parts = p.hessian - Mat3::identity() * p.laplacian;
            let psi = dfk_matrix(&x, &n);
            assert_relative_eq!(psi, from_parts, epsilon = 1e-9 * psi.norm(), max_relative = 1e-9);
            assert_eq!(psi, psi.transpose());
        }
    }

    #[test]
    fn kernel_columns_are_divergence_free() {
        // The analytic divergence is zero; what FD reports is truncation, so it must
        // shrink 4x per step halving and vanish under Richardson extrapolation.
        let n = node();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = Vec3::new(0.4, -1.3, 0.8);
        let div_at = |x: &Vec3, step: f64| {
            let mut div = 0.0;
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = step;
                let vp = dfk_matrix(&(x + e), &n) * w;
                let vm = dfk_matrix(&(x - e), &n) * w;
                div += (vp[k] - vm[k]) / (2.0 * step);
            }
            div
        };
        let (mut coarse_sum, mut fine_sum, mut extrap_sum) = (0.0, 0.0, 0.0);
        for _ in 0..100 {
            let x = random_inside(&mut rng, &n);
            let coarse = div_at(&x, 1e-3 * n.support);
            let fine = div_at(&x, 0.5e-3 * n.support);
            coarse_sum += coarse.abs();
            fine_sum += fine.abs();
            extrap_sum += ((4.0 * fine - coarse) / 3.0).abs();
        }
        let ratio = coarse_sum / fine_sum;
        assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
        assert!(extrap_sum < 1e-3 * coarse_sum, "extrapolated {extrap_sum} vs {coarse_sum}");
    }

    #[test]
    fn analytic_jacobian_is_traceless_and_matches_fd() {
        let n = node();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = Vec3::new(-0.2, 0.9, 1.7);
        let step = 1e-6 * n.support;
        for _ in 0..200 {
            let x = random_inside(&mut rng, &n);
            let s = KernelSample::at(&x, &n.center, n.support).unwrap();
            let j = s.jacobian(&w);
            assert!(j.trace().abs() <= 1e-10 * j.norm());
            let g = Vec3::new(0.3, -0.5, 0.1);
            assert_relative_eq!(s.jacobian_transpose_apply(&w, &g), j.transpose() * g, epsilon = 1e-9 * j.norm());
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = step;
                let col = (dfk_matrix(&(x + e), &n) * w - dfk_matrix(&(x - e), &n) * w) / (2.0 * step);
                for r in 0..3 {
                    assert!((j[(r, k)] - col[r]).abs() <= 1e-6 * j.norm().max(1.0));
                }
            }
        }
    }

    #[test]
    fn scaling_with_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let c = Vec3::new(0.1, 0.2, 0.3);
        let h = 0.37;
        let big = KernelNode::new(c, h).unwrap();
        let unit = KernelNode::new(Vec3::zeros(), 1.0).unwrap();
        for _ in 0..50 {
            let x = random_inside(&mut rng, &big);
            let a = dfk_matrix(&x, &big);
            let b = dfk_matrix(&((x - c) / h), &unit) / (h * h);
            assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn smooth_decay_at_support_boundary() {
        // Forward differences of orders 1..4 approaching r = 1 shrink to zero.
        let phi = |r: f64| wendland_c4(r).unwrap().value;
        let h = 1e-3;
        let r = 1.0 - 4.0 * h;
        let f: Vec<f64> = (0..=4).map(|k| phi(r + k as f64 * h)).collect();
        let d1 = (f[1] - f[0]) / h;
        let d2 = (f[2] - 2.0 * f[1] + f[0]) / (h * h);
        let d3 = (f[3] - 3.0 * f[2] + 3.0 * f[1] - f[0]) / h.powi(3);
        let d4 = (f[4] - 4.0 * f[3] + 6.0 * f[2] - 4.0 * f[1] + f[0]) / h.powi(4);
        for (order, d) in [(1, d1), (2, d2), (3, d3), (4, d4)] {
            assert!(d.abs() < 0.5, "order {order} derivative {d} near boundary");
        }
    }
}
