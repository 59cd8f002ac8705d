//! Orthographic Gaussian splatting onto axis-aligned image planes with
//! front-to-back alpha blending, SSIM and the L1 + D-SSIM image loss.
//!
//! Orthographic projection of a 3D Gaussian is exactly its marginal over the
//! view axis, so the 2D covariance is a 2x2 block of the (rotated) 3D one.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{covariance_backward, sigmoid, GaussianCloud, GaussianPrimitive, Quat};
use crate::geometry::{Mat3, Vec3};
use crate::io::{read_file, write_file};

pub type Vec2 = Vector2<f64>;
pub type Mat2 = Matrix2<f64>;

/// Upper bound on per-primitive effective opacity.
pub const SIGMA_CLAMP: f64 = 0.999;
/// Mahalanobis radius of the splat footprint.
pub const FOOTPRINT_SIGMAS: f64 = 3.0;
/// Default SSIM weight in the image loss.
pub const DEFAULT_LAMBDA_SSIM: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewAxis {
    #[serde(rename = "+X")]
    PosX,
    #[serde(rename = "+Y")]
    PosY,
    #[serde(rename = "+Z")]
    PosZ,
    #[serde(rename = "-X")]
    NegX,
    #[serde(rename = "-Y")]
    NegY,
    #[serde(rename = "-Z")]
    NegZ,
}

impl ViewAxis {
    /// `(horizontal, vertical, depth)` unit vectors in world space. The plane
    /// axes are always positive world axes; see [`ViewAxis::mirrored`].
    pub fn basis(self) -> (Vec3, Vec3, Vec3) {
        let (x, y, z) = (Vec3::x(), Vec3::y(), Vec3::z());
        match self {
            ViewAxis::PosZ => (x, y, z),
            ViewAxis::NegZ => (x, y, -z),
            ViewAxis::PosX => (y, z, x),
            ViewAxis::NegX => (y, z, -x),
            ViewAxis::PosY => (x, z, y),
            ViewAxis::NegY => (x, z, -y),
        }
    }

    /// Cameras looking down a negative axis see the horizontal axis flipped.
    pub fn mirrored(self) -> bool {
        matches!(self, ViewAxis::NegX | ViewAxis::NegY | ViewAxis::NegZ)
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "+X" | "X" | "x" => ViewAxis::PosX,
            "+Y" | "Y" | "y" => ViewAxis::PosY,
            "+Z" | "Z" | "z" => ViewAxis::PosZ,
            "-X" => ViewAxis::NegX,
            "-Y" => ViewAxis::NegY,
            "-Z" => ViewAxis::NegZ,
            _ => return Err(Error::domain(format!("unknown view axis {s:?}"))),
        })
    }
}

/// Axis-aligned orthographic camera. `footprint` is `[u0, v0, u1, v1]` in world
/// units along the plane axes given by [`ViewAxis::basis`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub view_axis: ViewAxis,
    pub width: usize,
    pub height: usize,
    pub footprint: [f64; 4],
}

impl OrthoCamera {
    pub fn new(view_axis: ViewAxis, width: usize, height: usize, footprint: [f64; 4]) -> Result<Self> {
        let cam = OrthoCamera { view_axis, width, height, footprint };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width < 8 || self.height < 8 {
            return Err(Error::domain("image must be at least 8x8 pixels"));
        }
        let [u0, v0, u1, v1] = self.footprint;
        if !(u1 > u0 && v1 > v0) || !self.footprint.iter().all(|f| f.is_finite()) {
            return Err(Error::domain("camera footprint must have positive area"));
        }
        Ok(())
    }

    /// World-to-pixel linear map (2x3); pixel = `M x + offset`.
    pub fn projection(&self) -> (Matrix2x3<f64>, Vec2) {
        let (eu, ev, _) = self.view_axis.basis();
        let [u0, v0, u1, v1] = self.footprint;
        let sx = self.width as f64 / (u1 - u0);
        let sy = self.height as f64 / (v1 - v0);
        // v is flipped so image rows run top to bottom.
        if self.view_axis.mirrored() {
            let m = Matrix2x3::from_rows(&[(eu * -sx).transpose(), (ev * -sy).transpose()]);
            (m, Vec2::new(u1 * sx, v1 * sy))
        } else {
            let m = Matrix2x3::from_rows(&[(eu * sx).transpose(), (ev * -sy).transpose()]);
            (m, Vec2::new(-u0 * sx, v1 * sy))
        }
    }

    pub fn depth(&self, x: &Vec3) -> f64 {
        self.view_axis.basis().2.dot(x)
    }

    /// World units per pixel along each image axis.
    pub fn pixel_size(&self) -> (f64, f64) {
        let [u0, v0, u1, v1] = self.footprint;
        ((u1 - u0) / self.width as f64, (v1 - v0) / self.height as f64)
    }
}

/// Row-major grayscale radiance image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Image { width, height, data: vec![0.0; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(0.0, f64::max)
    }

    pub(crate) fn same_shape(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::domain(format!(
                "image size mismatch: {}x{} vs {}x{}",
                self.width, self.height, other.width, other.height
            )));
        }
        Ok(())
    }

    /// Portable Float Map, little-endian (scale -1.0), bottom row first.
    pub fn write_pfm(&self, path: &Path) -> Result<()> {
        let mut buf = format!("Pf\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                buf.extend_from_slice(&(self.get(x, y) as f32).to_le_bytes());
            }
        }
        write_file(path, &buf)
    }

    pub fn read_pfm(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let bad = |r: &str| Error::format("PFM", r.to_string());
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < data.len() && data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < data.len() && !data[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&data[start..pos]).map_err(|_| bad("non-ascii header"))?.to_string());
        }
        pos += 1;
        if fields[0] != "Pf" {
            return Err(bad("only grayscale Pf files are supported"));
        }
        let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
        let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
        let scale: f64 = fields[3].parse().map_err(|_| bad("bad scale"))?;
        let little = scale < 0.0;
        if data.len() != pos + 4 * width * height {
            return Err(bad("pixel payload has the wrong length"));
        }
        let mut img = Image::zeros(width, height);
        for (k, chunk) in data[pos..].chunks_exact(4).enumerate() {
            let raw: [u8; 4] = chunk.try_into().unwrap();
            let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let (x, yb) = (k % width, k / width);
            img.data[(height - 1 - yb) * width + x] = v as f64;
        }
        Ok(img)
    }

    /// 8-bit PGM after the linear map `v / peak`, clamped to `[0, 1]`.
    pub fn write_pgm(&self, path: &Path, peak: f64) -> Result<()> {
        let mut buf = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        let peak = if peak > 0.0 { peak } else { 1.0 };
        buf.extend(self.data.iter().map(|v| ((v / peak).clamp(0.0, 1.0) * 255.0).round() as u8));
        write_file(path, &buf)
    }
}

/// Projected 2D footprint of one primitive, in pixels.
#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub mean2: Vec2,
    pub cov2: Mat2,
}

pub fn project_gaussian(g: &GaussianPrimitive, cam: &OrthoCamera) -> Projection {
    let (m, off) = cam.projection();
    Projection { mean2: m * g.position + off, cov2: m * g.covariance() * m.transpose() }
}

#[derive(Clone, Copy, Debug)]
struct Splat {
    index: usize,
    mean2: Vec2,
    inv: Mat2,
    alpha: f64,
    emission: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SplatStats {
    /// Primitives dropped because their 2D covariance was singular.
    pub skipped_singular: usize,
    /// Primitives whose footprint touched at least one pixel.
    pub drawn: usize,
}

/// Rendered image plus everything the reverse pass needs.
pub struct SplatOutput {
    pub image: Image,
    pub stats: SplatStats,
    order: Vec<Splat>,
    final_transmittance: Vec<f64>,
}

/// Per-primitive attribute gradients from the reverse pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub position: Vec3,
    pub log_scales: Vec3,
    pub rotation: Quat,
    pub opacity_logit: f64,
    pub emission: f64,
}

impl PrimitiveGrad {
    pub fn add(&mut self, o: &PrimitiveGrad) {
        self.position += o.position;
        self.log_scales += o.log_scales;
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.opacity_logit += o.opacity_logit;
        self.emission += o.emission;
    }
}

fn prepare(prims: &[GaussianPrimitive], cam: &OrthoCamera, stats: &mut SplatStats) -> Vec<Splat> {
    let (m, off) = cam.projection();
    let mut keyed: Vec<(f64, usize)> = prims.iter().enumerate().map(|(i, g)| (cam.depth(&g.position), i)).collect();
    // Front first; ties by primitive index.
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut out = Vec::with_capacity(prims.len());
    for (_, i) in keyed {
        let g = &prims[i];
        let mean2 = m * g.position + off;
        let cov2 = m * g.covariance() * m.transpose();
        let det = cov2.determinant();
        if !(det.is_finite() && det > 1e-20) || !mean2.iter().all(|c| c.is_finite()) {
            stats.skipped_singular += 1;
            continue;
        }
        let inv = Mat2::new(cov2[(1, 1)], -cov2[(0, 1)], -cov2[(1, 0)], cov2[(0, 0)]) / det;
        let rx = FOOTPRINT_SIGMAS * cov2[(0, 0)].sqrt();
        let ry = FOOTPRINT_SIGMAS * cov2[(1, 1)].sqrt();
        // Pixel centers sit at integer + 0.5.
        let lo_x = (mean2.x - rx - 0.5).ceil().max(0.0);
        let hi_x = (mean2.x + rx - 0.5).floor().min(cam.width as f64 - 1.0);
        let lo_y = (mean2.y - ry - 0.5).ceil().max(0.0);
        let hi_y = (mean2.y + ry - 0.5).floor().min(cam.height as f64 - 1.0);
        if hi_x < lo_x || hi_y < lo_y {
            continue;
        }
        stats.drawn += 1;
        out.push(Splat {
            index: i,
            mean2,
            inv,
            alpha: sigmoid(g.opacity_logit),
            emission: g.emission,
            x0: lo_x as usize,
            x1: hi_x as usize,
            y0: lo_y as usize,
            y1: hi_y as usize,
        });
    }
    out
}

/// Effective opacity at offset `d`, or `None` outside the footprint. The bool is
/// true when the clamp is active.
#[inline]
fn effective_opacity(s: &Splat, d: &Vec2) -> Option<(f64, f64, bool)> {
    let m = (d.transpose() * s.inv * d)[(0, 0)];
    if m > FOOTPRINT_SIGMAS * FOOTPRINT_SIGMAS {
        return None;
    }
    let e = (-0.5 * m).exp();
    let raw = s.alpha * e;
    if raw > SIGMA_CLAMP {
        Some((SIGMA_CLAMP, e, true))
    } else {
        Some((raw, e, false))
    }
}

impl SplatOutput {
    /// `prod (1 - sigma_i)` per pixel after all primitives; one minus it is the
    /// accumulated opacity.
    pub fn transmittance(&self) -> &[f64] {
        &self.final_transmittance
    }
}

pub fn splat_primitives(prims: &[GaussianPrimitive], cam: &OrthoCamera) -> SplatOutput {
    let mut stats = SplatStats::default();
    let order = prepare(prims, cam, &mut stats);
    let mut image = Image::zeros(cam.width, cam.height);
    let mut trans = vec![1.0; cam.width * cam.height];
    for s in &order {
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5) - s.mean2;
                if let Some((sigma, _, _)) = effective_opacity(s, &d) {
                    let p = y * cam.width + x;
                    image.data[p] += s.emission * sigma * trans[p];
                    trans[p] *= 1.0 - sigma;
                }
            }
        }
    }
    SplatOutput { image, stats, order, final_transmittance: trans }
}

/// Feeds the discrete structure of a render to `sink`: draw order, and per primitive
/// the number of covered pixel centers and clamped pixels. Equal signatures mean no
/// footprint boundary, clamp or ordering change happened between two renders.
pub(crate) fn splat_signature(out: &SplatOutput, sink: &mut dyn FnMut(u64)) {
    for s in &out.order {
        let (mut covered, mut clamped) = (0u64, 0u64);
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5) - s.mean2;
                if let Some((_, _, c)) = effective_opacity(s, &d) {
                    covered += 1;
                    clamped += c as u64;
                }
            }
        }
        sink(s.index as u64);
        sink(covered);
        sink(clamped);
    }
}

/// `C(p) = sum_i c_i sigma_i prod_{j<i} (1 - sigma_j)`, front to back.
pub fn splat(cloud: &GaussianCloud, cam: &OrthoCamera) -> Image {
    splat_primitives(&cloud.primitives, cam).image
}

/// Reference images indexed `[frame][camera]`, with the cameras that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationSet {
    pub cameras: Vec<OrthoCamera>,
    pub frames: Vec<Vec<Image>>,
}

impl ObservationSet {
    pub fn new(cameras: Vec<OrthoCamera>, frames: Vec<Vec<Image>>) -> Result<Self> {
        if cameras.is_empty() {
            return Err(Error::domain("observation set needs at least one camera"));
        }
        for cam in &cameras {
            cam.validate()?;
        }
        for (f, row) in frames.iter().enumerate() {
            if row.len() != cameras.len() {
                return Err(Error::domain(format!("frame {f} has {} images for {} cameras", row.len(), cameras.len())));
            }
            for (c, (img, cam)) in row.iter().zip(&cameras).enumerate() {
                if img.width != cam.width || img.height != cam.height || img.data.len() != img.width * img.height {
                    return Err(Error::domain(format!("frame {f} camera {c}: image size does not match the camera")));
                }
            }
        }
        Ok(ObservationSet { cameras, frames })
    }

    /// Renders one row per cloud with every camera.
    pub fn render(cameras: Vec<OrthoCamera>, clouds: &[GaussianCloud]) -> Result<Self> {
        let frames = clouds.iter().map(|c| cameras.iter().map(|cam| splat(c, cam)).collect()).collect();
        ObservationSet::new(cameras, frames)
    }

    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn get(&self, frame: usize, camera: usize) -> Result<&Image> {
        self.frames
            .get(frame)
            .and_then(|row| row.get(camera))
            .ok_or_else(|| Error::domain(format!("missing observation for frame {frame}, camera {camera}")))
    }

    /// Largest pixel value over all frames and cameras.
    pub fn peak(&self) -> f64 {
        self.frames.iter().flatten().map(Image::max).fold(0.0, f64::max)
    }
}

/// Reverse pass: `grad_image` is `dL/dC` per pixel. Returns one gradient per input primitive.
pub fn splat_backward(prims: &[GaussianPrimitive], cam: &OrthoCamera, fwd: &SplatOutput, grad_image: &[f64]) -> Vec<PrimitiveGrad> {
    let w = cam.width;
    let mut grads = vec![PrimitiveGrad::default(); prims.len()];
    let mut trans = fwd.final_transmittance.clone();
    let mut after = vec![0.0; trans.len()];
    let (m, _) = cam.projection();
    for s in fwd.order.iter().rev() {
        let mut g_mean = Vec2::zeros();
        let mut g_cov = Mat2::zeros();
        let mut g_alpha = 0.0;
        let mut g_emission = 0.0;
        for y in s.y0..=s.y1 {
            for x in s.x0..=s.x1 {
                let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5) - s.mean2;
                let Some((sigma, e, clamped)) = effective_opacity(s, &d) else { continue };
                let p = y * w + x;
                let t_before = trans[p] / (1.0 - sigma);
                let gp = grad_image[p];
                g_emission += gp * sigma * t_before;
                let g_sigma = gp * (s.emission * t_before - after[p] / (1.0 - sigma));
                after[p] += s.emission * sigma * t_before;
                trans[p] = t_before;
                if clamped {
                    continue;
                }
                g_alpha += g_sigma * e;
                let id = s.inv * d;
                g_mean += id * (g_sigma * sigma);
                g_cov += id * id.transpose() * (0.5 * g_sigma * sigma);
            }
        }
        let g = &prims[s.index];
        let gc3: Mat3 = m.transpose() * g_cov * m;
        let (dls, dq) = covariance_backward(&g.rotation, &g.log_scales, &gc3);
        grads[s.index] = PrimitiveGrad {
            position: m.transpose() * g_mean,
            log_scales: dls,
            rotation: dq,
            opacity_logit: g_alpha * s.alpha * (1.0 - s.alpha),
            emission: g_emission,
        };
    }
    grads
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_window() -> [f64; 2 * SSIM_RADIUS + 1] {
    let mut w = [0.0; 2 * SSIM_RADIUS + 1];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - SSIM_RADIUS as f64;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable 11x11 Gaussian filter with zero padding, same output size. The
/// operator is symmetric, so it is also its own adjoint.
fn blur(src: &[f64], width: usize, height: usize) -> Vec<f64> {
    let k = ssim_window();
    let r = SSIM_RADIUS as isize;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = x as isize + t as isize - r;
                if xx >= 0 && (xx as usize) < width {
                    acc += kv * src[y * width + xx as usize];
                }
            }
            tmp[y * width + x] = acc;
        }
    }
    let mut out = vec![0.0; src.len()];
    for y in 0..height {
        for x in 0..width {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let yy = y as isize + t as isize - r;
                if yy >= 0 && (yy as usize) < height {
                    acc += kv * tmp[yy as usize * width + x];
                }
            }
            out[y * width + x] = acc;
        }
    }
    out
}

struct SsimTerms {
    value: f64,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    s: Vec<f64>,
    n1: Vec<f64>,
    n2: Vec<f64>,
    d1: Vec<f64>,
    d2: Vec<f64>,
    range: f64,
}

fn ssim_terms(a: &Image, b: &Image) -> SsimTerms {
    let (w, h) = (a.width, a.height);
    let range = a.max().max(b.max()).max(1.0);
    let c1 = (0.01 * range).powi(2);
    let c2 = (0.03 * range).powi(2);
    let sq = |x: &Image| x.data.iter().map(|v| v * v).collect::<Vec<_>>();
    let ab: Vec<f64> = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    let mu_a = blur(&a.data, w, h);
    let mu_b = blur(&b.data, w, h);
    let e_aa = blur(&sq(a), w, h);
    let e_bb = blur(&sq(b), w, h);
    let e_ab = blur(&ab, w, h);
    let n = a.data.len();
    let (mut s, mut n1, mut n2, mut d1, mut d2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut total = 0.0;
    for p in 0..n {
        let (ma, mb) = (mu_a[p], mu_b[p]);
        n1[p] = 2.0 * ma * mb + c1;
        n2[p] = 2.0 * (e_ab[p] - ma * mb) + c2;
        d1[p] = ma * ma + mb * mb + c1;
        d2[p] = (e_aa[p] - ma * ma) + (e_bb[p] - mb * mb) + c2;
        s[p] = n1[p] * n2[p] / (d1[p] * d2[p]);
        total += s[p];
    }
    SsimTerms { value: total / n as f64, mu_a, mu_b, s, n1, n2, d1, d2, range }
}

/// Mean SSIM, 11x11 Gaussian window (sigma 1.5), `L = max(1, max pixel)`.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_shape(b)?;
    Ok(ssim_terms(a, b).value)
}

/// Mean SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &Image, b: &Image) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let (w, h) = (a.width, a.height);
    let t = ssim_terms(a, b);
    let n = a.data.len();
    let inv_n = 1.0 / n as f64;
    let (mut g_mu, mut g_eaa, mut g_eab) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut g_c1 = 0.0;
    let mut g_c2 = 0.0;
    for p in 0..n {
        let (ma, mb, s) = (t.mu_a[p], t.mu_b[p], t.s[p]);
        let dd = t.d1[p] * t.d2[p];
        g_mu[p] = inv_n * ((2.0 * mb * t.n2[p] - 2.0 * mb * t.n1[p]) / dd - s * (2.0 * ma / t.d1[p] - 2.0 * ma / t.d2[p]));
        g_eaa[p] = -inv_n * s / t.d2[p];
        g_eab[p] = inv_n * 2.0 * t.n1[p] / dd;
        g_c1 += inv_n * (t.n2[p] / dd - s / t.d1[p]);
        g_c2 += inv_n * (t.n1[p] / dd - s / t.d2[p]);
    }
    let bm = blur(&g_mu, w, h);
    let baa = blur(&g_eaa, w, h);
    let bab = blur(&g_eab, w, h);
    let mut grad: Vec<f64> = (0..n).map(|p| bm[p] + 2.0 * a.data[p] * baa[p] + b.data[p] * bab[p]).collect();
    // The dynamic range follows the brightest pixel of `a` when that one is the maximum.
    let (argmax, amax) = a.data.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
    if amax > 1.0 && amax >= b.max() && amax == t.range {
        let g_range = g_c1 * 2.0 * 1e-4 * t.range + g_c2 * 2.0 * 9e-4 * t.range;
        grad[argmax] += g_range;
    }
    Ok((t.value, grad))
}

/// `(1 - lambda) mean|a - b| + lambda (1 - SSIM) / 2`.
pub fn l1_dssim_loss(a: &Image, b: &Image, lambda_ssim: f64) -> Result<f64> {
    a.same_shape(b)?;
    let l1 = mean_abs_diff(a, b);
    if lambda_ssim == 0.0 {
        return Ok(l1);
    }
    Ok((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - ssim_terms(a, b).value) * 0.5)
}

pub fn l1_dssim_loss_with_grad(a: &Image, b: &Image, lambda_ssim: f64) -> Result<(f64, Vec<f64>)> {
    a.same_shape(b)?;
    let n = a.data.len() as f64;
    let l1 = mean_abs_diff(a, b);
    let mut grad: Vec<f64> = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (1.0 - lambda_ssim) * sign(x - y) / n)
        .collect();
    if lambda_ssim == 0.0 {
        return Ok((l1, grad));
    }
    let (s, gs) = ssim_with_grad(a, b)?;
    for (g, d) in grad.iter_mut().zip(&gs) {
        *g -= 0.5 * lambda_ssim * d;
    }
    Ok(((1.0 - lambda_ssim) * l1 + lambda_ssim * (1.0 - s) * 0.5, grad))
}

fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64
}

#[inline]
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Writes an 8-bit RGB PPM.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[[u8; 3]]) -> Result<()> {
    let mut buf = Vec::with_capacity(rgb.len() * 3 + 20);
    write!(buf, "P6\n{width} {height}\n255\n").unwrap();
    for px in rgb {
        buf.extend_from_slice(px);
    }
    write_file(path, &buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussians::{logit, normalize_quat};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cam(axis: ViewAxis) -> OrthoCamera {
        OrthoCamera::new(axis, 32, 32, [0.0, 0.0, 1.0, 1.0]).unwrap()
    }

    fn random_prim<R: Rng>(rng: &mut R) -> GaussianPrimitive {
        GaussianPrimitive {
            position: Vec3::new(rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)),
            log_scales: Vec3::new(rng.gen_range(-3.5..-2.5), rng.gen_range(-3.5..-2.5), rng.gen_range(-3.5..-2.5)),
            rotation: normalize_quat(&[rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
            opacity_logit: rng.gen_range(-1.5..1.5),
            emission: rng.gen_range(0.2..1.0),
        }
    }

    #[test]
    fn camera_validation() {
        assert!(OrthoCamera::new(ViewAxis::PosZ, 4, 32, [0.0, 0.0, 1.0, 1.0]).is_err());
        assert!(OrthoCamera::new(ViewAxis::PosZ, 32, 32, [0.0, 0.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn isotropic_projection_any_axis() {
        let g = GaussianPrimitive::isotropic(Vec3::new(0.5, 0.5, 0.5), 0.1, 0.5, 1.0);
        for axis in [ViewAxis::PosX, ViewAxis::PosY, ViewAxis::PosZ, ViewAxis::NegX, ViewAxis::NegY, ViewAxis::NegZ] {
            let c = cam(axis);
            let p = project_gaussian(&g, &c);
            let (px, _) = c.pixel_size();
            let world = p.cov2 * (px * px);
            assert_relative_eq!(world, Mat2::identity() * 0.01, epsilon = 1e-15);
            assert_relative_eq!(p.mean2, Vec2::new(16.0, 16.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn projection_matches_numerical_marginal() {
        // Integrate the 3D density along the view axis by quadrature and read the
        // inverse 2D covariance off log-ratios of the marginal density.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for axis in [ViewAxis::PosZ, ViewAxis::NegX, ViewAxis::PosY] {
            let g = random_prim(&mut rng);
            let c = cam(axis);
            let (eu, ev, ed) = axis.basis();
            let inv = g.covariance().try_inverse().unwrap();
            let s = g.scales().max();
            let marginal = |a: f64, b: f64| {
                let n = 4000;
                let dt = 24.0 * s / n as f64;
                (0..=n)
                    .map(|k| {
                        let t = -12.0 * s + k as f64 * dt;
                        let r = eu * a + ev * b + ed * t;
                        (-0.5 * (r.transpose() * inv * r)[(0, 0)]).exp()
                    })
                    .sum::<f64>()
            };
            let d = 0.5 * s;
            let f0 = marginal(0.0, 0.0).ln();
            let i00 = -2.0 * (marginal(d, 0.0).ln() - f0) / (d * d);
            let i11 = -2.0 * (marginal(0.0, d).ln() - f0) / (d * d);
            let i01 = (-2.0 * (marginal(d, d).ln() - f0) / (d * d) - i00 - i11) / 2.0;
            let oracle = Mat2::new(i00, i01, i01, i11).try_inverse().unwrap();
            let p = project_gaussian(&g, &c);
            let (px, py) = c.pixel_size();
            let flip = if axis.mirrored() { 1.0 } else { -1.0 };
            let world = Mat2::new(
                p.cov2[(0, 0)] * px * px,
                flip * p.cov2[(0, 1)] * px * py,
                flip * p.cov2[(1, 0)] * px * py,
                p.cov2[(1, 1)] * py * py,
            );
            assert_relative_eq!(world, oracle, epsilon = 1e-6 * oracle.amax(), max_relative = 1e-6);
        }
    }

    #[test]
    fn empty_cloud_renders_black() {
        let img = splat(&GaussianCloud::default(), &cam(ViewAxis::PosZ));
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn opaque_limit_returns_emission() {
        let mut g = GaussianPrimitive::isotropic(Vec3::new(0.5 + 1.0 / 64.0, 0.5 + 1.0 / 64.0, 0.5), 0.05, 0.5, 0.7);
        g.opacity_logit = logit(0.998);
        let c = cam(ViewAxis::PosZ);
        let img = splat(&GaussianCloud::new(vec![g], 0), &c);
        // Pixel (16, 15) center = (16.5, 15.5) px = the primitive's mean.
        assert_relative_eq!(img.get(16, 15), 0.7 * 0.998, max_relative = 1e-9);
    }

    #[test]
    fn two_primitives_match_explicit_blend() {
        let front = GaussianPrimitive::isotropic(Vec3::new(0.48, 0.5, 0.2), 0.06, 0.6, 0.9);
        let back = GaussianPrimitive::isotropic(Vec3::new(0.53, 0.47, 0.7), 0.08, 0.7, 0.4);
        let c = cam(ViewAxis::PosZ);
        // Back primitive listed first to exercise the depth sort.
        let img = splat(&GaussianCloud::new(vec![back, front], 0), &c);
        let sigma = |g: &GaussianPrimitive, x: usize, y: usize| {
            let p = project_gaussian(g, &c);
            let d = Vec2::new(x as f64 + 0.5, y as f64 + 0.5) - p.mean2;
            let m = (d.transpose() * p.cov2.try_inverse().unwrap() * d)[(0, 0)];
            if m > 9.0 { 0.0 } else { (g.opacity() * (-0.5 * m).exp()).min(SIGMA_CLAMP) }
        };
        for y in 0..32 {
            for x in 0..32 {
                let (s1, s2) = (sigma(&front, x, y), sigma(&back, x, y));
                let expect = front.emission * s1 + back.emission * s2 * (1.0 - s1);
                assert!((img.get(x, y) - expect).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn accumulated_opacity_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut prims: Vec<_> = (0..40).map(|_| random_prim(&mut rng)).collect();
        for g in prims.iter_mut() {
            g.emission = 1.0;
            g.opacity_logit = 4.0;
        }
        let img = splat(&GaussianCloud::new(prims, 0), &cam(ViewAxis::PosX));
        assert!(img.data.iter().all(|v| *v <= 1.0 + 1e-12 && *v >= 0.0));
    }

    #[test]
    fn singular_primitive_is_skipped() {
        let mut g = GaussianPrimitive::isotropic(Vec3::new(0.5, 0.5, 0.5), 0.05, 0.5, 1.0);
        g.log_scales = Vec3::new(-400.0, -400.0, -400.0);
        let out = splat_primitives(&[g], &cam(ViewAxis::PosZ));
        assert_eq!(out.stats.skipped_singular, 1);
        assert!(out.image.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn non_overlapping_order_invariance() {
        let a = GaussianPrimitive::isotropic(Vec3::new(0.25, 0.25, 0.3), 0.03, 0.6, 0.9);
        let b = GaussianPrimitive::isotropic(Vec3::new(0.75, 0.75, 0.6), 0.03, 0.6, 0.5);
        let c = cam(ViewAxis::PosZ);
        assert_eq!(splat(&GaussianCloud::new(vec![a, b], 0), &c), splat(&GaussianCloud::new(vec![b, a], 0), &c));
    }

    #[test]
    fn backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prims: Vec<_> = (0..5).map(|_| random_prim(&mut rng)).collect();
        let c = cam(ViewAxis::PosY);
        let weights: Vec<f64> = (0..32 * 32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let objective = |p: &[GaussianPrimitive]| -> f64 {
            splat_primitives(p, &c).image.data.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let fwd = splat_primitives(&prims, &c);
        let grads = splat_backward(&prims, &c, &fwd, &weights);
        let h = 1e-6;
        let check = |analytic: f64, perturb: &dyn Fn(&mut GaussianPrimitive, f64), i: usize| {
            let mut p = prims.clone();
            perturb(&mut p[i], h);
            let fp = objective(&p);
            let mut m = prims.clone();
            perturb(&mut m[i], -h);
            let fm = objective(&m);
            let fd = (fp - fm) / (2.0 * h);
            assert!((analytic - fd).abs() <= 1e-4 * fd.abs().max(1e-4), "analytic {analytic} fd {fd}");
        };
        for i in 0..prims.len() {
            for k in 0..3 {
                check(grads[i].position[k], &|g, d| g.position[k] += d, i);
                check(grads[i].log_scales[k], &|g, d| g.log_scales[k] += d, i);
            }
            for k in 0..4 {
                check(grads[i].rotation[k], &|g, d| g.rotation[k] += d, i);
            }
            check(grads[i].opacity_logit, &|g, d| g.opacity_logit += d, i);
            check(grads[i].emission, &|g, d| g.emission += d, i);
        }
    }

    fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize, scale: f64) -> Image {
        Image { width: w, height: h, data: (0..w * h).map(|_| rng.gen_range(0.0..scale)).collect() }
    }

    #[test]
    fn ssim_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_image(&mut rng, 20, 16, 1.0);
        let b = random_image(&mut rng, 20, 16, 1.0);
        assert_relative_eq!(ssim(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_relative_eq!(l1_dssim_loss(&a, &a, 0.2).unwrap(), 0.0, epsilon = 1e-12);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        let mae = a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert_eq!(l1_dssim_loss(&a, &b, 0.0).unwrap(), mae);
        assert!(ssim(&a, &Image::zeros(8, 8)).is_err());
        assert!(l1_dssim_loss(&a, &Image::zeros(8, 8), 0.2).is_err());
    }

    #[test]
    fn image_loss_grad_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for scale in [1.0, 2.5] {
            let a = random_image(&mut rng, 12, 10, scale);
            let b = random_image(&mut rng, 12, 10, 0.8);
            let (v, g) = l1_dssim_loss_with_grad(&a, &b, 0.2).unwrap();
            assert_relative_eq!(v, l1_dssim_loss(&a, &b, 0.2).unwrap(), max_relative = 1e-14);
            let h = 1e-7;
            for p in 0..a.data.len() {
                let mut ap = a.clone();
                ap.data[p] += h;
                let mut am = a.clone();
                am.data[p] -= h;
                let fd = (l1_dssim_loss(&ap, &b, 0.2).unwrap() - l1_dssim_loss(&am, &b, 0.2).unwrap()) / (2.0 * h);
                assert!((g[p] - fd).abs() <= 1e-5 * fd.abs().max(1e-3), "pixel {p}: {} vs {fd}", g[p]);
            }
        }
    }

    #[test]
    fn pfm_and_pgm_io() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let a = random_image(&mut rng, 9, 8, 2.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pfm");
        a.write_pfm(&p).unwrap();
        let b = Image::read_pfm(&p).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(*x as f32, *y as f32);
        }
        let raw = std::fs::read(&p).unwrap();
        assert!(raw.starts_with(b"Pf\n9 8\n-1.0\n"));
        a.write_pgm(&dir.path().join("a.pgm"), 2.0).unwrap();
        let pgm = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert_eq!(pgm.len(), "P5\n9 8\n255\n".len() + 72);
    }
}
