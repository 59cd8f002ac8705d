//! Mid-plane velocity slices: direction as hue, magnitude as brightness.
//!
//! Three panels side by side: xy (z = mid), zy (x = mid), xz (y = mid). Each panel
//! is framed by a ring whose hue at angle `theta` around the panel center is the
//! color of an in-plane vector pointing at `theta`, so the frame doubles as legend.

use dfkflow::{Aabb, Vec3, VelocityField};

#[cfg_attr(not(test), allow(dead_code))]
pub struct SliceImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[u8; 3]>,
    /// Side of the slice area inside each panel.
    pub size: usize,
    /// Width of the legend ring.
    pub border: usize,
}

#[cfg(test)]
impl SliceImage {
    pub fn panel_width(&self) -> usize {
        self.size + 2 * self.border
    }

    /// Pixel `(i, j)` of the slice area of `panel`, row 0 at the top.
    pub fn slice_pixel(&self, panel: usize, i: usize, j: usize) -> [u8; 3] {
        let x = panel * self.panel_width() + self.border + i;
        self.rgb[(self.border + j) * self.width + x]
    }
}

/// Horizontal axis, vertical axis and fixed axis of each panel.
const PANELS: [(usize, usize, usize); 3] = [(0, 1, 2), (2, 1, 0), (0, 2, 1)];

pub fn border_width(size: usize) -> usize {
    (size / 32).max(2)
}

/// `h` in degrees, `s` and `v` in `[0, 1]`.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    let q = |t: f64| ((t + m).clamp(0.0, 1.0) * 255.0).round() as u8;
    [q(r), q(g), q(b)]
}

fn angle_deg(u: f64, v: f64) -> f64 {
    v.atan2(u).to_degrees().rem_euclid(360.0)
}

pub fn velocity_slices(field: &dyn VelocityField, domain: &Aabb, size: usize) -> SliceImage {
    let border = border_width(size);
    let pw = size + 2 * border;
    let (width, height) = (3 * pw, pw);
    let mut rgb = vec![[0u8; 3]; width * height];
    let (lo, ext, mid) = (domain.lo(), domain.extent(), domain.center());

    for (p, &(ha, va, fa)) in PANELS.iter().enumerate() {
        let mut samples = Vec::with_capacity(size * size);
        for j in 0..size {
            for i in 0..size {
                let mut x = Vec3::zeros();
                x[ha] = lo[ha] + (i as f64 + 0.5) / size as f64 * ext[ha];
                x[va] = lo[va] + (1.0 - (j as f64 + 0.5) / size as f64) * ext[va];
                x[fa] = mid[fa];
                let v = field.velocity(&x);
                samples.push((v[ha], v[va]));
            }
        }
        let max = samples.iter().map(|(u, v)| u.hypot(*v)).fold(0.0, f64::max);
        for j in 0..size {
            for i in 0..size {
                let (u, v) = samples[j * size + i];
                let mag = u.hypot(v);
                let value = if max > 0.0 { mag / max } else { 0.0 };
                rgb[(border + j) * width + p * pw + border + i] = hsv_to_rgb(angle_deg(u, v), 1.0, value);
            }
        }
        let c = pw as f64 / 2.0;
        for py in 0..pw {
            for px in 0..pw {
                let inside = (border..border + size).contains(&px) && (border..border + size).contains(&py);
                if !inside {
                    let (dx, dy) = (px as f64 + 0.5 - c, c - (py as f64 + 0.5));
                    rgb[py * width + p * pw + px] = hsv_to_rgb(angle_deg(dx, dy), 1.0, 1.0);
                }
            }
        }
    }
    SliceImage { width, height, rgb, size, border }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfkflow::Mat3;

    struct Uniform(Vec3);

    impl VelocityField for Uniform {
        fn velocity(&self, _: &Vec3) -> Vec3 {
            self.0
        }
        fn jacobian(&self, _: &Vec3) -> Mat3 {
            Mat3::zeros()
        }
    }

    struct Swirl(f64);

    impl VelocityField for Swirl {
        fn velocity(&self, x: &Vec3) -> Vec3 {
            self.0 * Vec3::new(-(x.y - 0.5), x.x - 0.5, x.z)
        }
        fn jacobian(&self, _: &Vec3) -> Mat3 {
            Mat3::zeros()
        }
    }

    fn slice_pixels(img: &SliceImage, panel: usize) -> Vec<[u8; 3]> {
        (0..img.size).flat_map(|j| (0..img.size).map(move |i| (i, j))).map(|(i, j)| img.slice_pixel(panel, i, j)).collect()
    }

    #[test]
    fn primary_hues() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(360.0, 1.0, 0.5), [128, 0, 0]);
        assert_eq!(hsv_to_rgb(77.0, 1.0, 0.0), [0, 0, 0]);
    }

    #[test]
    fn zero_field_gives_black_slices() {
        let img = velocity_slices(&Uniform(Vec3::zeros()), &Aabb::unit(), 16);
        assert_eq!((img.width, img.height), (3 * 20, 20));
        for p in 0..3 {
            assert!(slice_pixels(&img, p).iter().all(|px| *px == [0, 0, 0]));
        }
    }

    #[test]
    fn uniform_x_flow_has_one_hue() {
        let img = velocity_slices(&Uniform(Vec3::new(0.3, 0.0, 0.0)), &Aabb::unit(), 16);
        assert!(slice_pixels(&img, 0).iter().all(|px| *px == [255, 0, 0]));
        assert!(slice_pixels(&img, 2).iter().all(|px| *px == [255, 0, 0]));
        // zy plane has no in-plane component.
        assert!(slice_pixels(&img, 1).iter().all(|px| *px == [0, 0, 0]));
    }

    #[test]
    fn brightness_is_normalized_per_slice() {
        let a = velocity_slices(&Swirl(1.0), &Aabb::unit(), 24);
        let b = velocity_slices(&Swirl(2.0), &Aabb::unit(), 24);
        assert_eq!(a.rgb, b.rgb);
        assert!(slice_pixels(&a, 0).iter().any(|px| *px != [0, 0, 0]));
    }

    #[test]
    fn legend_ring_matches_slice_colors() {
        let img = velocity_slices(&Uniform(Vec3::new(0.0, 1.0, 0.0)), &Aabb::unit(), 32);
        let pw = img.panel_width();
        // Top edge of the xy ring points along +y, the same direction as the flow.
        let top = img.rgb[pw / 2];
        let inner = img.slice_pixel(0, 5, 5);
        assert!(top.iter().zip(inner).all(|(a, b)| a.abs_diff(b) <= 12), "{top:?} vs {inner:?}");
        // Right edge points along +x, which is red.
        let right = img.rgb[(pw / 2) * img.width + pw - 1];
        assert!(right[0] == 255 && right[1] <= 8 && right[2] <= 8, "{right:?}");
    }
}
