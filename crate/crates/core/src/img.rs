//! Small shared raster utilities: bilinear resampling and anti-aliased
//! primitive drawing over `H x W x 3` float canvases in `[0, 1]`.

use ndarray::{Array2, Array3};

use crate::scalar::Scalar;

/// How a primitive combines with what is already on the canvas.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    /// `max(dst, cov * color)` per channel. Order independent, never exceeds
    /// the primitive color; used for pose rasters.
    Max,
    /// Standard alpha-over with coverage as alpha; used for figures.
    Over,
}

/// Bilinear resize with half-pixel centers (no corner alignment).
pub fn bilinear_resize<S: Scalar>(src: &Array3<S>, out_w: usize, out_h: usize) -> Array3<S> {
    let (h, w, c) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let mut out = Array3::zeros((out_h, out_w, c));
    if out_h == 0 || out_w == 0 {
        return out;
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = S::from_f64(fy - y0 as f64);
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = S::from_f64(fx - x0 as f64);
            for ch in 0..c {
                let a = src[[y0, x0, ch]];
                let b = src[[y0, x1, ch]];
                let d = src[[y1, x0, ch]];
                let e = src[[y1, x1, ch]];
                let top = a + (b - a) * wx;
                let bot = d + (e - d) * wx;
                out[[oy, ox, ch]] = top + (bot - top) * wy;
            }
        }
    }
    out
}

/// Center-crop to the target aspect ratio, then bilinear-resize.
pub fn center_crop_resize<S: Scalar>(src: &Array3<S>, out_w: usize, out_h: usize) -> Array3<S> {
    let (crop_x, crop_y, crop_w, crop_h) = center_crop_rect(
        src.shape()[1],
        src.shape()[0],
        out_w,
        out_h,
    );
    let cropped = src
        .slice(ndarray::s![crop_y..crop_y + crop_h, crop_x..crop_x + crop_w, ..])
        .to_owned();
    bilinear_resize(&cropped, out_w, out_h)
}

/// The crop rectangle `(x, y, w, h)` used by [`center_crop_resize`].
pub fn center_crop_rect(
    src_w: usize,
    src_h: usize,
    out_w: usize,
    out_h: usize,
) -> (usize, usize, usize, usize) {
    let target_ar = out_w as f64 / out_h as f64;
    let src_ar = src_w as f64 / src_h as f64;
    if src_ar > target_ar {
        // Too wide: crop width.
        let crop_w = ((src_h as f64 * target_ar).round() as usize).clamp(1, src_w);
        ((src_w - crop_w) / 2, 0, crop_w, src_h)
    } else {
        let crop_h = ((src_w as f64 / target_ar).round() as usize).clamp(1, src_h);
        (0, (src_h - crop_h) / 2, src_w, crop_h)
    }
}

/// Anti-aliased line segment of the given width.
pub fn draw_line<S: Scalar>(
    canvas: &mut Array3<S>,
    p0: [f64; 2],
    p1: [f64; 2],
    color: [f64; 3],
    width: f64,
    mode: Composite,
) {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    let r = width / 2.0 + 0.5;
    let min_x = (p0[0].min(p1[0]) - r).floor().max(0.0) as usize;
    let max_x = (p0[0].max(p1[0]) + r).ceil().min((w - 1) as f64) as usize;
    let min_y = (p0[1].min(p1[1]) - r).floor().max(0.0) as usize;
    let max_y = (p0[1].max(p1[1]) + r).ceil().min((h - 1) as f64) as usize;
    let vx = p1[0] - p0[0];
    let vy = p1[1] - p0[1];
    let len2 = vx * vx + vy * vy;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let px = x as f64 - p0[0];
            let py = y as f64 - p0[1];
            let t = if len2 > 0.0 {
                ((px * vx + py * vy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let dx = px - t * vx;
            let dy = py - t * vy;
            let dist = (dx * dx + dy * dy).sqrt();
            let cov = (width / 2.0 + 0.5 - dist).clamp(0.0, 1.0);
            if cov > 0.0 {
                composite_pixel(canvas, y, x, color, cov, mode);
            }
        }
    }
}

/// Anti-aliased filled disc.
pub fn draw_disc<S: Scalar>(
    canvas: &mut Array3<S>,
    center: [f64; 2],
    radius: f64,
    color: [f64; 3],
    mode: Composite,
) {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    let min_x = (center[0] - radius - 1.0).floor().max(0.0) as usize;
    let max_x = (center[0] + radius + 1.0).ceil().min((w - 1) as f64) as usize;
    let min_y = (center[1] - radius - 1.0).floor().max(0.0) as usize;
    let max_y = (center[1] + radius + 1.0).ceil().min((h - 1) as f64) as usize;
    for y in min_y..=max_y {
        for x in min_x..=max_x {
            let dx = x as f64 - center[0];
            let dy = y as f64 - center[1];
            let dist = (dx * dx + dy * dy).sqrt();
            let cov = (radius + 0.5 - dist).clamp(0.0, 1.0);
            if cov > 0.0 {
                composite_pixel(canvas, y, x, color, cov, mode);
            }
        }
    }
}

/// Axis-aligned filled rectangle (integer bounds, clipped).
pub fn fill_rect<S: Scalar>(
    canvas: &mut Array3<S>,
    x0: usize,
    y0: usize,
    rw: usize,
    rh: usize,
    color: [f64; 3],
) {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    for y in y0..(y0 + rh).min(h) {
        for x in x0..(x0 + rw).min(w) {
            for ch in 0..3 {
                canvas[[y, x, ch]] = S::from_f64(color[ch]);
            }
        }
    }
}

fn composite_pixel<S: Scalar>(
    canvas: &mut Array3<S>,
    y: usize,
    x: usize,
    color: [f64; 3],
    cov: f64,
    mode: Composite,
) {
    for ch in 0..3 {
        let c = S::from_f64(color[ch] * cov);
        match mode {
            Composite::Max => {
                if c > canvas[[y, x, ch]] {
                    canvas[[y, x, ch]] = c;
                }
            }
            Composite::Over => {
                let a = S::from_f64(cov);
                canvas[[y, x, ch]] =
                    canvas[[y, x, ch]] * (S::one() - a) + S::from_f64(color[ch]) * a;
            }
        }
    }
}

/// Binary max-pool of an `H x W` mask by an integer factor.
pub fn maxpool2<S: Scalar>(mask: &Array2<S>, factor: usize) -> Array2<S> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    assert!(h % factor == 0 && w % factor == 0, "pool factor divides dims");
    let mut out = Array2::zeros((h / factor, w / factor));
    for y in 0..h / factor {
        for x in 0..w / factor {
            let mut m = S::zero();
            for dy in 0..factor {
                for dx in 0..factor {
                    let v = mask[[y * factor + dy, x * factor + dx]];
                    if v > m {
                        m = v;
                    }
                }
            }
            out[[y, x]] = m;
        }
    }
    out
}
