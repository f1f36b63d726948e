//! Model-free annotators producing control maps from RGB frames.
//!
//! All annotators take a single `[3, H, W]` frame with values in `[0, 1]` and
//! return a `[1, H, W]` map.

use ndarray::{Array2, Array3, ArrayView3};

use crate::data::scene::{depth_plane_for_hue, BACKGROUND_DEPTH, NUM_HUES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeParams {
    /// Hysteresis thresholds on the normalized gradient magnitude (unit step = 1.0).
    pub low: f32,
    pub high: f32,
    /// Blur width for soft edges.
    pub soft_sigma: f32,
}

impl Default for EdgeParams {
    fn default() -> Self {
        Self {
            low: 0.1,
            high: 0.25,
            soft_sigma: 1.0,
        }
    }
}

/// Chroma below which a pixel is classified as background.
pub const BACKGROUND_CHROMA: f32 = 0.5;

struct Gradient {
    gx: Array2<f32>,
    gy: Array2<f32>,
    mag: Array2<f32>,
}

/// Sobel gradient with replicated borders. At each pixel the channel with the
/// largest magnitude wins. Magnitudes are divided by 4 so a unit step reads 1.0.
fn color_gradient(frame: ArrayView3<f32>) -> Gradient {
    let (c, h, w) = frame.dim();
    let mut gx = Array2::<f32>::zeros((h, w));
    let mut gy = Array2::<f32>::zeros((h, w));
    let mut mag = Array2::<f32>::zeros((h, w));
    let at = |ch: usize, y: isize, x: isize| {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        frame[[ch, yy, xx]]
    };
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut best = (0.0f32, 0.0f32, -1.0f32);
            for ch in 0..c {
                let sx = (at(ch, y - 1, x + 1) + 2.0 * at(ch, y, x + 1) + at(ch, y + 1, x + 1))
                    - (at(ch, y - 1, x - 1) + 2.0 * at(ch, y, x - 1) + at(ch, y + 1, x - 1));
                let sy = (at(ch, y + 1, x - 1) + 2.0 * at(ch, y + 1, x) + at(ch, y + 1, x + 1))
                    - (at(ch, y - 1, x - 1) + 2.0 * at(ch, y - 1, x) + at(ch, y - 1, x + 1));
                let (sx, sy) = (sx / 4.0, sy / 4.0);
                let m = (sx * sx + sy * sy).sqrt();
                if m > best.2 {
                    best = (sx, sy, m);
                }
            }
            let (yy, xx) = (y as usize, x as usize);
            gx[[yy, xx]] = best.0;
            gy[[yy, xx]] = best.1;
            mag[[yy, xx]] = best.2.max(0.0);
        }
    }
    Gradient { gx, gy, mag }
}

/// Binary edge map: colour Sobel gradient, non-maximum suppression along the
/// quantized gradient direction, then double-threshold hysteresis.
///
/// On a step edge the two straddling pixels have equal magnitude; the pixel on
/// the side the gradient points to (the brighter side) is kept.
pub fn edge_annotate(frame: ArrayView3<f32>, params: &EdgeParams) -> Array3<f32> {
    let (_, h, w) = frame.dim();
    let g = color_gradient(frame);
    let tan22 = (std::f32::consts::PI / 8.0).tan();
    let mag_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            g.mag[[y as usize, x as usize]]
        }
    };

    let mut thin = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let m = g.mag[[y, x]];
            if m <= 0.0 {
                continue;
            }
            let (gx, gy) = (g.gx[[y, x]], g.gy[[y, x]]);
            let sx = if gx > 0.0 { 1 } else if gx < 0.0 { -1 } else { 0 };
            let sy = if gy > 0.0 { 1 } else if gy < 0.0 { -1 } else { 0 };
            let (dx, dy) = if gy.abs() <= tan22 * gx.abs() {
                (sx, 0)
            } else if gx.abs() <= tan22 * gy.abs() {
                (0, sy)
            } else {
                (sx, sy)
            };
            let (yi, xi) = (y as isize, x as isize);
            let fwd = mag_at(yi + dy, xi + dx);
            let back = mag_at(yi - dy, xi - dx);
            if m > fwd && m >= back {
                thin[[y, x]] = m;
            }
        }
    }

    // Hysteresis: flood from strong pixels through 8-connected weak ones.
    let mut out = Array3::<f32>::zeros((1, h, w));
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if thin[[y, x]] >= params.high {
                out[[0, y, x]] = 1.0;
                stack.push((y, x));
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if out[[0, ny, nx]] == 0.0 && thin[[ny, nx]] >= params.low {
                    out[[0, ny, nx]] = 1.0;
                    stack.push((ny, nx));
                }
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(0.0) as isize;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

fn blur(img: &Array2<f32>, sigma: f32) -> Array2<f32> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = img.dim();
    let pass = |src: &Array2<f32>, horizontal: bool| {
        let mut dst = Array2::<f32>::zeros((h, w));
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let o = i as isize - r;
                    let (yy, xx) = if horizontal { (y, x + o) } else { (y + o, x) };
                    if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                        acc += kv * src[[yy as usize, xx as usize]];
                    }
                }
                dst[[y as usize, x as usize]] = acc;
            }
        }
        dst
    };
    pass(&pass(img, true), false)
}

/// Soft edge map: Gaussian-blurred gradient magnitude scaled so its max is 1.
pub fn soft_edge_annotate(frame: ArrayView3<f32>, sigma: f32) -> Array3<f32> {
    let (_, h, w) = frame.dim();
    let blurred = blur(&color_gradient(frame).mag, sigma);
    let max = blurred.iter().cloned().fold(0.0f32, f32::max);
    let mut out = Array3::<f32>::zeros((1, h, w));
    if max > 0.0 {
        for ((y, x), v) in blurred.indexed_iter() {
            out[[0, y, x]] = v / max;
        }
    }
    out
}

fn rgb_to_hue_chroma(r: f32, g: f32, b: f32) -> (f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let c = max - min;
    if c <= 0.0 {
        return (0.0, 0.0);
    }
    let h = if max == r {
        ((g - b) / c).rem_euclid(6.0)
    } else if max == g {
        (b - r) / c + 2.0
    } else {
        (r - g) / c + 4.0
    };
    (h * 60.0, c)
}

/// Nearest hue bucket by circular distance; ties go to the lowest bucket id.
pub fn nearest_hue_bucket(hue_deg: f32) -> u8 {
    let step = 360.0 / f32::from(NUM_HUES);
    let mut best = (0u8, f32::INFINITY);
    for b in 0..NUM_HUES {
        let d = (hue_deg - f32::from(b) * step).rem_euclid(360.0);
        let d = d.min(360.0 - d);
        if d < best.1 {
            best = (b, d);
        }
    }
    best.0
}

/// Classifies one RGB pixel: `None` for background, otherwise its hue bucket.
pub fn classify_pixel(rgb: [f32; 3]) -> Option<u8> {
    let (hue, chroma) = rgb_to_hue_chroma(rgb[0], rgb[1], rgb[2]);
    (chroma >= BACKGROUND_CHROMA).then(|| nearest_hue_bucket(hue))
}

/// Depth map recovered from colour alone through the fixed hue → depth lookup.
pub fn depth_annotate(frame: ArrayView3<f32>) -> Array3<f32> {
    let (_, h, w) = frame.dim();
    let mut out = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = [frame[[0, y, x]], frame[[1, y, x]], frame[[2, y, x]]];
            out[[0, y, x]] = match classify_pixel(rgb) {
                Some(bucket) => depth_plane_for_hue(bucket).value(),
                None => BACKGROUND_DEPTH,
            };
        }
    }
    out
}
