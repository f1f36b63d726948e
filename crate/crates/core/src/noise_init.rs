//! Residual-based noise initialization.
//!
//! Every frame starts from fresh Gaussian noise. Walking forward in time, a
//! latent cell whose source pixels did not move (inter-frame residual at or
//! below the threshold) takes the already-updated noise of the previous frame
//! instead, so static regions share noise across the whole clip.

use ndarray::{s, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default residual threshold used at inference.
pub const DEFAULT_THRESHOLD: f32 = 0.1;

/// Per-pixel colour change: channel-wise L2 norm divided by √3, so the largest
/// possible change (black ↔ white) is exactly 1.
pub fn residual_magnitude(prev: ArrayView3<f32>, cur: ArrayView3<f32>) -> Result<Array3<f32>> {
    if prev.dim() != cur.dim() {
        return Err(Error::shape(
            "residual frames",
            format!("{:?}", prev.dim()),
            format!("{:?}", cur.dim()),
        ));
    }
    let (c, h, w) = cur.dim();
    let inv_c = 1.0 / c as f32;
    let mut out = Array3::<f32>::zeros((1, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut ss = 0.0f32;
            for ch in 0..c {
                let d = cur[[ch, y, x]] - prev[[ch, y, x]];
                ss += d * d;
            }
            out[[0, y, x]] = (ss * inv_c).sqrt();
        }
    }
    Ok(out)
}

/// Binary motion masks at latent resolution. `masks[0]` is all ones.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualMasks {
    /// `[F, 1, h, w]`, values 0 or 1.
    pub masks: Array4<u8>,
    pub threshold: f32,
}

impl ResidualMasks {
    pub fn frames(&self) -> usize {
        self.masks.shape()[0]
    }

    /// Number of cells marked as moving in frames 1.. (frame 0 excluded).
    pub fn moving_cells(&self) -> usize {
        self.masks
            .slice(s![1.., .., .., ..])
            .iter()
            .filter(|&&m| m == 1)
            .count()
    }
}

/// Thresholds residuals at full resolution (strict `>`) and max-pools each
/// `factor × factor` block onto the latent grid.
pub fn build_masks(video: ArrayView4<f32>, threshold: f32, factor: usize) -> Result<ResidualMasks> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::arg("threshold", format!("{threshold} outside [0, 1]")));
    }
    let (f, _, h, w) = video.dim();
    if f == 0 {
        return Err(Error::arg("video", "needs at least one frame"));
    }
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(Error::shape(
            "mask downsampling",
            format!("H and W divisible by {factor}"),
            format!("{h}x{w}"),
        ));
    }
    let (lh, lw) = (h / factor, w / factor);
    let mut masks = Array4::<u8>::zeros((f, 1, lh, lw));
    masks.index_axis_mut(Axis(0), 0).fill(1);
    for i in 1..f {
        let res = residual_magnitude(video.index_axis(Axis(0), i - 1), video.index_axis(Axis(0), i))?;
        for y in 0..h {
            for x in 0..w {
                if res[[0, y, x]] > threshold {
                    masks[[i, 0, y / factor, x / factor]] = 1;
                }
            }
        }
    }
    Ok(ResidualMasks { masks, threshold })
}

/// Initial sampler noise `[F, C, h, w]` with the masks that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialNoise {
    pub noise: Array4<f32>,
    pub seed: u64,
    pub threshold: f32,
    pub masks: ResidualMasks,
}

/// I.i.d. standard normal draws, frame-major, from `seed`.
pub fn fresh_noise(frames: usize, channels: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_simple_fn((frames, channels, h, w), || StandardNormal.sample(&mut rng))
}

/// Applies the propagation rule in place to fresh noise: for `i = 1..F`,
/// `x[i] = (x[i] - x[i-1]) * mask[i] + x[i-1]`, with the mask broadcast over channels.
/// A zero mask copies the previous frame's value exactly.
pub fn propagate(noise: &mut Array4<f32>, masks: &ResidualMasks) -> Result<()> {
    let (f, c, h, w) = noise.dim();
    let md = masks.masks.dim();
    if md != (f, 1, h, w) {
        return Err(Error::shape(
            "residual masks",
            format!("({f}, 1, {h}, {w})"),
            format!("{md:?}"),
        ));
    }
    for i in 1..f {
        for y in 0..h {
            for x in 0..w {
                if masks.masks[[i, 0, y, x]] == 0 {
                    for ch in 0..c {
                        noise[[i, ch, y, x]] = noise[[i - 1, ch, y, x]];
                    }
                }
            }
        }
    }
    Ok(())
}

/// Residual-based initial noise for `video` (`[F, 3, H, W]`, values in `[0, 1]`).
pub fn init_noise(
    video: ArrayView4<f32>,
    threshold: f32,
    seed: u64,
    latent_channels: usize,
    factor: usize,
) -> Result<InitialNoise> {
    let masks = build_masks(video, threshold, factor)?;
    let (f, _, lh, lw) = masks.masks.dim();
    let mut noise = fresh_noise(f, latent_channels, lh, lw, seed);
    propagate(&mut noise, &masks)?;
    Ok(InitialNoise {
        noise,
        seed,
        threshold,
        masks,
    })
}

/// Summary written by the noise inspection tool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseStats {
    pub threshold: f32,
    pub seed: u64,
    pub shape: [usize; 4],
    pub mean: f64,
    pub std: f64,
    /// Per frame: fraction of latent cells drawn fresh (frame 0 is always 1).
    pub fresh_fraction: Vec<f64>,
    /// Per frame: fraction of cells bit-equal to the previous frame (frame 0 is 0).
    pub copied_fraction: Vec<f64>,
}

impl InitialNoise {
    pub fn stats(&self) -> NoiseStats {
        let (f, c, h, w) = self.noise.dim();
        let n = self.noise.len() as f64;
        let mean = self.noise.iter().map(|&v| f64::from(v)).sum::<f64>() / n;
        let var = self
            .noise
            .iter()
            .map(|&v| (f64::from(v) - mean).powi(2))
            .sum::<f64>()
            / n;
        let cells = (h * w) as f64;
        let mut fresh = Vec::with_capacity(f);
        let mut copied = Vec::with_capacity(f);
        for i in 0..f {
            let m = self.masks.masks.index_axis(Axis(0), i);
            fresh.push(m.iter().filter(|&&v| v == 1).count() as f64 / cells);
            if i == 0 {
                copied.push(0.0);
                continue;
            }
            let mut same = 0usize;
            for y in 0..h {
                for x in 0..w {
                    if (0..c).all(|ch| self.noise[[i, ch, y, x]] == self.noise[[i - 1, ch, y, x]]) {
                        same += 1;
                    }
                }
            }
            copied.push(same as f64 / cells);
        }
        NoiseStats {
            threshold: self.threshold,
            seed: self.seed,
            shape: [f, c, h, w],
            mean,
            std: var.sqrt(),
            fresh_fraction: fresh,
            copied_fraction: copied,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::scene::{generate_scene, RenderOptions, SceneSpec, ShapeKind, ShapeSpec};
    use proptest::prelude::*;

    fn frames_equal(n: &Array4<f32>, a: usize, b: usize) -> bool {
        n.index_axis(Axis(0), a) == n.index_axis(Axis(0), b)
    }

    #[test]
    fn residual_examples() {
        let mut a = Array3::<f32>::zeros((3, 1, 3));
        let mut b = a.clone();
        assert!(residual_magnitude(a.view(), b.view()).unwrap().iter().all(|&v| v == 0.0));
        b.slice_mut(s![.., 0, 0]).fill(1.0);
        b[[0, 0, 1]] = 1.0;
        let r = residual_magnitude(a.view(), b.view()).unwrap();
        assert_eq!(r[[0, 0, 0]], 1.0);
        // oracle: sqrt(1)/sqrt(3)
        assert!((r[[0, 0, 1]] - 0.577_350_26).abs() < 1e-6);
        a[[0, 0, 0]] = 0.5;
        assert!(residual_magnitude(a.view(), Array3::zeros((3, 2, 2)).view()).is_err());
    }

    fn random_video(f: usize, h: usize, w: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((f, 3, h, w), || rand::Rng::random::<f32>(&mut rng))
    }

    #[test]
    fn threshold_one_copies_everything() {
        let v = random_video(6, 8, 8, 1);
        let m = build_masks(v.view(), 1.0, 2).unwrap();
        assert_eq!(m.moving_cells(), 0);
        let n = init_noise(v.view(), 1.0, 5, 4, 2).unwrap();
        for i in 1..6 {
            assert!(frames_equal(&n.noise, 0, i));
        }
    }

    #[test]
    fn static_video_copies_everything() {
        let mut v = Array4::<f32>::zeros((4, 3, 4, 4));
        v.fill(0.3);
        for t in [0.0, 0.1, 0.5] {
            assert_eq!(build_masks(v.view(), t, 1).unwrap().moving_cells(), 0);
        }
    }

    #[test]
    fn static_scene_from_generator_copies_everything() {
        let spec = SceneSpec {
            shapes: vec![ShapeSpec::new(ShapeKind::Square, 4, 8, [3.0, 3.0], [0.0, 0.0])],
            background_hue: 0,
            frames: 3,
            height: 16,
            width: 16,
            seed: 0,
            render: RenderOptions::default(),
        };
        let v = generate_scene(&spec).unwrap();
        assert_eq!(build_masks(v.frames.view(), 0.0, 4).unwrap().moving_cells(), 0);
    }

    #[test]
    fn threshold_zero_on_all_moving_video_is_all_fresh() {
        let mut v = Array4::<f32>::zeros((5, 3, 4, 4));
        for i in 0..5 {
            v.index_axis_mut(Axis(0), i).fill(if i % 2 == 0 { 0.0 } else { 0.6 });
        }
        let n = init_noise(v.view(), 0.0, 9, 3, 1).unwrap();
        assert_eq!(n.masks.moving_cells(), 4 * 16);
        let fresh = fresh_noise(5, 3, 4, 4, 9);
        assert_eq!(n.noise, fresh);
    }

    #[test]
    fn single_pixel_change_marks_one_block() {
        // Brute-force oracle: scan every d×d block for a residual above the threshold.
        let mut v = Array4::<f32>::zeros((2, 3, 8, 8));
        v[[1, 1, 5, 2]] = 0.9;
        let m = build_masks(v.view(), 0.1, 4).unwrap();
        for by in 0..2 {
            for bx in 0..2 {
                let mut moved = false;
                for y in by * 4..by * 4 + 4 {
                    for x in bx * 4..bx * 4 + 4 {
                        let d: f32 = (0..3).map(|c| (v[[1, c, y, x]] - v[[0, c, y, x]]).powi(2)).sum();
                        moved |= d.sqrt() / 3f32.sqrt() > 0.1;
                    }
                }
                assert_eq!(m.masks[[1, 0, by, bx]] == 1, moved);
            }
        }
        assert_eq!(m.moving_cells(), 1);
    }

    #[test]
    fn two_by_two_hand_executed_case() {
        // One moving latent cell at (1, 0), factor 1.
        let mut v = Array4::<f32>::zeros((2, 3, 2, 2));
        v[[1, 0, 1, 0]] = 1.0;
        let n = init_noise(v.view(), 0.1, 42, 2, 1).unwrap();
        let fresh = fresh_noise(2, 2, 2, 2, 42);
        // Hand execution: x1 = (x1 - x0) * mask + x0.
        for c in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expected = if (y, x) == (1, 0) {
                        fresh[[1, c, y, x]]
                    } else {
                        fresh[[0, c, y, x]]
                    };
                    assert_eq!(n.noise[[1, c, y, x]].to_bits(), expected.to_bits());
                    assert_eq!(n.noise[[0, c, y, x]].to_bits(), fresh[[0, c, y, x]].to_bits());
                }
            }
        }
    }

    #[test]
    fn propagation_is_cumulative() {
        // Static for two frames, then the cell moves at frame 3.
        let mut v = Array4::<f32>::zeros((4, 3, 1, 1));
        v[[3, 0, 0, 0]] = 1.0;
        let n = init_noise(v.view(), 0.1, 3, 1, 1).unwrap();
        let fresh = fresh_noise(4, 1, 1, 1, 3);
        assert_eq!(n.noise[[1, 0, 0, 0]], fresh[[0, 0, 0, 0]]);
        assert_eq!(n.noise[[2, 0, 0, 0]], fresh[[0, 0, 0, 0]]);
        assert_eq!(n.noise[[3, 0, 0, 0]], fresh[[3, 0, 0, 0]]);
    }

    #[test]
    fn ties_at_threshold_propagate() {
        let mut v = Array4::<f32>::zeros((2, 3, 1, 1));
        v.slice_mut(s![1, .., .., ..]).fill(1.0);
        assert_eq!(build_masks(v.view(), 1.0, 1).unwrap().moving_cells(), 0);
    }

    #[test]
    fn bad_threshold_and_factor() {
        let v = Array4::<f32>::zeros((2, 3, 6, 6));
        assert!(build_masks(v.view(), 1.5, 1).is_err());
        assert!(build_masks(v.view(), 0.1, 4).is_err());
    }

    #[test]
    fn stats_report_fractions() {
        let v = random_video(3, 4, 4, 2);
        let st = init_noise(v.view(), 1.0, 1, 2, 1).unwrap().stats();
        assert_eq!(st.fresh_fraction, vec![1.0, 0.0, 0.0]);
        assert_eq!(st.copied_fraction, vec![0.0, 1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn static_cells_equal_previous_frame(seed in 0u64..1000, t in 0.0f32..1.0) {
            let v = random_video(4, 4, 4, seed).mapv(|x| if x < 0.5 { 0.0 } else { x });
            let n = init_noise(v.view(), t, seed, 2, 2).unwrap();
            for i in 1..4 {
                for y in 0..2 {
                    for x in 0..2 {
                        if n.masks.masks[[i, 0, y, x]] == 0 {
                            for c in 0..2 {
                                prop_assert_eq!(n.noise[[i, c, y, x]].to_bits(), n.noise[[i - 1, c, y, x]].to_bits());
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn fresh_cells_monotone_in_threshold(seed in 0u64..1000, a in 0.0f32..1.0, b in 0.0f32..1.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let v = random_video(4, 4, 4, seed);
            let m_lo = build_masks(v.view(), lo, 1).unwrap();
            let m_hi = build_masks(v.view(), hi, 1).unwrap();
            prop_assert!(m_hi.moving_cells() <= m_lo.moving_cells());
            for (l, h) in m_lo.masks.iter().zip(m_hi.masks.iter()) {
                prop_assert!(h <= l);
            }
        }

        #[test]
        fn first_frame_depends_only_on_seed(seed in 0u64..1000, vseed in 0u64..1000) {
            let a = init_noise(random_video(3, 4, 4, vseed).view(), 0.1, seed, 2, 1).unwrap();
            let b = init_noise(random_video(3, 4, 4, vseed + 1).view(), 0.1, seed, 2, 1).unwrap();
            prop_assert_eq!(a.noise.index_axis(Axis(0), 0), b.noise.index_axis(Axis(0), 0));
        }
    }
}
