use ndarray::{Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::annotate::{edge_annotate, soft_edge_annotate, EdgeParams};
use crate::error::{Error, Result};

/// Number of hue buckets a shape or background colour can be drawn from.
pub const NUM_HUES: u8 = 8;

/// Shape colours: fully saturated, full value.
pub const SHAPE_SATURATION: f32 = 1.0;
pub const SHAPE_VALUE: f32 = 1.0;
/// Backgrounds are dim, washed-out tints so their chroma stays far below any shape's.
pub const BACKGROUND_SATURATION: f32 = 0.25;
pub const BACKGROUND_VALUE: f32 = 0.35;

pub const HUE_NAMES: [&str; NUM_HUES as usize] =
    ["red", "orange", "lime", "green", "cyan", "blue", "purple", "pink"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Square => "square",
            ShapeKind::Circle => "circle",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DepthPlane {
    Near,
    Mid,
    Far,
}

impl DepthPlane {
    pub fn value(self) -> f32 {
        match self {
            DepthPlane::Near => 0.25,
            DepthPlane::Mid => 0.5,
            DepthPlane::Far => 0.75,
        }
    }
}

/// Fixed hue-bucket → depth-plane lookup shared by the renderer and the depth annotator.
pub fn depth_plane_for_hue(hue: u8) -> DepthPlane {
    match hue % 3 {
        0 => DepthPlane::Near,
        1 => DepthPlane::Mid,
        _ => DepthPlane::Far,
    }
}

/// Depth marking pixels not covered by any shape.
pub const BACKGROUND_DEPTH: f32 = 1.0;

/// Hue angle in degrees of a bucket centre.
pub fn hue_degrees(hue: u8) -> f32 {
    f32::from(hue) * (360.0 / f32::from(NUM_HUES))
}

pub fn hsv_to_rgb(hue_deg: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let h = (hue_deg.rem_euclid(360.0)) / 60.0;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub fn shape_rgb(hue: u8) -> [f32; 3] {
    hsv_to_rgb(hue_degrees(hue), SHAPE_SATURATION, SHAPE_VALUE)
}

pub fn background_rgb(hue: u8) -> [f32; 3] {
    hsv_to_rgb(hue_degrees(hue), BACKGROUND_SATURATION, BACKGROUND_VALUE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub hue: u8,
    pub depth: DepthPlane,
    /// Side length of the bounding box in pixels.
    pub size: u32,
    /// Top-left corner of the bounding box at frame 0, `[x, y]` in pixels.
    pub position: [f32; 2],
    /// Pixels per frame, `[dx, dy]`.
    pub velocity: [f32; 2],
}

impl ShapeSpec {
    /// Builds a shape whose depth plane is the one its hue maps to.
    pub fn new(kind: ShapeKind, hue: u8, size: u32, position: [f32; 2], velocity: [f32; 2]) -> Self {
        Self {
            kind,
            hue,
            depth: depth_plane_for_hue(hue),
            size,
            position,
            velocity,
        }
    }

    pub fn direction_word(&self) -> &'static str {
        direction_word(self.velocity)
    }

    pub fn caption(&self) -> String {
        format!(
            "a {} {} moving {}",
            HUE_NAMES[self.hue as usize],
            self.kind.name(),
            self.direction_word()
        )
    }

    /// Whether the pixel-space point lies inside the shape whose bounding box starts at `origin`.
    pub fn contains(&self, origin: [f32; 2], px: f32, py: f32) -> bool {
        let s = self.size as f32;
        let (x0, y0) = (origin[0], origin[1]);
        if px < x0 || py < y0 || px >= x0 + s || py >= y0 + s {
            return false;
        }
        match self.kind {
            ShapeKind::Square => true,
            ShapeKind::Circle => {
                let r = s / 2.0;
                let (dx, dy) = (px - (x0 + r), py - (y0 + r));
                dx * dx + dy * dy <= r * r
            }
            ShapeKind::Triangle => (px - (x0 + s / 2.0)).abs() <= (py - y0) / 2.0,
        }
    }
}

/// Caption word for a velocity: dominant axis, image y pointing down.
pub fn direction_word(velocity: [f32; 2]) -> &'static str {
    let [vx, vy] = velocity;
    if vx == 0.0 && vy == 0.0 {
        "nowhere"
    } else if vx.abs() >= vy.abs() {
        if vx > 0.0 {
            "right"
        } else {
            "left"
        }
    } else if vy > 0.0 {
        "down"
    } else {
        "up"
    }
}

pub const DIRECTION_WORDS: [&str; 5] = ["left", "right", "up", "down", "nowhere"];

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// 4×4 supersampled coverage instead of hard pixel-centre tests.
    #[serde(default)]
    pub antialias: bool,
    /// Standard deviation of per-frame Gaussian capture noise added to RGB values.
    #[serde(default)]
    pub sensor_noise: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shapes: Vec<ShapeSpec>,
    pub background_hue: u8,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    #[serde(default)]
    pub render: RenderOptions,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidScene("frame count must be at least 1".into()));
        }
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidScene(format!(
                "canvas {}x{} is empty",
                self.height, self.width
            )));
        }
        if self.background_hue >= NUM_HUES {
            return Err(Error::InvalidScene(format!(
                "background hue bucket {} outside 0..{NUM_HUES}",
                self.background_hue
            )));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.hue >= NUM_HUES {
                return Err(Error::InvalidScene(format!(
                    "shape {i}: hue bucket {} outside 0..{NUM_HUES}",
                    s.hue
                )));
            }
            if s.depth != depth_plane_for_hue(s.hue) {
                return Err(Error::InvalidScene(format!(
                    "shape {i}: hue bucket {} belongs to depth plane {:?}, not {:?}",
                    s.hue,
                    depth_plane_for_hue(s.hue),
                    s.depth
                )));
            }
            if s.size == 0 || s.size as usize > self.width || s.size as usize > self.height {
                return Err(Error::InvalidScene(format!(
                    "shape {i}: size {} px does not fit a {}x{} canvas",
                    s.size, self.height, self.width
                )));
            }
            let (max_x, max_y) = (
                (self.width - s.size as usize) as f32,
                (self.height - s.size as usize) as f32,
            );
            let [x, y] = s.position;
            if !(0.0..=max_x).contains(&x) || !(0.0..=max_y).contains(&y) {
                return Err(Error::InvalidScene(format!(
                    "shape {i}: start position ({x}, {y}) leaves the canvas"
                )));
            }
        }
        Ok(())
    }

    pub fn caption(&self) -> String {
        self.shapes
            .iter()
            .map(ShapeSpec::caption)
            .collect::<Vec<_>>()
            .join(" and ")
    }

    /// Bounding-box origins of every shape at every frame, with reflective bouncing.
    pub fn trajectories(&self) -> Vec<Vec<[f32; 2]>> {
        self.shapes
            .iter()
            .map(|s| {
                let limit = [
                    (self.width - s.size as usize) as f32,
                    (self.height - s.size as usize) as f32,
                ];
                let mut pos = s.position;
                let mut vel = s.velocity;
                let mut out = Vec::with_capacity(self.frames);
                for _ in 0..self.frames {
                    out.push(pos);
                    for a in 0..2 {
                        pos[a] += vel[a];
                        // A reflection can overshoot again when |v| exceeds the free range.
                        loop {
                            if pos[a] < 0.0 {
                                pos[a] = -pos[a];
                                vel[a] = -vel[a];
                            } else if pos[a] > limit[a] {
                                pos[a] = 2.0 * limit[a] - pos[a];
                                vel[a] = -vel[a];
                            } else {
                                break;
                            }
                            if limit[a] == 0.0 {
                                pos[a] = 0.0;
                                break;
                            }
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// Draws a random scene. `frames`, canvas and shape count come from `sampler`.
    pub fn sample(sampler: &SceneSampler, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_shapes = rng.random_range(sampler.min_shapes..=sampler.max_shapes);
        let min_size = sampler.min_size.min(sampler.height as u32).min(sampler.width as u32);
        let max_size = sampler.max_size.min(sampler.height as u32).min(sampler.width as u32).max(min_size);
        let shapes = (0..n_shapes)
            .map(|_| {
                let kind = ShapeKind::ALL[rng.random_range(0..3)];
                let hue = rng.random_range(0..NUM_HUES);
                let size = rng.random_range(min_size..=max_size);
                let x = rng.random_range(0..=(sampler.width as u32 - size)) as f32;
                let y = rng.random_range(0..=(sampler.height as u32 - size)) as f32;
                let s = sampler.max_speed as i32;
                let velocity = if rng.random_bool(sampler.static_probability) {
                    [0.0, 0.0]
                } else {
                    // Axis-aligned motion keeps the caption's direction word unambiguous.
                    let speed = rng.random_range(1..=s.max(1)) as f32;
                    match rng.random_range(0..4) {
                        0 => [speed, 0.0],
                        1 => [-speed, 0.0],
                        2 => [0.0, speed],
                        _ => [0.0, -speed],
                    }
                };
                ShapeSpec::new(kind, hue, size, [x, y], velocity)
            })
            .collect();
        Self {
            shapes,
            background_hue: rng.random_range(0..NUM_HUES),
            frames: sampler.frames,
            height: sampler.height,
            width: sampler.width,
            seed,
            render: sampler.render.clone(),
        }
    }
}

/// Distribution that random scenes are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSampler {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub min_size: u32,
    pub max_size: u32,
    pub max_speed: u32,
    pub static_probability: f64,
    #[serde(default)]
    pub render: RenderOptions,
}

impl SceneSampler {
    pub fn new(frames: usize, height: usize, width: usize) -> Self {
        let side = height.min(width) as u32;
        Self {
            frames,
            height,
            width,
            min_shapes: 1,
            max_shapes: 1,
            min_size: (side * 5 / 16).max(3),
            max_size: (side / 2).max(3),
            max_speed: (side / 16).max(1),
            static_probability: 0.15,
            render: RenderOptions::default(),
        }
    }
}

impl Default for SceneSampler {
    fn default() -> Self {
        Self::new(8, 64, 64)
    }
}

/// One rendered clip with its aligned control maps. Arrays are `[F, C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub frames: Array4<f32>,
    pub depth_maps: Array4<f32>,
    pub edge_maps: Array4<f32>,
    pub soft_edge_maps: Array4<f32>,
    pub caption: String,
    pub spec: SceneSpec,
}

impl VideoSample {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

const SUPERSAMPLE: usize = 4;

/// Renders a scene and annotates every frame.
pub fn generate_scene(spec: &SceneSpec) -> Result<VideoSample> {
    spec.validate()?;
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let traj = spec.trajectories();
    // Farthest first so nearer shapes overwrite; stable for equal depth.
    let mut order: Vec<usize> = (0..spec.shapes.len()).collect();
    order.sort_by(|&a, &b| {
        spec.shapes[b]
            .depth
            .value()
            .partial_cmp(&spec.shapes[a].depth.value())
            .unwrap()
    });

    let bg = background_rgb(spec.background_hue);
    let mut frames = Array4::<f32>::zeros((f, 3, h, w));
    let mut depth = Array4::<f32>::from_elem((f, 1, h, w), BACKGROUND_DEPTH);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_ca3e7a);
    let noise = (spec.render.sensor_noise > 0.0)
        .then(|| Normal::new(0.0f32, spec.render.sensor_noise).unwrap());

    for fi in 0..f {
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = (x as f32 + 0.5, y as f32 + 0.5);
                let mut rgb = bg;
                let mut d = BACKGROUND_DEPTH;
                for &si in &order {
                    let shape = &spec.shapes[si];
                    if shape.contains(traj[si][fi], cx, cy) {
                        d = shape.depth.value();
                        if !spec.render.antialias {
                            rgb = shape_rgb(shape.hue);
                        }
                    }
                }
                if spec.render.antialias {
                    rgb = [0.0; 3];
                    let n = (SUPERSAMPLE * SUPERSAMPLE) as f32;
                    for sy in 0..SUPERSAMPLE {
                        for sx in 0..SUPERSAMPLE {
                            let px = x as f32 + (sx as f32 + 0.5) / SUPERSAMPLE as f32;
                            let py = y as f32 + (sy as f32 + 0.5) / SUPERSAMPLE as f32;
                            let mut c = bg;
                            for &si in &order {
                                let shape = &spec.shapes[si];
                                if shape.contains(traj[si][fi], px, py) {
                                    c = shape_rgb(shape.hue);
                                }
                            }
                            for k in 0..3 {
                                rgb[k] += c[k] / n;
                            }
                        }
                    }
                }
                for k in 0..3 {
                    let mut v = rgb[k];
                    if let Some(dist) = &noise {
                        v = (v + dist.sample(&mut noise_rng)).clamp(0.0, 1.0);
                    }
                    frames[[fi, k, y, x]] = v;
                }
                depth[[fi, 0, y, x]] = d;
            }
        }
    }

    let params = EdgeParams::default();
    let mut edge_maps = Array4::<f32>::zeros((f, 1, h, w));
    let mut soft_edge_maps = Array4::<f32>::zeros((f, 1, h, w));
    for fi in 0..f {
        let frame = frames.index_axis(ndarray::Axis(0), fi);
        edge_maps
            .index_axis_mut(ndarray::Axis(0), fi)
            .assign(&edge_annotate(frame, &params));
        soft_edge_maps
            .index_axis_mut(ndarray::Axis(0), fi)
            .assign(&soft_edge_annotate(frame, params.soft_sigma));
    }

    Ok(VideoSample {
        frames,
        depth_maps: depth,
        edge_maps,
        soft_edge_maps,
        caption: spec.caption(),
        spec: spec.clone(),
    })
}

/// Pixels inside a shape with at least one 4-neighbour (on-canvas) outside it.
/// Used as the ground-truth boundary for a lone shape at frame `frame`.
pub fn shape_boundary(spec: &SceneSpec, shape: usize, frame: usize) -> Array3<bool> {
    let origin = spec.trajectories()[shape][frame];
    let s = &spec.shapes[shape];
    let (h, w) = (spec.height, spec.width);
    let inside = |x: i64, y: i64| {
        x >= 0
            && y >= 0
            && (x as usize) < w
            && (y as usize) < h
            && s.contains(origin, x as f32 + 0.5, y as f32 + 0.5)
    };
    let mut out = Array3::from_elem((1, h, w), false);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            if !inside(x, y) {
                continue;
            }
            let on_edge = [(1, 0), (-1, 0), (0, 1), (0, -1)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                let on_canvas = nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h;
                on_canvas && !inside(nx, ny)
            });
            out[[0, y as usize, x as usize]] = on_edge;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_square(velocity: [f32; 2], frames: usize) -> SceneSpec {
        SceneSpec {
            shapes: vec![ShapeSpec::new(ShapeKind::Square, 0, 8, [10.0, 12.0], velocity)],
            background_hue: 5,
            frames,
            height: 32,
            width: 32,
            seed: 3,
            render: RenderOptions::default(),
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let spec = SceneSpec {
            shapes: vec![],
            background_hue: 2,
            frames: 4,
            height: 16,
            width: 16,
            seed: 0,
            render: RenderOptions::default(),
        };
        let v = generate_scene(&spec).unwrap();
        let bg = background_rgb(2);
        for ((_, c, _, _), &val) in v.frames.indexed_iter() {
            assert_eq!(val, bg[c]);
        }
        assert!(v.depth_maps.iter().all(|&d| d == 1.0));
        assert!(v.edge_maps.iter().all(|&e| e == 0.0));
        assert!(v.soft_edge_maps.iter().all(|&e| e == 0.0));
        assert_eq!(v.caption, "");
    }

    #[test]
    fn generation_is_deterministic() {
        let mut spec = SceneSpec::sample(&SceneSampler::new(8, 32, 32), 77);
        spec.render.sensor_noise = 0.02;
        assert_eq!(generate_scene(&spec).unwrap(), generate_scene(&spec).unwrap());
    }

    #[test]
    fn static_scene_has_zero_residual() {
        let v = generate_scene(&one_square([0.0, 0.0], 3)).unwrap();
        for f in 1..3 {
            let a = v.frames.index_axis(ndarray::Axis(0), f);
            let b = v.frames.index_axis(ndarray::Axis(0), f - 1);
            assert!(a.iter().zip(b.iter()).all(|(x, y)| x == y));
        }
    }

    #[test]
    fn caption_template() {
        assert_eq!(one_square([2.0, 0.0], 1).caption(), "a red square moving right");
        let mut spec = one_square([0.0, -1.0], 1);
        spec.shapes
            .push(ShapeSpec::new(ShapeKind::Circle, 5, 4, [0.0, 0.0], [0.0, 0.0]));
        assert_eq!(
            spec.caption(),
            "a red square moving up and a blue circle moving nowhere"
        );
    }

    #[test]
    fn canvas_too_small_is_rejected() {
        let mut spec = one_square([0.0, 0.0], 1);
        spec.width = 6;
        spec.shapes[0].position = [0.0, 0.0];
        let err = generate_scene(&spec).unwrap_err();
        assert!(err.to_string().contains("does not fit"), "{err}");
    }

    #[test]
    fn inconsistent_depth_plane_is_rejected() {
        let mut spec = one_square([0.0, 0.0], 1);
        spec.shapes[0].depth = DepthPlane::Far;
        assert!(matches!(generate_scene(&spec), Err(Error::InvalidScene(_))));
    }

    #[test]
    fn bouncing_stays_on_canvas() {
        let spec = SceneSpec {
            shapes: vec![ShapeSpec::new(ShapeKind::Circle, 1, 6, [0.0, 9.0], [7.0, -5.0])],
            background_hue: 0,
            frames: 40,
            height: 16,
            width: 20,
            seed: 0,
            render: RenderOptions::default(),
        };
        for p in &spec.trajectories()[0] {
            assert!((0.0..=14.0).contains(&p[0]) && (0.0..=10.0).contains(&p[1]), "{p:?}");
        }
    }

    #[test]
    fn near_shape_occludes_far_shape() {
        let spec = SceneSpec {
            // hue 2 is far, hue 0 is near; the far one is listed last but drawn first
            shapes: vec![
                ShapeSpec::new(ShapeKind::Square, 0, 8, [4.0, 4.0], [0.0, 0.0]),
                ShapeSpec::new(ShapeKind::Square, 2, 8, [8.0, 8.0], [0.0, 0.0]),
            ],
            background_hue: 0,
            frames: 1,
            height: 20,
            width: 20,
            seed: 0,
            render: RenderOptions::default(),
        };
        let v = generate_scene(&spec).unwrap();
        assert_eq!(v.depth_maps[[0, 0, 9, 9]], 0.25);
        assert_eq!(v.depth_maps[[0, 0, 14, 14]], 0.75);
        assert_eq!(v.frames[[0, 0, 9, 9]], 1.0);
    }

    #[test]
    fn sampled_scenes_are_valid() {
        let sampler = SceneSampler::new(8, 16, 16);
        for seed in 0..200 {
            SceneSpec::sample(&sampler, seed).validate().unwrap();
        }
    }
}
