//! Evaluation: depth error, static-region flicker, edge fidelity and a
//! synthetic-attribute alignment score.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};

use crate::data::annotate::{classify_pixel, depth_annotate, edge_annotate, EdgeParams};
use crate::data::scene::{direction_word, generate_scene, ShapeKind, VideoSample, HUE_NAMES, DIRECTION_WORDS};
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_frames(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a[0] != b[0] || a[2] != b[2] || a[3] != b[3] {
        return Err(Error::shape(what, format!("{a:?}"), format!("{b:?}")));
    }
    Ok(())
}

/// Mean over frames and pixels of `|depth_annotate(generated) − conditioning|`.
pub fn depth_error(conditioning: ArrayView4<f32>, generated: ArrayView4<f32>) -> Result<f64> {
    check_frames("generated frames vs depth maps", conditioning.shape(), generated.shape())?;
    if generated.shape()[1] != 3 {
        return Err(Error::shape("generated channels", 3, generated.shape()[1]));
    }
    let mut sum = 0.0;
    for (cond, frame) in conditioning.outer_iter().zip(generated.outer_iter()) {
        let d = depth_annotate(frame);
        sum += d
            .iter()
            .zip(cond.iter())
            .map(|(a, b)| f64::from((a - b).abs()))
            .sum::<f64>();
    }
    Ok(sum / conditioning.len() as f64)
}

/// Mean over consecutive frame pairs of the mean absolute difference inside
/// `static_mask` (`[H, W]`), averaged over channels.
pub fn flicker(video: ArrayView4<f32>, static_mask: &Array2<bool>) -> Result<f64> {
    let (f, c, h, w) = video.dim();
    if static_mask.dim() != (h, w) {
        return Err(Error::shape("static mask", format!("({h}, {w})"), format!("{:?}", static_mask.dim())));
    }
    let count = static_mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::arg("static_mask", "no static pixels"));
    }
    if f < 2 {
        return Err(Error::arg("video", "flicker needs at least two frames"));
    }
    let mut total = 0.0;
    for i in 1..f {
        let mut sum = 0.0;
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    if static_mask[[y, x]] {
                        sum += f64::from((video[[i, ch, y, x]] - video[[i - 1, ch, y, x]]).abs());
                    }
                }
            }
        }
        total += sum / (count * c) as f64;
    }
    Ok(total / (f - 1) as f64)
}

/// Pixels whose value never changes across the clip.
pub fn static_mask(video: ArrayView4<f32>) -> Array2<bool> {
    let (f, c, h, w) = video.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        (1..f).all(|i| (0..c).all(|ch| video[[i, ch, y, x]] == video[[0, ch, y, x]]))
    })
}

/// Ground-truth static region of a scene: rendered without capture noise.
pub fn scene_static_mask(sample: &VideoSample) -> Result<Array2<bool>> {
    let mut spec = sample.spec.clone();
    spec.render.sensor_noise = 0.0;
    if spec == sample.spec {
        return Ok(static_mask(sample.frames.view()));
    }
    Ok(static_mask(generate_scene(&spec)?.frames.view()))
}

/// Counts behind a tolerance-matched F1.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeCounts {
    pub predicted: usize,
    pub predicted_matched: usize,
    pub reference: usize,
    pub reference_matched: usize,
}

impl EdgeCounts {
    pub fn add(&mut self, o: &EdgeCounts) {
        self.predicted += o.predicted;
        self.predicted_matched += o.predicted_matched;
        self.reference += o.reference;
        self.reference_matched += o.reference_matched;
    }

    /// Two empty maps agree perfectly; one empty map scores 0.
    pub fn f1(&self) -> f64 {
        if self.predicted == 0 && self.reference == 0 {
            return 1.0;
        }
        if self.predicted == 0 || self.reference == 0 {
            return 0.0;
        }
        let p = self.predicted_matched as f64 / self.predicted as f64;
        let r = self.reference_matched as f64 / self.reference as f64;
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn near(map: &ndarray::ArrayView2<f32>, y: usize, x: usize, tol: usize) -> bool {
    let (h, w) = map.dim();
    let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(h - 1));
    let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(w - 1));
    map.slice(s![y0..=y1, x0..=x1]).iter().any(|&v| v > 0.5)
}

/// Matches edge pixels within a Chebyshev distance of `tolerance`.
pub fn edge_match(reference: ArrayView3<f32>, predicted: ArrayView3<f32>, tolerance: usize) -> EdgeCounts {
    let r = reference.index_axis(Axis(0), 0);
    let p = predicted.index_axis(Axis(0), 0);
    let (h, w) = r.dim();
    let mut c = EdgeCounts::default();
    for y in 0..h {
        for x in 0..w {
            if p[[y, x]] > 0.5 {
                c.predicted += 1;
                if near(&r, y, x, tolerance) {
                    c.predicted_matched += 1;
                }
            }
            if r[[y, x]] > 0.5 {
                c.reference += 1;
                if near(&p, y, x, tolerance) {
                    c.reference_matched += 1;
                }
            }
        }
    }
    c
}

/// F1 between conditioning edges `[F,1,H,W]` and the edges of the generated
/// frames, pooled over frames with 1-pixel tolerance.
pub fn edge_f1(conditioning: ArrayView4<f32>, generated: ArrayView4<f32>, params: &EdgeParams) -> Result<f64> {
    check_frames("generated frames vs edge maps", conditioning.shape(), generated.shape())?;
    let mut counts = EdgeCounts::default();
    for (cond, frame) in conditioning.outer_iter().zip(generated.outer_iter()) {
        let e = edge_annotate(frame, params);
        counts.add(&edge_match(cond, e.view(), 1));
    }
    Ok(counts.f1())
}

/// One shape phrase of a caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptionPhrase {
    pub hue: Option<u8>,
    pub kind: Option<ShapeKind>,
    pub direction: Option<&'static str>,
}

impl CaptionPhrase {
    fn attributes(&self) -> usize {
        usize::from(self.hue.is_some()) + usize::from(self.kind.is_some()) + usize::from(self.direction.is_some())
    }
}

/// Splits a caption on "and" and picks up colour, shape and direction words.
pub fn parse_caption(caption: &str) -> Vec<CaptionPhrase> {
    let lower = caption.to_lowercase();
    let words: Vec<&str> = lower.split_whitespace().collect();
    words
        .split(|w| *w == "and")
        .map(|ws| CaptionPhrase {
            hue: ws.iter().find_map(|w| HUE_NAMES.iter().position(|h| h == w).map(|i| i as u8)),
            kind: ws.iter().find_map(|w| ShapeKind::from_name(w)),
            direction: ws.iter().find_map(|w| DIRECTION_WORDS.iter().find(|d| *d == w).copied()),
        })
        .filter(|p| p.attributes() > 0)
        .collect()
}

/// Per-hue measurements of a clip, from colour segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectFeatures {
    pub hue: u8,
    /// Mean pixel count per frame.
    pub pixels: f64,
    /// Pixel count over bounding-box area, averaged over frames where present.
    pub fill: f64,
    /// Mean centroid step `[dx, dy]` over the first steps of the clip.
    pub motion: [f64; 2],
}

const MOTION_STEPS: usize = 3;

/// Segments every hue bucket present in the clip `[F, 3, H, W]`.
pub fn object_features(video: ArrayView4<f32>) -> Vec<ObjectFeatures> {
    let (f, _, h, w) = video.dim();
    let buckets = HUE_NAMES.len();
    // Per frame, per hue: count, bbox, centroid sums.
    let mut stats = vec![vec![(0usize, [usize::MAX, usize::MAX, 0usize, 0usize], [0f64; 2]); buckets]; f];
    for i in 0..f {
        for y in 0..h {
            for x in 0..w {
                let rgb = [video[[i, 0, y, x]], video[[i, 1, y, x]], video[[i, 2, y, x]]];
                if let Some(b) = classify_pixel(rgb) {
                    let s = &mut stats[i][b as usize];
                    s.0 += 1;
                    s.1 = [s.1[0].min(x), s.1[1].min(y), s.1[2].max(x), s.1[3].max(y)];
                    s.2[0] += x as f64;
                    s.2[1] += y as f64;
                }
            }
        }
    }
    let mut out = Vec::new();
    for b in 0..buckets {
        let present: Vec<usize> = (0..f).filter(|&i| stats[i][b].0 > 0).collect();
        if present.is_empty() {
            continue;
        }
        let pixels = present.iter().map(|&i| stats[i][b].0 as f64).sum::<f64>() / f as f64;
        let fill = present
            .iter()
            .map(|&i| {
                let (n, bb, _) = stats[i][b];
                n as f64 / ((bb[2] - bb[0] + 1) * (bb[3] - bb[1] + 1)) as f64
            })
            .sum::<f64>()
            / present.len() as f64;
        let centroid = |i: usize| {
            let (n, _, c) = stats[i][b];
            [c[0] / n as f64, c[1] / n as f64]
        };
        let mut motion = [0.0; 2];
        let mut steps = 0;
        for i in 1..f.min(MOTION_STEPS + 1) {
            if stats[i][b].0 > 0 && stats[i - 1][b].0 > 0 {
                let (a, c) = (centroid(i - 1), centroid(i));
                motion[0] += c[0] - a[0];
                motion[1] += c[1] - a[1];
                steps += 1;
            }
        }
        if steps > 0 {
            motion = [motion[0] / steps as f64, motion[1] / steps as f64];
        }
        out.push(ObjectFeatures {
            hue: b as u8,
            pixels,
            fill,
            motion,
        });
    }
    out
}

/// Nearest-centroid attribute detector fitted on ground-truth clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeClassifier {
    pub version: u32,
    /// Mean fill ratio per shape kind.
    pub fill_centroids: BTreeMap<String, f64>,
    /// Minimum mean pixel count for a hue to count as present.
    pub min_pixels: f64,
    /// Centroid speed (pixels per frame) separating moving from static.
    pub motion_threshold: f64,
    /// Attribute accuracy on the held-out split used during fitting.
    pub validation_accuracy: f64,
}

impl AttributeClassifier {
    /// Fits on `train` and reports attribute accuracy on `validation`.
    pub fn fit(train: &[VideoSample], validation: &[VideoSample]) -> Result<Self> {
        let mut fills: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
        let mut static_speed: f64 = 0.0;
        let mut moving_speed = f64::INFINITY;
        let mut min_pixels = f64::INFINITY;
        for sample in train {
            let feats = object_features(sample.frames.view());
            for shape in &sample.spec.shapes {
                // Only hues used by a single shape give clean per-shape features.
                if sample.spec.shapes.iter().filter(|s| s.hue == shape.hue).count() != 1 {
                    continue;
                }
                let Some(ft) = feats.iter().find(|o| o.hue == shape.hue) else {
                    continue;
                };
                fills.entry(shape.kind.name()).or_default().push(ft.fill);
                min_pixels = min_pixels.min(ft.pixels);
                let speed = ft.motion[0].abs().max(ft.motion[1].abs());
                if shape.velocity == [0.0, 0.0] {
                    static_speed = static_speed.max(speed);
                } else {
                    moving_speed = moving_speed.min(speed);
                }
            }
        }
        if fills.len() != ShapeKind::ALL.len() {
            return Err(Error::arg("train", format!("corpus covers {} of 3 shape kinds", fills.len())));
        }
        let fill_centroids = fills
            .into_iter()
            .map(|(k, v)| (k.to_string(), v.iter().sum::<f64>() / v.len() as f64))
            .collect();
        let motion_threshold = if moving_speed.is_finite() {
            0.5 * (static_speed + moving_speed)
        } else {
            0.5
        };
        let mut c = Self {
            version: 1,
            fill_centroids,
            min_pixels: 0.5 * min_pixels,
            motion_threshold,
            validation_accuracy: 0.0,
        };
        if !validation.is_empty() {
            let total: f64 = validation
                .iter()
                .map(|s| c.score(&s.caption, s.frames.view()))
                .sum();
            c.validation_accuracy = total / validation.len() as f64;
        }
        Ok(c)
    }

    fn classify_kind(&self, fill: f64) -> Option<ShapeKind> {
        self.fill_centroids
            .iter()
            .min_by(|a, b| (a.1 - fill).abs().total_cmp(&(b.1 - fill).abs()))
            .and_then(|(k, _)| ShapeKind::from_name(k))
    }

    fn classify_direction(&self, motion: [f64; 2]) -> &'static str {
        if motion[0].abs().max(motion[1].abs()) < self.motion_threshold {
            return "nowhere";
        }
        direction_word([motion[0] as f32, motion[1] as f32])
    }

    /// Fraction of the caption's attributes found in the clip. A caption without
    /// attributes scores 1.
    pub fn score(&self, caption: &str, video: ArrayView4<f32>) -> f64 {
        let phrases = parse_caption(caption);
        let total: usize = phrases.iter().map(CaptionPhrase::attributes).sum();
        if total == 0 {
            return 1.0;
        }
        let feats: Vec<ObjectFeatures> = object_features(video)
            .into_iter()
            .filter(|o| o.pixels >= self.min_pixels)
            .collect();
        let mut hits = 0usize;
        for p in &phrases {
            let object = match p.hue {
                Some(h) => feats.iter().find(|o| o.hue == h),
                // Without a colour any detected object may carry the other attributes.
                None => feats.iter().max_by(|a, b| a.pixels.total_cmp(&b.pixels)),
            };
            let Some(o) = object else {
                continue;
            };
            hits += usize::from(p.hue.is_some());
            if let Some(k) = p.kind {
                hits += usize::from(self.classify_kind(o.fill) == Some(k));
            }
            if let Some(d) = p.direction {
                hits += usize::from(self.classify_direction(o.motion) == d);
            }
        }
        hits as f64 / total as f64
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Scores for one generated clip against its reference scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEval {
    pub name: String,
    pub depth_error: f64,
    /// Absent when the reference has no static pixels.
    pub flicker: Option<f64>,
    pub edge_f1: f64,
    /// Synthetic-attribute alignment; absent without a classifier.
    pub attribute_alignment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub depth_error: f64,
    pub flicker: Option<f64>,
    pub edge_f1: f64,
    /// Not the video-text embedding similarity of published work; fraction of
    /// caption attributes the synthetic classifier detects.
    pub attribute_alignment: Option<f64>,
    pub videos: Vec<VideoEval>,
    pub config: serde_json::Value,
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate_video(
    name: &str,
    generated: &Array4<f32>,
    reference: &VideoSample,
    classifier: Option<&AttributeClassifier>,
    edge_params: &EdgeParams,
) -> Result<VideoEval> {
    let depth = depth_error(reference.depth_maps.view(), generated.view())?;
    let mask = scene_static_mask(reference)?;
    let flick = if mask.iter().any(|&m| m) && generated.shape()[0] > 1 {
        Some(flicker(generated.view(), &mask)?)
    } else {
        None
    };
    Ok(VideoEval {
        name: name.to_string(),
        depth_error: depth,
        flicker: flick,
        edge_f1: edge_f1(reference.edge_maps.view(), generated.view(), edge_params)?,
        attribute_alignment: classifier.map(|c| c.score(&reference.caption, generated.view())),
    })
}

pub fn summarize(videos: Vec<VideoEval>, config: serde_json::Value) -> Result<EvalReport> {
    if videos.is_empty() {
        return Err(Error::arg("videos", "nothing to evaluate"));
    }
    let report = EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        depth_error: mean(videos.iter().map(|v| v.depth_error)).unwrap_or(0.0),
        flicker: mean(videos.iter().filter_map(|v| v.flicker)),
        edge_f1: mean(videos.iter().map(|v| v.edge_f1)).unwrap_or(0.0),
        attribute_alignment: mean(videos.iter().filter_map(|v| v.attribute_alignment)),
        videos,
        config,
    };
    let finite = [Some(report.depth_error), report.flicker, Some(report.edge_f1), report.attribute_alignment]
        .into_iter()
        .flatten()
        .all(f64::is_finite);
    if !finite {
        return Err(Error::NonFinite("evaluation report".into()));
    }
    Ok(report)
}
