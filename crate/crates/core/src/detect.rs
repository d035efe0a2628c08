//! Multi-scale sliding-window detection.
//!
//! The pyramid downscales the image by `scale_step` per level for as long as
//! the model window still fits; every window position at every level is
//! extracted, scored, and mapped back to original-image coordinates; greedy
//! non-maximum suppression removes overlaps. Scan order is canonical
//! (level, y, x), so the output is identical however the scoring is scheduled.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels;
use crate::error::{Error, Result};
use crate::net::Network;
use crate::ops;
use crate::tensor::Tensor;

/// Axis-aligned box in original-image pixel coordinates, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        BBox { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Intersection-over-union overlap; symmetric, in [0,1], exactly 1 for
    /// identical boxes (handled before the edge arithmetic, whose rounding
    /// would otherwise miss exact 1).
    pub fn iou(&self, other: &BBox) -> f64 {
        if self == other {
            return 1.0;
        }
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            return 0.0;
        }
        let inter = ix * iy;
        (inter / (self.area() + other.area() - inter)).clamp(0.0, 1.0)
    }

    /// Clip to an image of the given size.
    pub fn clipped(&self, height: f64, width: f64) -> BBox {
        let x = self.x.clamp(0.0, width);
        let y = self.y.clamp(0.0, height);
        BBox {
            x,
            y,
            w: (self.x + self.w).clamp(0.0, width) - x,
            h: (self.y + self.h).clamp(0.0, height) - y,
        }
    }
}

/// A scored window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectConfig {
    /// Window step in level pixels.
    pub stride: usize,
    /// Pyramid downscale factor per level; > 1.
    pub scale_step: f64,
    /// Keep windows scoring at or above this.
    pub score_threshold: f64,
    /// Greedy suppression overlap threshold.
    pub nms_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            stride: 4,
            scale_step: 1.2,
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::InvalidConfig("stride must be positive".into()));
        }
        if !(self.scale_step > 1.0) {
            return Err(Error::InvalidConfig("scale_step must exceed 1".into()));
        }
        if !(self.nms_iou > 0.0) {
            return Err(Error::InvalidConfig("nms_iou must be positive".into()));
        }
        Ok(())
    }
}

/// Downscaling pyramid: levels at scales 1, 1/s, 1/s^2, ... while the scaled
/// image still contains the model window. Level dimensions are the floor of
/// the original times the scale.
pub fn build_pyramid(
    image: &Tensor,
    window: (usize, usize),
    scale_step: f64,
) -> Result<Vec<(f64, Tensor)>> {
    if image.ndim() != 3 || image.dim(0) != 3 {
        return Err(Error::ShapeMismatch(format!(
            "pyramid input must be [3,H,W], got {:?}",
            image.shape()
        )));
    }
    if !(scale_step > 1.0) {
        return Err(Error::InvalidArgument("scale_step must exceed 1".into()));
    }
    let (h, w) = (image.dim(1), image.dim(2));
    if h < window.0 || w < window.1 {
        return Err(Error::ShapeMismatch(format!(
            "image {h}x{w} is smaller than the model window {}x{}",
            window.0, window.1
        )));
    }
    let mut levels = Vec::new();
    let mut scale = 1.0f64;
    loop {
        let lh = (h as f64 * scale).floor() as usize;
        let lw = (w as f64 * scale).floor() as usize;
        if lh < window.0 || lw < window.1 {
            break;
        }
        let level = if lh == h && lw == w {
            image.clone()
        } else {
            ops::resize_bilinear(image, lh, lw)?
        };
        levels.push((scale, level));
        scale /= scale_step;
    }
    Ok(levels)
}

/// Score every window placement of one pyramid level and map the kept boxes
/// back to original coordinates (divide by the level scale).
pub fn scan(
    level: &Tensor,
    scale: f64,
    net: &Network,
    cfg: &DetectConfig,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let window = net.config().window;
    let bins = net.config().input_maps.saturating_sub(4);
    let (lh, lw) = (level.dim(1), level.dim(2));
    if lh < window.0 || lw < window.1 {
        return Err(Error::ShapeMismatch(format!(
            "level {lh}x{lw} does not fit the window {}x{}",
            window.0, window.1
        )));
    }
    let mut positions = Vec::new();
    let mut y = 0;
    while y + window.0 <= lh {
        let mut x = 0;
        while x + window.1 <= lw {
            positions.push((y, x));
            x += cfg.stride;
        }
        y += cfg.stride;
    }
    let scored: Vec<Option<Detection>> = positions
        .par_iter()
        .map(|&(y, x)| {
            let crop = ops::crop(level, y, x, window.0, window.1);
            let stack = channels::extract_stack(&crop, window, bins)?;
            let score = net.forward_score(&stack)?;
            Ok(if score >= cfg.score_threshold {
                Some(Detection {
                    bbox: BBox {
                        x: x as f64 / scale,
                        y: y as f64 / scale,
                        w: window.1 as f64 / scale,
                        h: window.0 as f64 / scale,
                    },
                    score,
                })
            } else {
                None
            })
        })
        .collect::<Result<_>>()?;
    Ok(scored.into_iter().flatten().collect())
}

/// Greedy non-maximum suppression: sort by descending score (ties broken by
/// smaller x, then y), keep a detection iff its IoU with every kept one is
/// below the threshold. Output is a subset of the input with scores unchanged.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.x.total_cmp(&b.bbox.x))
            .then(a.bbox.y.total_cmp(&b.bbox.y))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        if kept.iter().all(|k| k.bbox.iou(&d.bbox) < iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Full single-image detection: pyramid, scan, suppression; boxes clipped to
/// the image bounds.
pub fn detect_image(image: &Tensor, net: &Network, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let window = net.config().window;
    let levels = build_pyramid(image, window, cfg.scale_step)?;
    let mut all = Vec::new();
    for (scale, level) in &levels {
        all.extend(scan(level, *scale, net, cfg)?);
    }
    let (h, w) = (image.dim(1) as f64, image.dim(2) as f64);
    let mut kept = nms(all, cfg.nms_iou);
    for d in &mut kept {
        d.bbox = d.bbox.clipped(h, w);
    }
    Ok(kept)
}
