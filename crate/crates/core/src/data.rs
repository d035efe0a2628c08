//! Dataset ingestion, window sampling, and synthetic scene generation.
//!
//! On-disk layout: `dataset/images/<stem>.ppm` with an optional
//! `dataset/annotations/<stem>.txt` holding one `person x y w h [occ]` line
//! per pedestrian (integer pixels, top-left origin; `occ` is the occluded
//! fraction). Images without an annotation file have no pedestrians.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels;
use crate::detect::BBox;
use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::ops;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::train::Sample;

/// Negative windows must overlap every ground truth below this IoU.
pub const NEGATIVE_MAX_IOU: f64 = 0.3;

/// Rejection-sampling attempts per negative window; the final quarter draws
/// at the model-window scale, where clear placements are most likely.
const NEGATIVE_ATTEMPTS: usize = 80;

/// Negative windows are drawn at up to this multiple of the model window;
/// larger crops are nearly whole-scene and almost always overlap a figure.
const NEGATIVE_MAX_SCALE: f64 = 1.5;

#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub image: Tensor,
    pub truths: Vec<GroundTruth>,
    pub stem: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// SHA-256 over stems, image bytes, and annotations; replays of the same
    /// generator seed hash identically.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for entry in &self.entries {
            hasher.update(entry.stem.as_bytes());
            for &d in entry.image.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for &v in entry.image.data() {
                hasher.update(v.to_le_bytes());
            }
            for t in &entry.truths {
                for v in [t.bbox.x, t.bbox.y, t.bbox.w, t.bbox.h, t.occlusion] {
                    hasher.update(v.to_le_bytes());
                }
            }
        }
        hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn parse_annotation_line(
    line: &str,
    lineno: usize,
    path: &Path,
    height: usize,
    width: usize,
) -> Result<GroundTruth> {
    let err = |msg: String| Error::Annotation {
        path: path.to_path_buf(),
        line: lineno,
        msg,
    };
    let tokens: Vec<&str> = line.split_whitespace().collect();
    if tokens.len() != 5 && tokens.len() != 6 {
        return Err(err(format!(
            "expected `person x y w h [occ]`, found {} fields",
            tokens.len()
        )));
    }
    if tokens[0] != "person" {
        return Err(err(format!("unknown label {:?}", tokens[0])));
    }
    let mut nums = [0i64; 4];
    for (i, t) in tokens[1..5].iter().enumerate() {
        nums[i] = t
            .parse::<i64>()
            .map_err(|_| err(format!("bad integer {t:?}")))?;
    }
    let (x, y, w, h) = (nums[0], nums[1], nums[2], nums[3]);
    if w <= 0 || h <= 0 {
        return Err(err(format!("box extents must be positive, got {w}x{h}")));
    }
    if x < 0 || y < 0 || x + w > width as i64 || y + h > height as i64 {
        return Err(err(format!(
            "box ({x},{y},{w},{h}) outside the {width}x{height} image"
        )));
    }
    let occlusion = if tokens.len() == 6 {
        let o = tokens[5]
            .parse::<f64>()
            .map_err(|_| err(format!("bad occlusion {:?}", tokens[5])))?;
        if !(0.0..=1.0).contains(&o) {
            return Err(err(format!("occlusion {o} outside [0,1]")));
        }
        o
    } else {
        0.0
    };
    Ok(GroundTruth {
        bbox: BBox::new(x as f64, y as f64, w as f64, h as f64),
        occlusion,
    })
}

/// Load a dataset directory; images are paired with annotations by filename
/// stem, sorted by stem for a stable order.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let images_dir = dir.join("images");
    let mut stems: Vec<(String, PathBuf)> = Vec::new();
    let listing = fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    for item in listing {
        let path = item.map_err(|e| Error::io(&images_dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("ppm") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::ImageFormat {
                    path: path.clone(),
                    msg: "non-UTF8 filename".into(),
                })?
                .to_string();
            stems.push((stem, path));
        }
    }
    stems.sort();

    let mut entries = Vec::with_capacity(stems.len());
    for (stem, image_path) in stems {
        let image = crate::pnm::read_ppm(&image_path)?;
        let ann_path = dir.join("annotations").join(format!("{stem}.txt"));
        let mut truths = Vec::new();
        if ann_path.exists() {
            let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                truths.push(parse_annotation_line(
                    line,
                    i + 1,
                    &ann_path,
                    image.dim(1),
                    image.dim(2),
                )?);
            }
        }
        entries.push(DatasetEntry {
            image,
            truths,
            stem,
        });
    }
    Ok(Dataset { entries })
}

/// Write a dataset in the directory layout that [`load_dataset`] reads.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    let annotations = dir.join("annotations");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&annotations).map_err(|e| Error::io(&annotations, e))?;
    for entry in &ds.entries {
        crate::pnm::write_ppm(&images.join(format!("{}.ppm", entry.stem)), &entry.image)?;
        let mut text = String::new();
        for t in &entry.truths {
            text.push_str(&format!(
                "person {} {} {} {}",
                t.bbox.x as i64, t.bbox.y as i64, t.bbox.w as i64, t.bbox.h as i64
            ));
            if t.occlusion > 0.0 {
                text.push_str(&format!(" {}", t.occlusion));
            }
            text.push('\n');
        }
        let ann_path = annotations.join(format!("{}.txt", entry.stem));
        fs::write(&ann_path, text).map_err(|e| Error::io(&ann_path, e))?;
    }
    Ok(())
}

/// Output of [`sample_windows`].
#[derive(Debug)]
pub struct SampledWindows {
    pub samples: Vec<Sample>,
    /// Windows skipped because an image was too small or rejection sampling
    /// ran out of attempts.
    pub skipped: usize,
}

/// Harvest labeled windows: every ground truth resized to the model window as
/// a positive, plus `neg_per_image` random windows per image with IoU below
/// [`NEGATIVE_MAX_IOU`] against every truth. RNG consumption follows image
/// order, so a seed fully determines the sample list.
pub fn sample_windows(
    ds: &Dataset,
    rng: &mut Rng,
    neg_per_image: usize,
    window: (usize, usize),
    bins: usize,
) -> Result<SampledWindows> {
    let (wh, ww) = window;
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for entry in &ds.entries {
        let (h, w) = (entry.image.dim(1), entry.image.dim(2));

        for t in &entry.truths {
            let (bx, by) = (t.bbox.x.round() as usize, t.bbox.y.round() as usize);
            let (bw, bh) = (
                (t.bbox.w.round() as usize).clamp(1, w - bx),
                (t.bbox.h.round() as usize).clamp(1, h - by),
            );
            let crop = ops::crop(&entry.image, by, bx, bh, bw);
            let resized = ops::resize_bilinear(&crop, wh, ww)?;
            let stack = channels::extract_stack(&resized, window, bins)?;
            samples.push(Sample::new(stack, 1.0)?);
        }

        if h < wh || w < ww {
            skipped += neg_per_image;
            continue;
        }
        let max_scale = (h as f64 / wh as f64)
            .min(w as f64 / ww as f64)
            .min(NEGATIVE_MAX_SCALE);
        for _ in 0..neg_per_image {
            let mut accepted = false;
            for attempt in 0..NEGATIVE_ATTEMPTS {
                let scale = if attempt >= NEGATIVE_ATTEMPTS * 3 / 4 {
                    1.0
                } else {
                    rng.uniform(1.0, max_scale.max(1.0))
                };
                let nh = ((wh as f64 * scale).floor() as usize).clamp(wh, h);
                let nw = ((ww as f64 * scale).floor() as usize).clamp(ww, w);
                let y = rng.below(h - nh + 1);
                let x = rng.below(w - nw + 1);
                let candidate = BBox::new(x as f64, y as f64, nw as f64, nh as f64);
                if entry
                    .truths
                    .iter()
                    .all(|t| candidate.iou(&t.bbox) < NEGATIVE_MAX_IOU)
                {
                    let crop = ops::crop(&entry.image, y, x, nh, nw);
                    let resized = ops::resize_bilinear(&crop, wh, ww)?;
                    let stack = channels::extract_stack(&resized, window, bins)?;
                    samples.push(Sample::new(stack, 0.0)?);
                    accepted = true;
                    break;
                }
            }
            if !accepted {
                skipped += 1;
            }
        }
    }
    Ok(SampledWindows { samples, skipped })
}

/// Synthetic pedestrian-scene generator configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    /// Scene size (height, width).
    pub height: usize,
    pub width: usize,
    /// Exact figure count per image, 0 to 2.
    pub figures_per_image: usize,
    /// Candidate figure heights, drawn uniformly per figure.
    pub figure_heights: Vec<usize>,
    /// Figure brightness above the background; 0 renders figures invisible.
    pub contrast: f64,
    /// Distractor rectangles per image.
    pub clutter: usize,
    /// Background noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 16,
            height: 168,
            width: 56,
            figures_per_image: 1,
            figure_heights: vec![56, 84],
            contrast: 0.5,
            clutter: 3,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 16 || self.width < 8 {
            return Err(Error::InvalidConfig(format!(
                "scene {}x{} is too small",
                self.height, self.width
            )));
        }
        if self.figures_per_image > 2 {
            return Err(Error::InvalidConfig(
                "figures_per_image must be 0, 1, or 2".into(),
            ));
        }
        if self.figures_per_image > 0 {
            if self.figure_heights.is_empty() {
                return Err(Error::InvalidConfig("figure_heights is empty".into()));
            }
            for &fh in &self.figure_heights {
                let fw = figure_width(fh);
                if fh < 12 || fh > self.height || fw > self.width {
                    return Err(Error::InvalidConfig(format!(
                        "figure {fh}px ({fw}px wide) does not fit the {}x{} scene",
                        self.height, self.width
                    )));
                }
            }
        }
        if self.contrast < 0.0 {
            return Err(Error::InvalidConfig("contrast must be >= 0".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::InvalidConfig("noise must be >= 0".into()));
        }
        Ok(())
    }
}

/// Truth-box width for a figure height: the pedestrian aspect ratio 1:3.
fn figure_width(h: usize) -> usize {
    ((h as f64 / 3.0).round() as usize).max(3)
}

const BACKGROUND: f64 = 0.35;

fn fill_rect(plane: &mut [f64], width: usize, x: usize, y: usize, w: usize, h: usize, v: f64) {
    for i in y..y + h {
        for p in &mut plane[i * width + x..i * width + x + w] {
            *p = v;
        }
    }
}

/// Generate a seeded synthetic dataset: noisy background, distractor
/// rectangles, and pedestrian-like figures (a vertical bar with a circular
/// head) with 1:3 truth boxes.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut entries = Vec::with_capacity(cfg.num_images);
    for index in 0..cfg.num_images {
        let mut plane = vec![0.0f64; h * w];
        for p in &mut plane {
            *p = (BACKGROUND + rng.uniform(-cfg.noise, cfg.noise)).clamp(0.0, 1.0);
        }

        for _ in 0..cfg.clutter {
            let cw = 4 + rng.below((w / 2).max(1));
            let ch = 4 + rng.below((h / 2).max(1));
            let cw = cw.min(w);
            let ch = ch.min(h);
            let cx = rng.below(w - cw + 1);
            let cy = rng.below(h - ch + 1);
            let v = (BACKGROUND + rng.uniform(-0.15, 0.15)).clamp(0.0, 1.0);
            fill_rect(&mut plane, w, cx, cy, cw, ch, v);
        }

        let mut truths: Vec<GroundTruth> = Vec::new();
        for _ in 0..cfg.figures_per_image {
            let fh = cfg.figure_heights[rng.below(cfg.figure_heights.len())];
            let fw = figure_width(fh);
            let mut fx = 0usize;
            let mut fy = 0usize;
            for _attempt in 0..20 {
                fx = rng.below(w - fw + 1);
                fy = rng.below(h - fh + 1);
                let candidate = BBox::new(fx as f64, fy as f64, fw as f64, fh as f64);
                if truths.iter().all(|t| candidate.iou(&t.bbox) <= 0.2) {
                    break;
                }
            }
            let v = (BACKGROUND + cfg.contrast).clamp(0.0, 1.0);
            let radius = ((0.30 * fw as f64).round() as usize).max(2);
            let (cy, cx) = (fy + radius, fx + fw / 2);
            for i in fy..(fy + 2 * radius + 1).min(h) {
                for j in fx..fx + fw {
                    let dy = i as f64 - cy as f64;
                    let dx = j as f64 - cx as f64;
                    if dy * dy + dx * dx <= (radius * radius) as f64 {
                        plane[i * w + j] = v;
                    }
                }
            }
            let bar_w = ((0.45 * fw as f64).round() as usize).clamp(2, fw);
            let bar_x = fx + (fw - bar_w) / 2;
            let bar_y = (fy + 2 * radius).min(fy + fh);
            fill_rect(&mut plane, w, bar_x, bar_y, bar_w, fy + fh - bar_y, v);
            truths.push(GroundTruth {
                bbox: BBox::new(fx as f64, fy as f64, fw as f64, fh as f64),
                occlusion: 0.0,
            });
        }

        let mut data = Vec::with_capacity(3 * h * w);
        for _ in 0..3 {
            data.extend_from_slice(&plane);
        }
        entries.push(DatasetEntry {
            image: Tensor::new(vec![3, h, w], data)?,
            truths,
            stem: format!("synth_{index:05}"),
        });
    }
    Ok(Dataset { entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn annotation_parsing_examples() {
        let path = Path::new("a.txt");
        let t = parse_annotation_line("person 10 20 28 84", 1, path, 168, 56).unwrap();
        assert_eq!(t.bbox, BBox::new(10.0, 20.0, 28.0, 84.0));
        assert_eq!(t.occlusion, 0.0);

        let t = parse_annotation_line("person 10 20 28 84 0.5", 1, path, 168, 56).unwrap();
        assert_eq!(t.occlusion, 0.5);

        // outside the image
        let err = parse_annotation_line("person 40 20 28 84", 3, path, 168, 56).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("a.txt:3"), "{msg}");
        assert!(msg.contains("outside"), "{msg}");

        assert!(parse_annotation_line("person 1 2 3", 1, path, 168, 56).is_err());
        assert!(parse_annotation_line("car 1 2 3 4", 1, path, 168, 56).is_err());
        assert!(parse_annotation_line("person 1 2 0 4", 1, path, 168, 56).is_err());
        assert!(parse_annotation_line("person 1 2 3 4 1.5", 1, path, 168, 56).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthConfig {
            num_images: 3,
            seed: 5,
            ..SynthConfig::default()
        })
        .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in ds.entries.iter().zip(&back.entries) {
            assert_eq!(a.stem, b.stem);
            assert_eq!(a.truths.len(), b.truths.len());
            for (ta, tb) in a.truths.iter().zip(&b.truths) {
                assert_eq!(ta.bbox, tb.bbox);
            }
            assert_eq!(a.image.shape(), b.image.shape());
            // pixel values survive quantization to within half a step
            for (&va, &vb) in a.image.iter().zip(b.image.iter()) {
                assert!((va - vb).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn empty_annotation_file_means_no_truths() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthConfig {
            num_images: 1,
            figures_per_image: 0,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.entries[0].truths.is_empty());

        // and a missing annotation file behaves the same
        fs::remove_file(dir.path().join("annotations/synth_00000.txt")).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.entries[0].truths.is_empty());
    }

    #[test]
    fn malformed_annotation_names_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_generate(&SynthConfig {
            num_images: 1,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let ann = dir.path().join("annotations/synth_00000.txt");
        fs::write(&ann, "person 1 2 10 40\nperson bad line here x\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("synth_00000.txt:2"), "{err}");
    }

    #[test]
    fn synth_is_deterministic_per_seed() {
        let cfg = SynthConfig {
            num_images: 4,
            seed: 33,
            ..SynthConfig::default()
        };
        assert_eq!(
            synth_generate(&cfg).unwrap().digest(),
            synth_generate(&cfg).unwrap().digest()
        );
        let other = SynthConfig { seed: 34, ..cfg };
        assert_ne!(
            synth_generate(&SynthConfig { seed: 33, ..other.clone() })
                .unwrap()
                .digest(),
            synth_generate(&other).unwrap().digest()
        );
    }

    #[test]
    fn zero_figures_means_empty_annotations() {
        let ds = synth_generate(&SynthConfig {
            num_images: 5,
            figures_per_image: 0,
            seed: 9,
            ..SynthConfig::default()
        })
        .unwrap();
        assert!(ds.entries.iter().all(|e| e.truths.is_empty()));
    }

    #[test]
    fn figure_boxes_keep_pedestrian_aspect() {
        let ds = synth_generate(&SynthConfig {
            num_images: 10,
            figures_per_image: 2,
            seed: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut seen = 0;
        for e in &ds.entries {
            for t in &e.truths {
                let aspect = t.bbox.w / t.bbox.h;
                assert!(
                    (aspect * 3.0 - 1.0).abs() <= 0.2,
                    "aspect {aspect} strays from 1:3"
                );
                seen += 1;
            }
        }
        assert_eq!(seen, 20);
    }

    #[test]
    fn sampling_counts_and_negative_overlap() {
        let ds = synth_generate(&SynthConfig {
            num_images: 4,
            figures_per_image: 1,
            seed: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        let mut rng = Rng::new(1);
        let out = sample_windows(&ds, &mut rng, 5, (84, 28), 6).unwrap();
        assert_eq!(out.skipped, 0);
        assert_eq!(out.samples.len(), 4 + 4 * 5);
        let positives = out.samples.iter().filter(|s| s.target == 1.0).count();
        assert_eq!(positives, 4);
        for s in &out.samples {
            assert_eq!(s.stack.channels(), 10);
            assert_eq!(s.stack.window(), (84, 28));
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let ds = synth_generate(&SynthConfig {
            num_images: 3,
            seed: 21,
            ..SynthConfig::default()
        })
        .unwrap();
        let a = sample_windows(&ds, &mut Rng::new(7), 3, (84, 28), 6).unwrap();
        let b = sample_windows(&ds, &mut Rng::new(7), 3, (84, 28), 6).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.target, sb.target);
            assert_eq!(sa.stack.tensor().data(), sb.stack.tensor().data());
        }
    }

    #[test]
    fn small_images_skip_negative_windows() {
        let ds = Dataset {
            entries: vec![DatasetEntry {
                image: Tensor::full(vec![3, 40, 20], 0.5),
                truths: vec![],
                stem: "tiny".into(),
            }],
        };
        let out = sample_windows(&ds, &mut Rng::new(1), 4, (84, 28), 6).unwrap();
        assert!(out.samples.is_empty());
        assert_eq!(out.skipped, 4);
    }

    #[test]
    fn invalid_synth_configs_rejected() {
        let bad = SynthConfig {
            figures_per_image: 3,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            figure_heights: vec![400],
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = SynthConfig {
            contrast: -0.1,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
