//! Subcommand implementations. Every numeric output uses fixed 6-decimal
//! formatting so reruns diff byte for byte.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use bdl_core::channels::extract_stack;
use bdl_core::data::{load_dataset, sample_windows, save_dataset, synth_generate, Dataset};
use bdl_core::detect::{detect_image, BBox, Detection};
use bdl_core::eval::{curve, reasonable_filter, GroundTruth};
use bdl_core::model;
use bdl_core::net::Network;
use bdl_core::ops;
use bdl_core::train::{train, gradient_check, Sample, TrainReport, TrainVariant};
use bdl_core::{Rng, Tensor};

use crate::config::RunConfig;

fn f6(x: f64) -> String {
    format!("{x:.6}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Generate and store a synthetic dataset.
pub fn run_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = synth_generate(&cfg.synth)?;
    save_dataset(&ds, out)?;
    let truths: usize = ds.entries.iter().map(|e| e.truths.len()).sum();
    println!("images={} truths={truths}", ds.len());
    println!("digest={}", ds.digest());
    Ok(())
}

/// Dump the channel stack of every annotated window as a BDLT tensor file.
pub fn run_extract_channels(cfg: &RunConfig, dataset: &Path, out: &Path) -> Result<()> {
    let ds = load_dataset(dataset)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let (wh, ww) = cfg.window();
    let mut written = 0usize;
    for entry in &ds.entries {
        for (i, t) in entry.truths.iter().enumerate() {
            let (bx, by) = (t.bbox.x as usize, t.bbox.y as usize);
            let (bw, bh) = (t.bbox.w as usize, t.bbox.h as usize);
            let crop = ops::crop(&entry.image, by, bx, bh, bw);
            let resized = ops::resize_bilinear(&crop, wh, ww)?;
            let stack = extract_stack(&resized, (wh, ww), cfg.bins())?;
            let path = out.join(format!("{}_p{i:02}.bdlt", entry.stem));
            stack.tensor().write_bdlt(&path)?;
            written += 1;
        }
    }
    println!("windows={written}");
    Ok(())
}

fn harvest(
    cfg: &RunConfig,
    dir: &Path,
    rng: &mut Rng,
    label: &str,
) -> Result<Vec<Sample>> {
    let ds = load_dataset(dir)?;
    let out = sample_windows(&ds, rng, cfg.neg_per_image, cfg.window(), cfg.bins())?;
    if out.skipped > 0 {
        eprintln!("warning: skipped {} {label} windows", out.skipped);
    }
    if out.samples.is_empty() {
        bail!("{label} set at {} produced no windows", dir.display());
    }
    Ok(out.samples)
}

fn report_csv(report: &TrainReport) -> String {
    let mut text = String::from("epoch,train_mse,heldout_error\n");
    for (i, (mse, err)) in report
        .train_mse
        .iter()
        .zip(&report.heldout_error)
        .enumerate()
    {
        text.push_str(&format!("{},{},{}\n", i + 1, f6(*mse), f6(*err)));
    }
    text
}

/// Train on a dataset directory and store the model plus the per-epoch CSV.
#[allow(clippy::too_many_arguments)]
pub fn run_train(
    cfg: &RunConfig,
    train_dir: &Path,
    heldout_dir: &Path,
    model_out: &Path,
    report_out: Option<&Path>,
    warmup: usize,
) -> Result<()> {
    let mut rng = Rng::new(cfg.train.seed);
    let mut train_set = harvest(cfg, train_dir, &mut rng, "training")?;
    let heldout = harvest(cfg, heldout_dir, &mut rng, "held-out")?;
    let mut init_rng = rng.fork();
    let mut net = Network::init(cfg.net.clone(), &mut init_rng)?;
    let report = train(&mut net, &mut train_set, &heldout, &cfg.train)?;
    net.save(model_out)?;
    if let Some(path) = report_out {
        write_text(path, &report_csv(&report))?;
    }
    let warmup = warmup.min(report.heldout_error.len() - 1);
    println!(
        "samples={} heldout={} epochs={}",
        train_set.len(),
        heldout.len(),
        cfg.train.epochs
    );
    println!(
        "final_train_mse={} final_heldout_error={} stability={}",
        f6(*report.train_mse.last().unwrap()),
        f6(report.final_heldout_error()),
        f6(report.stability(warmup)),
    );
    println!("digest={}", model::digest(&net));
    Ok(())
}

/// Verify the analytic gradients against central finite differences.
pub fn run_gradcheck(cfg: &RunConfig, seed: u64, samples: usize) -> Result<()> {
    let mut rng = Rng::new(seed);
    let report = gradient_check(&cfg.net, &mut rng, samples)?;
    println!(
        "max_rel_error={:.3e} checked={} worst={}",
        report.max_rel_error, report.checked, report.worst_param
    );
    if report.max_rel_error > 1e-4 {
        bail!(
            "gradient check failed: max relative error {:.3e} exceeds 1e-4",
            report.max_rel_error
        );
    }
    Ok(())
}

fn detection_line(stem: &str, d: &Detection) -> String {
    format!(
        "{stem} {} {} {} {} {}\n",
        f6(d.bbox.x),
        f6(d.bbox.y),
        f6(d.bbox.w),
        f6(d.bbox.h),
        f6(d.score)
    )
}

fn list_images(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut files = Vec::new();
    if input.is_dir() {
        // accept both a dataset root (images/ inside) and a bare directory
        let dir = if input.join("images").is_dir() {
            input.join("images")
        } else {
            input.to_path_buf()
        };
        for item in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = item?.path();
            match path.extension().and_then(|e| e.to_str()) {
                Some("ppm") | Some("pgm") => {
                    let stem = path
                        .file_stem()
                        .and_then(|s| s.to_str())
                        .context("non-UTF8 image filename")?
                        .to_string();
                    files.push((stem, path));
                }
                _ => {}
            }
        }
        files.sort();
        if files.is_empty() {
            bail!("no .ppm/.pgm images under {}", dir.display());
        }
    } else {
        let stem = input
            .file_stem()
            .and_then(|s| s.to_str())
            .context("non-UTF8 image filename")?
            .to_string();
        files.push((stem, input.to_path_buf()));
    }
    Ok(files)
}

/// Run the detector over an image or a directory of images.
pub fn run_detect(cfg: &RunConfig, model: &Path, input: &Path, out: &Path) -> Result<()> {
    let net = Network::load(model)?;
    let images = list_images(input)?;
    let results: Vec<(String, Vec<Detection>)> = images
        .par_iter()
        .map(|(stem, path)| {
            let image = bdl_core::pnm::read_image(path)?;
            let dets = detect_image(&image, &net, &cfg.detect)?;
            Ok((stem.clone(), dets))
        })
        .collect::<bdl_core::Result<_>>()?;
    let mut text = String::new();
    let mut total = 0usize;
    for (stem, dets) in &results {
        for d in dets {
            text.push_str(&detection_line(stem, d));
            total += 1;
        }
    }
    write_text(out, &text)?;
    println!("images={} detections={total}", results.len());
    Ok(())
}

fn parse_detections(path: &Path) -> Result<HashMap<String, Vec<Detection>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut by_stem: HashMap<String, Vec<Detection>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 6 {
            bail!("{}:{}: expected `stem x y w h score`", path.display(), i + 1);
        }
        let nums: Vec<f64> = fields[1..]
            .iter()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("{}:{}: bad number", path.display(), i + 1))?;
        by_stem.entry(fields[0].to_string()).or_default().push(Detection {
            bbox: BBox::new(nums[0], nums[1], nums[2], nums[3]),
            score: nums[4],
        });
    }
    Ok(by_stem)
}

/// Score a detection file against a dataset's annotations.
pub fn run_eval(cfg: &RunConfig, detections: &Path, dataset: &Path, out: Option<&Path>) -> Result<()> {
    let by_stem = parse_detections(detections)?;
    let ds = load_dataset(dataset)?;
    let per_image: Vec<(Vec<Detection>, Vec<GroundTruth>)> = ds
        .entries
        .iter()
        .map(|e| {
            (
                by_stem.get(&e.stem).cloned().unwrap_or_default(),
                reasonable_filter(&e.truths),
            )
        })
        .collect();
    let result = curve(&per_image, cfg.eval_iou)?;
    if let Some(path) = out {
        let mut text = String::from("threshold,fppi,miss_rate\n");
        for p in &result.points {
            text.push_str(&format!(
                "{},{},{}\n",
                f6(p.threshold),
                f6(p.fppi),
                f6(p.miss_rate)
            ));
        }
        write_text(path, &text)?;
    }
    for (f, mr) in result.reference_samples() {
        println!("fppi_ref={} miss_rate={}", f6(f), f6(mr));
    }
    println!("LAMR={}", f6(result.lamr));
    Ok(())
}

fn kernel_to_pgm(slice: &[f64], kh: usize, kw: usize, path: &Path) -> Result<()> {
    let lo = slice.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = slice.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = if hi > lo {
        slice.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; slice.len()]
    };
    let gray = Tensor::new(vec![kh, kw], scaled)?;
    bdl_core::pnm::write_pgm(path, &gray)?;
    Ok(())
}

/// Write every convolution kernel slice as a min-max scaled graymap.
pub fn run_dump_kernels(model: &Path, out: &Path) -> Result<()> {
    let net = Network::load(model)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = net.config().clone();
    let k = cfg.c2_kernel;
    let mut written = 0usize;
    let c2 = net.c2_weights().data();
    for map in 0..cfg.c2_maps {
        for c in 0..cfg.input_maps {
            let start = (map * cfg.input_maps + c) * k * k;
            kernel_to_pgm(
                &c2[start..start + k * k],
                k,
                k,
                &out.join(format!("c2_k{map:03}_c{c:02}.pgm")),
            )?;
            written += 1;
        }
    }
    for (e, entry) in cfg.c4_bank.iter().enumerate() {
        let weights = net.c4_weights()[e].data();
        let taps = entry.kh * entry.kw;
        for f in 0..entry.count {
            for c in 0..cfg.c2_maps {
                let start = (f * cfg.c2_maps + c) * taps;
                kernel_to_pgm(
                    &weights[start..start + taps],
                    entry.kh,
                    entry.kw,
                    &out.join(format!("c4_e{e}_f{f:03}_c{c:02}.pgm")),
                )?;
                written += 1;
            }
        }
    }
    println!("kernels={written}");
    Ok(())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

pub struct StabilityArgs {
    pub seeds: usize,
    pub epochs: usize,
    pub warmup: usize,
    pub train_images: usize,
    pub heldout_images: usize,
}

pub struct StabilityOutcome {
    pub median_stability_boosted: f64,
    pub median_stability_baseline: f64,
    pub median_final_boosted: f64,
    pub median_final_baseline: f64,
}

/// Paired stability experiment: for each seed, train the reweighted variant
/// and the plain-backprop baseline from the same initialization, data, and
/// shuffle order; report the per-run stability score (standard deviation of
/// post-warmup held-out error) and final error.
pub fn run_stability(
    cfg: &RunConfig,
    out: Option<&Path>,
    args: &StabilityArgs,
) -> Result<StabilityOutcome> {
    if args.seeds == 0 {
        bail!("need at least one seed");
    }
    if args.warmup >= args.epochs {
        bail!("warmup must leave at least one scored epoch");
    }
    let base_seed = cfg.synth.seed;
    let scenes = |num_images: usize, seed: u64| bdl_core::data::SynthConfig {
        num_images,
        seed,
        ..cfg.synth.clone()
    };
    let train_ds: Dataset = synth_generate(&scenes(args.train_images, base_seed))?;
    let heldout_ds = synth_generate(&scenes(args.heldout_images, base_seed.wrapping_add(1)))?;
    let train_base = sample_windows(
        &train_ds,
        &mut Rng::new(base_seed.wrapping_add(2)),
        cfg.neg_per_image,
        cfg.window(),
        cfg.bins(),
    )?;
    let heldout = sample_windows(
        &heldout_ds,
        &mut Rng::new(base_seed.wrapping_add(3)),
        cfg.neg_per_image,
        cfg.window(),
        cfg.bins(),
    )?;
    println!(
        "train_windows={} heldout_windows={}",
        train_base.samples.len(),
        heldout.samples.len()
    );

    let runs: Vec<(u64, TrainVariant)> = (1..=args.seeds as u64)
        .flat_map(|s| [(s, TrainVariant::Boosted), (s, TrainVariant::Baseline)])
        .collect();
    let results: Vec<(u64, TrainVariant, f64, f64)> = runs
        .par_iter()
        .map(|&(seed, variant)| {
            let mut net = Network::init(cfg.net.clone(), &mut Rng::new(seed))?;
            let mut samples = train_base.samples.clone();
            let tc = bdl_core::train::TrainConfig {
                epochs: args.epochs,
                seed,
                variant,
                ..cfg.train.clone()
            };
            let report = train(&mut net, &mut samples, &heldout.samples, &tc)?;
            Ok((
                seed,
                variant,
                report.stability(args.warmup),
                report.final_heldout_error(),
            ))
        })
        .collect::<bdl_core::Result<_>>()?;

    let mut csv = String::from("seed,variant,stability_score,final_error\n");
    for (seed, variant, stability, final_err) in &results {
        let name = match variant {
            TrainVariant::Boosted => "boosted",
            TrainVariant::Baseline => "baseline",
        };
        csv.push_str(&format!("{seed},{name},{},{}\n", f6(*stability), f6(*final_err)));
        println!(
            "seed={seed} variant={name} stability={} final_error={}",
            f6(*stability),
            f6(*final_err)
        );
    }
    if let Some(path) = out {
        write_text(path, &csv)?;
    }

    let pick = |variant: TrainVariant, which: fn(&(u64, TrainVariant, f64, f64)) -> f64| {
        median(
            results
                .iter()
                .filter(|r| r.1 == variant)
                .map(which)
                .collect(),
        )
    };
    let outcome = StabilityOutcome {
        median_stability_boosted: pick(TrainVariant::Boosted, |r| r.2),
        median_stability_baseline: pick(TrainVariant::Baseline, |r| r.2),
        median_final_boosted: pick(TrainVariant::Boosted, |r| r.3),
        median_final_baseline: pick(TrainVariant::Baseline, |r| r.3),
    };
    println!(
        "median_stability boosted={} baseline={}",
        f6(outcome.median_stability_boosted),
        f6(outcome.median_stability_baseline)
    );
    println!(
        "median_final_error boosted={} baseline={}",
        f6(outcome.median_final_boosted),
        f6(outcome.median_final_baseline)
    );
    Ok(outcome)
}
