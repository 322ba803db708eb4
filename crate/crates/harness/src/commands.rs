//! The subcommands, as library functions writing into an output directory.

use std::path::{Path, PathBuf};

use mil_core::bagio::{read_all, read_bags, shuffle_instances, write_bags};
use mil_core::metrics::evaluate;
use mil_core::mil::{train_until_convergence, TrainOutcome};
use mil_core::model::init_params;
use mil_core::synth::{build_dataset, volume_seed};
use mil_core::{Bag, ModelParams};

use crate::config::{RunConfig, Stream};
use crate::error::{HarnessError, Result};
use crate::plot::{ap_vs_size_svg, group_curves, pr_band_svg, write_svg};
use crate::reports::{self, log_rows, read_rows, write_rows, write_rows_with_header, PrRow};
use crate::sweep::{run_sweep_with, CellRecord, SizeSummary, SweepResult};
use crate::modelfile;

pub const TRAIN_FILE: &str = "train.milb";
pub const VAL_FILE: &str = "val.milb";
pub const TEST_FILE: &str = "test.milb";
pub const MODEL_FILE: &str = "model.milm";
pub const PR_SVG: &str = "pr_curves.svg";
pub const AP_SVG: &str = "ap_vs_size.svg";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitCount {
    pub bags: usize,
    pub positive: usize,
}

impl SplitCount {
    fn of(bags: &[Bag]) -> Self {
        Self {
            bags: bags.len(),
            positive: bags.iter().filter(|b| b.label.is_positive()).count(),
        }
    }
}

impl std::fmt::Display for SplitCount {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} bags ({} positive, {} negative)", self.bags, self.positive, self.bags - self.positive)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerateSummary {
    pub train: SplitCount,
    pub val: SplitCount,
    pub test: SplitCount,
    pub files: [PathBuf; 3],
}

pub fn generate(config: &RunConfig, out: &Path) -> Result<GenerateSummary> {
    config.validate()?;
    ensure_dir(out)?;
    let mut ds = build_dataset(&config.data.generator, &config.data.split, config.stream_seed(Stream::Data))?;
    if config.data.shuffle_instances {
        let seed = config.stream_seed(Stream::Instances);
        for (i, bag) in ds.train.iter_mut().chain(&mut ds.val).chain(&mut ds.test).enumerate() {
            *bag = shuffle_instances(bag, volume_seed(seed, i as u64));
        }
    }
    let files = [out.join(TRAIN_FILE), out.join(VAL_FILE), out.join(TEST_FILE)];
    for (bags, path) in [&ds.train, &ds.val, &ds.test].into_iter().zip(&files) {
        write_bags(bags, path, config.data.encoding)?;
    }
    Ok(GenerateSummary {
        train: SplitCount::of(&ds.train),
        val: SplitCount::of(&ds.val),
        test: SplitCount::of(&ds.test),
        files,
    })
}

/// Reads a bag file and checks its slices fit the configured network input.
pub fn load_bags(path: &Path, config: &RunConfig) -> Result<Vec<Bag>> {
    let header = read_bags(path)?.header();
    let (h, w) = (header.height as usize, header.width as usize);
    if (h, w) != (config.arch.input_height, config.arch.input_width) {
        return Err(HarnessError::Data(format!(
            "{} holds {h}x{w} slices but the network expects {}x{}",
            path.display(),
            config.arch.input_height,
            config.arch.input_width
        )));
    }
    Ok(read_all(path)?)
}

pub fn train(config: &RunConfig, data: &Path, out: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    let train = load_bags(&data.join(TRAIN_FILE), config)?;
    let val = load_bags(&data.join(VAL_FILE), config)?;
    ensure_dir(out)?;
    let init = init_params(&config.arch, config.stream_seed(Stream::Init))?;
    let outcome = train_until_convergence(init, &train, &val, &config.training, config.stream_seed(Stream::Shuffle))
        .map_err(numeric_context)?;
    modelfile::save(&outcome.params, out.join(MODEL_FILE))?;
    write_rows(out.join(reports::TRAIN_LOG), &log_rows(&outcome.log.epochs, config.output.wall_clock))?;
    Ok(outcome)
}

fn numeric_context(e: mil_core::MilError) -> HarnessError {
    match e {
        mil_core::MilError::Numeric(msg) => HarnessError::Numeric(msg),
        other => other.into(),
    }
}

pub fn eval(
    config: &RunConfig,
    model: &Path,
    bags: &Path,
    threshold: f64,
    out: &Path,
) -> Result<mil_core::metrics::EvalReport> {
    let params: ModelParams = modelfile::load(model)?;
    let arch = params.config().clone();
    let bags = load_bags(bags, &RunConfig { arch, ..config.clone() })?;
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(HarnessError::Usage(format!("threshold {threshold} is not in (0, 1)")));
    }
    ensure_dir(out)?;
    let report = evaluate(&params, &bags, threshold, 0)?;
    reports::write_eval(out, &bags, &report)?;
    Ok(report)
}

/// Sweep over the bags in `data`, or over freshly generated bags when `data` is `None`.
pub fn sweep(
    config: &RunConfig,
    data: Option<&Path>,
    out: &Path,
    progress: impl Fn(&CellRecord) + Sync,
) -> Result<SweepResult> {
    config.validate()?;
    let (mut dev, test) = match data {
        Some(dir) => {
            let mut dev = load_bags(&dir.join(TRAIN_FILE), config)?;
            dev.extend(load_bags(&dir.join(VAL_FILE), config)?);
            (dev, load_bags(&dir.join(TEST_FILE), config)?)
        }
        None => {
            let ds = build_dataset(&config.data.generator, &config.data.split, config.stream_seed(Stream::Data))?;
            let mut dev = ds.train;
            dev.extend(ds.val);
            (dev, ds.test)
        }
    };
    dev.shrink_to_fit();
    ensure_dir(out)?;
    let result = run_sweep_with(config, &dev, &test, progress)?;
    write_sweep(out, &result)?;
    Ok(result)
}

pub fn write_sweep(out: &Path, result: &SweepResult) -> Result<()> {
    write_rows(out.join(reports::SWEEP_CELLS), &result.cells)?;
    write_rows(out.join(reports::SWEEP_SUMMARY), &result.summary)?;
    let pr: Vec<PrRow> = result
        .curves
        .iter()
        .flat_map(|(size, fold, points)| PrRow::rows(Some(*size), *fold, points))
        .collect();
    write_rows_with_header(out.join(reports::SWEEP_PR), &["size", "fold", "threshold", "recall", "precision"], &pr)?;
    if !pr.is_empty() {
        plot(out, out)?;
    }
    Ok(())
}

/// Renders the figures for the CSVs found in `input`, returning the files written.
///
/// A sweep directory yields the PR band plot and the AP-by-size plot; an
/// evaluation directory yields the PR plot only.
pub fn plot(input: &Path, out: &Path) -> Result<Vec<PathBuf>> {
    let sweep_pr = input.join(reports::SWEEP_PR);
    let pr_path = if sweep_pr.exists() { sweep_pr } else { input.join(reports::PR_CURVE) };
    if !pr_path.exists() {
        return Err(HarnessError::Data(format!(
            "{} holds neither {} nor {}",
            input.display(),
            reports::SWEEP_PR,
            reports::PR_CURVE
        )));
    }
    let rows: Vec<PrRow> = read_rows(&pr_path)?;
    let pr_svg = pr_band_svg(&group_curves(&rows))?;
    let summary_path = input.join(reports::SWEEP_SUMMARY);
    let ap_svg = if summary_path.exists() {
        let summary: Vec<SizeSummary> = read_rows(&summary_path)?;
        Some(ap_vs_size_svg(&summary)?)
    } else {
        None
    };
    ensure_dir(out)?;
    let mut written = vec![out.join(PR_SVG)];
    write_svg(&written[0], &pr_svg)?;
    if let Some(svg) = ap_svg {
        written.push(out.join(AP_SVG));
        write_svg(&written[1], &svg)?;
    }
    Ok(written)
}
