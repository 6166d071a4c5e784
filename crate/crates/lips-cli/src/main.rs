//! `lips` command-line harness: analytic cost profiles, instrumented
//! forward passes over synthetic or file inputs, and metric evaluation.

mod config_file;
mod lseg;
mod ltsr;
mod report;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use lips_core::config::ModelConfig;
use lips_core::cost::{
    profile_model, sweep_encoder_layers, sweep_resolution, sweep_routing, sweep_width,
    CostReport, EncoderCostMode, Stage,
};
use lips_core::metrics::{
    instances_from_panoptic, mask_average_precision, mean_iou, panoptic_quality, ScoredInstance,
};
use lips_core::panoptic::{panoptic_inference, CategoryTable, PanopticConfig};
use lips_core::pipeline::{forward, synthetic_image, ModelWeights};
use lips_core::presets::Preset;

use report::{Format, ReportRow};

/// Reference implementation of the LiPS panoptic segmentation pipeline.
#[derive(Parser)]
#[command(name = "lips", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the analytic per-stage cost report for a model configuration.
    Profile(ProfileArgs),
    /// Run the instrumented forward pass and dump its outputs.
    Forward(ForwardArgs),
    /// Score a predicted segmentation against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct ModelSource {
    /// Named preset configuration.
    #[arg(long, conflicts_with = "config")]
    preset: Option<String>,
    /// Config file (`key = value` with `[routing]`/`[pixel]`/`[query]` sections).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Input resolution `N` (square) or `HxW`; overrides the config.
    #[arg(long)]
    resolution: Option<String>,
}

#[derive(Args)]
struct ProfileArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Report format.
    #[arg(long, value_enum, default_value = "md")]
    format: FormatArg,
    /// Vary one axis instead of profiling a single configuration.
    #[arg(long, value_enum)]
    sweep: Option<SweepArg>,
    /// Encoder stage costing: the toy backbone the forward pass runs, or the
    /// calibrated external table. Defaults to external for presets and toy
    /// for config files.
    #[arg(long, value_enum)]
    encoder_cost: Option<EncoderCostArg>,
}

#[derive(Args)]
struct ForwardArgs {
    #[command(flatten)]
    source: ModelSource,
    /// Input image as a `3 x H x W` LTSR tensor.
    #[arg(long, conflicts_with = "synthetic")]
    input: Option<PathBuf>,
    /// Generate a deterministic synthetic image from this seed.
    #[arg(long)]
    synthetic: Option<u64>,
    /// Write class_logits.ltsr, mask_logits.ltsr and panoptic.lseg here.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted segmentation (LSEG).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth segmentation (LSEG).
    #[arg(long)]
    gt: PathBuf,
    /// Category table CSV (`id,name,is_thing`).
    #[arg(long)]
    categories: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Md,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepArg {
    Layers,
    Width,
    Routing,
    Resolution,
}

#[derive(Clone, Copy, ValueEnum)]
enum EncoderCostArg {
    Toy,
    External,
}

fn main() -> Result<()> {
    init_thread_pool()?;
    match Cli::parse().command {
        Command::Profile(args) => cmd_profile(args),
        Command::Forward(args) => cmd_forward(args),
        Command::Eval(args) => cmd_eval(args),
    }
}

/// `LIPS_THREADS` caps the worker pool; 0 or unset means automatic.
fn init_thread_pool() -> Result<()> {
    if let Ok(raw) = std::env::var("LIPS_THREADS") {
        let n: usize = raw
            .trim()
            .parse()
            .with_context(|| format!("LIPS_THREADS must be a non-negative integer, got `{raw}`"))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .context("installing the global thread pool")?;
        }
    }
    Ok(())
}

/// The configuration, its display name, and the preset it came from (if any).
struct ResolvedModel {
    name: String,
    cfg: ModelConfig,
    preset: Option<Preset>,
}

fn resolve_model(source: &ModelSource) -> Result<ResolvedModel> {
    let (name, cfg, preset) = match (&source.preset, &source.config) {
        (Some(name), None) => {
            let preset = Preset::from_name(name)?;
            (preset.name().to_string(), preset.model_config(), Some(preset))
        }
        (None, Some(path)) => {
            let stem = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "config".to_string());
            (stem, config_file::read_config(path)?, None)
        }
        (None, None) => bail!("pass either --preset or --config"),
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let mut cfg = cfg;
    if let Some(res) = &source.resolution {
        let (h, w) = parse_resolution(res)?;
        cfg.input_h = h;
        cfg.input_w = w;
    }
    cfg.validate()?;
    Ok(ResolvedModel { name, cfg, preset })
}

fn parse_resolution(raw: &str) -> Result<(usize, usize)> {
    let parse = |tok: &str| -> Result<usize> {
        tok.parse().with_context(|| format!("bad resolution component `{tok}`"))
    };
    match raw.split_once(['x', 'X']) {
        Some((h, w)) => Ok((parse(h.trim())?, parse(w.trim())?)),
        None => {
            let n = parse(raw.trim())?;
            Ok((n, n))
        }
    }
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let model = resolve_model(&args.source)?;
    let external = model.preset.map(Preset::encoder_cost);
    let mode_choice = args.encoder_cost.unwrap_or(match model.preset {
        Some(_) => EncoderCostArg::External,
        None => EncoderCostArg::Toy,
    });
    let mode = match (mode_choice, &external) {
        (EncoderCostArg::Toy, _) => EncoderCostMode::Toy,
        (EncoderCostArg::External, Some(cost)) => EncoderCostMode::External(cost),
        (EncoderCostArg::External, None) => {
            bail!("--encoder-cost external needs a preset with a calibrated encoder table")
        }
    };

    let rows = match args.sweep {
        None => report::stage_rows(&model.name, &profile_model(&model.cfg, mode)?),
        Some(sweep) => sweep_rows(&model, mode, sweep)?,
    };
    let format = match args.format {
        FormatArg::Md => Format::Markdown,
        FormatArg::Csv => Format::Csv,
    };
    print!("{}", report::render(&rows, format));
    Ok(())
}

fn sweep_rows(
    model: &ResolvedModel,
    mode: EncoderCostMode,
    sweep: SweepArg,
) -> Result<Vec<ReportRow>> {
    let label = |suffix: String| format!("{}@{}", model.name, suffix);
    let rows = match sweep {
        SweepArg::Layers => {
            let depths = [1usize, 2, 3, 4, 5, 6];
            let table = sweep_encoder_layers(&model.cfg, mode, &depths)?;
            collect_totals(table, |d| label(format!("depth={d}")))
        }
        SweepArg::Width => {
            let widths = [256usize, 128, 64];
            let table = sweep_width(&model.cfg, mode, &widths)?;
            collect_totals(table, |w| label(format!("width={w}")))
        }
        SweepArg::Routing => {
            let level_sets: [&[usize]; 4] = [&[1], &[1, 2], &[1, 2, 3], &[1, 2, 3, 4]];
            let table = sweep_routing(&model.cfg, mode, &level_sets)?;
            table
                .into_iter()
                .map(|(levels, report)| {
                    let names: Vec<String> = levels.iter().map(usize::to_string).collect();
                    report::total_row(&label(format!("levels={}", names.join("+"))), &report)
                })
                .collect()
        }
        SweepArg::Resolution => {
            let grid =
                [(256usize, 256usize), (512, 512), (640, 640), (1024, 1024), (2048, 2048)];
            let table = sweep_resolution(&model.cfg, mode, &grid)?;
            table
                .into_iter()
                .map(|((h, w), report)| report::total_row(&label(format!("{h}x{w}")), &report))
                .collect()
        }
    };
    Ok(rows)
}

fn collect_totals<K: std::fmt::Display>(
    table: Vec<(K, CostReport)>,
    label: impl Fn(K) -> String,
) -> Vec<ReportRow> {
    table.into_iter().map(|(key, report)| report::total_row(&label(key), &report)).collect()
}

fn cmd_forward(args: ForwardArgs) -> Result<()> {
    let model = resolve_model(&args.source)?;
    let mut cfg = model.cfg;

    let image = match (&args.input, args.synthetic) {
        (Some(path), None) => {
            let tensor = ltsr::read_tensor(path)?;
            let shape = tensor.shape().to_vec();
            if shape.len() != 3 || shape[0] != 3 {
                bail!("input tensor must be 3 x H x W, got {shape:?}");
            }
            cfg.input_h = shape[1];
            cfg.input_w = shape[2];
            cfg.validate()?;
            tensor
        }
        (None, seed) => synthetic_image(cfg.input_h, cfg.input_w, seed.unwrap_or(0))?,
        (Some(_), Some(_)) => unreachable!("clap rejects the combination"),
    };

    let weights = ModelWeights::from_config(&cfg)?;
    let out = forward(&cfg, &weights, &image)?;

    for stage in Stage::ALL {
        println!("{}_macs {}", stage.name(), out.stats.macs.get(stage));
    }
    println!("total_macs {}", out.stats.macs.total());
    println!("msdeform_calls {}", out.stats.msdeform_calls);

    if let Some(dir) = &args.dump_dir {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("creating dump dir {}", dir.display()))?;
        let prediction = out.decoder.final_prediction();
        ltsr::write_tensor(&dir.join("class_logits.ltsr"), &prediction.class_logits)?;
        ltsr::write_tensor(&dir.join("mask_logits.ltsr"), &prediction.mask_logits)?;

        let categories = CategoryTable::synthetic(cfg.query.num_classes);
        let segmentation = panoptic_inference(
            &prediction.class_logits,
            &prediction.mask_logits,
            &categories,
            cfg.input_h,
            cfg.input_w,
            &PanopticConfig::default(),
        )?;
        lseg::write_lseg(&dir.join("panoptic.lseg"), &segmentation)?;
        lseg::write_categories(&dir.join("categories.csv"), &categories)?;
        println!("segments {}", segmentation.segments.len());
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let gt = lseg::read_lseg(&args.gt)?;
    let pred = lseg::read_lseg(&args.pred)?;
    let categories = lseg::read_categories(&args.categories)?;
    for seg in gt.segments.iter().chain(&pred.segments) {
        if categories.by_id(seg.category_id).is_none() {
            bail!("segment {} references unknown category {}", seg.id, seg.category_id);
        }
    }

    // The three metric families are independent; score them in parallel.
    let (pq_result, (miou, ap)) = rayon::join(
        || panoptic_quality(&gt, &pred),
        || {
            rayon::join(
                || mean_iou(&gt, &pred),
                || {
                    let gts = instances_from_panoptic(&gt);
                    // LSEG predictions carry no confidence, so every
                    // instance scores 1 and ties keep id order.
                    let preds: Vec<ScoredInstance> = instances_from_panoptic(&pred)
                        .into_iter()
                        .map(|i| ScoredInstance { category_id: i.category_id, score: 1.0, mask: i.mask })
                        .collect();
                    mask_average_precision(&gts, &preds)
                },
            )
        },
    );
    let pq_result = pq_result?;
    let pct = |v: f64| v * 100.0;

    println!("PQ {:.1}", pct(pq_result.pq));
    println!("SQ {:.1}", pct(pq_result.sq));
    println!("RQ {:.1}", pct(pq_result.rq));
    println!("mIoU {:.1}", pct(miou?));
    println!("AP {:.1}", pct(ap?));
    for class in &pq_result.per_class {
        let name = categories
            .by_id(class.category_id)
            .map(|c| c.name.as_str())
            .unwrap_or("unknown");
        println!(
            "class {} {} PQ {:.1} SQ {:.1} RQ {:.1}",
            class.category_id,
            name,
            pct(class.pq()),
            pct(class.sq()),
            pct(class.rq())
        );
    }
    Ok(())
}
