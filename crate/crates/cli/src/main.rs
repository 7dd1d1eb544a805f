//! `roikit` command-line interface.
//!
//! Every subcommand prints a JSON summary to stdout on success (or
//! `key,value` rows with `--format csv`) and diagnostics to stderr. Exit
//! status is 0 on success, 1 for input errors and 2 for numerical failures.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roikit::Connectivity;

#[derive(Debug, Parser)]
#[command(
    name = "roikit",
    version,
    about = "ROI consensus, metrics and dataset tooling for chest radiographs"
)]
struct Cli {
    /// Seed for augmentation and splitting.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

pub fn parse_dims(s: &str) -> Result<(usize, usize), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let parse = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| format!("bad dimension {v:?} in {s:?}"))
    };
    Ok((parse(w)?, parse(h)?))
}

fn parse_connectivity(s: &str) -> Result<Connectivity, String> {
    s.parse::<u8>()
        .ok()
        .and_then(|v| Connectivity::try_from(v).ok())
        .ok_or_else(|| format!("connectivity must be 4 or 8, got {s:?}"))
}

#[derive(Debug, Clone, Args)]
pub struct StapleArgs {
    /// Fixed foreground prior (default: mean rater foreground fraction).
    #[arg(long)]
    pub prior: Option<f64>,
    #[arg(long, default_value_t = roikit::staple::DEFAULT_TOL)]
    pub tol: f64,
    #[arg(long, default_value_t = roikit::staple::DEFAULT_MAX_ITER)]
    pub max_iter: usize,
    /// Posterior threshold for the consensus mask.
    #[arg(long, default_value_t = roikit::staple::DEFAULT_CONSENSUS_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value = "8", value_parser = parse_connectivity)]
    pub connectivity: Connectivity,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fuse rater masks into a STAPLE consensus.
    Fuse {
        /// Rater masks (PNG), at least two.
        #[arg(long, num_args = 2.., required = true)]
        masks: Vec<PathBuf>,
        /// Per-pixel prior map (PFM), overriding --prior.
        #[arg(long)]
        prior_map: Option<PathBuf>,
        #[command(flatten)]
        staple: StapleArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Consensus boxes from several raters' VIA annotation files.
    Consensus {
        #[arg(long, num_args = 2.., required = true)]
        via: Vec<PathBuf>,
        /// Frame size for every image, e.g. 512x512.
        #[arg(long, value_parser = parse_dims)]
        frame: Option<(usize, usize)>,
        /// JSON object mapping image ids to [width, height].
        #[arg(long)]
        frames: Option<PathBuf>,
        #[command(flatten)]
        staple: StapleArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Segmentation metrics and AP over a folder of predictions.
    EvalSeg {
        /// Folder of probability maps (`<stem>.pfm`).
        #[arg(long)]
        pred: PathBuf,
        /// Folder of ground truth (`<stem>.png` mask or `<stem>.json` boxes).
        #[arg(long)]
        gt: PathBuf,
        /// Metrics JSON; the PR curves go to a `.pr.csv` alongside.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        binarize: f64,
        #[arg(long, default_value_t = 0)]
        min_area: usize,
        #[arg(long, default_value = "8", value_parser = parse_connectivity)]
        connectivity: Connectivity,
        /// Comma-separated IOU thresholds (default 0.50:0.05:0.95).
        #[arg(long, value_delimiter = ',')]
        iou_thresholds: Option<Vec<f64>>,
    },
    /// Classification metrics from a `score,label` CSV.
    EvalCls {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Use sqrt(confidence) per interval for joint coverage.
        #[arg(long)]
        joint_sqrt: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Lung crop, resize, contrast saturation and standardization.
    Preprocess {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        lung_mask: PathBuf,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 1.0)]
        lo: f64,
        #[arg(long, default_value_t = 99.0)]
        hi: f64,
        /// Output image (PFM).
        #[arg(long)]
        out: PathBuf,
        /// Boxes JSON to carry into the output frame.
        #[arg(long, requires = "out_boxes")]
        boxes: Option<PathBuf>,
        #[arg(long)]
        out_boxes: Option<PathBuf>,
        /// ROI mask PNG to carry into the output frame.
        #[arg(long, requires = "out_mask")]
        mask: Option<PathBuf>,
        #[arg(long)]
        out_mask: Option<PathBuf>,
    },
    /// Tversky loss (and optionally its gradient) of a prediction.
    Loss {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        alpha: f64,
        #[arg(long, default_value_t = 0.7)]
        beta: f64,
        #[arg(long, default_value_t = 1.0)]
        smooth: f64,
        /// Write the per-pixel loss gradient (PFM).
        #[arg(long)]
        grad_out: Option<PathBuf>,
    },
    /// Class-selective relevance map from features and a dense head.
    Crm {
        /// Multi-page PFM or a folder of per-channel PFMs.
        #[arg(long)]
        features: PathBuf,
        /// JSON `{"weights": [[..]], "bias": [..]}`, weights indexed [channel][class].
        #[arg(long)]
        head: PathBuf,
        /// Restrict relevance to one output class.
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, value_parser = parse_dims)]
        upscale: Option<(usize, usize)>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        raw_out: Option<PathBuf>,
    },
    /// Threshold a heat map into component polygons and a mask.
    HeatToMask {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 16)]
        min_area: usize,
        #[arg(long, default_value = "8", value_parser = parse_connectivity)]
        connectivity: Connectivity,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_polys: Option<PathBuf>,
    },
    /// Weak-mask training pairs from relevance maps of positive images.
    WeakPairs {
        #[arg(long)]
        manifest: PathBuf,
        /// Folder of `<image stem>.pfm` relevance maps.
        #[arg(long)]
        relevance_dir: PathBuf,
        #[arg(long)]
        mask_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "1")]
        positive_label: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 16)]
        min_area: usize,
        #[arg(long, default_value = "8", value_parser = parse_connectivity)]
        connectivity: Connectivity,
        /// Mask size (default: each image's own size).
        #[arg(long, value_parser = parse_dims)]
        size: Option<(usize, usize)>,
    },
    /// Seeded flip/shift/rotate copies of the training entries.
    Augment {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON augmentation spec; `--seed` overrides its seed.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        repeat: usize,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        out_manifest: PathBuf,
    },
    /// Patient-level train/validation split.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_frac: f64,
        /// Output manifest (default: CSV on stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Append weak-mask pairs to a base training manifest.
    AssembleAt {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        weak: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Read rectangle annotations from a VIA project.
    ViaImport {
        #[arg(long)]
        via: PathBuf,
        /// Boxes per image as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-export as flat VIA JSON.
        #[arg(long)]
        export_via: Option<PathBuf>,
    },
    /// Rasterize a box list into a mask.
    BoxesToMask {
        #[arg(long)]
        boxes: PathBuf,
        #[arg(long, value_parser = parse_dims)]
        frame: (usize, usize),
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    let ctx = commands::Context { seed: cli.seed };
    match commands::run(cli.command, &ctx).and_then(|out| output::emit(out, cli.format)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}
