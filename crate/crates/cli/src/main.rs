mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stereo_ssc::error::{Error, Result};
use stereo_ssc::gradcheck::{self, Module};
use stereo_ssc::harness::{self, AblationPlan, RunManifest, Toggle, TrainConfig};
use stereo_ssc::scenes::io::{Dataset, Split, SplitCounts};
use stereo_ssc::scenes::SceneParams;
use stereo_ssc::seed::derive_seed;

// stdout may be a closed pipe (`ssc eval | head`); that is not an error
macro_rules! say {
    ($($t:tt)*) => {{
        use std::io::Write as _;
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "ssc", version, about = "Stereo semantic scene completion on synthetic indoor scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train a model and write a run directory
    Train(TrainArgs),
    /// Evaluate a trained run on a dataset split
    Eval(EvalArgs),
    /// Train and compare ablation variants over several seeds
    Ablate(AblateArgs),
    /// Check analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
    /// Render loss curves, per-class IoU and depth distributions to HTML
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Master seed; per-scene seeds are derived from it
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Total number of scenes, split 4:1:1 into train/val/test
    #[arg(long, default_value_t = 96)]
    scenes: usize,
    /// Voxel grid dimensions X,Y,Z
    #[arg(long, default_value = "32,16,32", value_parser = parse_triple)]
    grid: [usize; 3],
    /// Number of semantic classes (at least 4)
    #[arg(long, default_value_t = 8)]
    classes: usize,
    /// Voxel edge length in metres
    #[arg(long, default_value_t = 0.2)]
    voxel_size: f64,
    /// Image size W,H (multiples of 8)
    #[arg(long, default_value = "64,64", value_parser = parse_pair)]
    image_size: [usize; 2],
    /// Stereo baseline in metres
    #[arg(long, default_value_t = 0.3)]
    baseline: f64,
    /// Fewest objects placed in a room
    #[arg(long, default_value_t = 2)]
    min_objects: usize,
    /// Most objects placed in a room
    #[arg(long, default_value_t = 6)]
    max_objects: usize,
}

#[derive(Args)]
struct Overrides {
    /// Override the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of training steps
    #[arg(long)]
    steps: Option<u64>,
    /// Override any config key, e.g. --set lr=0.001 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
}

impl Overrides {
    fn pairs(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        if let Some(s) = self.seed {
            out.push(("seed".into(), s.to_string()));
        }
        if let Some(s) = self.steps {
            out.push(("steps".into(), s.to_string()));
        }
        out
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Training config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Run directory to create
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory
    #[arg(long)]
    run: PathBuf,
    /// Split to evaluate: train, val or test
    #[arg(long, default_value = "test")]
    split: Split,
    /// Dataset directory (defaults to the one recorded in the run)
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Base training config (TOML)
    #[arg(long)]
    config: PathBuf,
    /// Components to switch off one at a time
    #[arg(long, default_value = "stereo_sfa,oad,distill", value_delimiter = ',')]
    toggles: Vec<Toggle>,
    /// Number of seeds per variant
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    /// Also train one variant per depth discretization (ud, lid, sid)
    #[arg(long)]
    sweep_discretization: bool,
    /// Split used for evaluation
    #[arg(long, default_value = "test")]
    split: Split,
    /// Write the full report as JSON
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Module to check
    #[arg(long, default_value = "all", value_parser = ["all", "lifting", "oad", "losses", "toynet"])]
    module: String,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory
    #[arg(long)]
    run: PathBuf,
    /// Output HTML file
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory (defaults to the one recorded in the run)
    #[arg(long)]
    data: Option<PathBuf>,
}

fn parse_list<const N: usize>(s: &str) -> std::result::Result<[usize; N], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    parts.try_into().map_err(|_| format!("expected {N} comma-separated integers"))
}

fn parse_triple(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_list::<3>(s)
}

fn parse_pair(s: &str) -> std::result::Result<[usize; 2], String> {
    parse_list::<2>(s)
}

fn parse_key_value(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn gen(args: &GenArgs) -> Result<()> {
    let params = SceneParams {
        grid_dims: args.grid,
        voxel_size: args.voxel_size,
        image_width: args.image_size[0],
        image_height: args.image_size[1],
        baseline: args.baseline,
        n_classes: args.classes,
        min_objects: args.min_objects,
        max_objects: args.max_objects,
        ..Default::default()
    };
    if params.image_width % 8 != 0 || params.image_height % 8 != 0 {
        return Err(Error::Config("image size must be a multiple of 8".into()));
    }
    let tmp = sibling(&args.out, ".partial");
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    let counts = SplitCounts::from_total(args.scenes);
    let result = Dataset::generate(&tmp, args.seed, counts, &params);
    if let Err(e) = result {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if args.out.exists() {
        fs::remove_dir_all(&args.out)?;
    }
    fs::rename(&tmp, &args.out)?;
    say!(
        "wrote {} scenes ({} train / {} val / {} test) to {}",
        counts.total(),
        counts.train,
        counts.val,
        counts.test,
        args.out.display()
    );
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config, &args.overrides.pairs())?;
    let dataset = Dataset::open(&args.data)?;
    harness::train(&cfg, &dataset, &args.out)?;
    let log = harness::read_loss_log(&args.out)?;
    match (log.first(), log.last()) {
        (Some(a), Some(b)) => say!(
            "trained {} steps: l_total {:.4} -> {:.4}; run written to {}",
            log.len(),
            a.losses.l_total,
            b.losses.l_total,
            args.out.display()
        ),
        _ => say!("0 steps; initial model written to {}", args.out.display()),
    }
    Ok(())
}

fn run_dataset(run: &Path, data: Option<&PathBuf>) -> Result<Dataset> {
    let path = match data {
        Some(p) => p.clone(),
        None => {
            let m = run.join(harness::run_files::MANIFEST);
            if !m.is_file() {
                return Err(Error::MissingCheckpoint(format!("{} is not a finished run", run.display())));
            }
            let manifest: RunManifest = serde_json::from_slice(&fs::read(m)?)?;
            PathBuf::from(manifest.data)
        }
    };
    Dataset::open(&path)
}

fn eval(args: &EvalArgs) -> Result<()> {
    harness::load_run(&args.run)?;
    let dataset = run_dataset(&args.run, args.data.as_ref())?;
    let report = harness::evaluate(&args.run, &dataset, args.split)?;
    let a = &report.aggregate;
    say!("split {}: {} samples, SC IoU {:.4}, SSC mIoU {:.4}", report.split, report.samples.len(), a.sc_iou, a.ssc_miou);
    for (class, iou) in &a.per_class_iou {
        let name = dataset.manifest.class_names.get(*class).map_or("?", String::as_str);
        say!("  class {class:>2} {name:<10} IoU {iou:.4}");
    }
    Ok(())
}

fn ablate(args: &AblateArgs) -> Result<()> {
    let cfg = TrainConfig::load(&args.config, &args.overrides.pairs())?;
    let dataset = Dataset::open(&args.data)?;
    let plan = AblationPlan {
        toggles: args.toggles.clone(),
        seeds: (0..args.seeds).map(|i| derive_seed(cfg.seed, "ablation", i)).collect(),
        discretization_sweep: args.sweep_discretization,
        split: args.split,
    };
    let report = harness::ablate(&cfg, &dataset, &plan, |name, seed, r| {
        eprintln!("{name} seed {seed:#x}: SC IoU {:.4}, SSC mIoU {:.4}", r.sc_iou, r.ssc_miou);
    })?;
    say!("{}", report.table.trim_end());
    if let Some(out) = &args.out {
        let tmp = sibling(out, ".partial");
        fs::write(&tmp, serde_json::to_vec_pretty(&report)?)?;
        fs::rename(tmp, out)?;
    }
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> Result<()> {
    let results = if args.module == "all" { gradcheck::run_all()? } else { gradcheck::run_module(args.module.parse::<Module>()?)? };
    let mut failed = 0;
    for r in &results {
        say!(
            "{} {:<8} {:<42} max_rel_error={:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.module.name(),
            r.operation,
            r.max_rel_error
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(Error::Numeric(format!("{failed} of {} gradient checks failed", results.len())));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
        Command::Report(a) => {
            let dataset = run_dataset(&a.run, a.data.as_ref()).ok();
            report::write_report(&a.run, dataset.as_ref(), &a.out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
