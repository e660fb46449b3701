use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use convqg_core::checkpoint;
use convqg_core::metrics::{parse_preferences, preference_histogram, MetricsReport};
use convqg_core::objective::{BetaSchedule, Variant};
use convqg_core::toyworld::{generate_world_with, ingest_jsonl, split_sizes, write_jsonl, Split, WorldConfig, WorldConstraint};
use convqg_core::train::{self, Dataset, RunConfig, Selection, SweepGrid};
use convqg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "convqg", version, about = "Contrastive visual question generation on a synthetic scene world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset as train/val/test JSONL plus a manifest.
    GenData(GenDataArgs),
    /// Train one model and write checkpoints and logs.
    Train(RunArgs),
    /// Decode questions for every example of a data file.
    Generate(GenerateArgs),
    /// Score generated questions against references.
    Eval(EvalArgs),
    /// Train and evaluate the B, I, T and IT variants for every ablation seed.
    Ablate(RunArgs),
    /// Vary alpha, beta and the margin one at a time around the config.
    Sweep(SweepArgs),
    /// Histogram of human preferences over question similarity.
    AnalyzePreferences(PreferenceArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum ConstraintKind {
    Triplet,
    Answer,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    /// Number of object categories in the world.
    #[arg(long, default_value_t = 12)]
    ontology: usize,
    #[arg(long, value_enum, default_value_t = ConstraintKind::Triplet)]
    constraint: ConstraintKind,
    #[arg(long)]
    out: PathBuf,
}

/// A JSON config plus flags that override its keys.
#[derive(Args)]
struct RunArgs {
    /// JSON run config; absent keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    margin: Option<f64>,
    /// A number for a fixed value, or geometric10.
    #[arg(long)]
    beta: Option<BetaSchedule>,
    /// B, I, T or IT.
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    d_sent: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    embedder_seed: Option<u64>,
    /// kvqg, vqa, vqgcoco or fvqa.
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    train: Option<PathBuf>,
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// val_cel or val_bleu4.
    #[arg(long)]
    select_by: Option<Selection>,
    #[arg(long)]
    beams: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ablation_seeds: Option<Vec<u64>>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! apply {
            ($($f:ident),*) => {$(
                if let Some(v) = &self.$f {
                    c.$f = v.clone().into();
                }
            )*};
        }
        apply!(seed, epochs, batch_size, lr, weight_decay, alpha, margin, beta, variant, d_model, n_layers, n_heads);
        apply!(d_ff, max_len, d_sent, dropout, embedder_seed, format, select_by, beams, ablation_seeds);
        apply!(train, val, test, out_dir);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// JSONL data file; every example in it is decoded.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "kvqg")]
    format: String,
    #[arg(long, default_value_t = convqg_core::decode::DEFAULT_BEAMS)]
    beams: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Generation JSONL as written by `generate`.
    #[arg(long)]
    generated: PathBuf,
    /// Data JSONL whose questions serve as references.
    #[arg(long)]
    references: PathBuf,
    #[arg(long, default_value = "kvqg")]
    format: String,
    /// Also write the report here; it always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Alpha values to try; defaults to 0.2,0.5,0.8.
    #[arg(long, value_delimiter = ',')]
    alpha_grid: Option<Vec<f64>>,
    /// Beta schedules to try; defaults to 10,100,geometric10.
    #[arg(long, value_delimiter = ',')]
    beta_grid: Option<Vec<BetaSchedule>>,
    /// Margins to try; defaults to 0.2,0.5,0.8.
    #[arg(long, value_delimiter = ',')]
    margin_grid: Option<Vec<f64>>,
}

#[derive(Args)]
struct PreferenceArgs {
    #[arg(long)]
    records: PathBuf,
    #[arg(long, default_value_t = 5)]
    bins: usize,
    /// Also write the CSV here; it always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = Dataset::load(cfg)?;
    eprintln!("data: {} train, {} val, {} test", data.train.len(), data.val.len(), data.test.len());
    Ok(data)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = WorldConfig {
        constraint: match a.constraint {
            ConstraintKind::Triplet => WorldConstraint::Triplet,
            ConstraintKind::Answer => WorldConstraint::Answer,
        },
        ..WorldConfig::default()
    };
    let examples = generate_world_with(a.seed, a.scenes, a.ontology, &cfg)?;
    create_dir(&a.out)?;
    let mut counts = serde_json::Map::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let part: Vec<_> = examples.iter().filter(|e| e.split == split).cloned().collect();
        write_jsonl(a.out.join(format!("{}.jsonl", split.as_str())), &part)?;
        counts.insert(split.as_str().into(), part.len().into());
    }
    let (train, val, test) = split_sizes(a.scenes);
    let manifest = serde_json::json!({
        "seed": a.seed,
        "scenes": a.scenes,
        "ontology": a.ontology,
        "format": match a.constraint {
            ConstraintKind::Triplet => "kvqg",
            ConstraintKind::Answer => "vqa",
        },
        "scene_split": {"train": train, "val": val, "test": test},
        "examples": counts,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&a.out.join("manifest.json"), text + "\n")?;
    eprintln!("wrote {} examples to {}", examples.len(), a.out.display());
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    cfg.out_dir.as_deref().ok_or_else(|| Error::Config("no output directory (set out_dir or --out-dir)".into()))
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let dir = out_dir(&cfg)?;
    let data = load_data(&cfg)?;
    create_dir(dir)?;
    let t = train::train(&cfg, &data, Some(dir))?;
    for e in &t.epochs {
        println!("{}", serde_json::to_string(e).expect("summary serializes"));
    }
    eprintln!("best epoch {}; checkpoints in {}", t.best_epoch, dir.display());
    Ok(())
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let (params, meta) = checkpoint::load_with_meta(&a.checkpoint)?;
    let examples = ingest_jsonl(&a.data, &a.format)?;
    let gens = train::generate_all(&meta.model, &params, &meta.vocab, &examples, a.beams)?;
    train::write_generations(&a.out, &gens)?;
    eprintln!("wrote {} generations to {}", gens.len(), a.out.display());
    Ok(())
}

fn report_json(m: &MetricsReport) -> String {
    serde_json::to_string_pretty(m).expect("report serializes") + "\n"
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let gens = train::read_generations(&a.generated)?;
    let refs = train::references(&ingest_jsonl(&a.references, &a.format)?);
    let text = report_json(&train::score(&gens, &refs)?);
    if let Some(p) = &a.out {
        write(p, &text)?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_ablate(a: &RunArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let data = load_data(&cfg)?;
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
    }
    let ab = train::ablate(&cfg, &data, cfg.out_dir.as_deref(), |r| {
        eprintln!("{} seed {}: bleu4 {:.4}", r.variant, r.seed, r.metrics.bleu4)
    })?;
    let csv = ab.csv();
    if let Some(dir) = &cfg.out_dir {
        write(&dir.join("ablation.csv"), &csv)?;
        let runs: String = ab.runs.iter().map(|r| serde_json::to_string(r).expect("run serializes") + "\n").collect();
        write(&dir.join("runs.jsonl"), runs)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = a.run.resolve()?;
    let d = SweepGrid::default();
    let grid = SweepGrid {
        alpha: a.alpha_grid.clone().unwrap_or(d.alpha),
        beta: a.beta_grid.clone().unwrap_or(d.beta),
        margin: a.margin_grid.clone().unwrap_or(d.margin),
    };
    // Reject bad settings before touching the data or the disk.
    train::sweep_settings(&cfg.loss(), &grid)?;
    let data = load_data(&cfg)?;
    if let Some(dir) = &cfg.out_dir {
        create_dir(dir)?;
    }
    let rows = train::sweep(&cfg, &grid, &data, cfg.out_dir.as_deref(), |s, m| eprintln!("{s}: bleu4 {:.4}", m.bleu4))?;
    let csv = train::sweep_csv(&rows);
    if let Some(dir) = &cfg.out_dir {
        write(&dir.join("sweep.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn cmd_preferences(a: &PreferenceArgs) -> Result<()> {
    let f = File::open(&a.records).map_err(|e| Error::io(&a.records, e))?;
    let h = preference_histogram(&parse_preferences(BufReader::new(f))?, a.bins)?;
    let mut csv = String::from("bin_low,bin_high,n_a,n_b,n_similar\n");
    for b in &h.bins {
        csv.push_str(&format!("{:.6},{:.6},{},{},{}\n", b.bin_low, b.bin_high, b.n_a, b.n_b, b.n_similar));
    }
    let t = &h.totals;
    csv.push_str(&format!("total,,{},{},{}\n", t.n_a, t.n_b, t.n_similar));
    if let Some(p) = &a.out {
        write(p, &csv)?;
    }
    print!("{csv}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::AnalyzePreferences(a) => cmd_preferences(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
