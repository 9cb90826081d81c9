//! `pixelmod`: the command-line front end. Each subcommand runs the same
//! operation as the matching HTTP endpoint, directly against the store.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pixelmod::calibration::{
    bench, grid_search, render_table, synthetic_gt, write_grid_csv, write_grid_json, GridSpec, GroundTruthSet,
    SyntheticGtSpec, BENCH_MIN_SAMPLE, BENCH_RUNS,
};
use pixelmod::corpus_store::{read_manifest, SeedSetExport};
use pixelmod::hashing::HashKind;
use pixelmod::pipeline::{EmptyQueryPolicy, ImageData, ImageSource};
use pixelmod::stories::{moderation_report, ClusterParams, PolicyCategory};
use pixelmod::text_similarity::TextMetric;
use pixelmod_service::{serve, Config, ConfigOverrides, Shared};

#[derive(Parser)]
#[command(name = "pixelmod", version, about = "Find soft-moderation candidates for known misleading images")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Store directory; overrides the configuration.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Log debug output to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct PipelineFlags {
    #[arg(long)]
    hash_kind: Option<HashKind>,
    #[arg(long)]
    theta_visual: Option<u32>,
    /// e.g. jaccard_4, norm_levenshtein, jaro_winkler, metric_lcs.
    #[arg(long)]
    text_metric: Option<TextMetric>,
    #[arg(long)]
    theta_textual: Option<f64>,
    /// Keep visual matches of text-free seeds.
    #[arg(long)]
    reject_empty_seeds: bool,
    #[arg(long)]
    compare_raw_text: bool,
}

impl PipelineFlags {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            hash_kind: self.hash_kind,
            theta_visual: self.theta_visual,
            text_metric: self.text_metric,
            theta_textual: self.theta_textual,
            empty_query_policy: self.reject_empty_seeds.then_some(EmptyQueryPolicy::RejectAll),
            compare_raw_text: self.compare_raw_text.then_some(true),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a JSON-lines manifest.
    Ingest {
        manifest: PathBuf,
        /// OCR every image without a stored label.
        #[arg(long)]
        label: bool,
        /// Add the ingested images to this seed set.
        #[arg(long)]
        seed_set: Option<String>,
    },
    /// Query with one seed image.
    Query {
        /// Image file to use as the seed.
        #[arg(long, conflicts_with = "image_id", required_unless_present = "image_id")]
        image: Option<PathBuf>,
        /// Stored image to use as the seed.
        #[arg(long)]
        image_id: Option<String>,
        #[arg(long)]
        query_id: Option<String>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Query with every member of a seed set.
    BatchQuery {
        #[arg(long)]
        seed_set: String,
        /// Write candidates as JSON lines here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        pipeline: PipelineFlags,
    },
    /// Grid-search pipeline configurations against ground truth.
    Calibrate {
        /// CSV with query_id,candidate_id,is_relevant over labelled stored images.
        #[arg(long, required_unless_present = "synthetic")]
        gt: Option<PathBuf>,
        /// Use generated ground truth instead of the store.
        #[arg(long)]
        synthetic: bool,
        /// Grid as TOML; the default grid otherwise.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out_csv: Option<PathBuf>,
        #[arg(long)]
        out_json: Option<PathBuf>,
        /// Rows to print.
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Cluster images into stories and optionally report moderation rates.
    Stories {
        #[arg(long)]
        eps: Option<u32>,
        #[arg(long)]
        min_cluster_size: Option<usize>,
        /// Cluster the accepted candidates of this query instead of the whole store.
        #[arg(long)]
        query: Option<String>,
        /// CSV image_id,category; a story takes the highest-precedence category of its members.
        #[arg(long, requires = "flags")]
        categories: Option<PathBuf>,
        /// CSV image_id,moderated.
        #[arg(long, requires = "categories")]
        flags: Option<PathBuf>,
        /// Write the per-category report CSV here.
        #[arg(long, requires = "flags")]
        report: Option<PathBuf>,
    },
    /// Time hashing and OCR on stored images.
    Bench {
        #[arg(long, default_value_t = 100)]
        sample: usize,
        #[arg(long, default_value_t = BENCH_RUNS)]
        runs: usize,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Seed set maintenance.
    Seeds {
        #[command(subcommand)]
        action: SeedsAction,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Subcommand)]
enum SeedsAction {
    /// Print seed sets.
    List,
    /// Write a seed set with its hashes as JSON.
    Export { name: String, out: PathBuf },
    /// Recreate an exported seed set; images must already be stored.
    Import { file: PathBuf },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn print_json<T: serde::Serialize>(value: &T) -> CliResult {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{}", serde_json::to_string_pretty(value)?) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn read_pairs(path: &Path) -> Result<Vec<(String, String)>, Box<dyn std::error::Error>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        if row.len() != 2 {
            return Err(format!("{}: expected 2 columns, got {}", path.display(), row.len()).into());
        }
        out.push((row[0].to_string(), row[1].to_string()));
    }
    Ok(out)
}

fn parse_bool(s: &str) -> Option<bool> {
    match s.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" => Some(true),
        "false" | "0" | "no" => Some(false),
        _ => None,
    }
}

async fn run(cli: Cli) -> CliResult {
    let mut config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(store) = cli.store {
        config.store = store;
    }
    if let Command::Calibrate { synthetic: true, .. } = &cli.command {
        return calibrate_synthetic(cli.command);
    }
    let shared = Shared::start(config.clone())?;
    match cli.command {
        Command::Ingest {
            manifest,
            label,
            seed_set,
        } => {
            let entries = read_manifest(&manifest)?;
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            print_json(&shared.ingest(&entries, &base, label, seed_set.as_deref())?)
        }
        Command::Query {
            image,
            image_id,
            query_id,
            pipeline,
        } => {
            let upload = image.map(std::fs::read).transpose()?;
            let config = pipeline.overrides().apply(&config.pipeline);
            let (set, result) = shared.query(query_id, image_id.as_deref(), upload, config)?;
            print_json(&serde_json::json!({ "query": set.query, "candidates": result.candidates, "report": result.report }))
        }
        Command::BatchQuery { seed_set, out, pipeline } => {
            let config = pipeline.overrides().apply(&config.pipeline);
            let id = format!("batch-cli-{}", pixelmod_service::state::now_ms());
            let set = shared.batch_query(&id, &seed_set, config)?;
            if let Some(out) = out {
                let mut w = BufWriter::new(File::create(&out)?);
                for c in &set.candidates {
                    serde_json::to_writer(&mut w, c)?;
                    w.write_all(b"\n")?;
                }
                w.flush()?;
            }
            let accepted = set.candidates.iter().filter(|c| c.decision.is_accepted()).count();
            print_json(&serde_json::json!({
                "query": set.query,
                "seed_set_version": set.seed_set_version,
                "candidates": set.candidates.len(),
                "accepted": accepted,
                "ocr_calls_made": set.ocr_calls_made,
                "seeds": set.seeds,
            }))
        }
        Command::Calibrate {
            gt,
            grid,
            out_csv,
            out_json,
            top,
            ..
        } => {
            let gt_path = gt.expect("clap requires --gt without --synthetic");
            let gt = GroundTruthSet::read_csv(File::open(&gt_path)?, gt_path.display().to_string())?;
            let spec = load_grid(grid.as_deref())?;
            let corpus = shared.with_store(|st| st.eval_corpus());
            let rows = grid_search(&spec, &gt, &corpus)?;
            finish_grid(&rows, out_csv, out_json, top)
        }
        Command::Stories {
            eps,
            min_cluster_size,
            query,
            categories,
            flags,
            report,
        } => {
            let params = ClusterParams {
                eps: eps.unwrap_or(config.stories.eps),
                min_cluster_size: min_cluster_size.unwrap_or(config.stories.min_cluster_size),
            };
            let mut snap = shared.rebuild_stories(params, query)?;
            if let (Some(categories), Some(flags)) = (categories, flags) {
                let mut by_image: HashMap<String, Vec<PolicyCategory>> = HashMap::new();
                for (id, cat) in read_pairs(&categories)? {
                    by_image.entry(id).or_default().push(cat.parse()?);
                }
                for story in &mut snap.stories {
                    let cats: Vec<PolicyCategory> = story
                        .members
                        .iter()
                        .flat_map(|m| by_image.get(m).into_iter().flatten().copied())
                        .collect();
                    story.category = PolicyCategory::resolve(&cats);
                }
                let mut flag_map = HashMap::new();
                for (id, v) in read_pairs(&flags)? {
                    let v = parse_bool(&v).ok_or_else(|| format!("{}: bad flag {v:?} for {id}", flags.display()))?;
                    flag_map.insert(id, v);
                }
                let table = moderation_report(&snap.stories, &flag_map)?;
                pixelmod::stories::apply_flags(&mut snap.stories, &flag_map)?;
                match report {
                    Some(path) => table.write_csv(File::create(path)?)?,
                    None => eprint!("{}", table.to_csv_string()),
                }
            }
            print_json(&snap)
        }
        Command::Bench { sample, runs, json } => {
            if sample < BENCH_MIN_SAMPLE {
                return Err(format!("--sample must be at least {BENCH_MIN_SAMPLE}").into());
            }
            let images: Vec<ImageData> = shared.with_store(|st| {
                st.records()
                    .take(sample)
                    .map(|r| st.load(&r.image_id))
                    .collect::<Result<_, _>>()
            })?;
            let provider = config.ocr.build()?;
            let report = bench(&config.pipeline, &images, provider.as_ref(), runs)?;
            print!("{}", render_table(&report));
            if let Some(path) = json {
                serde_json::to_writer_pretty(File::create(path)?, &report)?;
            }
            Ok(())
        }
        Command::Seeds { action } => match action {
            SeedsAction::List => print_json(&shared.with_store(|st| st.seed_sets().cloned().collect::<Vec<_>>())),
            SeedsAction::Export { name, out } => {
                let export = shared.with_store(|st| st.export_seed_set(&name))?;
                serde_json::to_writer_pretty(File::create(out)?, &export)?;
                Ok(())
            }
            SeedsAction::Import { file } => {
                let export: SeedSetExport = serde_json::from_reader(File::open(file)?)?;
                drop(shared);
                let mut store = pixelmod::corpus_store::CorpusStore::open(&config.store)?;
                print_json(&store.import_seed_set(&export)?)
            }
        },
        Command::Serve { bind } => {
            let bind = bind.unwrap_or_else(|| config.bind.clone());
            if shared.token.is_none() {
                tracing::warn!(env = %config.token_env, "no bearer token set; the API is open");
            }
            serve(shared, &bind).await?;
            Ok(())
        }
    }
}

fn load_grid(path: Option<&Path>) -> Result<GridSpec, Box<dyn std::error::Error>> {
    Ok(match path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
        None => GridSpec::default(),
    })
}

fn finish_grid(
    rows: &[pixelmod::calibration::GridRow],
    out_csv: Option<PathBuf>,
    out_json: Option<PathBuf>,
    top: usize,
) -> CliResult {
    if let Some(p) = out_csv {
        write_grid_csv(File::create(p)?, rows)?;
    }
    if let Some(p) = out_json {
        write_grid_json(File::create(p)?, rows)?;
    }
    let mut stdout = std::io::stdout().lock();
    write_grid_csv(&mut stdout, &rows[..top.min(rows.len())])?;
    Ok(())
}

fn calibrate_synthetic(command: Command) -> CliResult {
    let Command::Calibrate {
        grid,
        out_csv,
        out_json,
        top,
        ..
    } = command
    else {
        unreachable!("called for calibrate only");
    };
    let synth = synthetic_gt(&SyntheticGtSpec::default());
    let spec = load_grid(grid.as_deref())?;
    let rows = grid_search(&spec, &synth.gt, &synth.corpus)?;
    finish_grid(&rows, out_csv, out_json, top)
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_max_level(if cli.verbose {
            tracing::Level::DEBUG
        } else {
            tracing::Level::INFO
        })
        .init();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
