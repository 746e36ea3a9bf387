use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use attn_distill::attnmap::{extract_sheet, read_maps};
use attn_distill::config::{PipelineConfig, SynthConfig};
use attn_distill::evaluator::{evaluate_to_dir, load_masks, parse_thresholds, AlignMode};
use attn_distill::labels::{load_effective, write_records};
use attn_distill::llm::{label_patches, LabelerConfig, PatchSource, ProviderConfig, ResponseCache};
use attn_distill::model::Checkpoint;
use attn_distill::pipeline::{run_pipeline, write_synthetic, StageState};
use attn_distill::tiler::{self, ingest_sheet, mask_file_name, read_manifest, read_manifests};
use attn_distill::trainer::{load_dataset, train};
use attn_distill::{ClassName, Error, Result, SheetId};
use attn_distill_review::ReviewConfig;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "attn-distill", version, about = "Coarse-to-fine annotation of scanned map sheets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML config; its sections supply defaults that flags override.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (output file for `label`: `<out>/labels.jsonl`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sheets with ground-truth masks and a legend.
    Synth {
        #[arg(long)]
        sheets: Option<usize>,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Cut a sheet raster into patches and write its manifest.
    Tile {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sheet: String,
        #[arg(long)]
        size: Option<usize>,
    },
    /// Normalise a ground-truth mask raster to a binary `{sheet}_{class}.png`.
    TileMask {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        sheet: String,
        #[arg(long)]
        class: ClassName,
        /// Sheet raster the mask must match in size.
        #[arg(long)]
        like: Option<PathBuf>,
    },
    /// Ask the vision LLM about every patch of the given manifests.
    Label {
        #[arg(long, required = true, num_args = 1..)]
        manifest: Vec<PathBuf>,
        #[arg(long)]
        legend: Option<PathBuf>,
        #[arg(long, value_enum)]
        provider: Option<ProviderKind>,
        /// Ground-truth mask directory for the oracle provider.
        #[arg(long)]
        masks: Option<PathBuf>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        #[arg(long)]
        cache: Option<PathBuf>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Serve the label review API.
    ServeReview {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        /// Attention map root (one directory per class) for overlays.
        #[arg(long)]
        maps: Option<PathBuf>,
        /// Built UI assets to serve alongside the API.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = attn_distill_review::DEFAULT_UI_ORIGIN)]
        cors_origin: String,
    },
    /// Train one class's classifier from effective labels.
    Train {
        #[arg(long)]
        class: ClassName,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        warmup: Option<usize>,
        #[arg(long)]
        drop_p: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Only use patches of these sheets.
        #[arg(long, num_args = 1..)]
        sheets: Vec<String>,
    },
    /// Write attention maps and a mosaic for every patch of a manifest directory.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patches: PathBuf,
        /// Only these sheets; all manifests in `--patches` otherwise.
        #[arg(long, num_args = 1..)]
        sheets: Vec<String>,
        /// Probability gate; `none` keeps every map.
        #[arg(long)]
        gate: Option<String>,
    },
    /// Score attention maps against ground truth over a threshold sweep.
    Evaluate {
        #[arg(long)]
        attn: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        class: ClassName,
        #[arg(long)]
        thresholds: Option<String>,
    },
    /// Run synth → tile → label → train → extract → evaluate from a config file.
    Pipeline,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProviderKind {
    Openai,
    Oracle,
    Replay,
}

fn config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(p) => PipelineConfig::read(p)?,
        None => attn_distill::config::parse_toml("")?,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::InvalidArgument("--out is required".into()))
}

fn sheet_filter(sheets: &[String]) -> Result<Vec<SheetId>> {
    sheets.iter().map(|s| SheetId::new(s.as_str())).collect()
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    let mut cfg = config(common)?;
    match cli.command {
        Command::Synth { sheets, size } => {
            let mut s = cfg.synth.clone().unwrap_or_else(SynthConfig::default);
            if let Some(n) = sheets {
                s.sheets = n;
            }
            if let Some(px) = size {
                s.size_px = px;
            }
            let out = out_dir(common)?;
            let ids = write_synthetic(&s, cfg.seed, cfg.tiling.patch_px, out)?;
            println!("wrote {} sheets to {}", ids.len(), out.display());
        }
        Command::Tile { input, sheet, size } => {
            let out = out_dir(common)?;
            let t = ingest_sheet(&input, &SheetId::new(sheet)?, size.unwrap_or(cfg.tiling.patch_px), out)?;
            for w in &t.warnings {
                eprintln!("warning: {w}");
            }
            println!("{} patches, manifest {}", t.entries.len(), t.manifest_path.display());
        }
        Command::TileMask { input, sheet, class, like } => {
            let out = out_dir(common)?;
            let sheet = SheetId::new(sheet)?;
            let expected = match like {
                Some(p) => {
                    let r = tiler::read_rgb(&p)?;
                    Some((r.height() as usize, r.width() as usize))
                }
                None => None,
            };
            let mask = tiler::ingest_mask(&input, &sheet, class, expected)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            let path = out.join(mask_file_name(&sheet, class));
            tiler::save_mask(&mask, &path)?;
            println!("{}", path.display());
        }
        Command::Label {
            manifest,
            legend,
            provider,
            masks,
            model,
            endpoint,
            cache,
            concurrency,
        } => {
            let out = out_dir(common)?;
            let legend = legend
                .or(cfg.label.legend.clone())
                .ok_or_else(|| Error::InvalidArgument("--legend is required".into()))?;
            let provider_cfg = match provider {
                None => cfg
                    .label
                    .provider
                    .clone()
                    .ok_or_else(|| Error::InvalidArgument("--provider is required".into()))?,
                Some(ProviderKind::Replay) => ProviderConfig::Replay {},
                Some(ProviderKind::Oracle) => ProviderConfig::Oracle {
                    masks_dir: masks.ok_or_else(|| Error::InvalidArgument("--masks is required for the oracle".into()))?,
                    min_fraction: 0.0,
                    flip_prob: 0.0,
                    seed: cfg.seed,
                    tile_px: cfg.tiling.patch_px,
                },
                Some(ProviderKind::Openai) => {
                    let mut p: ProviderConfig = attn_distill::config::parse_toml("kind = \"openai\"")?;
                    if let ProviderConfig::Openai { endpoint: e, model: m, .. } = &mut p {
                        if let Some(v) = endpoint {
                            *e = v;
                        }
                        if let Some(v) = model {
                            *m = v;
                        }
                    }
                    p
                }
            };
            let mut requests: LabelerConfig = cfg.label.requests.clone();
            if let Some(c) = concurrency {
                requests.concurrency = c;
            }
            let mut sources = Vec::new();
            for m in &manifest {
                let dir = m.parent().unwrap_or(Path::new(".")).to_path_buf();
                for entry in read_manifest(m)? {
                    sources.push(PatchSource { entry, dir: dir.clone() });
                }
            }
            let cache = ResponseCache::open(&cache.unwrap_or_else(|| out.join("cache")))?;
            let provider = provider_cfg.build()?;
            let legend = tiler::read_rgb(&legend)?;
            let res = label_patches(&sources, &legend, provider.as_ref(), &cache, &requests)?;
            let path = out.join("labels.jsonl");
            write_records(&path, &res.records)?;
            println!(
                "{} patches: {} provider calls, {} cache hits, {} unlabeled; wrote {}",
                sources.len(),
                res.provider_calls,
                res.cache_hits,
                res.failures.len(),
                path.display()
            );
        }
        Command::ServeReview {
            labels,
            patches,
            maps,
            static_dir,
            port,
            host,
            cors_origin,
        } => {
            let addr: SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::InvalidArgument(format!("bad address: {e}")))?;
            let review = ReviewConfig {
                maps,
                static_dir,
                cors_origin,
                overlay_alpha: cfg.extract.overlay_alpha,
                ..ReviewConfig::new(labels, patches)
            };
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::io("tokio runtime", e))?;
            println!("serving on http://{addr}");
            rt.block_on(attn_distill_review::serve(review, addr))?;
        }
        Command::Train {
            class,
            labels,
            patches,
            epochs,
            lr,
            warmup,
            drop_p,
            gamma,
            alpha,
            batch_size,
            sheets,
        } => {
            let out = out_dir(common)?;
            let t = &mut cfg.train;
            t.seed = cfg.seed;
            if let Some(v) = epochs {
                t.epochs = v;
            }
            if let Some(v) = lr {
                t.lr = v;
            }
            if let Some(v) = warmup {
                t.warmup_epochs = v;
            }
            if let Some(v) = drop_p {
                t.model.drop_p = v;
            }
            if let Some(v) = gamma {
                t.gamma = v;
            }
            if let Some(v) = alpha {
                t.alpha = v;
            }
            if let Some(v) = batch_size {
                t.batch_size = v;
            }
            let keep = sheet_filter(&sheets)?;
            let labels: Vec<_> = load_effective(&labels)?
                .into_iter()
                .filter(|l| keep.is_empty() || keep.contains(&l.patch.sheet))
                .collect();
            let data = load_dataset(&labels, &patches, class)?;
            let res = train(&data, class, t, out)?;
            println!(
                "best epoch {} → {}; last → {}; metrics {}",
                res.best_epoch,
                res.best_path.display(),
                res.last_path.display(),
                res.metrics_path.display()
            );
        }
        Command::Extract {
            checkpoint,
            patches,
            sheets,
            gate,
        } => {
            let out = out_dir(common)?;
            if let Some(g) = gate {
                cfg.extract.gate = match g.as_str() {
                    "none" => None,
                    v => Some(v.parse().map_err(|_| Error::InvalidArgument(format!("bad --gate {v:?}")))?),
                };
            }
            let ckpt = Checkpoint::load(&checkpoint)?;
            let class = ckpt.meta.class_name;
            let clf = ckpt.classifier();
            let keep = sheet_filter(&sheets)?;
            let mut written = 0;
            for (_, entries) in read_manifests(&patches)? {
                let Some(first) = entries.first() else { continue };
                if !keep.is_empty() && !keep.contains(&first.patch_id.sheet) {
                    continue;
                }
                let r = extract_sheet(&entries, &patches, &clf, class, &cfg.extract, out)?;
                for (id, why) in &r.skipped {
                    eprintln!("warning: skipped {id}: {why}");
                }
                written += r.maps.len();
            }
            println!("{written} {class} maps in {}", out.display());
        }
        Command::Evaluate {
            attn,
            gt,
            class,
            thresholds,
        } => {
            let out = out_dir(common)?;
            let thresholds = parse_thresholds(thresholds.as_deref().unwrap_or(&cfg.evaluate.thresholds))?;
            let maps: Vec<_> = read_maps(&attn, class)?.into_iter().map(|m| m.map).collect();
            if maps.is_empty() {
                return Err(Error::NotFound(format!("no {class} maps in {}", attn.display())));
            }
            let masks = load_masks(&gt, &maps, class)?;
            let reports = evaluate_to_dir(&maps, &masks, class, &thresholds, cfg.evaluate.overlay_alpha, out)?;
            for r in reports.iter().filter(|r| r.mode == AlignMode::DownSampled) {
                println!(
                    "σ={:<4} IoU {:.3}  precision {:.3}  recall {:.3}",
                    r.threshold, r.iou, r.precision, r.recall
                );
            }
            println!("wrote {}", out.join("report.csv").display());
        }
        Command::Pipeline => {
            if common.config.is_none() {
                return Err(Error::InvalidArgument("pipeline needs --config".into()));
            }
            cfg.validate()?;
            let out = out_dir(common)?;
            let run = run_pipeline(&cfg, out)?;
            for s in &run.stages {
                let state = match s.state {
                    StageState::Ran => "ran",
                    StageState::UpToDate => "up to date",
                    StageState::NotConfigured => "not configured",
                };
                println!("{:<9} {state}", s.name);
            }
            println!("report: {}", run.report_csv.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
