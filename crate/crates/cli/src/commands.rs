use std::path::{Path, PathBuf};
use std::sync::Arc;

use icbench_client::Client;
use icbench_core::api::{LeaderboardRequest, ReportRequest, SplitRequest};
use icbench_core::dataset::{self, Split};
use icbench_core::gateway::{Gateway, GatewayMode, MockBackend};
use icbench_core::head::Conditioning;
use icbench_core::pipeline::{self, BenchConfig};
use icbench_core::report::{self, MetricScore};
use icbench_core::subjective::{self, MosOutput};
use icbench_core::synth::{self, CorpusSpec, RatingSim};
use icbench_core::jsonl;
use icbench_service::clock::SystemClock;
use icbench_service::{AppState, Study, StudyConfig};
use serde::Serialize;

use crate::error::CliError;
use crate::{Cli, Command, Global, Mode};

type Result<T> = std::result::Result<T, CliError>;

const HISTOGRAM_BINS: usize = 20;

pub async fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::Ingest { captions, out } => ingest(&captions, out.as_deref()),
        Command::Split { captions, out, ratios } => split(g, &captions, &out, &ratios).await,
        Command::Mos {
            ratings,
            out,
            screening,
            captions,
            histogram,
            by_category,
        } => mos(g, &ratings, &out, screening, captions.as_deref(), histogram.as_deref(), by_category.as_deref()).await,
        Command::Reconstruct { captions, out_dir } => {
            let samples = dataset::load_dataset(&captions)?;
            let gw = gateway(&config(g)?)?;
            mkdir(&out_dir)?;
            let recon = pipeline::reconstruct_all(&gw, &samples, &out_dir).await?;
            println!("{} reconstructions in {} ({} backend calls)", recon.len(), out_dir.display(), gw.backend_calls());
            Ok(())
        }
        Command::Extract {
            captions,
            images_root,
            recon_dir,
            out,
        } => extract(g, &captions, &images_root, &recon_dir, &out).await,
        Command::Train {
            captions,
            mos,
            images_root,
            out_dir,
        } => train(g, &captions, &mos, &images_root, &out_dir).await,
        Command::Score {
            captions,
            images_root,
            checkpoint,
            out,
            work_dir,
        } => {
            let cfg = config(g)?;
            let samples = dataset::load_dataset(&captions)?;
            let gw = gateway(&cfg)?;
            let work = work_dir.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
            let scores = pipeline::run_score(&gw, &samples, &images_root, &checkpoint, &work).await?;
            jsonl::write(&out, &scores)?;
            println!("{} scores written to {}", scores.len(), out.display());
            Ok(())
        }
        Command::Report {
            scores,
            mos,
            captions,
            csv,
            json,
        } => {
            let req = ReportRequest {
                scores: report::load_scores(&scores)?,
                mos: subjective::load_mos(&mos)?,
                captions: captions.as_deref().map(dataset::load_dataset).transpose()?,
            };
            let resp = match client(g)? {
                Some(c) => c.report(&req).await?,
                None => req.run()?,
            };
            if let Some(p) = csv {
                write(&p, resp.csv.as_bytes())?;
            }
            if let Some(p) = json {
                write_json(&p, &resp.table)?;
            }
            print!("{}", resp.text);
            Ok(())
        }
        Command::Leaderboard {
            captions,
            mos,
            scores,
            subset,
            csv,
            json,
        } => {
            let req = LeaderboardRequest {
                captions: dataset::load_dataset(&captions)?,
                mos: mos.as_deref().map(subjective::load_mos).transpose()?,
                scores: scores.as_deref().map(report::load_scores).transpose()?,
                subset: subset.map(Into::into),
            };
            let resp = match client(g)? {
                Some(c) => c.leaderboard(&req).await?,
                None => req.run()?,
            };
            if let Some(p) = csv {
                if let Some(board) = resp.metric.as_ref().or(resp.human.as_ref()) {
                    write(&p, board.to_csv().as_bytes())?;
                }
            }
            if let Some(p) = json {
                write_json(&p, &resp)?;
            }
            print!("{}", resp.text);
            Ok(())
        }
        Command::Serve {
            addr,
            captions,
            journal,
            study,
            mock_models,
        } => serve(g, addr, captions, journal, study, mock_models).await,
        Command::Synth {
            out_dir,
            images,
            models,
            bad_raters,
        } => synthesize(g, &out_dir, images, models, bad_raters),
    }
}

/// Bench config with the global flags applied on top.
fn config(g: &Global) -> Result<BenchConfig> {
    let mut cfg = match &g.config {
        Some(p) => BenchConfig::load(p)?,
        None => BenchConfig::default(),
    };
    cfg.gateway.apply_env()?;
    if let Some(seed) = g.seed {
        cfg.split_seed = seed;
        cfg.train.seed = seed;
        cfg.gateway.seed = seed;
    }
    if let Some(dir) = &g.cache_dir {
        cfg.gateway.cache_dir = dir.clone();
    }
    match g.mode {
        Some(Mode::Remote) => cfg.gateway.mode = GatewayMode::Remote,
        Some(Mode::Mock) => cfg.gateway.mode = GatewayMode::Mock,
        None => {}
    }
    Ok(cfg)
}

fn gateway(cfg: &BenchConfig) -> Result<Arc<Gateway>> {
    Ok(Arc::new(Gateway::from_config(&cfg.gateway)?))
}

fn client(g: &Global) -> Result<Option<Client>> {
    g.server.as_deref().map(|url| Client::new(url).map_err(CliError::from)).transpose()
}

fn mkdir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| CliError::io(p, e))
}

fn write(p: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    jsonl::write_atomic(p, bytes).map_err(|e| CliError::io(p, e))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::internal(e.to_string()))?;
    text.push('\n');
    write(p, text.as_bytes())
}

fn ingest(captions: &Path, out: Option<&Path>) -> Result<()> {
    let samples = dataset::load_dataset(captions)?;
    let text = dataset::dataset_to_string(&samples);
    match out {
        Some(p) => {
            write(p, text.as_bytes())?;
            eprintln!("{} captions ok", samples.len());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn parse_ratios(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<u32> = s
        .split(':')
        .map(|p| p.trim().parse())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::validation(format!("ratios {s:?}: expected train:val:test integers")))?;
    <[u32; 3]>::try_from(parts).map_err(|_| CliError::validation(format!("ratios {s:?}: expected three parts")))
}

async fn split(g: &Global, captions: &Path, out: &Path, ratios: &str) -> Result<()> {
    let cfg = config(g)?;
    let req = SplitRequest {
        captions: dataset::load_dataset(captions)?,
        ratios: parse_ratios(ratios)?,
        seed: cfg.split_seed,
    };
    let plan = match client(g)? {
        Some(c) => c.split(&req).await?,
        None => dataset::split_dataset(&req.captions, req.ratios, req.seed)?,
    };
    for w in &plan.warnings {
        eprintln!("warning: {w}");
    }
    jsonl::write(out, &plan.assignments)?;
    let n = |s: Split| plan.assignments.iter().filter(|a| a.split == s).count();
    println!(
        "train {} / val {} / test {} captions; images {:?}",
        n(Split::Train),
        n(Split::Val),
        n(Split::Test),
        plan.image_counts
    );
    Ok(())
}

async fn mos(
    g: &Global,
    ratings: &Path,
    out: &Path,
    screening: Option<PathBuf>,
    captions: Option<&Path>,
    histogram: Option<&Path>,
    by_category: Option<&Path>,
) -> Result<()> {
    let records = subjective::load_ratings(ratings)?;
    let output: MosOutput = match client(g)? {
        Some(c) => c.mos(records).await?,
        None => subjective::mos_pipeline(&records)?,
    };
    jsonl::write(out, &output.entries)?;
    let screening = screening.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".screening.json");
        PathBuf::from(s)
    });
    write_json(&screening, &output.report)?;

    if let Some(cp) = captions {
        let samples = dataset::load_dataset(cp)?;
        if let Some(p) = histogram {
            write(p, report::mos_histogram_csv(&output.entries, &samples, HISTOGRAM_BINS)?.as_bytes())?;
        }
        if let Some(p) = by_category {
            write(p, report::category_comparison_csv(&output.entries, &samples)?.as_bytes())?;
        }
    }

    let excluded: Vec<String> = output
        .report
        .subjects
        .iter()
        .filter(|s| s.excluded)
        .map(|s| format!("{}/{}", s.subject_id, s.dimension))
        .collect();
    println!(
        "{} MOS entries; {} of {} subject-dimension pairs excluded{}; {:.2}% of ratings removed",
        output.entries.len(),
        excluded.len(),
        output.report.subjects.len(),
        if excluded.is_empty() { String::new() } else { format!(" ({})", excluded.join(", ")) },
        output.report.removed_fraction * 100.0
    );
    for o in &output.report.omitted {
        eprintln!("warning: {} {} has no ratings after screening", o.caption_id, o.dimension);
    }
    Ok(())
}

async fn extract(g: &Global, captions: &Path, images_root: &Path, recon_dir: &Path, out: &Path) -> Result<()> {
    let cfg = config(g)?;
    let samples = dataset::load_dataset(captions)?;
    let gw = gateway(&cfg)?;
    let recon = samples
        .iter()
        .map(|s| {
            let p = pipeline::recon_path(recon_dir, s);
            if p.is_file() {
                Ok((s.caption_id.clone(), p))
            } else {
                Err(CliError::validation(format!(
                    "{}: reconstruction for {} not found (run `icbench reconstruct` first)",
                    p.display(),
                    s.caption_id
                )))
            }
        })
        .collect::<Result<_>>()?;
    let conditioning: Conditioning = cfg.train.conditioning;
    let feats = pipeline::extract_all(&gw, &samples, images_root, &recon, conditioning).await?;
    jsonl::write(out, &feats)?;
    println!("{} feature vectors written to {}", feats.len(), out.display());
    Ok(())
}

async fn train(g: &Global, captions: &Path, mos: &Path, images_root: &Path, out_dir: &Path) -> Result<()> {
    let cfg = config(g)?;
    let samples = dataset::load_dataset(captions)?;
    let entries = subjective::load_mos(mos)?;
    let gw = gateway(&cfg)?;
    let art = pipeline::run_train(&cfg, &gw, &samples, &entries, images_root, out_dir).await?;
    write_json(&out_dir.join("config.json"), &cfg)?;
    let last = art
        .outcome
        .log
        .last()
        .map(|e| {
            e.val_srcc
                .iter()
                .map(|(d, v)| format!("{d} {}", v.map_or("n/a".into(), |v| format!("{v:.3}"))))
                .collect::<Vec<_>>()
                .join(", ")
        })
        .unwrap_or_default();
    println!(
        "trained on {} captions ({} val); final val SRCC: {last}; checkpoint {}",
        art.n_train,
        art.n_val,
        art.checkpoint.display()
    );
    Ok(())
}

async fn serve(
    g: &Global,
    addr: std::net::SocketAddr,
    captions: Option<PathBuf>,
    journal: Option<PathBuf>,
    study: Option<PathBuf>,
    mock_models: bool,
) -> Result<()> {
    let mut state = AppState::default();
    if let (Some(cp), Some(jp)) = (captions, journal) {
        let mut cfg = match study {
            Some(p) => StudyConfig::load(&p)?,
            None => StudyConfig::default(),
        };
        if let Some(seed) = g.seed {
            cfg.seed = seed;
        }
        let samples = dataset::load_dataset(&cp)?;
        let study = tokio::task::spawn_blocking(move || Study::open(cfg, samples, &jp, Arc::new(SystemClock)))
            .await
            .map_err(|e| CliError::internal(e.to_string()))??;
        state = state.with_study(study);
    }
    if mock_models {
        let cfg = config(g)?;
        state = state.with_mock_models(MockBackend::new(cfg.gateway.seed, cfg.gateway.feature_dim));
    }
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| CliError {
        exit: crate::error::Exit::Transport,
        message: format!("bind {addr}: {e}"),
    })?;
    let local = listener.local_addr().map_err(|e| CliError::internal(e.to_string()))?;
    eprintln!("listening on http://{local}");
    icbench_service::serve(listener, state)
        .await
        .map_err(|e| CliError::internal(format!("server: {e}")))
}

fn synthesize(g: &Global, out_dir: &Path, images: usize, models: usize, bad_raters: usize) -> Result<()> {
    if images == 0 || models == 0 {
        return Err(CliError::validation("--images and --models must be positive"));
    }
    let seed = g.seed.unwrap_or(0);
    let corpus = synth::corpus(&CorpusSpec {
        n_images: images,
        models: synth::planted_models(models),
        jitter: 0.05,
        seed,
    });
    let sim = RatingSim {
        bad_raters,
        bad_offset: 2.0,
        seed,
        ..RatingSim::default()
    };
    let ratings = synth::simulate_ratings(&corpus, &sim);
    mkdir(out_dir)?;
    let images_root = out_dir.join("images");
    synth::write_images(&images_root, &corpus.captions, seed).map_err(|e| CliError::io(&images_root, e))?;
    write(&out_dir.join("captions.jsonl"), dataset::dataset_to_string(&corpus.captions).as_bytes())?;
    jsonl::write(&out_dir.join("ratings.jsonl"), &ratings)?;
    let truth: Vec<MetricScore> = corpus
        .truth
        .iter()
        .map(|((caption_id, dimension), q)| MetricScore {
            caption_id: caption_id.clone(),
            dimension: *dimension,
            score: *q,
        })
        .collect();
    jsonl::write(&out_dir.join("truth.jsonl"), &truth)?;
    println!(
        "{} captions, {} ratings, images under {}",
        corpus.captions.len(),
        ratings.len(),
        images_root.display()
    );
    Ok(())
}
