use std::collections::BTreeSet;
use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use daem_core::attribution::{attribute, encode_png, render_heatmap, top_patches, Scale};
use daem_core::dataset::{generate_synthetic, make_folds_k, write_bag, FoldPlan, Label, SyntheticConfig, WsiBag};
use daem_core::metrics::threshold_report;
use daem_core::numerics::SeededRng;
use daem_core::tme::{cohort_analysis, slide_metrics, to_csv, RatioBasis, TmeConfig};
use daem_core::trainer::{run_cv, score_split, train_fold, Checkpoint, Split};
use serde_json::json;

use crate::failure::{CliResult, Failure};
use crate::workspace::{
    ensure_thumbnail, load_checkpoint, load_config, load_thumbnail, read_json, scan_cohort, write_json, IndexEntry,
    SlideEntry, DATA_DIR_ENV, INDEX_FILE, THUMBNAIL_DOWNSAMPLE,
};

#[derive(Debug, Parser)]
#[command(name = "daem", version, about = "STAS prediction from slide feature bags")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitKind {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScaleArg {
    #[value(name = "20x")]
    X20,
    #[value(name = "10x")]
    X10,
}

impl From<ScaleArg> for Scale {
    fn from(s: ScaleArg) -> Scale {
        match s {
            ScaleArg::X20 => Scale::X20,
            ScaleArg::X10 => Scale::X10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BasisArg {
    Count,
    Area,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate every slide under DIR, write missing thumbnails and DIR/index.json.
    Ingest { dir: PathBuf },
    /// Write a separable synthetic cohort (one slide directory per bag).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 20)]
        patients: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "syn")]
        prefix: String,
    },
    /// Patient-grouped, stratified fold assignment.
    Fold {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on all folds but one and save a checkpoint.
    Train {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validation: one checkpoint per fold plus a summary with mean and SEM.
    Cv {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// STAS probability and label of one bag.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bag: PathBuf,
    },
    /// Threshold and ranking metrics over a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: SplitKind,
        /// Required unless `--split all`.
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention heatmap PNG, with a JSON score sidecar at OUT.json.
    Heatmap {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        bag: PathBuf,
        #[arg(long, value_enum)]
        scale: ScaleArg,
        #[arg(long)]
        out: PathBuf,
        /// Patches per tier in the sidecar's high/middle/low lists.
        #[arg(long, default_value_t = 4)]
        top: usize,
    },
    /// Per-slide microenvironment indicators and cohort tests.
    Tme {
        #[arg(long)]
        cohort: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "count")]
        ratio_basis: BasisArg,
    },
    /// Local HTTP service for the measurement viewer.
    Serve {
        #[arg(long, env = DATA_DIR_ENV)]
        data: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[arg(long, default_value_t = 2)]
        workers: usize,
    },
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Ingest { dir } => ingest(&dir, out),
        Command::Synth {
            out: dir,
            patients,
            seed,
            prefix,
        } => synth(&dir, patients, seed, &prefix, out),
        Command::Fold {
            data,
            seed,
            folds,
            out: path,
        } => {
            let entries = scan_cohort(&data)?;
            let metas: Vec<_> = entries.iter().map(|e| e.bag.meta()).collect();
            let plan = make_folds_k(&metas, seed, folds)?;
            write_json(&path, &plan)?;
            emit(out, &json!({ "plan": path, "slides": plan.assignments.len(), "folds": plan.num_folds }))
        }
        Command::Train {
            data,
            plan,
            fold,
            config,
            out: path,
        } => train(&data, &plan, fold, config.as_deref(), &path, out),
        Command::Cv {
            data,
            plan,
            config,
            out: dir,
        } => {
            let cfg = load_config(config.as_deref())?;
            let plan: FoldPlan = read_json(&plan)?;
            let bags: Vec<WsiBag> = scan_cohort(&data)?.into_iter().map(|e| e.bag).collect();
            std::fs::create_dir_all(&dir).map_err(|e| Failure::io(&dir, e))?;
            let res = run_cv(&bags, &plan, &cfg, Some(&dir))?;
            write_json(&dir.join("cv.json"), &res)?;
            emit(out, &json!({ "folds": res.folds.len(), "summary": res.summary }))
        }
        Command::Predict { ckpt, bag } => {
            let (c, _) = load_checkpoint(&ckpt)?;
            let bag = daem_core::dataset::load_bag(&bag)?;
            let split = Split::new(std::slice::from_ref(&bag), c.config.model.knn_k)?;
            let p = score_split(c.state.inference_params(), &c.config.model, &split)?[0];
            let label = if p >= c.config.threshold { Label::Stas } else { Label::NonStas };
            emit(out, &json!({ "wsi_id": bag.wsi_id, "probability": p, "label": label }))
        }
        Command::Eval {
            ckpt,
            data,
            split,
            plan,
            fold,
            out: path,
        } => eval(&ckpt, &data, split, plan.as_deref(), fold, path.as_deref(), out),
        Command::Heatmap {
            ckpt,
            bag,
            scale,
            out: path,
            top,
        } => heatmap(&ckpt, &bag, scale.into(), &path, top, out),
        Command::Tme {
            cohort,
            out: path,
            report,
            ratio_basis,
        } => {
            let cfg = TmeConfig {
                ratio_basis: match ratio_basis {
                    BasisArg::Count => RatioBasis::Count,
                    BasisArg::Area => RatioBasis::NucleusArea,
                },
                ..TmeConfig::default()
            };
            let bags: Vec<WsiBag> = scan_cohort(&cohort)?.into_iter().map(|e| e.bag).collect();
            let rows = slide_metrics(&bags, &cfg)?;
            let csv = to_csv(&rows);
            let rep = cohort_analysis(&rows)?;
            if let Some(r) = &report {
                write_json(r, &rep)?;
            }
            match path {
                Some(p) => {
                    std::fs::write(&p, csv).map_err(|e| Failure::io(&p, e))?;
                    emit(out, &json!({ "table": p, "slides": rows.len(), "report": report }))
                }
                None => out.write_all(csv.as_bytes()).map_err(|e| Failure::Other(e.to_string())),
            }
        }
        Command::Serve {
            data,
            ckpt,
            port,
            host,
            workers,
        } => {
            let state = crate::server::AppState::load(&data, ckpt.as_deref(), workers)?;
            let addr = SocketAddr::new(host, port);
            let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Other(e.to_string()))?;
            rt.block_on(crate::server::serve(state, addr))
        }
    }
}

fn emit(out: &mut dyn Write, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Other(e.to_string()))?;
    writeln!(out, "{text}").map_err(|e| Failure::Other(e.to_string()))
}

fn ingest(dir: &Path, out: &mut dyn Write) -> CliResult<()> {
    let entries = scan_cohort(dir)?;
    if entries.is_empty() {
        return Err(Failure::Validation(format!("{}: no slide manifests found", dir.display())));
    }
    let mut written = 0;
    for e in &entries {
        written += ensure_thumbnail(e)? as usize;
    }
    let index: Vec<IndexEntry> = entries.iter().map(|e| IndexEntry::new(dir, e)).collect();
    write_json(&dir.join(INDEX_FILE), &index)?;
    let patients: BTreeSet<&str> = entries.iter().map(|e| e.bag.patient_id.as_str()).collect();
    emit(
        out,
        &json!({ "slides": entries.len(), "patients": patients.len(), "thumbnails_written": written }),
    )
}

fn synth(dir: &Path, patients: usize, seed: u64, prefix: &str, out: &mut dyn Write) -> CliResult<()> {
    let cfg = SyntheticConfig {
        id_prefix: prefix.to_string(),
        ..SyntheticConfig::default()
    };
    let cohort = generate_synthetic(patients, &cfg, &mut SeededRng::new(seed))?;
    for bag in &cohort.bags {
        let entry = SlideEntry {
            dir: dir.join(&bag.wsi_id),
            bag: bag.clone(),
        };
        write_bag(&entry.dir, bag)?;
        ensure_thumbnail(&entry)?;
    }
    emit(out, &json!({ "slides": cohort.bags.len(), "out": dir }))
}

fn pick<'a>(entries: &'a [SlideEntry], ids: &[String]) -> Vec<&'a WsiBag> {
    let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
    entries.iter().filter(|e| wanted.contains(e.bag.wsi_id.as_str())).map(|e| &e.bag).collect()
}

fn check_fold(plan: &FoldPlan, fold: usize, plan_path: &Path) -> CliResult<()> {
    if fold >= plan.num_folds {
        return Err(Failure::Validation(format!(
            "{}: fold {fold} out of range (plan has {})",
            plan_path.display(),
            plan.num_folds
        )));
    }
    Ok(())
}

fn train(data: &Path, plan_path: &Path, fold: usize, config: Option<&Path>, path: &Path, out: &mut dyn Write) -> CliResult<()> {
    let cfg = load_config(config)?;
    let plan: FoldPlan = read_json(plan_path)?;
    check_fold(&plan, fold, plan_path)?;
    let entries = scan_cohort(data)?;
    if let Some(e) = entries.iter().find(|e| plan.fold_of(&e.bag.wsi_id).is_none()) {
        return Err(Failure::Validation(format!(
            "{}: slide {} is not in the plan",
            plan_path.display(),
            e.bag.wsi_id
        )));
    }
    let train: Vec<WsiBag> = pick(&entries, &plan.training_ids(fold)).into_iter().cloned().collect();
    let val: Vec<WsiBag> = pick(&entries, &plan.validation_ids(fold)).into_iter().cloned().collect();
    if train.is_empty() || val.is_empty() {
        return Err(Failure::Validation(format!("fold {fold} has an empty training or validation split")));
    }
    let state = train_fold(&train, &val, &cfg)?;
    let best = state.best.as_ref().map(|b| (b.epoch, b.val_loss));
    Checkpoint::new(cfg, state).save(path)?;
    emit(
        out,
        &json!({ "checkpoint": path, "fold": fold, "train": train.len(), "val": val.len(),
                 "best_epoch": best.map(|b| b.0), "best_val_loss": best.map(|b| b.1) }),
    )
}

fn eval(
    ckpt: &Path,
    data: &Path,
    split: SplitKind,
    plan: Option<&Path>,
    fold: Option<usize>,
    path: Option<&Path>,
    out: &mut dyn Write,
) -> CliResult<()> {
    let (c, _) = load_checkpoint(ckpt)?;
    let entries = scan_cohort(data)?;
    let bags: Vec<&WsiBag> = match split {
        SplitKind::All => entries.iter().map(|e| &e.bag).collect(),
        SplitKind::Train | SplitKind::Val => {
            let (Some(plan_path), Some(fold)) = (plan, fold) else {
                return Err(Failure::Validation("--plan and --fold are required for train/val splits".into()));
            };
            let plan: FoldPlan = read_json(plan_path)?;
            check_fold(&plan, fold, plan_path)?;
            let ids = match split {
                SplitKind::Train => plan.training_ids(fold),
                _ => plan.validation_ids(fold),
            };
            pick(&entries, &ids)
        }
    };
    if bags.is_empty() {
        let name = split.to_possible_value().map_or_else(String::new, |v| v.get_name().to_string());
        return Err(Failure::Validation(format!("the {name} split is empty")));
    }
    let owned: Vec<WsiBag> = bags.into_iter().cloned().collect();
    let s = Split::new(&owned, c.config.model.knn_k)?;
    let probs = score_split(c.state.inference_params(), &c.config.model, &s)?;
    let labels: Vec<bool> = s.labels.iter().map(|l| *l == Label::Stas).collect();
    let report = threshold_report(&probs, &labels, c.config.threshold)?;
    if let Some(p) = path {
        write_json(p, &report)?;
    }
    emit(out, &serde_json::to_value(&report).map_err(|e| Failure::Other(e.to_string()))?)
}

fn heatmap(ckpt: &Path, bag_path: &Path, scale: Scale, path: &Path, top: usize, out: &mut dyn Write) -> CliResult<()> {
    let (c, _) = load_checkpoint(ckpt)?;
    let bag = daem_core::dataset::load_bag(bag_path)?;
    let entry = SlideEntry {
        dir: bag_dir(bag_path),
        bag,
    };
    let attr = attribute(&entry.bag, c.state.inference_params(), &c.config.model)?;
    let base = load_thumbnail(&entry)?;
    let map = attr.map(scale);
    let img = render_heatmap(map, Some(&base), THUMBNAIL_DOWNSAMPLE)?;
    std::fs::write(path, encode_png(&img)?).map_err(|e| Failure::io(path, e))?;
    let sidecar_path = PathBuf::from(format!("{}.json", path.display()));
    let sidecar = json!({
        "wsi_id": entry.bag.wsi_id,
        "scale": scale,
        "downsample": THUMBNAIL_DOWNSAMPLE,
        "stas_probability": attr.stas_probability,
        "map": map,
        "top": top_patches(map, top).ok(),
    });
    write_json(&sidecar_path, &sidecar)?;
    emit(out, &json!({ "png": path, "sidecar": sidecar_path, "stas_probability": attr.stas_probability }))
}

/// Slide directory for a path naming either the directory or its manifest.
fn bag_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}
