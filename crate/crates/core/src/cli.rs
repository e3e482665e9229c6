//! The four commands behind the `boxadapt` binary. Each takes already
//! parsed arguments, writes its artifacts under the output directory and
//! returns a short summary for the terminal.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::RunConfig;
use crate::detector::{detect_frames, Checkpoint};
use crate::error::{Error, Result};
use crate::eval::{
    au_iou_correlation, evaluate_detections, format_table, oracle_detections, write_diagnostics_csv, write_report_json,
    write_scatter_svg, APReport,
};
use crate::meanteacher::run_adaptation;
use crate::synthdata::{generate_split, load_dataset, write_dataset, DomainTag, Manifest, SceneFrame};
use crate::training::{eval_proposals, train_source};
use crate::uncertainty::AuEncoding;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const REPORT_FILE: &str = "report.json";
pub const DIAGNOSTICS_CSV: &str = "diagnostics.csv";
pub const DIAGNOSTICS_SVG: &str = "diagnostics.svg";

/// Flags shared by every command.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: PathBuf,
    pub threads: Option<usize>,
    /// Extra `key=value` config overrides.
    pub set: Vec<String>,
}

impl CommonArgs {
    /// File, then `--set` overrides, then the dedicated flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut overrides = self.set.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        if let Some(threads) = self.threads {
            overrides.push(format!("threads={threads}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Append-only JSON-lines log, flushed after every record.
pub struct JsonlWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl JsonlWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record).map_err(|e| Error::json(&self.path, e))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    config.echo(dir)
}

fn load_frames(dir: &Path) -> Result<Vec<SceneFrame>> {
    Ok(load_dataset(dir)?.frames)
}

fn frames_for(config: &RunConfig, domain: DomainTag, split: &str) -> usize {
    match (domain, split) {
        (DomainTag::Sim, _) => config.sim_frames,
        (DomainTag::Real, "test") => config.real_test_frames,
        (DomainTag::Real, _) => config.real_train_frames,
    }
}

pub fn cmd_gen_data(common: &CommonArgs, domain: DomainTag, frames: Option<usize>, split: &str) -> Result<Manifest> {
    let config = common.resolve()?;
    let count = frames.unwrap_or_else(|| frames_for(&config, domain, split));
    let domain_config = config.domain(domain);
    let data = generate_split(&domain_config, config.seed, split, count)?;
    prepare_out(&common.out, &config)?;
    write_dataset(&common.out, &domain_config, split, config.seed, &data)
}

pub fn cmd_train_source(common: &CommonArgs, data: &Path, epochs: Option<usize>, bf_au: bool) -> Result<String> {
    let mut config = common.resolve()?;
    if let Some(e) = epochs {
        config.source_epochs = e;
    }
    if bf_au {
        config.au_encoding = AuEncoding::Box;
    }
    let frames = load_frames(data)?;
    prepare_out(&common.out, &config)?;
    let mut log = JsonlWriter::create(&common.out.join(METRICS_FILE))?;
    let train_config = config.source_train()?;
    let outcome = train_source(&frames, &train_config, |m| log.write(m))?;
    Checkpoint::new(&outcome.params, train_config.roi.anchor, Some(&outcome.optimizer))
        .save(&common.out.join(CHECKPOINT_FILE))?;
    Ok(format!(
        "trained {} epochs on {} frames; kept epoch {}",
        outcome.metrics.len(),
        frames.len(),
        outcome.best_epoch
    ))
}

pub struct AdaptArgs {
    pub source: PathBuf,
    pub target: PathBuf,
    pub init: PathBuf,
    pub heldout: Option<PathBuf>,
    pub no_fl_na: bool,
    pub no_ol_na: bool,
    pub bf_au: bool,
    pub epochs: Option<usize>,
}

pub fn cmd_adapt(common: &CommonArgs, args: &AdaptArgs) -> Result<String> {
    let mut config = common.resolve()?;
    if args.no_fl_na {
        config.frame_level = false;
    }
    if args.no_ol_na {
        config.object_level = false;
    }
    if args.bf_au {
        config.au_encoding = AuEncoding::Box;
    }
    if let Some(e) = args.epochs {
        config.adapt_epochs = e;
    }
    if !args.init.exists() {
        return Err(Error::InvalidInput(format!("init checkpoint {} does not exist", args.init.display())));
    }
    let init = Checkpoint::load(&args.init)?.params()?;
    if init.encoding() != config.au_encoding {
        return Err(Error::Config(format!(
            "init checkpoint uses {:?} uncertainty but the run asks for {:?}; train the source model with the same encoding",
            init.encoding(),
            config.au_encoding
        )));
    }
    let source = load_frames(&args.source)?;
    let target = load_frames(&args.target)?;
    let heldout = match &args.heldout {
        Some(dir) => load_frames(dir)?,
        None => Vec::new(),
    };
    prepare_out(&common.out, &config)?;
    let adapt_config = config.adapt()?;
    let mut log = JsonlWriter::create(&common.out.join(METRICS_FILE))?;
    let outcome = run_adaptation(&source, &target, &heldout, &init, &adapt_config, |m| log.write(m))?;
    Checkpoint::new(&outcome.state.teacher, adapt_config.roi.anchor, Some(&outcome.optimizer))
        .save(&common.out.join(CHECKPOINT_FILE))?;
    Ok(format!(
        "adapted for {} epochs ({} student steps)",
        outcome.metrics.len(),
        outcome.state.iteration
    ))
}

/// Evaluates a checkpoint (or the ground-truth oracle) on a labeled split
/// and writes the report, diagnostics CSV and optional scatter plot.
pub fn cmd_eval(common: &CommonArgs, checkpoint: Option<&Path>, data: &Path, oracle: bool) -> Result<(APReport, String)> {
    let config = common.resolve()?;
    let dataset = load_dataset(data)?;
    let frames = dataset.frames;
    let roi = config.roi()?;
    let detections = if oracle {
        oracle_detections(&frames)
    } else {
        let path = checkpoint.ok_or_else(|| Error::InvalidArgument("eval needs --checkpoint unless --oracle".into()))?;
        if !path.exists() {
            return Err(Error::InvalidInput(format!("checkpoint {} does not exist", path.display())));
        }
        let params = Checkpoint::load(path)?.params()?;
        let proposals = eval_proposals(&frames, &config.proposals(), &roi, config.seed);
        detect_frames(&params, &frames, &proposals, &roi, config.seed)?
    };
    let name = format!("{}/{}", dataset.manifest.domain.as_str(), dataset.manifest.split);
    let report = evaluate_detections(&frames, &detections, &name, config.seed, &config.eval_options()?)?;
    if report.bev.mean.is_none() {
        return Err(Error::UndefinedAp);
    }
    prepare_out(&common.out, &config)?;
    write_report_json(&common.out.join(REPORT_FILE), &report)?;
    let mut summary = format_table(&report);
    match au_iou_correlation(&frames, &detections, config.diag_match_iou) {
        Ok(diag) => {
            write_diagnostics_csv(&common.out.join(DIAGNOSTICS_CSV), &diag)?;
            if config.emit_svg {
                write_scatter_svg(&common.out.join(DIAGNOSTICS_SVG), &diag)?;
            }
            summary.push_str(&format!(
                "AU diagnostics over {} matches: spearman(AU, IoU) = {:.3}, spearman(AU, distance) = {:.3}\n",
                diag.pairs.len(),
                diag.au_vs_iou.rho,
                diag.au_vs_distance.rho
            ));
        }
        Err(Error::InsufficientData { found, required }) => {
            log::warn!("skipping AU diagnostics: {found} matched pairs, need {required}");
        }
        Err(e) => return Err(e),
    }
    Ok((report, summary))
}
