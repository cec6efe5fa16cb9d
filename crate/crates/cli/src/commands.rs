//! Subcommand bodies. Each one reads its inputs, resolves its config, writes
//! its outputs under `--out` and finishes with the config snapshot.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use embryo_core::cohort::{build_dataset, read_events, read_manifest, split_dataset_with, write_manifest, EmbryoRecord};
use embryo_core::experiments::{
    clinic_holdout, compare_models, evaluate_cohorts, morphokinetic_report, subgroup_analysis, HoldoutConfig, ScoreMap,
    SubgroupSpec,
};
use embryo_core::morpho::baseline_score;
use embryo_core::score::{read_scores, score_map, write_scores, ScoredEmbryo};
use embryo_core::stats::{spearman, RocResult};
use embryo_core::synth::{generate_cohort, oracle_auc, read_truth, EVENTS_FILE, MANIFEST_FILE, TRUTH_FILE};
use embryo_net::checkpoint::{load_checkpoint, save_checkpoint};
use embryo_net::train::{init_seed, score_records, train, DirSource, LogEntry};
use embryo_net::{Network, Profile};

use crate::config::{Overrides, ResolvedConfig};
use crate::error::{io_err, must_exist, CliError, ErrorClass, Result};

pub const COHORT_DIR: &str = "cohort";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const SCORES_FILE: &str = "scores.jsonl";

/// Which part of an ingested dataset to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitPart {
    Train,
    Test,
    All,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(ErrorClass::Data, e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn abs(path: &Path) -> String {
    fs::canonicalize(path).unwrap_or_else(|_| path.to_owned()).display().to_string()
}

/// An ingested dataset: labeled records, split, and the cohort holding the
/// sequences.
struct Dataset {
    records: Vec<EmbryoRecord>,
    train_ids: std::collections::BTreeSet<String>,
    cohort: PathBuf,
}

impl Dataset {
    fn open(dir: &Path) -> Result<(Self, ResolvedConfig)> {
        must_exist(dir, ErrorClass::Io, "dataset directory")?;
        let upstream = ResolvedConfig::read_from_run(dir)?;
        let cohort = upstream
            .inputs
            .get("cohort")
            .map(PathBuf::from)
            .ok_or_else(|| CliError::new(ErrorClass::Provenance, format!("{} does not record its cohort", dir.display())))?;
        let records = read_manifest(&dir.join(DATASET_FILE))?;
        let split: embryo_core::cohort::DatasetSplit = {
            let path = dir.join(SPLIT_FILE);
            let text = fs::read_to_string(&path).map_err(io_err(&path))?;
            serde_json::from_str(&text).map_err(|e| CliError::new(ErrorClass::Data, format!("{}: {e}", path.display())))?
        };
        Ok((
            Self {
                records,
                train_ids: split.train_ids,
                cohort,
            },
            upstream,
        ))
    }

    fn part(&self, part: SplitPart) -> Vec<EmbryoRecord> {
        self.records
            .iter()
            .filter(|r| match part {
                SplitPart::All => true,
                SplitPart::Train => self.train_ids.contains(&r.embryo_id),
                SplitPart::Test => !self.train_ids.contains(&r.embryo_id),
            })
            .cloned()
            .collect()
    }

    fn source(&self) -> Result<DirSource> {
        Ok(DirSource::new(&self.cohort)?)
    }
}

pub fn synth(o: &Overrides, out: &Path) -> Result<()> {
    let cfg = ResolvedConfig::resolve("synth", o)?;
    create_out(out)?;
    let cohort = generate_cohort(&cfg.synth, &out.join(COHORT_DIR), &out.join(TRUTH_FILE))?;
    log::info!("{} embryos in {} clinics", cohort.records.len(), cfg.synth.num_clinics);
    cfg.write(out)
}

pub fn ingest(o: &Overrides, cohort: &Path, out: &Path) -> Result<()> {
    let mut cfg = ResolvedConfig::resolve("ingest", o)?;
    must_exist(cohort, ErrorClass::Io, "cohort directory")?;
    embryo_net::train::guard_truth(cohort)?;
    let embryos = read_manifest(&cohort.join(MANIFEST_FILE))?;
    let events = read_events(&cohort.join(EVENTS_FILE))?;
    let labeled = embryo_core::cohort::label_outcomes(&events, &embryos)?;
    let (dataset, report) = build_dataset(&labeled)?;
    let split = split_dataset_with(&dataset, cfg.ingest.train_fraction, cfg.ingest.seed, cfg.ingest.split_mode)?;
    create_out(out)?;
    write_manifest(&out.join(DATASET_FILE), &dataset)?;
    write_json(&out.join(SPLIT_FILE), &split)?;
    write_json(&out.join("dataset_report.json"), &report)?;
    write_text(&out.join("dataset_report.txt"), &format!("{report}\n"))?;
    log::info!("{report}; {} train / {} test", split.train_ids.len(), split.test_ids.len());
    cfg.inputs.insert("cohort".into(), abs(cohort));
    cfg.write(out)
}

pub fn train_cmd(o: &Overrides, data: &Path, out: &Path) -> Result<()> {
    let (dataset, _) = Dataset::open(data)?;
    let mut cfg = ResolvedConfig::resolve("train", o)?;
    cfg.inputs.insert("data".into(), abs(data));
    cfg.inputs.insert("cohort".into(), dataset.cohort.display().to_string());
    let run = cfg.run();
    let records = dataset.part(SplitPart::Train);
    let source = dataset.source()?;
    let mut net = Network::build(&run.network, init_seed(&run.train))?;
    log::info!(
        "training the {} profile ({} parameters) on {} embryos for {} steps",
        cfg.profile,
        net.param_count(),
        records.len(),
        run.train.total_batches
    );
    let mut window = Vec::new();
    let log = train(&mut net, &records, &source, &run, |e: &LogEntry| {
        window.push(e.loss_fh + e.loss_discard);
        if window.len() == 50 || e.step + 1 == run.train.total_batches {
            let mean = window.iter().sum::<f64>() / window.len() as f64;
            log::info!("step {} lr {:.3e} loss {mean:.4}", e.step + 1, e.lr);
            window.clear();
        }
    })?;
    create_out(out)?;
    let meta = serde_json::json!({ "train": run.train, "augmentation": run.augmentation });
    save_checkpoint(&out.join(CHECKPOINT_FILE), &mut net, log.len(), meta)?;
    embryo_core::jsonl::write(&out.join(TRAIN_LOG_FILE), &log)?;
    cfg.write(out)
}

/// Loads a checkpoint; an explicit `--profile` must agree with it.
fn open_checkpoint(path: &Path, profile: Option<Profile>) -> Result<Network> {
    if !path.is_file() {
        return Err(CliError::new(ErrorClass::MissingCheckpoint, format!("checkpoint {} not found", path.display())));
    }
    let (net, header) = load_checkpoint(path)?;
    if let Some(p) = profile {
        if p != header.network.profile {
            return Err(CliError::new(
                ErrorClass::IncompatibleProfile,
                format!("checkpoint {} holds a {} network, --profile asked for {p}", path.display(), header.network.profile),
            ));
        }
    }
    Ok(net)
}

fn scored_config(command: &str, o: &Overrides, net: &Network) -> Result<ResolvedConfig> {
    let o = Overrides {
        profile: Some(net.config().profile),
        ..o.clone()
    };
    let mut cfg = ResolvedConfig::resolve(command, &o)?;
    cfg.network = net.config().clone();
    Ok(cfg)
}

fn score_part(net: &Network, dataset: &Dataset, part: SplitPart) -> Result<(Vec<EmbryoRecord>, Vec<ScoredEmbryo>)> {
    let records = dataset.part(part);
    let scores = score_records(net, &records, &dataset.source()?)?;
    Ok((records, scores))
}

pub fn score(o: &Overrides, checkpoint: &Path, data: &Path, part: SplitPart, out: &Path) -> Result<()> {
    let net = open_checkpoint(checkpoint, o.profile)?;
    let (dataset, _) = Dataset::open(data)?;
    let mut cfg = scored_config("score", o, &net)?;
    let (_, scores) = score_part(&net, &dataset, part)?;
    create_out(out)?;
    write_scores(&out.join(SCORES_FILE), &scores)?;
    cfg.inputs.insert("checkpoint".into(), abs(checkpoint));
    cfg.inputs.insert("data".into(), abs(data));
    cfg.inputs.insert("split".into(), format!("{part:?}").to_lowercase());
    cfg.write(out)
}

/// Agreement of scores with the generator's latent viability.
#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub n: usize,
    pub spearman_latent_viability: f64,
    pub auc: f64,
    pub latent_viability_auc: f64,
}

pub fn eval(o: &Overrides, checkpoint: &Path, data: &Path, truth: Option<&Path>, out: &Path) -> Result<()> {
    let net = open_checkpoint(checkpoint, o.profile)?;
    let (dataset, _) = Dataset::open(data)?;
    let mut cfg = scored_config("eval", o, &net)?;
    let (records, scores) = score_part(&net, &dataset, SplitPart::Test)?;
    let map = score_map(&scores)?;
    let evaluation = evaluate_cohorts(&map, &records)?;
    create_out(out)?;
    write_scores(&out.join(SCORES_FILE), &scores)?;
    write_json(&out.join("evaluation.json"), &evaluation)?;
    write_text(&out.join("evaluation.txt"), &evaluation.to_string())?;
    export_roc(out, "roc_all", &map, records.iter())?;
    export_roc(out, "roc_kid", &map, records.iter().filter(|r| r.kid))?;
    print!("{evaluation}");
    if let Some(truth) = truth {
        let truths = read_truth(truth)?;
        let oracle = oracle_auc(&truths, &records, &map)?;
        let viability: std::collections::HashMap<&str, f64> =
            truths.iter().map(|t| (t.embryo_id.as_str(), t.latent_viability)).collect();
        let (s, v): (Vec<f64>, Vec<f64>) = scores
            .iter()
            .filter_map(|s| viability.get(s.embryo_id.as_str()).map(|&v| (s.fh_probability, v)))
            .unzip();
        let report = OracleReport {
            n: s.len(),
            spearman_latent_viability: spearman(&s, &v)?,
            auc: oracle.auc,
            latent_viability_auc: oracle.ceiling,
        };
        println!(
            "Synthetic ground truth: Spearman(score, latent viability) {:.4} over {} embryos; latent viability AUC {:.4}",
            report.spearman_latent_viability, report.n, report.latent_viability_auc
        );
        write_json(&out.join("oracle.json"), &report)?;
        cfg.inputs.insert("truth".into(), abs(truth));
    }
    cfg.inputs.insert("checkpoint".into(), abs(checkpoint));
    cfg.inputs.insert("data".into(), abs(data));
    cfg.write(out)
}

fn export_roc<'a>(out: &Path, name: &str, map: &ScoreMap, records: impl Iterator<Item = &'a EmbryoRecord>) -> Result<()> {
    let (s, l): (Vec<f64>, Vec<bool>) = records
        .filter(|r| r.is_labeled())
        .filter_map(|r| map.get(&r.embryo_id).map(|&p| (p, r.is_positive())))
        .unzip();
    match RocResult::compute(&s, &l) {
        Ok(roc) => write_text(&out.join(format!("{name}.tsv")), &roc.to_two_column()),
        Err(e) => {
            log::warn!("{name}: no ROC curve: {e}");
            Ok(())
        }
    }
}

/// Scores of a recorded scoring run plus the dataset it was scored from.
fn open_scores(dir: &Path, data: &Path) -> Result<(ScoreMap, Dataset)> {
    must_exist(dir, ErrorClass::Io, "scores directory")?;
    ResolvedConfig::read_from_run(dir)?;
    let (dataset, _) = Dataset::open(data)?;
    let scores = score_map(&read_scores(&dir.join(SCORES_FILE))?)?;
    Ok((scores, dataset))
}

/// Records that have a score.
fn scored(map: &ScoreMap, dataset: &Dataset) -> Vec<EmbryoRecord> {
    dataset.records.iter().filter(|r| map.contains_key(&r.embryo_id)).cloned().collect()
}

fn report_inputs(cfg: &mut ResolvedConfig, scores: &Path, data: &Path) {
    cfg.inputs.insert("scores".into(), abs(scores));
    cfg.inputs.insert("data".into(), abs(data));
}

pub fn subgroups(o: &Overrides, scores: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = ResolvedConfig::resolve("subgroups", o)?;
    let (map, dataset) = open_scores(scores, data)?;
    let records = scored(&map, &dataset);
    let table = subgroup_analysis(&map, &records, &SubgroupSpec::standard(), cfg.reports.alpha, cfg.reports.tail)?;
    create_out(out)?;
    write_json(&out.join("subgroups.json"), &table)?;
    write_text(&out.join("subgroups.txt"), &table.to_string())?;
    print!("{table}");
    report_inputs(&mut cfg, scores, data);
    cfg.write(out)
}

pub fn morpho(o: &Overrides, scores: &Path, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = ResolvedConfig::resolve("morpho", o)?;
    let (map, dataset) = open_scores(scores, data)?;
    let records = scored(&map, &dataset);
    let report = morphokinetic_report(&map, &records)?;
    create_out(out)?;
    write_json(&out.join("morpho.json"), &report)?;
    write_text(&out.join("morpho.txt"), &report.to_string())?;
    print!("{report}");
    report_inputs(&mut cfg, scores, data);
    cfg.write(out)
}

/// Compares the network scores with a second scoring run, or by default with
/// the rule-based morphokinetic baseline.
pub fn compare(o: &Overrides, scores: &Path, baseline: Option<&Path>, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = ResolvedConfig::resolve("compare", o)?;
    let (map_a, dataset) = open_scores(scores, data)?;
    let records = scored(&map_a, &dataset);
    let (label_b, map_b) = match baseline {
        Some(dir) => {
            let (m, _) = open_scores(dir, data)?;
            cfg.inputs.insert("baseline_scores".into(), abs(dir));
            ("baseline", m)
        }
        None => {
            let m: ScoreMap = records
                .iter()
                .filter_map(|r| r.annotations.as_ref().and_then(baseline_score).map(|s| (r.embryo_id.clone(), s)))
                .collect();
            ("rule-based", m)
        }
    };
    // the rule-based model only scores annotated embryos; compare on the
    // embryos both can score
    let map_a: ScoreMap = map_a.into_iter().filter(|(id, _)| map_b.contains_key(id)).collect();
    let records: Vec<EmbryoRecord> = records.into_iter().filter(|r| map_a.contains_key(&r.embryo_id)).collect();
    let report = compare_models("network", &map_a, label_b, &map_b, &records, cfg.reports.tail)?;
    create_out(out)?;
    write_json(&out.join("comparison.json"), &report)?;
    write_text(&out.join("comparison.txt"), &report.to_string())?;
    for c in &report.comparisons {
        write_text(&out.join(format!("roc_{}_network.tsv", c.cohort)), &c.roc_a.to_two_column())?;
        write_text(&out.join(format!("roc_{}_{}.tsv", c.cohort, label_b)), &c.roc_b.to_two_column())?;
    }
    print!("{report}");
    report_inputs(&mut cfg, scores, data);
    cfg.write(out)
}

/// Leave-one-clinic-out: one fresh network per eligible clinic, trained on
/// every other clinic's labeled embryos.
pub fn holdout(o: &Overrides, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = ResolvedConfig::resolve("holdout", o)?;
    let (dataset, _) = Dataset::open(data)?;
    let source = dataset.source()?;
    let run = cfg.run();
    let hc = HoldoutConfig {
        threshold_kid: cfg.reports.threshold_kid,
        alpha: cfg.reports.alpha,
        tail: cfg.reports.tail,
    };
    let report = clinic_holdout(
        &dataset.records,
        |fold, train_set, test| {
            log::info!("fold {}: training on {} embryos", fold.held_out, train_set.len());
            let mut net = Network::build(&run.network, init_seed(&run.train)).map_err(core_err)?;
            train(&mut net, train_set, &source, &run, |_| {}).map_err(core_err)?;
            let scores = score_records(&net, test, &source).map_err(core_err)?;
            Ok(scores.iter().map(|s| s.fh_probability).collect())
        },
        &hc,
    )?;
    create_out(out)?;
    write_json(&out.join("holdout.json"), &report)?;
    write_text(&out.join("holdout.txt"), &report.to_string())?;
    print!("{report}");
    cfg.inputs.insert("data".into(), abs(data));
    cfg.write(out)
}

/// Carries a training failure through the core harness, which logs and
/// skips the fold.
fn core_err(e: embryo_net::NetError) -> embryo_core::Error {
    match e {
        embryo_net::NetError::Core(inner) => inner,
        other => embryo_core::Error::InvalidArgument(other.to_string()),
    }
}
