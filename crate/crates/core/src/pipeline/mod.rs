//! End-to-end experiment orchestration: preprocess -> train-brain ->
//! train-caption -> infer -> evaluate -> report, with a hashed run manifest.

mod config;
mod prepared;
mod report;
mod steps;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{
    BrainSpec, CaptionSpec, ConvOverrides, EfficiencySpec, LmShape, NormalizationSpec, RunConfig, DEFAULT_SUBJECTS,
};
pub use prepared::{prepare, PrepOptions, PreparedData, PreparedMeta};
pub use report::{ablation_from_reports, ablation_report, dimensional_efficiency, AblationTable, RunReport};
pub use steps::{infer_captions, predict_prepared, train_brain, train_caption, BrainSummary};

use crate::brain::{load_brain_checkpoint, save_brain_checkpoint};
use crate::caption::Captioner;
use crate::dataset::{load_bundle, Manifest};
use crate::encoders::{fnv1a64, EncoderSet};
use crate::error::{Error, Result};
use crate::metrics::{build_report, read_pairs_jsonl, render_table, write_pairs_jsonl, MetricReport, TableGroup};
use crate::tensor::{DType, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Preprocess,
    TrainBrain,
    TrainCaption,
    Infer,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Preprocess,
        Stage::TrainBrain,
        Stage::TrainCaption,
        Stage::Infer,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::TrainBrain => "train-brain",
            Stage::TrainCaption => "train-caption",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Directory under the run directory holding this stage's artifacts.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::TrainBrain => "brain",
            Stage::TrainCaption => "caption",
            Stage::Infer => "infer",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Stages whose outputs this one reads.
    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::Preprocess => &[],
            Stage::TrainBrain | Stage::TrainCaption => &[Stage::Preprocess],
            Stage::Infer => &[Stage::Preprocess, Stage::TrainBrain, Stage::TrainCaption],
            Stage::Evaluate => &[Stage::Infer],
            Stage::Report => &[Stage::Evaluate],
        }
    }

    pub fn per_subject(self) -> bool {
        self != Stage::Report
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Stage::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown stage {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageRecord {
    pub stage: Stage,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    pub seed: u64,
    /// Input name -> sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the run directory -> sha256.
    pub outputs: BTreeMap<String, String>,
    pub seconds: f64,
}

/// `manifest.json` at the root of a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: String,
    pub config: serde_json::Value,
    /// Keyed by `<stage dir>/<subject>` or `report`.
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(run_dir: &Path) -> PathBuf {
        run_dir.join("manifest.json")
    }

    pub fn load(run_dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(run_dir);
        if !path.exists() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::json(&path, e))
    }

    /// Writes through a temporary file and a rename.
    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = Self::path(run_dir);
        let tmp = run_dir.join("manifest.json.tmp");
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(&path, e))?;
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Cached,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub stage: Stage,
    pub subject: Option<String>,
    pub status: StageStatus,
}

impl std::fmt::Display for StageOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = match self.status {
            StageStatus::Ran => "done",
            StageStatus::Cached => "cached",
        };
        match &self.subject {
            Some(s) => write!(f, "{} {s}: {status}", self.stage),
            None => write!(f, "{}: {status}", self.stage),
        }
    }
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_bytes(&bytes))
}

/// Hashes of every file below `dir`, keyed by path relative to `root`.
fn hash_tree(dir: &Path, root: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap_or(&path);
                let key = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                out.insert(key, sha256_file(&path)?);
            }
        }
    }
    Ok(out)
}

fn record_key(stage: Stage, subject: Option<&str>) -> String {
    match subject {
        Some(s) => format!("{}/{s}", stage.dir()),
        None => stage.dir().to_string(),
    }
}

fn stage_dir(cfg: &RunConfig, stage: Stage, subject: Option<&str>) -> PathBuf {
    let d = cfg.run_dir.join(stage.dir());
    match subject {
        Some(s) => d.join(s),
        None => d,
    }
}

/// Seed of one stage for one subject, derived from the run seed.
pub fn stage_seed(seed: u64, stage: Stage, subject: Option<&str>) -> u64 {
    fnv1a64(format!("{seed}:{}:{}", stage.name(), subject.unwrap_or("")).as_bytes())
}

fn config_fingerprint(cfg: &RunConfig, stage: Stage) -> Result<String> {
    let part = match stage {
        Stage::Preprocess => serde_json::json!({
            "mode": cfg.norm_mode(),
            "minmax_scope": cfg.normalization.minmax_scope,
            "average_test_repetitions": cfg.normalization.average_test_repetitions,
        }),
        Stage::TrainBrain => serde_json::json!({"mapper": cfg.mapper, "brain": cfg.brain}),
        Stage::TrainCaption => serde_json::json!({"caption": cfg.caption}),
        Stage::Infer => serde_json::json!({"decode": cfg.decode, "protocol": cfg.protocol}),
        Stage::Evaluate => serde_json::json!({"encoders": cfg.encoders.is_some()}),
        Stage::Report => serde_json::json!({
            "mapper": cfg.mapper,
            "subjects": cfg.subjects,
            "efficiency": cfg.efficiency,
        }),
    };
    let text = serde_json::to_string(&part).map_err(|e| Error::Config(e.to_string()))?;
    Ok(sha256_bytes(text.as_bytes()))
}

/// Dataset manifest and every file it references.
fn dataset_inputs(manifest_path: &Path) -> Result<BTreeMap<String, String>> {
    if !manifest_path.is_file() {
        return Err(Error::Config(format!(
            "dataset manifest {} does not exist",
            manifest_path.display()
        )));
    }
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let m: Manifest = serde_json::from_slice(&text).map_err(|e| Error::json(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut out = BTreeMap::new();
    out.insert("dataset/manifest".to_string(), sha256_bytes(&text));
    let mut files = vec![m.mask_file.clone()];
    files.extend(m.trials.iter().map(|t| t.beta_file.clone()));
    files.extend(m.stimuli.iter().map(|s| s.embedding_file.clone()));
    for f in files {
        out.insert(format!("dataset/{f}"), sha256_file(&base.join(&f))?);
    }
    Ok(out)
}

fn encoder_inputs(cfg: &RunConfig) -> Result<BTreeMap<String, String>> {
    match &cfg.encoders {
        None => Ok(BTreeMap::new()),
        Some(dir) => {
            if !dir.join("encoders.json").is_file() {
                return Err(Error::Config(format!("{} has no encoders.json", dir.display())));
            }
            Ok(hash_tree(dir, dir)?
                .into_iter()
                .map(|(k, v)| (format!("encoders/{k}"), v))
                .collect())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

fn load_encoders(cfg: &RunConfig) -> Result<EncoderSet> {
    match &cfg.encoders {
        Some(dir) => EncoderSet::load(dir),
        None => Ok(EncoderSet::stubs()),
    }
}

fn execute(cfg: &RunConfig, stage: Stage, subject: Option<&str>, seed: u64, out: &Path) -> Result<()> {
    let input = |s: Stage| stage_dir(cfg, s, subject);
    match stage {
        Stage::Preprocess => {
            let subject = subject.expect("per-subject stage");
            let bundle = load_bundle(&cfg.datasets[subject])?;
            let data = prepare(
                &bundle,
                PrepOptions {
                    mode: cfg.norm_mode(),
                    minmax_scope: cfg.normalization.minmax_scope,
                    average_test_repetitions: cfg.normalization.average_test_repetitions,
                },
            )?;
            data.save(out)
        }
        Stage::TrainBrain => {
            let data = PreparedData::load(&input(Stage::Preprocess))?;
            let (ckpt, summary) = train_brain(&data, cfg.mapper, &cfg.brain, seed)?;
            save_brain_checkpoint(&ckpt, &out.join("model"))?;
            write_json(&out.join("summary.json"), &summary)
        }
        Stage::TrainCaption => {
            let data = PreparedData::load(&input(Stage::Preprocess))?;
            let (captioner, losses) = train_caption(&data, &cfg.caption, seed)?;
            captioner.save(&out.join("model"))?;
            write_json(&out.join("history.json"), &serde_json::json!({ "epoch_loss": losses }))
        }
        Stage::Infer => {
            let data = PreparedData::load(&input(Stage::Preprocess))?;
            let brain = load_brain_checkpoint(&input(Stage::TrainBrain).join("model"))?;
            let captioner = Captioner::load(&input(Stage::TrainCaption).join("model"))?;
            let (emb, pairs) = infer_captions(&brain, &captioner, &data, &cfg.decode, cfg.protocol)?;
            let rows: Vec<Tensor> = emb.into_iter().map(|e| Tensor::vector(e.0)).collect();
            if !rows.is_empty() {
                Tensor::stack(&rows.iter().collect::<Vec<_>>())?.save(&out.join("embeddings.vct"), DType::F64)?;
            }
            let path = out.join("captions.jsonl");
            fs::write(&path, write_pairs_jsonl(&pairs)).map_err(|e| Error::io(&path, e))
        }
        Stage::Evaluate => {
            let path = input(Stage::Infer).join("captions.jsonl");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let report = build_report(&read_pairs_jsonl(&text)?, &load_encoders(cfg)?)?;
            write_json(&out.join("report.json"), &report)?;
            let table = render_table(
                &format!("Evaluation of captions from fMRI for {}", subject.unwrap_or("")),
                &[TableGroup {
                    heading: report.protocol.heading().to_string(),
                    columns: vec![("Ours".into(), Some(report.clone()))],
                }],
            );
            let path = out.join("table.txt");
            fs::write(&path, table).map_err(|e| Error::io(&path, e))
        }
        Stage::Report => {
            let mut subjects = BTreeMap::new();
            for s in &cfg.subjects {
                let r: MetricReport = read_json(&stage_dir(cfg, Stage::Evaluate, Some(s)).join("report.json"))?;
                subjects.insert(s.clone(), r);
            }
            let report = RunReport::new(cfg.mapper, subjects, cfg.efficiency)?;
            write_json(&out.join("report.json"), &report)?;
            let path = out.join("table.txt");
            fs::write(&path, report.render()).map_err(|e| Error::io(&path, e))
        }
    }
}

fn verify_outputs(cfg: &RunConfig, record: &StageRecord) -> Result<bool> {
    let dir = stage_dir(cfg, record.stage, record.subject.as_deref());
    Ok(hash_tree(&dir, &cfg.run_dir)? == record.outputs)
}

/// Runs one stage for every subject (or once, for the report). A subject
/// whose recorded inputs and outputs still hash the same is skipped unless
/// `force` is set.
pub fn run_stage(stage: Stage, cfg: &RunConfig, force: bool) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.run_dir).map_err(|e| Error::io(&cfg.run_dir, e))?;
    let snapshot = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    let mut manifest = RunManifest::load(&cfg.run_dir)?.unwrap_or(RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: snapshot.clone(),
        stages: BTreeMap::new(),
    });
    manifest.version = env!("CARGO_PKG_VERSION").to_string();
    manifest.config = snapshot;

    let subjects: Vec<Option<&str>> = if stage.per_subject() {
        cfg.subjects.iter().map(|s| Some(s.as_str())).collect()
    } else {
        vec![None]
    };
    let mut outcomes = Vec::new();
    for subject in subjects {
        let mut inputs = BTreeMap::new();
        inputs.insert("config".to_string(), config_fingerprint(cfg, stage)?);
        let mut missing = Vec::new();
        let mut stale = Vec::new();
        let dep_subjects: Vec<Option<&str>> = match subject {
            Some(s) => vec![Some(s)],
            None => cfg.subjects.iter().map(|s| Some(s.as_str())).collect(),
        };
        for &dep in stage.deps() {
            for &ds in &dep_subjects {
                let key = record_key(dep, ds);
                match manifest.stages.get(&key) {
                    None => missing.push(key),
                    Some(r) if !verify_outputs(cfg, r)? => stale.push(key),
                    Some(r) => inputs.extend(r.outputs.clone()),
                }
            }
        }
        let what = match subject {
            Some(s) => format!("{stage} for {s}"),
            None => stage.to_string(),
        };
        if !missing.is_empty() {
            let mut first: Vec<&str> = stage
                .deps()
                .iter()
                .filter(|d| missing.iter().any(|k| k.starts_with(d.dir())))
                .map(|d| d.name())
                .collect();
            first.dedup();
            return Err(Error::Dependency(format!(
                "{what} needs outputs that have not been produced ({}); run stage {} first",
                missing.join(", "),
                first.join(", then ")
            )));
        }
        if !stale.is_empty() {
            return Err(Error::Dependency(format!(
                "{what} depends on {} whose files changed after they were recorded; rerun those stages",
                stale.join(", ")
            )));
        }
        match stage {
            Stage::Preprocess => inputs.extend(dataset_inputs(&cfg.datasets[subject.expect("subject")])?),
            Stage::Evaluate => inputs.extend(encoder_inputs(cfg)?),
            _ => {}
        }
        let seed = stage_seed(cfg.seed, stage, subject);
        if matches!(stage, Stage::TrainBrain | Stage::TrainCaption) {
            inputs.insert("seed".to_string(), seed.to_string());
        }

        let key = record_key(stage, subject);
        if !force {
            if let Some(r) = manifest.stages.get(&key) {
                if r.inputs == inputs && verify_outputs(cfg, r)? {
                    log::info!("{what}: inputs unchanged, cached");
                    outcomes.push(StageOutcome {
                        stage,
                        subject: subject.map(str::to_string),
                        status: StageStatus::Cached,
                    });
                    continue;
                }
            }
        }
        let out = stage_dir(cfg, stage, subject);
        if out.exists() {
            fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        }
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        log::info!("{what}: running");
        let start = Instant::now();
        if manifest.stages.remove(&key).is_some() {
            manifest.save(&cfg.run_dir)?;
        }
        execute(cfg, stage, subject, seed, &out)?;
        let record = StageRecord {
            stage,
            subject: subject.map(str::to_string),
            seed,
            inputs,
            outputs: hash_tree(&out, &cfg.run_dir)?,
            seconds: start.elapsed().as_secs_f64(),
        };
        manifest.stages.insert(key, record);
        manifest.save(&cfg.run_dir)?;
        outcomes.push(StageOutcome {
            stage,
            subject: subject.map(str::to_string),
            status: StageStatus::Ran,
        });
    }
    manifest.save(&cfg.run_dir)?;
    Ok(outcomes)
}

/// All six stages in order.
pub fn run_all(cfg: &RunConfig, force: bool) -> Result<Vec<StageOutcome>> {
    let mut out = Vec::new();
    for stage in Stage::ALL {
        out.extend(run_stage(stage, cfg, force)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        assert!("train".parse::<Stage>().is_err());
    }

    #[test]
    fn dependencies_point_backwards() {
        for (i, s) in Stage::ALL.iter().enumerate() {
            for d in s.deps() {
                let j = Stage::ALL.iter().position(|x| x == d).unwrap();
                assert!(j < i, "{s} depends on later stage {d}");
            }
        }
    }

    #[test]
    fn stage_seeds_differ_but_repeat() {
        let a = stage_seed(7, Stage::TrainBrain, Some("sub1"));
        assert_eq!(a, stage_seed(7, Stage::TrainBrain, Some("sub1")));
        assert_ne!(a, stage_seed(7, Stage::TrainBrain, Some("sub2")));
        assert_ne!(a, stage_seed(8, Stage::TrainBrain, Some("sub1")));
        assert_ne!(a, stage_seed(7, Stage::TrainCaption, Some("sub1")));
    }

    #[test]
    fn tree_hashes_use_relative_keys() {
        let dir = tempfile::tempdir().unwrap();
        let sub = dir.path().join("a").join("b");
        fs::create_dir_all(&sub).unwrap();
        fs::write(sub.join("x.txt"), "hi").unwrap();
        let h = hash_tree(&dir.path().join("a"), dir.path()).unwrap();
        assert_eq!(h.keys().collect::<Vec<_>>(), ["a/b/x.txt"]);
        assert_eq!(h["a/b/x.txt"], sha256_bytes(b"hi"));
    }
}
