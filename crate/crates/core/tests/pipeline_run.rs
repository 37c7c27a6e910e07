use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use volcap::brain::MapperKind;
use volcap::caption::DecodeConfig;
use volcap::dataset::{synth_generate, write_bundle, PlantedKind, SynthConfig};
use volcap::metrics::{read_pairs_jsonl, Protocol};
use volcap::nn::TrainConfig;
use volcap::pipeline::{
    ablation_report, run_all, run_stage, BrainSpec, CaptionSpec, ConvOverrides, LmShape, RunConfig, RunManifest,
    RunReport, Stage, StageStatus,
};
use volcap::Error;

fn write_subjects(root: &Path, subjects: &[&str], planted: PlantedKind, shape: [usize; 3]) -> BTreeMap<String, PathBuf> {
    subjects
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let cfg = SynthConfig {
                subject_id: format!("synth-{s}"),
                volume_shape: shape,
                n_stimuli: 20,
                n_test_stimuli: 4,
                test_repetitions: 2,
                planted,
                noise_std: 0.05,
                ..SynthConfig::default()
            };
            let bundle = synth_generate(&cfg, 100 + i as u64).unwrap();
            let path = write_bundle(&bundle, &root.join("data").join(s)).unwrap();
            (s.to_string(), path)
        })
        .collect()
}

fn config(root: &Path, run: &str, mapper: MapperKind, datasets: BTreeMap<String, PathBuf>) -> RunConfig {
    RunConfig {
        run_dir: root.join(run),
        subjects: datasets.keys().cloned().collect(),
        datasets,
        mapper,
        normalization: Default::default(),
        brain: BrainSpec {
            train: TrainConfig {
                epochs: 2,
                batch_size: 8,
                learning_rate: 1e-3,
                ..TrainConfig::default()
            },
            conv: ConvOverrides {
                base_widths: Some([2, 2, 2, 2]),
                pad_multiple: Some(16),
                ..ConvOverrides::default()
            },
            ..BrainSpec::default()
        },
        caption: CaptionSpec {
            train: TrainConfig {
                epochs: 3,
                batch_size: 16,
                learning_rate: 3e-3,
                weight_decay: 0.0,
                ..TrainConfig::default()
            },
            prefix_length: 2,
            mapper_layers: 1,
            mapper_heads: 2,
            mapper_hidden_dim: 16,
            lm: LmShape {
                embed_dim: 8,
                layers: 1,
                heads: 2,
                hidden_dim: 16,
                max_positions: 12,
            },
            freeze_lm: false,
        },
        decode: DecodeConfig {
            beam_width: 3,
            max_len: 10,
            alpha: 0.7,
        },
        protocol: Protocol::VsCoco,
        encoders: None,
        efficiency: Default::default(),
        seed: 5,
    }
}

#[test]
fn full_run_produces_captions_and_report_then_caches() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_subjects(dir.path(), &["sub1", "sub2"], PlantedKind::Linear, [8, 8, 8]);
    let cfg = config(dir.path(), "run", MapperKind::Ridge, data);

    let first = run_all(&cfg, false).unwrap();
    assert_eq!(first.len(), 5 * 2 + 1);
    assert!(first.iter().all(|o| o.status == StageStatus::Ran));

    for s in ["sub1", "sub2"] {
        let text = fs::read_to_string(cfg.run_dir.join("infer").join(s).join("captions.jsonl")).unwrap();
        let pairs = read_pairs_jsonl(&text).unwrap();
        assert_eq!(pairs.len(), 4);
        assert!(cfg.run_dir.join("evaluate").join(s).join("report.json").is_file());
    }
    let report = RunReport::load(&cfg.run_dir.join("report").join("report.json")).unwrap();
    assert_eq!(report.subjects.len(), 2);
    assert!(fs::read_to_string(cfg.run_dir.join("report").join("table.txt"))
        .unwrap()
        .contains("METEOR"));
    let manifest = RunManifest::load(&cfg.run_dir).unwrap().unwrap();
    assert_eq!(manifest.stages.len(), 11);

    let again = run_all(&cfg, false).unwrap();
    assert!(again.iter().all(|o| o.status == StageStatus::Cached));
    let forced = run_stage(Stage::Evaluate, &cfg, true).unwrap();
    assert!(forced.iter().all(|o| o.status == StageStatus::Ran));
}

#[test]
fn tampering_is_detected_and_repaired() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_subjects(dir.path(), &["sub1"], PlantedKind::Linear, [8, 8, 8]);
    let cfg = config(dir.path(), "run", MapperKind::Ridge, data);
    run_all(&cfg, false).unwrap();

    let weights = cfg.run_dir.join("brain").join("sub1").join("model").join("weights.vct");
    let mut bytes = fs::read(&weights).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x01;
    fs::write(&weights, bytes).unwrap();

    let err = run_stage(Stage::Infer, &cfg, false).unwrap_err();
    assert!(matches!(err, Error::Dependency(ref m) if m.contains("brain/sub1")), "{err}");

    let outcomes = run_all(&cfg, false).unwrap();
    let status = |st: Stage| outcomes.iter().find(|o| o.stage == st).unwrap().status;
    assert_eq!(status(Stage::Preprocess), StageStatus::Cached);
    assert_eq!(status(Stage::TrainBrain), StageStatus::Ran);
    assert_eq!(status(Stage::TrainCaption), StageStatus::Cached);
}

#[test]
fn evaluate_before_infer_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_subjects(dir.path(), &["sub1"], PlantedKind::Linear, [8, 8, 8]);
    let cfg = config(dir.path(), "run", MapperKind::Ridge, data);
    let err = run_stage(Stage::Evaluate, &cfg, false).unwrap_err();
    match err {
        Error::Dependency(m) => assert!(m.contains("run stage infer first"), "{m}"),
        other => panic!("unexpected {other}"),
    }
    run_stage(Stage::Preprocess, &cfg, false).unwrap();
    let err = run_stage(Stage::Infer, &cfg, false).unwrap_err();
    assert!(matches!(err, Error::Dependency(ref m) if m.contains("train-brain")), "{err}");
}

#[test]
fn identical_config_gives_identical_captions() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_subjects(dir.path(), &["sub1"], PlantedKind::Linear, [8, 8, 8]);
    let a = config(dir.path(), "a", MapperKind::Ridge, data.clone());
    let b = config(dir.path(), "b", MapperKind::Ridge, data);
    run_all(&a, false).unwrap();
    run_all(&b, false).unwrap();
    let read = |c: &RunConfig| fs::read(c.run_dir.join("infer").join("sub1").join("captions.jsonl")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn missing_dataset_is_reported_at_stage_start() {
    let dir = tempfile::tempdir().unwrap();
    let mut data = BTreeMap::new();
    data.insert("sub1".to_string(), dir.path().join("nope").join("manifest.json"));
    let cfg = config(dir.path(), "run", MapperKind::Ridge, data);
    assert!(matches!(run_stage(Stage::Preprocess, &cfg, false), Err(Error::Config(_))));
}

#[test]
fn volumetric_runs_feed_the_ablation_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_subjects(dir.path(), &["sub1"], PlantedKind::ConvFriendly, [16, 16, 16]);
    let ridge = config(dir.path(), "ridge", MapperKind::Ridge, data.clone());
    let shallow = config(dir.path(), "shallow", MapperKind::Shallow, data);
    run_all(&ridge, false).unwrap();
    run_all(&shallow, false).unwrap();
    let table = ablation_report(&[ridge.run_dir.clone(), shallow.run_dir.clone()]).unwrap();
    assert_eq!(table.columns.len(), 2);
    let text = table.render();
    assert!(text.contains("Ridge") && text.contains("Shallow"));
    assert_eq!(text.lines().filter(|l| l.starts_with("METEOR") || l.starts_with("CLIP-L")).count(), 2);
}
