use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use volcap::caption::{
    beam_search, encode_prefix, Captioner, DecodeConfig, DecoderLm, ExternalLm, ExternalLmSpec, LmBackend,
};
use volcap::brain::TargetEmbedding;
use volcap::metrics::{read_pairs_jsonl, MetricReport};

const BIN: &str = env!("CARGO_BIN_EXE_volcap");

fn volcap(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("VOLCAP_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = volcap(args);
    assert!(
        out.status.success(),
        "volcap {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const CAPTION_CONFIG: &str = r#"{
  "train": {"epochs": 3, "batch_size": 16, "learning_rate": 0.003},
  "prefix_length": 2, "mapper_layers": 1, "mapper_heads": 2, "mapper_hidden_dim": 16,
  "lm": {"embed_dim": 8, "layers": 1, "heads": 2, "hidden_dim": 16, "max_positions": 24}
}"#;

/// Synthetic subject plus its z-scored preparation.
fn prepared(root: &Path) -> (PathBuf, PathBuf) {
    let manifest = PathBuf::from(ok(&["synth", "--seed", "3", "--out", s(&root.join("bundle"))]).trim());
    assert!(manifest.is_file());
    let data = root.join("prep");
    ok(&["preprocess", "--manifest", s(&manifest), "--mode", "zscore", "--out", s(&data)]);
    (manifest, data)
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (_, data) = prepared(root);
    fs::write(root.join("brain.json"), r#"{"ridge_lambda": 1.0}"#).unwrap();
    fs::write(root.join("caption.json"), CAPTION_CONFIG).unwrap();
    let brain = root.join("brain");
    let caption = root.join("caption");
    ok(&[
        "train-brain", "--mapper", "ridge", "--data", s(&data), "--train-config", s(&root.join("brain.json")), "--out",
        s(&brain),
    ]);
    let emb = root.join("emb.vct");
    ok(&["predict-embeddings", "--model", s(&brain), "--data", s(&data), "--out", s(&emb)]);
    assert_eq!(volcap::tensor::Tensor::load(&emb).unwrap().shape(), [8, 16]);
    ok(&["train-caption", "--pairs", s(&data), "--config", s(&root.join("caption.json")), "--out", s(&caption)]);
    let caps = root.join("out").join("captions.jsonl");
    ok(&[
        "infer", "--brain-model", s(&brain), "--caption-model", s(&caption), "--data", s(&data), "--beam", "3",
        "--max-len", "12", "--out", s(&caps),
    ]);
    let pairs = read_pairs_jsonl(&fs::read_to_string(&caps).unwrap()).unwrap();
    assert_eq!(pairs.len(), 8);
    let report = root.join("report.json");
    let table = ok(&["evaluate", "--pred", s(&caps), "--protocol", "vs_coco", "--out", s(&report)]);
    assert!(table.contains("fMRI vs COCO") && table.contains("CLIP-L"));
    let r: MetricReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r.n_pairs, 8);

    let wrong = volcap(&["evaluate", "--pred", s(&caps), "--protocol", "vs_model", "--out", s(&report)]);
    assert_eq!(wrong.status.code(), Some(2));
}

fn write_run_config(root: &Path, name: &str, mapper: &str, manifest: &Path) -> PathBuf {
    let cfg = serde_json::json!({
        "run_dir": name,
        "subjects": ["sub1"],
        "datasets": {"sub1": manifest},
        "mapper": mapper,
        "brain": {"ridge_lambda": 1.0},
        "caption": serde_json::from_str::<serde_json::Value>(CAPTION_CONFIG).unwrap(),
        "decode": {"beam_width": 2, "max_len": 12, "alpha": 0.7},
        "seed": 1
    });
    let path = root.join(format!("{name}.json"));
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

#[test]
fn run_caches_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (manifest, _) = prepared(root);
    let cfg = write_run_config(root, "runa", "ridge", &manifest);

    let early = volcap(&["run", "--config", s(&cfg), "--stage", "evaluate"]);
    assert_eq!(early.status.code(), Some(3), "{}", String::from_utf8_lossy(&early.stderr));
    assert!(String::from_utf8_lossy(&early.stderr).contains("infer"));

    let first = ok(&["run", "--config", s(&cfg)]);
    assert_eq!(first.lines().filter(|l| l.ends_with("done")).count(), 6, "{first}");
    let second = ok(&["run", "--config", s(&cfg)]);
    assert_eq!(second.lines().filter(|l| l.ends_with("cached")).count(), 6, "{second}");
    assert!(root.join("runa").join("manifest.json").is_file());

    let reseeded = Command::new(BIN)
        .args(["run", "--config", s(&cfg)])
        .env("VOLCAP_SEED", "99")
        .output()
        .unwrap();
    let text = String::from_utf8(reseeded.stdout).unwrap();
    assert!(text.contains("train-caption sub1: done"), "{text}");
    assert!(text.contains("preprocess sub1: cached"), "{text}");

    let table = ok(&["report", "--runs", s(&root.join("runa"))]);
    assert!(table.contains("Ridge"));
    assert_eq!(table.lines().filter(|l| l.starts_with("ROUGE-")).count(), 2);
}

#[test]
fn bad_inputs_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("bad.json");
    fs::write(&cfg, r#"{"run_dir": "r", "datasets": {}, "mapper": "ridge", "typo": 1}"#).unwrap();
    assert_eq!(volcap(&["run", "--config", s(&cfg)]).status.code(), Some(2));
    let missing = volcap(&["preprocess", "--manifest", s(&root.join("none.json")), "--mode", "zscore", "--out", "x"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("none.json"));
    assert_eq!(volcap(&["efficiency", "--ours", "0"]).status.code(), Some(2));
}

#[test]
fn divergent_training_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (_, data) = prepared(root);
    let cfg = CAPTION_CONFIG.replace("0.003", "1e300");
    fs::write(root.join("caption.json"), cfg).unwrap();
    let out = volcap(&[
        "train-caption", "--pairs", s(&data), "--config", s(&root.join("caption.json")), "--out",
        s(&root.join("cap")),
    ]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(out.status.code(), Some(4), "{err}");
    assert!(err.contains("epoch") && err.contains("learning rate"), "{err}");
}

#[test]
fn efficiency_prints_the_ratio() {
    assert!(ok(&["efficiency"]).contains("171.33"));
    assert!(ok(&["efficiency", "--tokens", "2", "--dim", "8", "--ours", "4"]).contains("= 4.00"));
}

#[test]
fn external_language_model_matches_in_process() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let (_, data) = prepared(root);
    fs::write(root.join("caption.json"), CAPTION_CONFIG).unwrap();
    let model = root.join("cap");
    ok(&["train-caption", "--pairs", s(&data), "--config", s(&root.join("caption.json")), "--out", s(&model)]);

    let local = Captioner::load(&model).unwrap();
    let LmBackend::Tiny(tiny) = &local.lm else {
        panic!("expected the built-in model")
    };
    let remote = ExternalLm::new(ExternalLmSpec {
        command: BIN.to_string(),
        args: vec!["serve-lm".into(), "--model".into(), s(&model).to_string()],
        vocab_size: tiny.vocab_size(),
        embed_dim: tiny.embed_dim(),
        eos_token: tiny.eos_token(),
    });
    let decode = DecodeConfig {
        beam_width: 3,
        max_len: 12,
        alpha: 0.7,
    };
    for k in 0..4 {
        let emb = TargetEmbedding((0..16).map(|i| ((i * 7 + k * 3) % 5) as f64 - 2.0).collect());
        let prefix = encode_prefix(&emb, &local.mapper).unwrap();
        for tokens in [vec![], vec![2, 3], vec![4, 4, 5]] {
            assert_eq!(
                remote.next_token_logits(&prefix, &tokens).unwrap(),
                tiny.next_token_logits(&prefix, &tokens).unwrap()
            );
        }
        assert_eq!(
            beam_search(&remote, &prefix, &decode).unwrap(),
            beam_search(tiny, &prefix, &decode).unwrap()
        );
    }
}
