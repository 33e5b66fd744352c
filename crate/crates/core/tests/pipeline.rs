use std::fs;
use std::path::Path;

use vlnfaith::agents::Architecture;
use vlnfaith::navworld::{DatasetConfig, SplitName};
use vlnfaith::pipeline::{self, PipelineConfig, PipelineError};
use vlnfaith::records::read_records;
use vlnfaith::trainer::TrainConfig;

fn tiny() -> PipelineConfig {
    let train = TrainConfig { epochs: 2, ..TrainConfig::default() };
    let mut cfg = PipelineConfig {
        dataset: DatasetConfig { graph_count: 5, episodes_per_graph: 6, ..DatasetConfig::default() },
        transformer_train: train.clone(),
        rnn_train: TrainConfig { learning_rate: 0.05, ..train },
        sr_gate: 0.0,
        ..PipelineConfig::default()
    };
    cfg.eval.attribution.ig_steps = 10;
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn run_all_writes_every_artifact_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = tiny();
    let summary = pipeline::run_all(&cfg, a.path()).unwrap();
    pipeline::run_all(&cfg, b.path()).unwrap();
    assert_eq!(summary.agents.len(), 2);
    assert!(summary.agents.iter().all(|s| s.gate_passed));
    for arch in Architecture::ALL {
        for f in [
            "loss.jsonl",
            "nav.jsonl",
            "faith_records.jsonl",
            "aggregates.jsonl",
            "oracle_records.jsonl",
            "oracle_aggregates.jsonl",
            "checkpoint/params.bin",
            "checkpoint/manifest.txt",
        ] {
            let rel = Path::new(arch.as_str()).join(f);
            assert_eq!(read(&a.path().join(&rel)), read(&b.path().join(&rel)), "{}", rel.display());
        }
        let heatmaps = fs::read_dir(a.path().join(arch.as_str()).join("heatmaps")).unwrap().count();
        assert_eq!(heatmaps, cfg.methods.len() + 1);
    }
    for f in ["report.tsv", "report.txt", "oracle_report.tsv", "summary.json"] {
        assert_eq!(read(&a.path().join(f)), read(&b.path().join(f)), "{f}");
    }
    let text = fs::read_to_string(a.path().join("report.txt")).unwrap();
    for label in ["Slice Out", "Token Replacement", "Average", "IngGrad", "Random"] {
        assert!(text.contains(label), "{label}");
    }
    let (_, rows): (_, Vec<pipeline::SplitRecord>) =
        read_records(&a.path().join("transformer/faith_records.jsonl"), pipeline::FAITH_FORMAT).unwrap();
    assert!(rows.iter().any(|r| r.split == SplitName::ValSeen));
    assert!(rows.iter().any(|r| r.split == SplitName::ValUnseen));
    let splits: Vec<&str> = summary.aggregates.iter().map(|e| e.aggregate.split.as_str()).collect();
    assert!(splits.contains(&pipeline::POOLED_SPLIT));
    let pooled = summary.aggregates.iter().find(|e| e.aggregate.split == pipeline::POOLED_SPLIT).unwrap();
    let parts: usize = summary
        .aggregates
        .iter()
        .filter(|e| e.architecture == pooled.architecture && e.aggregate.method == pooled.aggregate.method && e.aggregate.split != pipeline::POOLED_SPLIT)
        .map(|e| e.aggregate.steps)
        .sum();
    assert_eq!(pooled.aggregate.steps, parts);
}

#[test]
fn gate_blocks_faithfulness_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.architectures = vec![Architecture::Rnn];
    cfg.sr_gate = 1.01;
    let summary = pipeline::run_all(&cfg, dir.path()).unwrap();
    assert!(!summary.agents[0].gate_passed);
    assert!(summary.aggregates.is_empty());
    assert!(!dir.path().join("rnn/faith_records.jsonl").exists());
    let ds = pipeline::load_dataset(&dir.path().join("data")).unwrap();
    let agent = pipeline::load_checkpoint_for(&ds, &dir.path().join("rnn/checkpoint")).unwrap();
    let err = pipeline::check_gate(&ds, &agent, SplitName::ValSeen, 1.01).unwrap_err();
    assert!(matches!(err, PipelineError::Gate { .. }));
    assert!(err.to_string().contains("below the required"));
}

#[test]
fn partial_toml_configs_take_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cfg.toml");
    fs::write(&path, "agent_seed = 9\n[dataset]\ngraph_count = 4\n[rnn_train]\nepochs = 3\n").unwrap();
    let cfg: PipelineConfig = pipeline::read_config(&path).unwrap();
    assert_eq!(cfg.agent_seed, 9);
    assert_eq!(cfg.dataset.graph_count, 4);
    assert_eq!(cfg.dataset.episodes_per_graph, DatasetConfig::default().episodes_per_graph);
    assert_eq!(cfg.rnn_train.epochs, 3);
    assert_eq!(cfg.rnn_train.learning_rate, TrainConfig::default().learning_rate);
    assert_eq!(cfg.transformer_train, TrainConfig::for_architecture(Architecture::Transformer));
    fs::write(&path, "agent_seed = \"x\"\n").unwrap();
    assert!(matches!(pipeline::read_config::<PipelineConfig>(&path), Err(PipelineError::Config { .. })));
}

#[test]
fn mismatched_vocabulary_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny();
    cfg.architectures = vec![Architecture::Transformer];
    pipeline::run_all(&cfg, dir.path()).unwrap();
    let mut other = cfg.dataset.clone();
    other.world.colors.push("teal".into());
    let ds = pipeline::gen_data(&other, &dir.path().join("other")).unwrap();
    let err = pipeline::load_checkpoint_for(&ds, &dir.path().join("transformer/checkpoint")).unwrap_err();
    assert!(matches!(err, PipelineError::VocabMismatch));
}
