//! Pinned outputs of the generators and of a small trained agent. Run with
//! `UPDATE_GOLDEN=1` to rewrite the fixtures after an intended change.

mod common;

use std::fs;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use vlnfaith::agents::{rollout, Architecture, Policy};
use vlnfaith::navworld::{generate_episode, generate_world, Episode, NavGraph, SplitName, Vocabulary, WorldConfig};

fn fixture<T: Serialize + DeserializeOwned>(name: &str, current: &T) -> T {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&path, serde_json::to_string_pretty(current).unwrap() + "\n").unwrap();
    }
    let text = fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e} (set UPDATE_GOLDEN=1 to create)", path.display()));
    serde_json::from_str(&text).unwrap()
}

#[test]
fn world_seed_42() {
    let graph = generate_world(42, &WorldConfig::default()).unwrap();
    let pinned: NavGraph = fixture("world_seed42.json", &graph);
    assert_eq!(graph, pinned);
}

#[test]
fn episode_seed_7() {
    let config = WorldConfig::default();
    let graph = generate_world(42, &config).unwrap();
    let vocab = Vocabulary::build(&config.colors, &config.objects);
    let ep = generate_episode(&graph, 0, &vocab, 7, 2..=4).unwrap();
    let pinned: Episode = fixture("episode_seed7.json", &ep);
    assert_eq!(ep, pinned);
    let text: Vec<&str> = ep.instruction.tokens(&vocab);
    assert_eq!(text.first(), Some(&"<bos>"));
    assert_eq!(text.last(), Some(&"<eos>"));
}

#[test]
fn trained_agent_step_probabilities() {
    let ds = common::small_dataset();
    let mut current = serde_json::Map::new();
    for arch in Architecture::ALL {
        let agent = common::tiny_agent(arch, &ds);
        let rows: Vec<Value> = ds
            .episodes_in(SplitName::ValSeen)
            .iter()
            .take(3)
            .map(|ep| {
                let t = rollout(&agent, ds.graph_of(ep), &ep.instruction.ids, ep.start, Policy::Greedy).unwrap();
                serde_json::json!({
                    "episode": ep.id,
                    "actions": t.actions(),
                    "probs": t.steps.iter().map(|s| s.probs.clone()).collect::<Vec<_>>(),
                })
            })
            .collect();
        current.insert(arch.to_string(), Value::Array(rows));
    }
    let current = Value::Object(current);
    let pinned: Value = fixture("agent_probs.json", &current);
    for arch in Architecture::ALL {
        let (now, then) = (&current[arch.as_str()], &pinned[arch.as_str()]);
        for (a, b) in now.as_array().unwrap().iter().zip(then.as_array().unwrap()) {
            assert_eq!(a["episode"], b["episode"]);
            assert_eq!(a["actions"], b["actions"], "{arch}");
            let flat = |v: &Value| -> Vec<f64> {
                v["probs"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap())).collect()
            };
            let (pa, pb) = (flat(a), flat(b));
            assert_eq!(pa.len(), pb.len());
            for (x, y) in pa.iter().zip(&pb) {
                assert!((x - y).abs() < 1e-9, "{arch}: {x} vs {y}");
            }
        }
    }
}
