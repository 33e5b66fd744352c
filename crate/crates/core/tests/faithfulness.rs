mod common;

use vlnfaith::agents::{replay_step, rollout, Architecture, GradMode, Policy};
use vlnfaith::attribution::{attribute, Method, Ranking, StepContext};
use vlnfaith::faitheval::{
    compare_with_oracle, evaluate_method, evaluate_methods, measure_step, AggregateResult, ErasureOp, EvalConfig, KPolicy,
};
use vlnfaith::navworld::SplitName;

#[test]
fn erasure_identities_at_the_extremes() {
    let ds = common::small_dataset();
    for arch in Architecture::ALL {
        let agent = common::tiny_agent(arch, &ds);
        let config = EvalConfig::default();
        for ep in ds.episodes_in(SplitName::ValSeen).into_iter().take(6) {
            let graph = ds.graph_of(ep);
            let traj = rollout(&agent, graph, &ep.instruction.ids, ep.start, Policy::Greedy).unwrap();
            let actions = traj.actions();
            let all = ep.instruction.content_count();
            for step in 0..traj.len() {
                let ctx = StepContext { agent: &agent, graph, episode: ep, trajectory: &traj, actions: &actions, step, random_seed: 1 };
                let attr = attribute(Method::VaGrad, &ctx, &config.attribution).unwrap();
                for op in ErasureOp::ALL {
                    let none = measure_step(&agent, graph, ep, &traj, step, &attr, op, 0, Ranking::Signed).unwrap();
                    assert!(none.selected.is_empty());
                    assert!(none.comp.abs() < 1e-12 && none.df_wo_r == 0, "{arch} {op:?}: {none:?}");
                    let full = measure_step(&agent, graph, ep, &traj, step, &attr, op, all, Ranking::Signed).unwrap();
                    assert_eq!(full.selected.len(), all);
                    assert!(full.suff.abs() < 1e-12 && full.df_w_r == 0, "{arch} {op:?}: {full:?}");
                    // erasing nothing and keeping everything are the same instruction
                    assert!((none.p_erased - full.p_preserved).abs() < 1e-12);
                    // keeping nothing and erasing everything are the same instruction
                    assert!((none.p_preserved - full.p_erased).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn records_replay_the_agent() {
    let ds = common::small_dataset();
    let agent = common::tiny_agent(Architecture::Transformer, &ds);
    let eps = ds.episodes_in(SplitName::ValUnseen);
    let eps = &eps[..4];
    let (records, agg) = evaluate_method(&agent, &ds, eps, "val_unseen", Method::VaAtt, &EvalConfig::default()).unwrap();
    let steps: usize = eps
        .iter()
        .map(|ep| rollout(&agent, ds.graph_of(ep), &ep.instruction.ids, ep.start, Policy::Greedy).unwrap().len())
        .sum();
    assert_eq!(records.len(), 2 * steps);
    assert_eq!(agg.steps, steps);
    let k = KPolicy::MeanRationale.resolve(eps);
    for r in &records {
        assert_eq!(r.k, k);
        assert!(r.selected.len() <= k);
        let ep = eps.iter().find(|e| e.id == r.episode).unwrap();
        let graph = ds.graph_of(ep);
        let traj = rollout(&agent, graph, &ep.instruction.ids, ep.start, Policy::Greedy).unwrap();
        let replay = replay_step(&agent, graph, &ep.instruction.ids, ep.start, &traj.actions()[..r.step], GradMode::Frozen, None).unwrap();
        assert_eq!(replay.probs()[r.action], r.p_original);
        assert!((r.comp - (r.p_original - r.p_erased)).abs() < 1e-15);
        assert!((r.suff - (r.p_original - r.p_preserved)).abs() < 1e-15);
        assert_eq!(r.df_wo_r, u8::from(r.action_erased != r.action));
    }
    let again = AggregateResult::from_records(Method::VaAtt, "val_unseen", &records).unwrap();
    assert_eq!(again, agg);
}

#[test]
fn fixed_k_and_seeded_random_baseline() {
    let ds = common::small_dataset();
    let agent = common::tiny_agent(Architecture::Rnn, &ds);
    let eps = ds.episodes_in(SplitName::ValSeen);
    let eps = &eps[..3];
    let cfg = EvalConfig { k: KPolicy::Fixed(1), ..EvalConfig::default() };
    let (a, _) = evaluate_methods(&agent, &ds, eps, "s", &[Method::Random], &cfg).unwrap();
    let (b, _) = evaluate_methods(&agent, &ds, eps, "s", &[Method::Random], &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|r| r.k == 1 && r.selected.len() == 1));
    let other = EvalConfig { random_seed: cfg.random_seed + 1, ..cfg.clone() };
    let (c, _) = evaluate_methods(&agent, &ds, eps, "s", &[Method::Random], &other).unwrap();
    assert_ne!(a.iter().map(|r| &r.selected).collect::<Vec<_>>(), c.iter().map(|r| &r.selected).collect::<Vec<_>>());
}

#[test]
fn oracle_comparison_uses_on_path_steps() {
    let ds = common::small_dataset();
    let agent = common::tiny_agent(Architecture::Transformer, &ds);
    let eps = ds.episodes_in(SplitName::ValSeen);
    let eps = &eps[..6];
    let cmp = compare_with_oracle(&agent, &ds, eps, "val_seen", &[Method::GradInp, Method::Random], &EvalConfig::default()).unwrap();
    assert_eq!(cmp.aggregates.last().unwrap().method, Method::Oracle);
    let oracle = cmp.get(Method::Oracle).unwrap();
    assert_eq!(cmp.get(Method::GradInp).unwrap().steps, oracle.steps);
    for r in &cmp.records {
        let ep = eps.iter().find(|e| e.id == r.episode).unwrap();
        assert_eq!(r.k, ep.rationale[r.step].len());
        if r.method == Method::Oracle {
            let mut rationale = ep.rationale[r.step].clone();
            rationale.sort_unstable();
            assert_eq!(r.selected, rationale);
        }
    }
}
