"""Smoke test of the Python bindings on a small dataset.

Build the extension first, either with maturin
(`maturin develop -m crates/py/Cargo.toml`) or with cargo
(`cargo build --release -p vlnfaith-py --features extension-module`, then copy
`target/release/libvlnfaith_py.so` to `vlnfaith.so` on PYTHONPATH).
"""

import json
import math
import sys
import tempfile

import vlnfaith


def main() -> int:
    world = vlnfaith.generate_world(42)
    assert world == vlnfaith.generate_world(42)
    assert len(world["adjacency"]) == len(world["landmarks"])

    ds = vlnfaith.Dataset.generate(json.dumps({"graph_count": 5, "episodes_per_graph": 6}))
    vocab = ds.vocabulary()
    assert vocab[:5] == ["<pad>", "<unk>", "<mask>", "<bos>", "<eos>"]
    val = ds.episode_ids("val_seen")
    assert val, "empty val_seen split"
    ep = ds.episode(val[0])
    assert ep["tokens"][0] == "<bos>" and ep["tokens"][-1] == "<eos>"
    assert len(ep["rationale"]) == len(ep["path"])

    agent = vlnfaith.Agent("transformer", ds, seed=1)
    curve = agent.train(ds, json.dumps({"epochs": 3, "learning_rate": 0.02}))
    assert len(curve["curve"]) == 3 and curve["curve"][-1]["loss"] < curve["initial_loss"]
    nav = agent.evaluate_navigation(ds, "val_seen")
    assert 0.0 <= nav["spl"] <= nav["sr"] <= 1.0

    traj = agent.rollout(ds, val[0])
    for probs in traj["probs"]:
        assert math.isclose(sum(probs), 1.0, abs_tol=1e-9)

    for method in vlnfaith.METHODS:
        scores = agent.attribute(ds, val[0], 0, method, json.dumps({"attribution": {"ig_steps": 10}}))
        assert len(scores) == len(ep["tokens"])
        assert scores[0] == 0.0 and scores[-1] == 0.0

    assert vlnfaith.select_top_k([0.1, 0.9, 0.5, 0.7], 2, [False, True, True, True]) == [1, 3]

    result = agent.evaluate_faithfulness(ds, "val_seen", ["grad_inp", "random"], k=2,
                                         config=json.dumps({"attribution": {"ig_steps": 10}}))
    assert {a["method"] for a in result["aggregates"]} == {"grad_inp", "random"}
    for r in result["records"]:
        assert math.isclose(r["comp"], r["p_original"] - r["p_erased"], abs_tol=1e-12)

    oracle = agent.compare_with_oracle(ds, "val_seen", ["va_att"])
    assert oracle["aggregates"][-1]["method"] == "oracle"

    with tempfile.TemporaryDirectory() as tmp:
        ds.save(tmp + "/data")
        again = vlnfaith.Dataset.load(tmp + "/data")
        assert len(again) == len(ds)
        agent.save(tmp + "/ckpt", ds)
        loaded = vlnfaith.Agent.load(tmp + "/ckpt", again)
        assert loaded.rollout(again, val[0]) == traj

    try:
        vlnfaith.Agent("lstm", ds)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown architecture accepted")

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
