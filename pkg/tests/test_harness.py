import pytest

from oracles import tiny_lm_problem
from perklab.harness import MissingModelError, grid_eval, profile_inference, profile_train
from perklab.meta import TGUConfig
from perklab.reports import EvalReport


def fake_eval(model, problems):
    # a "model" is its accuracy; problems are plain ints
    n_right = int(round(model * len(problems)))
    return EvalReport([{"correct": i < n_right} for i in range(len(problems))])


def test_grid_cells_and_diagonal(tmp_path):
    models = {"8": 1.0, "16": 0.5}
    tests = {"8": list(range(4)), "16": list(range(4)), "32": list(range(2))}
    rep = grid_eval(models, tests, fake_eval, axis="length")
    assert len(rep.grid) == 6
    assert [k for k, c in rep.grid.items() if c["diagonal"]] == [("8", "8"), ("16", "16")]
    assert rep.cell("16", "32") == 0.5 and rep.grid[("8", "32")]["count"] == 2
    rep.to_csv(tmp_path / "g.csv")
    header = (tmp_path / "g.csv").read_text().splitlines()[0]
    assert header == "train_length,test_length,accuracy,count,diagonal"


def test_grid_missing_model():
    with pytest.raises(MissingModelError, match="64"):
        grid_eval({"8": 1.0}, {"8": [0]}, fake_eval, train_settings=["8", "64"])


@pytest.fixture(scope="module")
def contexts():
    base, meta, prompt, _ = tiny_lm_problem(0)
    small = prompt
    big = tiny_lm_problem(0)[2]
    big.batch.chunks = big.batch.chunks * 3
    return base, meta, {"4": small, "12": big}


def test_profile_train_rows(contexts):
    base, meta, ctx = contexts
    rep = profile_train(base, meta, ctx, [TGUConfig(2, 1), TGUConfig(2, 2)], warmup=0, repeats=1)
    assert len(rep.rows) == 4
    assert all(r["status"] == "ok" and r["warmup_iters"] == 0 for r in rep.rows)
    t1 = rep.select(setting="4", retain=1)[0]["peak_graph_nodes"]
    t2 = rep.select(setting="4", retain=2)[0]["peak_graph_nodes"]
    assert t2 > t1


def test_element_budget_stops_long_contexts(contexts):
    base, meta, ctx = contexts
    probe = profile_train(base, meta, ctx, [TGUConfig(2, 2)], warmup=0, repeats=1)
    small = probe.select(setting="4")[0]
    big = probe.select(setting="12")[0]
    # batched chunks: node count ignores length, element count does not
    assert big["peak_graph_nodes"] == small["peak_graph_nodes"]
    assert big["peak_graph_elems"] > small["peak_graph_elems"]
    budget = (small["peak_graph_elems"] + big["peak_graph_elems"]) // 2
    rep = profile_train(base, meta, ctx, [TGUConfig(2, 2)], warmup=0, repeats=1, elem_budget=budget)
    assert [r["status"] for r in rep.rows] == ["ok", "oom"]
    ctx3 = {"4": ctx["4"], "12": ctx["12"], "12b": ctx["12"]}
    rep = profile_train(base, meta, ctx3, [TGUConfig(2, 2)], warmup=0, repeats=1, elem_budget=budget)
    assert [r["status"] for r in rep.rows] == ["ok", "oom", "skipped_after_oom"]


def test_node_budget_stops_full_unroll_only(contexts):
    base, meta, ctx = contexts
    probe = profile_train(base, meta, ctx, [TGUConfig(2, 1), TGUConfig(2, 2)], warmup=0, repeats=1)
    t1 = probe.select(setting="4", retain=1)[0]["peak_graph_nodes"]
    t2 = probe.select(setting="4", retain=2)[0]["peak_graph_nodes"]
    rep = profile_train(base, meta, ctx, [TGUConfig(2, 1), TGUConfig(2, 2)], warmup=0, repeats=1,
                        node_budget=(t1 + t2) // 2)
    assert [r["status"] for r in rep.select(retain=1)] == ["ok", "ok"]
    assert [r["status"] for r in rep.select(retain=2)] == ["oom", "skipped_after_oom"]


def test_profile_inference_skips_large_accum(contexts):
    base, meta, ctx = contexts
    rep = profile_inference(base, meta, {"4": ctx["4"]}, TGUConfig(2, 1), accums=(1, 2, 8), max_new=3,
                            warmup=1, repeats=3)
    n = len(ctx["4"].batch)
    assert n == 4
    status = {r["accum"]: r["status"] for r in rep.rows}
    assert status == {1: "ok", 2: "ok", 8: "skipped_accum_exceeds_chunks"}
    assert all(r["repeats"] == 3 for r in rep.rows if r["status"] == "ok")
    assert rep.select(accum=2)[0]["peak_graph_nodes"] <= rep.select(accum=1)[0]["peak_graph_nodes"]
