"""Evaluation grids and the memory/runtime profiling protocol.

Memory is reported two ways: the peak number of live graph nodes (exact and
machine independent) and the peak number of bytes allocated while the
measurement runs, as tracked by :mod:`tracemalloc`.
"""

from __future__ import annotations

import statistics
import time
import tracemalloc
from typing import Callable, Mapping, Sequence

from . import autodiff as ad
from .baseline import icr_prompts
from .meta import MetaParams, TGUConfig, problem_gradient, run_adapt
from .inner import answer_with_adapter
from .model import BaseParams, batch_greedy_decode, extend_positions
from .render import TTLPrompt
from .reports import EvalReport, ProfileReport
from .taskgen.problem import ReasoningProblem
from .taskgen.vocab import Vocabulary

WARMUP_ITERS = 10


class MissingModelError(KeyError):
    pass


def grid_eval(
    models: Mapping[str, object],
    test_sets: Mapping[str, Sequence[ReasoningProblem]],
    evaluate: Callable[[object, Sequence[ReasoningProblem]], EvalReport],
    axis: str = "length",
    train_settings: Sequence[str] | None = None,
) -> EvalReport:
    """Every trained model against every test set.

    ``evaluate(model, problems)`` is the scoring path (``meta_evaluate`` or the
    baseline evaluator), so a cell is exactly that evaluator on its bucket.
    Cells where the train and test settings agree are flagged as diagonal.
    """
    train_settings = list(train_settings if train_settings is not None else models)
    report = EvalReport(axis=axis)
    for tr in train_settings:
        if tr not in models:
            raise MissingModelError(f"no trained model for {axis} setting {tr!r}")
        for te, problems in test_sets.items():
            rep = evaluate(models[tr], problems)
            for r in rep.rows:
                report.rows.append({**r, "train": tr, "test": te})
            report.grid[(str(tr), str(te))] = {
                "accuracy": rep.accuracy,
                "count": rep.count,
                "diagonal": str(tr) == str(te),
            }
    return report


def _measure(fn: Callable[[], object], warmup: int, repeats: int) -> dict:
    """Run ``fn`` ``warmup`` untimed times, then ``repeats`` timed ones.

    Returns the median wall clock, and the maxima of peak graph nodes and
    peak traced bytes over the timed repetitions.
    """
    for _ in range(warmup):
        fn()
    times, nodes, elems, bytes_ = [], [], [], []
    for _ in range(repeats):
        ad.reset_peak_nodes()
        tracemalloc.start()
        t0 = time.perf_counter()
        try:
            fn()
            times.append(time.perf_counter() - t0)
            bytes_.append(tracemalloc.get_traced_memory()[1])
        finally:
            tracemalloc.stop()
        census = ad.graph_census()
        nodes.append(census["peak"])
        elems.append(census["peak_elems"])
    return {
        "wall_clock_s": statistics.median(times),
        "peak_graph_nodes": max(nodes),
        "peak_graph_elems": max(elems),
        "peak_bytes": max(bytes_),
        "repeats": repeats,
    }


def profile_train(
    base: BaseParams,
    meta: MetaParams,
    contexts: Mapping[str, TTLPrompt],
    settings: Sequence[TGUConfig],
    warmup: int = WARMUP_ITERS,
    repeats: int = 3,
    node_budget: int | None = None,
    pad_id: int = 0,
    elem_budget: int | None = None,
) -> ProfileReport:
    """Cost of one meta-gradient per (TGU setting, context).

    With ``node_budget`` (graph nodes) or ``elem_budget`` (values held by
    graph nodes) a measurement whose graph outgrows the budget is recorded as
    ``oom`` and the remaining contexts of that setting are skipped, the way a
    real device would stop the curve. Chunks run as one batch, so the node
    count follows T but not the context length; the element count follows both.
    """
    report = ProfileReport(warmup_iters=warmup)
    for tgu in settings:
        exhausted = False
        for label, prompt in contexts.items():
            row = {"method": "perk", "setting": label, "n_chunks": len(prompt.batch),
                   "retain": tgu.retain, "n_steps": tgu.n_steps, "accum": 1}
            if exhausted:
                report.add(**row, status="skipped_after_oom")
                continue
            m = _measure(lambda: problem_gradient(base, meta, prompt, tgu, pad_id), warmup, repeats)
            over_nodes = node_budget is not None and m["peak_graph_nodes"] > node_budget
            over_elems = elem_budget is not None and m["peak_graph_elems"] > elem_budget
            if over_nodes or over_elems:
                exhausted = True
                report.add(**row, **m, status="oom")
            else:
                report.add(**row, **m)
    return report


def profile_inference(
    base: BaseParams,
    meta: MetaParams | None,
    contexts: Mapping[str, TTLPrompt],
    tgu: TGUConfig,
    accums: Sequence[int] = (1, 2, 4, 8, 16),
    ft_model: BaseParams | None = None,
    icr_problems: Mapping[str, ReasoningProblem] | None = None,
    vocab: Vocabulary | None = None,
    max_new: int = 64,
    warmup: int = WARMUP_ITERS,
    repeats: int = 3,
) -> ProfileReport:
    """End-to-end answer cost: adaptation plus ``max_new`` greedy tokens.

    Decoding never stops early (no end token), so every run produces exactly
    ``max_new`` tokens. Accumulation values above the chunk count are recorded
    as skipped.
    """
    report = ProfileReport(warmup_iters=warmup)
    if meta is not None:
        for label, prompt in contexts.items():
            n = len(prompt.batch)
            for acc in accums:
                row = {"method": "perk", "setting": label, "n_chunks": n, "retain": 0,
                       "n_steps": tgu.n_steps, "accum": acc}
                if acc > n:
                    report.add(**row, status="skipped_accum_exceeds_chunks")
                    continue

                def run(prompt=prompt, acc=acc):
                    trace = run_adapt(base, meta, prompt, tgu, retain=0, accum=acc)
                    answer_with_adapter(base, trace, prompt.question, max_new, eos_id=-1)

                report.add(**row, **_measure(run, warmup, repeats))
    if ft_model is not None and icr_problems:
        for label, problem in icr_problems.items():
            prompts, model = icr_prompts([problem], vocab, ft_model, True)
            prompt = prompts[0].prompt
            if len(prompt) + max_new > model.config.max_positions:
                model = extend_positions(model, len(prompt) + max_new)

            def run(model=model, prompt=prompt):
                batch_greedy_decode(model, None, [prompt], max_new, eos_id=-1)

            row = {"method": "ft-icr", "setting": label, "n_chunks": None, "retain": None,
                   "n_steps": None, "accum": None}
            report.add(**row, **_measure(run, warmup, repeats))
    return report
