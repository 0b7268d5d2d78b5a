"""Error metrics, demo-count sweeps, the heat-equation out-of-distribution
study, global-pattern metrics, and the solver-vs-model timing benchmark.

Relative error is the L2-norm ratio ||pred - truth|| / ||truth||.  When the
truth has zero norm the absolute norm ||pred|| is reported instead and the
case is counted in the report's zero_norm_cases column.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .families import (
    Corpus,
    DemoRecord,
    GP_SPEC,
    OperatorSpec,
    generate_record,
    sample_operator,
)
from .gridfn import FunctionSample, Grid1D
from .model import ModelParams, forward
from .prompt import MAX_DEMOS, build_prompt, subsample_function
from .randproc import RngStream, gp_sample, mix_seed
from .solvers import poisson_solve
from .training import corpus_family_id, held_out_split


class EvalError(ValueError):
    pass


# ------------------------------------------------------------------ metrics


def relative_error(pred, truth) -> float:
    """||pred - truth||_2 / ||truth||_2, or ||pred||_2 when truth is all zero."""
    return _relative_error_flagged(pred, truth)[0]


def _relative_error_flagged(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise EvalError(f"shape mismatch: pred {p.shape} vs truth {t.shape}")
    denom = np.linalg.norm(t)
    num = np.linalg.norm(p - t)
    if denom == 0.0:
        return float(np.linalg.norm(p)), True
    return float(num / denom), False


def global_pattern_metrics(preds, truths) -> dict:
    """Element-level vs averaged-profile agreement on E examples x P points.

    token_error is the squared Frobenius norm of the difference divided by the
    element count (the mean squared per-token difference); average_error is the
    mean squared difference between the two column-mean profiles.  Averaging
    before squaring can only shrink the result, so average_error <= token_error
    always holds.
    """
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 2:
        raise EvalError(f"shape mismatch: preds {p.shape} vs truths {t.shape}")
    token = float(np.mean((p - t) ** 2))
    average = float(np.mean((p.mean(axis=0) - t.mean(axis=0)) ** 2))
    return {"token_error": token, "average_error": average}


# ------------------------------------------------------------------ reports


@dataclass(frozen=True)
class EvalRow:
    label: str
    demo_count: int
    mean_error: float
    std_error: float
    n_samples: int
    zero_norm_cases: int = 0

    def __post_init__(self):
        if not 1 <= self.demo_count <= MAX_DEMOS:
            raise EvalError(f"demo_count must be in 1..{MAX_DEMOS}")
        if not (self.mean_error >= 0.0 and self.std_error >= 0.0):
            raise EvalError("errors must be nonnegative")
        if self.n_samples < 1:
            raise EvalError("each row needs at least one sample")


@dataclass
class EvalReport:
    rows: list
    examples: list = None

    def mean(self, label: str, demo_count: int) -> float:
        for r in self.rows:
            if r.label == label and r.demo_count == demo_count:
                return r.mean_error
        raise KeyError((label, demo_count))

    def to_csv(self, path) -> None:
        lines = ["label,demo_count,mean_rel_error,std_rel_error,n_samples,zero_norm_cases"]
        for r in self.rows:
            lines.append(f"{r.label},{r.demo_count},{r.mean_error!r},"
                         f"{r.std_error!r},{r.n_samples},{r.zero_norm_cases}")
        _write_text(path, "\n".join(lines) + "\n")

    def examples_to_json(self, path) -> None:
        import json

        if self.examples is None:
            raise EvalError("report was built without per-example records")
        _write_text(path, json.dumps(self.examples, sort_keys=True))


@dataclass(frozen=True)
class BenchRow:
    n: int
    model_time_s: float
    solver_time_s: float
    model_rel_error: float


@dataclass
class BenchReport:
    rows: list

    def __post_init__(self):
        ns = [r.n for r in self.rows]
        if ns != sorted(ns) or len(set(ns)) != len(ns):
            raise EvalError("bench rows must be strictly ascending in N")
        for r in self.rows:
            if not (r.model_time_s > 0.0 and r.solver_time_s > 0.0):
                raise EvalError("wall times must be positive")

    def to_csv(self, path) -> None:
        lines = ["n,model_time_s,solver_time_s,model_rel_error"]
        for r in self.rows:
            lines.append(f"{r.n},{r.model_time_s!r},{r.solver_time_s!r},"
                         f"{r.model_rel_error!r}")
        _write_text(path, "\n".join(lines) + "\n")


def _write_text(path, text: str) -> None:
    import os

    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


# ------------------------------------------------------------- demo sweeps


def _check_demo_counts(demo_counts):
    counts = [int(k) for k in demo_counts]
    if not counts or any(not 1 <= k <= MAX_DEMOS for k in counts):
        raise EvalError(f"demo counts must be a nonempty subset of 1..{MAX_DEMOS}")
    return counts


def _inference_prompt(demos, question, points, rng, query_sel=None):
    subs = [replace(r, condition=subsample_function(r.condition, min(points, len(r.condition)), rng),
                    qoi=subsample_function(r.qoi, min(points, len(r.qoi)), rng))
            for r in demos]
    q_cond = subsample_function(question.condition,
                                min(points, len(question.condition)), rng)
    if query_sel is None:
        q_qoi = subsample_function(question.qoi,
                                   min(points, len(question.qoi)), rng)
    else:
        q_qoi = FunctionSample(coords=question.qoi.coords[query_sel],
                               values=question.qoi.values[query_sel])
    prompt = build_prompt(subs, q_cond, q_qoi.coords)
    return prompt, q_qoi.values


def error_vs_demos(params: ModelParams, corpus: Corpus, demo_counts, n_eval: int,
                   *, seed: int = 0, points_per_function: int = 15,
                   keep_examples: bool = False, dtype=np.float64) -> EvalReport:
    """Mean relative error on held-out operators for each demo count."""
    counts = _check_demo_counts(demo_counts)
    if n_eval < 1:
        raise EvalError(f"n_eval must be >= 1, got {n_eval}")
    _, held = held_out_split(corpus)
    label = corpus_family_id(corpus)
    rows, examples = [], [] if keep_examples else None
    for k in counts:
        errs, flags = [], 0
        for i in range(n_eval):
            rng = RngStream(mix_seed(seed, k, i))
            op = held[rng.integers(len(held))]
            records = corpus.records_for(op)
            if k + 1 > len(records):
                raise EvalError(
                    f"operator {op} has {len(records)} records; "
                    f"{k} demos plus a question need {k + 1}")
            perm = rng.shuffle_indices(len(records))
            demos = [records[j] for j in perm[:k]]
            question = records[perm[k]]
            prompt, truth = _inference_prompt(demos, question,
                                              points_per_function, rng)
            pred = forward(params, prompt, dtype=dtype)
            err, flagged = _relative_error_flagged(pred, truth)
            errs.append(err)
            flags += flagged
            if keep_examples:
                examples.append({"label": label, "demo_count": k, "case": i,
                                 "operator_id": op,
                                 "coords": prompt.coords[-len(truth):].tolist(),
                                 "pred": pred.tolist(), "truth": truth.tolist(),
                                 "rel_error": err})
        rows.append(EvalRow(label=label, demo_count=k,
                            mean_error=float(np.mean(errs)),
                            std_error=float(np.std(errs)),
                            n_samples=n_eval, zero_norm_cases=flags))
    return EvalReport(rows=rows, examples=examples)


# --------------------------------------------------------------- heat study

_HEAT_VARIANTS = (("heat_homogeneous", True), ("heat_nonhomogeneous", False))


def heat_ood_study(params: ModelParams, n_cases: int, demo_counts, *,
                   trained_families, seed: int = 0,
                   points_per_function: int = 15, keep_examples: bool = False,
                   dtype=np.float64) -> EvalReport:
    """Error vs demo count on heat-equation prompts the model never trained
    on, for the homogeneous (decay rate zero) and nonhomogeneous variants
    separately.  `trained_families` must be the family list recorded in the
    checkpoint; a heat-trained checkpoint is rejected because it would
    contaminate the out-of-distribution claim.

    All cases of a variant share one set of query points (the quantity of
    interest lives on a fixed grid), so retained examples form an aligned
    examples-by-points matrix for global_pattern_metrics.
    """
    if trained_families is None:
        raise EvalError("trained_families is required; pass the checkpoint's "
                        "family list to certify heat was not trained on")
    if any(f.startswith("heat") for f in trained_families):
        raise EvalError("checkpoint was trained on heat; the study needs heat "
                        "to be out of distribution")
    if n_cases < 1:
        raise EvalError(f"n_cases must be >= 1, got {n_cases}")
    counts = _check_demo_counts(demo_counts)

    rows, examples = [], [] if keep_examples else None
    for vi, (label, homogeneous) in enumerate(_HEAT_VARIANTS):
        cases = []
        for j in range(n_cases):
            op = sample_operator("heat_fwd", RngStream(mix_seed(seed, vi, j)),
                                 operator_id=j)
            if homogeneous:
                op = OperatorSpec("heat", "forward",
                                  {**op.params, "alpha": 0.0}, j)
            records = [generate_record(op, RngStream(mix_seed(seed, vi, j, r)))
                       for r in range(MAX_DEMOS + 1)]
            cases.append(records)
        # one query subset per variant keeps columns aligned across cases
        n_qoi = len(cases[0][-1].qoi)
        q_sel = RngStream(mix_seed(seed, vi), 1).shuffle_indices(n_qoi)
        q_sel = np.sort(q_sel[:min(points_per_function, n_qoi)])
        for k in counts:
            errs, flags = [], 0
            for j, records in enumerate(cases):
                rng = RngStream(mix_seed(seed, vi, j, k), 2)
                prompt, truth = _inference_prompt(records[:k], records[-1],
                                                  points_per_function, rng,
                                                  query_sel=q_sel)
                pred = forward(params, prompt, dtype=dtype)
                err, flagged = _relative_error_flagged(pred, truth)
                errs.append(err)
                flags += flagged
                if keep_examples:
                    examples.append({"label": label, "demo_count": k, "case": j,
                                     "coords": prompt.coords[-len(truth):].tolist(),
                                     "pred": pred.tolist(),
                                     "truth": truth.tolist(), "rel_error": err})
            rows.append(EvalRow(label=label, demo_count=k,
                                mean_error=float(np.mean(errs)),
                                std_error=float(np.std(errs)),
                                n_samples=n_cases, zero_norm_cases=flags))
    return EvalReport(rows=rows, examples=examples)


# ---------------------------------------------------------------- benchmark


def bench_scaling(params: ModelParams, family: str, sizes, repeats: int, *,
                  n_demos: int = 1, seed: int = 0,
                  dtype=np.float32) -> BenchReport:
    """Median model-inference wall time vs the tridiagonal solve on N-point
    boundary-value prompts.  The first model call per size is a warm-up (jit
    compilation is not inference time); medians over `repeats` suppress
    scheduler noise.
    """
    if family not in ("poisson", "poisson_fwd"):
        raise EvalError("only the poisson family is benchmarked")
    if repeats < 3:
        raise EvalError(f"repeats must be >= 3, got {repeats}")
    sizes = sorted(int(n) for n in sizes)
    if not sizes or sizes[0] < 3:
        raise EvalError("sizes must be integers >= 3")
    if sizes[-1] > 500:
        raise EvalError("sizes beyond 500 points are out of the tested range")
    if len(set(sizes)) != len(sizes):
        raise EvalError("sizes must be distinct")
    if not 1 <= n_demos <= MAX_DEMOS:
        raise EvalError(f"n_demos must be in 1..{MAX_DEMOS}")
    if not time.get_clock_info("perf_counter").monotonic:
        raise EvalError("no monotonic clock available for timing")

    rows = []
    for size in sizes:
        grid = Grid1D(0.0, 1.0, size)
        x = grid.points()
        coords = np.column_stack([np.zeros(size), x])
        rng = RngStream(mix_seed(seed, size))
        draws = [gp_sample(coords, GP_SPEC, rng) for _ in range(n_demos + 1)]
        records = []
        for c in draws[:-1]:
            u = poisson_solve(c, 0.0, 0.0, grid)
            records.append(DemoRecord(
                operator=OperatorSpec("poisson", "forward",
                                      {"u0": 0.0, "u1": 0.0}, 0),
                condition=FunctionSample(coords=coords, values=c),
                qoi=FunctionSample(coords=coords, values=u), seed=0))
        c_q = draws[-1]
        prompt = build_prompt(records,
                              FunctionSample(coords=coords, values=c_q),
                              coords)

        forward(params, prompt, dtype=dtype)  # warm-up
        model_times, preds = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            preds = forward(params, prompt, dtype=dtype)
            model_times.append(time.perf_counter() - t0)
        solver_times, truth = [], None
        for _ in range(repeats):
            t0 = time.perf_counter()
            truth = poisson_solve(c_q, 0.0, 0.0, grid)
            solver_times.append(time.perf_counter() - t0)
        rows.append(BenchRow(n=size,
                             model_time_s=float(np.median(model_times)),
                             solver_time_s=float(np.median(solver_times)),
                             model_rel_error=relative_error(preds, truth)))
    return BenchReport(rows=rows)
