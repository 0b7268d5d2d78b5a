"""Command-line entry point: corpus generation, training, inference,
evaluation, benchmarking, and one-shot equation solving.

Only the standard library is imported at module level.  The package (and with
it numpy/jax) loads inside the command handlers, after --threads has pinned
the BLAS and XLA pool sizes through environment variables; --threads 1 is the
bit-exact reproducibility mode.

Exit codes: 0 success, 1 user or domain error, 2 internal invariant violation.
All file outputs are written to a temp path and renamed into place, so an
interrupted run never leaves a partial artifact.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys


class CliError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); flag misuse is a user error
        raise CliError(message)


def _apply_threads(n):
    if n is None:
        return
    if n < 1:
        raise CliError(f"--threads must be >= 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)
    eigen = "true" if n > 1 else "false"
    flags = (f"--xla_cpu_multi_thread_eigen={eigen} "
             f"intra_op_parallelism_threads={n}")
    prior = os.environ.get("XLA_FLAGS", "")
    os.environ["XLA_FLAGS"] = f"{prior} {flags}".strip()


def _atomic_write_text(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_json(path, obj):
    _atomic_write_text(path, json.dumps(obj, sort_keys=True))


def _int_list(text):
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise CliError(f"expected a comma-separated integer list, got {text!r}")


# ------------------------------------------------------------------ gen


def cmd_gen(args):
    from .families import (
        FAMILY_IDS,
        UnknownFamilyError,
        generate_corpus,
        write_corpus,
    )

    try:
        corpus = generate_corpus(args.family, args.operators, args.records,
                                 args.seed)
    except UnknownFamilyError:
        raise CliError(f"unknown family {args.family!r}; registered: "
                       + ", ".join(FAMILY_IDS))
    tmp = f"{args.out}.tmp"
    write_corpus(corpus, tmp)
    os.replace(tmp, args.out)
    print(f"wrote {len(corpus.records)} records to {args.out}")
    return 0


# ---------------------------------------------------------------- train


def _model_config(args):
    from .model import ModelConfig

    return ModelConfig(layers=args.layers, heads=args.heads,
                       head_dim=args.head_dim, model_dim=args.model_dim,
                       widening=args.widening)


def cmd_train(args):
    from .families import read_corpus
    from .training import TrainConfig, TrainingDivergedError, train

    corpora = [read_corpus(p) for p in args.data]
    families = tuple(args.families.split(",")) if args.families else None
    config = TrainConfig(steps=args.steps, batch_size=args.batch_size,
                         learning_rate=args.learning_rate,
                         warmup_steps=args.warmup, seed=args.seed,
                         checkpoint_every=args.checkpoint_every,
                         families=families,
                         points_per_function=args.points,
                         keep_best_checkpoint=args.keep_best)
    os.makedirs(args.out, exist_ok=True)
    try:
        params, log = train(corpora, _model_config(args), config,
                            checkpoint_dir=args.out, resume_from=args.resume)
    except TrainingDivergedError as exc:
        raise CliError(f"{exc}; last checkpoint: {exc.last_checkpoint}")
    log.to_csv(os.path.join(args.out, "train_log.csv"))
    final = os.path.join(args.out, f"step_{config.steps:07d}.ckpt")
    last = log.records[-1]
    print(f"finished step {last.step}: train_loss={last.train_loss:.6g} "
          f"test_loss={last.test_loss:.6g}")
    print(f"checkpoint: {final}")
    return 0


# ---------------------------------------------------------------- infer


def cmd_infer(args):
    from .model import forward, load_checkpoint
    from .prompt import prompt_from_json

    params, _ = load_checkpoint(args.checkpoint)
    with open(args.prompt, "r", encoding="utf-8") as fh:
        prompt = prompt_from_json(json.load(fh))
    preds = forward(params, prompt)
    coords = prompt.coords[prompt.query_positions]
    _atomic_json(args.out, {"coords": coords.tolist(),
                            "values": preds.tolist()})
    print(f"wrote {len(preds)} predictions to {args.out}")
    return 0


# ----------------------------------------------------------------- eval


def cmd_eval(args):
    from .evalbench import error_vs_demos, heat_ood_study
    from .families import read_corpus
    from .model import load_checkpoint

    params, meta = load_checkpoint(args.checkpoint)
    counts = _int_list(args.demo_counts)
    keep = args.examples is not None
    if args.ood_heat:
        report = heat_ood_study(params, args.cases, counts,
                                trained_families=meta["families"],
                                seed=args.seed, points_per_function=args.points,
                                keep_examples=keep)
    else:
        if args.data is None:
            raise CliError("--data is required unless --ood-heat is given")
        corpus = read_corpus(args.data)
        report = error_vs_demos(params, corpus, counts, args.n_eval,
                                seed=args.seed,
                                points_per_function=args.points,
                                keep_examples=keep)
    report.to_csv(args.out)
    if keep:
        report.examples_to_json(args.examples)
    for r in report.rows:
        print(f"{r.label} demos={r.demo_count}: "
              f"mean={r.mean_error:.4g} std={r.std_error:.4g} n={r.n_samples}")
    print(f"wrote report to {args.out}")
    return 0


# ---------------------------------------------------------------- bench


def cmd_bench(args):
    from .evalbench import bench_scaling
    from .model import load_checkpoint

    params, _ = load_checkpoint(args.checkpoint)
    report = bench_scaling(params, "poisson_fwd", _int_list(args.sizes),
                           args.repeats, n_demos=args.demos, seed=args.seed)
    report.to_csv(args.out)
    for r in report.rows:
        print(f"N={r.n}: model={r.model_time_s:.4g}s "
              f"solver={r.solver_time_s:.4g}s rel_error={r.model_rel_error:.4g}")
    print(f"wrote benchmark to {args.out}")
    return 0


# ---------------------------------------------------------------- solve


def _control_values(control, axis):
    import numpy as np

    if not isinstance(control, dict):
        raise CliError("control must be an object with 'polynomial' or 'pairs'")
    if "polynomial" in control:
        coeffs = [float(c) for c in control["polynomial"]]
        if not coeffs:
            raise CliError("polynomial control needs at least one coefficient")
        return np.polynomial.polynomial.polyval(axis, coeffs)
    if "pairs" in control:
        pairs = np.asarray(control["pairs"], dtype=np.float64)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise CliError("pairs control must be a list of [coord, value]")
        order = np.argsort(pairs[:, 0])
        pairs = pairs[order]
        if pairs.shape[0] != axis.shape[0] or np.max(np.abs(pairs[:, 0] - axis)) > 1e-12:
            raise CliError("pairs control must supply a value at every grid point")
        return pairs[:, 1].copy()
    raise CliError("control must contain 'polynomial' or 'pairs'")


def _solve_layout(base, direction, grid):
    """(condition coords, query coords) for the declared grid."""
    import numpy as np

    from .families import TAU

    pts = grid.points()
    zeros = np.zeros(grid.n)
    as_t = np.column_stack([pts, zeros])
    as_x = np.column_stack([zeros, pts])
    if base in ("ode1", "ode2", "ode3", "oscillator"):
        return as_t, as_t
    if base in ("poisson", "linear_rd", "nonlinear_rd"):
        return as_x, as_x
    if base in ("conservation", "heat"):
        return as_x, np.column_stack([np.full(grid.n, TAU), pts])
    raise CliError(f"family {base!r} is not solvable from a one-dimensional "
                   "control; supply prompts to `infer` instead")


def _reference_solution(base, direction, params, control, grid):
    """Classical solve of the question, or None when no direct solver applies."""
    import numpy as np

    from .families import HEAT_DT, HEAT_STEPS, LAMBDA, TAU
    from .solvers import (
        FluxSpec,
        euler_integrate,
        heat_step_implicit,
        linear_rd_solve,
        poisson_solve,
        weno_evolve,
    )

    if direction != "forward":
        return None

    def tabulated(f):
        n1 = grid.n - 1

        def rhs(t, u):
            i = min(max(int(round((t - grid.start) / grid.h)), 0), n1)
            return f(control[i], u)

        return rhs

    if base == "ode1":
        return euler_integrate(tabulated(lambda c, u: params["a1"] * c + params["a2"]),
                               params["u0"], grid)
    if base == "ode2":
        return euler_integrate(tabulated(lambda c, u: params["a1"] * c * u + params["a2"]),
                               params["u0"], grid)
    if base == "ode3":
        return euler_integrate(
            tabulated(lambda c, u: params["a1"] * u + params["a2"] * c + params["a3"]),
            params["u0"], grid)
    if base == "poisson":
        return poisson_solve(control, params["u0"], params["u1"], grid)
    if base == "linear_rd":
        return linear_rd_solve(control, params["c"], LAMBDA * params["a"],
                               params["u0"], params["u1"], grid).values
    if base == "heat":
        return heat_step_implicit(control, params["k"], params["alpha"],
                                  params["u0"], params["uL"], HEAT_DT, grid,
                                  HEAT_STEPS)
    if base == "conservation":
        return weno_evolve(control, FluxSpec(params["a"], params["b"], params["c"]),
                           TAU, grid)
    return None  # no direct classical solver for this family


def cmd_solve(args):
    import numpy as np

    from .evalbench import relative_error
    from .families import (
        FAMILY_IDS,
        OperatorSpec,
        UnknownFamilyError,
        family_parameter_schema,
        generate_record,
        parse_family_id,
    )
    from .gridfn import FunctionSample, Grid1D
    from .model import forward, load_checkpoint
    from .prompt import MAX_DEMOS, build_prompt, subsample_function
    from .randproc import RngStream, mix_seed

    with open(args.spec, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    for key in ("equation_type", "domain", "n_demos", "control"):
        if key not in spec:
            raise CliError(f"solve spec is missing {key!r}")
    family_id = spec["equation_type"]
    try:
        base, direction = parse_family_id(family_id)
    except UnknownFamilyError:
        raise CliError(f"unknown family {family_id!r}; registered: "
                       + ", ".join(FAMILY_IDS))
    n_demos = int(spec["n_demos"])
    if not 1 <= n_demos <= MAX_DEMOS:
        raise CliError(f"n_demos must be in 1..{MAX_DEMOS}, got {n_demos}")
    domain = spec["domain"]
    grid = Grid1D(float(domain["start"]), float(domain["end"]), int(domain["n"]))

    op_params = {**spec.get("parameters", {}), **spec.get("conditions", {})}
    try:
        op = OperatorSpec(base, direction, {k: float(v) for k, v in op_params.items()}, 0)
    except ValueError as exc:
        schema = ", ".join(f"{n} in [{lo}, {hi}]"
                           for n, lo, hi in family_parameter_schema(family_id))
        raise CliError(f"{exc}; {family_id} takes parameters: {schema}")

    cond_coords, query_coords = _solve_layout(base, direction, grid)
    control = _control_values(spec["control"], grid.points())
    question = FunctionSample(coords=cond_coords, values=control)

    demos = []
    for j in range(n_demos):
        record = generate_record(op, RngStream(mix_seed(args.seed, j)))
        sub = RngStream(mix_seed(args.seed, j), 1)
        demos.append(dataclasses.replace(
            record,
            condition=subsample_function(
                record.condition, min(args.points, len(record.condition)), sub),
            qoi=subsample_function(
                record.qoi, min(args.points, len(record.qoi)), sub)))

    params, meta = load_checkpoint(args.checkpoint)
    prompt = build_prompt(demos, question, query_coords)
    preds = forward(params, prompt)

    reference = _reference_solution(base, direction, op.params, control, grid)
    ood = None if meta["families"] is None else family_id not in meta["families"]
    out = {
        "equation_type": family_id,
        "n_demos": n_demos,
        "prediction": {"coords": query_coords.tolist(),
                       "values": preds.tolist()},
        "reference": None if reference is None else {
            "values": np.asarray(reference).tolist(),
            "relative_error": relative_error(preds, reference)},
        "out_of_distribution": ood,
    }
    _atomic_json(args.out, out)
    msg = f"wrote prediction to {args.out}"
    if reference is not None:
        msg += f" (relative error vs classical solver: {out['reference']['relative_error']:.4g})"
    if ood:
        msg += " [out-of-distribution family]"
    print(msg)
    return 0


# ----------------------------------------------------------------- wiring


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=None)

    p = _Parser(prog="iconops",
                description="Operator learning from in-context demonstrations.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", parents=[common], help="generate a corpus file")
    g.add_argument("--family", required=True)
    g.add_argument("--operators", type=int, default=10)
    g.add_argument("--records", type=int, default=8)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--data", action="append", required=True,
                   help="corpus file; repeat for several families")
    t.add_argument("--steps", type=int, default=20000)
    t.add_argument("--batch-size", type=int, default=16)
    t.add_argument("--learning-rate", type=float, default=1e-4)
    t.add_argument("--warmup", type=int, default=1000)
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--points", type=int, default=15)
    t.add_argument("--layers", type=int, default=6)
    t.add_argument("--heads", type=int, default=8)
    t.add_argument("--head-dim", type=int, default=None)
    t.add_argument("--model-dim", type=int, default=256)
    t.add_argument("--widening", type=int, default=4)
    t.add_argument("--families", default=None,
                   help="comma-separated subset of the supplied corpora")
    t.add_argument("--keep-best", action="store_true")
    t.add_argument("--resume", default=None)
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", parents=[common], help="run one prompt")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--prompt", required=True, help="prompt JSON file")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", parents=[common], help="error vs demo count")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default=None)
    e.add_argument("--demo-counts", default="1,2,3,4,5")
    e.add_argument("--n-eval", type=int, default=50)
    e.add_argument("--points", type=int, default=15)
    e.add_argument("--examples", default=None,
                   help="also dump per-example records to this JSON path")
    e.add_argument("--ood-heat", action="store_true",
                   help="run the heat-equation out-of-distribution study")
    e.add_argument("--cases", type=int, default=6)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", parents=[common],
                       help="model vs classical solver timing")
    b.add_argument("--checkpoint", required=True)
    b.add_argument("--sizes", default="50,100,200,500")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--demos", type=int, default=1)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_bench)

    s = sub.add_parser("solve", parents=[common],
                       help="one-shot equation solving from a spec file")
    s.add_argument("--spec", required=True, help="SolveSpec JSON file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--points", type=int, default=15)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_threads(args.threads)
        return args.func(args)
    except (CliError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except RuntimeError as exc:
        from .families import GenerationError
        from .model import GradientError

        if isinstance(exc, (GenerationError, GradientError)):
            print(f"error: {exc}", file=sys.stderr)
            return 1
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - the code-2 contract needs a catch-all
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
