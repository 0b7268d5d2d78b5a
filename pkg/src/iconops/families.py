"""Problem-family registry: operators, record generation, corpus serialization.

Each family maps sampled operator parameters plus per-record randomness to a
(condition, QoI) pair of sampled functions. Forward and inverse variants share
one construction; inverse records swap the two fields. Corpora are JSON-lines
files whose first line is a metadata object (format_version 1) and whose
remaining lines are records; floats round-trip exactly through repr.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gridfn import (
    FunctionSample,
    Grid1D,
    Grid2D,
    blend_to_boundaries_1d,
    blend_to_time_slices_2d,
    fd_derivative_1d,
    fd_partials_2d,
    sample_1d,
)
from .randproc import RbfKernelSpec, RngStream, gp_sample, mix_seed
from .solvers import (
    FluxSpec,
    euler_integrate,
    heat_step_implicit,
    linear_rd_solve,
    poisson_solve,
    weno_evolve,
)


class UnknownFamilyError(ValueError):
    """Family identifier not present in the registry."""


class GenerationError(RuntimeError):
    """A solver failed while generating a record; carries family context."""


class CorpusFormatError(ValueError):
    """Corpus file violates the JSON-lines layout."""


class CorpusVersionError(CorpusFormatError):
    """Corpus file declares an unsupported format version."""


FORMAT_VERSION = 1
LAMBDA = 0.05           # diffusion scale for the reaction-diffusion pair
TAU = 0.1               # evolution horizon for conservation-law and heat QoIs
HEAT_DT = 1e-3
HEAT_STEPS = 100        # HEAT_DT * HEAT_STEPS == TAU

GP_SPEC = RbfKernelSpec(length_scale=0.2, variance=2.0)

ODE_GRID = Grid1D(0.0, 1.0, 50)
X_GRID = Grid1D(0.0, 1.0, 50)
OSC_GRID = Grid1D(0.0, 1.0, 99)          # index 49 is t = 0.5 exactly
OSC_SPLIT = 49
CONS_GRID = Grid1D(0.0, 1.0, 128)
PDE2D_GRID = Grid2D(x_grid=Grid1D(0.0, 1.0, 26), t_grid=Grid1D(0.0, 1.0, 26))


@dataclass(frozen=True)
class OperatorSpec:
    family: str
    direction: str
    params: dict
    operator_id: int

    def __post_init__(self):
        if self.family not in _BASES:
            raise UnknownFamilyError(f"unknown family {self.family!r}")
        if self.direction not in ("forward", "inverse"):
            raise ValueError(f"direction must be forward|inverse, got {self.direction!r}")
        base = _BASES[self.family]
        if self.direction == "inverse" and not base.invertible:
            raise ValueError(f"family {self.family!r} has no inverse variant")
        declared = {name for name, _, _ in base.param_bounds}
        if set(self.params) != declared:
            raise ValueError(
                f"{self.family} expects params {sorted(declared)}, got {sorted(self.params)}")
        for name, lo, hi in base.param_bounds:
            v = self.params[name]
            if not (np.isfinite(v) and lo <= v <= hi):
                raise ValueError(f"{self.family} param {name}={v} outside [{lo}, {hi}]")


@dataclass(frozen=True)
class DemoRecord:
    operator: OperatorSpec
    condition: FunctionSample
    qoi: FunctionSample
    seed: int


@dataclass
class Corpus:
    metadata: dict
    records: list = field(default_factory=list)

    def __post_init__(self):
        groups = {}
        for r in self.records:
            groups.setdefault(r.operator.operator_id, []).append(r)
        for oid, recs in groups.items():
            if len(recs) < 6:
                raise ValueError(
                    f"operator {oid} has {len(recs)} records; at least 6 required "
                    "(5 demos plus a question)")
        self._groups = groups

    def operator_ids(self) -> list:
        return sorted(self._groups)

    def records_for(self, operator_id: int) -> list:
        return list(self._groups[operator_id])

    def __len__(self):
        return len(self.records)


# ----------------------------------------------------------------- families

@dataclass(frozen=True)
class FamilyDef:
    name: str
    # (param name, low, high) in sampling order
    param_bounds: tuple
    build: Callable
    invertible: bool = True
    grids: dict = field(default_factory=dict)
    # sampling range when narrower than the validation bound (heat alpha: the
    # homogeneous alpha=0 study case must validate but is never sampled)
    sample_bounds: dict = field(default_factory=dict)


def _interp_rhs(c: np.ndarray, grid: Grid1D, f):
    """Index-exact lookup of tabulated c(t) for Euler stepping."""
    n1 = grid.n - 1

    def rhs(t, u):
        i = int(round((t - grid.start) / grid.h))
        i = min(max(i, 0), n1)
        return f(c[i], u)

    return rhs


def _build_ode1(p, rng):
    c = gp_sample(ODE_GRID.points(), GP_SPEC, rng)
    u = euler_integrate(_interp_rhs(c, ODE_GRID, lambda ci, ui: p["a1"] * ci + p["a2"]),
                        p["u0"], ODE_GRID)
    return sample_1d(ODE_GRID, c, "t"), sample_1d(ODE_GRID, u, "t")


def _build_ode2(p, rng):
    c = gp_sample(ODE_GRID.points(), GP_SPEC, rng)
    u = euler_integrate(
        _interp_rhs(c, ODE_GRID, lambda ci, ui: p["a1"] * ci * ui + p["a2"]),
        p["u0"], ODE_GRID)
    return sample_1d(ODE_GRID, c, "t"), sample_1d(ODE_GRID, u, "t")


def _build_ode3(p, rng):
    c = gp_sample(ODE_GRID.points(), GP_SPEC, rng)
    u = euler_integrate(
        _interp_rhs(c, ODE_GRID, lambda ci, ui: p["a1"] * ui + p["a2"] * ci + p["a3"]),
        p["u0"], ODE_GRID)
    return sample_1d(ODE_GRID, c, "t"), sample_1d(ODE_GRID, u, "t")


def _build_oscillator(p, rng):
    # amplitude, period, and phase are fresh per record; k identifies the operator
    amp = rng.uniform(0.5, 1.5)
    period = rng.uniform(0.3, 1.0)
    eta = rng.uniform(0.0, 2.0 * np.pi)
    t = OSC_GRID.points()
    u = amp * np.sin(2.0 * np.pi / period * t + eta) * np.exp(-p["k"] * t)
    early = FunctionSample(
        coords=np.column_stack([t[:OSC_SPLIT + 1], np.zeros(OSC_SPLIT + 1)]),
        values=u[:OSC_SPLIT + 1])
    late = FunctionSample(
        coords=np.column_stack([t[OSC_SPLIT:], np.zeros(OSC_GRID.n - OSC_SPLIT)]),
        values=u[OSC_SPLIT:])
    return early, late


def _build_poisson(p, rng):
    c = gp_sample(X_GRID.points(), GP_SPEC, rng)
    u = poisson_solve(c, p["u0"], p["u1"], X_GRID)
    return sample_1d(X_GRID, c, "x"), sample_1d(X_GRID, u, "x")


def _build_linear_rd(p, rng):
    raw = gp_sample(X_GRID.points(), GP_SPEC, rng)
    k = np.logaddexp(0.0, raw)  # softplus keeps the reaction term positive
    res = linear_rd_solve(k, p["c"], LAMBDA * p["a"], p["u0"], p["u1"], X_GRID)
    return sample_1d(X_GRID, k, "x"), sample_1d(X_GRID, res.values, "x")


def _build_nonlinear_rd(p, rng):
    # u-first: draw the solution, then manufacture the source that produces it
    raw = gp_sample(X_GRID.points(), GP_SPEC, rng)
    u = blend_to_boundaries_1d(raw, p["u0"], p["u1"])
    uxx = fd_derivative_1d(u, X_GRID.h, 2)
    c = -LAMBDA * p["a"] * uxx + p["k"] * u**3
    return sample_1d(X_GRID, c, "x"), sample_1d(X_GRID, u, "x")


def _periodic_circle_coords(grid: Grid1D) -> np.ndarray:
    # embed the unique nodes on a circle of circumference 1 so the RBF kernel
    # (on chord distance) is exactly periodic and endpoints match bitwise
    x = grid.points()[:-1]
    r = 1.0 / (2.0 * np.pi)
    ang = 2.0 * np.pi * x
    return np.column_stack([r * np.cos(ang), r * np.sin(ang)])


def _build_conservation(p, rng):
    z = rng.normals(CONS_GRID.n - 1)
    u0 = _chol_for("conservation", _periodic_circle_coords(CONS_GRID)) @ z
    u0 = np.concatenate([u0, u0[:1]])
    flux = FluxSpec(p["a"], p["b"], p["c"])
    uq = weno_evolve(u0, flux, TAU, CONS_GRID)
    x = CONS_GRID.points()
    cond = FunctionSample(coords=np.column_stack([np.zeros(CONS_GRID.n), x]), values=u0)
    qoi = FunctionSample(coords=np.column_stack([np.full(CONS_GRID.n, TAU), x]), values=uq)
    return cond, qoi


def _build_pde2d(p, rng):
    x = PDE2D_GRID.x_grid.points()
    v0 = gp_sample(x, GP_SPEC, rng)
    v1 = gp_sample(x, GP_SPEC, rng)
    z = rng.normals(PDE2D_GRID.n)
    free = _chol_for("pde2d", PDE2D_GRID.coords()) @ z
    u = blend_to_time_slices_2d(
        FunctionSample(coords=PDE2D_GRID.coords(), values=free, _skip_checks=True),
        v0, v1, PDE2D_GRID)
    d = fd_partials_2d(u, PDE2D_GRID)
    g = (p["a"] * d["u_xx"].values + p["b"] * d["u_xt"].values
         + p["c"] * d["u_tt"].values + p["d"] * d["u_x"].values
         + p["e"] * d["u_t"].values + p["f"] * u.values)
    cond = FunctionSample(coords=PDE2D_GRID.coords(), values=g, _skip_checks=True)
    return cond, u


def _build_heat(p, rng):
    raw = gp_sample(X_GRID.points(), GP_SPEC, rng)
    init = blend_to_boundaries_1d(raw, p["u0"], p["uL"])
    final = heat_step_implicit(init, p["k"], p["alpha"], p["u0"], p["uL"],
                               HEAT_DT, X_GRID, HEAT_STEPS)
    x = X_GRID.points()
    cond = FunctionSample(coords=np.column_stack([np.zeros(X_GRID.n), x]), values=init)
    qoi = FunctionSample(coords=np.column_stack([np.full(X_GRID.n, TAU), x]), values=final)
    return cond, qoi


# Cholesky factors depend only on the family's fixed grid; cache them.
_CHOL_CACHE: dict = {}


def _chol_for(key: str, coords: np.ndarray) -> np.ndarray:
    if key not in _CHOL_CACHE:
        from .randproc import rbf_kernel_matrix

        K = rbf_kernel_matrix(coords, GP_SPEC)
        jitter = 1e-6 * GP_SPEC.variance
        _CHOL_CACHE[key] = np.linalg.cholesky(K + jitter * np.eye(coords.shape[0]))
    return _CHOL_CACHE[key]


def _g1(g: Grid1D) -> dict:
    return {"start": g.start, "end": g.end, "n": g.n}


_BASES = {
    "ode1": FamilyDef(
        "ode1", (("a1", -1.0, 1.0), ("a2", -1.0, 1.0), ("u0", -1.0, 1.0)),
        _build_ode1, grids={"t": _g1(ODE_GRID)}),
    "ode2": FamilyDef(
        "ode2", (("a1", -1.0, 1.0), ("a2", -1.0, 1.0), ("u0", -1.0, 1.0)),
        _build_ode2, grids={"t": _g1(ODE_GRID)}),
    "ode3": FamilyDef(
        "ode3",
        (("a1", -1.0, 1.0), ("a2", -1.0, 1.0), ("a3", -1.0, 1.0), ("u0", -1.0, 1.0)),
        _build_ode3, grids={"t": _g1(ODE_GRID)}),
    "oscillator": FamilyDef(
        "oscillator", (("k", 0.0, 2.0),),
        _build_oscillator, grids={"t": _g1(OSC_GRID), "split_index": OSC_SPLIT}),
    "poisson": FamilyDef(
        "poisson", (("u0", -1.0, 1.0), ("u1", -1.0, 1.0)),
        _build_poisson, grids={"x": _g1(X_GRID)}),
    "linear_rd": FamilyDef(
        "linear_rd",
        (("u0", -1.0, 1.0), ("u1", -1.0, 1.0), ("a", 0.5, 1.5), ("c", -1.0, 1.0)),
        _build_linear_rd, grids={"x": _g1(X_GRID), "lambda": LAMBDA}),
    "nonlinear_rd": FamilyDef(
        "nonlinear_rd",
        (("u0", -1.0, 1.0), ("u1", -1.0, 1.0), ("k", 0.5, 1.5), ("a", 0.5, 1.5)),
        _build_nonlinear_rd, grids={"x": _g1(X_GRID), "lambda": LAMBDA}),
    "conservation": FamilyDef(
        "conservation", (("a", -1.0, 1.0), ("b", -1.0, 1.0), ("c", -1.0, 1.0)),
        _build_conservation, invertible=False,
        grids={"x": _g1(CONS_GRID), "tau": TAU}),
    "pde2d": FamilyDef(
        "pde2d",
        tuple((n, -0.5, 0.5) for n in ("a", "b", "c", "d", "e", "f")),
        _build_pde2d,
        grids={"x": _g1(PDE2D_GRID.x_grid), "t": _g1(PDE2D_GRID.t_grid)}),
    "heat": FamilyDef(
        "heat",
        (("k", 0.001, 0.01), ("alpha", -0.01, 0.0), ("u0", -1.0, 1.0), ("uL", -1.0, 1.0)),
        _build_heat, invertible=False,
        grids={"x": _g1(X_GRID), "tau": TAU, "dt": HEAT_DT},
        sample_bounds={"alpha": (-0.01, -0.001)}),
}

# Registered identifiers: base name + direction suffix. Heat is forward-only
# and kept out of the training list; it exists solely for the OOD study.
FAMILY_IDS = tuple(
    f"{name}_{sfx}"
    for name in _BASES
    for sfx in (("fwd", "inv") if _BASES[name].invertible else ("fwd",))
)
TRAINABLE_FAMILY_IDS = tuple(f for f in FAMILY_IDS if not f.startswith("heat"))


def parse_family_id(family_id: str) -> tuple:
    if family_id.endswith("_fwd"):
        base, direction = family_id[:-4], "forward"
    elif family_id.endswith("_inv"):
        base, direction = family_id[:-4], "inverse"
    else:
        raise UnknownFamilyError(
            f"family id {family_id!r} must end in _fwd or _inv")
    if family_id not in FAMILY_IDS:
        raise UnknownFamilyError(f"unknown family {family_id!r}")
    return base, direction


def family_parameter_schema(family_id: str) -> tuple:
    """((name, low, high), ...) for the family's operator parameters."""
    base, _ = parse_family_id(family_id)
    return _BASES[base].param_bounds


def sample_operator(family_id: str, rng: RngStream, operator_id: int = 0) -> OperatorSpec:
    """Draw operator parameters uniformly from the family's declared ranges."""
    base, direction = parse_family_id(family_id)
    fam = _BASES[base]
    params = {}
    for name, lo, hi in fam.param_bounds:
        lo, hi = fam.sample_bounds.get(name, (lo, hi))
        params[name] = rng.uniform(lo, hi)
    return OperatorSpec(family=base, direction=direction, params=params,
                        operator_id=operator_id)


def generate_record(op: OperatorSpec, rng: RngStream) -> DemoRecord:
    """Build one (condition, QoI) record; inverse direction swaps the fields."""
    fam = _BASES[op.family]
    try:
        cond, qoi = fam.build(op.params, rng)
    except RuntimeError as exc:
        raise GenerationError(f"{op.family} record generation failed: {exc}") from exc
    if op.direction == "inverse":
        cond, qoi = qoi, cond
    return DemoRecord(operator=op, condition=cond, qoi=qoi, seed=rng.seed)


def generate_corpus(family_id: str, n_operators: int, records_per_operator: int,
                    base_seed: int) -> Corpus:
    """Deterministic corpus: per-record seeds mix (base_seed, op idx, rec idx)."""
    if n_operators < 1:
        raise ValueError(f"n_operators must be >= 1, got {n_operators}")
    if records_per_operator < 6:
        raise ValueError(
            f"records_per_operator must be >= 6 (5 demos + question), got {records_per_operator}")
    base, direction = parse_family_id(family_id)
    fam = _BASES[base]
    records = []
    for i in range(n_operators):
        op = sample_operator(family_id, RngStream(mix_seed(base_seed, i)), operator_id=i)
        for j in range(records_per_operator):
            records.append(generate_record(op, RngStream(mix_seed(base_seed, i, j))))
    meta = {
        "format_version": FORMAT_VERSION,
        "family": base,
        "direction": direction,
        "grids": fam.grids,
        "gp": {"length_scale": GP_SPEC.length_scale, "variance": GP_SPEC.variance},
        "ranges": {name: [lo, hi] for name, lo, hi in fam.param_bounds},
        "base_seed": base_seed,
    }
    return Corpus(metadata=meta, records=records)


# ------------------------------------------------------------- serialization


def _sample_to_json(fs: FunctionSample) -> dict:
    return {"coords": fs.coords.tolist(), "values": fs.values.tolist()}


def _sample_from_json(obj: dict) -> FunctionSample:
    return FunctionSample(coords=np.asarray(obj["coords"], dtype=np.float64),
                          values=np.asarray(obj["values"], dtype=np.float64))


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(corpus.metadata, sort_keys=True) + "\n")
        for r in corpus.records:
            fh.write(json.dumps({
                "operator_id": r.operator.operator_id,
                "params": r.operator.params,
                "seed": r.seed,
                "cond": _sample_to_json(r.condition),
                "qoi": _sample_to_json(r.qoi),
            }, sort_keys=True) + "\n")


def read_corpus(path) -> Corpus:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise CorpusFormatError("empty corpus file: missing metadata line 1")
    try:
        meta = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise CorpusFormatError(f"line 1: malformed metadata: {exc}") from exc
    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise CorpusVersionError(
            f"unsupported corpus format_version {version!r}; this reader handles {FORMAT_VERSION}")
    family, direction = meta["family"], meta["direction"]
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            op = OperatorSpec(family=family, direction=direction,
                              params=obj["params"], operator_id=obj["operator_id"])
            records.append(DemoRecord(
                operator=op,
                condition=_sample_from_json(obj["cond"]),
                qoi=_sample_from_json(obj["qoi"]),
                seed=obj["seed"],
            ))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise CorpusFormatError(f"line {lineno}: malformed record: {exc}") from exc
    return Corpus(metadata=meta, records=records)
