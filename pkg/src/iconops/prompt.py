"""Prompt assembly: tokens, roles, attention mask, and training targets.

A prompt is the flat token sequence

    demo1-cond, demo1-qoi, ..., demoN-cond, demoN-qoi, question-cond, queries

where every token is (coord_t, coord_x, role, value, example_index) and the
question counts as example N+1. Operator parameters are never tokenized; the
model has to infer the operator from the demos alone.

Visibility rule enforced by the mask (rows attend to columns):
  (i)  data tokens of example i see all data tokens of examples 1..i;
  (ii) query tokens of example i see data tokens of examples 1..i-1 plus the
       condition tokens of example i -- never a QoI token of example i and
       never another query token (queries are sinks, including themselves).

Demo-1 queries would see only their own condition under (ii); they are
excluded by default and available via include_first_demo_queries.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .gridfn import FunctionSample, SizingError
from .randproc import RngStream

ROLE_DEMO_COND = 0
ROLE_DEMO_QOI = 1
ROLE_QUESTION_COND = 2
ROLE_QUERY = 3

ROLE_NAMES = ("demo-cond", "demo-qoi", "question-cond", "query")

MAX_DEMOS = 5
TOKEN_WIDTH = 7  # coord_t, coord_x, 4 role flags, value


class Token(NamedTuple):
    coord_t: float
    coord_x: float
    role: int
    value: float
    example_index: int


class PromptError(ValueError):
    """Prompt construction violated a contract."""


def build_mask(roles: np.ndarray, example_index: np.ndarray) -> np.ndarray:
    """Boolean (T, T) visibility matrix from roles and example indices alone."""
    roles = np.asarray(roles)
    ex = np.asarray(example_index)
    is_data = roles != ROLE_QUERY
    is_query = ~is_data
    is_cond = (roles == ROLE_DEMO_COND) | (roles == ROLE_QUESTION_COND)
    exp, exq = ex[:, None], ex[None, :]
    data_rule = is_data[:, None] & is_data[None, :] & (exq <= exp)
    query_rule = is_query[:, None] & is_data[None, :] & (
        (exq < exp) | ((exq == exp) & is_cond[None, :]))
    return data_rule | query_rule


@dataclass
class Prompt:
    coords: np.ndarray          # (T, 2) as (t, x)
    roles: np.ndarray           # (T,) role codes
    values: np.ndarray          # (T,) token values, 0 at queries
    example_index: np.ndarray   # (T,) 1-based; question is n_examples + 1
    n_examples: int
    targets: np.ndarray         # (n_queries,) aligned with query tokens in order
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        T = self.coords.shape[0]
        if self.coords.shape != (T, 2):
            raise PromptError(f"coords must be (T, 2), got {self.coords.shape}")
        for name in ("roles", "values", "example_index"):
            if getattr(self, name).shape != (T,):
                raise PromptError(f"{name} length does not match {T} tokens")
        q = self.roles == ROLE_QUERY
        if self.targets.shape != (int(q.sum()),):
            raise PromptError(
                f"targets length {self.targets.shape} does not match {int(q.sum())} queries")
        if not np.all(np.isfinite(self.targets)):
            raise PromptError("targets must be finite")
        if np.any(self.values[q] != 0.0):
            raise PromptError("query tokens must carry value 0")
        if T and np.min(self.example_index) < 1:
            raise PromptError("example_index is 1-based")
        if self.mask is None:
            self.mask = build_mask(self.roles, self.example_index)
        elif self.mask.shape != (T, T):
            raise PromptError(f"mask must be ({T}, {T}), got {self.mask.shape}")

    def __len__(self):
        return self.coords.shape[0]

    @property
    def n_queries(self) -> int:
        return int(np.sum(self.roles == ROLE_QUERY))

    @property
    def query_positions(self) -> np.ndarray:
        return np.flatnonzero(self.roles == ROLE_QUERY)

    def tokens(self) -> list:
        return [Token(self.coords[i, 0], self.coords[i, 1], int(self.roles[i]),
                      self.values[i], int(self.example_index[i]))
                for i in range(len(self))]

    def token_features(self) -> np.ndarray:
        """(T, 7) model input: coord_t, coord_x, one-hot role, value."""
        T = len(self)
        feats = np.zeros((T, TOKEN_WIDTH), dtype=np.float64)
        feats[:, 0] = self.coords[:, 0]
        feats[:, 1] = self.coords[:, 1]
        feats[np.arange(T), 2 + self.roles] = 1.0
        feats[:, 6] = self.values
        return feats


def _segment(fs: FunctionSample, role: int, ex: int):
    n = len(fs)
    return (fs.coords, np.full(n, role, dtype=np.int8), fs.values.copy(),
            np.full(n, ex, dtype=np.int64))


def _query_segment(coords: np.ndarray, ex: int):
    n = coords.shape[0]
    return (np.asarray(coords, dtype=np.float64),
            np.full(n, ROLE_QUERY, dtype=np.int8),
            np.zeros(n), np.full(n, ex, dtype=np.int64))


def build_prompt(records: list, question_cond: FunctionSample,
                 query_coords: np.ndarray, params_note=None, *,
                 training: bool = False, question_targets: np.ndarray = None,
                 include_first_demo_queries: bool = False) -> Prompt:
    """Assemble a prompt from demo records plus one question.

    Inference prompts emit queries only for the question. Training prompts
    also emit queries at each demo's QoI coordinates (demos 2..n by default)
    with the demo QoI values as targets; question_targets is then required.
    """
    if params_note is not None:
        raise PromptError("operator parameters must not be fed to the model")
    n = len(records)
    if n > MAX_DEMOS:
        raise PromptError(f"at most {MAX_DEMOS} demos supported, got {n}")
    for r in records[1:]:
        if r.operator != records[0].operator:
            raise PromptError("all demo records must share one operator")
    query_coords = np.asarray(query_coords, dtype=np.float64)
    if query_coords.ndim != 2 or query_coords.shape[1] != 2:
        raise PromptError(f"query_coords must be (m, 2), got {query_coords.shape}")
    if training:
        if question_targets is None:
            raise PromptError("training prompts require question_targets")
        question_targets = np.asarray(question_targets, dtype=np.float64)
        if question_targets.shape != (query_coords.shape[0],):
            raise PromptError("question_targets must align with query_coords")

    segs = []
    for i, r in enumerate(records, start=1):
        segs.append(_segment(r.condition, ROLE_DEMO_COND, i))
        segs.append(_segment(r.qoi, ROLE_DEMO_QOI, i))
    segs.append(_segment(question_cond, ROLE_QUESTION_COND, n + 1))

    targets = []
    if training:
        first = 1 if include_first_demo_queries else 2
        for i, r in enumerate(records, start=1):
            if i >= first:
                segs.append(_query_segment(r.qoi.coords, i))
                targets.append(r.qoi.values)
    segs.append(_query_segment(query_coords, n + 1))
    targets.append(question_targets if training else np.zeros(query_coords.shape[0]))

    return Prompt(
        coords=np.concatenate([s[0] for s in segs]),
        roles=np.concatenate([s[1] for s in segs]),
        values=np.concatenate([s[2] for s in segs]),
        example_index=np.concatenate([s[3] for s in segs]),
        n_examples=n,
        targets=np.concatenate(targets),
    )


def subsample_function(fs: FunctionSample, k: int, rng: RngStream) -> FunctionSample:
    """Uniform without-replacement subset of k (coord, value) pairs."""
    m = len(fs)
    if k > m:
        raise SizingError(f"cannot subsample {k} of {m} points")
    if k < 1:
        raise SizingError(f"subsample size must be >= 1, got {k}")
    idx = rng.shuffle_indices(m)[:k]
    return FunctionSample(coords=fs.coords[idx], values=fs.values[idx])


# ------------------------------------------------------------- JSON exchange


def prompt_to_json(prompt: Prompt) -> dict:
    """Prompt fields minus the mask (reconstructed on read, never trusted)."""
    return {
        "tokens": {
            "coord_t": prompt.coords[:, 0].tolist(),
            "coord_x": prompt.coords[:, 1].tolist(),
            "role": [ROLE_NAMES[r] for r in prompt.roles],
            "value": prompt.values.tolist(),
            "example_index": prompt.example_index.tolist(),
        },
        "n_examples": prompt.n_examples,
        "targets": prompt.targets.tolist(),
    }


def prompt_from_json(obj: dict) -> Prompt:
    try:
        tok = obj["tokens"]
        roles = np.array([ROLE_NAMES.index(r) for r in tok["role"]], dtype=np.int8)
        coords = np.column_stack([
            np.asarray(tok["coord_t"], dtype=np.float64),
            np.asarray(tok["coord_x"], dtype=np.float64),
        ])
        return Prompt(
            coords=coords,
            roles=roles,
            values=np.asarray(tok["value"], dtype=np.float64),
            example_index=np.asarray(tok["example_index"], dtype=np.int64),
            n_examples=int(obj["n_examples"]),
            targets=np.asarray(obj["targets"], dtype=np.float64),
        )
    except (KeyError, ValueError, TypeError) as exc:
        if isinstance(exc, PromptError):
            raise
        raise PromptError(f"malformed prompt object: {exc}") from exc
