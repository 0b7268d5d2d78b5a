"""Adam optimizer, batch assembly, the training loop, and loss logging.

Randomness layout: stream 0 of the run seed initializes parameters, stream 1
builds the fixed held-out evaluation prompts, and every optimizer step s draws
its batch from RngStream(mix_seed(seed, s), stream 2).  Steps therefore do not
share generator state, which is what lets a run resume from a checkpoint and
reproduce the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import json
import math
import os
import struct
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .families import Corpus, DemoRecord
from .model import (
    CheckpointError,
    ModelConfig,
    ModelParams,
    batch_loss_and_grad,
    init_params,
    load_checkpoint,
    loss,
    save_checkpoint,
)
from .prompt import MAX_DEMOS, build_prompt, subsample_function
from .randproc import RngStream, mix_seed

OPTIMIZER_MAGIC = b"ICONOPT1"
OPTIMIZER_VERSION = 1

_INIT_STREAM = 0
_EVAL_STREAM = 1
_BATCH_STREAM = 2

_EVAL_PROMPTS_PER_OPERATOR = 2
# in-loop test loss stays a bounded fraction of the step budget on corpora
# with thousands of held-out operators
_EVAL_OPERATOR_CAP = 64


class TrainingError(ValueError):
    pass


class TrainingDivergedError(TrainingError):
    """Raised when the train loss goes nonfinite; carries the last checkpoint."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    batch_size: int = 16
    learning_rate: float = 1e-4
    warmup_steps: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 500
    families: tuple = None  # None: train on every family present in the corpora
    points_per_function: int = 15
    keep_best_checkpoint: bool = False

    def __post_init__(self):
        if self.steps < 1:
            raise TrainingError(f"steps must be >= 1, got {self.steps}")
        if self.batch_size < 1:
            raise TrainingError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 < self.learning_rate < math.inf):
            raise TrainingError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.warmup_steps < 0:
            raise TrainingError("warmup_steps must be >= 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise TrainingError("betas must lie in [0, 1)")
        if self.epsilon <= 0.0:
            raise TrainingError("epsilon must be positive")
        if self.checkpoint_every < 1:
            raise TrainingError("checkpoint_every must be >= 1")
        if self.points_per_function < 1:
            raise TrainingError("points_per_function must be >= 1")
        if self.families is not None:
            object.__setattr__(self, "families", tuple(self.families))
            if len(self.families) == 0:
                raise TrainingError("families list must not be empty")


@dataclass(frozen=True)
class TrainLogRecord:
    step: int
    train_loss: float
    test_loss: float
    wall_time_s: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)

    def append(self, rec: TrainLogRecord) -> None:
        if self.records and rec.step <= self.records[-1].step:
            raise TrainingError("log steps must be strictly increasing")
        if not (math.isfinite(rec.train_loss) and math.isfinite(rec.test_loss)):
            raise TrainingError(f"nonfinite loss in log at step {rec.step}")
        self.records.append(rec)

    def to_csv(self, path) -> None:
        lines = ["step,train_loss,test_loss,wall_time_s"]
        for r in self.records:
            lines.append(f"{r.step},{r.train_loss!r},{r.test_loss!r},{r.wall_time_s:.3f}")
        _atomic_write_text(path, "\n".join(lines) + "\n")


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict
    v: dict

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamState":
        return cls(m={n: np.zeros_like(params[n]) for n in params.names()},
                   v={n: np.zeros_like(params[n]) for n in params.names()})


def adam_step(params: ModelParams, grads: dict, state: AdamState, step: int,
              config: TrainConfig):
    """One Adam update with bias correction and linear warmup; returns new
    (params, state).  `step` is 1-based."""
    if step < 1:
        raise TrainingError("adam step count is 1-based")
    lr = config.learning_rate
    if config.warmup_steps > 0:
        lr *= min(1.0, step / config.warmup_steps)
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    new_blocks, new_m, new_v = {}, {}, {}
    for name in params.names():
        g = grads[name]
        if g.shape != params[name].shape:
            raise TrainingError(f"gradient shape mismatch in block {name}")
        with np.errstate(invalid="ignore"):  # nonfinite inputs caught below
            m = b1 * state.m[name] + (1.0 - b1) * g
            v = b2 * state.v[name] + (1.0 - b2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
        if not np.all(np.isfinite(update)):
            raise TrainingError(f"nonfinite update in block {name}")
        new_blocks[name] = params[name] - update
        new_m[name] = m
        new_v[name] = v
    return ModelParams(params.config, new_blocks), AdamState(new_m, new_v)


# ------------------------------------------------------- batch/eval assembly


def corpus_family_id(corpus: Corpus) -> str:
    suffix = "fwd" if corpus.metadata["direction"] == "forward" else "inv"
    return f"{corpus.metadata['family']}_{suffix}"


def held_out_split(corpus: Corpus):
    """(training ids, held-out ids): the last ceil(10%) of the sorted operator
    ids are reserved for test loss."""
    ids = corpus.operator_ids()
    n_held = math.ceil(0.10 * len(ids))
    train_ids, held_ids = ids[:-n_held], ids[-n_held:]
    if not train_ids:
        raise TrainingError(
            f"corpus for {corpus_family_id(corpus)} has {len(ids)} operators; "
            "too few to reserve a held-out split")
    return train_ids, held_ids


def _subsampled(fs, k, rng):
    return subsample_function(fs, min(k, len(fs)), rng)


def assemble_prompt(records: list, question: DemoRecord, points: int,
                    rng: RngStream):
    """Training prompt from full-grid records: every function is subsampled
    to the prompt density, demos keep their order."""
    demos = [replace(r, condition=_subsampled(r.condition, points, rng),
                     qoi=_subsampled(r.qoi, points, rng)) for r in records]
    q_cond = _subsampled(question.condition, points, rng)
    q_qoi = _subsampled(question.qoi, points, rng)
    return build_prompt(demos, q_cond, q_qoi.coords, training=True,
                        question_targets=q_qoi.values)


def sample_batch_prompt(corpora: list, splits: list, rng: RngStream,
                        points: int):
    ci = rng.integers(len(corpora))
    corpus = corpora[ci]
    train_ids = splits[ci][0]
    op = train_ids[rng.integers(len(train_ids))]
    records = corpus.records_for(op)
    k = 1 + rng.integers(MAX_DEMOS)
    perm = rng.shuffle_indices(len(records))
    demos = [records[i] for i in perm[:k]]
    question = records[perm[k]]  # disjoint from the demos by construction
    return assemble_prompt(demos, question, points, rng)


def build_eval_prompts(corpora: list, splits: list, seed: int, points: int):
    rng = RngStream(seed, _EVAL_STREAM)
    prompts = []
    for corpus, (train_ids, held_ids) in zip(corpora, splits):
        for op in held_ids[:_EVAL_OPERATOR_CAP]:
            records = corpus.records_for(op)
            for _ in range(_EVAL_PROMPTS_PER_OPERATOR):
                k = 1 + rng.integers(MAX_DEMOS)
                perm = rng.shuffle_indices(len(records))
                demos = [records[i] for i in perm[:k]]
                prompts.append(assemble_prompt(demos, records[perm[k]],
                                               points, rng))
    return prompts


# ------------------------------------------------- optimizer state on disk


def _atomic_write_bytes(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _atomic_write_text(path, text: str) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save_optimizer_state(path, state: AdamState) -> None:
    names = sorted(state.m)
    header = {
        "format_version": OPTIMIZER_VERSION,
        "blocks": [{"name": n, "shape": list(state.m[n].shape)} for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    out = [OPTIMIZER_MAGIC, struct.pack("<Q", len(hb)), hb]
    for n in names:
        out.append(np.ascontiguousarray(state.m[n], dtype="<f8").tobytes())
    for n in names:
        out.append(np.ascontiguousarray(state.v[n], dtype="<f8").tobytes())
    _atomic_write_bytes(path, b"".join(out))


def load_optimizer_state(path) -> AdamState:
    with open(path, "rb") as fh:
        magic = fh.read(len(OPTIMIZER_MAGIC))
        if magic != OPTIMIZER_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not an optimizer state file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != OPTIMIZER_VERSION:
            raise CheckpointError(
                f"unsupported optimizer state version {header.get('format_version')!r}")
        m, v = {}, {}
        for moment in (m, v):
            for spec in header["blocks"]:
                shape = tuple(spec["shape"])
                count = int(np.prod(shape)) if shape else 1
                raw = fh.read(count * 8)
                if len(raw) != count * 8:
                    raise CheckpointError(f"truncated optimizer block {spec['name']}")
                moment[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError("trailing bytes after final optimizer block")
    return AdamState(m, v)


# -------------------------------------------------------------- the trainer


def _checkpoint_paths(checkpoint_dir, step):
    base = os.path.join(checkpoint_dir, f"step_{step:07d}.ckpt")
    return base, base + ".opt"


def _write_checkpoint(checkpoint_dir, params, state, step, config, families):
    ckpt, opt = _checkpoint_paths(checkpoint_dir, step)
    tmp = ckpt + ".tmp"
    save_checkpoint(tmp, params, step=step, seed=config.seed, families=families)
    os.replace(tmp, ckpt)
    save_optimizer_state(opt, state)
    return ckpt


def train(corpora: list, model_config: ModelConfig, config: TrainConfig, *,
          checkpoint_dir=None, resume_from=None, dtype=np.float32):
    """Runs the loop and returns (final params, TrainLog).

    Each batch element samples (corpus, operator, demo subset, question
    record); the question record never appears among its demos.  Same-shape
    prompts share one device call and partial gradients are summed in sorted
    shape order, so a fixed seed fixes the trajectory.
    """
    if not corpora:
        raise TrainingError("at least one corpus is required")
    by_family = {corpus_family_id(c): c for c in corpora}
    if config.families is not None:
        missing = [f for f in config.families if f not in by_family]
        if missing:
            raise TrainingError(f"no corpus supplied for families {missing}")
        corpora = [by_family[f] for f in config.families]
    families = sorted(corpus_family_id(c) for c in corpora)
    splits = [held_out_split(c) for c in corpora]
    points = config.points_per_function

    if resume_from is not None:
        params, meta = load_checkpoint(resume_from)
        if params.config != model_config:
            raise TrainingError("checkpoint model config does not match")
        state = load_optimizer_state(str(resume_from) + ".opt")
        start_step = int(meta["step"])
        if start_step >= config.steps:
            raise TrainingError(
                f"checkpoint is already at step {start_step}; nothing to run")
    else:
        params = init_params(model_config, RngStream(config.seed, _INIT_STREAM))
        state = AdamState.zeros(params)
        start_step = 0

    eval_prompts = build_eval_prompts(corpora, splits, config.seed, points)

    def test_loss(p):
        if not eval_prompts:
            return float("nan")
        return float(np.mean([loss(p, ep, dtype=dtype) for ep in eval_prompts]))

    log = TrainLog()
    last_ckpt = resume_from
    best = math.inf
    interval_losses = []
    t0 = time.perf_counter()

    for step in range(start_step + 1, config.steps + 1):
        rng = RngStream(mix_seed(config.seed, step), _BATCH_STREAM)
        batch = [sample_batch_prompt(corpora, splits, rng, points)
                 for _ in range(config.batch_size)]
        # one device call per distinct prompt shape: padding everything to the
        # longest prompt costs ~2x on this workload's shape spread, and sorted
        # keys keep the accumulation order reproducible across runs
        groups = {}
        for prompt in batch:
            groups.setdefault((len(prompt), prompt.n_queries), []).append(prompt)
        grad_sum = None
        batch_loss = 0.0
        for key in sorted(groups):
            vals, g = batch_loss_and_grad(params, groups[key], dtype=dtype)
            batch_loss += float(np.sum(vals))
            if grad_sum is None:
                grad_sum = g
            else:
                for name in grad_sum:
                    grad_sum[name] += g[name]
        batch_loss /= config.batch_size
        if not math.isfinite(batch_loss):
            raise TrainingDivergedError(
                f"train loss diverged at step {step}", last_checkpoint=last_ckpt)
        mean_grads = {n: a / config.batch_size for n, a in grad_sum.items()}
        params, state = adam_step(params, mean_grads, state, step, config)
        interval_losses.append(batch_loss)

        if step % config.checkpoint_every == 0 or step == config.steps:
            tl = test_loss(params)
            log.append(TrainLogRecord(step=step,
                                      train_loss=float(np.mean(interval_losses)),
                                      test_loss=tl,
                                      wall_time_s=time.perf_counter() - t0))
            interval_losses = []
            if checkpoint_dir is not None:
                os.makedirs(checkpoint_dir, exist_ok=True)
                last_ckpt = _write_checkpoint(checkpoint_dir, params, state,
                                              step, config, families)
                if config.keep_best_checkpoint and tl < best:
                    best = tl
                    best_path = os.path.join(checkpoint_dir, "best.ckpt")
                    tmp = best_path + ".tmp"
                    save_checkpoint(tmp, params, step=step, seed=config.seed,
                                    families=families)
                    os.replace(tmp, best_path)

    return params, log
