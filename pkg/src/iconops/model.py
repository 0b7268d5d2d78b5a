"""Encoder transformer: init, forward, loss, gradients, checkpoints.

Architecture: token features (width 7) are embedded linearly into model_dim,
run through pre-layer-norm transformer blocks (masked multi-head scaled-dot
attention, then an exact-erf GELU feed-forward), and read out by a linear map
to one scalar at each query position. No positional encodings (coordinates
live in the token features) and no final layer norm.

Masking is additive -inf before softmax, so forbidden keys get exactly zero
attention weight and invisible-token perturbations cannot reach a query even
at the last bit.

ModelParams pairs the config with a flat {name: float64 numpy array} block
dict. The jax backend compiles one kernel per (config, dtype) and shape;
public entry points take and return numpy. Tests run at 64-bit; training
passes dtype=float32 for speed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

import jax

jax.config.update("jax_enable_x64", True)
jax.config.update("jax_platform_name", "cpu")

import jax.numpy as jnp  # noqa: E402  (after x64 switch on purpose)

from .prompt import ROLE_QUERY, TOKEN_WIDTH, Prompt  # noqa: E402
from .randproc import RngStream  # noqa: E402

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"ICONCKP1"
CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    """Model contract violation (bad config, prompt, or parameters)."""


class GradientError(RuntimeError):
    """A gradient block came back nonfinite."""


class CheckpointError(ValueError):
    """Checkpoint file is malformed or has the wrong version."""


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 6
    heads: int = 8
    # per-head width; None derives model_dim // heads (= 32 at defaults).
    # An explicit value (the config table's 256) widens Q/K/V and projects
    # back to model_dim on output.
    head_dim: int | None = None
    model_dim: int = 256
    widening: int = 4
    dropout: float = 0.0

    def __post_init__(self):
        if self.layers < 1 or self.heads < 1 or self.model_dim < 1 or self.widening < 1:
            raise ModelError("layers, heads, model_dim, widening must be positive")
        if self.dropout != 0.0:
            raise ModelError("dropout is fixed at 0")
        if self.head_dim is None and self.model_dim % self.heads:
            raise ModelError(
                f"model_dim {self.model_dim} not divisible by heads {self.heads}; "
                "set head_dim explicitly")
        if self.head_dim is not None and self.head_dim < 1:
            raise ModelError("head_dim must be positive when given")

    @property
    def head_width(self) -> int:
        return self.head_dim if self.head_dim is not None else self.model_dim // self.heads

    @property
    def hidden_dim(self) -> int:
        return self.widening * self.model_dim

    def to_json(self) -> dict:
        return {"layers": self.layers, "heads": self.heads, "head_dim": self.head_dim,
                "model_dim": self.model_dim, "widening": self.widening,
                "dropout": self.dropout}

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        return cls(**obj)


def _shapes(config: ModelConfig) -> list:
    """(name, shape, glorot?) in canonical draw order."""
    d, h = config.model_dim, config.heads
    hd, hid = config.head_width, config.hidden_dim
    out = [("embed.w", (7, d), True), ("embed.b", (d,), False)]
    for l in range(config.layers):
        p = f"layers.{l}."
        out += [
            (p + "ln1.scale", (d,), False), (p + "ln1.shift", (d,), False),
            (p + "attn.wq", (d, h * hd), True), (p + "attn.wk", (d, h * hd), True),
            (p + "attn.wv", (d, h * hd), True), (p + "attn.wo", (h * hd, d), True),
            (p + "ln2.scale", (d,), False), (p + "ln2.shift", (d,), False),
            (p + "ffn.w1", (d, hid), True), (p + "ffn.b1", (hid,), False),
            (p + "ffn.w2", (hid, d), True), (p + "ffn.b2", (d,), False),
        ]
    out += [("readout.w", (d, 1), True), ("readout.b", (1,), False)]
    return out


@dataclass
class ModelParams:
    """Named tensor collection tied to the config that shaped it."""

    config: ModelConfig
    blocks: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = {name: shape for name, shape, _ in _shapes(self.config)}
        if set(self.blocks) != set(expected):
            missing = sorted(set(expected) - set(self.blocks))
            extra = sorted(set(self.blocks) - set(expected))
            raise ModelError(
                f"parameter names mismatch: missing {missing}, unexpected {extra}")
        for name, arr in self.blocks.items():
            if tuple(arr.shape) != expected[name]:
                raise ModelError(
                    f"{name} has shape {arr.shape}, expected {expected[name]}")
            if not np.all(np.isfinite(arr)):
                raise ModelError(f"nonfinite values in parameter block {name}")

    def __getitem__(self, name: str) -> np.ndarray:
        return self.blocks[name]

    def names(self) -> list:
        return sorted(self.blocks)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.blocks.items()})


def init_params(config: ModelConfig, rng: RngStream) -> ModelParams:
    """Glorot-uniform weight matrices, zero biases, unit layer-norm scales."""
    blocks = {}
    for name, shape, glorot in _shapes(config):
        if glorot:
            fan_in, fan_out = shape
            a = np.sqrt(6.0 / (fan_in + fan_out))
            blocks[name] = rng.uniform(-a, a, fan_in * fan_out).reshape(shape)
        elif name.endswith(".scale"):
            blocks[name] = np.ones(shape)
        else:
            blocks[name] = np.zeros(shape)
    return ModelParams(config, blocks)


# ------------------------------------------------------------- jax kernels


def _ln(x, scale, shift):
    mu = jnp.mean(x, axis=-1, keepdims=True)
    var = jnp.mean((x - mu) ** 2, axis=-1, keepdims=True)
    return (x - mu) / jnp.sqrt(var + LN_EPS) * scale + shift


def _make_apply(config: ModelConfig):
    L, H, Hd = config.layers, config.heads, config.head_width
    # plain Python float: a np.float64 scalar would promote the whole score
    # path to float64 under x64 mode regardless of the requested dtype
    inv_scale = float(1.0 / np.sqrt(Hd))

    def apply(params, feats, mask):
        x = feats @ params["embed.w"] + params["embed.b"]
        T = x.shape[0]
        neg = jnp.array(-jnp.inf, dtype=x.dtype)
        for l in range(L):
            p = f"layers.{l}."
            h = _ln(x, params[p + "ln1.scale"], params[p + "ln1.shift"])
            q = (h @ params[p + "attn.wq"]).reshape(T, H, Hd).transpose(1, 0, 2)
            k = (h @ params[p + "attn.wk"]).reshape(T, H, Hd).transpose(1, 0, 2)
            v = (h @ params[p + "attn.wv"]).reshape(T, H, Hd).transpose(1, 0, 2)
            s = (q @ k.transpose(0, 2, 1)) * inv_scale
            s = jnp.where(mask[None, :, :], s, neg)
            a = jax.nn.softmax(s, axis=-1)
            ctx = (a @ v).transpose(1, 0, 2).reshape(T, H * Hd)
            x = x + ctx @ params[p + "attn.wo"]
            h2 = _ln(x, params[p + "ln2.scale"], params[p + "ln2.shift"])
            f = jax.nn.gelu(h2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"],
                            approximate=False)
            x = x + f @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        return x

    return apply


_COMPILED: dict = {}


def _compiled(config: ModelConfig, dtype):
    key = (config, np.dtype(dtype).name)
    if key not in _COMPILED:
        apply = _make_apply(config)

        def predict(params, feats, mask, nq):
            x = apply(params, feats, mask)
            y = x[x.shape[0] - nq:] @ params["readout.w"] + params["readout.b"]
            return y[:, 0]

        def loss_fn(params, feats, mask, targets):
            pred = predict(params, feats, mask, targets.shape[0])
            d = pred - targets
            return jnp.mean(d * d)

        def padded_loss(params, feats, mask, targets, qidx, qvalid, qcount):
            # feats/mask are zero-padded at the end; padding rows attend only
            # to themselves, so real rows see exactly the unpadded key set
            y = apply(params, feats, mask) @ params["readout.w"] + params["readout.b"]
            d = (y[:, 0][qidx] - targets) * qvalid
            return jnp.sum(d * d) / qcount

        def batch_loss_fn(params, feats_b, mask_b, targets_b, qidx_b,
                          qvalid_b, qcount_b):
            per = jax.vmap(lambda f, m, t, qi, qv, qc: padded_loss(
                params, f, m, t, qi, qv, qc))(
                feats_b, mask_b, targets_b, qidx_b, qvalid_b, qcount_b)
            return jnp.sum(per), per

        _COMPILED[key] = {
            "predict": jax.jit(predict, static_argnums=3),
            "loss": jax.jit(loss_fn),
            "loss_grad": jax.jit(jax.value_and_grad(loss_fn)),
            "batch_loss_grad": jax.jit(
                jax.value_and_grad(batch_loss_fn, has_aux=True)),
        }
    return _COMPILED[key]


def _to_device(params: ModelParams, dtype) -> dict:
    return {k: jnp.asarray(v, dtype=dtype) for k, v in params.blocks.items()}


def _prompt_arrays(prompt: Prompt, dtype):
    if len(prompt) == 0:
        raise ModelError("empty prompt")
    if not prompt.mask.any(axis=1).all():
        raise ModelError("prompt contains a token row that attends to nothing")
    nq = prompt.n_queries
    if nq and not np.all(prompt.roles[-nq:] == ROLE_QUERY):
        raise ModelError("query tokens must come last in the prompt")
    feats = np.asarray(prompt.token_features(), dtype=dtype)
    return feats, prompt.mask, nq


def forward(params: ModelParams, prompt: Prompt, dtype=np.float64) -> np.ndarray:
    """One prediction per query token, in prompt order."""
    feats, mask, nq = _prompt_arrays(prompt, dtype)
    if nq == 0:
        return np.zeros(0)
    fns = _compiled(params.config, dtype)
    out = fns["predict"](_to_device(params, dtype), feats, mask, nq)
    return np.asarray(out, dtype=np.float64)


def loss(params: ModelParams, prompt: Prompt, dtype=np.float64) -> float:
    """Mean squared error over all query tokens against prompt targets."""
    feats, mask, nq = _prompt_arrays(prompt, dtype)
    if nq == 0:
        raise ModelError("loss needs at least one query token")
    fns = _compiled(params.config, dtype)
    t = jnp.asarray(prompt.targets, dtype=dtype)
    return float(fns["loss"](_to_device(params, dtype), feats, mask, t))


def loss_and_grad(params: ModelParams, prompt: Prompt, dtype=np.float64):
    """(loss, {name: gradient array}); raises naming any nonfinite block."""
    feats, mask, nq = _prompt_arrays(prompt, dtype)
    if nq == 0:
        raise ModelError("loss needs at least one query token")
    fns = _compiled(params.config, dtype)
    t = jnp.asarray(prompt.targets, dtype=dtype)
    val, g = fns["loss_grad"](_to_device(params, dtype), feats, mask, t)
    out = {}
    for name in sorted(g):
        a = np.asarray(g[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise GradientError(f"nonfinite gradient in block {name}")
        out[name] = a
    return float(val), out


def grad(params: ModelParams, prompt: Prompt, dtype=np.float64) -> dict:
    """Reverse-mode gradient of loss with respect to every parameter."""
    return loss_and_grad(params, prompt, dtype)[1]


def batch_loss_and_grad(params: ModelParams, prompts: list, dtype=np.float64):
    """Per-prompt losses and the gradient of their sum, in one device call.

    Prompts may differ in length: each is zero-padded to the batch maximum and
    padding rows attend only to themselves, which leaves every real token's
    softmax row and therefore every loss and gradient term exactly as in the
    prompt-by-prompt computation (up to floating-point reduction order).
    Returns (losses array of len(prompts), {name: gradient array}).
    """
    if not prompts:
        raise ModelError("batch_loss_and_grad needs at least one prompt")
    for p in prompts:
        if p.n_queries == 0:
            raise ModelError("loss needs at least one query token")
    staged = [_prompt_arrays(p, dtype) for p in prompts]
    tmax = max(f.shape[0] for f, _, _ in staged)
    qmax = max(nq for _, _, nq in staged)
    # round the batch axis up to a small fixed ladder so the compile cache
    # stays bounded across varying group sizes without padding far past the
    # real count; slots past len(prompts) keep qvalid all-zero (qcount 1),
    # contributing exactly zero loss and gradient
    B = next((b for b in (1, 2, 3, 4, 6, 8, 12, 16) if b >= len(prompts)),
             1 << (len(prompts) - 1).bit_length())
    feats_b = np.zeros((B, tmax, TOKEN_WIDTH))
    mask_b = np.zeros((B, tmax, tmax), dtype=bool)
    mask_b[len(prompts):] = np.eye(tmax, dtype=bool)
    targets_b = np.zeros((B, qmax))
    qidx_b = np.zeros((B, qmax), dtype=np.int32)
    qvalid_b = np.zeros((B, qmax))
    qcount_b = np.ones(B)
    for i, ((feats, mask, nq), prompt) in enumerate(zip(staged, prompts)):
        t = feats.shape[0]
        feats_b[i, :t] = feats
        mask_b[i, :t, :t] = mask
        mask_b[i, range(t, tmax), range(t, tmax)] = True
        targets_b[i, :nq] = prompt.targets
        qidx_b[i, :nq] = np.arange(t - nq, t)
        qvalid_b[i, :nq] = 1.0
        qcount_b[i] = nq
    fns = _compiled(params.config, dtype)
    (_, per), g = fns["batch_loss_grad"](
        _to_device(params, dtype),
        jnp.asarray(feats_b, dtype=dtype), jnp.asarray(mask_b),
        jnp.asarray(targets_b, dtype=dtype), jnp.asarray(qidx_b),
        jnp.asarray(qvalid_b, dtype=dtype), jnp.asarray(qcount_b, dtype=dtype))
    out = {}
    for name in sorted(g):
        a = np.asarray(g[name], dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise GradientError(f"nonfinite gradient in block {name}")
        out[name] = a
    return np.asarray(per, dtype=np.float64)[:len(prompts)], out


# ------------------------------------------------------------- checkpoints
#
# Single-file container: magic, 8-byte little-endian header length, a JSON
# header {format_version, config, step, seed, blocks: [{name, dtype, shape}]},
# then each block's raw little-endian bytes in header order. No timestamps or
# other ambient state, so identical params give identical files.


def save_checkpoint(path, params: ModelParams, step: int = 0, seed: int = None,
                    families=None) -> None:
    names = params.names()
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_json(),
        "step": int(step),
        "seed": seed if seed is None else int(seed),
        "families": None if families is None else sorted(families),
        "blocks": [{"name": n, "dtype": "<f8", "shape": list(params[n].shape)}
                   for n in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for n in names:
            fh.write(np.ascontiguousarray(params[n], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (ModelParams, metadata dict with step and seed)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}; not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {header.get('format_version')!r}")
        config = ModelConfig.from_json(header["config"])
        blocks = {}
        for spec in header["blocks"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise CheckpointError(f"truncated block {spec['name']}")
            blocks[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after final block")
    meta = {"step": header["step"], "seed": header["seed"],
            "families": header.get("families")}
    return ModelParams(config, blocks), meta
