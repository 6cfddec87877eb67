"""Differentiable building blocks on double-precision torch tensors.

Layers are plain functions over small frozen parameter dataclasses. Gradients come from
torch autograd; the optimizer and the gradient checker are written out here so their
arithmetic is explicit and testable:

* :func:`adam_step` applies bias-corrected Adam to every tensor of a :class:`ParamStore`.
* :func:`finite_difference_check` compares autograd against central differences on
  randomly probed scalars.

Checkpoints are a one-line JSON header (names and shapes in declaration order) followed
by the little-endian float64 payload.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Callable, Mapping

import numpy as np
import torch

from .errors import CsaiError, ShapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_FORMAT = "csai-params-v1"


def as_tensor(array: Any) -> torch.Tensor:
    """Copy *array* into a float64 tensor; read-only batch arrays stay untouched."""

    return torch.from_numpy(np.array(array, dtype=np.float64, copy=True))


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, int(n)))


def make_generator(seed: int) -> torch.Generator:
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    return gen


def uniform_init(gen: torch.Generator, shape: tuple[int, ...], fan_in: int) -> torch.Tensor:
    """Draw from ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""

    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return (torch.rand(shape, generator=gen, dtype=DTYPE) * 2.0 - 1.0) * bound


# ---------------------------------------------------------------------------
# Parameter containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearParams:
    weight: torch.Tensor
    """``[out, in]``"""
    bias: torch.Tensor
    """``[out]``"""

    @classmethod
    def init(cls, gen: torch.Generator, n_in: int, n_out: int) -> "LinearParams":
        return cls(uniform_init(gen, (n_out, n_in), n_in), uniform_init(gen, (n_out,), n_in))


@dataclass(frozen=True)
class LayerNormParams:
    gain: torch.Tensor
    shift: torch.Tensor

    @classmethod
    def init(cls, width: int) -> "LayerNormParams":
        return cls(torch.ones(width, dtype=DTYPE), torch.zeros(width, dtype=DTYPE))


@dataclass(frozen=True)
class AttentionParams:
    query: LinearParams
    key: LinearParams
    value: LinearParams
    output: LinearParams

    @classmethod
    def init(cls, gen: torch.Generator, d_model: int) -> "AttentionParams":
        return cls(*(LinearParams.init(gen, d_model, d_model) for _ in range(4)))


@dataclass(frozen=True)
class FeedForwardParams:
    inner: LinearParams
    outer: LinearParams

    @classmethod
    def init(cls, gen: torch.Generator, d_model: int, width: int) -> "FeedForwardParams":
        return cls(LinearParams.init(gen, d_model, width), LinearParams.init(gen, width, d_model))


@dataclass(frozen=True)
class TransformerParams:
    attention: AttentionParams
    norm1: LayerNormParams
    ffn: FeedForwardParams
    norm2: LayerNormParams

    @classmethod
    def init(cls, gen: torch.Generator, d_model: int) -> "TransformerParams":
        return cls(
            attention=AttentionParams.init(gen, d_model),
            norm1=LayerNormParams.init(d_model),
            ffn=FeedForwardParams.init(gen, d_model, 4 * d_model),
            norm2=LayerNormParams.init(d_model),
        )


@dataclass(frozen=True)
class ConvParams:
    kernel: torch.Tensor
    """``[k, C_in, C_out]``"""
    bias: torch.Tensor
    """``[C_out]``"""

    @classmethod
    def init(cls, gen: torch.Generator, k: int, c_in: int, c_out: int) -> "ConvParams":
        fan_in = k * c_in
        return cls(uniform_init(gen, (k, c_in, c_out), fan_in), uniform_init(gen, (c_out,), fan_in))


@dataclass(frozen=True)
class GruParams:
    """Gated recurrent unit: input maps carry the biases, hidden maps are bias-free."""

    input_update: LinearParams
    input_reset: LinearParams
    input_candidate: LinearParams
    hidden_update: torch.Tensor
    hidden_reset: torch.Tensor
    hidden_candidate: torch.Tensor

    @classmethod
    def init(cls, gen: torch.Generator, d_in: int, d_hidden: int) -> "GruParams":
        return cls(
            input_update=LinearParams.init(gen, d_in, d_hidden),
            input_reset=LinearParams.init(gen, d_in, d_hidden),
            input_candidate=LinearParams.init(gen, d_in, d_hidden),
            hidden_update=uniform_init(gen, (d_hidden, d_hidden), d_hidden),
            hidden_reset=uniform_init(gen, (d_hidden, d_hidden), d_hidden),
            hidden_candidate=uniform_init(gen, (d_hidden, d_hidden), d_hidden),
        )


def named_parameters(obj: Any, prefix: str = "") -> dict[str, torch.Tensor]:
    """Flatten nested parameter dataclasses into ``{"a.b.weight": tensor}`` order."""

    if isinstance(obj, torch.Tensor):
        return {prefix: obj}
    out: dict[str, torch.Tensor] = {}
    if obj is None:
        return out
    if is_dataclass(obj):
        for f in fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            out.update(named_parameters(getattr(obj, f.name), name))
    elif isinstance(obj, (tuple, list)):
        for i, item in enumerate(obj):
            out.update(named_parameters(item, f"{prefix}.{i}" if prefix else str(i)))
    return out


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


def linear(x: torch.Tensor, p: LinearParams) -> torch.Tensor:
    if x.shape[-1] != p.weight.shape[1]:
        raise ShapeError(f"linear map expects width {p.weight.shape[1]}, got {x.shape[-1]}")
    return x @ p.weight.T + p.bias


def positional_encoding(n_steps: int, d_model: int) -> torch.Tensor:
    """Return the sinusoidal ``[n_steps, d_model]`` table.

    ``PE[t, 2i] = sin(t / 10000^(2i/d_model))`` and ``PE[t, 2i+1]`` the matching cosine.
    """

    if d_model <= 0 or d_model % 2:
        raise ShapeError(f"positional encoding needs an even d_model, got {d_model}")
    position = torch.arange(n_steps, dtype=DTYPE)[:, None]
    freq = torch.pow(10000.0, -torch.arange(0, d_model, 2, dtype=DTYPE) / d_model)
    table = torch.zeros(n_steps, d_model, dtype=DTYPE)
    table[:, 0::2] = torch.sin(position * freq)
    table[:, 1::2] = torch.cos(position * freq)
    return table


def multihead_self_attention(
    x: torch.Tensor, p: AttentionParams, n_heads: int, *, return_weights: bool = False
) -> Any:
    """Scaled dot-product self-attention over the sequence axis of ``[N, L, d_model]``."""

    n, length, d_model = x.shape
    if n_heads <= 0 or d_model % n_heads:
        raise ShapeError(f"d_model {d_model} is not divisible by {n_heads} heads")
    d_head = d_model // n_heads

    def heads(t: torch.Tensor) -> torch.Tensor:
        return t.reshape(n, length, n_heads, d_head).transpose(1, 2)

    q, k, v = heads(linear(x, p.query)), heads(linear(x, p.key)), heads(linear(x, p.value))
    weights = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(d_head), dim=-1)
    merged = (weights @ v).transpose(1, 2).reshape(n, length, d_model)
    out = linear(merged, p.output)
    return (out, weights) if return_weights else out


def layer_norm(x: torch.Tensor, p: LayerNormParams, eps: float = 1e-5) -> torch.Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
    return (x - mean) / torch.sqrt(var + eps) * p.gain + p.shift


def feed_forward(x: torch.Tensor, p: FeedForwardParams) -> torch.Tensor:
    return linear(torch.relu(linear(x, p.inner)), p.outer)


def transformer_block(x: torch.Tensor, p: TransformerParams, n_heads: int) -> torch.Tensor:
    """``LN2(FFN(LN1(MSA(x))))``; no residual connections."""

    return layer_norm(
        feed_forward(layer_norm(multihead_self_attention(x, p.attention, n_heads), p.norm1), p.ffn),
        p.norm2,
    )


def conv1d(
    x: torch.Tensor, p: ConvParams, *, stride: int = 1, padding: int = 0
) -> torch.Tensor:
    """Cross-correlate ``[N, L, C_in]`` along the sequence axis into ``[N, L', C_out]``."""

    k, c_in, _ = p.kernel.shape
    n, length, width = x.shape
    if width != c_in:
        raise ShapeError(f"conv1d expects {c_in} input channels, got {width}")
    span = length + 2 * padding - k
    if stride <= 0 or span < 0 or span % stride:
        raise ShapeError(
            f"conv1d output length ({length} + 2*{padding} - {k})/{stride} + 1 is not a positive integer"
        )
    if padding:
        pad = torch.zeros(n, padding, c_in, dtype=x.dtype)
        x = torch.cat([pad, x, pad], dim=1)
    windows = x.unfold(1, k, stride)  # [N, L', C_in, k]
    return torch.einsum("nlck,kco->nlo", windows, p.kernel) + p.bias


def gru_cell_step(h_prev: torch.Tensor, x: torch.Tensor, p: GruParams) -> torch.Tensor:
    """One gated recurrent update: ``h = (1 - z) * n + z * h_prev``."""

    z = torch.sigmoid(linear(x, p.input_update) + h_prev @ p.hidden_update.T)
    r = torch.sigmoid(linear(x, p.input_reset) + h_prev @ p.hidden_reset.T)
    cand = torch.tanh(linear(x, p.input_candidate) + (r * h_prev) @ p.hidden_candidate.T)
    return (1.0 - z) * cand + z * h_prev


# ---------------------------------------------------------------------------
# Parameter store, Adam, gradient check
# ---------------------------------------------------------------------------


Constraint = Callable[[torch.Tensor], None]


@dataclass
class ParamStore:
    """Named leaf tensors with their Adam moments.

    The store shares tensors with the parameter dataclasses it was built from, so an
    in-place update here is seen by every forward pass.
    """

    params: dict[str, torch.Tensor]
    exp_avg: dict[str, torch.Tensor] = field(default_factory=dict)
    exp_avg_sq: dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0
    constraints: dict[str, Constraint] = field(default_factory=dict)

    @classmethod
    def from_params(cls, obj: Any) -> "ParamStore":
        params = named_parameters(obj)
        for t in params.values():
            t.requires_grad_(True)
        return cls(
            params=params,
            exp_avg={k: torch.zeros_like(v) for k, v in params.items()},
            exp_avg_sq={k: torch.zeros_like(v) for k, v in params.items()},
        )

    def add_constraint(self, name: str, fn: Constraint) -> None:
        if name not in self.params:
            raise KeyError(name)
        self.constraints[name] = fn
        with torch.no_grad():
            fn(self.params[name])

    def apply_constraints(self) -> None:
        with torch.no_grad():
            for name, fn in self.constraints.items():
                fn(self.params[name])

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def size(self) -> int:
        return sum(t.numel() for t in self.params.values())

    def norms(self) -> dict[str, float]:
        return {k: float(torch.linalg.vector_norm(v.detach())) for k, v in self.params.items()}

    def snapshot(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.params.items()}

    def restore(self, snapshot: Mapping[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for k, v in self.params.items():
                v.copy_(snapshot[k])

    def save(self, path: Path) -> Path:
        """Write the checkpoint header line and float64 payload."""

        header = {
            "format": CHECKPOINT_FORMAT,
            "tensors": [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()],
        }
        payload = b"".join(
            v.detach().cpu().numpy().astype("<f8").tobytes() for v in self.params.values()
        )
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(json.dumps(header).encode() + b"\n" + payload)
        return path

    def load(self, path: Path) -> None:
        """Overwrite parameters from *path*; names and shapes must match exactly."""

        raw = path.read_bytes()
        head, sep, payload = raw.partition(b"\n")
        if not sep:
            raise CsaiError(f"{path}: not a parameter checkpoint")
        try:
            header = json.loads(head)
        except json.JSONDecodeError as exc:
            raise CsaiError(f"{path}: unreadable checkpoint header") from exc
        if header.get("format") != CHECKPOINT_FORMAT:
            raise CsaiError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
        expected = [{"name": k, "shape": list(v.shape)} for k, v in self.params.items()]
        if header["tensors"] != expected:
            raise ShapeError(f"{path}: checkpoint layout does not match the model")
        values = np.frombuffer(payload, dtype="<f8")
        if values.size != self.size():
            raise ShapeError(f"{path}: expected {self.size()} values, found {values.size}")
        offset = 0
        with torch.no_grad():
            for t in self.params.values():
                n = t.numel()
                t.copy_(torch.from_numpy(values[offset : offset + n].copy()).reshape(t.shape))
                offset += n
        self.apply_constraints()


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    t: int | None = None,
) -> ParamStore:
    """Apply one bias-corrected Adam update using each tensor's ``.grad``.

    Missing gradients count as zero. *t* defaults to ``store.step + 1``.
    """

    t = store.step + 1 if t is None else t
    if t < 1:
        raise ValueError(f"Adam step count must be >= 1, got {t}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in store.params.items():
            g = p.grad if p.grad is not None else torch.zeros_like(p)
            m = store.exp_avg[name].mul_(beta1).add_(g, alpha=1.0 - beta1)
            v = store.exp_avg_sq[name].mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + eps))
    store.step = t
    store.apply_constraints()
    return store


@dataclass(frozen=True)
class GradientProbe:
    name: str
    index: int
    analytic: float
    numeric: float
    relative_error: float


@dataclass(frozen=True)
class FiniteDifferenceReport:
    probes: tuple[GradientProbe, ...]
    max_relative_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error <= self.tol


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-6)


def finite_difference_check(
    loss_fn: Callable[[], torch.Tensor],
    store: ParamStore,
    n_probes: int = 20,
    h: float = 1e-5,
    tol: float = 1e-3,
    *,
    seed: int = 0,
    analytic: Mapping[str, torch.Tensor] | None = None,
) -> FiniteDifferenceReport:
    """Compare autograd (or *analytic*) gradients to central differences.

    Raises
    ------
    CsaiError
        If the loss is not finite.
    """

    store.zero_grad()
    loss = loss_fn()
    if not torch.isfinite(loss):
        raise CsaiError(f"loss is not finite: {loss.detach().item()}")
    if analytic is None:
        loss.backward()
        grads = {
            k: (v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v))
            for k, v in store.params.items()
        }
        store.zero_grad()
    else:
        grads = {k: analytic[k].detach() for k in store.params}

    names = list(store.params)
    sizes = np.array([store.params[k].numel() for k in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(int(offsets[-1]), size=min(n_probes, int(offsets[-1])), replace=False)

    probes: list[GradientProbe] = []
    with torch.no_grad():
        for flat in sorted(int(i) for i in picks):
            j = int(np.searchsorted(offsets, flat, side="right") - 1)
            name, index = names[j], flat - int(offsets[j])
            view = store.params[name].view(-1)
            original = view[index].item()
            view[index] = original + h
            plus = loss_fn().item()
            view[index] = original - h
            minus = loss_fn().item()
            view[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise CsaiError(f"loss is not finite while probing {name}[{index}]")
            numeric = (plus - minus) / (2 * h)
            a = float(grads[name].reshape(-1)[index])
            probes.append(GradientProbe(name, index, a, numeric, relative_error(a, numeric)))

    worst = max((p.relative_error for p in probes), default=0.0)
    logger.debug("gradient_check", extra={"probes": len(probes), "max_relative_error": worst})
    return FiniteDifferenceReport(probes=tuple(probes), max_relative_error=worst, tol=tol)


__all__ = [
    "DTYPE",
    "as_tensor",
    "set_threads",
    "make_generator",
    "uniform_init",
    "LinearParams",
    "LayerNormParams",
    "AttentionParams",
    "FeedForwardParams",
    "TransformerParams",
    "ConvParams",
    "GruParams",
    "named_parameters",
    "linear",
    "positional_encoding",
    "multihead_self_attention",
    "layer_norm",
    "feed_forward",
    "transformer_block",
    "conv1d",
    "gru_cell_step",
    "ParamStore",
    "adam_step",
    "GradientProbe",
    "FiniteDifferenceReport",
    "relative_error",
    "finite_difference_check",
]
