"""Bidirectional recurrent imputation backbone.

Each direction walks the series one step at a time. At step ``t`` the previous hidden
state is decayed by the time since the last observation, regressed onto the features
(history estimate), the gaps are filled with that estimate, every feature is regressed on
the *other* features (feature estimate), and a learned gate mixes the two. Observed
cells always pass through unchanged. The completed step feeds a gated recurrent unit.

The backward direction runs the same cell on the time-reversed series whose deltas are
recomputed from reversed timestamps; its outputs are flipped back to chronological order
before the two directions are merged.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import torch

from .errors import DataValidationError, ShapeError
from .numcore import DTYPE, GruParams, LinearParams, ParamStore, as_tensor, gru_cell_step, linear
from .tsdata import TimeSeriesBatch

Direction = Literal["forward", "backward"]
RecurrentInput = Literal["product", "concat"]


@dataclass(frozen=True)
class BritsCellParams:
    hidden_decay: LinearParams
    """delta ``[D]`` -> hidden-sized decay."""
    history: LinearParams
    """hidden -> features."""
    feature: LinearParams
    """features -> features with a zero diagonal."""
    feature_decay: LinearParams
    combine: LinearParams
    rnn: GruParams

    @classmethod
    def init(
        cls,
        gen: torch.Generator,
        n_features: int,
        d_hidden: int,
        recurrent_input: RecurrentInput = "product",
    ) -> "BritsCellParams":
        d_in = n_features if recurrent_input == "product" else 2 * n_features
        params = cls(
            hidden_decay=LinearParams.init(gen, n_features, d_hidden),
            history=LinearParams.init(gen, d_hidden, n_features),
            feature=LinearParams.init(gen, n_features, n_features),
            feature_decay=LinearParams.init(gen, n_features, n_features),
            combine=LinearParams.init(gen, n_features, n_features),
            rnn=GruParams.init(gen, d_in, d_hidden),
        )
        with torch.no_grad():
            params.feature.weight.fill_diagonal_(0.0)
        return params

    @property
    def d_hidden(self) -> int:
        return int(self.history.weight.shape[1])

    @property
    def n_features(self) -> int:
        return int(self.history.weight.shape[0])


def zero_diagonal(weight: torch.Tensor) -> None:
    weight.fill_diagonal_(0.0)


def register_constraints(store: ParamStore) -> None:
    """Keep every feature-regression weight's diagonal at zero after updates."""

    for name in store.params:
        if name.endswith("feature.weight"):
            store.add_constraint(name, zero_diagonal)


@dataclass(frozen=True)
class StepOutput:
    h: torch.Tensor
    x_hat: torch.Tensor
    x_hc: torch.Tensor
    x_fc: torch.Tensor
    beta: torch.Tensor
    x_c: torch.Tensor
    completed: torch.Tensor
    gamma_h: torch.Tensor
    gamma_f: torch.Tensor


def temporal_decay(delta: torch.Tensor, p: LinearParams) -> torch.Tensor:
    """``exp(-max(0, W delta + b))``; output width follows ``p``."""

    return torch.exp(-torch.relu(linear(delta, p)))


def _off_diagonal(weight: torch.Tensor) -> torch.Tensor:
    return weight * (1.0 - torch.eye(weight.shape[0], dtype=weight.dtype))


def brits_cell_step(
    h_prev: torch.Tensor,
    x: torch.Tensor,
    m: torch.Tensor,
    delta: torch.Tensor,
    params: BritsCellParams,
    recurrent_input: RecurrentInput = "product",
) -> StepOutput:
    """Advance one direction by one step.

    Works on a single step ``[D]`` or a batch ``[N, D]``. The recurrent input is
    ``C * m`` by default or ``[C, m]`` concatenated.
    """

    if not bool(((m == 0) | (m == 1)).all()):
        raise DataValidationError("mask must be binary")
    if x.shape != m.shape or x.shape != delta.shape:
        raise ShapeError(f"x {tuple(x.shape)}, m {tuple(m.shape)}, delta {tuple(delta.shape)} disagree")

    gamma_h = temporal_decay(delta, params.hidden_decay)
    h = h_prev * gamma_h
    x_hat = linear(h, params.history)
    x_hc = m * x + (1.0 - m) * x_hat
    x_fc = x_hc @ _off_diagonal(params.feature.weight).T + params.feature.bias
    gamma_f = temporal_decay(delta, params.feature_decay)
    beta = torch.sigmoid(linear(gamma_f * m, params.combine))
    x_c = beta * x_fc + (1.0 - beta) * x_hc
    completed = m * x + (1.0 - m) * x_c
    if recurrent_input == "product":
        rnn_in = completed * m
    elif recurrent_input == "concat":
        rnn_in = torch.cat([completed, m], dim=-1)
    else:
        raise ValueError(f"unknown recurrent input {recurrent_input!r}")
    h_next = gru_cell_step(h, rnn_in, params.rnn)
    return StepOutput(h_next, x_hat, x_hc, x_fc, beta, x_c, completed, gamma_h, gamma_f)


@dataclass(frozen=True)
class SeriesTensors:
    """Tensor view of a batch in one direction's time order."""

    values: torch.Tensor
    mask: torch.Tensor
    delta: torch.Tensor
    last_obs: torch.Tensor

    @classmethod
    def from_batch(cls, batch: TimeSeriesBatch, direction: Direction = "forward") -> "SeriesTensors":
        if direction not in ("forward", "backward"):
            raise ValueError(f"unknown direction {direction!r}")
        source = batch if direction == "forward" else batch.reversed()
        return cls(
            values=as_tensor(source.values),
            mask=as_tensor(source.mask),
            delta=as_tensor(source.delta),
            last_obs=as_tensor(source.last_obs),
        )


@dataclass(frozen=True)
class DirectionOutput:
    """Per-step estimates ``[N, T, D]`` in chronological order plus the final state."""

    x_hat: torch.Tensor
    x_fc: torch.Tensor
    x_c: torch.Tensor
    completed: torch.Tensor
    final_hidden: torch.Tensor


def unroll_series(
    series: SeriesTensors,
    params: BritsCellParams,
    h_init: torch.Tensor | None = None,
    recurrent_input: RecurrentInput = "product",
) -> DirectionOutput:
    """Run the cell over the series in its stored order."""

    n, steps, _ = series.values.shape
    if h_init is None:
        h = torch.zeros(n, params.d_hidden, dtype=DTYPE)
    else:
        if tuple(h_init.shape) != (n, params.d_hidden):
            raise ShapeError(f"h_init {tuple(h_init.shape)} must be ({n}, {params.d_hidden})")
        h = h_init
    outs: list[StepOutput] = []
    for t in range(steps):
        step = brits_cell_step(
            h,
            series.values[:, t],
            series.mask[:, t],
            series.delta[:, t],
            params,
            recurrent_input,
        )
        outs.append(step)
        h = step.h
    return DirectionOutput(
        x_hat=torch.stack([o.x_hat for o in outs], dim=1),
        x_fc=torch.stack([o.x_fc for o in outs], dim=1),
        x_c=torch.stack([o.x_c for o in outs], dim=1),
        completed=torch.stack([o.completed for o in outs], dim=1),
        final_hidden=h,
    )


def _flip(out: DirectionOutput) -> DirectionOutput:
    return DirectionOutput(
        x_hat=out.x_hat.flip(1),
        x_fc=out.x_fc.flip(1),
        x_c=out.x_c.flip(1),
        completed=out.completed.flip(1),
        final_hidden=out.final_hidden,
    )


def unroll_direction(
    batch: TimeSeriesBatch,
    params: BritsCellParams,
    h_init: torch.Tensor | None = None,
    direction: Direction = "forward",
    recurrent_input: RecurrentInput = "product",
) -> DirectionOutput:
    """Unroll one direction over *batch*; ``h_init=None`` starts from zeros."""

    out = unroll_series(SeriesTensors.from_batch(batch, direction), params, h_init, recurrent_input)
    return out if direction == "forward" else _flip(out)


@dataclass(frozen=True)
class MergedOutput:
    imputation: torch.Tensor
    completed: torch.Tensor
    consistency: torch.Tensor


def merge_bidirectional(
    fwd: DirectionOutput, bwd: DirectionOutput, values: torch.Tensor, mask: torch.Tensor
) -> MergedOutput:
    """Average the directions' combined estimates; observed cells pass through.

    The consistency penalty is the mean absolute difference between the two
    directions' combined estimates over all cells.
    """

    if fwd.x_c.shape != bwd.x_c.shape:
        raise ShapeError(
            f"directions cover different steps: {tuple(fwd.x_c.shape)} vs {tuple(bwd.x_c.shape)}"
        )
    if values.shape != fwd.x_c.shape or mask.shape != fwd.x_c.shape:
        raise ShapeError("merged outputs do not match the batch")
    imputation = (fwd.x_c + bwd.x_c) / 2.0
    return MergedOutput(
        imputation=imputation,
        completed=mask * values + (1.0 - mask) * imputation,
        consistency=(fwd.x_c - bwd.x_c).abs().mean(),
    )


@dataclass(frozen=True)
class BidirectionalOutput:
    forward: DirectionOutput
    backward: DirectionOutput
    merged: MergedOutput


def bidirectional_brits(
    batch: TimeSeriesBatch,
    forward_cell: BritsCellParams,
    backward_cell: BritsCellParams,
    *,
    h_init_forward: torch.Tensor | None = None,
    h_init_backward: torch.Tensor | None = None,
    recurrent_input: RecurrentInput = "product",
) -> BidirectionalOutput:
    """Run both directions and merge them; zero initial states give plain BRITS."""

    fwd_series = SeriesTensors.from_batch(batch, "forward")
    bwd_series = SeriesTensors.from_batch(batch, "backward")
    return bidirectional_from_series(
        fwd_series,
        bwd_series,
        forward_cell,
        backward_cell,
        h_init_forward=h_init_forward,
        h_init_backward=h_init_backward,
        recurrent_input=recurrent_input,
    )


def bidirectional_from_series(
    fwd_series: SeriesTensors,
    bwd_series: SeriesTensors,
    forward_cell: BritsCellParams,
    backward_cell: BritsCellParams,
    *,
    h_init_forward: torch.Tensor | None = None,
    h_init_backward: torch.Tensor | None = None,
    recurrent_input: RecurrentInput = "product",
) -> BidirectionalOutput:
    fwd = unroll_series(fwd_series, forward_cell, h_init_forward, recurrent_input)
    bwd = _flip(unroll_series(bwd_series, backward_cell, h_init_backward, recurrent_input))
    merged = merge_bidirectional(fwd, bwd, fwd_series.values, fwd_series.mask)
    return BidirectionalOutput(forward=fwd, backward=bwd, merged=merged)


__all__ = [
    "Direction",
    "RecurrentInput",
    "BritsCellParams",
    "StepOutput",
    "SeriesTensors",
    "DirectionOutput",
    "MergedOutput",
    "BidirectionalOutput",
    "temporal_decay",
    "brits_cell_step",
    "unroll_series",
    "unroll_direction",
    "merge_bidirectional",
    "bidirectional_brits",
    "bidirectional_from_series",
    "register_constraints",
    "zero_diagonal",
]
