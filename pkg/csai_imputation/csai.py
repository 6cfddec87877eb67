"""Conditional hidden-state initialization on top of the bidirectional backbone.

Instead of starting each recurrent direction from zeros, the model summarizes the
series' last observations and a *decay attention* signal into an initial hidden state:

1. Decay attention ``A = exp(-alpha_d * sqrt((delta - tau_d)^2 + eps))`` peaks when the
   gap since the last observation equals the feature's typical (median) gap ``tau_d``
   and falls off on both sides.
2. Last observations and attention are each projected to ``d_model`` and given a
   sinusoidal positional encoding, then concatenated along the sequence axis
   (``L = 2T``).
3. One transformer block ``LN(FFN(LN(MSA(.))))`` encodes the sequence.
4. A width-1 convolution maps ``d_model`` to ``d_hidden`` and a full-length convolution
   collapses the sequence into one ``d_hidden`` vector per sample.

The initializer is shared by both directions; each direction has its own attention
rates. A sigmoid head on the concatenated final states scores the outcome.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any

import torch
from torch.nn import functional as F

from .brits import (
    BidirectionalOutput,
    BritsCellParams,
    SeriesTensors,
    bidirectional_from_series,
    register_constraints,
)
from .config import ModelConfig
from .errors import DataValidationError, ShapeError
from .numcore import (
    DTYPE,
    ConvParams,
    LinearParams,
    ParamStore,
    as_tensor,
    conv1d,
    linear,
    make_generator,
    positional_encoding,
    TransformerParams,
    transformer_block,
)
from .tsdata import MedianGaps, TimeSeriesBatch

logger = logging.getLogger(__name__)

# softplus(RATE_INIT) == 1
RATE_INIT = math.log(math.e - 1.0)


@dataclass(frozen=True)
class DecayAttentionParams:
    raw_rate: torch.Tensor
    """``[D]``; the effective rate is ``softplus(raw_rate)``."""

    @classmethod
    def init(cls, n_features: int) -> "DecayAttentionParams":
        return cls(torch.full((n_features,), RATE_INIT, dtype=DTYPE))

    def rate(self) -> torch.Tensor:
        return F.softplus(self.raw_rate)


def adjusted_decay_attention(
    delta: torch.Tensor,
    tau: torch.Tensor,
    params: DecayAttentionParams,
    *,
    eps: float = 1e-6,
    literal: bool = False,
) -> torch.Tensor:
    """Return attention weights shaped like *delta* (last axis = features).

    ``literal=True`` switches to the signed form ``exp(-alpha * (delta - tau))``, which
    exceeds 1 for gaps shorter than ``tau``.
    """

    if delta.shape[-1] != tau.shape[-1] or tau.shape != params.raw_rate.shape:
        raise ShapeError(
            f"delta {tuple(delta.shape)}, tau {tuple(tau.shape)} and rates "
            f"{tuple(params.raw_rate.shape)} disagree"
        )
    alpha = params.rate()
    diff = delta - tau
    if literal:
        return torch.exp(-alpha * diff)
    return torch.exp(-alpha * torch.sqrt(diff * diff + eps))


@dataclass(frozen=True)
class InitializerParams:
    input_proj: LinearParams
    transformer: TransformerParams
    conv1: ConvParams
    conv2: ConvParams

    @classmethod
    def init(
        cls, gen: torch.Generator, n_features: int, n_steps: int, d_model: int, d_hidden: int
    ) -> "InitializerParams":
        return cls(
            input_proj=LinearParams.init(gen, n_features, d_model),
            transformer=TransformerParams.init(gen, d_model),
            conv1=ConvParams.init(gen, 1, d_model, d_hidden),
            conv2=ConvParams.init(gen, 2 * n_steps, d_hidden, d_hidden),
        )


def conditional_hidden_init(
    last_obs: torch.Tensor,
    attention: torch.Tensor,
    params: InitializerParams,
    n_heads: int,
) -> torch.Tensor:
    """Encode ``[N, T, D]`` last observations and attention into ``[N, d_hidden]``."""

    if last_obs.shape != attention.shape or last_obs.dim() != 3:
        raise ShapeError(
            f"last_obs {tuple(last_obs.shape)} and attention {tuple(attention.shape)} disagree"
        )
    steps = last_obs.shape[1]
    if params.conv2.kernel.shape[0] != 2 * steps:
        raise ShapeError(
            f"initializer was built for {params.conv2.kernel.shape[0] // 2} steps, got {steps}"
        )
    d_model = params.input_proj.weight.shape[0]
    pe = positional_encoding(steps, d_model)
    x_enc = linear(last_obs, params.input_proj) + pe
    a_enc = linear(attention, params.input_proj) + pe
    c_in = torch.cat([x_enc, a_enc], dim=1)
    c_out = transformer_block(c_in, params.transformer, n_heads)
    h1 = conv1d(c_out, params.conv1)
    return conv1d(h1, params.conv2).squeeze(1)


@dataclass(frozen=True)
class CsaiParams:
    forward_cell: BritsCellParams
    backward_cell: BritsCellParams
    forward_attention: DecayAttentionParams
    backward_attention: DecayAttentionParams
    classifier: LinearParams
    initializer: InitializerParams | None = None
    """``None`` disables conditional initialization (plain BRITS)."""


def init_csai_params(
    config: ModelConfig, n_features: int, n_steps: int, seed: int
) -> CsaiParams:
    """Draw fresh parameters; identical arguments give identical tensors.

    The initializer's second convolution spans the whole encoded sequence (``2 *
    n_steps`` positions), so a model built with an initializer only accepts batches of
    exactly *n_steps* steps; other lengths raise :class:`ShapeError`. Without the
    initializer the parameters do not depend on *n_steps*.
    """

    gen = make_generator(seed)
    forward_cell = BritsCellParams.init(gen, n_features, config.d_hidden, config.recurrent_input)
    backward_cell = BritsCellParams.init(gen, n_features, config.d_hidden, config.recurrent_input)
    classifier = LinearParams.init(gen, 2 * config.d_hidden, 1)
    initializer = (
        InitializerParams.init(gen, n_features, n_steps, config.d_model, config.d_hidden)
        if config.use_hidden_init
        else None
    )
    return CsaiParams(
        forward_cell=forward_cell,
        backward_cell=backward_cell,
        forward_attention=DecayAttentionParams.init(n_features),
        backward_attention=DecayAttentionParams.init(n_features),
        classifier=classifier,
        initializer=initializer,
    )


def make_store(params: CsaiParams) -> ParamStore:
    """Wrap *params* in a store that keeps feature-regression diagonals at zero."""

    store = ParamStore.from_params(params)
    register_constraints(store)
    return store


@dataclass(frozen=True)
class ModelOutput:
    imputation: torch.Tensor
    """``[N, T, D]`` mean of both directions' combined estimates."""
    completed: torch.Tensor
    """Input at observed cells, imputation elsewhere."""
    directions: BidirectionalOutput
    h_init_forward: torch.Tensor | None
    h_init_backward: torch.Tensor | None
    logits: torch.Tensor
    """``[N]`` classifier logits."""
    values: torch.Tensor
    mask: torch.Tensor

    @property
    def probability(self) -> torch.Tensor:
        return torch.sigmoid(self.logits)

    @property
    def consistency(self) -> torch.Tensor:
        return self.directions.merged.consistency


def classifier_logits(h_forward: torch.Tensor, h_backward: torch.Tensor, head: LinearParams) -> torch.Tensor:
    return linear(torch.cat([h_forward, h_backward], dim=-1), head).squeeze(-1)


def classify(h_forward: torch.Tensor, h_backward: torch.Tensor, head: LinearParams) -> torch.Tensor:
    """Outcome probability from the concatenated final hidden states."""

    return torch.sigmoid(classifier_logits(h_forward, h_backward, head))


def _tau_tensor(tau: MedianGaps | Any | None, n_features: int) -> torch.Tensor:
    if tau is None:
        raise DataValidationError("median gaps are required for decay attention")
    raw = tau.tau if isinstance(tau, MedianGaps) else tau
    t = as_tensor(raw)
    if t.shape != (n_features,):
        raise ShapeError(f"median gaps {tuple(t.shape)} do not match {n_features} features")
    return t


def csai_forward(
    batch: TimeSeriesBatch,
    params: CsaiParams,
    config: ModelConfig,
    tau: MedianGaps | Any | None = None,
) -> ModelOutput:
    """Run the full bidirectional model on *batch*.

    With ``params.initializer`` set, each direction starts from the encoded summary of
    its own time order; otherwise both start from zeros and the result is plain
    bidirectional BRITS.
    """

    fwd = SeriesTensors.from_batch(batch, "forward")
    bwd = SeriesTensors.from_batch(batch, "backward")
    h_f: torch.Tensor | None = None
    h_b: torch.Tensor | None = None
    if params.initializer is not None:
        tau_t = _tau_tensor(tau, batch.n_features)
        a_f = adjusted_decay_attention(
            fwd.delta,
            tau_t,
            params.forward_attention,
            eps=config.attention_eps,
            literal=config.literal_decay_attention,
        )
        a_b = adjusted_decay_attention(
            bwd.delta,
            tau_t,
            params.backward_attention,
            eps=config.attention_eps,
            literal=config.literal_decay_attention,
        )
        h_f = conditional_hidden_init(fwd.last_obs, a_f, params.initializer, config.n_heads)
        h_b = conditional_hidden_init(bwd.last_obs, a_b, params.initializer, config.n_heads)
    out = bidirectional_from_series(
        fwd,
        bwd,
        params.forward_cell,
        params.backward_cell,
        h_init_forward=h_f,
        h_init_backward=h_b,
        recurrent_input=config.recurrent_input,
    )
    logits = classifier_logits(out.forward.final_hidden, out.backward.final_hidden, params.classifier)
    return ModelOutput(
        imputation=out.merged.imputation,
        completed=out.merged.completed,
        directions=out,
        h_init_forward=h_f,
        h_init_backward=h_b,
        logits=logits,
        values=fwd.values,
        mask=fwd.mask,
    )


__all__ = [
    "RATE_INIT",
    "DecayAttentionParams",
    "InitializerParams",
    "CsaiParams",
    "ModelOutput",
    "adjusted_decay_attention",
    "conditional_hidden_init",
    "init_csai_params",
    "make_store",
    "classify",
    "classifier_logits",
    "csai_forward",
]
