import dataclasses
import math

import pytest
import torch

from tests import reference
from tests.conftest import make_batch
from csai_imputation.brits import bidirectional_brits
from csai_imputation.config import ModelConfig
from csai_imputation.csai import (
    RATE_INIT,
    DecayAttentionParams,
    InitializerParams,
    adjusted_decay_attention,
    classify,
    conditional_hidden_init,
    csai_forward,
    init_csai_params,
    make_store,
)
from csai_imputation.errors import DataValidationError, ShapeError
from csai_imputation.numcore import DTYPE, as_tensor, finite_difference_check, make_generator
from csai_imputation.tsdata import compute_median_gaps

SMALL = ModelConfig(d_model=4, n_heads=2, d_hidden=3)


def t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)


def test_rate_starts_at_one() -> None:
    params = DecayAttentionParams.init(3)
    torch.testing.assert_close(params.rate(), torch.ones(3, dtype=DTYPE))
    assert RATE_INIT == pytest.approx(math.log(math.e - 1))


def test_attention_peaks_at_median_gap() -> None:
    params = DecayAttentionParams.init(1)
    tau = t([2.0])
    deltas = t([[0.0], [1.0], [2.0], [3.0], [4.0]])
    a = adjusted_decay_attention(deltas, tau, params).reshape(-1).tolist()
    assert a[2] == pytest.approx(math.exp(-math.sqrt(1e-6)))
    assert a[2] > a[1] > a[0]
    assert a[2] > a[3] > a[4]
    assert a[1] == pytest.approx(a[3])
    assert a[0] == pytest.approx(math.exp(-math.sqrt(4 + 1e-6)))
    assert all(0 < v <= 1 for v in a)


def test_literal_attention_exceeds_one_for_short_gaps() -> None:
    params = DecayAttentionParams.init(1)
    a = adjusted_decay_attention(t([[0.0], [3.0]]), t([2.0]), params, literal=True)
    assert a[0, 0].item() == pytest.approx(math.exp(2.0))
    assert a[1, 0].item() == pytest.approx(math.exp(-1.0))


def test_attention_shape_checks() -> None:
    with pytest.raises(ShapeError):
        adjusted_decay_attention(torch.zeros(2, 3, dtype=DTYPE), t([1.0, 1.0]), DecayAttentionParams.init(2))


def build_initializer(n_features=2, n_steps=4, d_model=4, d_hidden=3, seed=0):
    return InitializerParams.init(make_generator(seed), n_features, n_steps, d_model, d_hidden)


def test_initializer_shapes() -> None:
    params = build_initializer()
    assert params.conv1.kernel.shape == (1, 4, 3)
    assert params.conv2.kernel.shape == (8, 3, 3)
    x = torch.randn(5, 4, 2, dtype=DTYPE)
    a = torch.rand(5, 4, 2, dtype=DTYPE)
    assert conditional_hidden_init(x, a, params, n_heads=2).shape == (5, 3)
    with pytest.raises(ShapeError):
        conditional_hidden_init(x[:, :3], a[:, :3], params, n_heads=2)
    with pytest.raises(ShapeError):
        conditional_hidden_init(x, a[:, :, :1], params, n_heads=2)


def test_conv2_bias_shifts_hidden_state() -> None:
    params = build_initializer()
    x = torch.randn(2, 4, 2, dtype=DTYPE)
    a = torch.rand(2, 4, 2, dtype=DTYPE)
    before = conditional_hidden_init(x, a, params, n_heads=1)
    with torch.no_grad():
        params.conv2.bias.add_(0.25)
    after = conditional_hidden_init(x, a, params, n_heads=1)
    torch.testing.assert_close(after - before, torch.full((2, 3), 0.25, dtype=DTYPE))


def test_initializer_depends_on_inputs() -> None:
    params = build_initializer()
    x = torch.randn(1, 4, 2, dtype=DTYPE)
    a = torch.rand(1, 4, 2, dtype=DTYPE)
    h1 = conditional_hidden_init(x, a, params, n_heads=2)
    h2 = conditional_hidden_init(x, a * 0.5, params, n_heads=2)
    assert not torch.allclose(h1, h2)


def test_init_is_deterministic() -> None:
    a = init_csai_params(SMALL, 3, 4, seed=1)
    b = init_csai_params(SMALL, 3, 4, seed=1)
    assert torch.equal(a.forward_cell.history.weight, b.forward_cell.history.weight)
    assert a.initializer is not None and b.initializer is not None
    assert torch.equal(a.initializer.conv2.kernel, b.initializer.conv2.kernel)
    plain = init_csai_params(SMALL.model_copy(update={"use_hidden_init": False}), 3, 4, seed=1)
    assert plain.initializer is None
    # the recurrent cells are drawn first, so switching the initializer off keeps them
    assert torch.equal(a.backward_cell.rnn.hidden_update, plain.backward_cell.rnn.hidden_update)


def test_forward_output_shapes_and_pass_through() -> None:
    batch = make_batch(n=3, t=4, d=2, seed=2)
    params = init_csai_params(SMALL, 2, 4, seed=0)
    out = csai_forward(batch, params, SMALL, compute_median_gaps(batch))
    assert out.imputation.shape == (3, 4, 2)
    assert out.logits.shape == (3,)
    assert out.h_init_forward is not None and out.h_init_forward.shape == (3, 3)
    assert out.h_init_backward is not None
    mask = out.mask == 1
    assert torch.equal(out.completed[mask], out.values[mask])
    assert torch.all((out.probability > 0) & (out.probability < 1))
    torch.testing.assert_close(
        out.probability,
        classify(
            out.directions.forward.final_hidden,
            out.directions.backward.final_hidden,
            params.classifier,
        ),
    )


def test_forward_needs_median_gaps() -> None:
    batch = make_batch(n=2, t=4, d=2)
    params = init_csai_params(SMALL, 2, 4, seed=0)
    with pytest.raises(DataValidationError):
        csai_forward(batch, params, SMALL)
    with pytest.raises(ShapeError):
        csai_forward(batch, params, SMALL, [1.0, 2.0, 3.0])


@pytest.mark.parametrize("seed", range(20))
def test_without_initializer_reduces_to_brits(seed: int) -> None:
    batch = make_batch(n=3, t=5, d=2, seed=seed)
    params = dataclasses.replace(init_csai_params(SMALL, 2, 5, seed=seed + 100), initializer=None)
    out = csai_forward(batch, params, SMALL)
    plain_brits = bidirectional_brits(batch, params.forward_cell, params.backward_cell)
    assert torch.equal(out.imputation, plain_brits.merged.imputation)
    assert torch.equal(out.completed, plain_brits.merged.completed)
    assert out.h_init_forward is None


def test_model_is_tied_to_its_sequence_length() -> None:
    batch = make_batch(n=2, t=5, d=2)
    params = init_csai_params(SMALL, 2, 4, seed=0)
    with pytest.raises(ShapeError, match="built for 4 steps, got 5"):
        csai_forward(batch, params, SMALL, compute_median_gaps(batch))
    plain = dataclasses.replace(params, initializer=None)
    assert csai_forward(batch, plain, SMALL).imputation.shape == (2, 5, 2)


def test_hidden_init_matches_loop_reference() -> None:
    gen = make_generator(21)
    params = build_initializer(n_features=2, n_steps=2, d_model=4, d_hidden=3, seed=21)
    last_obs = torch.randn(2, 2, 2, generator=gen, dtype=DTYPE)
    attention = torch.rand(2, 2, 2, generator=gen, dtype=DTYPE)
    out = conditional_hidden_init(last_obs, attention, params, n_heads=2)
    pe = reference.positional(2, 4)
    for n in range(2):
        x_enc = [
            [a + b for a, b in zip(reference.affine(params.input_proj, row), pe[t])]
            for t, row in enumerate(last_obs[n].tolist())
        ]
        a_enc = [
            [a + b for a, b in zip(reference.affine(params.input_proj, row), pe[t])]
            for t, row in enumerate(attention[n].tolist())
        ]
        encoded = reference.transformer(x_enc + a_enc, params.transformer, n_heads=2)
        collapsed = reference.conv(reference.conv(encoded, params.conv1), params.conv2)
        assert len(collapsed) == 1
        assert reference.max_abs_diff(out[n].tolist(), collapsed[0]) < 1e-12


def test_hidden_init_changes_the_imputation() -> None:
    batch = make_batch(n=3, t=5, d=2, seed=3)
    params = init_csai_params(SMALL, 2, 5, seed=4)
    tau = compute_median_gaps(batch)
    with_init = csai_forward(batch, params, SMALL, tau)
    without = csai_forward(batch, dataclasses.replace(params, initializer=None), SMALL)
    assert not torch.allclose(with_init.imputation, without.imputation)


def test_store_zeroes_feature_diagonals() -> None:
    params = init_csai_params(SMALL, 3, 4, seed=0)
    store = make_store(params)
    assert "forward_cell.feature.weight" in store.constraints
    assert "backward_cell.feature.weight" in store.constraints
    assert store.params["initializer.conv2.kernel"].shape == (8, 3, 3)


@pytest.mark.parametrize("n_heads", [1, 2])
def test_gradients_match_finite_differences(n_heads: int) -> None:
    config = ModelConfig(d_model=4, n_heads=n_heads, d_hidden=3)
    batch = make_batch(n=2, t=4, d=3, seed=11, labels=True)
    tau = compute_median_gaps(batch)
    params = init_csai_params(config, 3, 4, seed=5)
    store = make_store(params)
    target = as_tensor(batch.values)
    labels = as_tensor(batch.labels)

    def loss() -> torch.Tensor:
        out = csai_forward(batch, params, config, tau)
        bce = torch.nn.functional.binary_cross_entropy_with_logits(out.logits, labels)
        return ((out.imputation - target) ** 2).mean() + out.consistency + bce

    report = finite_difference_check(loss, store, n_probes=40, seed=n_heads)
    assert report.passed, report.max_relative_error
