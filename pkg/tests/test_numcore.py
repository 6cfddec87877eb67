import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest
import torch

from tests import reference
from csai_imputation.errors import CsaiError, ShapeError
from csai_imputation.numcore import (
    DTYPE,
    AttentionParams,
    ConvParams,
    GruParams,
    LayerNormParams,
    LinearParams,
    ParamStore,
    TransformerParams,
    adam_step,
    conv1d,
    finite_difference_check,
    gru_cell_step,
    layer_norm,
    linear,
    make_generator,
    multihead_self_attention,
    named_parameters,
    positional_encoding,
    relative_error,
    transformer_block,
)


@dataclass(frozen=True)
class Pair:
    first: LinearParams
    second: LinearParams | None = None


def t(values) -> torch.Tensor:
    return torch.tensor(values, dtype=DTYPE)


def test_positional_encoding_values() -> None:
    pe = positional_encoding(3, 4)
    assert pe.shape == (3, 4)
    assert pe[0].tolist() == [0.0, 1.0, 0.0, 1.0]
    assert pe[1, 0].item() == pytest.approx(math.sin(1.0))
    assert pe[1, 1].item() == pytest.approx(math.cos(1.0))
    assert pe[1, 2].item() == pytest.approx(math.sin(0.01))
    assert pe[2, 3].item() == pytest.approx(math.cos(0.02))


def test_positional_encoding_full_table() -> None:
    table = positional_encoding(8, 4)
    assert reference.max_abs_diff(table.tolist(), reference.positional(8, 4)) < 1e-12
    assert table[7, 0].item() == pytest.approx(math.sin(7.0), abs=1e-12)
    assert table[7, 3].item() == pytest.approx(math.cos(0.07), abs=1e-12)


def test_positional_encoding_rejects_odd_width() -> None:
    with pytest.raises(ShapeError):
        positional_encoding(3, 5)


def test_linear_checks_width() -> None:
    p = LinearParams(t([[1.0, 2.0]]), t([0.5]))
    assert linear(t([[1.0, 1.0]]), p).tolist() == [[3.5]]
    with pytest.raises(ShapeError):
        linear(t([[1.0, 1.0, 1.0]]), p)


def test_attention_over_single_step_is_value_projection() -> None:
    gen = make_generator(0)
    p = AttentionParams.init(gen, 4)
    x = torch.randn(2, 1, 4, generator=gen, dtype=DTYPE)
    out, weights = multihead_self_attention(x, p, 2, return_weights=True)
    expected = linear(linear(x, p.value), p.output)
    torch.testing.assert_close(out, expected)
    assert weights.shape == (2, 2, 1, 1)
    assert torch.all(weights == 1.0)


def test_attention_weights_are_row_stochastic() -> None:
    gen = make_generator(1)
    p = AttentionParams.init(gen, 6)
    x = torch.randn(3, 5, 6, generator=gen, dtype=DTYPE)
    _, weights = multihead_self_attention(x, p, 3, return_weights=True)
    torch.testing.assert_close(weights.sum(-1), torch.ones(3, 3, 5, dtype=DTYPE))
    with pytest.raises(ShapeError):
        multihead_self_attention(x, p, 4)


def test_layer_norm_standardizes_last_axis() -> None:
    x = t([[1.0, 2.0, 3.0, 6.0]])
    out = layer_norm(x, LayerNormParams.init(4))
    assert out.mean().item() == pytest.approx(0.0, abs=1e-12)
    assert out.var(unbiased=False).item() == pytest.approx(1.0, rel=1e-4)


def test_transformer_block_keeps_shape() -> None:
    gen = make_generator(2)
    p = TransformerParams.init(gen, 4)
    assert p.ffn.inner.weight.shape == (16, 4)
    x = torch.randn(2, 6, 4, generator=gen, dtype=DTYPE)
    assert transformer_block(x, p, 2).shape == (2, 6, 4)


def test_conv_identity_kernel() -> None:
    kernel = torch.eye(3, dtype=DTYPE)[None]
    p = ConvParams(kernel, torch.zeros(3, dtype=DTYPE))
    x = torch.randn(2, 5, 3, dtype=DTYPE)
    torch.testing.assert_close(conv1d(x, p), x)


def test_conv_full_width_kernel_sums_window() -> None:
    x = t([[[1.0], [2.0], [3.0]]])
    p = ConvParams(t([[[1.0]], [[10.0]], [[100.0]]]), t([0.5]))
    out = conv1d(x, p)
    assert out.shape == (1, 1, 1)
    assert out.item() == 321.5


def test_conv_padding_and_stride() -> None:
    x = t([[[1.0], [2.0], [3.0], [4.0]]])
    p = ConvParams(t([[[1.0]], [[1.0]]]), t([0.0]))
    assert conv1d(x, p, stride=2).reshape(-1).tolist() == [3.0, 7.0]
    assert conv1d(x, p, padding=1, stride=1).reshape(-1).tolist() == [1.0, 3.0, 5.0, 7.0, 4.0]
    with pytest.raises(ShapeError):
        conv1d(x, p, stride=3)
    with pytest.raises(ShapeError):
        conv1d(torch.zeros(1, 4, 2, dtype=DTYPE), p)


def test_gru_with_zero_weights_halves_state() -> None:
    d_in, d_hidden = 2, 3
    zero = LinearParams(torch.zeros(d_hidden, d_in, dtype=DTYPE), torch.zeros(d_hidden, dtype=DTYPE))
    square = torch.zeros(d_hidden, d_hidden, dtype=DTYPE)
    p = GruParams(zero, zero, zero, square, square, square)
    h = t([[1.0, -2.0, 4.0]])
    out = gru_cell_step(h, t([[3.0, 3.0]]), p)
    assert out.tolist() == [[0.5, -1.0, 2.0]]


@pytest.mark.parametrize("n_heads", [1, 2, 4])
def test_attention_matches_loop_reference(n_heads: int) -> None:
    gen = make_generator(n_heads)
    p = AttentionParams.init(gen, 4)
    x = torch.randn(2, 3, 4, generator=gen, dtype=DTYPE)
    out = multihead_self_attention(x, p, n_heads)
    for n in range(2):
        expected = reference.attention(x[n].tolist(), p, n_heads)
        assert reference.max_abs_diff(out[n].tolist(), expected) < 1e-12


def test_transformer_block_matches_loop_reference() -> None:
    gen = make_generator(8)
    p = TransformerParams.init(gen, 4)
    with torch.no_grad():
        for norm in (p.norm1, p.norm2):
            norm.gain.copy_(torch.rand(4, generator=gen, dtype=DTYPE) + 0.5)
            norm.shift.copy_(torch.randn(4, generator=gen, dtype=DTYPE))
    x = torch.randn(1, 2, 4, generator=gen, dtype=DTYPE)
    out = transformer_block(x, p, n_heads=2)
    expected = reference.transformer(x[0].tolist(), p, n_heads=2)
    assert reference.max_abs_diff(out[0].tolist(), expected) < 1e-12


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2)])
def test_conv_matches_loop_reference(stride: int, padding: int) -> None:
    gen = make_generator(stride + 10 * padding)
    p = ConvParams.init(gen, 3, 3, 2)
    x = torch.randn(2, 5, 3, generator=gen, dtype=DTYPE)
    out = conv1d(x, p, stride=stride, padding=padding)
    for n in range(2):
        expected = reference.conv(x[n].tolist(), p, stride, padding)
        assert out.shape[1] == len(expected)
        assert reference.max_abs_diff(out[n].tolist(), expected) < 1e-12


def test_gru_matches_loop_reference() -> None:
    gen = make_generator(3)
    p = GruParams.init(gen, 2, 3)
    for _ in range(20):
        h = torch.randn(3, generator=gen, dtype=DTYPE)
        x = torch.randn(2, generator=gen, dtype=DTYPE)
        out = gru_cell_step(h, x, p)
        expected = reference.gru(h.tolist(), x.tolist(), p)
        assert reference.max_abs_diff(out.tolist(), expected) < 1e-12


def test_named_parameters_skips_none() -> None:
    pair = Pair(LinearParams(t([[1.0]]), t([0.0])))
    assert list(named_parameters(pair)) == ["first.weight", "first.bias"]


def test_adam_constant_gradient_moves_by_learning_rate() -> None:
    p = LinearParams(t([[1.0]]), t([0.0]))
    store = ParamStore.from_params(p)
    for _ in range(2):
        store.zero_grad()
        (2.0 * p.weight.sum()).backward()
        adam_step(store, lr=0.01)
    assert store.step == 2
    assert p.weight.item() == pytest.approx(0.98, abs=1e-8)
    # no gradient reached the bias
    assert p.bias.item() == 0.0


def test_adam_matches_hand_computed_trace() -> None:
    w = LinearParams(t([[0.0]]), t([0.0]))
    store = ParamStore.from_params(w)
    grads = [1.0, -3.0]
    m = v = 0.0
    x = 0.0
    for step, g in enumerate(grads, start=1):
        store.zero_grad()
        (g * w.weight.sum()).backward()
        adam_step(store, lr=0.1, beta1=0.5, beta2=0.75, eps=1e-8)
        m = 0.5 * m + 0.5 * g
        v = 0.75 * v + 0.25 * g * g
        x -= 0.1 * (m / (1 - 0.5**step)) / (math.sqrt(v / (1 - 0.75**step)) + 1e-8)
    assert w.weight.item() == pytest.approx(x, abs=1e-12)


def test_adam_rejects_bad_step() -> None:
    store = ParamStore.from_params(LinearParams(t([[0.0]]), t([0.0])))
    with pytest.raises(ValueError):
        adam_step(store, lr=0.1, t=0)


def test_constraints_apply_after_each_step() -> None:
    p = LinearParams(t([[1.0, 1.0], [1.0, 1.0]]), t([0.0, 0.0]))
    store = ParamStore.from_params(p)
    store.add_constraint("weight", lambda w: w.fill_diagonal_(0.0))
    assert p.weight.diagonal().tolist() == [0.0, 0.0]
    (p.weight.sum() * 3.0).backward()
    adam_step(store, lr=0.1)
    assert p.weight.diagonal().tolist() == [0.0, 0.0]
    assert p.weight[0, 1].item() == pytest.approx(0.9)
    with pytest.raises(KeyError):
        store.add_constraint("missing", lambda w: None)


def test_checkpoint_round_trip(tmp_path: Path) -> None:
    gen = make_generator(3)
    p = TransformerParams.init(gen, 4)
    store = ParamStore.from_params(p)
    path = store.save(tmp_path / "params.bin")
    header = path.read_bytes().split(b"\n", 1)[0]
    assert b"csai-params-v1" in header

    before = store.snapshot()
    with torch.no_grad():
        for v in store.params.values():
            v.add_(1.0)
    store.load(path)
    for k, v in store.params.items():
        torch.testing.assert_close(v.detach(), before[k])


def test_checkpoint_rejects_other_layouts(tmp_path: Path) -> None:
    small = ParamStore.from_params(LinearParams(t([[1.0]]), t([0.0])))
    big = ParamStore.from_params(LinearParams(t([[1.0, 2.0]]), t([0.0])))
    path = small.save(tmp_path / "small.bin")
    with pytest.raises(ShapeError):
        big.load(path)
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b'{"format": "other"}\n')
    with pytest.raises(CsaiError):
        small.load(bad)


def test_snapshot_and_restore() -> None:
    p = LinearParams(t([[1.0]]), t([2.0]))
    store = ParamStore.from_params(p)
    snap = store.snapshot()
    with torch.no_grad():
        p.weight.mul_(5.0)
    store.restore(snap)
    assert p.weight.item() == 1.0
    assert store.size() == 2
    assert store.norms() == {"weight": 1.0, "bias": 2.0}


def test_relative_error_floor() -> None:
    assert relative_error(0.0, 0.0) == 0.0
    assert relative_error(1.0, 3.0) == 0.5


def quadratic_setup():
    gen = make_generator(4)
    p = LinearParams.init(gen, 3, 2)
    store = ParamStore.from_params(p)
    coeff = torch.arange(1.0, 7.0, dtype=DTYPE).reshape(2, 3)

    def loss():
        return (coeff * p.weight**2).sum() + torch.sin(p.bias).sum()

    return p, store, coeff, loss


def test_finite_differences_agree_with_autograd() -> None:
    _, store, _, loss = quadratic_setup()
    report = finite_difference_check(loss, store, n_probes=8)
    assert len(report.probes) == 8
    assert report.passed
    assert report.max_relative_error < 1e-6


def test_finite_differences_catch_wrong_gradient() -> None:
    p, store, coeff, loss = quadratic_setup()
    doubled = {
        "weight": 2.0 * (2.0 * coeff * p.weight.detach()),
        "bias": 2.0 * torch.cos(p.bias.detach()),
    }
    report = finite_difference_check(loss, store, n_probes=8, analytic=doubled)
    assert not report.passed
    assert report.max_relative_error == pytest.approx(1 / 3, rel=1e-4)


def test_finite_differences_reject_non_finite_loss() -> None:
    _, store, _, _ = quadratic_setup()
    with pytest.raises(CsaiError):
        finite_difference_check(lambda: torch.tensor(float("nan"), dtype=DTYPE), store)


def test_init_is_seeded() -> None:
    a = GruParams.init(make_generator(5), 3, 4)
    b = GruParams.init(make_generator(5), 3, 4)
    for (name, x), y in zip(named_parameters(a).items(), named_parameters(b).values()):
        assert torch.equal(x, y), name
    bound = 1 / math.sqrt(4)
    assert float(a.hidden_update.abs().max()) <= bound
    assert np.isfinite(a.input_update.weight.numpy()).all()
