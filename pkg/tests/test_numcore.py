from __future__ import annotations

import math

import numpy as np
import pytest

from dapa import numcore as nc
from dapa.errors import DegenerateInputError, DimensionError


def test_matmul_forward() -> None:
    out = nc.matmul(nc.Tensor([[1.0, 2.0]]), nc.Tensor([[3.0], [4.0]]))
    assert out.data.shape == (1, 1)
    assert out.data[0, 0] == 11.0


def test_matmul_shape_error_names_both_shapes() -> None:
    with pytest.raises(DimensionError) as exc:
        nc.matmul(nc.Tensor(np.zeros((2, 3))), nc.Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(exc.value)


def test_softmax_rows_value() -> None:
    out = nc.softmax_rows(nc.Tensor([[0.2, 0.5]]))
    assert out.data[0] == pytest.approx([0.42556, 0.57444], abs=1e-4)
    assert out.data.sum() == pytest.approx(1.0, abs=1e-12)


def test_softmax_rows_finite_on_extreme_inputs() -> None:
    x = nc.Tensor([[1e4, -1e4, 0.0], [nc.NEG_INF, 0.0, 0.0]])
    out = nc.softmax_rows(x)
    assert np.isfinite(out.data).all()
    assert out.data[1, 0] == 0.0


def test_layer_norm_value() -> None:
    out = nc.layer_norm(nc.Tensor([1.0, 3.0]), nc.Tensor([1.0, 1.0]),
                        nc.Tensor([0.0, 0.0]), eps=1e-12)
    assert out.data == pytest.approx([-1.0, 1.0], abs=1e-6)


def test_layer_norm_rejects_nonpositive_eps() -> None:
    with pytest.raises(ValueError):
        nc.layer_norm(nc.Tensor([1.0, 2.0]), nc.Tensor([1.0, 1.0]),
                      nc.Tensor([0.0, 0.0]), eps=0.0)


def test_cross_entropy_uniform_logits() -> None:
    logits = nc.Tensor(np.zeros((1, 8)))
    loss = nc.cross_entropy(logits, [3])
    assert loss.item() == pytest.approx(math.log(8.0), abs=1e-12)


def test_cross_entropy_value() -> None:
    loss = nc.cross_entropy(nc.Tensor([[1.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(0.31326168751822286, abs=1e-12)


def test_cross_entropy_ignore_id_masks_positions() -> None:
    logits = nc.Tensor([[1.0, 0.0], [5.0, -5.0]])
    full = nc.cross_entropy(logits, [0, 0])
    masked = nc.cross_entropy(logits, [0, -1], ignore_id=-1)
    assert masked.item() == pytest.approx(0.31326168751822286, abs=1e-12)
    assert masked.item() != pytest.approx(full.item(), abs=1e-6)


def test_cross_entropy_out_of_range_target() -> None:
    with pytest.raises(IndexError):
        nc.cross_entropy(nc.Tensor([[0.0, 0.0]]), [2])


def test_cross_entropy_all_ignored() -> None:
    with pytest.raises(DegenerateInputError):
        nc.cross_entropy(nc.Tensor([[0.0, 0.0]]), [-1], ignore_id=-1)


def test_concat_rows_with_empty_prefix() -> None:
    b = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = nc.concat_rows(nc.Tensor(np.zeros((0, 2))), b)
    assert np.array_equal(out.data, b.data)


def test_concat_rows_column_mismatch() -> None:
    with pytest.raises(DimensionError):
        nc.concat_rows(nc.Tensor(np.zeros((1, 2))), nc.Tensor(np.zeros((1, 3))))


def test_embedding_gather_and_index_error() -> None:
    table = nc.Tensor([[0.0, 1.0], [2.0, 3.0], [4.0, 5.0]])
    out = nc.embedding(table, [2, 0])
    assert np.array_equal(out.data, [[4.0, 5.0], [0.0, 1.0]])
    with pytest.raises(IndexError):
        nc.embedding(table, [3])


def test_split_merge_heads_roundtrip() -> None:
    x = nc.Tensor(np.arange(24.0).reshape(4, 6))
    back = nc.merge_heads(nc.split_heads(x, 3))
    assert np.array_equal(back.data, x.data)


def test_backward_requires_scalar_root() -> None:
    p = nc.Parameter(np.ones((2, 2)))
    out = nc.scale(p.value, 2.0)
    with pytest.raises(ValueError):
        nc.backward(out)


def test_backward_sum_of_squares() -> None:
    p = nc.Parameter([1.0, -2.0, 3.0])
    loss = nc.sum_all(nc.mul(p.value, p.value))
    nc.backward(loss)
    assert p.grad == pytest.approx([2.0, -4.0, 6.0], abs=1e-12)


def test_grad_accumulates_until_zero_grad() -> None:
    p = nc.Parameter([1.0, 1.0])
    for _ in range(2):
        nc.backward(nc.sum_all(nc.mul(p.value, p.value)))
    assert p.grad == pytest.approx([4.0, 4.0], abs=1e-12)
    p.zero_grad()
    assert np.array_equal(p.grad, [0.0, 0.0])


def test_frozen_parameter_gets_exactly_zero_grad() -> None:
    frozen = nc.Parameter(np.ones((2, 2)), trainable=False)
    live = nc.Parameter(np.ones((2, 2)))
    loss = nc.sum_all(nc.matmul(frozen.value, live.value))
    nc.backward(loss)
    assert np.array_equal(frozen.grad, np.zeros((2, 2)))
    assert not np.array_equal(live.grad, np.zeros((2, 2)))


def test_no_grad_builds_no_graph() -> None:
    p = nc.Parameter([1.0, 2.0])
    with nc.no_grad():
        out = nc.sum_all(nc.mul(p.value, p.value))
    assert out._parents == ()
    assert not out.requires_grad


def test_ops_are_pure_and_deterministic() -> None:
    rng = np.random.default_rng(7)
    x = nc.Tensor(rng.normal(size=(3, 5)))
    g = nc.Tensor(np.ones(5))
    b = nc.Tensor(np.zeros(5))
    a = nc.layer_norm(x, g, b)
    bb = nc.layer_norm(x, g, b)
    assert np.array_equal(a.data, bb.data)
    s1 = nc.softmax_rows(x)
    s2 = nc.softmax_rows(x)
    assert np.array_equal(s1.data, s2.data)


def test_grad_check_quadratic() -> None:
    p = nc.Parameter([0.5, -1.5, 2.0])
    err = nc.grad_check(lambda: nc.sum_all(nc.mul(p.value, p.value)), [p], eps=1e-5)
    assert err <= 1e-6


def test_grad_check_rejects_bad_eps() -> None:
    p = nc.Parameter([1.0])
    with pytest.raises(ValueError):
        nc.grad_check(lambda: nc.sum_all(p.value), [p], eps=0.0)


def _composite_loss(params: list[nc.Parameter], ids: list[int], targets: list[int]):
    w1, w2, gain, bias, table, pre = params
    x = nc.embedding(table.value, ids)
    h = nc.tanh(nc.matmul(x, w1.value))
    h = nc.layer_norm(h, gain.value, bias.value)
    h = nc.concat_rows(pre.value, h)
    h = nc.relu(nc.add(h, bias.value))
    att = nc.softmax_rows(nc.scale(nc.matmul(h, nc.transpose(h)), 0.5))
    h = nc.matmul(att, h)
    logits = nc.matmul(h, w2.value)
    return nc.cross_entropy(logits, targets)


def test_backward_matches_finite_differences_on_composites() -> None:
    # every graph op exercised together, many random parameter draws; where
    # the gradient is so small that central-difference roundoff (~1e-11 at
    # eps 1e-5) dominates the relative error, agreement is checked absolutely
    rng = np.random.default_rng(123)
    d, v = 4, 6
    eps = 1e-5
    for _ in range(100):
        params = [
            nc.Parameter(rng.normal(size=(d, d))),
            nc.Parameter(rng.normal(size=(d, v))),
            nc.Parameter(rng.normal(size=d) * 0.5 + 1.0),
            nc.Parameter(rng.normal(size=d) * 0.1),
            nc.Parameter(rng.normal(size=(v, d))),
            nc.Parameter(rng.normal(size=(2, d))),
        ]
        ids = [int(i) for i in rng.integers(0, v, size=3)]
        targets = [int(i) for i in rng.integers(0, v, size=5)]
        nc.zero_grads(params)
        nc.backward(_composite_loss(params, ids, targets))
        analytic = [p.grad.copy() for p in params]
        with nc.no_grad():
            for p, a in zip(params, analytic):
                flat = p.value.data.reshape(-1)
                a_flat = a.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + eps
                    f_plus = float(_composite_loss(params, ids, targets).data)
                    flat[i] = orig - eps
                    f_minus = float(_composite_loss(params, ids, targets).data)
                    flat[i] = orig
                    numeric = (f_plus - f_minus) / (2.0 * eps)
                    if max(abs(a_flat[i]), abs(numeric)) >= 1e-5:
                        err = abs(a_flat[i] - numeric) / max(abs(a_flat[i]), abs(numeric))
                        assert err <= 1e-5, f"relative error {err} at grad {a_flat[i]}"
                    else:
                        assert abs(a_flat[i] - numeric) <= 1e-9


def test_outputs_finite_on_finite_inputs() -> None:
    rng = np.random.default_rng(5)
    for _ in range(20):
        x = nc.Tensor(rng.normal(scale=50.0, size=(4, 8)))
        for out in (nc.softmax_rows(x), nc.tanh(x), nc.relu(x),
                    nc.layer_norm(x, nc.Tensor(np.ones(8)), nc.Tensor(np.zeros(8)))):
            assert np.isfinite(out.data).all()
