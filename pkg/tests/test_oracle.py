import random

import numpy as np
import pytest

from dpflows.dpcore import DPConfig, per_layer_process
from dpflows.errors import ShapeError
from dpflows.oracle import (
    dp_backward_reference,
    per_sample_grads_naive,
    per_sample_norms_sq_naive,
)
from dpflows.tensor import Tensor, per_sample_grad

X_PAIR = Tensor.from_nested([[[1.0, 2.0]], [[1.0, 1.0]]])   # (B=2, T=1, P=2)
DY_PAIR = Tensor.from_nested([[[3.0]], [[10.0]]])           # (B=2, T=1, D=1)


def random_case(rng, max_extent=5):
    bsz = rng.randint(1, max_extent)
    tsz = rng.randint(1, max_extent)
    psz = rng.randint(1, max_extent)
    dsz = rng.randint(1, max_extent)
    x = Tensor((bsz, tsz, psz), [rng.uniform(-2, 2) for _ in range(bsz * tsz * psz)])
    dy = Tensor((bsz, tsz, dsz), [rng.uniform(-2, 2) for _ in range(bsz * tsz * dsz)])
    return x, dy


def test_naive_grads_worked_pair():
    grads = per_sample_grads_naive(X_PAIR, DY_PAIR)
    assert [g.array.tolist() for g in grads] == [[[3.0, 6.0]], [[10.0, 10.0]]]
    assert per_sample_norms_sq_naive(grads) == [45.0, 200.0]


def test_naive_grads_match_tensor_op():
    rng = random.Random(31)
    for _ in range(50):
        x, dy = random_case(rng)
        naive = per_sample_grads_naive(x, dy)
        for b, g in enumerate(naive):
            dy_b = Tensor(dy.shape[1:], dy.array[b].ravel())
            x_b = Tensor(x.shape[1:], x.array[b].ravel())
            fast = per_sample_grad(dy_b, x_b)
            assert np.max(np.abs(g.array - fast.array)) <= 1e-12


def test_naive_shape_checks():
    with pytest.raises(ShapeError):
        per_sample_grads_naive(Tensor((2, 3)), Tensor((2, 3, 1)))
    with pytest.raises(ShapeError):
        per_sample_grads_naive(Tensor((2, 3, 4)), Tensor((2, 2, 1)))


def test_reference_pipeline_worked_pair():
    cfg = DPConfig(clip_c=10.0, sigma=0.0)
    final, norms_sq = dp_backward_reference(X_PAIR, DY_PAIR, cfg)
    assert norms_sq == [45.0, 200.0]
    assert np.max(np.abs(final.array - np.array([[10.071067811865476,
                                                  13.071067811865476]]))) <= 1e-12


def test_reference_agrees_with_clip_sum_composition():
    rng = random.Random(77)
    for trial in range(20):
        x, dy = random_case(rng)
        cfg = DPConfig(clip_c=0.5 + rng.random(), sigma=rng.choice([0.0, 0.3]),
                       reduction=rng.choice(["sum", "mean"]),
                       seed=trial, layer_id=1, step=trial)
        ref, _ = dp_backward_reference(x, dy, cfg)
        composed = per_layer_process(per_sample_grads_naive(x, dy), cfg)
        assert np.max(np.abs(ref.data - composed.data)) <= 1e-12
