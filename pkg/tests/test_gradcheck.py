"""The finite-difference checker itself: coverage, sensitivity, and the extra network cases.

The 13-primitive acceptance sweep runs in test_acceptance.py.
"""
import io

import numpy as np
import pytest

from fewshot_seg import gradcheck as G
from fewshot_seg import layers as L
from fewshot_seg.cli import cmd_gradcheck


def test_registry_covers_at_least_ten_primitives():
    assert len(G.REGISTRY) >= 10
    for name in ("conv5x5", "conv1x1", "prelu", "batchnorm", "maxpool_unpool", "sigmoid", "softmax",
                 "sse", "cse", "encoder_block", "decoder_block", "dice_loss", "two_arm_sse_16x16"):
        assert name in G.REGISTRY


@pytest.mark.parametrize("op", ["two_arm_cse_16x16", "two_arm_skip_16x16"])
def test_extended_network_cases(op):
    err, checked, skipped = G.gradcheck_report(op)
    assert err <= G.TOLERANCE
    # cSE pools the whole map, so many perturbations cross a kink somewhere;
    # still require that most coordinates are actually compared
    assert checked > skipped and checked > 1000


def test_relative_error_floor():
    assert G.relative_error(np.array(0.0), np.array(0.0)) == 0.0
    assert G.relative_error(np.array(1.0), np.array(1.1)) == pytest.approx(0.1 / 1.1)


def test_unknown_op():
    with pytest.raises(KeyError, match="unknown gradcheck op"):
        G.gradcheck("nope")


def test_corrupted_backward_is_detected(monkeypatch):
    real = L.prelu_backward

    def broken(x, p, g):
        gx, ga = real(x, p, g)
        return gx * 1.01, ga

    monkeypatch.setattr(L, "prelu_backward", broken)
    assert G.gradcheck("prelu") > 1e-3
    out = io.StringIO()
    assert cmd_gradcheck(ops=["sigmoid", "prelu"], stream=out) is False
    report = out.getvalue()
    assert "FAIL prelu" in report
    assert "PASS sigmoid" in report


def test_corrupted_conv_weight_gradient(monkeypatch):
    real = L.conv2d_backward

    def broken(*a, **kw):
        gx, gw, gb = real(*a, **kw)
        return gx, gw.swapaxes(-1, -2), gb  # transposed kernel gradient

    monkeypatch.setattr(L, "conv2d_backward", broken)
    assert G.gradcheck("conv5x5") > 1e-2
