"""Shared oracles and fixtures.

The reference implementations here are deliberately naive (explicit Python
loops, no im2col, no numpy broadcasting tricks) so they share no code path
with the package.
"""
import math

import numpy as np
import pytest


def out_size_same(size, k, s):
    return -(-size // s)


def pad_before_same(size, k, s):
    out = out_size_same(size, k, s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2


def conv2d_loops(x, w, b, stride, padding):
    """Direct cross-correlation with implicit zero padding."""
    n, c, h, wd = x.shape
    o, c2, k, _ = w.shape
    assert c == c2
    if padding == "same":
        oh, ow = out_size_same(h, k, stride), out_size_same(wd, k, stride)
        top, left = pad_before_same(h, k, stride), pad_before_same(wd, k, stride)
    else:
        oh, ow = (h - k) // stride + 1, (wd - k) // stride + 1
        top = left = 0
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for oi in range(o):
            for r in range(oh):
                for col in range(ow):
                    acc = 0.0
                    for ci in range(c):
                        for i in range(k):
                            for j in range(k):
                                rr = r * stride + i - top
                                cc = col * stride + j - left
                                if 0 <= rr < h and 0 <= cc < wd:
                                    acc += float(x[ni, ci, rr, cc]) * float(w[oi, ci, i, j])
                    out[ni, oi, r, col] = acc + (0.0 if b is None else float(b[oi]))
    return out


def conv2d_transpose_loops(x, w, b, stride):
    """Scatter-accumulate: each input pixel stamps its weighted kernel.

    The placement offset is the 'same' padding of the forward convolution on
    an input of size H*stride, so the result is its exact adjoint.
    """
    n, c, h, wd = x.shape
    c2, o, k, _ = w.shape
    assert c == c2
    oh, ow = h * stride, wd * stride
    top, left = pad_before_same(oh, k, stride), pad_before_same(ow, k, stride)
    out = np.zeros((n, o, oh, ow), dtype=x.dtype)
    for ni in range(n):
        for ci in range(c):
            for r in range(h):
                for col in range(wd):
                    for oi in range(o):
                        for i in range(k):
                            for j in range(k):
                                rr = r * stride + i - top
                                cc = col * stride + j - left
                                if 0 <= rr < oh and 0 <= cc < ow:
                                    out[ni, oi, rr, cc] += float(x[ni, ci, r, col]) * float(w[ci, oi, i, j])
    if b is not None:
        for oi in range(o):
            out[:, oi] += b[oi]
    return out


def sigmoid_scalar(z):
    return 1.0 / (1.0 + math.exp(-z))


def brute_confusion(pred, gt):
    tp = fp = tn = fn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p == 1 and g == 1:
            tp += 1
        elif p == 1 and g == 0:
            fp += 1
        elif p == 0 and g == 0:
            tn += 1
        else:
            fn += 1
    return tp, fp, tn, fn


def brute_metrics(tp, fp, tn, fn):
    def ratio(a, b):
        return 1.0 if b == 0 else a / b
    return {
        "SE": ratio(tp, tp + fn),
        "SP": ratio(tn, tn + fp),
        "AC": ratio(tp + tn, tp + fp + tn + fn),
        "JI": ratio(tp, tp + fp + fn),
        "DI": ratio(2 * tp, 2 * tp + fp + fn),
    }


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria register a one-line verdict here; printed after the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE.values():
        terminalreporter.write_line(line)
