"""Reference implementations the tests compare against.

Nothing here touches the tape: gradients come from central finite
differences and losses from explicit per-row loops.
"""

import math

import numpy as np

from hiertask.autodiff import Tape


def finite_difference(loss_fn, leaves, eps=1e-6):
    """Central differences of ``loss_fn()`` (a float) w.r.t. every element of each leaf."""
    grads = []
    for leaf in leaves:
        g = np.zeros(leaf.shape)
        flat = leaf.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * eps)
        grads.append(g)
    return grads


def relative_error(analytic, numeric):
    """``||a - n|| / max(||a||, ||n||)`` per tensor.

    Structurally zero gradients (the attention key bias, by softmax shift
    invariance) leave only round-off on both sides; below 1e-7 they count as equal.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale < 1e-7:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradient_errors(build_loss, leaves, eps=1e-6):
    """Relative error of the tape gradient vs finite differences, one entry per leaf.

    ``build_loss`` must be a pure function of the leaves' current data.
    """
    for leaf in leaves:
        leaf.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros(leaf.shape) for leaf in leaves]
    numeric = finite_difference(lambda: build_loss().item(), leaves, eps)
    return [relative_error(a, n) for a, n in zip(analytic, numeric)]


def cross_entropy_reference(logits, labels):
    total = []
    for row, y in zip(np.asarray(logits), labels):
        m = max(row)
        lse = m + math.log(math.fsum(math.exp(v - m) for v in row))
        total.append(lse - row[y])
    return math.fsum(total) / len(total)


def argmax_lowest(row):
    best = 0
    for j in range(1, len(row)):
        if row[j] > row[best]:
            best = j
    return best


def topk_by_sort(row, k):
    """Indices of the k largest entries; ties resolved towards lower indices."""
    order = sorted(range(len(row)), key=lambda j: (-row[j], j))
    return set(order[:k])
