"""Numpy fallback for the subset-enumeration kernel (same results as the compiled one)."""

from __future__ import annotations

import numpy as np

BLOCK = 1 << 15


def enumerate_best(costs, need_in, in_req, need_out, out_req, budget, pos_mask, min_pos):
    """Best feasible edge subset by exhaustive enumeration over bitmasks.

    A subset is feasible when it has at most ``budget`` edges, at least
    ``min_pos`` of them inside ``pos_mask``, and every selected edge ``e``
    with ``need_in[e]`` (``need_out[e]``) shares a bit with ``in_req[e]``
    (``out_req[e]``). Objectives are summed in ascending edge order; the
    lowest mask wins ties. Returns (mask, objective).
    """
    costs = np.asarray(costs, dtype=np.float64)
    E = len(costs)
    in_req = np.asarray(in_req, dtype=np.int64)
    out_req = np.asarray(out_req, dtype=np.int64)
    best_mask, best_obj = -1, -np.inf
    shifts = np.arange(E, dtype=np.int64)
    for start in range(0, 1 << E, BLOCK):
        masks = np.arange(start, min(start + BLOCK, 1 << E), dtype=np.int64)
        bits = (masks[:, None] >> shifts[None, :]) & 1
        ok = bits.sum(axis=1) <= budget
        if min_pos > 0:
            pos_bits = (masks[:, None] & pos_mask) >> shifts[None, :] & 1
            ok &= pos_bits.sum(axis=1) >= min_pos
        for e in range(E):
            sel = bits[:, e] == 1
            if need_in[e]:
                ok &= ~sel | ((masks & in_req[e]) != 0)
            if need_out[e]:
                ok &= ~sel | ((masks & out_req[e]) != 0)
        obj = np.zeros(len(masks))
        for e in range(E):
            obj = obj + bits[:, e] * costs[e]
        obj = np.where(ok, obj, -np.inf)
        i = int(np.argmax(obj))
        if obj[i] > best_obj:
            best_obj, best_mask = float(obj[i]), int(masks[i])
    return best_mask, best_obj
