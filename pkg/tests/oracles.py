"""Slow, obviously-correct reference implementations used as test oracles."""
import numpy as np


def naive_conv(x, w, b):
    """Six nested loops, zero padding, stride 1."""
    n, c, h, wd = x.shape
    oc, _, k, _ = w.shape
    p = (k - 1) // 2
    y = np.zeros((n, oc, h, wd))
    for i in range(n):
        for o in range(oc):
            for r in range(h):
                for s in range(wd):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(k):
                            for v in range(k):
                                rr, ss = r + u - p, s + v - p
                                if 0 <= rr < h and 0 <= ss < wd:
                                    acc += w[o, ci, u, v] * x[i, ci, rr, ss]
                    y[i, o, r, s] = acc
    return y


def brute_maxpool(x):
    n, c, h, w = x.shape
    y = np.zeros((n, c, h // 2, w // 2))
    idx = np.zeros(y.shape, dtype=int)
    for a in range(n):
        for b in range(c):
            for r in range(h // 2):
                for s in range(w // 2):
                    win = [x[a, b, 2 * r, 2 * s], x[a, b, 2 * r, 2 * s + 1], x[a, b, 2 * r + 1, 2 * s], x[a, b, 2 * r + 1, 2 * s + 1]]
                    best = 0
                    for t in range(1, 4):
                        if win[t] > win[best]:
                            best = t
                    y[a, b, r, s] = win[best]
                    idx[a, b, r, s] = best
    return y, idx


def enumerate_pairs(s0, s1, q0, q1, k):
    """Written directly from the recipe: split each range into k near-equal
    contiguous chunks (earlier chunks take the remainder), take the middle
    slice of each support chunk, and pair it with every slice of the matching
    query chunk."""
    def chunks(a, b):
        slices = list(range(a, b + 1))
        out, pos = [], 0
        base, extra = len(slices) // k, len(slices) % k
        for j in range(k):
            size = base + (1 if j < extra else 0)
            out.append(slices[pos:pos + size])
            pos += size
        return out

    pairs = []
    for sc, qc in zip(chunks(s0, s1), chunks(q0, q1)):
        centre = (sc[0] + sc[-1]) // 2
        for q in qc:
            pairs.append((centre, q))
    return pairs
