"""Shared test utilities: central finite-difference oracle and error metrics."""

import numpy as np

# one "[PASS]/[FAIL] ..." line per acceptance criterion, printed by the
# pytest_terminal_summary hook in conftest.py
ACCEPTANCE_LINES = []


def acceptance(cid, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {cid} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar f w.r.t. each float64 array in `arrays`.

    f is called as f(*arrays) and must return a python float. Arrays are
    perturbed in place one element at a time, so they must be float64 for the
    result to be meaningful.
    """
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            hi = f(*arrays)
            flat[i] = orig - h
            lo = f(*arrays)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    """Max elementwise |a-b| / max(1, |a|, |b|): relative for O(1) gradients."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def rng_for(seed):
    return np.random.default_rng(seed)
