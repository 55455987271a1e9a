"""Shared test utilities: finite-difference gradient oracle and tiny builders.

The gradient oracle never touches the reverse pass; it re-evaluates the
forward function under central-difference perturbations, so autodiff
results are checked against an independent numerical route.
"""

from __future__ import annotations

import numpy as np

from trirender import tensor as T


def numeric_grad(f, arrays, wrt: int, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[wrt]."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    base = arrays[wrt]
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(*arrays))
        flat[i] = orig - eps
        lo = float(f(*arrays))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * eps)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Scale-aware worst-case relative error between two gradient arrays."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(build, arrays, tol: float = 1e-4, eps: float = 1e-6) -> None:
    """Assert autodiff gradients match finite differences for every input.

    ``build(*tensors) -> Tensor`` must produce a scalar through tensor ops.
    Runs at float64.
    """
    with T.default_dtype(np.float64):
        tensors = [T.Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
        out = build(*tensors)
        out.backward()

        def feval(*arrs):
            ts = [T.Tensor(a, dtype=np.float64) for a in arrs]
            return build(*ts).item()

        for i, t in enumerate(tensors):
            num = numeric_grad(feval, arrays, i, eps=eps)
            got = t.grad if t.grad is not None else np.zeros_like(num)
            err = rel_error(got, num)
            assert err < tol, f"gradient mismatch on input {i}: rel error {err:.3e}"


def rng(seed: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed))
