import numpy as np
import pytest

from sdflow.model import ModelConfig, SDModel


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model():
    """n=2, n_f=1 model small enough for exhaustive finite differences."""
    cfg = ModelConfig(n=2, n_f=1, enc_hidden=(5,), flow_layers=2, cond_hidden=(4,), rnn_width=3,
                      ctx_dim=3, prior_layers=2, prior_hidden=(3,))
    return SDModel(cfg)


def params_grad_error(fn, params: dict, names=None) -> float:
    """grad_check over selected entries of a parameter dict; ``fn(P) -> scalar Tensor``."""
    from sdflow.numcore import grad_check

    names = sorted(params) if names is None else list(names)

    def wrapped(*leaves):
        P = dict(params)
        P.update(zip(names, leaves))
        return fn(P)
    return grad_check(wrapped, [params[k] for k in names])


def numerical_jacobian(fn, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of a flat vector map."""
    x = np.asarray(x, dtype=np.float64)
    f0 = fn(x)
    J = np.empty((f0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        J[:, j] = (fn(x + e) - fn(x - e)).ravel() / (2 * step)
    return J


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(criterion: int, ok: bool, detail: str) -> None:
    _ACCEPTANCE[criterion] = (ok, detail)
    print(f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} | {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
