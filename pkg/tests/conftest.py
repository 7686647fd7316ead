import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from duallm.tensor import Tensor, no_grad

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def central_diff(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Plain central differences of scalar f() w.r.t. array x (perturbed in place)."""
    out = np.zeros(x.shape)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        keep = x[i]
        x[i] = keep + h
        up = f()
        x[i] = keep - h
        down = f()
        x[i] = keep
        out[i] = (up - down) / (2 * h)
    return out


def max_rel_err(a, b, floor=1e-6) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def fd_errors(build_outputs, leaves, seed=0):
    """Backprop vs central differences for sum_k <out_k, R_k>; returns {name: max rel err}."""
    from duallm import tensor as tn

    rng = np.random.default_rng(seed)
    for t in leaves.values():
        t.requires_grad = True
        t.grad = None
    outs = build_outputs()
    ws = [rng.standard_normal(o.shape) for o in outs]
    tn.backward(tn.add_scalars([tn.weighted_sum(o, w) for o, w in zip(outs, ws)]))
    analytic = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    def f():
        with no_grad():
            return float(sum(np.sum(o.data * w) for o, w in zip(build_outputs(), ws)))

    return {k: max_rel_err(analytic[k], central_diff(f, t.data)) for k, t in leaves.items()}


def t64(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, shape), dtype=np.float64)


# ---------------------------------------------------------------------------
# acceptance reporting: one line per criterion at the end of the run

_ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def acceptance():
    def record(criterion: str, ok: bool, detail: str = ""):
        _ACCEPTANCE.append((criterion, ok, detail))
        print(f"[{'PASS' if ok else 'FAIL'}] {criterion}  {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {criterion}  {detail}")
