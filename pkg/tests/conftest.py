import numpy as np
import pytest

from mvmseg import autodiff as ad


def numeric_grad(f, arr: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


@pytest.fixture
def f64():
    with ad.precision(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def gradcheck(build, inputs, h=1e-3):
    """Analytic vs central-difference gradients of scalar ``build(*inputs)`` (float64)."""
    with ad.Tape() as tape:
        loss = build(*inputs)
    tape.backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(lambda: float(build(*inputs).data), t.data, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


class _Switches:
    """Records ReLU sign patterns and max-pool winners while active (via monkeypatching)."""

    def __init__(self, monkeypatch):
        self.log = None
        relu, pool = ad.relu, ad.maxpool2

        def relu_rec(x):
            if self.log is not None:
                self.log.append(x.data > 0)
            return relu(x)

        def pool_rec(x):
            if self.log is not None:
                B, C, H, W = x.shape
                win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5)
                self.log.append(win.reshape(B, C, H // 2, W // 2, 4).argmax(-1))
            return pool(x)

        monkeypatch.setattr(ad, "relu", relu_rec)
        monkeypatch.setattr(ad, "maxpool2", pool_rec)

    def run(self, f):
        self.log = []
        val = float(f().data)
        pattern, self.log = self.log, None
        return val, pattern


def sampled_gradcheck(f, params, rng, monkeypatch, per_tensor=4, h=1e-3):
    """Central differences at a few entries of each parameter vs the tape gradient.

    A probe whose +h and -h evaluations disagree on any ReLU sign or pooling winner
    straddles a kink, where finite differences are meaningless; such probes are skipped.
    The error of each tensor is scaled by its largest analytic gradient entry.
    Returns (worst error, probes checked, probes skipped).
    """
    with ad.Tape() as tape:
        loss = f()
    tape.backward(loss)
    sw = _Switches(monkeypatch)
    worst, checked, skipped = 0.0, 0, 0
    for p in params:
        flat = p.data.reshape(-1)
        g = p.grad.reshape(-1)
        scale = max(float(np.max(np.abs(g))), 1e-12)
        for i in rng.choice(flat.size, size=min(per_tensor, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + h
            fp, pat_p = sw.run(f)
            flat[i] = old - h
            fm, pat_m = sw.run(f)
            flat[i] = old
            if any(not np.array_equal(a, b) for a, b in zip(pat_p, pat_m)):
                skipped += 1
                continue
            checked += 1
            worst = max(worst, abs((fp - fm) / (2 * h) - g[i]) / scale)
    return worst, checked, skipped


# acceptance verdicts, echoed at the end of the session
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
