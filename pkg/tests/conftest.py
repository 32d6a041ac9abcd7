from __future__ import annotations

import math
import threading
from pathlib import Path

import numpy as np
import pytest

from tractprior.connectome import Parcellation
from tractprior.gateway import ChatResponse, Usage

FIXTURES = Path(__file__).parent / "fixtures" / "pipeline"


def toy_parcellation(n: int = 4, id: str = "toy") -> Parcellation:
    return Parcellation.from_names(id, [(f"R{i}", "Left") for i in range(n)])


def random_symmetric(rng: np.random.Generator, n: int, density: float = 0.4, binary: bool = False) -> np.ndarray:
    a = np.triu(rng.random((n, n)) < density, 1).astype(float)
    if not binary:
        a *= rng.random((n, n)) * 10
    return a + a.T


class ScriptedBackend:
    """Returns canned replies in order, or computes them from the request with ``fn``."""

    id = "scripted"

    def __init__(self, replies=None, fn=None):
        self.replies = list(replies or [])
        self.fn = fn
        self.requests = []
        self._lock = threading.Lock()

    def send(self, request):
        with self._lock:
            self.requests.append(request)
            if self.fn is not None:
                out = self.fn(request)
            else:
                out = self.replies.pop(0)
        if isinstance(out, Exception):
            raise out
        return out

    @property
    def calls(self) -> int:
        return len(self.requests)


def verdict_reply(word: str, p: float | None = 0.9) -> ChatResponse:
    lps = None if p is None else (("Answer", -0.2), (":", -0.01), (f" {word}", math.log(p)))
    return ChatResponse(f"Answer: {word}", lps, "scripted", 0.0, Usage(10, 2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def connected_graph(rng: np.random.Generator, n: int, density: float) -> np.ndarray:
    """Random binary graph with a spanning path so every node is reachable."""
    a = random_symmetric(rng, n, density, binary=True)
    order = rng.permutation(n)
    a[order[:-1], order[1:]] = a[order[1:], order[:-1]] = 1.0
    return a


def planted_experiment(n: int = 68, n_planted: int = 12, density: float = 0.08, t0: float = 1.5, seed: int = 2024):
    """Ground-truth graph G generates the target; the base misses ``n_planted`` of G's edges and the prior restores them.

    Returns (base connectome, filter outcome, target, seed region name).
    """
    from tractprior.connectome import Connectome, ConnectomeKind
    from tractprior.filtering import augment_filter
    from tractprior.ndm import RegionalVector, laplacian, simulate

    rng = np.random.default_rng(seed)
    parc = toy_parcellation(n, "planted")
    g = connected_graph(rng, n, density)
    x0 = np.zeros(n)
    x0[0] = 1.0
    target = 4.0 * simulate(laplacian(g), x0, t0)
    iu, ju = np.nonzero(np.triu(g, 1))
    drop = rng.choice(len(iu), n_planted, replace=False)
    base = g.copy()
    base[iu[drop], ju[drop]] = base[ju[drop], iu[drop]] = 0.0
    prior = np.zeros((n, n))
    prior[iu[drop], ju[drop]] = prior[ju[drop], iu[drop]] = 0.9
    base_c = Connectome(parc, base, ConnectomeKind.BINARY)
    outcome = augment_filter(base_c, prior, 0.5)
    return base_c, outcome, RegionalVector(parc, target, np.ones(n, bool)), parc.regions[0].name


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n:>2}: {detail}")
