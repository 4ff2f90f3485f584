import itertools

import numpy as np
import pytest

from regmix.measures import MixingMeasure


def integer_couplings(a, b):
    """All nonnegative integer matrices with row sums ``a`` and column sums ``b``."""
    a, b = list(a), list(b)
    k, m = len(a), len(b)

    def rows(i, cols_left):
        if i == k - 1:
            if sum(cols_left) == a[i]:
                yield [list(cols_left)]
            return
        for row in _compositions(a[i], cols_left):
            rest = [c - r for c, r in zip(cols_left, row)]
            for tail in rows(i + 1, rest):
                yield [row] + tail

    yield from (np.array(q, dtype=float) for q in rows(0, b))


def _compositions(total, caps):
    if len(caps) == 1:
        if total <= caps[0]:
            yield [total]
        return
    for v in range(min(total, caps[0]) + 1):
        for rest in _compositions(total - v, caps[1:]):
            yield [v] + rest


def brute_force_wasserstein(G, H, r=1):
    """Exact W_r for quarter-grid weights by enumerating integral couplings.

    With integer margins every vertex of the transport polytope is integral,
    so the minimum over integer couplings is the LP optimum.
    """
    a = np.rint(G.weights * 4).astype(int)
    b = np.rint(H.weights * 4).astype(int)
    C = np.linalg.norm(G.locations[:, None, :] - H.locations[None, :, :], axis=2) ** r
    best = min(float(np.sum(q * C)) for q in integer_couplings(a, b)) / 4.0
    return best ** (1.0 / r)


def random_quarter_measure(rng, k, d1=2, d2=1, allow_zero=False):
    lo = 0 if allow_zero else 1
    while True:
        parts = rng.integers(lo, 5, size=k)
        if parts.sum() == 4:
            break
    return MixingMeasure(parts / 4.0, rng.normal(size=(k, d1)), rng.normal(size=(k, d2)) if d2 else None)


def quarter_corpus(n_pairs=500, seed=12345):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_pairs):
        k, m = rng.integers(1, 5, size=2)
        allow_zero = bool(rng.random() < 0.2)
        out.append((random_quarter_measure(rng, k, allow_zero=allow_zero),
                    random_quarter_measure(rng, m, allow_zero=allow_zero)))
    return out


def central_difference(f, x, h):
    x = np.asarray(x, float)
    return (f(x + h) - f(x - h)) / (2 * h)


@pytest.fixture(scope="session")
def corpus():
    return quarter_corpus()


# ---------------------------------------------------------------------------
# acceptance-criterion report

ACCEPTANCE: dict = {}


def record_criterion(number: int, checks: list) -> None:
    """Store ``[(label, ok, detail), ...]`` for criterion ``number``."""
    ACCEPTANCE[number] = checks


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        checks = ACCEPTANCE[number]
        ok = all(c[1] for c in checks)
        tr.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}")
        for label, passed, detail in checks:
            tr.write_line(f"    [{'ok' if passed else 'FAIL'}] {label}: {detail}")
