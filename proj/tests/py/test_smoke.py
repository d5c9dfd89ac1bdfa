"""Smoke checks for the _mrlab extension module (plain asserts, no pytest)."""

import math
import sys

import _mrlab as m


def approx(a, b, tol=1e-9):
    return abs(a - b) <= tol


def test_cost_matrix():
    D = m.cost_matrix([[1.0, 0.0]], [[1.0, 0.0], [0.0, 2.0], [-3.0, 0.0]])
    assert approx(D[0][0], 0.0)
    assert approx(D[0][1], 1.0)
    assert approx(D[0][2], 2.0)


def test_sinkhorn_against_exact():
    cost = [[0.2, 1.1, 0.7], [1.3, 0.1, 0.9]]
    r = [0.6, 0.4]
    c = [0.3, 0.4, 0.3]
    gamma, loss = m.sinkhorn(cost, r, c, lam=50.0, iters=2000)
    for i, row in enumerate(gamma):
        assert approx(sum(row), r[i], 1e-6)
    _, exact_loss = m.exact_transport(cost, r, c)
    assert loss >= exact_loss - 1e-9
    assert loss <= exact_loss + 0.05


def test_marginal_weights_mass():
    r, c = m.marginal_weights([[1.0, 0.2], [0.4, 1.0]], [[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]])
    assert approx(sum(r), 1.0, 1e-12)
    assert approx(sum(c), 1.0, 1e-12)


def test_sampling():
    eps = m.gumbel_noise(7, 64)
    assert eps == m.gumbel_noise(7, 64)
    s = [0.7, 0.3]
    shat = m.perturbed_scores(s, [0.0, 0.0])
    assert approx(shat[0], 0.7, 1e-12) and approx(shat[1], 0.3, 1e-12)
    tied = m.perturbed_scores(s, [0.0, math.log(0.7 / 0.3)])
    assert approx(tied[0], 0.5, 1e-12)
    assert m.topk_indices([0.1, 0.5, 0.05, 0.35], 2) == [1, 3]
    assert m.topk_indices([0.5, 0.5], 1) == [0]


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"ok: {test.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    sys.exit(main())
