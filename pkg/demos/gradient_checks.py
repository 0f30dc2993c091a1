"""Compare the closed-form regularizer gradients with central differences.

    python demos/gradient_checks.py

Prints the worst relative error for the Bhattacharyya term, the contrastive
term, and the last-layer scalar partials of an unfolded stack.
"""

import numpy as np

from advimmu import regularizers as R
from advimmu import unfolding as U
from advimmu.tensor import finite_diff_grad, relative_error


def probmap(rng, c, h, w):
    z = rng.normal(size=(c, h, w))
    e = np.exp(z - z.max(axis=0))
    return e / e.sum(axis=0)


def bd_check(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        px, py = probmap(rng, 5, 3, 3), probmap(rng, 5, 3, 3)
        fd = finite_diff_grad(lambda a: R.bd_loss(a, py), px)
        worst = max(worst, relative_error(R.bd_grad(px, py), fd))
    return worst


def con_check(rng, trials=50):
    worst = 0.0
    for _ in range(trials):
        x = rng.dirichlet(np.ones(5))
        cs = R.ContrastSet(x, rng.dirichlet(np.ones(5), 3), rng.dirichlet(np.ones(5), 4), tau=0.2)
        fd = finite_diff_grad(lambda a: R.con_loss(cs.with_anchor(a)), x)
        worst = max(worst, relative_error(R.con_grad(cs), fd))
    return worst


def unfold_check(rng, k):
    x0 = probmap(rng, 4, 6, 6)
    labels = rng.integers(0, 4, size=(6, 6))
    params = U.UnfoldParams.init(k, eta0=0.03)
    out, trace = U.unfold_forward(x0, labels, params, seed=1)
    grads = U.unfold_backward(trace, U.total_loss(out, labels)[1])
    errs = {}
    for name in ("alpha", "gamma", "eta"):
        def f(v):
            p = params.copy()
            getattr(p, name)[-1] = v[0]
            return U.total_loss(U.unfold_forward(x0, labels, p, seed=1)[0], labels)[0]

        fd = finite_diff_grad(f, np.array([getattr(params, name)[-1]]))
        errs[name] = relative_error(np.array([getattr(grads, name)[-1]]), fd)
    return errs


def main():
    rng = np.random.default_rng(0)
    print(f"Bhattacharyya gradient, worst rel. error: {bd_check(rng):.2e}")
    print(f"contrastive gradient,   worst rel. error: {con_check(rng):.2e}")
    for k in (1, 2, 5):
        errs = unfold_check(rng, k)
        print(f"K={k} last layer: " + "  ".join(f"d{n} {e:.1e}" for n, e in errs.items()))


if __name__ == "__main__":
    main()
