"""Independent reference implementations used to check the package's solvers.

Everything here is deliberately written the slow, obvious way and shares no
code path with the implementations under test.
"""

import numpy as np


def project_group_l1_bisection(j, tau, n_groups, iters=200):
    """Group-ball projection via bisection on the shrink threshold."""
    j = np.asarray(j, complex)
    d, p = j.shape
    g = d // n_groups
    blocks = j.reshape(g, n_groups, p)
    b = np.sqrt(np.sum(np.abs(blocks) ** 2, axis=(0, 2)))
    if tau == 0.0:
        return np.zeros_like(j)
    if b.sum() <= tau:
        return j.copy()
    lo, hi = 0.0, float(b.max())
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if np.maximum(b - mid, 0.0).sum() > tau:
            lo = mid
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    scale = np.maximum(0.0, 1.0 - theta / np.maximum(b, 1e-300))
    return (blocks * scale[None, :, None]).reshape(d, p)


def slow_projected_gradient(phi, f, tau, n_groups, project, iters=60000):
    """Fixed-small-step projected gradient for the radius-tau subproblem."""
    phi = np.asarray(phi, complex)
    f = np.asarray(f, complex)
    step = 1.0 / (np.linalg.norm(phi, 2) ** 2)
    j = np.zeros((phi.shape[1], f.shape[1]), complex)
    for _ in range(iters):
        g = phi.conj().T @ (phi @ j - f)
        j = project(j - step * g, tau, n_groups)
    return j


def ista_lasso(a, b, lam, iters=100000, tol=1e-14):
    """Iterative shrinkage (scalar soft threshold) for the penalized problem."""
    a = np.asarray(a, float)
    b = np.asarray(b, float).ravel()
    step = 1.0 / (np.linalg.norm(a, 2) ** 2)
    x = np.zeros(a.shape[1])
    for _ in range(iters):
        z = x - step * (a.T @ (a @ x - b))
        x_new = np.sign(z) * np.maximum(np.abs(z) - lam * step, 0.0)
        if np.linalg.norm(x_new - x) <= tol * max(1.0, np.linalg.norm(x)):
            x = x_new
            break
        x = x_new
    return x


def bpdn_soft_threshold(a, b, sigma, bisect_iters=60, ista_iters=60000):
    """Residual-targeted basis pursuit via bisection over the penalty weight.

    The residual norm of the penalized solution is monotone in the weight,
    so a bisection over ``lam`` drives it to ``sigma``; each inner solve is
    plain iterative soft thresholding.
    """
    a = np.asarray(a, float)
    b = np.asarray(b, float).ravel()
    lo = 0.0
    hi = float(np.max(np.abs(a.T @ b))) * 1.001
    for _ in range(bisect_iters):
        lam = 0.5 * (lo + hi)
        x = ista_lasso(a, b, lam, iters=20000, tol=1e-12)
        if np.linalg.norm(a @ x - b) > sigma:
            hi = lam
        else:
            lo = lam
    lam = 0.5 * (lo + hi)
    return ista_lasso(a, b, lam, iters=ista_iters, tol=1e-15), lam


def hertzian_dipole_magnitude(k, r):
    """Broadside |E| of an ideal dipole up to a common constant."""
    kr = k * r
    return np.abs(1.0 / kr - 1j / kr**2 - 1.0 / kr**3)


def central_difference_gradient(fun, x, h=1e-6):
    """Real/imaginary central differences of a real function of complex x."""
    x = np.asarray(x, complex)
    g = np.zeros_like(x)
    for i in range(x.size):
        for part, unit in ((0, 1.0), (1, 1j)):
            e = np.zeros_like(x)
            e[i] = unit * h
            d = (fun(x + e) - fun(x - e)) / (2 * h)
            g[i] += d if part == 0 else 1j * d
    return g
