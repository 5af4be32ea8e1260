"""Pure numpy implementations of the inner-loop kernels.

These mirror ``_ckernels.pyx`` one-for-one and are used when the compiled
extension is unavailable or ``FLATMTL_PURE_PYTHON=1`` is set.
"""
import numpy as np


def project_simplex(v):
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=np.float64)
    m = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    k = np.arange(1, m + 1)
    cond = u - (css - 1.0) / k > 0
    r = k[cond][-1]
    tau = (css[r - 1] - 1.0) / r
    return np.maximum(v - tau, 0.0)


def minnorm_2(g11, g12, g22):
    """Closed-form min-norm weight on the first of two vectors, given their Gram entries."""
    denom = g11 - 2.0 * g12 + g22
    if denom <= 0.0:
        return 0.5
    gamma = (g22 - g12) / denom
    return min(1.0, max(0.0, gamma))


FACE_EVERY = 5


def face_step(G, w):
    """Move ``w`` toward the min-norm point of the affine hull of its support.

    Solves the equality-constrained problem on the current face and steps as
    far as feasibility allows (a Wolfe-style minor cycle). This removes the
    slow zig-zag of Frank-Wolfe on ill-conditioned Gram matrices.
    """
    S = np.flatnonzero(w > 0.0)
    k = S.size
    if k < 2:
        return w
    K = np.zeros((k + 1, k + 1))
    K[:k, :k] = G[np.ix_(S, S)]
    K[:k, k] = -1.0
    K[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    z = np.linalg.lstsq(K, rhs, rcond=None)[0][:k]
    if not np.all(np.isfinite(z)):
        return w
    cur = w[S]
    dz = z - cur
    shrink = dz < 0.0
    step = 1.0
    if np.any(shrink):
        step = min(1.0, float(np.min(cur[shrink] / -dz[shrink])))
    trial = w.copy()
    trial[S] = cur + step * dz
    np.maximum(trial, 0.0, out=trial)
    total = trial.sum()
    if total <= 0.0:
        return w
    trial /= total
    if trial @ G @ trial <= w @ G @ w:
        return trial
    return w


def minnorm_fw(G, max_iter, tol):
    """Away-step Frank-Wolfe for min_w w^T G w over the simplex.

    Returns ``(w, iterations, residual, converged)``. The residual is the KKT
    gap ``max(w^T G w - min_i (Gw)_i, max_{w_i>0} (Gw)_i - w^T G w)``, measured
    against ``tol * max(diag G)`` so the iterates are invariant to rescaling G.
    Every ``FACE_EVERY`` iterations a :func:`face_step` refines the iterate.
    """
    G = np.asarray(G, dtype=np.float64)
    m = G.shape[0]
    w = np.full(m, 1.0 / m)
    scale = float(np.max(np.diag(G)))
    if scale <= 0.0:
        return w, 0, 0.0, True
    thresh = tol * scale
    residual = np.inf
    for it in range(max_iter + 1):
        Gw = G @ w
        vv = float(w @ Gw)
        t = int(np.argmin(Gw))
        fw_gap = vv - Gw[t]
        active = np.flatnonzero(w > 0.0)
        a = int(active[np.argmax(Gw[active])])
        away_gap = Gw[a] - vv
        residual = max(fw_gap, away_gap, 0.0)
        if residual <= thresh:
            return w, it, residual, True
        if it == max_iter:
            break
        if fw_gap >= away_gap or w[a] >= 1.0:
            curv = G[t, t] - 2.0 * Gw[t] + vv
            gamma = 1.0 if curv <= 0.0 else min(1.0, fw_gap / curv)
            w = (1.0 - gamma) * w
            w[t] += gamma
        else:
            gmax = w[a] / (1.0 - w[a])
            curv = vv - 2.0 * Gw[a] + G[a, a]
            gamma = gmax if curv <= 0.0 else min(gmax, away_gap / curv)
            w = (1.0 + gamma) * w
            w[a] -= gamma
            if gamma == gmax:
                w[a] = 0.0
        np.maximum(w, 0.0, out=w)
        w /= w.sum()
        if it % FACE_EVERY == FACE_EVERY - 1:
            w = face_step(G, w)
    return w, max_iter, residual, False


def _cagrad_grad(G, Gb, w, phi, tiny):
    Gw = G @ w
    ww = float(w @ Gw)
    grad = Gb.copy()
    if ww > tiny:
        grad += (phi / np.sqrt(ww)) * Gw
    return grad


def cagrad_dual(G, c, max_iter, tol):
    """Accelerated projected gradient descent on the simplex for the CAGrad dual.

    Minimizes ``F(w) = w^T G b + phi * sqrt(w^T G w)`` with ``b = 1/m`` and
    ``phi = c * sqrt(b^T G b)``. FISTA momentum with gradient-based restart;
    the step size backtracks until it is below the inverse local Lipschitz
    constant of the gradient (a gradient-difference test, which stays accurate
    where objective differences drown in rounding). Stops when the projected
    gradient step ``|w - P(w - alpha * grad F(w))|_inf`` falls below ``tol``.
    Returns ``(w, iterations, residual, converged)``.
    """
    G = np.asarray(G, dtype=np.float64)
    m = G.shape[0]
    b = np.full(m, 1.0 / m)
    Gb = G @ b
    phi = c * np.sqrt(max(float(b @ Gb), 0.0))
    scale = float(np.max(np.diag(G)))
    w = b.copy()
    if scale <= 0.0 or phi == 0.0:
        return w, 0, 0.0, True
    tiny = 1e-30 * scale
    alpha = 1.0 / (scale * m * (1.0 + c))
    w_prev = w.copy()
    t = 1.0
    residual = np.inf
    for it in range(1, max_iter + 1):
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = w + ((t - 1.0) / t_next) * (w - w_prev)
        grad_y = _cagrad_grad(G, Gb, y, phi, tiny)
        while True:
            w_new = project_simplex(y - alpha * grad_y)
            diff = w_new - y
            grad_new = _cagrad_grad(G, Gb, w_new, phi, tiny)
            if float((grad_new - grad_y) @ diff) * alpha <= float(diff @ diff) or alpha < 1e-30 / scale:
                break
            alpha *= 0.5
        if float(grad_y @ (w_new - w)) > 0.0:
            t_next = 1.0
        w_prev, w, t = w, w_new, t_next
        residual = float(np.max(np.abs(w - project_simplex(w - alpha * grad_new))))
        if residual <= tol:
            return w, it, residual, True
        alpha *= 1.2
    return w, max_iter, residual, False


def pcgrad_project(grads, orders):
    """Project each task gradient against conflicting others in the given order.

    ``grads`` is m x d, ``orders`` is m x (m-1) of task indices. Returns
    ``(projected, min_dot)`` where ``min_dot`` is the smallest post-projection
    inner product ``<v, g_j>`` over every projection performed (``inf`` if none).
    """
    grads = np.asarray(grads, dtype=np.float64)
    m = grads.shape[0]
    sq = np.einsum("ij,ij->i", grads, grads)
    out = grads.copy()
    min_dot = np.inf
    for i in range(m):
        v = out[i]
        for j in orders[i]:
            if sq[j] <= 0.0:
                continue
            dot = float(v @ grads[j])
            if dot < 0.0:
                v -= (dot / sq[j]) * grads[j]
                min_dot = min(min_dot, float(v @ grads[j]))
    return out, min_dot


def two_valley_value_grad(v, center, aw, an, sep, barrier):
    """Value and gradient of ``a(y)/2 * |x - center|^2 + V(y)`` where ``v = [x, y]``.

    ``a(y) = aw + (an - aw) (y / sep)^2`` and
    ``V(y) = barrier * (y (y - sep))^2 / (sep / 2)^4``.
    """
    x = v[:-1]
    y = float(v[-1])
    u = x - center
    uu = float(u @ u)
    t = y / sep
    a = aw + (an - aw) * t * t
    da = 2.0 * (an - aw) * y / (sep * sep)
    c = barrier / (0.5 * sep) ** 4
    p = y * (y - sep)
    grad = np.empty_like(v)
    grad[:-1] = a * u
    grad[-1] = 0.5 * da * uu + 2.0 * c * p * (2.0 * y - sep)
    return 0.5 * a * uu + c * p * p, grad
