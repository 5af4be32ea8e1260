# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner-loop kernels. Same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs, INFINITY

from ._kernels_py import FACE_EVERY, face_step

cnp.import_array()


cdef void _matvec(double[:, ::1] G, double[::1] w, double[::1] out) noexcept nogil:
    cdef Py_ssize_t m = G.shape[0], i, j
    cdef double acc
    for i in range(m):
        acc = 0.0
        for j in range(m):
            acc += G[i, j] * w[j]
        out[i] = acc


cdef double _dot(double[::1] a, double[::1] b) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return acc


cdef void _project_simplex(double[::1] v, double[::1] out, double[::1] work) noexcept:
    # work holds a descending sorted copy of v
    cdef Py_ssize_t m = v.shape[0], k, r = 1
    cdef double css = 0.0, css_r = 0.0, tau
    for k in range(m):
        css += work[k]
        if work[k] - (css - 1.0) / (k + 1) > 0:
            r = k + 1
            css_r = css
    tau = (css_r - 1.0) / r
    for k in range(m):
        out[k] = v[k] - tau if v[k] - tau > 0.0 else 0.0


def project_simplex(v):
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    out = np.empty(vv.shape[0])
    work = np.ascontiguousarray(np.sort(vv)[::-1])
    _project_simplex(vv, out, work)
    return out


def minnorm_2(double g11, double g12, double g22):
    cdef double denom = g11 - 2.0 * g12 + g22
    cdef double gamma
    if denom <= 0.0:
        return 0.5
    gamma = (g22 - g12) / denom
    return min(1.0, max(0.0, gamma))


def minnorm_fw(G, int max_iter, double tol):
    cdef double[:, ::1] Gm = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t m = Gm.shape[0], i, t, a
    w_arr = np.full(m, 1.0 / m)
    Gw_arr = np.empty(m)
    cdef double[::1] w = w_arr
    cdef double[::1] Gw = Gw_arr
    cdef double scale = -INFINITY, thresh, vv, fw_gap, away_gap, residual = INFINITY
    cdef double curv, gamma, gmax, total, best
    cdef int it
    for i in range(m):
        if Gm[i, i] > scale:
            scale = Gm[i, i]
    if scale <= 0.0:
        return w_arr, 0, 0.0, True
    thresh = tol * scale
    for it in range(max_iter + 1):
        _matvec(Gm, w, Gw)
        vv = _dot(w, Gw)
        t = 0
        for i in range(1, m):
            if Gw[i] < Gw[t]:
                t = i
        fw_gap = vv - Gw[t]
        a = -1
        best = -INFINITY
        for i in range(m):
            if w[i] > 0.0 and Gw[i] > best:
                best = Gw[i]
                a = i
        away_gap = Gw[a] - vv
        residual = max(fw_gap, max(away_gap, 0.0))
        if residual <= thresh:
            return w_arr, it, residual, True
        if it == max_iter:
            break
        if fw_gap >= away_gap or w[a] >= 1.0:
            curv = Gm[t, t] - 2.0 * Gw[t] + vv
            gamma = 1.0 if curv <= 0.0 else min(1.0, fw_gap / curv)
            for i in range(m):
                w[i] = (1.0 - gamma) * w[i]
            w[t] += gamma
        else:
            gmax = w[a] / (1.0 - w[a])
            curv = vv - 2.0 * Gw[a] + Gm[a, a]
            gamma = gmax if curv <= 0.0 else min(gmax, away_gap / curv)
            for i in range(m):
                w[i] = (1.0 + gamma) * w[i]
            w[a] -= gamma
            if gamma == gmax:
                w[a] = 0.0
        total = 0.0
        for i in range(m):
            if w[i] < 0.0:
                w[i] = 0.0
            total += w[i]
        for i in range(m):
            w[i] /= total
        if it % FACE_EVERY == FACE_EVERY - 1:
            w_arr = face_step(np.asarray(Gm), w_arr)
            w = w_arr
    return w_arr, max_iter, residual, False


cdef void _cagrad_grad(double[:, ::1] G, double[::1] Gb, double[::1] w, double[::1] Gw,
                       double[::1] out, double phi, double tiny) noexcept:
    cdef Py_ssize_t i, m = G.shape[0]
    _matvec(G, w, Gw)
    cdef double ww = _dot(w, Gw)
    for i in range(m):
        out[i] = Gb[i]
    if ww > tiny:
        for i in range(m):
            out[i] += (phi / sqrt(ww)) * Gw[i]


cdef void _project_into(double[::1] trial, double[::1] out):
    work = np.ascontiguousarray(np.sort(np.asarray(trial))[::-1])
    _project_simplex(trial, out, work)


def cagrad_dual(G, double c, int max_iter, double tol):
    cdef double[:, ::1] Gm = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t m = Gm.shape[0], i
    w_arr = np.full(m, 1.0 / m)
    cdef double[::1] w = w_arr
    cdef double[::1] w_prev = np.full(m, 1.0 / m)
    cdef double[::1] b = np.full(m, 1.0 / m)
    cdef double[::1] Gb = np.empty(m)
    cdef double[::1] Gw = np.empty(m)
    cdef double[::1] y = np.empty(m)
    cdef double[::1] grad_y = np.empty(m)
    cdef double[::1] grad_new = np.empty(m)
    cdef double[::1] trial = np.empty(m)
    cdef double[::1] w_new = np.empty(m)
    cdef double[::1] proj = np.empty(m)
    cdef double scale = -INFINITY, phi, tiny, alpha, residual = INFINITY
    cdef double t = 1.0, t_next, beta, gd, dd, diff, restart
    cdef int it
    _matvec(Gm, b, Gb)
    phi = _dot(b, Gb)
    phi = c * sqrt(phi if phi > 0.0 else 0.0)
    for i in range(m):
        if Gm[i, i] > scale:
            scale = Gm[i, i]
    if scale <= 0.0 or phi == 0.0:
        return w_arr, 0, 0.0, True
    tiny = 1e-30 * scale
    alpha = 1.0 / (scale * m * (1.0 + c))
    for it in range(1, max_iter + 1):
        t_next = 0.5 * (1.0 + sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_next
        for i in range(m):
            y[i] = w[i] + beta * (w[i] - w_prev[i])
        _cagrad_grad(Gm, Gb, y, Gw, grad_y, phi, tiny)
        while True:
            for i in range(m):
                trial[i] = y[i] - alpha * grad_y[i]
            _project_into(trial, w_new)
            _cagrad_grad(Gm, Gb, w_new, Gw, grad_new, phi, tiny)
            gd = 0.0
            dd = 0.0
            for i in range(m):
                diff = w_new[i] - y[i]
                gd += (grad_new[i] - grad_y[i]) * diff
                dd += diff * diff
            if gd * alpha <= dd or alpha < 1e-30 / scale:
                break
            alpha *= 0.5
        restart = 0.0
        for i in range(m):
            restart += grad_y[i] * (w_new[i] - w[i])
        if restart > 0.0:
            t_next = 1.0
        for i in range(m):
            w_prev[i] = w[i]
            w[i] = w_new[i]
            trial[i] = w[i] - alpha * grad_new[i]
        t = t_next
        _project_into(trial, proj)
        residual = 0.0
        for i in range(m):
            if fabs(w[i] - proj[i]) > residual:
                residual = fabs(w[i] - proj[i])
        if residual <= tol:
            return w_arr, it, residual, True
        alpha *= 1.2
    return w_arr, max_iter, residual, False


def pcgrad_project(grads, orders):
    cdef double[:, ::1] g = np.ascontiguousarray(grads, dtype=np.float64)
    cdef long long[:, ::1] order = np.ascontiguousarray(orders, dtype=np.int64).reshape(g.shape[0], -1)
    out_arr = np.array(g, copy=True)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m = g.shape[0], d = g.shape[1], i, jj, j, k
    cdef double[::1] sq = np.empty(m)
    cdef double dot, coef, min_dot = INFINITY
    for i in range(m):
        dot = 0.0
        for k in range(d):
            dot += g[i, k] * g[i, k]
        sq[i] = dot
    for i in range(m):
        for jj in range(order.shape[1]):
            j = order[i, jj]
            if sq[j] <= 0.0:
                continue
            dot = 0.0
            for k in range(d):
                dot += out[i, k] * g[j, k]
            if dot < 0.0:
                coef = dot / sq[j]
                for k in range(d):
                    out[i, k] -= coef * g[j, k]
                dot = 0.0
                for k in range(d):
                    dot += out[i, k] * g[j, k]
                if dot < min_dot:
                    min_dot = dot
    return out_arr, min_dot


def two_valley_value_grad(v, center, double aw, double an, double sep, double barrier):
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(center, dtype=np.float64)
    cdef Py_ssize_t d = vv.shape[0] - 1, k
    grad_arr = np.empty(d + 1)
    cdef double[::1] grad = grad_arr
    cdef double y = vv[d], uu = 0.0, t, a, da, c, p
    t = y / sep
    a = aw + (an - aw) * t * t
    for k in range(d):
        t = vv[k] - cv[k]
        uu += t * t
        grad[k] = a * t
    da = 2.0 * (an - aw) * y / (sep * sep)
    c = barrier / ((0.5 * sep) * (0.5 * sep) * (0.5 * sep) * (0.5 * sep))
    p = y * (y - sep)
    grad[d] = 0.5 * da * uu + 2.0 * c * p * (2.0 * y - sep)
    return 0.5 * a * uu + c * p * p, grad_arr
