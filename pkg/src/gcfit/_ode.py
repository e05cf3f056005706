"""Adaptive Dormand-Prince 5(4) integrator with dense output, compiled with
numba and specialised to the multitype survival system.

State is ``y = [s, S]`` where ``s_x(t)`` is the probability that a lineage
of type ``x`` at backward time ``t`` leaves at least one sampled descendant
and ``S_x(t)`` its integral from 0. With ``p = 1 - s``,

    ds/dt = (lam - mu - G_x) s - lam s^2 + sum_{x' != x} G_{x,x'} s_{x'},
    dS/dt = s,

which is the extinction-probability system rewritten without the
cancellation in ``1 - p``.
"""

import numpy as np
from numba import njit

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
_A = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0],
        [1 / 5, 0.0, 0.0, 0.0, 0.0],
        [3 / 40, 9 / 40, 0.0, 0.0, 0.0],
        [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0],
        [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0],
        [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    ]
)
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
_E = np.array(
    [-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40]
)
# Shampine's continuous extension (order 4)
_P = np.array(
    [
        [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
        [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
        [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
        [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
        [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
    ]
)

OK, STEP_FAILURE, OUT_OF_RANGE, TOO_MANY_STEPS = 0, 1, 2, 3


@njit(cache=True)
def _rhs(y, lam, mu, gx, off, out):
    n = lam.shape[0]
    for i in range(n):
        acc = (lam[i] - mu - gx[i]) * y[i] - lam[i] * y[i] * y[i]
        for j in range(n):
            acc += off[i, j] * y[j]
        out[i] = acc
        out[n + i] = y[i]


@njit(cache=True)
def _norm(err, y0, y1, rtol, atol):
    acc = 0.0
    for i in range(err.shape[0]):
        sc = atol + rtol * max(abs(y0[i]), abs(y1[i]))
        acc += (err[i] / sc) ** 2
    return np.sqrt(acc / err.shape[0])


@njit(cache=True)
def solve_survival(lam, mu, off, rho, t_end, rtol, atol, max_steps, range_tol):
    """Integrate from 0 to ``t_end``.

    Returns ``(t_old, h, y_old, Q, n_accepted, n_rejected, status)``; step
    ``k`` covers ``[t_old[k], t_old[k] + h[k]]`` and
    ``y(t_old + x h) = y_old + h * Q @ (x, x^2, x^3, x^4)``.
    """
    n = lam.shape[0]
    m = 2 * n
    gx = np.zeros(n)
    for i in range(n):
        for j in range(n):
            gx[i] += off[i, j]

    cap = 64
    t_store = np.empty(cap)
    h_store = np.empty(cap)
    y_store = np.empty((cap, m))
    q_store = np.empty((cap, m, 4))

    y = np.zeros(m)
    for i in range(n):
        y[i] = rho
    K = np.empty((7, m))
    tmp = np.empty(m)
    y_new = np.empty(m)
    err = np.empty(m)
    _rhs(y, lam, mu, gx, off, K[0])

    if t_end <= 0.0:
        return t_store[:0], h_store[:0], y_store[:0], q_store[:0], 0, 0, OK

    # initial step (Hairer & Wanner II.4); the floor keeps the heuristic
    # finite when atol is tiny
    atol0 = max(atol, 1e-12)
    s0 = 0.0
    s1 = 0.0
    for i in range(m):
        sc = atol0 + rtol * abs(y[i])
        s0 += (y[i] / sc) ** 2
        s1 += (K[0, i] / sc) ** 2
    d0 = np.sqrt(s0 / m)
    d1 = np.sqrt(s1 / m)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_end)
    for i in range(m):
        tmp[i] = y[i] + h0 * K[0, i]
    _rhs(tmp, lam, mu, gx, off, K[1])
    s2 = 0.0
    for i in range(m):
        sc = atol0 + rtol * abs(y[i])
        s2 += ((K[1, i] - K[0, i]) / sc) ** 2
    d2 = np.sqrt(s2 / m) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100 * h0, h1, t_end)

    t = 0.0
    n_acc = 0
    n_rej = 0
    status = OK
    while t < t_end:
        if n_acc + n_rej >= max_steps:
            status = TOO_MANY_STEPS
            break
        if h < 1e-14 * max(1.0, abs(t)):
            status = STEP_FAILURE
            break
        last = False
        if t + h >= t_end:
            h = t_end - t
            last = True
        for s in range(1, 6):
            for i in range(m):
                acc = y[i]
                for j in range(s):
                    acc += h * _A[s, j] * K[j, i]
                tmp[i] = acc
            _rhs(tmp, lam, mu, gx, off, K[s])
        for i in range(m):
            acc = y[i]
            for j in range(6):
                acc += h * _B[j] * K[j, i]
            y_new[i] = acc
        _rhs(y_new, lam, mu, gx, off, K[6])
        for i in range(m):
            acc = 0.0
            for j in range(7):
                acc += _E[j] * K[j, i]
            err[i] = h * acc
        en = _norm(err, y, y_new, rtol, atol)
        if en <= 1.0:
            if n_acc >= cap:
                cap *= 2
                t2 = np.empty(cap)
                h2 = np.empty(cap)
                y2 = np.empty((cap, m))
                q2 = np.empty((cap, m, 4))
                t2[:n_acc] = t_store[:n_acc]
                h2[:n_acc] = h_store[:n_acc]
                y2[:n_acc] = y_store[:n_acc]
                q2[:n_acc] = q_store[:n_acc]
                t_store, h_store, y_store, q_store = t2, h2, y2, q2
            t_store[n_acc] = t
            h_store[n_acc] = h
            for i in range(m):
                y_store[n_acc, i] = y[i]
                for c in range(4):
                    acc = 0.0
                    for j in range(7):
                        acc += K[j, i] * _P[j, c]
                    q_store[n_acc, i, c] = acc
            n_acc += 1
            bad = False
            for i in range(n):
                if y_new[i] < -range_tol or y_new[i] > 1.0 + range_tol:
                    bad = True
            if bad:
                status = OUT_OF_RANGE
                break
            t = t_end if last else t + h
            for i in range(m):
                y[i] = y_new[i]
                K[0, i] = K[6, i]
            if en == 0.0:
                fac = 10.0
            else:
                fac = min(10.0, 0.9 * en ** -0.2)
            h = h * fac
        else:
            n_rej += 1
            h = h * max(0.2, 0.9 * en ** -0.2)
    return (
        t_store[:n_acc],
        h_store[:n_acc],
        y_store[:n_acc],
        q_store[:n_acc],
        n_acc,
        n_rej,
        status,
    )
