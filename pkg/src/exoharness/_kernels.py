"""Compiled rigid-body kernels operating on array-encoded kinematic trees.

All spatial quantities here are expressed in world coordinates about the
world origin, using the ``[angular; linear]`` ordering of
:mod:`exoharness.spatial_algebra`. Joint ``i`` moves body ``i``; ``parent[i] == -1``
means the body hangs from the fixed base.

Tree arrays (``TreeArrays`` in :mod:`exoharness.model`)::

    parent (n,) int64      jtype (n,) int64 (0 revolute, 1 prismatic)
    axis (n, 3)            xrot (n, 3, 3), xpos (n, 3)  joint frame in parent
    mass (n,)              com (n, 3), icom (n, 3, 3)   body-frame inertia
    base_R (3, 3)          base_p (3,)                  base pose in world
"""

import math

import numpy as np
from numba import njit

REVOLUTE = 0
PRISMATIC = 1

SEMI_IMPLICIT = 0
RK4 = 1

POLICY_ZERO = 0
POLICY_GRAVITY = 1


@njit(cache=True)
def _mat3(A, B, out):
    for r in range(3):
        for c in range(3):
            out[r, c] = A[r, 0] * B[0, c] + A[r, 1] * B[1, c] + A[r, 2] * B[2, c]


@njit(cache=True)
def _matT3(A, B, out):
    # out = A.T @ B
    for r in range(3):
        for c in range(3):
            out[r, c] = A[0, r] * B[0, c] + A[1, r] * B[1, c] + A[2, r] * B[2, c]


@njit(cache=True)
def _mv3(A, v, out):
    for r in range(3):
        out[r] = A[r, 0] * v[0] + A[r, 1] * v[1] + A[r, 2] * v[2]


@njit(cache=True)
def _mtv3(A, v, out):
    for r in range(3):
        out[r] = A[0, r] * v[0] + A[1, r] * v[1] + A[2, r] * v[2]


@njit(cache=True)
def _cross(a, b, out):
    x = a[1] * b[2] - a[2] * b[1]
    y = a[2] * b[0] - a[0] * b[2]
    z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z


@njit(cache=True)
def rodrigues(axis, angle, out):
    x, y, z = axis[0], axis[1], axis[2]
    s = math.sin(angle)
    c = 1.0 - math.cos(angle)
    out[0, 0] = 1.0 - c * (y * y + z * z)
    out[0, 1] = -s * z + c * x * y
    out[0, 2] = s * y + c * x * z
    out[1, 0] = s * z + c * x * y
    out[1, 1] = 1.0 - c * (x * x + z * z)
    out[1, 2] = -s * x + c * y * z
    out[2, 0] = -s * y + c * x * z
    out[2, 1] = s * x + c * y * z
    out[2, 2] = 1.0 - c * (x * x + y * y)


@njit(cache=True)
def rotvec_log(R, out):
    """Rotation vector of ``R``; returns True when the angle is exactly pi."""
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0.0:
        S = math.sqrt(tr + 1.0) * 2.0
        w = 0.25 * S
        x = (R[2, 1] - R[1, 2]) / S
        y = (R[0, 2] - R[2, 0]) / S
        z = (R[1, 0] - R[0, 1]) / S
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        S = math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2.0
        w = (R[2, 1] - R[1, 2]) / S
        x = 0.25 * S
        y = (R[0, 1] + R[1, 0]) / S
        z = (R[0, 2] + R[2, 0]) / S
    elif R[1, 1] > R[2, 2]:
        S = math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2.0
        w = (R[0, 2] - R[2, 0]) / S
        x = (R[0, 1] + R[1, 0]) / S
        y = 0.25 * S
        z = (R[1, 2] + R[2, 1]) / S
    else:
        S = math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2.0
        w = (R[1, 0] - R[0, 1]) / S
        x = (R[0, 2] + R[2, 0]) / S
        y = (R[1, 2] + R[2, 1]) / S
        z = 0.25 * S
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    at_pi = False
    if s < 1e-12:
        f = 2.0 / w
    else:
        f = 2.0 * math.atan2(s, w) / s
        if w == 0.0:
            at_pi = True
            # deterministic axis sign: largest component positive
            k = 0
            if abs(y) > abs(x):
                k = 1
            if abs(z) > abs(x) and abs(z) > abs(y):
                k = 2
            comp = x if k == 0 else (y if k == 1 else z)
            if comp < 0.0:
                x, y, z = -x, -y, -z
    out[0] = f * x
    out[1] = f * y
    out[2] = f * z
    return at_pi


@njit(cache=True)
def forward_kinematics(parent, jtype, axis, xrot, xpos, base_R, base_p, q, qd, R, p, S, V):
    """World poses ``R, p``, motion subspaces ``S`` and spatial velocities ``V``."""
    n = q.shape[0]
    Ra = np.empty((3, 3))
    Rj = np.empty((3, 3))
    a = np.empty(3)
    tmp = np.empty(3)
    for i in range(n):
        pa = parent[i]
        if pa < 0:
            Rp = base_R
            pp = base_p
        else:
            Rp = R[pa]
            pp = p[pa]
        _mat3(Rp, xrot[i], Ra)
        _mv3(Ra, axis[i], a)
        _mv3(Rp, xpos[i], tmp)
        if jtype[i] == REVOLUTE:
            rodrigues(axis[i], q[i], Rj)
            _mat3(Ra, Rj, R[i])
            for k in range(3):
                p[i, k] = pp[k] + tmp[k]
            S[i, 0] = a[0]
            S[i, 1] = a[1]
            S[i, 2] = a[2]
            _cross(p[i], a, tmp)
            S[i, 3] = tmp[0]
            S[i, 4] = tmp[1]
            S[i, 5] = tmp[2]
        else:
            for r in range(3):
                for c in range(3):
                    R[i, r, c] = Ra[r, c]
            for k in range(3):
                p[i, k] = pp[k] + tmp[k] + a[k] * q[i]
            S[i, 0] = 0.0
            S[i, 1] = 0.0
            S[i, 2] = 0.0
            S[i, 3] = a[0]
            S[i, 4] = a[1]
            S[i, 5] = a[2]
        for k in range(6):
            if pa < 0:
                V[i, k] = S[i, k] * qd[i]
            else:
                V[i, k] = V[pa, k] + S[i, k] * qd[i]


@njit(cache=True)
def world_inertias(mass, com, icom, R, p, I6):
    """6x6 spatial inertia of every body about the world origin."""
    n = mass.shape[0]
    Iw = np.empty((3, 3))
    T = np.empty((3, 3))
    c = np.empty(3)
    for i in range(n):
        m = mass[i]
        _mv3(R[i], com[i], c)
        for k in range(3):
            c[k] += p[i, k]
        _mat3(R[i], icom[i], T)
        for r in range(3):
            for s in range(3):
                Iw[r, s] = T[r, 0] * R[i, s, 0] + T[r, 1] * R[i, s, 1] + T[r, 2] * R[i, s, 2]
        cc = c[0] * c[0] + c[1] * c[1] + c[2] * c[2]
        # Iw + m*skew(c)@skew(c).T = Iw + m*(|c|^2 I - c c^T)
        for r in range(3):
            for s in range(3):
                val = Iw[r, s] - m * c[r] * c[s]
                if r == s:
                    val += m * cc
                I6[i, r, s] = val
                I6[i, 3 + r, 3 + s] = m if r == s else 0.0
        # upper-right m*skew(c), lower-left its transpose
        I6[i, 0, 3] = 0.0
        I6[i, 0, 4] = -m * c[2]
        I6[i, 0, 5] = m * c[1]
        I6[i, 1, 3] = m * c[2]
        I6[i, 1, 4] = 0.0
        I6[i, 1, 5] = -m * c[0]
        I6[i, 2, 3] = -m * c[1]
        I6[i, 2, 4] = m * c[0]
        I6[i, 2, 5] = 0.0
        for r in range(3):
            for s in range(3):
                I6[i, 3 + r, s] = I6[i, s, 3 + r]


@njit(cache=True)
def _crm_mul(v, m, out):
    # out = crm(v) @ m
    w0, w1, w2 = v[0], v[1], v[2]
    l0, l1, l2 = v[3], v[4], v[5]
    a0, a1, a2 = m[0], m[1], m[2]
    b0, b1, b2 = m[3], m[4], m[5]
    out[0] = w1 * a2 - w2 * a1
    out[1] = w2 * a0 - w0 * a2
    out[2] = w0 * a1 - w1 * a0
    out[3] = l1 * a2 - l2 * a1 + w1 * b2 - w2 * b1
    out[4] = l2 * a0 - l0 * a2 + w2 * b0 - w0 * b2
    out[5] = l0 * a1 - l1 * a0 + w0 * b1 - w1 * b0


@njit(cache=True)
def _crf_mul(v, f, out):
    # out = crf(v) @ f
    w0, w1, w2 = v[0], v[1], v[2]
    l0, l1, l2 = v[3], v[4], v[5]
    t0, t1, t2 = f[0], f[1], f[2]
    f0, f1, f2 = f[3], f[4], f[5]
    out[0] = w1 * t2 - w2 * t1 + l1 * f2 - l2 * f1
    out[1] = w2 * t0 - w0 * t2 + l2 * f0 - l0 * f2
    out[2] = w0 * t1 - w1 * t0 + l0 * f1 - l1 * f0
    out[3] = w1 * f2 - w2 * f1
    out[4] = w2 * f0 - w0 * f2
    out[5] = w0 * f1 - w1 * f0


@njit(cache=True)
def rnea(parent, S, V, I6, qd, qdd, gravity, tau):
    """Recursive Newton-Euler; ``tau`` receives B(q) qdd + C qd + g."""
    n = qd.shape[0]
    A = np.empty((n, 6))
    F = np.empty((n, 6))
    tmp = np.empty(6)
    Iv = np.empty(6)
    for i in range(n):
        pa = parent[i]
        _crm_mul(V[i], S[i], tmp)
        for k in range(6):
            if pa < 0:
                base = 0.0 if k < 3 else -gravity[k - 3]
            else:
                base = A[pa, k]
            A[i, k] = base + S[i, k] * qdd[i] + tmp[k] * qd[i]
        for r in range(6):
            acc_a = 0.0
            acc_v = 0.0
            for c in range(6):
                acc_a += I6[i, r, c] * A[i, c]
                acc_v += I6[i, r, c] * V[i, c]
            F[i, r] = acc_a
            Iv[r] = acc_v
        _crf_mul(V[i], Iv, tmp)
        for k in range(6):
            F[i, k] += tmp[k]
    for i in range(n - 1, -1, -1):
        acc = 0.0
        for k in range(6):
            acc += S[i, k] * F[i, k]
        tau[i] = acc
        pa = parent[i]
        if pa >= 0:
            for k in range(6):
                F[pa, k] += F[i, k]


@njit(cache=True)
def crba(parent, S, I6, H):
    """Composite-rigid-body joint-space inertia matrix."""
    n = S.shape[0]
    H[:, :] = 0.0
    Ic = I6.copy()
    for i in range(n - 1, -1, -1):
        pa = parent[i]
        if pa >= 0:
            for r in range(6):
                for c in range(6):
                    Ic[pa, r, c] += Ic[i, r, c]
    Fv = np.empty(6)
    for i in range(n):
        for r in range(6):
            acc = 0.0
            for c in range(6):
                acc += Ic[i, r, c] * S[i, c]
            Fv[r] = acc
        acc = 0.0
        for k in range(6):
            acc += S[i, k] * Fv[k]
        H[i, i] = acc
        j = parent[i]
        while j >= 0:
            acc = 0.0
            for k in range(6):
                acc += S[j, k] * Fv[k]
            H[i, j] = acc
            H[j, i] = acc
            j = parent[j]


@njit(cache=True)
def point_jacobian(parent, S, body, point_world, J):
    """World-frame 6xn Jacobian of a point rigidly attached to ``body``."""
    J[:, :] = 0.0
    j = body
    while j >= 0:
        J[0, j] = S[j, 0]
        J[1, j] = S[j, 1]
        J[2, j] = S[j, 2]
        w0, w1, w2 = S[j, 0], S[j, 1], S[j, 2]
        J[3, j] = S[j, 3] + w1 * point_world[2] - w2 * point_world[1]
        J[4, j] = S[j, 4] + w2 * point_world[0] - w0 * point_world[2]
        J[5, j] = S[j, 5] + w0 * point_world[1] - w1 * point_world[0]
        j = parent[j]


@njit(cache=True)
def kinetic_energy(V, I6):
    n = V.shape[0]
    ke = 0.0
    for i in range(n):
        for r in range(6):
            acc = 0.0
            for c in range(6):
                acc += I6[i, r, c] * V[i, c]
            ke += 0.5 * V[i, r] * acc
    return ke


@njit(cache=True)
def cholesky_solve(A, b, x):
    """Solve SPD ``A x = b`` in place; returns the failing pivot index or -1."""
    n = A.shape[0]
    L = np.zeros((n, n))
    for j in range(n):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return j
        d = math.sqrt(s)
        L[j, j] = d
        for i in range(j + 1, n):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
    y = np.empty(n)
    for i in range(n):
        s = b[i]
        for k in range(i):
            s -= L[i, k] * y[k]
        y[i] = s / L[i, i]
    for i in range(n - 1, -1, -1):
        s = y[i]
        for k in range(i + 1, n):
            s -= L[k, i] * x[k]
        x[i] = s / L[i, i]
    return -1


@njit(cache=True)
def batch_fk(parent, jtype, axis, xrot, xpos, base_R, base_p, qs, qds, R, p, V):
    """Forward kinematics over a batch of states; S is recomputed per sample."""
    T, n = qs.shape
    S = np.empty((n, 6))
    for t in range(T):
        forward_kinematics(parent, jtype, axis, xrot, xpos, base_R, base_p, qs[t], qds[t], R[t], p[t], S, V[t])


@njit(cache=True)
def _interfaces(
    parent, S, R, p, V, base_R, base_p,
    iface_body, iface_point, K, D,
    hR, hp, hw, hv,
    Q, Keff, Deff, wrench, dist, pi_flags, with_stiffness,
):
    """Interaction wrenches, generalized forces and their linearization."""
    m = iface_body.shape[0]
    n = Q.shape[0]
    Re = np.empty((3, 3))
    Rrel = np.empty((3, 3))
    pe = np.empty(3)
    we = np.empty(3)
    ve = np.empty(3)
    tmp = np.empty(3)
    loc = np.empty(3)
    theta = np.empty(3)
    cols = np.empty(n, dtype=np.int64)
    Jl = np.empty((6, n))
    for f in range(m):
        b = iface_body[f]
        if b < 0:
            for r in range(3):
                for c in range(3):
                    Re[r, c] = base_R[r, c]
            _mv3(base_R, iface_point[f], pe)
            for k in range(3):
                pe[k] += base_p[k]
                we[k] = 0.0
                ve[k] = 0.0
        else:
            for r in range(3):
                for c in range(3):
                    Re[r, c] = R[b, r, c]
            _mv3(R[b], iface_point[f], pe)
            for k in range(3):
                pe[k] += p[b, k]
                we[k] = V[b, k]
            _cross(we, pe, tmp)
            for k in range(3):
                ve[k] = V[b, 3 + k] + tmp[k]
        # mismatches in the exoskeleton attachment frame
        _matT3(Re, hR[f], Rrel)
        pi_flags[f] = rotvec_log(Rrel, theta)
        for k in range(3):
            tmp[k] = hp[f, k] - pe[k]
        _mtv3(Re, tmp, loc)
        for k in range(3):
            dist[f, k] = abs(loc[k])
            wrench[f, 3 + k] = K[f, 3 + k] * loc[k]
            wrench[f, k] = K[f, k] * theta[k]
        for k in range(3):
            tmp[k] = hw[f, k] - we[k]
        _mtv3(Re, tmp, loc)
        for k in range(3):
            wrench[f, k] += D[f, k] * loc[k]
        for k in range(3):
            tmp[k] = hv[f, k] - ve[k]
        _mtv3(Re, tmp, loc)
        for k in range(3):
            wrench[f, 3 + k] += D[f, 3 + k] * loc[k]
        # local Jacobian restricted to ancestor columns
        nc = 0
        j = b
        while j >= 0:
            cols[nc] = j
            w0, w1, w2 = S[j, 0], S[j, 1], S[j, 2]
            l0 = S[j, 3] + w1 * pe[2] - w2 * pe[1]
            l1 = S[j, 4] + w2 * pe[0] - w0 * pe[2]
            l2 = S[j, 5] + w0 * pe[1] - w1 * pe[0]
            for r in range(3):
                Jl[r, nc] = Re[0, r] * w0 + Re[1, r] * w1 + Re[2, r] * w2
                Jl[3 + r, nc] = Re[0, r] * l0 + Re[1, r] * l1 + Re[2, r] * l2
            nc += 1
            j = parent[j]
        for a in range(nc):
            acc = 0.0
            for r in range(6):
                acc += Jl[r, a] * wrench[f, r]
            Q[cols[a]] += acc
        if with_stiffness:
            for a in range(nc):
                for c in range(a, nc):
                    ks = 0.0
                    ds = 0.0
                    for r in range(6):
                        prod = Jl[r, a] * Jl[r, c]
                        ks += K[f, r] * prod
                        ds += D[f, r] * prod
                    Keff[cols[a], cols[c]] += ks
                    Deff[cols[a], cols[c]] += ds
                    if c != a:
                        Keff[cols[c], cols[a]] += ks
                        Deff[cols[c], cols[a]] += ds


@njit(cache=True)
def _all_finite(x):
    for v in x:
        if not math.isfinite(v) or abs(v) > 1e8:
            return False
    return True


@njit(cache=True)
def _episode_forces(
    parent, jtype, axis, xrot, xpos, mass, com, icom, base_R, base_p, gravity,
    iface_body, iface_point, K, D, hR, hp, hw, hv,
    klock, dlock, q0, act_mask, policy, q, qd, with_stiffness,
    R, p, S, V, V0, I6, H, Keff, Deff, Q, bias, grav, zeros, wr, ds, pif,
):
    """Fill ``Q`` with every non-inertial generalized force and ``H`` with B(q)."""
    n = q.shape[0]
    forward_kinematics(parent, jtype, axis, xrot, xpos, base_R, base_p, q, qd, R, p, S, V)
    world_inertias(mass, com, icom, R, p, I6)
    rnea(parent, S, V, I6, qd, zeros, gravity, bias)
    if policy == POLICY_GRAVITY:
        rnea(parent, S, V0, I6, zeros, zeros, gravity, grav)
    else:
        grav[:] = 0.0
    Q[:] = 0.0
    if with_stiffness:
        Keff[:, :] = 0.0
        Deff[:, :] = 0.0
    _interfaces(
        parent, S, R, p, V, base_R, base_p, iface_body, iface_point, K, D,
        hR, hp, hw, hv, Q, Keff, Deff, wr, ds, pif, with_stiffness,
    )
    for i in range(n):
        if not (policy == POLICY_GRAVITY and act_mask[i]):
            grav[i] = 0.0
        Q[i] += grav[i] - klock[i] * (q[i] - q0[i]) - dlock[i] * qd[i] - bias[i]
        if with_stiffness:
            Keff[i, i] += klock[i]
            Deff[i, i] += dlock[i]
    crba(parent, S, I6, H)


@njit(cache=True)
def _solve_free(H, Q, presc_mask, free, nf, qdd_p, Af, bf, xf, out):
    n = Q.shape[0]
    for a in range(nf):
        i = free[a]
        acc = Q[i]
        for j in range(n):
            if presc_mask[j]:
                acc -= H[i, j] * qdd_p[j]
        bf[a] = acc
        for c in range(nf):
            Af[a, c] = H[i, free[c]]
    fail = cholesky_solve(Af, bf, xf)
    for i in range(n):
        out[i] = qdd_p[i]
    for a in range(nf):
        out[free[a]] = xf[a]
    return fail


@njit(cache=True)
def run_episode(
    parent, jtype, axis, xrot, xpos, mass, com, icom, base_R, base_p, gravity,
    iface_body, iface_point, K, D,
    hR, hp, hw, hv,
    klock, dlock, q0, act_mask, policy,
    presc_mask, presc_q, presc_qd,
    q_init, qd_init, dt, n_steps, scheme,
    q_hist, qd_hist, wrench_hist, dist_hist, tau_hist, pi_hist,
):
    """Integrate one coupled episode; returns the number of recorded samples.

    Human interface states ``hR, hp, hw, hv`` and prescribed trajectories are
    sampled on a half-step grid (index ``2k`` is ``t_k``). Histories hold
    ``n_steps + 1`` samples unless the state diverges, in which case the
    returned count marks the truncation.
    """
    n = q_init.shape[0]
    m = iface_body.shape[0]
    R = np.empty((n, 3, 3))
    p = np.empty((n, 3))
    S = np.empty((n, 6))
    V = np.empty((n, 6))
    V0 = np.zeros((n, 6))
    I6 = np.empty((n, 6, 6))
    H = np.empty((n, n))
    Keff = np.empty((n, n))
    Deff = np.empty((n, n))
    Q = np.empty(n)
    bias = np.empty(n)
    grav = np.empty(n)
    zeros = np.zeros(n)
    wr = np.empty((m, 6))
    ds = np.empty((m, 3))
    pif = np.zeros(m, dtype=np.bool_)

    free = np.empty(n, dtype=np.int64)
    nf = 0
    for i in range(n):
        if not presc_mask[i]:
            free[nf] = i
            nf += 1
    Af = np.empty((nf, nf))
    bf = np.empty(nf)
    xf = np.empty(nf)

    q = q_init.copy()
    qd = qd_init.copy()
    for i in range(n):
        if presc_mask[i]:
            q[i] = presc_q[0, i]
            qd[i] = presc_qd[0, i]

    qdd_p = np.zeros(n)
    kq = np.empty((4, n))
    kv = np.empty((4, n))
    qs = np.empty(n)
    vs = np.empty(n)
    n_half = presc_q.shape[0]
    h = dt

    for k in range(n_steps):
        s = 2 * k
        if scheme == SEMI_IMPLICIT:
            _episode_forces(
                parent, jtype, axis, xrot, xpos, mass, com, icom, base_R, base_p, gravity,
                iface_body, iface_point, K, D, hR[s], hp[s], hw[s], hv[s],
                klock, dlock, q0, act_mask, policy, q, qd, True,
                R, p, S, V, V0, I6, H, Keff, Deff, Q, bias, grav, zeros, wr, ds, pif,
            )
            _record(k, q, qd, grav, wr, ds, pif, q_hist, qd_hist, tau_hist, wrench_hist, dist_hist, pi_hist)
            for a in range(nf):
                i = free[a]
                acc = h * Q[i]
                for j in range(n):
                    acc -= h * h * Keff[i, j] * qd[j]
                for j in range(n):
                    if presc_mask[j]:
                        Aij = H[i, j] + h * Deff[i, j] + h * h * Keff[i, j]
                        acc -= Aij * (presc_qd[s + 2, j] - qd[j])
                bf[a] = acc
                for c in range(nf):
                    jj = free[c]
                    Af[a, c] = H[i, jj] + h * Deff[i, jj] + h * h * Keff[i, jj]
            fail = cholesky_solve(Af, bf, xf)
            if fail >= 0:
                return k + 1
            for a in range(nf):
                i = free[a]
                qd[i] += xf[a]
                q[i] += h * qd[i]
            for i in range(n):
                if presc_mask[i]:
                    q[i] = presc_q[s + 2, i]
                    qd[i] = presc_qd[s + 2, i]
        else:
            for stage in range(4):
                si = s if stage == 0 else (s + 1 if stage < 3 else s + 2)
                lo = si - 1 if si > 0 else si
                hi = si + 1 if si + 1 < n_half else si
                for i in range(n):
                    if presc_mask[i] and hi > lo:
                        qdd_p[i] = (presc_qd[hi, i] - presc_qd[lo, i]) / ((hi - lo) * 0.5 * h)
                    else:
                        qdd_p[i] = 0.0
                if stage == 0:
                    for i in range(n):
                        qs[i] = q[i]
                        vs[i] = qd[i]
                else:
                    frac = 0.5 * h if stage < 3 else h
                    for i in range(n):
                        qs[i] = q[i] + frac * kq[stage - 1, i]
                        vs[i] = qd[i] + frac * kv[stage - 1, i]
                _episode_forces(
                    parent, jtype, axis, xrot, xpos, mass, com, icom, base_R, base_p, gravity,
                    iface_body, iface_point, K, D, hR[si], hp[si], hw[si], hv[si],
                    klock, dlock, q0, act_mask, policy, qs, vs, False,
                    R, p, S, V, V0, I6, H, Keff, Deff, Q, bias, grav, zeros, wr, ds, pif,
                )
                if stage == 0:
                    _record(k, q, qd, grav, wr, ds, pif, q_hist, qd_hist, tau_hist, wrench_hist, dist_hist, pi_hist)
                fail = _solve_free(H, Q, presc_mask, free, nf, qdd_p, Af, bf, xf, kv[stage])
                if fail >= 0:
                    return k + 1
                for i in range(n):
                    kq[stage, i] = vs[i]
            for i in range(n):
                if presc_mask[i]:
                    q[i] = presc_q[s + 2, i]
                    qd[i] = presc_qd[s + 2, i]
                else:
                    q[i] += h / 6.0 * (kq[0, i] + 2.0 * kq[1, i] + 2.0 * kq[2, i] + kq[3, i])
                    qd[i] += h / 6.0 * (kv[0, i] + 2.0 * kv[1, i] + 2.0 * kv[2, i] + kv[3, i])
        if not (_all_finite(q) and _all_finite(qd)):
            return k + 1
    s = 2 * n_steps
    _episode_forces(
        parent, jtype, axis, xrot, xpos, mass, com, icom, base_R, base_p, gravity,
        iface_body, iface_point, K, D, hR[s], hp[s], hw[s], hv[s],
        klock, dlock, q0, act_mask, policy, q, qd, False,
        R, p, S, V, V0, I6, H, Keff, Deff, Q, bias, grav, zeros, wr, ds, pif,
    )
    _record(n_steps, q, qd, grav, wr, ds, pif, q_hist, qd_hist, tau_hist, wrench_hist, dist_hist, pi_hist)
    return n_steps + 1


@njit(cache=True)
def _record(k, q, qd, grav, wr, ds, pif, q_hist, qd_hist, tau_hist, wrench_hist, dist_hist, pi_hist):
    n = q.shape[0]
    m = wr.shape[0]
    for i in range(n):
        q_hist[k, i] = q[i]
        qd_hist[k, i] = qd[i]
        tau_hist[k, i] = grav[i]
    for f in range(m):
        for c in range(6):
            wrench_hist[k, f, c] = wr[f, c]
        for c in range(3):
            dist_hist[k, f, c] = ds[f, c]
        pi_hist[k, f] = pif[f]
