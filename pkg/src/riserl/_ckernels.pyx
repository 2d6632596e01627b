# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled replay kernels. Same contracts as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

BACKEND = "cython"


def tree_set(double[::1] tree, leaves, values):
    cdef Py_ssize_t cap = tree.shape[0] // 2
    cdef cnp.int64_t[::1] lv = np.ascontiguousarray(leaves, dtype=np.int64)
    cdef double[::1] vv = np.ascontiguousarray(values, dtype=np.float64)
    cdef Py_ssize_t i, node
    for i in range(lv.shape[0]):
        node = lv[i] + cap
        tree[node] = vv[i]
        node >>= 1
        while node >= 1:
            tree[node] = tree[2 * node] + tree[2 * node + 1]
            node >>= 1


def tree_find(double[::1] tree, targets):
    cdef Py_ssize_t cap = tree.shape[0] // 2
    cdef double[::1] tv = np.ascontiguousarray(targets, dtype=np.float64)
    cdef Py_ssize_t b = tv.shape[0]
    out = np.empty(b, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    cdef Py_ssize_t i, idx, left
    cdef double u, lval
    for i in range(b):
        u = tv[i]
        idx = 1
        while idx < cap:
            left = 2 * idx
            lval = tree[left]
            if u < lval or tree[left + 1] <= 0.0:
                idx = left
            else:
                u = u - lval
                idx = left + 1
        ov[i] = idx - cap
    return out


def window_index(cnp.int64_t[::1] episode, cnp.int64_t[::1] step, slots, Py_ssize_t cap_per_env,
                 Py_ssize_t lo, Py_ssize_t hi):
    cdef cnp.int64_t[::1] sv = np.ascontiguousarray(slots, dtype=np.int64)
    cdef Py_ssize_t b = sv.shape[0]
    cdef Py_ssize_t w = hi - lo + 1
    pos = np.empty((b, w), dtype=np.int64)
    mask = np.empty((b, w), dtype=np.bool_)
    cdef cnp.int64_t[:, ::1] pv = pos
    cdef cnp.npy_bool[:, ::1] mv = mask
    cdef Py_ssize_t i, j, s, base, p, q, off
    cdef cnp.int64_t want, ep
    for i in range(b):
        s = sv[i]
        base = (s // cap_per_env) * cap_per_env
        p = s - base
        ep = episode[s]
        for j in range(w):
            off = lo + j
            q = base + (((p + off) % cap_per_env) + cap_per_env) % cap_per_env
            want = step[s] + off
            if (off < cap_per_env and -off < cap_per_env and want >= 0
                    and step[q] == want and episode[q] == ep):
                pv[i, j] = q
                mv[i, j] = 1
            else:
                pv[i, j] = s
                mv[i, j] = 0
    return pos, mask


def nstep_returns(rewards, terminals, valid, double gamma):
    cdef double[:, ::1] rv = np.ascontiguousarray(rewards, dtype=np.float64)
    cdef cnp.npy_bool[:, ::1] tv = np.ascontiguousarray(terminals, dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] vv = np.ascontiguousarray(valid, dtype=np.bool_)
    cdef Py_ssize_t b = rv.shape[0]
    cdef Py_ssize_t n = rv.shape[1]
    G = np.zeros(b, dtype=np.float64)
    steps = np.zeros(b, dtype=np.int64)
    done = np.zeros(b, dtype=np.bool_)
    cdef double[::1] gv = G
    cdef cnp.int64_t[::1] stv = steps
    cdef cnp.npy_bool[::1] dv = done
    cdef Py_ssize_t i, k
    cdef double disc, acc
    for i in range(b):
        disc = 1.0
        acc = 0.0
        for k in range(n):
            if not vv[i, k]:
                break
            acc = acc + disc * rv[i, k]
            stv[i] = k + 1
            if tv[i, k]:
                dv[i] = 1
                break
            disc = disc * gamma
        gv[i] = acc
    return G, steps, done
