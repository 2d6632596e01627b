"""Pure numpy replay kernels. Bit-for-bit twin of ``_ckernels.pyx``."""

import numpy as np

BACKEND = "python"


def tree_set(tree, leaves, values):
    """Set leaf priorities and recompute every ancestor from its children.

    ``tree`` is a 1-indexed heap of length 2*cap (slot 0 unused). Repeated
    leaves: the last value wins.
    """
    cap = tree.shape[0] // 2
    leaves = np.asarray(leaves, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if leaves.size == 0:
        return
    rev_leaves = leaves[::-1]
    uniq, first = np.unique(rev_leaves, return_index=True)
    nodes = uniq + cap
    tree[nodes] = values[::-1][first]
    nodes = np.unique(nodes >> 1)
    while nodes.size and nodes[0] >= 1:
        tree[nodes] = tree[2 * nodes] + tree[2 * nodes + 1]
        if nodes[0] == 1:
            break
        nodes = np.unique(nodes >> 1)


def tree_find(tree, targets):
    """Leaf index whose prefix-sum interval contains each target."""
    cap = tree.shape[0] // 2
    u = np.array(targets, dtype=np.float64, copy=True)
    idx = np.ones(u.shape[0], dtype=np.int64)
    if u.size == 0:
        return idx
    while cap > 1 and idx[0] < cap:
        left = 2 * idx
        lv = tree[left]
        go_left = (u < lv) | (tree[left + 1] <= 0.0)
        u = np.where(go_left, u, u - lv)
        idx = np.where(go_left, left, left + 1)
    return idx - cap


def window_index(episode, step, slots, cap_per_env, lo, hi):
    """Ring positions and validity for offsets lo..hi around each sampled slot.

    An offset is valid when the record there belongs to the same episode at
    exactly the expected step; invalid positions point back at the slot.
    """
    slots = np.asarray(slots, dtype=np.int64)
    offsets = np.arange(lo, hi + 1, dtype=np.int64)
    base = (slots // cap_per_env) * cap_per_env
    p = slots - base
    q = base[:, None] + np.mod(p[:, None] + offsets[None, :], cap_per_env)
    want = step[slots][:, None] + offsets[None, :]
    mask = (step[q] == want) & (episode[q] == episode[slots][:, None]) & (want >= 0)
    mask &= np.abs(offsets)[None, :] < cap_per_env
    pos = np.where(mask, q, slots[:, None])
    return pos, mask


def nstep_returns(rewards, terminals, valid, gamma):
    """Discounted sum until the first terminal or invalid step.

    Returns (G, steps_used, hit_terminal).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    b, n = rewards.shape
    G = np.zeros(b, dtype=np.float64)
    steps = np.zeros(b, dtype=np.int64)
    done = np.zeros(b, dtype=bool)
    live = np.ones(b, dtype=bool)
    disc = 1.0
    for i in range(n):
        live &= valid[:, i]
        G = np.where(live, G + disc * rewards[:, i], G)
        steps = np.where(live, i + 1, steps)
        hit = live & terminals[:, i]
        done |= hit
        live &= ~terminals[:, i]
        disc *= gamma
    return G, steps, done
