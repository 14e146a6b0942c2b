"""Numba kernels shared by the hot paths: a flat uniform-grid bucket index,
batched ball-mass queries, and min pairwise distance.

All kernels take raw float64/int64 arrays; callers own the conversion from the
geometry/measure types.  Everything is deterministic: loops run in a fixed
order and nothing depends on parallel scheduling.
"""

from __future__ import annotations

import numpy as np
from numba import njit

_CELL_BITS = 21  # cells per axis capped at 2^20, see _clamped_cell_size


@njit(cache=True)
def _clamped_cell_size(points, h):
    # coarsen the cell size until bbox_extent / h fits the per-axis key budget;
    # coarser cells only enlarge candidate sets, never drop them
    n, dim = points.shape
    extent = 0.0
    for i in range(dim):
        lo = points[0, i]
        hi = points[0, i]
        for j in range(1, n):
            v = points[j, i]
            if v < lo:
                lo = v
            if v > hi:
                hi = v
        if hi - lo > extent:
            extent = hi - lo
    h_min = extent / float(1 << 19)
    return h if h > h_min else h_min


@njit(cache=True)
def _mins_of(points):
    n, dim = points.shape
    mins = np.empty(dim, dtype=np.float64)
    for i in range(dim):
        m = points[0, i]
        for j in range(1, n):
            if points[j, i] < m:
                m = points[j, i]
        mins[i] = m
    return mins


@njit(cache=True)
def _cell_key(x, mins, inv_h, dim):
    key = np.int64(0)
    for i in range(dim):
        c = np.int64(np.floor((x[i] - mins[i]) * inv_h)) + 1  # grid is bbox-anchored
        key = (key << _CELL_BITS) | c
    return key


@njit(cache=True)
def build_bucket_index(points, h):
    """Group point indices by uniform grid cell.

    Returns (order, cell_keys, starts, mins, h_eff): ``order`` lists point
    indices grouped by cell, ``cell_keys`` the sorted distinct keys,
    ``starts`` CSR offsets (len(cell_keys)+1), ``mins`` the bbox anchor, and
    ``h_eff >= h`` the cell size actually used.
    """
    n = points.shape[0]
    dim = points.shape[1]
    h_eff = _clamped_cell_size(points, h)
    mins = _mins_of(points)
    inv_h = 1.0 / h_eff
    keys = np.empty(n, dtype=np.int64)
    for j in range(n):
        keys[j] = _cell_key(points[j], mins, inv_h, dim)
    order = np.argsort(keys, kind="mergesort")
    sorted_keys = keys[order]
    ncell = 0
    prev = np.int64(-1)
    for j in range(n):
        if sorted_keys[j] != prev:
            ncell += 1
            prev = sorted_keys[j]
    cell_keys = np.empty(ncell, dtype=np.int64)
    starts = np.empty(ncell + 1, dtype=np.int64)
    ncell = 0
    prev = np.int64(-1)
    for j in range(n):
        if sorted_keys[j] != prev:
            cell_keys[ncell] = sorted_keys[j]
            starts[ncell] = j
            ncell += 1
            prev = sorted_keys[j]
    starts[ncell] = n
    return order, cell_keys, starts, mins, h_eff


@njit(cache=True)
def _find_cell(cell_keys, key):
    lo, hi = 0, cell_keys.shape[0]
    while lo < hi:
        mid = (lo + hi) // 2
        if cell_keys[mid] < key:
            lo = mid + 1
        else:
            hi = mid
    if lo < cell_keys.shape[0] and cell_keys[lo] == key:
        return lo
    return -1


@njit(cache=True)
def ball_mass_bucketed(points, weights, order, cell_keys, starts, mins, h_eff, center, radius):
    """Total weight in the closed ball; requires radius <= h_eff so the 3^d
    cell neighborhood covers it."""
    dim = points.shape[1]
    inv_h = 1.0 / h_eff
    r2 = radius * radius
    total = 0.0
    base = np.empty(dim, dtype=np.int64)
    for i in range(dim):
        base[i] = np.int64(np.floor((center[i] - mins[i]) * inv_h)) + 1
    n_nbr = 3**dim
    for t in range(n_nbr):
        key = np.int64(0)
        tt = t
        for i in range(dim):
            off = tt % 3 - 1
            tt //= 3
            key = (key << _CELL_BITS) | (base[i] + off)
        ci = _find_cell(cell_keys, key)
        if ci < 0:
            continue
        for j in range(starts[ci], starts[ci + 1]):
            p = order[j]
            s = 0.0
            for i in range(dim):
                dxi = points[p, i] - center[i]
                s += dxi * dxi
            if s <= r2:
                total += weights[p]
    return total


@njit(cache=True)
def ball_masses_all_centers(points, weights, radius):
    """Ball mass at every support point for one radius."""
    n = points.shape[0]
    order, cell_keys, starts, mins, h_eff = build_bucket_index(points, radius)
    out = np.empty(n, dtype=np.float64)
    for j in range(n):
        out[j] = ball_mass_bucketed(
            points, weights, order, cell_keys, starts, mins, h_eff, points[j], radius
        )
    return out


_EMPTY_KEY = np.int64(-(1 << 62))
_MAX_CELL = np.int64((1 << _CELL_BITS) - 1)


@njit(cache=True)
def _hash_slot(table_keys, key):
    # open addressing; capacity is a power of two > number of distinct keys,
    # so the probe always terminates on the key or an empty slot
    cap = table_keys.shape[0]
    mask = cap - 1
    h = key * np.int64(-7046029254386353131)
    slot = (h ^ (h >> 31)) & mask
    while table_keys[slot] != _EMPTY_KEY and table_keys[slot] != key:
        slot = (slot + 1) & mask
    return slot


@njit(cache=True)
def _query_key(x, mins, inv_h, dim, t):
    # neighbor-cell key for a query point that may fall outside the anchored
    # bbox; out-of-range coords clamp to edge cells (extra scans, never misses
    # within one cell distance)
    key = np.int64(0)
    tt = t
    for i in range(dim):
        off = tt % 3 - 1
        tt //= 3
        c = np.int64(np.floor((x[i] - mins[i]) * inv_h)) + 1 + off
        if c < 0:
            c = 0
        elif c > _MAX_CELL:
            c = _MAX_CELL
        key = (key << _CELL_BITS) | c
    return key


@njit(cache=True)
def first_containing_ball(points, centers, radii, pad):
    """Per point, the lowest index b with |x - centers[b]| <= radii[b] + pad,
    or -1.  For pairwise disjoint balls and pad=0 the hit is unique."""
    n, dim = points.shape
    out = np.full(n, -1, dtype=np.int64)
    nb = centers.shape[0]
    if nb == 0:
        return out
    rmax = radii[0]
    for b in range(1, nb):
        if radii[b] > rmax:
            rmax = radii[b]
    order, cell_keys, starts, mins, h_eff = build_bucket_index(centers, rmax + pad)
    inv_h = 1.0 / h_eff
    n_nbr = 3**dim
    for p in range(n):
        hit = np.int64(-1)
        for t in range(n_nbr):
            key = _query_key(points[p], mins, inv_h, dim, t)
            ci = _find_cell(cell_keys, key)
            if ci < 0:
                continue
            for j in range(starts[ci], starts[ci + 1]):
                b = order[j]
                s = 0.0
                for i in range(dim):
                    dxi = points[p, i] - centers[b, i]
                    s += dxi * dxi
                if np.sqrt(s) <= radii[b] + pad and (hit < 0 or b < hit):
                    hit = b
        out[p] = hit
    return out


@njit(cache=True)
def containing_ball_grouped(points, order, cell_keys, starts, mins, h_eff, centers, radii, pad):
    """``first_containing_ball`` over a prebuilt point bucket index.

    Requires every radius + pad at most ``h_eff`` (the index cell size): the
    3^d neighborhood of a point's cell then sees every ball that can contain
    it.  Scans gather nearby balls once per occupied cell instead of once
    per point, which is much cheaper when cells hold many points.
    """
    n, dim = points.shape
    out = np.full(n, -1, dtype=np.int64)
    nb = centers.shape[0]
    if nb == 0:
        return out
    inv_h = 1.0 / h_eff
    cap = 16
    while cap < 2 * nb:
        cap <<= 1
    table_keys = np.full(cap, _EMPTY_KEY, dtype=np.int64)
    head = np.full(cap, -1, dtype=np.int64)
    nxt = np.full(nb, -1, dtype=np.int64)
    t_center = (3**dim - 1) // 2
    for b in range(nb):
        key = _query_key(centers[b], mins, inv_h, dim, t_center)
        slot = _hash_slot(table_keys, key)
        if table_keys[slot] == _EMPTY_KEY:
            table_keys[slot] = key
        nxt[b] = head[slot]
        head[slot] = b
    n_nbr = 3**dim
    n_cells = starts.shape[0] - 1
    for ci in range(n_cells):
        lo = starts[ci]
        hi = starts[ci + 1]
        rep = order[lo]
        for t in range(n_nbr):
            key = _query_key(points[rep], mins, inv_h, dim, t)
            slot = _hash_slot(table_keys, key)
            if table_keys[slot] == _EMPTY_KEY:
                continue
            b = head[slot]
            while b >= 0:
                rb = radii[b] + pad
                for j in range(lo, hi):
                    p = order[j]
                    s = 0.0
                    for i in range(dim):
                        dxi = points[p, i] - centers[b, i]
                        s += dxi * dxi
                    if np.sqrt(s) <= rb and (out[p] < 0 or b < out[p]):
                        out[p] = b
                b = nxt[b]
    return out


@njit(cache=True)
def greedy_margin_select(centers, radii, n_seed, margin):
    """Sequential greedy over balls in array order: keep a ball unless its
    surface comes within ``margin`` of an already kept one.

    The first ``n_seed`` rows are kept unconditionally; the index of the first
    seed that violates the margin against an earlier seed is returned as
    ``conflict`` (-1 when seeds are mutually clear).  Callers order candidate
    rows by decreasing radius.
    """
    n, dim = centers.shape
    accepted = np.zeros(n, dtype=np.bool_)
    conflict = np.int64(-1)
    if n == 0:
        return accepted, conflict
    rmax = radii[0]
    for b in range(1, n):
        if radii[b] > rmax:
            rmax = radii[b]
    h = 2.0 * rmax + margin
    if h <= 0.0:
        h = 1.0
    h = _clamped_cell_size(centers, h)
    mins = _mins_of(centers)
    inv_h = 1.0 / h
    cap = 16
    while cap < 2 * n:
        cap <<= 1
    table_keys = np.full(cap, _EMPTY_KEY, dtype=np.int64)
    head = np.full(cap, -1, dtype=np.int64)
    nxt = np.full(n, -1, dtype=np.int64)
    n_nbr = 3**dim
    for idx in range(n):
        blocked = False
        for t in range(n_nbr):
            key = _query_key(centers[idx], mins, inv_h, dim, t)
            slot = _hash_slot(table_keys, key)
            if table_keys[slot] == _EMPTY_KEY:
                continue
            b = head[slot]
            while b >= 0:
                s = 0.0
                for i in range(dim):
                    dxi = centers[idx, i] - centers[b, i]
                    s += dxi * dxi
                if np.sqrt(s) <= radii[idx] + radii[b] + margin:
                    blocked = True
                    break
                b = nxt[b]
            if blocked:
                break
        if idx < n_seed:
            if blocked and conflict < 0:
                conflict = idx
            accepted[idx] = True
        elif not blocked:
            accepted[idx] = True
        if accepted[idx]:
            key = np.int64(0)
            for i in range(dim):
                c = np.int64(np.floor((centers[idx, i] - mins[i]) * inv_h)) + 1
                key = (key << _CELL_BITS) | c
            slot = _hash_slot(table_keys, key)
            if table_keys[slot] == _EMPTY_KEY:
                table_keys[slot] = key
            nxt[idx] = head[slot]
            head[slot] = idx
    return accepted, conflict


@njit(cache=True)
def ratio_min_assign(points, centers, radii, reach):
    """Per point, argmin over balls with |x - x_B| <= reach*r(B) of the ratio
    |x - x_B| / r(B); ties break to the lower ball index.  -1 when no ball
    reaches the point.  Ratio comparisons cross-multiply so ties are exact."""
    n, dim = points.shape
    out = np.full(n, -1, dtype=np.int64)
    nb = centers.shape[0]
    if nb == 0:
        return out
    rmax = radii[0]
    for b in range(1, nb):
        if radii[b] > rmax:
            rmax = radii[b]
    order, cell_keys, starts, mins, h_eff = build_bucket_index(centers, reach * rmax)
    inv_h = 1.0 / h_eff
    n_nbr = 3**dim
    for p in range(n):
        best = np.int64(-1)
        best_d = 0.0
        for t in range(n_nbr):
            key = _query_key(points[p], mins, inv_h, dim, t)
            ci = _find_cell(cell_keys, key)
            if ci < 0:
                continue
            for j in range(starts[ci], starts[ci + 1]):
                b = order[j]
                s = 0.0
                for i in range(dim):
                    dxi = points[p, i] - centers[b, i]
                    s += dxi * dxi
                d = np.sqrt(s)
                if d > reach * radii[b]:
                    continue
                if best < 0:
                    best = b
                    best_d = d
                else:
                    lhs = d * radii[best]
                    rhs = best_d * radii[b]
                    if lhs < rhs or (lhs == rhs and b < best):
                        best = b
                        best_d = d
        out[p] = best
    return out


@njit(cache=True)
def forced_child_targets(starts, members, point_ball):
    """Per child group, the unique ball containing one of its member points
    (-1 when none).  Returns (targets, conflict): ``conflict`` is the first
    group whose members meet two distinct balls, -1 when clean."""
    n_child = starts.shape[0] - 1
    out = np.full(n_child, -1, dtype=np.int64)
    conflict = np.int64(-1)
    for c in range(n_child):
        f = np.int64(-1)
        for j in range(starts[c], starts[c + 1]):
            b = point_ball[members[j]]
            if b >= 0:
                if f < 0:
                    f = b
                elif f != b and conflict < 0:
                    conflict = c
        out[c] = f
    return out, conflict


@njit(cache=True)
def free_child_targets(child_centers, need, starts, members, points, centers, radii, reach):
    """For each flagged child group, the ratio-min ball (at the child's
    center) among balls whose reach*r covers every member point; -1 when no
    ball qualifies.  Same cross-multiplied tie rule as ratio_min_assign."""
    n_child = child_centers.shape[0]
    dim = child_centers.shape[1]
    out = np.full(n_child, -1, dtype=np.int64)
    nb = centers.shape[0]
    if nb == 0:
        return out
    rmax = radii[0]
    for b in range(1, nb):
        if radii[b] > rmax:
            rmax = radii[b]
    spread = 0.0
    for c in range(n_child):
        if need[c] == 0:
            continue
        for j in range(starts[c], starts[c + 1]):
            s = 0.0
            for i in range(dim):
                dxi = points[members[j], i] - child_centers[c, i]
                s += dxi * dxi
            d = np.sqrt(s)
            if d > spread:
                spread = d
    # any qualifying ball has |y_c - x_B| <= spread + reach*r(B)
    order, cell_keys, startsB, mins, h_eff = build_bucket_index(centers, reach * rmax + spread)
    inv_h = 1.0 / h_eff
    n_nbr = 3**dim
    for c in range(n_child):
        if need[c] == 0:
            continue
        best = np.int64(-1)
        best_d = 0.0
        for t in range(n_nbr):
            key = _query_key(child_centers[c], mins, inv_h, dim, t)
            ci = _find_cell(cell_keys, key)
            if ci < 0:
                continue
            for j in range(startsB[ci], startsB[ci + 1]):
                b = order[j]
                ok = True
                for jj in range(starts[c], starts[c + 1]):
                    s = 0.0
                    for i in range(dim):
                        dxi = points[members[jj], i] - centers[b, i]
                        s += dxi * dxi
                    if np.sqrt(s) > reach * radii[b]:
                        ok = False
                        break
                if not ok:
                    continue
                s = 0.0
                for i in range(dim):
                    dxi = child_centers[c, i] - centers[b, i]
                    s += dxi * dxi
                d = np.sqrt(s)
                if best < 0:
                    best = b
                    best_d = d
                else:
                    lhs = d * radii[best]
                    rhs = best_d * radii[b]
                    if lhs < rhs or (lhs == rhs and b < best):
                        best = b
                        best_d = d
        out[c] = best
    return out


@njit(cache=True)
def group_max_center_dist(starts, members, points, centers):
    """Per group, max distance from its members to its center row."""
    n_grp = starts.shape[0] - 1
    dim = points.shape[1]
    out = np.zeros(n_grp, dtype=np.float64)
    for g in range(n_grp):
        worst = 0.0
        for j in range(starts[g], starts[g + 1]):
            s = 0.0
            for i in range(dim):
                dxi = points[members[j], i] - centers[g, i]
                s += dxi * dxi
            d = np.sqrt(s)
            if d > worst:
                worst = d
        out[g] = worst
    return out


@njit(cache=True)
def boundary_zone_masses(points, weights, labels, n_labels, taus):
    """Mass of the two-sided boundary collars of a labeled partition.

    For thresholds taus (descending not required): int_mass[l, a] sums weights
    of points of label a strictly within taus[l] of a point of another label;
    ext_mass[l, a] sums weights of points of other labels strictly within
    taus[l] of label a's point set.  Returns (int_mass, ext_mass, ok); ok is
    False when a point sees more than the per-point label buffer (caller
    falls back to a dense method).
    """
    n, dim = points.shape
    n_tau = taus.shape[0]
    int_mass = np.zeros((n_tau, n_labels), dtype=np.float64)
    ext_mass = np.zeros((n_tau, n_labels), dtype=np.float64)
    tau_max = 0.0
    for l in range(n_tau):
        if taus[l] > tau_max:
            tau_max = taus[l]
    if tau_max <= 0.0 or n == 0:
        return int_mass, ext_mass, True
    order, cell_keys, starts, mins, h_eff = build_bucket_index(points, tau_max)
    inv_h = 1.0 / h_eff
    n_nbr = 3**dim
    buf = 256
    seen_lab = np.empty(buf, dtype=np.int64)
    seen_d = np.empty(buf, dtype=np.float64)
    for p in range(n):
        own = labels[p]
        n_seen = 0
        for t in range(n_nbr):
            key = _query_key(points[p], mins, inv_h, dim, t)
            ci = _find_cell(cell_keys, key)
            if ci < 0:
                continue
            for j in range(starts[ci], starts[ci + 1]):
                q = order[j]
                lab = labels[q]
                if lab == own:
                    continue
                s = 0.0
                for i in range(dim):
                    dxi = points[p, i] - points[q, i]
                    s += dxi * dxi
                d = np.sqrt(s)
                if d >= tau_max:
                    continue
                found = False
                for u in range(n_seen):
                    if seen_lab[u] == lab:
                        if d < seen_d[u]:
                            seen_d[u] = d
                        found = True
                        break
                if not found:
                    if n_seen == buf:
                        return int_mass, ext_mass, False
                    seen_lab[n_seen] = lab
                    seen_d[n_seen] = d
                    n_seen += 1
        min_other = np.inf
        for u in range(n_seen):
            if seen_d[u] < min_other:
                min_other = seen_d[u]
        for l in range(n_tau):
            if min_other < taus[l]:
                int_mass[l, own] += weights[p]
            for u in range(n_seen):
                if seen_d[u] < taus[l]:
                    ext_mass[l, seen_lab[u]] += weights[p]
    return int_mass, ext_mass, True


@njit(cache=True)
def min_pairwise_distance(points):
    """Exact minimum pairwise Euclidean distance (inf for fewer than 2 points)."""
    n, dim = points.shape
    if n < 2:
        return np.inf
    # initial bound: consecutive gaps along the first axis
    by_x = np.argsort(points[:, 0], kind="mergesort")
    best2 = np.inf
    for j in range(n - 1):
        pa, pb = by_x[j], by_x[j + 1]
        s = 0.0
        for i in range(dim):
            dxi = points[pa, i] - points[pb, i]
            s += dxi * dxi
        if s > 0.0 and s < best2:
            best2 = s
    if not np.isfinite(best2):
        return 0.0  # all points coincide; callers validate distinctness
    h = np.sqrt(best2)
    order, cell_keys, starts, mins, h_eff = build_bucket_index(points, h)
    ncell = cell_keys.shape[0]
    mask = (np.int64(1) << _CELL_BITS) - 1
    for ci in range(ncell):
        key = cell_keys[ci]
        base = np.empty(dim, dtype=np.int64)
        kk = key
        for i in range(dim - 1, -1, -1):
            base[i] = kk & mask
            kk >>= _CELL_BITS
        n_nbr = 3**dim
        for t in range(n_nbr):
            nkey = np.int64(0)
            tt = t
            for i in range(dim):
                off = tt % 3 - 1
                tt //= 3
                nkey = (nkey << _CELL_BITS) | (base[i] + off)
            cj = _find_cell(cell_keys, nkey)
            if cj < 0:
                continue
            for a in range(starts[ci], starts[ci + 1]):
                pa = order[a]
                for b in range(starts[cj], starts[cj + 1]):
                    pb = order[b]
                    if pb <= pa:
                        continue
                    s = 0.0
                    for i in range(dim):
                        dxi = points[pa, i] - points[pb, i]
                        s += dxi * dxi
                    if s > 0.0 and s < best2:
                        best2 = s
    return np.sqrt(best2)


@njit(cache=True)
def annulus_kernel_sums(
    points,
    weights,
    growth_exp,
    base,
    inner_code,
    inner_a,
    inner_b,
    inner_r,
    outer_code,
    outer_a,
    outer_b,
    outer_r,
):
    """Batched proximity sums: 1 + sum over outer-minus-inner of w/|base-y|^n.

    Shape i is a closed ball when code[i] == 0 (a = center, r = radius) and a
    half-open box when code[i] == 1 (a = lo, b = hi).  Membership arithmetic
    replicates the measure-side mask exactly: squared ball offsets accumulate
    axis by axis, boxes compare lo <= y < hi per axis.  Per-pair terms add in
    point order under Kahan compensation, so results are deterministic and
    within one ulp of the correctly rounded sum.
    """
    m = base.shape[0]
    n, dim = points.shape
    out = np.empty(m, dtype=np.float64)
    for i in range(m):
        s = 0.0
        comp = 0.0
        for p in range(n):
            if outer_code[i] == 0:
                acc = 0.0
                for a in range(dim):
                    d = points[p, a] - outer_a[i, a]
                    acc += d * d
                if not acc <= outer_r[i] * outer_r[i]:
                    continue
            else:
                hit = True
                for a in range(dim):
                    v = points[p, a]
                    if not (v >= outer_a[i, a] and v < outer_b[i, a]):
                        hit = False
                        break
                if not hit:
                    continue
            if inner_code[i] == 0:
                acc = 0.0
                for a in range(dim):
                    d = points[p, a] - inner_a[i, a]
                    acc += d * d
                if acc <= inner_r[i] * inner_r[i]:
                    continue
            else:
                hit = True
                for a in range(dim):
                    v = points[p, a]
                    if not (v >= inner_a[i, a] and v < inner_b[i, a]):
                        hit = False
                        break
                if hit:
                    continue
            acc = 0.0
            for a in range(dim):
                d = points[p, a] - base[i, a]
                acc += d * d
            term = weights[p] / np.sqrt(acc) ** growth_exp
            y = term - comp
            t = s + y
            comp = (t - s) - y
            s = t
        out[i] = 1.0 + s
    return out


@njit(cache=True)
def annulus_kernel_sums_ranged(
    points,
    weights,
    growth_exp,
    base,
    inner_r,
    outer_c,
    outer_r,
    start,
    end,
):
    """Ball-annulus proximity sums restricted to a precomputed point slice.

    Same arithmetic as annulus_kernel_sums for the all-ball case with the
    inner ball centered at base, but points/weights arrive sorted along axis
    0 and pair i only scans rows [start[i], end[i]).  The caller guarantees
    the slice covers the outer ball, so skipped rows contribute nothing; the
    Kahan sum order is the sorted order, still within one ulp of exact.
    """
    m = base.shape[0]
    dim = points.shape[1]
    out = np.empty(m, dtype=np.float64)
    for i in range(m):
        s = 0.0
        comp = 0.0
        ir2 = inner_r[i] * inner_r[i]
        or2 = outer_r[i] * outer_r[i]
        for p in range(start[i], end[i]):
            acc = 0.0
            for a in range(dim):
                d = points[p, a] - outer_c[i, a]
                acc += d * d
            if not acc <= or2:
                continue
            acc = 0.0
            for a in range(dim):
                d = points[p, a] - base[i, a]
                acc += d * d
            if acc <= ir2:
                continue
            term = weights[p] / np.sqrt(acc) ** growth_exp
            y = term - comp
            t = s + y
            comp = (t - s) - y
            s = t
        out[i] = 1.0 + s
    return out
