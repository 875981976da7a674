"""Pure-Python kernels. Same contracts as the compiled ``_core`` module."""
from __future__ import annotations

import math

import numpy as np

AREA_EPS = 1e-12
_REL_TOL = 1e-11


def _hungarian(a: list[list[float]], n: int):
    """Shortest augmenting path assignment with row/column potentials.

    Returns (col_of_row, u, v) with reduced costs a[i][j] - u[i] - v[j] >= 0
    and equality on the assignment.
    """
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    p = [0] * (n + 1)
    way = [0] * (n + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = a[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col_of = [0] * n
    for j in range(1, n + 1):
        col_of[p[j] - 1] = j - 1
    return col_of, u[1:], v[1:]


def _lexicographic(a, n, col_of, u, v):
    """Among optimal assignments pick the lexicographically smallest column sequence.

    Optimal assignments are exactly the perfect matchings of the equality
    subgraph (zero reduced cost). Rows are fixed in order, each to its smallest
    feasible column; feasibility is restored by one alternating-path search.
    """
    eq = []
    for i in range(n):
        row = a[i]
        ui = u[i]
        cand = []
        for j in range(n):
            r = row[j] - ui - v[j]
            if r <= _REL_TOL * (abs(row[j]) + abs(ui) + abs(v[j])):
                cand.append(j)
        eq.append(cand)
    col_of = list(col_of)
    row_of = [0] * n
    for i, j in enumerate(col_of):
        row_of[j] = i
    fixed_col = [False] * n

    for i in range(n):
        for j in eq[i]:
            if fixed_col[j]:
                continue
            if col_of[i] == j:
                break
            k = row_of[j]
            target = col_of[i]
            # alternating path from row k to the column row i gives up
            visited = [False] * n
            visited[j] = True
            path_rows: list[int] = []
            path_cols: list[int] = []

            def dfs(r):
                for c in eq[r]:
                    if visited[c] or fixed_col[c]:
                        continue
                    visited[c] = True
                    if c == target or dfs(row_of[c]):
                        path_rows.append(r)
                        path_cols.append(c)
                        return True
                return False

            if dfs(k):
                for r, c in zip(path_rows, path_cols):
                    col_of[r] = c
                    row_of[c] = r
                col_of[i] = j
                row_of[j] = i
                break
        fixed_col[col_of[i]] = True
    return col_of


def solve_assignment(cost: np.ndarray) -> np.ndarray:
    """Minimum-cost perfect assignment of a square matrix, lexicographic tie-break."""
    cost = np.asarray(cost, dtype=np.float64)
    n = cost.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    a = cost.tolist()
    col_of, u, v = _hungarian(a, n)
    lex = _lexicographic(a, n, col_of, u, v)
    c_h = 0.0
    c_l = 0.0
    for i in range(n):
        c_h += a[i][col_of[i]]
        c_l += a[i][lex[i]]
    if c_l > c_h:
        lex = col_of
    return np.asarray(lex, dtype=np.intp)


# ---------------------------------------------------------------------------
# rotated boxes
# ---------------------------------------------------------------------------


def bev_corners(x, z, length, width, yaw):
    """Counter-clockwise BEV corners in the (x, z) plane."""
    c = math.cos(yaw)
    s = math.sin(yaw)
    hl = 0.5 * length
    hw = 0.5 * width
    out = []
    for lx, lz in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((x + c * lx + s * lz, z - s * lx + c * lz))
    return out


def polygon_area(poly) -> float:
    n = len(poly)
    acc = 0.0
    for k in range(n):
        x1, y1 = poly[k]
        x2, y2 = poly[(k + 1) % n]
        acc += x1 * y2 - x2 * y1
    return 0.5 * acc


def clip_polygon(subject, clipper):
    """Sutherland-Hodgman clipping of ``subject`` by the convex CCW polygon ``clipper``."""
    out = list(subject)
    m = len(clipper)
    for k in range(m):
        if not out:
            break
        ax, ay = clipper[k]
        bx, by = clipper[(k + 1) % m]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        n = len(inp)
        for q in range(n):
            px, py = inp[q]
            sx, sy = inp[q - 1]
            dp = ex * (py - ay) - ey * (px - ax)
            ds = ex * (sy - ay) - ey * (sx - ax)
            if dp >= 0:
                if ds < 0:
                    t = ds / (ds - dp)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif ds >= 0:
                t = ds / (ds - dp)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
    return out


def iou3d_pair(a, b) -> float:
    ax, ay, az, al, aw, ah, ayaw = a
    bx, by, bz, bl, bw, bh, byaw = b
    reach = 0.5 * (math.hypot(al, aw) + math.hypot(bl, bw))
    if abs(ax - bx) > reach or abs(az - bz) > reach:
        return 0.0
    y_lo = max(ay - 0.5 * ah, by - 0.5 * bh)
    y_hi = min(ay + 0.5 * ah, by + 0.5 * bh)
    dy = y_hi - y_lo
    if dy <= 0:
        return 0.0
    inter_poly = clip_polygon(bev_corners(ax, az, al, aw, ayaw), bev_corners(bx, bz, bl, bw, byaw))
    if len(inter_poly) < 3:
        return 0.0
    area = polygon_area(inter_poly)
    if area < AREA_EPS:
        return 0.0
    inter = area * dy
    union = al * aw * ah + bl * bw * bh - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def iou3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise 3D IoU for boxes laid out as rows ``[x, y, z, l, w, h, yaw]``.

    ``y`` is the vertical centre of the box.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 7)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((a.shape[0], b.shape[0]))
    bl = b.tolist()
    for i, ra in enumerate(a.tolist()):
        for j, rb in enumerate(bl):
            out[i, j] = iou3d_pair(ra, rb)
    return out
