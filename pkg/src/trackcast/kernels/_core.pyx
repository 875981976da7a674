# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled assignment and rotated-box overlap kernels.

Mirrors ``trackcast.kernels._pure`` operation for operation so both backends
return identical results on identical inputs.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, fabs, hypot, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

cdef double AREA_EPS = 1e-12
cdef double REL_TOL = 1e-11


cdef void _hungarian(double[:, ::1] a, Py_ssize_t n, Py_ssize_t* col_of,
                     double* u_out, double* v_out) noexcept:
    cdef double* u = <double*> malloc((n + 1) * sizeof(double))
    cdef double* v = <double*> malloc((n + 1) * sizeof(double))
    cdef double* minv = <double*> malloc((n + 1) * sizeof(double))
    cdef Py_ssize_t* p = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* way = <Py_ssize_t*> malloc((n + 1) * sizeof(Py_ssize_t))
    cdef char* used = <char*> malloc((n + 1) * sizeof(char))
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for j in range(n + 1):
        u[j] = 0.0
        v[j] = 0.0
        p[j] = 0
        way[j] = 0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - ui0 - v[j]
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
    for j in range(1, n + 1):
        col_of[p[j] - 1] = j - 1
    for i in range(n):
        u_out[i] = u[i + 1]
        v_out[i] = v[i + 1]
    free(u)
    free(v)
    free(minv)
    free(p)
    free(way)
    free(used)


cdef bint _dfs(Py_ssize_t r, Py_ssize_t target, char* eq, Py_ssize_t n, char* visited,
               char* fixed_col, Py_ssize_t* col_of, Py_ssize_t* row_of) noexcept:
    cdef Py_ssize_t c
    for c in range(n):
        if not eq[r * n + c] or visited[c] or fixed_col[c]:
            continue
        visited[c] = 1
        if c == target or _dfs(row_of[c], target, eq, n, visited, fixed_col, col_of, row_of):
            col_of[r] = c
            row_of[c] = r
            return True
    return False


def solve_assignment(cost):
    """Minimum-cost perfect assignment of a square matrix, lexicographic tie-break."""
    cdef double[:, ::1] a = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = a.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] hung = np.zeros(n, dtype=np.intp)
    cdef cnp.ndarray[cnp.intp_t, ndim=1] lex = np.zeros(n, dtype=np.intp)
    cdef double* u = <double*> malloc(n * sizeof(double))
    cdef double* v = <double*> malloc(n * sizeof(double))
    cdef char* eq = <char*> malloc(n * n * sizeof(char))
    cdef char* visited = <char*> malloc(n * sizeof(char))
    cdef char* fixed_col = <char*> malloc(n * sizeof(char))
    cdef Py_ssize_t* col_of = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* row_of = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* saved_col = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t* saved_row = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    cdef Py_ssize_t i, j, k, target, q
    cdef double r, c_h, c_l
    try:
        _hungarian(a, n, col_of, u, v)
        for i in range(n):
            hung[i] = col_of[i]
            row_of[col_of[i]] = i
            fixed_col[i] = 0
            for j in range(n):
                r = a[i, j] - u[i] - v[j]
                eq[i * n + j] = r <= REL_TOL * (fabs(a[i, j]) + fabs(u[i]) + fabs(v[j]))
        for i in range(n):
            for j in range(n):
                if not eq[i * n + j] or fixed_col[j]:
                    continue
                if col_of[i] == j:
                    break
                k = row_of[j]
                target = col_of[i]
                for q in range(n):
                    visited[q] = 0
                    saved_col[q] = col_of[q]
                    saved_row[q] = row_of[q]
                visited[j] = 1
                if _dfs(k, target, eq, n, visited, fixed_col, col_of, row_of):
                    col_of[i] = j
                    row_of[j] = i
                    break
                for q in range(n):
                    col_of[q] = saved_col[q]
                    row_of[q] = saved_row[q]
            fixed_col[col_of[i]] = 1
        c_h = 0.0
        c_l = 0.0
        for i in range(n):
            c_h += a[i, hung[i]]
            c_l += a[i, col_of[i]]
        for i in range(n):
            lex[i] = hung[i] if c_l > c_h else col_of[i]
    finally:
        free(u)
        free(v)
        free(eq)
        free(visited)
        free(fixed_col)
        free(col_of)
        free(row_of)
        free(saved_col)
        free(saved_row)
    return lex


cdef void _corners(double x, double z, double l, double w, double yaw, double* out) noexcept:
    cdef double c = cos(yaw)
    cdef double s = sin(yaw)
    cdef double hl = 0.5 * l
    cdef double hw = 0.5 * w
    cdef double lx[4]
    cdef double lz[4]
    lx[0] = hl; lz[0] = hw
    lx[1] = -hl; lz[1] = hw
    lx[2] = -hl; lz[2] = -hw
    lx[3] = hl; lz[3] = -hw
    cdef int k
    for k in range(4):
        out[2 * k] = x + c * lx[k] + s * lz[k]
        out[2 * k + 1] = z - s * lx[k] + c * lz[k]


cdef int _clip(double* subj, int ns, double* clipper, int nc, double* buf_a, double* buf_b) noexcept:
    """Clip ``subj`` (ns points) by convex ``clipper``; result left in buf_a."""
    cdef int n = ns
    cdef int k, q, m
    cdef double ax, ay, bx, by, ex, ey, px, py, sx, sy, dp, ds, t
    cdef double* src = buf_a
    cdef double* dst = buf_b
    cdef double* tmp
    for q in range(2 * ns):
        src[q] = subj[q]
    for k in range(nc):
        if n == 0:
            break
        ax = clipper[2 * k]
        ay = clipper[2 * k + 1]
        bx = clipper[2 * ((k + 1) % nc)]
        by = clipper[2 * ((k + 1) % nc) + 1]
        ex = bx - ax
        ey = by - ay
        m = 0
        for q in range(n):
            px = src[2 * q]
            py = src[2 * q + 1]
            sx = src[2 * ((q + n - 1) % n)]
            sy = src[2 * ((q + n - 1) % n) + 1]
            dp = ex * (py - ay) - ey * (px - ax)
            ds = ex * (sy - ay) - ey * (sx - ax)
            if dp >= 0:
                if ds < 0:
                    t = ds / (ds - dp)
                    dst[2 * m] = sx + t * (px - sx)
                    dst[2 * m + 1] = sy + t * (py - sy)
                    m += 1
                dst[2 * m] = px
                dst[2 * m + 1] = py
                m += 1
            elif ds >= 0:
                t = ds / (ds - dp)
                dst[2 * m] = sx + t * (px - sx)
                dst[2 * m + 1] = sy + t * (py - sy)
                m += 1
        n = m
        tmp = src
        src = dst
        dst = tmp
    if src != buf_a:
        for q in range(2 * n):
            buf_a[q] = src[q]
    return n


cdef double _area(double* poly, int n) noexcept:
    cdef double acc = 0.0
    cdef int k, k2
    for k in range(n):
        k2 = (k + 1) % n
        acc += poly[2 * k] * poly[2 * k2 + 1] - poly[2 * k2] * poly[2 * k + 1]
    return 0.5 * acc


cdef double _iou_pair(double[:, ::1] A, Py_ssize_t i, double[:, ::1] B, Py_ssize_t j) noexcept:
    cdef double ax = A[i, 0], ay = A[i, 1], az = A[i, 2], al = A[i, 3], aw = A[i, 4], ah = A[i, 5]
    cdef double bx = B[j, 0], by = B[j, 1], bz = B[j, 2], bl = B[j, 3], bw = B[j, 4], bh = B[j, 5]
    cdef double reach = 0.5 * (hypot(al, aw) + hypot(bl, bw))
    if fabs(ax - bx) > reach or fabs(az - bz) > reach:
        return 0.0
    cdef double y_lo = max(ay - 0.5 * ah, by - 0.5 * bh)
    cdef double y_hi = min(ay + 0.5 * ah, by + 0.5 * bh)
    cdef double dy = y_hi - y_lo
    if dy <= 0:
        return 0.0
    cdef double ca[8]
    cdef double cb[8]
    cdef double buf_a[32]
    cdef double buf_b[32]
    _corners(ax, az, al, aw, A[i, 6], ca)
    _corners(bx, bz, bl, bw, B[j, 6], cb)
    cdef int n = _clip(ca, 4, cb, 4, buf_a, buf_b)
    if n < 3:
        return 0.0
    cdef double area = _area(buf_a, n)
    if area < AREA_EPS:
        return 0.0
    cdef double inter = area * dy
    cdef double union = al * aw * ah + bl * bw * bh - inter
    if union <= 0:
        return 0.0
    cdef double r = inter / union
    if r < 0.0:
        return 0.0
    if r > 1.0:
        return 1.0
    return r


def iou3d_matrix(a, b):
    """Pairwise 3D IoU for boxes laid out as rows ``[x, y, z, l, w, h, yaw]``."""
    cdef double[:, ::1] A = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 7))
    cdef double[:, ::1] B = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 7))
    out = np.zeros((A.shape[0], B.shape[0]))
    cdef double[:, ::1] O = out
    cdef Py_ssize_t i, j
    for i in range(A.shape[0]):
        for j in range(B.shape[0]):
            O[i, j] = _iou_pair(A, i, B, j)
    return out
