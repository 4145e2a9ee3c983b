# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled subset-enumeration kernel for the brute-force selection oracle."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def enumerate_best(costs, need_in, in_req, need_out, out_req, long long budget,
                   long long pos_mask, long long min_pos):
    cdef double[:] c = np.ascontiguousarray(costs, dtype=np.float64)
    cdef unsigned char[:] nin = np.ascontiguousarray(need_in, dtype=np.uint8)
    cdef unsigned char[:] nout = np.ascontiguousarray(need_out, dtype=np.uint8)
    cdef long long[:] ireq = np.ascontiguousarray(in_req, dtype=np.int64)
    cdef long long[:] oreq = np.ascontiguousarray(out_req, dtype=np.int64)
    cdef int E = c.shape[0]
    cdef long long total = 1LL << E
    cdef long long mask, best_mask = -1
    cdef double obj, best_obj = -np.inf
    cdef int e, count, npos
    cdef bint ok
    for mask in range(total):
        count = 0
        npos = 0
        ok = True
        obj = 0.0
        for e in range(E):
            if (mask >> e) & 1:
                count += 1
                if (pos_mask >> e) & 1:
                    npos += 1
                if nin[e] and (mask & ireq[e]) == 0:
                    ok = False
                    break
                if nout[e] and (mask & oreq[e]) == 0:
                    ok = False
                    break
                obj += c[e]
        if not ok or count > budget or npos < min_pos:
            continue
        if obj > best_obj:
            best_obj = obj
            best_mask = mask
    return best_mask, best_obj
