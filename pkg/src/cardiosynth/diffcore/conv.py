"""Strided 3D convolution and its transpose, GEMM-based, with exact adjoints.

``conv3d`` gathers input patches (im2col) and multiplies by the flattened
kernel; ``tconv3d`` is its exact adjoint, implemented by scattering weighted
patches back onto the output grid (col2im).  The gather/scatter kernels are
numba-compiled with padding folded in; the dominant kernel-4/stride-2/pad-1
case has a specialised unrolled kernel.  Both ops accept per-axis kernel,
stride and padding, which the model layer plans use for axes that have
already collapsed to size 1.

``conv3d_replay`` builds a gradient-only graph node from already-known
output values; the trainer uses it to avoid recomputing a frozen
discriminator forward whose values are known from the detached pass.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from .tensor import Tensor, accumulate, result


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(e) for e in v)
    if len(v) != 3:
        raise ValueError(f"expected an int or a 3-tuple, got {v}")
    return v


@njit(cache=True)
def _gather_generic(x, cols, k0, k1, k2, s0, s1, s2, p0, p1, p2, o0, o1, o2):
    """cols[n, (c, k0, k1, k2)] = padded-x patch values; zero outside bounds."""
    b_n, c_n, x_n, y_n, z_n = x.shape
    kvol = k0 * k1 * k2
    n = 0
    for b in range(b_n):
        for ox in range(o0):
            xb = ox * s0 - p0
            for oy in range(o1):
                yb = oy * s1 - p1
                for oz in range(o2):
                    zb = oz * s2 - p2
                    l_lo = max(0, -zb)
                    l_hi = min(k2, z_n - zb)
                    for c in range(c_n):
                        base = c * kvol
                        for i in range(k0):
                            xi = xb + i
                            row = base + i * k1 * k2
                            if 0 <= xi < x_n:
                                for j in range(k1):
                                    yj = yb + j
                                    off = row + j * k2
                                    if 0 <= yj < y_n:
                                        for l in range(l_lo):
                                            cols[n, off + l] = 0.0
                                        for l in range(l_lo, l_hi):
                                            cols[n, off + l] = x[b, c, xi, yj, zb + l]
                                        for l in range(l_hi, k2):
                                            cols[n, off + l] = 0.0
                                    else:
                                        for l in range(k2):
                                            cols[n, off + l] = 0.0
                            else:
                                for j in range(k1):
                                    for l in range(k2):
                                        cols[n, row + j * k2 + l] = 0.0
                    n += 1


@njit(cache=True)
def _gather_442(x, cols, o0, o1, o2):
    """Specialised gather for kernel 4^3, stride 2, padding 1."""
    b_n, c_n, x_n, y_n, z_n = x.shape
    for b in range(b_n):
        nb = b * o0 * o1 * o2
        for ox in range(o0):
            xb = ox * 2 - 1
            x_full = 0 <= xb and xb + 4 <= x_n
            for oy in range(o1):
                yb = oy * 2 - 1
                y_full = 0 <= yb and yb + 4 <= y_n
                base_n = nb + (ox * o1 + oy) * o2
                if x_full and y_full:
                    for oz in range(o2):
                        zb = oz * 2 - 1
                        n = base_n + oz
                        if 0 <= zb and zb + 4 <= z_n:
                            col = 0
                            for c in range(c_n):
                                for i in range(4):
                                    xi = xb + i
                                    for j in range(4):
                                        yj = yb + j
                                        cols[n, col] = x[b, c, xi, yj, zb]
                                        cols[n, col + 1] = x[b, c, xi, yj, zb + 1]
                                        cols[n, col + 2] = x[b, c, xi, yj, zb + 2]
                                        cols[n, col + 3] = x[b, c, xi, yj, zb + 3]
                                        col += 4
                        else:
                            l_lo = max(0, -zb)
                            l_hi = min(4, z_n - zb)
                            col = 0
                            for c in range(c_n):
                                for i in range(4):
                                    xi = xb + i
                                    for j in range(4):
                                        yj = yb + j
                                        for l in range(4):
                                            if l_lo <= l < l_hi:
                                                cols[n, col + l] = x[b, c, xi, yj, zb + l]
                                            else:
                                                cols[n, col + l] = 0.0
                                        col += 4
                else:
                    for oz in range(o2):
                        zb = oz * 2 - 1
                        n = base_n + oz
                        l_lo = max(0, -zb)
                        l_hi = min(4, z_n - zb)
                        col = 0
                        for c in range(c_n):
                            for i in range(4):
                                xi = xb + i
                                xi_ok = 0 <= xi < x_n
                                for j in range(4):
                                    yj = yb + j
                                    if xi_ok and 0 <= yj < y_n:
                                        for l in range(4):
                                            if l_lo <= l < l_hi:
                                                cols[n, col + l] = x[b, c, xi, yj, zb + l]
                                            else:
                                                cols[n, col + l] = 0.0
                                    else:
                                        for l in range(4):
                                            cols[n, col + l] = 0.0
                                    col += 4


@njit(cache=True)
def _scatter_generic(cols, out, k0, k1, k2, s0, s1, s2, p0, p1, p2, o0, o1, o2):
    """Adjoint of the gather: add patch values onto ``out`` in place.

    Out-of-bounds contributions are dropped (adjoint of the zero fill).
    """
    b_n, c_n, x_n, y_n, z_n = out.shape
    kvol = k0 * k1 * k2
    n = 0
    for b in range(b_n):
        for ox in range(o0):
            xb = ox * s0 - p0
            for oy in range(o1):
                yb = oy * s1 - p1
                for oz in range(o2):
                    zb = oz * s2 - p2
                    l_lo = max(0, -zb)
                    l_hi = min(k2, z_n - zb)
                    for c in range(c_n):
                        base = c * kvol
                        for i in range(max(0, -xb), min(k0, x_n - xb)):
                            xi = xb + i
                            row = base + i * k1 * k2
                            for j in range(max(0, -yb), min(k1, y_n - yb)):
                                yj = yb + j
                                off = row + j * k2
                                for l in range(l_lo, l_hi):
                                    out[b, c, xi, yj, zb + l] += cols[n, off + l]
                    n += 1


@njit(cache=True)
def _scatter_442(cols, out, o0, o1, o2):
    """Specialised scatter for kernel 4^3, stride 2, padding 1."""
    b_n, c_n, x_n, y_n, z_n = out.shape
    for b in range(b_n):
        nb = b * o0 * o1 * o2
        for ox in range(o0):
            xb = ox * 2 - 1
            x_full = 0 <= xb and xb + 4 <= x_n
            for oy in range(o1):
                yb = oy * 2 - 1
                y_full = 0 <= yb and yb + 4 <= y_n
                base_n = nb + (ox * o1 + oy) * o2
                for oz in range(o2):
                    zb = oz * 2 - 1
                    n = base_n + oz
                    z_full = 0 <= zb and zb + 4 <= z_n
                    if x_full and y_full and z_full:
                        col = 0
                        for c in range(c_n):
                            for i in range(4):
                                xi = xb + i
                                for j in range(4):
                                    yj = yb + j
                                    out[b, c, xi, yj, zb] += cols[n, col]
                                    out[b, c, xi, yj, zb + 1] += cols[n, col + 1]
                                    out[b, c, xi, yj, zb + 2] += cols[n, col + 2]
                                    out[b, c, xi, yj, zb + 3] += cols[n, col + 3]
                                    col += 4
                    else:
                        l_lo = max(0, -zb)
                        l_hi = min(4, z_n - zb)
                        col = 0
                        for c in range(c_n):
                            for i in range(4):
                                xi = xb + i
                                xi_ok = 0 <= xi < x_n
                                for j in range(4):
                                    yj = yb + j
                                    if xi_ok and 0 <= yj < y_n:
                                        for l in range(l_lo, l_hi):
                                            out[b, c, xi, yj, zb + l] += cols[n, col + l]
                                    col += 4


def conv_output_shape(sp, k, s, p) -> tuple[int, int, int]:
    out = tuple((sp[i] + 2 * p[i] - k[i]) // s[i] + 1 for i in range(3))
    if any(o < 1 for o in out):
        raise ValueError(f"conv output collapses: input {sp}, kernel {k}, stride {s}, pad {p}")
    return out


def tconv_output_shape(sp, k, s, p) -> tuple[int, int, int]:
    out = tuple((sp[i] - 1) * s[i] - 2 * p[i] + k[i] for i in range(3))
    if any(o < 1 for o in out):
        raise ValueError(f"tconv output collapses: input {sp}, kernel {k}, stride {s}, pad {p}")
    return out


_FAST_CASE = ((4, 4, 4), (2, 2, 2), (1, 1, 1))


def _im2col(x: np.ndarray, k, s, p, out_sp) -> np.ndarray:
    batch, cin = x.shape[:2]
    n = batch * out_sp[0] * out_sp[1] * out_sp[2]
    cols = np.empty((n, cin * k[0] * k[1] * k[2]), dtype=x.dtype)
    if (tuple(k), tuple(s), tuple(p)) == _FAST_CASE:
        _gather_442(x, cols, *out_sp)
    else:
        _gather_generic(x, cols, *k, *s, *p, *out_sp)
    return cols


def _col2im(cols: np.ndarray, shape, k, s, p, out_sp) -> np.ndarray:
    acc = np.zeros(shape, dtype=cols.dtype)
    if (tuple(k), tuple(s), tuple(p)) == _FAST_CASE:
        _scatter_442(cols, acc, *out_sp)
    else:
        _scatter_generic(cols, acc, *k, *s, *p, *out_sp)
    return acc


def conv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, padding=1) -> Tensor:
    """Cross-correlation of (B, Cin, X, Y, Z) with kernels (Cout, Cin, k0, k1, k2)."""
    s, p = _triple(stride), _triple(padding)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError(f"conv3d: need 5D input/weight, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError(
            f"conv3d: input channels {x.data.shape[1]} != weight channels {w.data.shape[1]}"
        )
    batch, cin, *sp = x.data.shape
    cout = w.data.shape[0]
    k = w.data.shape[2:]
    out_sp = conv_output_shape(sp, k, s, p)

    cols = _im2col(np.ascontiguousarray(x.data), k, s, p, out_sp)
    wmat = w.data.reshape(cout, -1)
    out_mat = cols @ wmat.T
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(f"conv3d: bias shape {b.data.shape} != ({cout},)")
        out_mat += b.data
    out = np.ascontiguousarray(
        out_mat.reshape((batch,) + out_sp + (cout,)).transpose(0, 4, 1, 2, 3)
    )

    saved_cols = cols if w.requires_grad else None
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        n = batch * out_sp[0] * out_sp[1] * out_sp[2]
        g_mat = g.transpose(0, 2, 3, 4, 1).reshape(n, cout)
        if w.requires_grad:
            accumulate(w, (g_mat.T @ saved_cols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            accumulate(b, g_mat.sum(axis=0))
        if x.requires_grad:
            dcols = g_mat @ wmat
            accumulate(x, _col2im(dcols, x.data.shape, k, s, p, out_sp))

    return result(out, parents, backward)


def conv3d_replay(x: Tensor, w: Tensor, out_values: np.ndarray, stride=2, padding=1) -> Tensor:
    """Graph node for a convolution whose output values are already known.

    Skips the forward gather/GEMM entirely; the backward pass propagates
    input gradients through the (frozen) weights.  The caller guarantees that
    ``out_values`` equals ``conv3d(x, w, b)`` for the same inputs; shapes are
    verified.
    """
    s, p = _triple(stride), _triple(padding)
    batch, cin, *sp = x.data.shape
    cout = w.data.shape[0]
    k = w.data.shape[2:]
    out_sp = conv_output_shape(sp, k, s, p)
    if out_values.shape != (batch, cout) + out_sp:
        raise ValueError(
            f"conv3d_replay: cached output {out_values.shape} does not match "
            f"expected {(batch, cout) + out_sp}"
        )
    wmat = w.data.reshape(cout, -1)

    def backward(g):
        n = batch * out_sp[0] * out_sp[1] * out_sp[2]
        g_mat = g.transpose(0, 2, 3, 4, 1).reshape(n, cout)
        dcols = g_mat @ wmat
        accumulate(x, _col2im(dcols, x.data.shape, k, s, p, out_sp))

    return result(out_values, (x,), backward)


def tconv3d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=2, padding=1) -> Tensor:
    """Transposed convolution: adjoint of ``conv3d`` in the spatial mapping.

    Input (B, Cin, X, Y, Z), kernels (Cin, Cout, k0, k1, k2).  With stride 2,
    kernel 4 and padding 1 it exactly doubles each spatial dimension.
    """
    s, p = _triple(stride), _triple(padding)
    if x.data.ndim != 5 or w.data.ndim != 5:
        raise ValueError(f"tconv3d: need 5D input/weight, got {x.shape} and {w.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"tconv3d: input channels {x.data.shape[1]} != weight channels {w.data.shape[0]}"
        )
    batch, cin, *sp = x.data.shape
    cout = w.data.shape[1]
    k = w.data.shape[2:]
    out_sp = tconv_output_shape(sp, k, s, p)

    x_mat = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, cin)
    wmat = w.data.reshape(cin, -1)
    cols = x_mat @ wmat
    out = _col2im(cols, (batch, cout) + out_sp, k, s, p, tuple(sp))
    if b is not None:
        if b.data.shape != (cout,):
            raise ValueError(f"tconv3d: bias shape {b.data.shape} != ({cout},)")
        out += b.data.reshape(1, cout, 1, 1, 1)

    saved_x_mat = x_mat if w.requires_grad else None
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gcols = _im2col(np.ascontiguousarray(g), k, s, p, tuple(sp))
        if w.requires_grad:
            accumulate(w, (saved_x_mat.T @ gcols).reshape(w.data.shape))
        if b is not None and b.requires_grad:
            accumulate(b, g.sum(axis=(0, 2, 3, 4)))
        if x.requires_grad:
            dx_mat = gcols @ wmat.T
            dx = dx_mat.reshape((batch,) + tuple(sp) + (cin,)).transpose(0, 4, 1, 2, 3)
            accumulate(x, np.ascontiguousarray(dx))

    return result(out, parents, backward)
