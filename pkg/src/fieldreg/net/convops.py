"""3D convolution primitives with hand-written forward and backward passes.

Layout is channels-first ``(C, X, Y, Z)``. All kernels are 3x3x3 with
padding 1; convolutions use stride 1 or 2, transposed convolutions always
stride 2 with the output-size convention that every spatial dim exactly
doubles.

The hot paths are expressed as BLAS matrix products over gathered patch
matrices, with three structural tricks that keep them memory-friendly:

* stride-1 convolutions with wide kernels fold the z-taps and input
  channels into one GEMM per x-slab, then combine the nine (dx, dy)
  offsets by shifted adds (patch rows 9*Co instead of 27*Ci);
* stride-2 gathers read from eight contiguous parity sub-volumes instead
  of step-2 strided views, and stride-2 scatters accumulate into parity
  buffers interleaved once at the end;
* transposed convolution evaluates each output-parity class as a small
  gathered convolution of the input (1 or 2 taps per axis).

Work is chunked along x so scratch stays within a fixed budget; scratch
buffers come from a thread-local arena because first-touch page faults on
fresh allocations would otherwise dominate. Reference implementations
(plain shifted sums) back the unit tests.
"""

from __future__ import annotations

import threading
from itertools import product

import numpy as np

_CHUNK_BYTES = 96 << 20

_tls = threading.local()


def _buf(name: str, shape: tuple[int, ...], dtype, zero: bool = False) -> np.ndarray:
    """Reusable scratch array; contents undefined unless ``zero``.

    Buffers never escape the call that requests them; distinct roles use
    distinct names so nothing aliases within a call.
    """
    arena = getattr(_tls, "arena", None)
    if arena is None:
        arena = _tls.arena = {}
    count = int(np.prod(shape))
    key = (name, np.dtype(dtype).str)
    arr = arena.get(key)
    if arr is None or arr.size < count:
        arr = arena[key] = np.empty(count, dtype=dtype)
    out = arr[:count].reshape(shape)
    if zero:
        out.fill(0)
    return out


def _pad1(x: np.ndarray, name: str) -> np.ndarray:
    c, nx, ny, nz = x.shape
    xp = _buf(name, (c, nx + 2, ny + 2, nz + 2), x.dtype, zero=True)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    return xp


def conv_out_dims(dims, stride: int):
    return tuple((d - 1) // stride + 1 for d in dims)


def _slab_width(per_row_bytes: int, total: int) -> int:
    return max(1, min(total, _CHUNK_BYTES // max(per_row_bytes, 1)))


def _parity_split(xp: np.ndarray, name: str) -> list[np.ndarray]:
    """Eight contiguous sub-volumes xp[:, qx::2, qy::2, qz::2]."""
    out = []
    for i, (qx, qy, qz) in enumerate(product(range(2), range(2), range(2))):
        view = xp[:, qx::2, qy::2, qz::2]
        sub = _buf(f"{name}{i}", view.shape, xp.dtype)
        np.copyto(sub, view)
        out.append(sub)
    return out


def _parity_index(dx: int, dy: int, dz: int) -> int:
    return ((dx % 2) * 2 + (dy % 2)) * 2 + (dz % 2)


# --- gathered patch matrices -------------------------------------------------

def _gather27_s1(xp, yo, zo, a, bx, col):
    """Stride-1 patch rows [a, bx) into col (27*Ci, n); rows (d, ci)."""
    ci = xp.shape[0]
    k = 0
    for dx, dy, dz in product(range(3), range(3), range(3)):
        view = xp[:, a + dx: bx + dx, dy: dy + yo, dz: dz + zo]
        np.copyto(col[k * ci:(k + 1) * ci].reshape(view.shape), view)
        k += 1


def _gather27_s2(subs, yo, zo, a, bx, col):
    """Stride-2 patch rows [a, bx) gathered from parity sub-volumes."""
    ci = subs[0].shape[0]
    k = 0
    for dx, dy, dz in product(range(3), range(3), range(3)):
        s = subs[_parity_index(dx, dy, dz)]
        view = s[:, a + dx // 2: bx + dx // 2,
                 dy // 2: dy // 2 + yo, dz // 2: dz // 2 + zo]
        np.copyto(col[k * ci:(k + 1) * ci].reshape(view.shape), view)
        k += 1


def _w_gather(w: np.ndarray) -> np.ndarray:
    """(Co, Ci, 3, 3, 3) -> (Co, 27*Ci), columns ordered (dx, dy, dz, ci)."""
    co, ci = w.shape[:2]
    return np.ascontiguousarray(w.transpose(0, 2, 3, 4, 1)).reshape(co, 27 * ci)


def _conv_gather_forward(x, w, b, stride):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xo, yo, zo = conv_out_dims((nx, ny, nz), stride)
    xp = _pad1(x, "cg_xp")
    subs = _parity_split(xp, "cg_sub") if stride == 2 else None
    w2 = _w_gather(w)
    y = np.empty((co, xo, yo, zo), dtype=x.dtype)
    slab = _slab_width(yo * zo * 27 * ci * x.itemsize, xo)
    col = _buf("cg_col", (27 * ci, slab * yo * zo), x.dtype)
    for a in range(0, xo, slab):
        bx = min(a + slab, xo)
        c = col[:, :(bx - a) * yo * zo]
        if stride == 1:
            _gather27_s1(xp, yo, zo, a, bx, c)
        else:
            _gather27_s2(subs, yo, zo, a, bx, c)
        np.matmul(w2, c, out=y[:, a:bx].reshape(co, -1))
    y += b.reshape(co, 1, 1, 1)
    return y


def _conv_gather_backward(x, w, stride, gy):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xo, yo, zo = conv_out_dims((nx, ny, nz), stride)
    xp = _pad1(x, "cg_xp")
    subs = _parity_split(xp, "cg_sub") if stride == 2 else None
    w2 = _w_gather(w)
    gw2 = np.zeros_like(w2)
    slab = _slab_width(yo * zo * 27 * ci * x.itemsize * 2, xo)
    n_max = slab * yo * zo
    col = _buf("cg_col", (27 * ci, n_max), x.dtype)
    dcol = _buf("cg_dcol", (27 * ci, n_max), x.dtype)
    gw_tmp = np.empty_like(gw2)

    if stride == 1:
        gxp = _buf("cg_gxp", xp.shape, x.dtype, zero=True)
    else:
        gsubs = [_buf(f"cg_gsub{i}", s.shape, x.dtype, zero=True)
                 for i, s in enumerate(subs)]

    for a in range(0, xo, slab):
        bx = min(a + slab, xo)
        n = (bx - a) * yo * zo
        c = col[:, :n]
        if stride == 1:
            _gather27_s1(xp, yo, zo, a, bx, c)
        else:
            _gather27_s2(subs, yo, zo, a, bx, c)
        g2 = np.ascontiguousarray(gy[:, a:bx]).reshape(co, -1)
        np.matmul(g2, c.T, out=gw_tmp)
        gw2 += gw_tmp
        d = dcol[:, :n]
        np.matmul(w2.T, g2, out=d)
        k = 0
        for dx, dy, dz in product(range(3), range(3), range(3)):
            blk = d[k * ci:(k + 1) * ci]
            if stride == 1:
                view = gxp[:, a + dx: bx + dx, dy: dy + yo, dz: dz + zo]
            else:
                gs = gsubs[_parity_index(dx, dy, dz)]
                view = gs[:, a + dx // 2: bx + dx // 2,
                          dy // 2: dy // 2 + yo, dz // 2: dz // 2 + zo]
            view += blk.reshape(view.shape)
            k += 1

    if stride == 2:
        gxp = _buf("cg_gxp", xp.shape, x.dtype)
        q = 0
        for qx, qy, qz in product(range(2), range(2), range(2)):
            gxp[:, qx::2, qy::2, qz::2] = gsubs[q]
            q += 1
    gw = gw2.reshape(co, 3, 3, 3, ci).transpose(0, 4, 1, 2, 3)
    gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1])
    gb = gy.sum(axis=(1, 2, 3))
    return gx, np.ascontiguousarray(gw), gb


# --- stride-1 z-fold scheme ---------------------------------------------------

def _wf_zfold(w: np.ndarray) -> np.ndarray:
    """(Co, Ci, 3, 3, 3) -> (9*Co, 3*Ci), rows (dx, dy, co), cols (dz, ci)."""
    co, ci = w.shape[:2]
    return np.ascontiguousarray(w.transpose(2, 3, 0, 4, 1)).reshape(9 * co, 3 * ci)


def _zfold_slab(nx, ny, nz, ci, co, itemsize, back: bool):
    per_row = (ny + 2) * nz * (3 * ci + 9 * co * (2 if back else 1)) * itemsize
    return _slab_width(per_row, nx)


def _zgather(col3, xp, a, bx, nz):
    """col3 row blocks (dz, ci) from z-windows of the padded x-slab.

    The (x, y) extent collapses to one axis so the copy runs as a long
    strided pass with contiguous z-runs.
    """
    ci = xp.shape[0]
    src = xp[:, a:bx + 2].reshape(ci, -1, nz + 2)
    rows = src.shape[1]
    for dz in range(3):
        blk = col3[dz * ci:(dz + 1) * ci].reshape(ci, rows, nz)
        np.copyto(blk, src[:, :, dz:dz + nz])


def _zscatter_add(gxp, dcol3, a, bx, nz):
    ci = gxp.shape[0]
    dst = gxp[:, a:bx + 2].reshape(ci, -1, nz + 2)
    rows = dst.shape[1]
    for dz in range(3):
        blk = dcol3[dz * ci:(dz + 1) * ci].reshape(ci, rows, nz)
        dst[:, :, dz:dz + nz] += blk


def _conv_zfold_forward(x, w, b):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xp = _pad1(x, "zf_xp")
    wf = _wf_zfold(w)
    y = np.empty((co, nx, ny, nz), dtype=x.dtype)
    slab = _zfold_slab(nx, ny, nz, ci, co, x.itemsize, back=False)
    rows_max = (slab + 2) * (ny + 2) * nz
    col3 = _buf("zf_col3", (3 * ci, rows_max), x.dtype)
    g = _buf("zf_g", (9 * co, rows_max), x.dtype)
    for a in range(0, nx, slab):
        bx = min(a + slab, nx)
        gx_rows = bx - a + 2
        ng = gx_rows * (ny + 2) * nz
        c3 = col3[:, :ng]
        _zgather(c3, xp, a, bx, nz)
        gv = g[:, :ng]
        np.matmul(wf, c3, out=gv)
        g6 = gv.reshape(3, 3, co, gx_rows, ny + 2, nz)
        acc = y[:, a:bx]
        np.copyto(acc, g6[0, 0][:, 0:bx - a, 0:ny, :])
        for dx, dy in ((0, 1), (0, 2), (1, 0), (1, 1), (1, 2), (2, 0), (2, 1), (2, 2)):
            acc += g6[dx, dy][:, dx:bx - a + dx, dy:ny + dy, :]
    y += b.reshape(co, 1, 1, 1)
    return y


def _conv_zfold_backward(x, w, gy):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xp = _pad1(x, "zf_xp")
    wf = _wf_zfold(w)
    gwf = np.zeros_like(wf)
    gwf_tmp = np.empty_like(wf)
    gxp = _buf("zf_gxp", xp.shape, x.dtype, zero=True)
    slab = _zfold_slab(nx, ny, nz, ci, co, x.itemsize, back=True)
    rows_max = (slab + 2) * (ny + 2) * nz
    col3 = _buf("zf_col3", (3 * ci, rows_max), x.dtype)
    dg = _buf("zf_dg", (9 * co, rows_max), x.dtype)
    dcol3 = _buf("zf_dcol3", (3 * ci, rows_max), x.dtype)
    for a in range(0, nx, slab):
        bx = min(a + slab, nx)
        gx_rows = bx - a + 2
        ng = gx_rows * (ny + 2) * nz
        c3 = col3[:, :ng]
        _zgather(c3, xp, a, bx, nz)
        dgv = dg[:, :ng]
        dg6 = dgv.reshape(3, 3, co, gx_rows, ny + 2, nz)
        dg6.fill(0)
        gslab = gy[:, a:bx]
        for dx, dy in product(range(3), range(3)):
            dg6[dx, dy][:, dx:bx - a + dx, dy:ny + dy, :] = gslab
        np.matmul(dgv, c3.T, out=gwf_tmp)
        gwf += gwf_tmp
        d3 = dcol3[:, :ng]
        np.matmul(wf.T, dgv, out=d3)
        _zscatter_add(gxp, d3, a, bx, nz)
    gw = gwf.reshape(3, 3, co, 3, ci).transpose(2, 4, 0, 1, 3)
    gx = np.ascontiguousarray(gxp[:, 1:-1, 1:-1, 1:-1])
    gb = gy.sum(axis=(1, 2, 3))
    return gx, np.ascontiguousarray(gw), gb


def _zfold_pays_off(ci: int, co: int) -> bool:
    # Rough traffic comparison: gathered rows 27*Ci vs z-fold's 3*Ci read
    # plus 9*Co written and re-read.
    return 3 * ci + 18 * co < 27 * ci + co


def conv3d_forward(x, w, b, stride: int):
    if stride == 1 and _zfold_pays_off(w.shape[1], w.shape[0]):
        return _conv_zfold_forward(x, w, b)
    if stride in (1, 2):
        return _conv_gather_forward(x, w, b, stride)
    raise ValueError(f"unsupported stride {stride}")


def conv3d_backward(x, w, stride: int, gy):
    if stride == 1 and _zfold_pays_off(w.shape[1], w.shape[0]):
        return _conv_zfold_backward(x, w, gy)
    if stride in (1, 2):
        return _conv_gather_backward(x, w, stride, gy)
    raise ValueError(f"unsupported stride {stride}")


# --- transposed convolution (stride 2, exact doubling) -------------------------

def _axis_taps(q: int):
    # Output index j = 2u + q receives kernel tap d with source offset a:
    # even j: the center tap from u; odd j: the outer taps from u+1 and u.
    return ((1, 0),) if q == 0 else ((0, 1), (2, 0))


def tconv3d_forward(x, w, b):
    ci, nx, ny, nz = x.shape
    co = w.shape[1]
    xh = _buf("tc_xh", (ci, nx + 1, ny + 1, nz + 1), x.dtype, zero=True)
    xh[:, :nx, :ny, :nz] = x
    y = np.empty((co, 2 * nx, 2 * ny, 2 * nz), dtype=x.dtype)
    yv = y.reshape(co, nx, 2, ny, 2, nz, 2)
    slab = _slab_width(ny * nz * 8 * ci * x.itemsize, nx)
    col = _buf("tc_col", (8 * ci, slab * ny * nz), x.dtype)
    ysub = _buf("tc_ysub", (co, slab * ny * nz), x.dtype)
    for qx, qy, qz in product(range(2), range(2), range(2)):
        taps = [(tx, ty, tz) for tx in _axis_taps(qx) for ty in _axis_taps(qy)
                for tz in _axis_taps(qz)]
        wq = np.empty((co, len(taps) * ci), dtype=x.dtype)
        for t, ((dx, _), (dy, _), (dz, _)) in enumerate(taps):
            wq[:, t * ci:(t + 1) * ci] = w[:, :, dx, dy, dz].T
        for a in range(0, nx, slab):
            bx = min(a + slab, nx)
            n = (bx - a) * ny * nz
            c = col[:len(taps) * ci, :n]
            for t, ((_, ax), (_, ay), (_, az)) in enumerate(taps):
                view = xh[:, a + ax: bx + ax, ay: ay + ny, az: az + nz]
                np.copyto(c[t * ci:(t + 1) * ci].reshape(view.shape), view)
            ys = ysub[:, :n]
            np.matmul(wq, c, out=ys)
            yv[:, a:bx, qx, :, qy, :, qz] = ys.reshape(co, bx - a, ny, nz)
    y += b.reshape(co, 1, 1, 1)
    return y


def tconv3d_backward(x, w, gy):
    ci, nx, ny, nz = x.shape
    co = w.shape[1]
    wg = np.ascontiguousarray(w.transpose(2, 3, 4, 1, 0)).reshape(27 * co, ci)
    gypad = _pad1(gy, "tc_gypad")
    gsubs = _parity_split(gypad, "tc_gsub")
    gx = np.empty_like(x)
    gwg = np.zeros_like(wg)
    gwg_tmp = np.empty_like(wg)
    slab = _slab_width(ny * nz * 27 * co * x.itemsize * 2, nx)
    gycol = _buf("tc_gycol", (27 * co, slab * ny * nz), x.dtype)
    for a in range(0, nx, slab):
        bx = min(a + slab, nx)
        n = (bx - a) * ny * nz
        gc = gycol[:, :n]
        _gather27_s2(gsubs, ny, nz, a, bx, gc)
        x2 = x[:, a:bx].reshape(ci, -1)
        np.matmul(wg.T, gc, out=gx[:, a:bx].reshape(ci, -1))
        np.matmul(gc, x2.T, out=gwg_tmp)
        gwg += gwg_tmp
    gw = gwg.reshape(3, 3, 3, co, ci).transpose(4, 3, 0, 1, 2)
    gb = gy.sum(axis=(1, 2, 3))
    return gx, np.ascontiguousarray(gw), gb


# --- elementwise activation -----------------------------------------------------

def leaky_relu_forward(x, slope: float = 0.2):
    mask = x >= 0
    return np.where(mask, x, x * x.dtype.type(slope)), mask


def leaky_relu_backward(mask, slope: float, gy):
    return np.where(mask, gy, gy * gy.dtype.type(slope))


# --- slow reference versions (used by the test suite) ----------------------------

def conv3d_reference(x, w, b, stride: int):
    ci, nx, ny, nz = x.shape
    co = w.shape[0]
    xo, yo, zo = conv_out_dims((nx, ny, nz), stride)
    xp = np.zeros((ci, nx + 2, ny + 2, nz + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    y = np.zeros((co, xo, yo, zo), dtype=x.dtype)
    for dx, dy, dz in product(range(3), range(3), range(3)):
        view = xp[:, dx: (xo - 1) * stride + dx + 1: stride,
                  dy: (yo - 1) * stride + dy + 1: stride,
                  dz: (zo - 1) * stride + dz + 1: stride]
        y += np.einsum("oi,ixyz->oxyz", w[:, :, dx, dy, dz], view)
    return y + b.reshape(co, 1, 1, 1)


def tconv3d_reference(x, w, b):
    ci, nx, ny, nz = x.shape
    co = w.shape[1]
    ypad = np.zeros((co, 2 * nx + 2, 2 * ny + 2, 2 * nz + 2), dtype=x.dtype)
    for dx, dy, dz in product(range(3), range(3), range(3)):
        view = ypad[:, dx: 2 * (nx - 1) + dx + 1: 2,
                    dy: 2 * (ny - 1) + dy + 1: 2,
                    dz: 2 * (nz - 1) + dz + 1: 2]
        view += np.einsum("io,ixyz->oxyz", w[:, :, dx, dy, dz], x)
    return ypad[:, 1:2 * nx + 1, 1:2 * ny + 1, 1:2 * nz + 1] + b.reshape(co, 1, 1, 1)
