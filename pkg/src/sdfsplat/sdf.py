"""The implicit surface: multiresolution hash-grid encoding plus a small
coordinate network, with numerical gradients and curvature.

Geometry: the scene lives in the unit ball; the network output is
parameterized as ``(||x|| - r_init) + residual`` with a near-zero residual
head, so a fresh network is an almost exact sphere SDF (geometric init).

Levels are activated coarse-to-fine; inactive levels contribute exactly
zero and their feature tables stay frozen at zero until activated.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Value, ContractViolation, concat, _nary

# spatial-hash primes, XOR-combined per axis
_PRIMES = (np.uint64(73856093), np.uint64(19349663), np.uint64(83492791))


def _interp_gather(table: Value, slots, weights):
    """Fused sum_k table[slots[n,k]] * weights[n,k] -> (N, F) in one op."""
    def fwd(tab):
        return np.einsum("nkf,nk->nf", tab[slots], weights)

    def bwd(g, y, tab):
        contrib = (g[:, None, :] * weights[:, :, None]).reshape(-1, tab.shape[1])
        flat = slots.ravel()
        out = np.empty_like(tab)
        for j in range(tab.shape[1]):
            out[:, j] = np.bincount(flat, weights=contrib[:, j],
                                    minlength=tab.shape[0])
        return (out,)

    return _nary([table], fwd, bwd, "interp_gather")


@dataclass
class SdfConfig:
    levels: int = 8
    features: int = 2
    table_size: int = 2 ** 14
    base_res: int = 16
    max_res: int = 512
    hidden: int = 64
    geo_feat: int = 15
    color_hidden: int = 32
    color_layers: int = 4
    r_init: float = 0.4
    activation: str = "relu"          # or "softplus" (beta 100)
    softplus_beta: float = 100.0
    active_levels_init: int = 2

    def resolutions(self):
        if self.levels == 1:
            return [self.base_res]
        b = np.exp((np.log(self.max_res) - np.log(self.base_res))
                   / (self.levels - 1))
        return [int(np.floor(self.base_res * b ** l)) for l in range(self.levels)]


class SdfNetwork:
    """Hash-grid encoding + single-hidden-layer SDF head + 4-layer color head."""

    def __init__(self, cfg: SdfConfig = None, seed=0):
        self.cfg = cfg or SdfConfig()
        c = self.cfg
        rng = np.random.default_rng(seed)
        self.resolutions = c.resolutions()
        self.active_levels = min(c.active_levels_init, c.levels)

        self.params: dict[str, np.ndarray] = {}
        for l, res in enumerate(self.resolutions):
            n = min((res + 1) ** 3, c.table_size)
            if l < self.active_levels:
                tab = rng.uniform(-1e-4, 1e-4, size=(n, c.features))
            else:
                tab = np.zeros((n, c.features))
            self.params[f"table{l}"] = tab

        in_dim = 3 + c.levels * c.features
        self.params["w0"] = rng.normal(0, np.sqrt(2.0 / in_dim),
                                       (in_dim, c.hidden))
        self.params["b0"] = np.zeros(c.hidden)
        self.params["w1"] = rng.normal(0, 1e-4, (c.hidden, 1 + c.geo_feat))
        self.params["b1"] = np.zeros(1 + c.geo_feat)

        cin = 9 + c.geo_feat
        dims = [cin] + [c.color_hidden] * (c.color_layers - 1) + [3]
        for i in range(c.color_layers):
            self.params[f"cw{i}"] = rng.normal(0, np.sqrt(2.0 / dims[i]),
                                               (dims[i], dims[i + 1]))
            self.params[f"cb{i}"] = np.zeros(dims[i + 1])

    # ---- parameter binding -------------------------------------------------

    def bind(self, tape: Tape):
        """Leaf Values for all parameters on `tape` (shared array refs)."""
        return {k: tape.leaf(v, name=k) for k, v in self.params.items()}

    def grad_eps(self):
        """Numerical-gradient step: cell size of the finest active level."""
        return 2.0 / self.resolutions[self.active_levels - 1]

    # ---- coarse-to-fine ------------------------------------------------------

    def activate_level(self, level):
        """Enable the next resolution level; must be called in order."""
        if level >= self.cfg.levels:
            raise ContractViolation(f"level {level} beyond {self.cfg.levels}")
        if level != self.active_levels:
            raise ContractViolation(
                f"levels activate in order (expected {self.active_levels})")
        self.active_levels += 1

    # ---- encoding -------------------------------------------------------------

    _CORNER_BITS = np.array([[(c >> 2) & 1, (c >> 1) & 1, c & 1]
                             for c in range(8)], dtype=np.int64)

    def _level_lookup(self, l, x_np):
        """Corner slots and trilinear weights of level `l` for points x_np."""
        res = self.resolutions[l]
        u = (x_np + 1.0) * (0.5 * res)
        ix = np.floor(u)
        np.clip(ix, 0, res - 1, out=ix)
        frac = u - ix
        ixi = ix.astype(np.int64)
        n = x_np.shape[0]
        slots = np.empty((n, 8), dtype=np.int64)
        if (res + 1) ** 3 <= self.cfg.table_size:
            base = (ixi[:, 0] * (res + 1) + ixi[:, 1]) * (res + 1) + ixi[:, 2]
            offs = (self._CORNER_BITS[:, 0] * (res + 1)
                    + self._CORNER_BITS[:, 1]) * (res + 1) + self._CORNER_BITS[:, 2]
            np.add(base[:, None], offs[None, :], out=slots)
        else:
            T = np.uint64(self.cfg.table_size)
            hx = [ixi[:, 0].astype(np.uint64) * _PRIMES[0],
                  (ixi[:, 0] + 1).astype(np.uint64) * _PRIMES[0]]
            hy = [ixi[:, 1].astype(np.uint64) * _PRIMES[1],
                  (ixi[:, 1] + 1).astype(np.uint64) * _PRIMES[1]]
            hz = [ixi[:, 2].astype(np.uint64) * _PRIMES[2],
                  (ixi[:, 2] + 1).astype(np.uint64) * _PRIMES[2]]
            for c, (bx, by, bz) in enumerate(self._CORNER_BITS):
                slots[:, c] = ((hx[bx] ^ hy[by] ^ hz[bz]) % T).astype(np.int64)
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz
        wx_gy = gx * gy
        wx_fy = gx * fy
        fx_gy = fx * gy
        fx_fy = fx * fy
        weights = np.empty((n, 8))
        weights[:, 0] = wx_gy * gz
        weights[:, 1] = wx_gy * fz
        weights[:, 2] = wx_fy * gz
        weights[:, 3] = wx_fy * fz
        weights[:, 4] = fx_gy * gz
        weights[:, 5] = fx_gy * fz
        weights[:, 6] = fx_fy * gz
        weights[:, 7] = fx_fy * fz
        return slots, weights

    def encode(self, tape: Tape, P, x):
        """Multi-level feature encoding (N, levels*features).

        `x` is an (N,3) ndarray (constant sample positions) or a Value;
        a Value routes position gradients through the interpolation weights.
        """
        c = self.cfg
        x_np = x.data if isinstance(x, Value) else np.asarray(x, float)
        feats = []
        for l in range(c.levels):
            if l >= self.active_levels:
                feats.append(tape.constant(
                    np.zeros((x_np.shape[0], c.features))))
                continue
            slots, weights = self._level_lookup(l, x_np)
            if isinstance(x, Value):
                fv = P[f"table{l}"].gather(slots)        # (N, 8, F)
                w = self._weights_on_tape(tape, x, l)
                feats.append((fv * w).sum(axis=1))
            else:
                feats.append(_interp_gather(P[f"table{l}"], slots, weights))
        return concat(feats, axis=-1)

    def _weights_on_tape(self, tape, x, l):
        """Trilinear weights as (N, 8, 1) Values (position-differentiable)."""
        res = self.resolutions[l]
        u = x * (0.5 * res) + (0.5 * res)
        ix = np.clip(np.floor(u.data).astype(np.int64), 0, res - 1)
        frac = u - tape.constant(ix.astype(np.float64))
        parts = []
        one = tape.constant(1.0)
        fx, fy, fz = frac[:, 0], frac[:, 1], frac[:, 2]
        for c in range(8):
            bx, by, bz = (c >> 2) & 1, (c >> 1) & 1, c & 1
            wx = fx if bx else one - fx
            wy = fy if by else one - fy
            wz = fz if bz else one - fz
            parts.append(wx * wy * wz)
        from .autodiff import stack
        return stack(parts, axis=1).reshape(x.data.shape[0], 8, 1)

    # ---- heads ----------------------------------------------------------------

    def sdf_head(self, tape: Tape, P, x):
        """(sdf, geometry feature) at points `x`; both live on `tape`."""
        x_np = x.data if isinstance(x, Value) else np.asarray(x, float)
        enc = self.encode(tape, P, x)
        xin = x if isinstance(x, Value) else tape.constant(x_np)
        pre = concat([xin, enc], axis=-1).matmul(P["w0"]) + P["b0"]
        h = pre.relu() if self.cfg.activation == "relu" \
            else pre.softplus(self.cfg.softplus_beta)
        out = h.matmul(P["w1"]) + P["b1"]
        if isinstance(x, Value):
            bias = x.norm(axis=-1) - self.cfg.r_init
        else:
            bias = tape.constant(np.linalg.norm(x_np, axis=-1) - self.cfg.r_init)
        f = out[:, 0] + bias
        return f, out[:, 1:]

    def color_head(self, tape: Tape, P, x, normal, view_dir, feat):
        """RGB in (0,1) from position, normal, view direction, geometry feature."""
        xs = [tape._coerce(x), tape._coerce(normal), tape._coerce(view_dir), feat]
        h = concat(xs, axis=-1)
        for i in range(self.cfg.color_layers - 1):
            h = (h.matmul(P[f"cw{i}"]) + P[f"cb{i}"]).relu()
        i = self.cfg.color_layers - 1
        return (h.matmul(P[f"cw{i}"]) + P[f"cb{i}"]).sigmoid()

    # ---- plain-array evaluation ---------------------------------------------

    def f_np(self, x, chunk=32768):
        """SDF values as a plain array (throwaway tapes, chunked)."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(x.shape[0])
        for i in range(0, x.shape[0], chunk):
            tape = Tape()
            P = {k: tape.constant(v) for k, v in self.params.items()}
            f, _ = self.sdf_head(tape, P, clamp_to_ball(x[i:i + chunk]))
            out[i:i + chunk] = f.data
        return out

    def grad_np(self, x, eps=None):
        from .fields import numerical_gradient
        return numerical_gradient(self.f_np, x, eps or self.grad_eps())


def clamp_to_ball(x):
    """Project points outside the unit ball onto its surface."""
    x = np.asarray(x, dtype=np.float64)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.where(n > 1.0, x / np.maximum(n, 1e-12), x)


def sdf_eval(net: SdfNetwork, x):
    """(sdf, geometry feature) arrays at points x (clamped to the unit ball)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tape = Tape()
    P = {k: tape.constant(v) for k, v in net.params.items()}
    f, feat = net.sdf_head(tape, P, clamp_to_ball(x))
    return f.data, feat.data


def sdf_gradient(field, x, eps=None):
    """Central-difference gradient of any field exposing f_np."""
    from .fields import numerical_gradient
    if eps is None:
        eps = field.grad_eps() if isinstance(field, SdfNetwork) else 1e-4
    return numerical_gradient(field.f_np, x, eps)


def sdf_curvature(field, x, eps=None):
    """Absolute discrete Laplacian of any field exposing f_np."""
    from .fields import numerical_curvature
    if eps is None:
        eps = field.grad_eps() if isinstance(field, SdfNetwork) else 1e-3
    return numerical_curvature(field.f_np, x, eps)
