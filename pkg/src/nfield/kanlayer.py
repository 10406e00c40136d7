"""B-spline basis evaluation and the spline-edge layer used by the reconstructor.

Each edge (p, q) of the layer carries a learnable univariate function
phi_{q,p}(u) = base[q,p] * silu(u) + sum_j coeffs[q,p,j] * B_j(u), where B_j
are degree-k B-splines on a uniform extended knot grid over [-1, 1]; node q
sums its incoming edge activations. Inputs outside the knot range are clamped
(part of the contract; keeps gradients bounded).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffcore import Value, _accum, add, matmul, reshape, silu, transpose


@dataclass(frozen=True)
class SplineConfig:
    degree: int = 3  # k
    grid_size: int = 5  # G intervals over [x_min, x_max]
    x_min: float = -1.0
    x_max: float = 1.0

    def __post_init__(self):
        if self.degree < 0:
            raise ValueError("degree must be >= 0")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.degree

    @property
    def h(self) -> float:
        return (self.x_max - self.x_min) / self.grid_size

    def knots(self) -> np.ndarray:
        """Uniform knot vector extended degree-many steps past each end."""
        k, g = self.degree, self.grid_size
        return self.x_min + (np.arange(g + 2 * k + 1) - k) * self.h


def _basis_core(u: np.ndarray, cfg: SplineConfig, with_derivative: bool):
    """Cox-de Boor on clamped inputs, computed on the local support only.

    On a uniform knot grid a point in interior cell c has exactly degree+1
    nonzero basis functions, at columns c..c+degree of the [..., n_basis]
    layout; the recursion runs on that window (with local parameter
    t = (u - x_min)/h - c) and the result is scattered into the full matrix.
    Returns (basis[..., n_basis], d_basis or None, in_range_mask).
    """
    k, g, h = cfg.degree, cfg.grid_size, cfg.h
    u_raw = np.asarray(u, dtype=np.float64)
    in_range = (u_raw >= cfg.x_min) & (u_raw <= cfg.x_max)
    uc = np.clip(u_raw, cfg.x_min, cfg.x_max)
    cell = np.clip(np.floor((uc - cfg.x_min) / h), 0, g - 1)
    t = ((uc - cfg.x_min) / h - cell)[..., None]
    # local window: b[j] = B_{c+j, d}; recurrence in local coordinates is
    # b_d[j] = ((t + d - j)/d) b_{d-1}[j-1] + ((1 + j - t)/d) b_{d-1}[j]
    b = np.ones(u_raw.shape + (1,))
    prev = None
    for d in range(1, k + 1):
        prev = b
        b = np.zeros(u_raw.shape + (d + 1,))
        j = np.arange(d + 1)
        b[..., 1:] = (t + (d - j[1:])) * prev
        b[..., :d] += ((1 + j[:d]) - t) * prev
        b /= d
    idx = cell.astype(np.int64)[..., None] + np.arange(k + 1)
    basis = np.zeros(u_raw.shape + (cfg.n_basis,))
    np.put_along_axis(basis, idx, b, axis=-1)
    if not with_derivative:
        return basis, None, in_range
    d_basis = np.zeros_like(basis)
    if k > 0:
        # dB_{i,k}/du = (B_{i,k-1} - B_{i+1,k-1}) / h for uniform knots
        local = np.empty(u_raw.shape + (k + 1,))
        local[..., 0] = -prev[..., 0]
        local[..., 1:k] = prev[..., : k - 1] - prev[..., 1:k]
        local[..., k] = prev[..., k - 1]
        np.put_along_axis(d_basis, idx, local / h, axis=-1)
    return basis, d_basis, in_range


def bspline_basis(u, cfg: SplineConfig) -> np.ndarray:
    """Basis values at u (scalar or array); shape [..., grid_size + degree]."""
    basis, _, _ = _basis_core(np.asarray(u, dtype=np.float64), cfg, False)
    return basis


def spline_basis(x, cfg: SplineConfig) -> Value:
    """Differentiable basis evaluation; gradient is zero outside the clamp range."""
    xv = x if isinstance(x, Value) else Value(x)
    basis, d_basis, in_range = _basis_core(xv.data, cfg, True)

    def bwd(out):
        _accum(xv, (out.grad * d_basis).sum(axis=-1) * in_range)

    return Value(basis, (xv,), bwd)


@dataclass
class KanLayerParams:
    """Learnable pieces of one layer; arrays live in `Value`s so they train."""

    spline_coeffs: Value  # [c_out, c_in, n_basis]
    base_weights: Value  # [c_out, c_in]
    config: SplineConfig

    def __post_init__(self):
        c_out, c_in, nb = self.spline_coeffs.data.shape
        if nb != self.config.n_basis:
            raise ValueError(
                f"spline_coeffs last dim {nb} != n_basis {self.config.n_basis}"
            )
        if self.base_weights.data.shape != (c_out, c_in):
            raise ValueError(
                f"base_weights shape {self.base_weights.data.shape} != {(c_out, c_in)}"
            )


def init_kan_layer(
    c_in: int, c_out: int, cfg: SplineConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Spline coefficients ~ N(0, 0.1/sqrt(c_in)); base weights like a dense layer."""
    coeffs = rng.normal(0.0, 0.1 / np.sqrt(c_in), size=(c_out, c_in, cfg.n_basis))
    bound = 1.0 / np.sqrt(c_in)
    base = rng.uniform(-bound, bound, size=(c_out, c_in))
    return coeffs, base


def kan_layer_forward(x, params: KanLayerParams) -> Value:
    """[n, c_in] -> [n, c_out]; differentiable in x and both parameter blocks."""
    xv = x if isinstance(x, Value) else Value(x)
    if xv.data.ndim != 2:
        raise ValueError(f"kan_layer_forward expects [n, c_in], got {xv.data.shape}")
    c_out, c_in, nb = params.spline_coeffs.data.shape
    if xv.data.shape[1] != c_in:
        raise ValueError(
            f"kan_layer_forward: input width {xv.data.shape[1]} != c_in {c_in}"
        )
    basis = spline_basis(xv, params.config)  # [n, c_in, nb]
    flat = reshape(basis, (-1, c_in * nb))
    spline_out = matmul(flat, transpose(reshape(params.spline_coeffs, (c_out, c_in * nb))))
    base_out = matmul(silu(xv), transpose(params.base_weights))
    return add(spline_out, base_out)


def kan_param_count(c_in: int, c_out: int, cfg: SplineConfig) -> int:
    """Spline coefficients plus per-edge base scale."""
    return c_out * c_in * cfg.n_basis + c_out * c_in
