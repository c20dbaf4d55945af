"""W+ latent codes, the PCA displacement subspace and displacement composition.

A latent code is an ``(L, C)`` array. Codes are flattened row-major to vectors
of length ``D = L * C`` for all subspace arithmetic. Displacements live in the
row span of the basis components; the basis mean is only used when projecting
an absolute code, never when lifting coordinates back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import TOOL_VERSION
from .errors import DataError, DimensionError, RankError

FLATTEN_ORDER = "C"  # numpy row-major


@dataclass(frozen=True)
class PcaBasis:
    components: np.ndarray  # (k, D), orthonormal rows
    mean: np.ndarray  # (D,)
    eigenvalues: np.ndarray  # (k,), nonincreasing
    latent_shape: tuple[int, int]

    def __post_init__(self):
        for name in ("components", "mean", "eigenvalues"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "latent_shape", tuple(int(s) for s in self.latent_shape))
        k, d = self.components.shape
        if self.mean.shape != (d,) or self.eigenvalues.shape != (k,):
            raise DimensionError("basis arrays have inconsistent shapes")
        if int(np.prod(self.latent_shape)) != d:
            raise DimensionError(f"latent shape {self.latent_shape} does not flatten to D={d}")

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def dim(self) -> int:
        return self.components.shape[1]

    def save(self, path: str | Path) -> None:
        header = {
            "k": self.k,
            "L": self.latent_shape[0],
            "C": self.latent_shape[1],
            "flatten_order": "row-major",
            "tool_version": TOOL_VERSION,
        }
        with open(path, "wb") as fh:
            np.savez(
                fh,
                components=self.components,
                mean=self.mean,
                eigenvalues=self.eigenvalues,
                header=np.array(json.dumps(header)),
            )

    @classmethod
    def load(cls, path: str | Path) -> "PcaBasis":
        try:
            with np.load(path, allow_pickle=False) as archive:
                header = json.loads(str(archive["header"]))
                if header.get("flatten_order") != "row-major":
                    raise DataError(f"unsupported flatten order {header.get('flatten_order')!r}")
                return cls(
                    components=archive["components"],
                    mean=archive["mean"],
                    eigenvalues=archive["eigenvalues"],
                    latent_shape=(header["L"], header["C"]),
                )
        except (OSError, KeyError, ValueError) as exc:
            raise DataError(f"cannot read basis file {path}: {exc}") from exc


def _flatten(w: np.ndarray, d: int | None = None) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    flat = w.reshape(-1, order=FLATTEN_ORDER)
    if d is not None and flat.size != d:
        raise DimensionError(f"latent of size {flat.size} incompatible with basis dimension {d}")
    return flat


def _check_shape(w: np.ndarray, basis: PcaBasis) -> None:
    if tuple(np.shape(w)) != basis.latent_shape:
        raise DimensionError(f"latent shape {np.shape(w)} != basis latent shape {basis.latent_shape}")


def numerical_rank(centered: np.ndarray, singular_values: np.ndarray | None = None) -> int:
    if singular_values is None:
        singular_values = np.linalg.svd(centered, compute_uv=False)
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    tol = singular_values[0] * max(centered.shape) * np.finfo(np.float64).eps
    return int(np.sum(singular_values > tol))


def fit_pca(codes: Sequence[np.ndarray] | np.ndarray, k: int | None = None) -> PcaBasis:
    """Top-k principal directions of the flattened codes.

    ``k=None`` selects ``min(512, n - 1, rank)``. Eigenvalues are the sample
    variances (``n - 1`` denominator) along each component.
    """
    codes = np.asarray(codes, dtype=np.float64)
    if codes.ndim != 3:
        raise DimensionError(f"expected a stack of (L, C) codes, got array of shape {codes.shape}")
    n = codes.shape[0]
    latent_shape = codes.shape[1:]
    data = codes.reshape(n, -1, order=FLATTEN_ORDER)
    d = data.shape[1]
    if not np.all(np.isfinite(data)):
        raise DataError("latent codes contain non-finite entries")

    mean = data.mean(axis=0)
    centered = data - mean
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    rank = numerical_rank(centered, s)

    if k is None:
        k = min(512, n - 1, rank)
        if k < 1:
            raise RankError(f"codes are degenerate: achievable rank is {rank}", rank)
    if k < 1 or k > min(n, d):
        raise DimensionError(f"k={k} must lie in [1, min(n_samples={n}, D={d})]")
    if k > rank:
        raise RankError(f"k={k} exceeds the achievable rank {rank} of the centered codes", rank)

    comps = vt[:k].copy()
    # sign convention: largest-magnitude entry of each component is positive
    pivots = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(k), pivots])
    comps *= signs[:, None]
    eig = s[:k] ** 2 / max(n - 1, 1)
    return PcaBasis(components=comps, mean=mean, eigenvalues=eig, latent_shape=latent_shape)


def project(w: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Subspace coordinates ``h = V (flatten(w) - mean)`` of an absolute code."""
    _check_shape(w, basis)
    return basis.components @ (_flatten(w, basis.dim) - basis.mean)


def lift(h: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Displacement ``h . V`` reshaped to a latent code. The mean is not added."""
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (basis.k,):
        raise DimensionError(f"coordinates of shape {h.shape} do not match k={basis.k}")
    return (h @ basis.components).reshape(basis.latent_shape, order=FLATTEN_ORDER)


def compose(w_identity: np.ndarray, h: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Displaced code ``w_I + h . V``."""
    _check_shape(w_identity, basis)
    return np.asarray(w_identity, dtype=np.float64) + lift(h, basis)


def subspace_residual(displacement: np.ndarray, basis: PcaBasis) -> float:
    """Relative norm of the part of a displacement outside span(V)."""
    x = _flatten(displacement, basis.dim)
    norm = np.linalg.norm(x)
    if norm == 0.0:
        return 0.0
    inside = basis.components.T @ (basis.components @ x)
    return float(np.linalg.norm(x - inside) / norm)
