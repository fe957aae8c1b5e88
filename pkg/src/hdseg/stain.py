"""Macenko stain estimation and normalization in optical-density space."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateStains, DimensionMismatch, InvalidConfig, NoTissue
from .types import check_image


@dataclass(frozen=True)
class MacenkoParams:
    io_white: float = 255.0
    beta_od_floor: float = 0.15
    alpha_percentile: float = 1.0
    concentration_percentile: float = 99.0

    def __post_init__(self):
        if not self.io_white > 0:
            raise InvalidConfig("io_white must be > 0")
        if not self.beta_od_floor > 0:
            raise InvalidConfig("beta_od_floor must be > 0")
        if not 0 < self.alpha_percentile < 50:
            raise InvalidConfig("alpha_percentile must lie in (0, 50)")
        if not 0 < self.concentration_percentile <= 100:
            raise InvalidConfig("concentration_percentile must lie in (0, 100]")


@dataclass(frozen=True, eq=False)
class StainProfile:
    """Unit-norm stain OD vectors (3x2, columns) and robust max concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stain_matrix, dtype=np.float64)
        c = np.asarray(self.max_concentrations, dtype=np.float64)
        if s.shape != (3, 2) or c.shape != (2,):
            raise InvalidConfig("stain_matrix must be 3x2 and max_concentrations length 2")
        if np.any(np.abs(np.linalg.norm(s, axis=0) - 1.0) > 1e-9) or np.any(s < 0):
            raise InvalidConfig("stain columns must be non-negative unit vectors")
        if np.any(~(c > 0)):
            raise InvalidConfig("max_concentrations must be > 0")
        object.__setattr__(self, "stain_matrix", s)
        object.__setattr__(self, "max_concentrations", c)

    def to_text(self) -> str:
        values = list(self.stain_matrix.ravel()) + list(self.max_concentrations)
        return "".join(f"{v:.17g}\n" for v in values)

    @classmethod
    def from_text(cls, text: str) -> "StainProfile":
        values = [float(tok) for tok in text.split()]
        if len(values) != 8:
            raise InvalidConfig(f"stain profile needs 8 values, got {len(values)}")
        return cls(np.array(values[:6]).reshape(3, 2), np.array(values[6:]))


def to_optical_density(image, io_white: float = 255.0) -> np.ndarray:
    """Per-pixel OD ``-log10(max(I, 1) / io_white)``, shape ``(H, W, 3)``."""
    if not io_white > 0:
        raise InvalidConfig("io_white must be > 0")
    img = np.asarray(image, dtype=np.float64)
    if img.shape[-1] != 3:
        raise DimensionMismatch(f"expected RGB samples in the last axis, got shape {img.shape}")
    return -np.log10(np.maximum(img, 1.0) / io_white)


def _tissue(od: np.ndarray, floor: float) -> np.ndarray:
    return np.linalg.norm(od, axis=-1) >= floor


def solve_concentrations(od: np.ndarray, stain_matrix: np.ndarray, nonneg: bool = True) -> np.ndarray:
    """Least-squares stain concentrations for OD rows ``(n, 3)`` -> ``(n, 2)``.

    With ``nonneg`` the two-variable NNLS is solved exactly: when the
    unconstrained solution has a negative entry the optimum lies on a face
    of the orthant, so both single-stain candidates are tried and the one
    with the smaller residual wins.
    """
    s = np.asarray(stain_matrix, dtype=np.float64)
    od = np.asarray(od, dtype=np.float64).reshape(-1, 3)
    conc = od @ np.linalg.pinv(s).T
    if not nonneg:
        return conc
    bad = np.any(conc < 0, axis=1)
    if bad.any():
        sub = od[bad]
        norms = np.einsum("ij,ij->j", s, s)
        single = np.clip(sub @ s / norms, 0.0, None)  # (m, 2): each stain alone
        cand0 = np.stack([single[:, 0], np.zeros(len(sub))], axis=1)
        cand1 = np.stack([np.zeros(len(sub)), single[:, 1]], axis=1)
        r0 = np.sum((sub - cand0 @ s.T) ** 2, axis=1)
        r1 = np.sum((sub - cand1 @ s.T) ** 2, axis=1)
        conc[bad] = np.where((r0 <= r1)[:, None], cand0, cand1)
    return conc


def estimate_stain_profile(image, params: MacenkoParams = MacenkoParams(), nonneg: bool = True) -> StainProfile:
    """Estimate the two stain vectors of ``image`` with Macenko's angular method."""
    od = to_optical_density(check_image(image, channels=3), params.io_white).reshape(-1, 3)
    od = od[_tissue(od, params.beta_od_floor)]
    if len(od) < 2:
        raise NoTissue("fewer than two pixels exceed the optical-density floor")

    evals, evecs = np.linalg.eigh(np.cov(od, rowvar=False))
    plane = evecs[:, [2, 1]]  # eigh sorts ascending
    if evals[2] <= 0 or evals[1] <= 1e-12 * evals[2]:
        raise DegenerateStains("optical densities do not span a plane")
    # orient axes so tissue OD projects with positive coordinates
    plane = plane * np.where(od.mean(axis=0) @ plane < 0, -1.0, 1.0)
    if plane[:, 1].sum() < 0:
        plane[:, 1] = -plane[:, 1]
    proj = od @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [params.alpha_percentile, 100.0 - params.alpha_percentile])
    if hi - lo < 1e-6:
        raise DegenerateStains(f"stain angle spread {hi - lo:.3g} rad is too small")

    vecs = []
    for angle in (lo, hi):
        v = plane @ np.array([np.cos(angle), np.sin(angle)])
        if v.sum() < 0:
            v = -v
        v = np.clip(v, 0.0, None)
        vecs.append(v / np.linalg.norm(v))
    vecs.sort(key=lambda v: (v[0], v[1]), reverse=True)
    stains = np.stack(vecs, axis=1)

    conc = solve_concentrations(od, stains, nonneg=nonneg)
    max_c = np.percentile(conc, params.concentration_percentile, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateStains("a stain has no positive concentration")
    return StainProfile(stains, max_c)


def normalize_od(od: np.ndarray, source: StainProfile, reference: StainProfile,
                 nonneg: bool = True) -> np.ndarray:
    """Map OD rows from the source stain basis onto the reference one."""
    shape = od.shape
    conc = solve_concentrations(od.reshape(-1, 3), source.stain_matrix, nonneg=nonneg)
    conc *= reference.max_concentrations / source.max_concentrations
    return (conc @ reference.stain_matrix.T).reshape(shape)


def normalize_to_reference(image, source: StainProfile, reference: StainProfile,
                           params: MacenkoParams = MacenkoParams(), nonneg: bool = True) -> np.ndarray:
    """Re-render ``image`` with the reference stain appearance.

    Background pixels (OD norm below the floor) are copied through.
    """
    img = check_image(image, channels=3)
    od = to_optical_density(img, params.io_white)
    tissue = _tissue(od, params.beta_od_floor)
    out = img.copy()
    if tissue.any():
        new_od = normalize_od(od[tissue], source, reference, nonneg=nonneg)
        rgb = params.io_white * np.power(10.0, -new_od)
        out[tissue] = np.clip(np.floor(rgb + 0.5), 0, 255).astype(np.uint8)
    return out
