"""Angular neighborhoods on the gradient sphere and 4D block assembly.

Each diffusion direction is denoised together with the directions
closest to it on the sphere (antipodal pairs count as identical, and
candidates from every shell compete).  For one target direction the
working unit is a stack of volumes [b0, target, neighbors]; every
spatial ps-cube through that stack, flattened, is one column of a
matrix handed to the sparse coder.  Fast mode keeps only a greedy
set cover of the per-target subsets instead of all of them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .io import GradientTable, Mask3D, Volume4D

__all__ = [
    "BlockConfig",
    "AngularSubset",
    "PatchMatrix",
    "angular_distance",
    "find_neighbors",
    "build_subsets",
    "greedy_set_cover",
    "assemble_block_matrix",
]


@dataclass(frozen=True)
class BlockConfig:
    """Geometry of the 4D blocks.

    patch_size : odd cube edge of the spatial patch (voxels)
    angular_neighbors : directions stacked with each target
    stride : spacing of patch centers along every axis
    """

    patch_size: int = 3
    angular_neighbors: int = 4
    stride: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ValueError("patch_size must be odd and >= 1")
        if self.angular_neighbors < 1:
            raise ValueError("angular_neighbors must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def n_members(self) -> int:
        return self.angular_neighbors + 2

    def column_length(self) -> int:
        return self.patch_size**3 * self.n_members


@dataclass(frozen=True)
class AngularSubset:
    """One denoising unit: volume indices [b0, target, neighbors...]."""

    target: int
    members: tuple

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(int(v) for v in self.members))
        if len(set(self.members)) != len(self.members):
            raise ValueError("subset members must be distinct")
        if len(self.members) < 3:
            raise ValueError("a subset needs a b0, a target and >= 1 neighbor")
        if self.members.count(self.target) != 1 or self.members[1] != self.target:
            raise ValueError("target must appear exactly once, in second position")

    @property
    def dwi_members(self) -> tuple:
        """Members excluding the leading b0: target plus neighbors."""
        return self.members[1:]


def angular_distance(g1, g2) -> float:
    """Angle in [0, pi/2] between two directions, sign ignored.

    Opposite polarities measure the same diffusion direction, so g and
    -g are at distance zero.
    """
    g1 = np.asarray(g1, dtype=np.float64).ravel()
    g2 = np.asarray(g2, dtype=np.float64).ravel()
    if g1.shape != (3,) or g2.shape != (3,):
        raise ValueError("directions must be 3-vectors")
    n1 = np.linalg.norm(g1)
    n2 = np.linalg.norm(g2)
    if n1 < 1e-12 or n2 < 1e-12:
        raise ValueError("zero vector has no direction")
    return float(math.acos(min(abs(float(g1 @ g2)) / (n1 * n2), 1.0)))


def find_neighbors(table: GradientTable, target: int, an: int) -> AngularSubset:
    """Subset for one target: its an closest directions plus the b0.

    Candidates come from every shell; distance ties are broken toward
    the lower volume index.  Raises if the target is a b0 or fewer than
    an other directions exist.
    """
    dwi = table.dwi_indices
    if target not in dwi:
        raise ValueError(f"volume {target} is not a diffusion-weighted direction")
    candidates = dwi[dwi != target]
    if candidates.size < an:
        raise ValueError(
            f"need {an} neighbors but only {candidates.size} other directions exist"
        )
    tvec = table.bvecs[target]
    dists = np.array([angular_distance(tvec, table.bvecs[c]) for c in candidates])
    order = np.lexsort((candidates, dists))  # distance first, then index
    neighbors = candidates[order[:an]]
    b0 = int(table.b0_indices[0])
    return AngularSubset(target=int(target), members=(b0, int(target), *neighbors))


def build_subsets(table: GradientTable, an: int) -> list:
    """One subset per diffusion direction, in volume-index order."""
    return [find_neighbors(table, int(t), an) for t in table.dwi_indices]


def greedy_set_cover(subsets) -> list:
    """Smallest greedy family of subsets whose DWI members cover all targets.

    Repeatedly selects the subset covering the most still-uncovered
    directions, breaking ties toward the lower target index, until every
    direction that appears in any subset is covered.
    """
    subsets = list(subsets)
    if not subsets:
        return []
    universe = set()
    for s in subsets:
        universe.update(s.dwi_members)
    uncovered = set(universe)
    remaining = sorted(subsets, key=lambda s: s.target)
    selected = []
    while uncovered:
        best = max(remaining, key=lambda s: (len(uncovered & set(s.dwi_members)), -s.target))
        gain = len(uncovered & set(best.dwi_members))
        if gain == 0:
            raise ValueError("subsets cannot cover all directions")
        selected.append(best)
        remaining.remove(best)
        uncovered -= set(best.dwi_members)
    return selected


@dataclass
class PatchMatrix:
    """Columns of flattened 4D patches with their geometry.

    data : (m, n) matrix; column j is the patch around centers[j],
        one ps^3 segment per member volume, x varying fastest within
        a segment.
    centers : (n, 3) integer voxel coordinates of the patch centers,
        in scan order (x fastest, then y, then z).
    """

    data: np.ndarray
    centers: np.ndarray
    members: tuple
    config: BlockConfig
    volume_shape: tuple = field(default=())

    @property
    def n_columns(self) -> int:
        return self.data.shape[1]


def assemble_block_matrix(
    vol: Volume4D,
    subset: AngularSubset,
    config: BlockConfig,
    mask: Mask3D | None = None,
) -> PatchMatrix:
    """Extract every masked, fully inside patch of the subset's volumes.

    A patch qualifies when its center lies on the stride grid, the full
    cube fits inside the volume, and the center is inside the mask (no
    mask: everywhere).  Columns follow the scan order of their centers.
    """
    ps = config.patch_size
    radius = ps // 2
    nx, ny, nz = vol.dims
    if min(nx, ny, nz) < ps:
        raise ValueError(f"volume {vol.dims} smaller than patch size {ps}")
    for m in subset.members:
        if not 0 <= m < vol.n_volumes:
            raise ValueError(f"subset references volume {m} of {vol.n_volumes}")

    ax = np.arange(radius, nx - radius, config.stride)
    ay = np.arange(radius, ny - radius, config.stride)
    az = np.arange(radius, nz - radius, config.stride)
    gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
    # x fastest, then y, then z: Fortran ravel of the (x, y, z) grids
    cx = gx.ravel(order="F")
    cy = gy.ravel(order="F")
    cz = gz.ravel(order="F")
    if mask is not None:
        if mask.data.shape != (nx, ny, nz):
            raise ValueError("mask shape does not match the volume")
        keep = mask.data[cx, cy, cz]
        cx, cy, cz = cx[keep], cy[keep], cz[keep]

    n = cx.size
    m_len = config.column_length()
    data = np.empty((m_len, n), dtype=np.float64)
    seg = ps**3
    for i, member in enumerate(subset.members):
        windows = sliding_window_view(vol.data[..., member], (ps, ps, ps))
        patches = windows[cx - radius, cy - radius, cz - radius]
        # flat segment index dx + ps*dy + ps^2*dz requires dx fastest
        data[i * seg : (i + 1) * seg, :] = (
            patches.transpose(0, 3, 2, 1).reshape(n, seg).T
        )
    centers = np.stack([cx, cy, cz], axis=1).astype(np.int64)
    return PatchMatrix(
        data=data,
        centers=centers,
        members=subset.members,
        config=config,
        volume_shape=(nx, ny, nz),
    )
