"""Reassembly of denoised patch columns and the end-to-end pipeline.

Every voxel of every member volume is covered by many overlapping
patches, each carrying its own denoised values and a sparsity count.
Aggregation takes a weighted mean per voxel; by default sparser blocks
(fewer coefficients) weigh more, via 1/(1 + count).  The printed form
of the source formula weighs denser blocks more; that literal reading
stays available behind a flag.  Each diffusion direction then receives
the unweighted average of its estimates across all subsets containing
it, and negative values are clamped to zero at the end.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .blocks import (
    AngularSubset,
    BlockConfig,
    PatchMatrix,
    assemble_block_matrix,
    build_subsets,
    greedy_set_cover,
)
from .io import GradientTable, Mask3D, Volume4D
from .noise import NoiseField
from .sparse import Dictionary, PenaltyRule, encode_bounded, train_dictionary
from .stabilization import stabilize_volume

__all__ = [
    "aggregate_blocks",
    "average_subset_outputs",
    "nlsam_denoise",
    "DenoiseConfig",
]

log = logging.getLogger(__name__)


def aggregate_blocks(
    values: np.ndarray,
    l0_counts: np.ndarray,
    centers: np.ndarray,
    config: BlockConfig,
    volume_shape,
    n_members: int,
    fallback: np.ndarray | None = None,
    literal_weights: bool = False,
):
    """Weighted per-voxel mean of overlapping denoised patches.

    Parameters
    ----------
    values : ndarray, shape (m, n)
        Denoised columns, same layout as the assembled matrix.
    l0_counts : ndarray, shape (n,)
        Nonzero-coefficient count of each column's code.
    centers : ndarray, shape (n, 3)
    config : BlockConfig
    volume_shape : (X, Y, Z)
    n_members : number of member volumes in each column
    fallback : ndarray (X, Y, Z, n_members), optional
        Values for voxels no block covers; zero if omitted.
    literal_weights : bool
        False (default): weight 1/(1 + l0), favoring sparser blocks.
        True: weight (1 + l0), the printed form of the source formula.

    Returns
    -------
    ndarray, shape (X, Y, Z, n_members)
    """
    values = np.asarray(values, dtype=np.float64)
    l0_counts = np.asarray(l0_counts, dtype=np.float64)
    centers = np.asarray(centers)
    ps = config.patch_size
    seg = ps**3
    m, n = values.shape
    if m != seg * n_members:
        raise ValueError("column length does not match the geometry")
    if centers.shape != (n, 3) or l0_counts.shape != (n,):
        raise ValueError("centers and counts must match the column count")
    nx, ny, nz = volume_shape

    if literal_weights:
        w = 1.0 + l0_counts
    else:
        w = 1.0 / (1.0 + l0_counts)

    radius = ps // 2
    nvox = nx * ny * nz
    out = np.empty((nx, ny, nz, n_members), dtype=np.float64)
    if n == 0:
        if fallback is None:
            out[:] = 0.0
        else:
            out[:] = fallback
        return out

    # linear index per (row within segment, column): x + X*(y + Y*z)
    base = (
        (centers[:, 0] - radius)
        + nx * ((centers[:, 1] - radius) + ny * (centers[:, 2] - radius))
    ).astype(np.int64)
    offsets = np.empty(seg, dtype=np.int64)
    for dz in range(ps):
        for dy in range(ps):
            for dx in range(ps):
                offsets[dx + ps * dy + ps * ps * dz] = dx + nx * (dy + ny * dz)

    den = np.zeros(nvox, dtype=np.float64)
    for r in range(seg):
        den += np.bincount(base + offsets[r], weights=w, minlength=nvox)
    for v in range(n_members):
        num = np.zeros(nvox, dtype=np.float64)
        rows = values[v * seg : (v + 1) * seg]
        for r in range(seg):
            num += np.bincount(base + offsets[r], weights=w * rows[r], minlength=nvox)
        covered = den > 0
        plane = np.empty(nvox, dtype=np.float64)
        if fallback is None:
            plane[:] = 0.0
        else:
            plane[:] = fallback[..., v].reshape(nvox, order="F")
        plane[covered] = num[covered] / den[covered]
        out[..., v] = plane.reshape((nx, ny, nz), order="F")
    return out


def average_subset_outputs(
    subset_results,
    n_volumes: int,
    volume_shape,
    fallback: np.ndarray | None = None,
):
    """Unweighted mean of each volume's estimates across subsets.

    subset_results : iterable of (AngularSubset, ndarray (X, Y, Z, n_members))
        Aggregated member images per subset, member order matching
        ``subset.members``.
    Volumes never appearing in any subset keep their fallback values
    (or zero).  Returns (data4d, counts) where counts[v] is the number
    of estimates averaged into volume v.
    """
    nx, ny, nz = volume_shape
    acc = np.zeros((nx, ny, nz, n_volumes), dtype=np.float64)
    counts = np.zeros(n_volumes, dtype=np.int64)
    for subset, member_images in subset_results:
        if member_images.shape != (nx, ny, nz, len(subset.members)):
            raise ValueError("subset result shape mismatch")
        for i, vol_idx in enumerate(subset.members):
            acc[..., vol_idx] += member_images[..., i]
            counts[vol_idx] += 1
    covered = counts > 0
    acc[..., covered] /= counts[covered]
    if fallback is not None:
        acc[..., ~covered] = fallback[..., ~covered]
    return acc, counts


@dataclass(frozen=True)
class DenoiseConfig:
    """Pipeline switches beyond the block geometry."""

    block: BlockConfig = BlockConfig()
    stabilize: bool = True
    fast_mode: bool = False
    global_dictionary: bool = False
    literal_weights: bool = False
    epochs: int = 150
    n_atoms: int | None = None
    n_threads: int = 1
    seed: int = 0


def _denoise_one_subset(
    work_data,
    subset,
    cfg: DenoiseConfig,
    mask,
    field,
    rule,
    shared_dict,
    vol_template,
):
    """Assemble, code and aggregate a single subset; pure per subset."""
    vol = Volume4D(work_data, spacing=vol_template.spacing, header=None)
    pm = assemble_block_matrix(vol, subset, cfg.block, mask)
    if pm.n_columns == 0:
        return subset, None
    subset_seed = int(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(subset.target,)).generate_state(1)[0])
    if shared_dict is not None:
        dictionary = shared_dict
    else:
        dictionary = train_dictionary(
            pm.data,
            n_atoms=cfg.n_atoms,
            epochs=cfg.epochs,
            seed=subset_seed,
        )
    sig = field.sigma[pm.centers[:, 0], pm.centers[:, 1], pm.centers[:, 2]]
    code = encode_bounded(dictionary, pm.data, sig**2, seed=subset_seed, rule=rule)
    denoised = dictionary.atoms @ code.coefficients
    fallback = np.stack([work_data[..., m] for m in subset.members], axis=3)
    images = aggregate_blocks(
        denoised,
        code.nnz,
        pm.centers,
        cfg.block,
        pm.volume_shape,
        len(subset.members),
        fallback=fallback,
        literal_weights=cfg.literal_weights,
    )
    return subset, images


def nlsam_denoise(
    vol: Volume4D,
    table: GradientTable,
    field: NoiseField,
    config: DenoiseConfig | None = None,
    mask: Mask3D | None = None,
    rule: PenaltyRule | None = None,
) -> Volume4D:
    """Full pipeline: stabilize, match, code per subset, reassemble.

    Multiple b0 volumes are averaged into one synthetic b0 used by all
    subsets, and that denoised b0 is written back to every b0 position.
    The result has the input's dimensions and is clamped at zero.
    """
    cfg = config or DenoiseConfig()
    rule = rule or PenaltyRule()
    if field.sigma.shape != vol.dims:
        raise ValueError("noise field shape does not match the volume")
    if table.bvals.shape[0] != vol.n_volumes:
        raise ValueError("gradient table does not match the volume count")

    t0 = time.monotonic()
    work = vol.data.astype(np.float64, copy=True)
    b0s = table.b0_indices
    first_b0 = int(b0s[0])
    if b0s.size > 1:
        work[..., first_b0] = work[..., b0s].mean(axis=3)
        log.info("averaged %d b0 volumes into one reference", b0s.size)

    if cfg.stabilize:
        work = stabilize_volume(
            Volume4D(work, spacing=vol.spacing), field
        ).data
        log.info("stabilization done at %.1fs", time.monotonic() - t0)

    subsets = build_subsets(table, cfg.block.angular_neighbors)
    if cfg.fast_mode:
        subsets = greedy_set_cover(subsets)
        log.info("fast mode: %d of %d subsets selected", len(subsets), len(table.dwi_indices))

    shared_dict = None
    if cfg.global_dictionary:
        pieces = []
        for s in subsets:
            pm = assemble_block_matrix(Volume4D(work, spacing=vol.spacing), s, cfg.block, mask)
            pieces.append(pm.data)
        shared_dict = train_dictionary(
            np.concatenate(pieces, axis=1),
            n_atoms=cfg.n_atoms,
            epochs=cfg.epochs,
            seed=cfg.seed,
        )
        log.info("global dictionary trained at %.1fs", time.monotonic() - t0)

    args = [
        (work, s, cfg, mask, field, rule, shared_dict, vol)
        for s in subsets
    ]
    if cfg.n_threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.n_threads) as pool:
            results = list(pool.map(lambda a: _denoise_one_subset(*a), args))
    else:
        results = [_denoise_one_subset(*a) for a in args]
    results = [(s, img) for s, img in results if img is not None]
    log.info("%d subsets denoised at %.1fs", len(results), time.monotonic() - t0)

    out, counts = average_subset_outputs(
        results, vol.n_volumes, vol.dims, fallback=work
    )
    # the synthetic b0 estimate goes to every b0 position
    if b0s.size > 1:
        for b in b0s:
            out[..., int(b)] = out[..., first_b0]
    np.maximum(out, 0.0, out=out)
    log.info("pipeline finished in %.1fs", time.monotonic() - t0)
    return Volume4D(out, spacing=vol.spacing, header=vol.header)
