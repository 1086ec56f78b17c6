"""Superpixel segmentation and the sparse structures built on top of it.

The scene model tracks three pixels per superpixel (an anchor triple) and a
k-nearest-neighbor rigidity graph over the anchors. Both are selected by
deterministic rules so a fixed input always yields the same structures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.segmentation import slic as _skimage_slic

from .datatypes import Image
from .errors import DegenerateSuperpixelError, DomainError

logger = logging.getLogger(__name__)

# Structuring element for 4-connectivity (no diagonals).
FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

MIN_TRIANGLE_AREA = 0.5  # px^2, non-collinearity threshold for triples


@dataclass
class Segmentation:
    """Dense superpixel labels: (H, W) int array with labels 0..count-1."""

    labels: np.ndarray
    count: int

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DomainError(f"labels must be 2D, got shape {lab.shape}")
        if lab.size == 0:
            raise DomainError("labels must be non-empty")
        lab = lab.astype(np.int32, copy=False)
        lo, hi = int(lab.min()), int(lab.max())
        if lo < 0 or hi >= self.count:
            raise DomainError(
                f"labels must lie in [0, {self.count}), found range [{lo}, {hi}]"
            )
        used = np.bincount(lab.ravel(), minlength=self.count) > 0
        if not used.all():
            missing = int(np.flatnonzero(~used)[0])
            raise DomainError(f"label {missing} is unused")
        self.labels = lab

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass
class AnchorTriple:
    """Three pixels of one superpixel: anchor, farthest point, area maximizer.

    Pixel coordinates are (u, v) float arrays holding integer positions.
    """

    label: int
    anchor: np.ndarray
    p1: np.ndarray
    p2: np.ndarray

    def pixels(self) -> np.ndarray:
        """(3, 2) array of the triple's pixel coordinates."""
        return np.stack([self.anchor, self.p1, self.p2])


@dataclass
class RigidityGraph:
    """Directed k-NN graph over superpixel anchors.

    ``neighbors[i]`` and ``weights[i]`` are aligned arrays: the anchors
    nearest to anchor i (ties broken by lower index) and their
    exp(-distance/tau) weights.
    """

    neighbors: list
    weights: list
    k: int
    tau: float
    warnings: list = field(default_factory=list)


@dataclass
class BoundarySet:
    """All 4-adjacent pixel pairs straddling a superpixel boundary.

    Arrays are aligned along the first axis: pixel_i/pixel_j are (M, 2) in
    (u, v) order, label_i/label_j the superpixels on each side, and
    color_weights the exp(-beta * ||I_i - I_j||) factors. Each unordered
    pixel pair appears exactly once.
    """

    pixel_i: np.ndarray
    pixel_j: np.ndarray
    label_i: np.ndarray
    label_j: np.ndarray
    color_weights: np.ndarray

    def __len__(self) -> int:
        return len(self.label_i)

    def edge_index(self) -> dict:
        """Map (min_label, max_label) -> indices of this edge's pixel pairs."""
        lo = np.minimum(self.label_i, self.label_j)
        hi = np.maximum(self.label_i, self.label_j)
        order = np.lexsort((hi, lo))
        out = {}
        if len(order) == 0:
            return out
        keys = np.column_stack([lo[order], hi[order]])
        change = np.flatnonzero(np.any(np.diff(keys, axis=0) != 0, axis=1)) + 1
        for chunk in np.split(order, change):
            out[(int(lo[chunk[0]]), int(hi[chunk[0]]))] = chunk
        return out


# ---------------------------------------------------------------------------
# SLIC + label hygiene
# ---------------------------------------------------------------------------

def _relabel_contiguous(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """Relabel to 0..n-1 in order of first appearance (raster order)."""
    flat = labels.ravel()
    uniq, first = np.unique(flat, return_index=True)
    order = np.argsort(first)
    remap = np.empty(uniq.max() + 1, dtype=np.int32)
    remap[uniq[order]] = np.arange(len(uniq), dtype=np.int32)
    return remap[flat].reshape(labels.shape), len(uniq)


def _absorb_orphan_components(labels: np.ndarray) -> np.ndarray:
    """Make every label a single 4-connected region.

    For labels split into several components, the largest component keeps the
    label and every smaller one is merged into the largest 4-adjacent
    neighboring region (ties: lower label). Iterates until stable.
    """
    labels = labels.copy()
    h, w = labels.shape
    for _ in range(labels.size):  # guaranteed to terminate well before this
        changed = False
        for lab in np.unique(labels):
            mask = labels == lab
            comp, ncomp = ndimage.label(mask, structure=FOUR_CONNECTED)
            if ncomp <= 1:
                continue
            sizes = ndimage.sum_labels(np.ones_like(comp), comp,
                                       index=np.arange(1, ncomp + 1))
            keep = int(np.argmax(sizes)) + 1
            for c in range(1, ncomp + 1):
                if c == keep:
                    continue
                cmask = comp == c
                # 4-dilate the component and look at the labels around it
                ring = ndimage.binary_dilation(cmask, structure=FOUR_CONNECTED) & ~cmask
                ring_labels = labels[ring]
                ring_labels = ring_labels[ring_labels != lab]
                if ring_labels.size == 0:
                    continue  # enclosed by its own label; resolved next sweep
                counts = np.bincount(ring_labels)
                best = int(np.argmax(counts))  # argmax takes the lowest on ties
                labels[cmask] = best
                changed = True
        if not changed:
            break
    return labels


def slic_segment(image: Image, target_count: int, compactness: float) -> Segmentation:
    """SLIC superpixels with contiguous raster-ordered labels.

    Connectivity (4-neighborhood) is enforced by absorbing orphan components
    into their largest adjacent region, then labels are renumbered in order
    of first appearance. Deterministic for fixed inputs.
    """
    if target_count < 2:
        raise DomainError("target_count must be >= 2")
    if target_count > image.height * image.width:
        raise DomainError(
            f"target_count {target_count} exceeds pixel count "
            f"{image.height * image.width}"
        )
    if compactness <= 0:
        raise DomainError("compactness must be > 0")

    labels = _skimage_slic(
        image.pixels,
        n_segments=target_count,
        compactness=compactness,
        convert2lab=False,
        enforce_connectivity=True,
        start_label=0,
        channel_axis=-1,
    )
    labels = _absorb_orphan_components(labels.astype(np.int32))
    labels, count = _relabel_contiguous(labels)
    logger.debug("slic: target %d -> %d superpixels", target_count, count)
    return Segmentation(labels, count)


def merge_degenerate_superpixels(seg: Segmentation) -> Segmentation:
    """Merge superpixels that cannot seed a valid anchor triple.

    A superpixel with fewer than 3 pixels, or whose pixels are collinear
    (best triangle area below threshold), is absorbed into its largest
    4-adjacent neighbor. Repeats until every superpixel is usable.
    """
    labels = seg.labels.copy()
    while True:
        count = int(labels.max()) + 1
        bad = []
        for lab in range(count):
            px = _pixels_of(labels, lab)
            if len(px) == 0:
                continue
            if len(px) < 3 or not _has_area(px):
                bad.append(lab)
        if not bad:
            break
        if len(np.unique(labels)) <= 1:
            raise DegenerateSuperpixelError(
                "image degenerates to a single collinear superpixel"
            )
        for lab in bad:
            mask = labels == lab
            if not mask.any():
                continue
            ring = ndimage.binary_dilation(mask, structure=FOUR_CONNECTED) & ~mask
            ring_labels = labels[ring]
            ring_labels = ring_labels[ring_labels != lab]
            if ring_labels.size == 0:
                continue
            counts = np.bincount(ring_labels)
            labels[mask] = int(np.argmax(counts))
        labels, _ = _relabel_contiguous(labels)
    labels, count = _relabel_contiguous(labels)
    return Segmentation(labels, count)


def _pixels_of(labels: np.ndarray, lab: int) -> np.ndarray:
    """(M, 2) pixel coordinates (u, v) of a label, in raster scan order."""
    vs, us = np.nonzero(labels == lab)
    return np.column_stack([us, vs]).astype(np.float64)


def _has_area(px: np.ndarray) -> bool:
    """True when some pixel triple per the anchor rules clears the area bar."""
    try:
        _triple_from_pixels(px)
        return True
    except DegenerateSuperpixelError:
        return False


# ---------------------------------------------------------------------------
# Anchor triples
# ---------------------------------------------------------------------------

def _triple_from_pixels(px: np.ndarray) -> tuple[int, int, int]:
    """Indices (anchor, p1, p2) into ``px`` per the deterministic rules.

    anchor: nearest to the centroid; p1: farthest from the anchor; p2: the
    pixel maximizing the triangle area with (anchor, p1). Scan order breaks
    ties. Raises DegenerateSuperpixelError when fewer than 3 pixels exist or
    the best triangle area is below 0.5 px^2.
    """
    if len(px) < 3:
        raise DegenerateSuperpixelError(f"only {len(px)} candidate pixels")
    centroid = px.mean(axis=0)
    d2c = np.einsum("ij,ij->i", px - centroid, px - centroid)
    ia = int(np.argmin(d2c))
    d2a = np.einsum("ij,ij->i", px - px[ia], px - px[ia])
    i1 = int(np.argmax(d2a))
    e1 = px[i1] - px[ia]
    rel = px - px[ia]
    cross = e1[0] * rel[:, 1] - e1[1] * rel[:, 0]
    areas = 0.5 * np.abs(cross)
    i2 = int(np.argmax(areas))
    if areas[i2] < MIN_TRIANGLE_AREA:
        raise DegenerateSuperpixelError(
            f"best triangle area {areas[i2]:.3f} px^2 below {MIN_TRIANGLE_AREA}"
        )
    return ia, i1, i2


def select_anchor_triple(seg: Segmentation, superpixel: int,
                         valid_mask: np.ndarray = None) -> AnchorTriple:
    """Pick the anchor triple of one superpixel.

    When ``valid_mask`` (H, W) is given, only pixels marked valid are
    candidates; this is how a sparse depth prior restricts the choice.
    """
    if not (0 <= superpixel < seg.count):
        raise DomainError(f"superpixel {superpixel} out of range")
    px = _pixels_of(seg.labels, superpixel)
    if valid_mask is not None:
        vm = np.asarray(valid_mask, dtype=bool)
        if vm.shape != seg.labels.shape:
            raise DomainError("valid_mask shape mismatch")
        keep = vm[px[:, 1].astype(np.intp), px[:, 0].astype(np.intp)]
        px = px[keep]
        if len(px) < 3:
            raise DegenerateSuperpixelError(
                f"superpixel {superpixel}: only {len(px)} pixels carry valid depth"
            )
    ia, i1, i2 = _triple_from_pixels(px)
    return AnchorTriple(superpixel, px[ia], px[i1], px[i2])


def select_all_triples(seg: Segmentation,
                       valid_mask: np.ndarray = None) -> list:
    """Anchor triples for every superpixel, in label order."""
    return [select_anchor_triple(seg, lab, valid_mask) for lab in range(seg.count)]


# ---------------------------------------------------------------------------
# k-NN rigidity graph
# ---------------------------------------------------------------------------

def build_knn_graph(triples: list, k: int, tau: float = None) -> RigidityGraph:
    """Directed k-NN graph over anchor pixels with exp(-d/tau) weights.

    ``tau=None`` (or 0) picks the mean k-NN distance over the whole graph.
    ``k >= len(triples)`` is clamped to ``len(triples) - 1`` with a warning
    record. Ties in distance are broken toward lower anchor index.
    """
    n = len(triples)
    if n < 2:
        raise DomainError("need at least 2 anchors to build a graph")
    if k < 1:
        raise DomainError("k must be >= 1")
    warnings = []
    if k >= n:
        warnings.append(f"k={k} clamped to {n - 1} for {n} anchors")
        logger.warning(warnings[-1])
        k = n - 1

    anchors = np.stack([t.anchor for t in triples])
    diff = anchors[:, None, :] - anchors[None, :, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(dist, np.inf)

    idx = np.arange(n)
    neighbors = []
    dists = []
    for i in range(n):
        order = np.lexsort((idx, dist[i]))[:k]
        neighbors.append(order.astype(np.int32))
        dists.append(dist[i][order])

    if tau is None or tau == 0:
        tau = float(np.mean(np.concatenate(dists)))
        if tau <= 0:  # all anchors coincide; fall back to a unit scale
            tau = 1.0
    if tau <= 0:
        raise DomainError("tau must be > 0")

    weights = [np.exp(-d / tau) for d in dists]
    return RigidityGraph(neighbors, weights, k, float(tau), warnings)


# ---------------------------------------------------------------------------
# Boundary pixel pairs
# ---------------------------------------------------------------------------

def boundary_pairs(seg: Segmentation, image: Image, beta: float) -> BoundarySet:
    """All 4-adjacent pixel pairs whose labels differ, with color weights."""
    if beta < 0:
        raise DomainError("beta must be >= 0")
    require = (seg.height, seg.width)
    if (image.height, image.width) != require:
        raise DomainError("segmentation and image dimensions differ")

    lab = seg.labels
    px = image.pixels
    pi, pj, li, lj, wts = [], [], [], [], []

    # horizontal neighbors: (u, v) with (u+1, v)
    hmask = lab[:, :-1] != lab[:, 1:]
    vs, us = np.nonzero(hmask)
    if len(vs):
        pi.append(np.column_stack([us, vs]))
        pj.append(np.column_stack([us + 1, vs]))
        li.append(lab[vs, us])
        lj.append(lab[vs, us + 1])
        cd = np.linalg.norm(px[vs, us] - px[vs, us + 1], axis=1)
        wts.append(np.exp(-beta * cd))

    # vertical neighbors: (u, v) with (u, v+1)
    vmask = lab[:-1, :] != lab[1:, :]
    vs, us = np.nonzero(vmask)
    if len(vs):
        pi.append(np.column_stack([us, vs]))
        pj.append(np.column_stack([us, vs + 1]))
        li.append(lab[vs, us])
        lj.append(lab[vs + 1, us])
        cd = np.linalg.norm(px[vs, us] - px[vs + 1, us], axis=1)
        wts.append(np.exp(-beta * cd))

    if not pi:
        empty2 = np.zeros((0, 2), dtype=np.float64)
        empty1 = np.zeros(0)
        return BoundarySet(empty2, empty2.copy(), empty1.astype(np.int32),
                           empty1.astype(np.int32), empty1)

    return BoundarySet(
        np.concatenate(pi).astype(np.float64),
        np.concatenate(pj).astype(np.float64),
        np.concatenate(li).astype(np.int32),
        np.concatenate(lj).astype(np.int32),
        np.concatenate(wts),
    )
