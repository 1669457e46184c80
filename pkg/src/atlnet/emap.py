"""Extended morphological attribute profiles built from max-trees.

Each leading principal component is quantized to 8 bits, a max-tree (for
thinnings) and a min-tree (for thickenings) are built with 4-connectivity,
and nodes are pruned by area or by the standard deviation of the original
real-valued component inside the node.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import pca_components, pca_project

AREA = "area"
STDDEV = "stddev"
RULES = ("max", "direct")


@dataclass
class EmapConfig:
    pc_count: int = 4
    area_thresholds: list[float] = field(default_factory=lambda: [100.0, 500.0, 1000.0, 5000.0])
    std_thresholds: list[float] = field(default_factory=lambda: [0.025, 0.05, 0.075, 0.10])
    std_rule: str = "max"

    def __post_init__(self):
        if self.pc_count < 1:
            raise ValueError("pc_count must be >= 1")
        for name in ("area_thresholds", "std_thresholds"):
            t = [float(v) for v in getattr(self, name)]
            if any(v <= 0 for v in t) or any(b <= a for a, b in zip(t, t[1:])):
                raise ValueError(f"{name} must be positive and strictly increasing")
        if self.std_rule not in RULES:
            raise ValueError(f"std_rule must be one of {RULES}")

    @property
    def dim(self) -> int:
        return self.pc_count * (2 * (len(self.area_thresholds) + len(self.std_thresholds)) + 1)


def quantize(values) -> np.ndarray:
    """Map ``min..max`` of a real image linearly onto 0..255."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi <= lo:
        return np.zeros(v.shape, dtype=np.uint8)
    return np.rint((v - lo) / (hi - lo) * 255.0).astype(np.uint8)


@dataclass
class MaxTree:
    """Component tree in canonical-pixel form.

    ``parent`` holds flat pixel indices; a pixel is canonical (represents its
    node) when it is the root or its parent has a different level. Attribute
    arrays are indexed by canonical pixel. ``dual`` marks a min-tree stored as
    the max-tree of the inverted image.
    """

    shape: tuple[int, int]
    levels: np.ndarray  # flat, levels of the (possibly inverted) image
    parent: np.ndarray
    order: np.ndarray  # root first, every node after its parent
    node: np.ndarray  # canonical pixel of each pixel's node
    area: np.ndarray
    sum_v: np.ndarray
    sum_v2: np.ndarray
    dual: bool = False

    @property
    def root(self) -> int:
        return int(self.order[0])

    def canonical(self) -> np.ndarray:
        return np.flatnonzero(self.node == np.arange(self.node.size))

    def stddev(self) -> np.ndarray:
        area = np.maximum(self.area, 1)
        mean = self.sum_v / area
        return np.sqrt(np.maximum(self.sum_v2 / area - mean**2, 0.0))


def _union_find_tree(levels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Parent array and root-first order via union-find over pixels sorted by level.

    Pixels are visited from the highest level down; each one is merged with
    the already-visited 4-neighbours, then parents are canonicalized so every
    pixel points at the canonical pixel of its node or of the parent node.
    """
    h, w = levels.shape
    flat = levels.ravel().tolist()
    order = np.argsort(levels.ravel(), kind="stable")
    n = h * w
    parent = [-1] * n
    zpar = [-1] * n

    def find(x):
        root = x
        while zpar[root] != root:
            root = zpar[root]
        while zpar[x] != root:
            zpar[x], x = root, zpar[x]
        return root

    for p in order[::-1].tolist():
        parent[p] = p
        zpar[p] = p
        r, c = divmod(p, w)
        for q in (p - w if r > 0 else -1, p + w if r < h - 1 else -1, p - 1 if c > 0 else -1, p + 1 if c < w - 1 else -1):
            if q >= 0 and zpar[q] != -1:
                rq = find(q)
                if rq != p:
                    parent[rq] = p
                    zpar[rq] = p
    for p in order.tolist():
        q = parent[p]
        if flat[parent[q]] == flat[q]:
            parent[p] = parent[q]
    return np.array(parent, dtype=np.int64), order.astype(np.int64)


def build_max_tree(img, values=None, dual: bool = False) -> MaxTree:
    """Max-tree of an 8-bit image (min-tree when ``dual``), 4-connected.

    ``values`` are the real values accumulated for the standard-deviation
    attribute; they default to the pixel levels.
    """
    img = np.asarray(img)
    if img.ndim != 2 or img.size == 0:
        raise ValueError("image must be a non-empty 2-D array")
    g = img.astype(np.int64)
    levels = (255 - g) if dual else g
    vals = g.astype(np.float64) if values is None else np.asarray(values, dtype=np.float64)
    parent, order = _union_find_tree(levels)
    flat = levels.ravel()
    n = flat.size
    idx = np.arange(n)
    root = int(order[0])
    is_canon = (flat[parent] != flat) | (idx == root)
    node = np.where(is_canon, idx, parent)

    area = np.ones(n, dtype=np.int64)
    s1 = vals.ravel().copy()
    s2 = s1**2
    par = parent.tolist()
    a, x1, x2 = area.tolist(), s1.tolist(), s2.tolist()
    for p in order[:0:-1].tolist():
        q = par[p]
        a[q] += a[p]
        x1[q] += x1[p]
        x2[q] += x2[p]
    return MaxTree(img.shape, flat, parent, order, node, np.array(a), np.array(x1), np.array(x2), dual)


def build_min_tree(img, values=None) -> MaxTree:
    return build_max_tree(img, values, dual=True)


def _kept_nodes(tree: MaxTree, attr: str, threshold: float, rule: str) -> np.ndarray:
    if attr == AREA:
        crit = tree.area >= threshold
        rule = "direct"
    elif attr == STDDEV:
        crit = tree.stddev() >= threshold
    else:
        raise ValueError(f"unknown attribute {attr!r}")
    is_canon = tree.node == np.arange(tree.node.size)
    kept = crit & is_canon
    if rule == "max":
        # a node survives if it or any descendant meets the criterion
        k = kept.tolist()
        par = tree.parent.tolist()
        for p in tree.order[:0:-1].tolist():
            if k[p]:
                k[par[p]] = True
        kept = np.array(k) & is_canon
    kept[tree.root] = True
    return kept


def attribute_filter(tree: MaxTree, attr: str, threshold: float, rule: str = "max") -> np.ndarray:
    """Prune the tree and return the filtered 8-bit image.

    Pixels of removed nodes take the level of their nearest kept ancestor.
    Area is increasing, so it is always pruned directly; the std-dev
    attribute uses ``rule`` ("max": a node is removed only if neither it nor
    any descendant meets the threshold).
    """
    kept = _kept_nodes(tree, attr, threshold, rule)
    out = tree.levels.copy()
    par = tree.parent.tolist()
    node = tree.node.tolist()
    lev = tree.levels.tolist()
    k = kept.tolist()
    res = out.tolist()
    for p in tree.order.tolist():
        c = node[p]
        if c != p:
            res[p] = res[c]
        elif not k[p]:
            res[p] = res[par[p]]
        else:
            res[p] = lev[p]
    out = np.array(res, dtype=np.int64).reshape(tree.shape)
    if tree.dual:
        out = 255 - out
    return out.astype(np.uint8)


def _dequantize(levels: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return lo + levels.astype(np.float64) / 255.0 * (hi - lo)


def _minmax_columns(m: np.ndarray) -> np.ndarray:
    lo = m.min(axis=0)
    hi = m.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    return (m - lo) / span


def component_profile(component: np.ndarray, cfg: EmapConfig) -> list[np.ndarray]:
    """Attribute profile of one real-valued component image.

    Order: thickenings by std (largest threshold first), thickenings by
    area (largest first), the component itself, thinnings by area (smallest
    first), thinnings by std (smallest first).
    """
    lo, hi = float(component.min()), float(component.max())
    q = quantize(component)
    std_abs = [t * (hi - lo) for t in cfg.std_thresholds]
    maxt = build_max_tree(q, component)
    mint = build_min_tree(q, component)

    def filt(tree, attr, t):
        return _dequantize(attribute_filter(tree, attr, t, cfg.std_rule), lo, hi)

    out = [filt(mint, STDDEV, t) for t in reversed(std_abs)]
    out += [filt(mint, AREA, t) for t in reversed(cfg.area_thresholds)]
    out.append(component.astype(np.float64))
    out += [filt(maxt, AREA, t) for t in cfg.area_thresholds]
    out += [filt(maxt, STDDEV, t) for t in std_abs]
    return out


def build_emap(cube, cfg: EmapConfig) -> np.ndarray:
    """EMAP feature matrix, one row per pixel (row-major), columns scaled to [0, 1]."""
    data = cube.data if hasattr(cube, "data") else np.asarray(cube, dtype=np.float64)
    h, w, b = data.shape
    if cfg.pc_count > b:
        raise ValueError(f"pc_count {cfg.pc_count} exceeds band count {b}")
    pixels = data.reshape(-1, b)
    comps, means = pca_components(pixels, cfg.pc_count)
    scores = pca_project(pixels, comps, means)
    cols = []
    for j in range(cfg.pc_count):
        for img in component_profile(scores[:, j].reshape(h, w), cfg):
            cols.append(img.ravel())
    return _minmax_columns(np.stack(cols, axis=1))
