"""Outlier detection over consistency scores: one-class SVM and isolation forest.

Both detectors are fit on the reference scores only (no tamper labels) and
answer one question per query score: inlier or outlier. The SVM solves its
dual problem with pairwise coordinate updates; the forest isolates points by
random axis-aligned splits. Fitting through ``odm_fit_on_scores`` canonicalizes
the training order first, so both detectors are permutation-invariant.
"""

from __future__ import annotations

import enum
import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .datamodel import ConfigError, DatasetFormatError
from .neuralnet import TrainingDivergedError, _read_str, _write_str

ODM_KINDS = ("ocsvm", "iforest")
ODM_FORMAT = "miverify-odm/1"
ODM_MAGIC = b"MIVODM1"

EULER_GAMMA = 0.5772156649


class Verdict(str, enum.Enum):
    INLIER = "inlier"
    OUTLIER = "outlier"


@dataclass(frozen=True)
class OdmConfig:
    nu: float = 0.1
    gamma: float | None = None
    tol: float = 1e-6
    trees: int = 100
    psi: int | None = None
    seed: int = 0
    threads: int = 1
    threshold: float = 0.5
    contamination: float | None = None
    znorm: bool = False

    def __post_init__(self):
        if not 0.0 < self.nu <= 1.0:
            raise ConfigError(f"nu must be in (0, 1], got {self.nu}")
        if self.gamma is not None and self.gamma <= 0:
            raise ConfigError(f"gamma must be positive, got {self.gamma}")
        if self.trees < 1:
            raise ConfigError(f"trees must be >= 1, got {self.trees}")
        if self.psi is not None and self.psi < 1:
            raise ConfigError(f"psi must be >= 1, got {self.psi}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.contamination is not None and not 0.0 < self.contamination < 1.0:
            raise ConfigError(
                f"contamination must be in (0, 1), got {self.contamination}"
            )


# ---------------------------------------------------------------------------
# one-class SVM, RBF kernel, dual solved by pairwise coordinate updates


@dataclass
class OcsvmModel:
    support_vectors: np.ndarray  # (m, d)
    alpha: np.ndarray  # (m,)
    rho: float
    gamma: float
    nu: float


def rbf_kernel(a: np.ndarray, b: np.ndarray, gamma: float) -> np.ndarray:
    return np.exp(-gamma * cdist(a, b, "sqeuclidean"))


def default_gamma(points: np.ndarray) -> float:
    return 1.0 / (2.0 * max(float(np.var(points)), 1e-12))


def ocsvm_dual_objective(alpha: np.ndarray, kernel: np.ndarray) -> float:
    return 0.5 * float(alpha @ kernel @ alpha)


def ocsvm_fit(
    points,
    nu: float,
    gamma: float | None = None,
    tol: float = 1e-6,
    max_iter: int = 200_000,
) -> OcsvmModel:
    """Minimize 0.5 a'Ka over the box [0, 1/(nu n)] intersected with sum(a)=1.

    Mass moves pairwise from the most uphill coordinate that can shrink to the
    most downhill one that can grow; at the optimum no such pair improves by
    more than tol (the KKT gap).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"ocsvm_fit needs at least 2 points, got {n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("ocsvm_fit: points must be finite")
    if not 0.0 < nu <= 1.0:
        raise ConfigError(f"nu must be in (0, 1], got {nu}")
    if gamma is None:
        gamma = default_gamma(x)
    if gamma <= 0:
        raise ConfigError(f"gamma must be positive, got {gamma}")

    kernel = rbf_kernel(x, x, gamma)
    c = 1.0 / (nu * n)
    alpha = np.zeros(n)
    n_full = int(np.floor(nu * n))
    alpha[:n_full] = c
    if n_full < n:
        alpha[n_full] = 1.0 - n_full * c

    grad = kernel @ alpha
    gap = np.inf
    for it in range(max_iter):
        can_grow = alpha < c - 1e-12
        can_shrink = alpha > 1e-12
        if not (can_grow.any() and can_shrink.any()):
            gap = 0.0
            break
        i = int(np.flatnonzero(can_grow)[np.argmin(grad[can_grow])])
        j = int(np.flatnonzero(can_shrink)[np.argmax(grad[can_shrink])])
        gap = grad[j] - grad[i]
        if gap <= tol or i == j:
            break
        quad = kernel[i, i] + kernel[j, j] - 2.0 * kernel[i, j]
        if quad > 1e-15:
            delta = gap / quad
        else:
            delta = np.inf
        delta = min(delta, c - alpha[i], alpha[j])
        alpha[i] = min(alpha[i] + delta, c)
        alpha[j] = max(alpha[j] - delta, 0.0)
        grad += delta * (kernel[:, i] - kernel[:, j])
        if (it + 1) % 8192 == 0:
            grad = kernel @ alpha  # kill accumulated drift
    else:
        raise TrainingDivergedError(
            f"ocsvm_fit: no convergence in {max_iter} iterations (KKT gap {gap:.3e})"
        )

    keep = alpha > 1e-12
    sv, sv_alpha = x[keep], alpha[keep]
    # rho via the same truncated expansion used at predict time, so a margin
    # SV's decision is ~0 and the all-identical degenerate case is exactly 0
    sv_grad = rbf_kernel(sv, sv, gamma) @ sv_alpha
    on_margin = (sv_alpha > c * 1e-7) & (sv_alpha < c * (1.0 - 1e-7))
    rho = float(np.mean(sv_grad[on_margin])) if on_margin.any() else float(np.mean(sv_grad))
    return OcsvmModel(sv, sv_alpha, rho, float(gamma), float(nu))


def ocsvm_decisions(m: OcsvmModel, points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return rbf_kernel(x, m.support_vectors, m.gamma) @ m.alpha - m.rho


def ocsvm_predict(m: OcsvmModel, x) -> tuple[float, Verdict]:
    arr = np.asarray(x, dtype=np.float64).reshape(1, -1)
    value = float(ocsvm_decisions(m, arr)[0])
    return value, (Verdict.INLIER if value >= 0.0 else Verdict.OUTLIER)


# ---------------------------------------------------------------------------
# isolation forest


def avg_path_length_c(n):
    """Expected path length of an unsuccessful BST search over n points."""
    arr = np.asarray(n, dtype=np.float64)
    out = np.where(arr == 2.0, 1.0, 0.0)
    big = arr > 2.0
    nb = np.where(big, arr, 3.0)
    out = np.where(big, 2.0 * (np.log(nb - 1.0) + EULER_GAMMA) - 2.0 * (nb - 1.0) / nb, out)
    if np.ndim(n) == 0:
        return float(out)
    return out


def anomaly_score(mean_path, psi: int):
    """2^(-E[h]/c(psi)); 0.5 exactly when the mean path equals c(psi)."""
    denom = max(avg_path_length_c(psi), 1e-12)
    return 2.0 ** (-np.asarray(mean_path, dtype=np.float64) / denom)


@dataclass
class IforestTree:
    feature: np.ndarray  # int64; -1 at leaves
    threshold: np.ndarray  # float64; nan at leaves
    left: np.ndarray  # int64 child index; -1 at leaves
    right: np.ndarray
    size: np.ndarray  # int64 subsample count reaching the node


@dataclass
class IforestModel:
    trees: list[IforestTree]
    psi: int
    n_features: int
    threshold: float


def _grow_tree(sub: np.ndarray, rng: np.random.Generator, height_limit: int) -> IforestTree:
    feature, threshold, left, right, size = [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(np.nan)
        left.append(-1)
        right.append(-1)
        size.append(0)
        return len(feature) - 1

    stack = [(np.arange(sub.shape[0]), 0, new_node())]
    while stack:
        idx, depth, slot = stack.pop()
        size[slot] = idx.size
        lo = hi = 0.0
        col = -1
        if idx.size > 1 and depth < height_limit:
            rows = sub[idx]
            for _ in range(4):  # redraw if the feature is constant here
                q = int(rng.integers(rows.shape[1]))
                lo, hi = float(rows[:, q].min()), float(rows[:, q].max())
                if hi > lo:
                    col = q
                    break
        if col < 0:
            continue
        cut = float(rng.uniform(lo, hi))
        goes_left = sub[idx, col] < cut
        if goes_left.all() or not goes_left.any():
            continue  # degenerate draw at the range edge; keep the leaf
        li, ri = new_node(), new_node()
        feature[slot], threshold[slot] = col, cut
        left[slot], right[slot] = li, ri
        stack.append((idx[goes_left], depth + 1, li))
        stack.append((idx[~goes_left], depth + 1, ri))
    return IforestTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=np.float64),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(size, dtype=np.int64),
    )


def iforest_fit(
    points,
    trees: int = 100,
    psi: int | None = None,
    seed: int = 0,
    threads: int = 1,
    threshold: float = 0.5,
) -> IforestModel:
    """Grow each tree from its own spawned seed; thread count cannot change it."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n == 0:
        raise ValueError("iforest_fit: no points")
    if not np.all(np.isfinite(x)):
        raise ValueError("iforest_fit: points must be finite")
    if psi is None:
        psi = min(256, n)
    psi = min(psi, n)
    height_limit = int(np.ceil(np.log2(max(psi, 2))))
    seeds = np.random.SeedSequence(seed).spawn(trees)

    def build(k: int) -> IforestTree:
        rng = np.random.default_rng(seeds[k])
        rows = rng.choice(n, size=psi, replace=False)
        return _grow_tree(x[rows], rng, height_limit)

    if threads == 1:
        grown = [build(k) for k in range(trees)]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            grown = list(pool.map(build, range(trees)))
    return IforestModel(grown, int(psi), x.shape[1], float(threshold))


def _tree_paths(tree: IforestTree, x: np.ndarray) -> np.ndarray:
    node = np.zeros(x.shape[0], dtype=np.int64)
    depth = np.zeros(x.shape[0], dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.float64)
    active = np.arange(x.shape[0])
    while active.size:
        at = node[active]
        is_leaf = tree.left[at] < 0
        done = active[is_leaf]
        out[done] = depth[done] + avg_path_length_c(tree.size[node[done]])
        active = active[~is_leaf]
        if active.size == 0:
            break
        at = node[active]
        goes_left = x[active, tree.feature[at]] < tree.threshold[at]
        node[active] = np.where(goes_left, tree.left[at], tree.right[at])
        depth[active] += 1.0
    return out


def iforest_scores(m: IforestModel, points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[1] != m.n_features:
        raise ValueError(
            f"iforest expects {m.n_features} features, got {x.shape[1]}"
        )
    mean_path = np.zeros(x.shape[0])
    for tree in m.trees:
        mean_path += _tree_paths(tree, x)
    mean_path /= len(m.trees)
    return anomaly_score(mean_path, m.psi)


def iforest_score(m: IforestModel, x) -> tuple[float, Verdict]:
    value = float(iforest_scores(m, np.asarray(x, dtype=np.float64).reshape(1, -1))[0])
    return value, (Verdict.OUTLIER if value > m.threshold else Verdict.INLIER)


# ---------------------------------------------------------------------------
# fitting on consistency scores (the d=1 wrapper the pipeline uses)


@dataclass
class OutlierModel:
    kind: str
    config: OdmConfig
    inner: OcsvmModel | IforestModel
    mean: float = 0.0
    std: float = 1.0

    def _prep(self, values) -> np.ndarray:
        x = np.asarray(
            [getattr(v, "value", v) for v in values], dtype=np.float64
        ).reshape(-1, 1)
        if self.config.znorm:
            x = (x - self.mean) / self.std
        return x

    def decisions(self, values) -> np.ndarray:
        """OCSVM decision values (inlier >= 0) or forest anomaly scores."""
        x = self._prep(values)
        if self.kind == "ocsvm":
            return ocsvm_decisions(self.inner, x)
        return iforest_scores(self.inner, x)

    def verdicts(self, values) -> list[Verdict]:
        d = self.decisions(values)
        if self.kind == "ocsvm":
            flags = d < 0.0
        else:
            flags = d > self.inner.threshold
        return [Verdict.OUTLIER if f else Verdict.INLIER for f in flags]


def _score_values(scores) -> np.ndarray:
    vals = np.asarray([getattr(s, "value", s) for s in scores], dtype=np.float64)
    if vals.size == 0:
        raise ValueError("no scores to fit on")
    if not np.all(np.isfinite(vals)):
        raise ValueError("scores must be finite")
    return vals


def odm_fit_on_scores(scores, kind: str, config: OdmConfig | None = None) -> OutlierModel:
    """Fit the chosen detector on scalar consistency scores.

    ``scores`` may be raw floats, score objects with a ``value`` attribute, or
    (package_id, score) pairs; training order is canonicalized (by package_id
    when ids are present, else by value) so any input permutation fits the
    same model.
    """
    if kind not in ODM_KINDS:
        raise ConfigError(f"unknown odm kind {kind!r}; expected one of {ODM_KINDS}")
    if config is None:
        config = OdmConfig()
    scores = list(scores)
    if scores and isinstance(scores[0], tuple):
        scores = [v for _, v in sorted(scores, key=lambda kv: kv[0])]
        vals = _score_values(scores)
    else:
        vals = np.sort(_score_values(scores))
    mean, std = 0.0, 1.0
    if config.znorm:
        mean = float(np.mean(vals))
        std = max(float(np.std(vals)), 1e-12)
        vals = (vals - mean) / std
    x = vals.reshape(-1, 1)
    if kind == "ocsvm":
        inner = ocsvm_fit(x, nu=config.nu, gamma=config.gamma, tol=config.tol)
    else:
        inner = iforest_fit(
            x,
            trees=config.trees,
            psi=config.psi,
            seed=config.seed,
            threads=config.threads,
            threshold=config.threshold,
        )
        if config.contamination is not None:
            train_scores = iforest_scores(inner, x)
            inner.threshold = float(
                np.quantile(train_scores, 1.0 - config.contamination)
            )
    return OutlierModel(kind, config, inner, mean, std)


# ---------------------------------------------------------------------------
# serialization: JSON header line + named float64 matrices


def _write_matrix(fh, name: str, arr: np.ndarray) -> None:
    a = np.ascontiguousarray(arr, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    _write_str(fh, name)
    fh.write(struct.pack("<II", a.shape[0], a.shape[1]))
    fh.write(a.tobytes())


def _read_matrix(fh) -> tuple[str, np.ndarray]:
    name = _read_str(fh)
    rows, cols = struct.unpack("<II", fh.read(8))
    data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8").reshape(rows, cols)
    return name, data.copy()


def _tree_to_matrix(tree: IforestTree) -> np.ndarray:
    return np.column_stack(
        [
            tree.feature.astype(np.float64),
            tree.threshold,
            tree.left.astype(np.float64),
            tree.right.astype(np.float64),
            tree.size.astype(np.float64),
        ]
    )


def _tree_from_matrix(mat: np.ndarray) -> IforestTree:
    return IforestTree(
        mat[:, 0].astype(np.int64),
        mat[:, 1].copy(),
        mat[:, 2].astype(np.int64),
        mat[:, 3].astype(np.int64),
        mat[:, 4].astype(np.int64),
    )


def save_odm(model: OutlierModel, path) -> None:
    header = {
        "format": ODM_FORMAT,
        "odm_kind": model.kind,
        "config": asdict(model.config),
        "mean": model.mean,
        "std": model.std,
    }
    arrays: list[tuple[str, np.ndarray]] = []
    if model.kind == "ocsvm":
        header["rho"] = model.inner.rho
        header["gamma"] = model.inner.gamma
        header["nu"] = model.inner.nu
        arrays.append(("support_vectors", model.inner.support_vectors))
        arrays.append(("alpha", model.inner.alpha))
    else:
        header["psi"] = model.inner.psi
        header["n_features"] = model.inner.n_features
        header["threshold"] = model.inner.threshold
        arrays.extend(
            (f"tree_{k:05d}", _tree_to_matrix(t)) for k, t in enumerate(model.inner.trees)
        )
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        fh.write(ODM_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_matrix(fh, name, arr)


def load_odm(path) -> OutlierModel:
    with open(path, "rb") as fh:
        raw = fh.readline()
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"bad odm header: {exc}", line=1) from exc
        if header.get("format") != ODM_FORMAT:
            raise DatasetFormatError(
                f"unsupported odm format {header.get('format')!r}", line=1
            )
        if fh.read(len(ODM_MAGIC)) != ODM_MAGIC:
            raise DatasetFormatError("bad odm magic", line=2)
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = dict(_read_matrix(fh) for _ in range(count))
    kind = header["odm_kind"]
    config = OdmConfig(**header["config"])
    if kind == "ocsvm":
        inner = OcsvmModel(
            arrays["support_vectors"],
            arrays["alpha"].ravel(),
            float(header["rho"]),
            float(header["gamma"]),
            float(header["nu"]),
        )
    elif kind == "iforest":
        trees = [
            _tree_from_matrix(arrays[name])
            for name in sorted(n for n in arrays if n.startswith("tree_"))
        ]
        inner = IforestModel(
            trees, int(header["psi"]), int(header["n_features"]), float(header["threshold"])
        )
    else:
        raise DatasetFormatError(f"unknown odm kind {kind!r}", line=1)
    return OutlierModel(kind, config, inner, float(header["mean"]), float(header["std"]))
