"""Detectors over attack-cost fingerprints, plus ROC/AUROC metrics.

Costs are oriented so that a *lower* cost means *more adversarial*:
adversarial examples sit close to the decision boundary and flip quickly.
Every detector exposes

    is_adversarial(costs) -> bool array
    benign_score(costs)   -> float array, larger = more benign

where `costs` is an (n, d) array (or one length-d vector).
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .fingerprint import Fingerprint, cost_matrix

BENIGN = "benign"
ADVERSARIAL = "adversarial"
DEFAULT_H = -1.281552  # standard normal 10% lower quantile
BOXCOX_GRID = np.round(np.arange(-500, 501) * 0.01, 2)


class FitError(ValueError):
    pass


def verdict(flag: bool) -> str:
    return ADVERSARIAL if flag else BENIGN


def _as_costs(costs, dim=None) -> np.ndarray:
    c = np.asarray(costs, dtype=np.float64)
    if c.ndim <= 1:
        c = c.reshape(1, -1) if dim is None or dim > 1 else c.reshape(-1, 1)
    if dim is not None and c.shape[1] != dim:
        raise ValueError(f"expected {dim} costs per fingerprint, got {c.shape[1]}")
    return c


# ---------------------------------------------------------------- K-NN

@dataclass
class KnnDetector:
    """Euclidean K-NN vote over reference fingerprints.

    An input is adversarial iff strictly more of its K nearest references
    are adversarial than benign. Equal distances at the K-th place are
    resolved in favor of the lower example id.
    """

    references: np.ndarray  # (m, d) costs
    adversarial: np.ndarray  # (m,) bool
    example_ids: np.ndarray  # (m,)
    k: int = 100
    name: str = "knn"

    def __post_init__(self):
        self.references = np.asarray(self.references, dtype=np.float64)
        self.adversarial = np.asarray(self.adversarial, dtype=bool)
        self.example_ids = np.asarray(self.example_ids, dtype=np.int64)
        if self.references.ndim != 2 or len(self.references) != len(self.adversarial):
            raise ValueError("references and labels disagree")
        if not 1 <= self.k <= len(self.references):
            raise ValueError(f"K={self.k} must lie in [1, {len(self.references)}]")
        # presort by id so a stable distance sort breaks ties toward lower ids
        order = np.argsort(self.example_ids, kind="stable")
        self.references = self.references[order]
        self.adversarial = self.adversarial[order]
        self.example_ids = self.example_ids[order]

    @property
    def dim(self) -> int:
        return self.references.shape[1]

    def neighbors(self, costs) -> np.ndarray:
        """Indices (into the sorted reference arrays) of the K nearest references."""
        c = _as_costs(costs, self.dim)
        out = np.empty((len(c), self.k), dtype=np.int64)
        for i, row in enumerate(c):
            d2 = np.sum((self.references - row) ** 2, axis=1)
            out[i] = np.argsort(d2, kind="stable")[:self.k]
        return out

    def adversarial_votes(self, costs) -> np.ndarray:
        return self.adversarial[self.neighbors(costs)].sum(axis=1)

    def is_adversarial(self, costs) -> np.ndarray:
        votes = self.adversarial_votes(costs)
        return votes > self.k - votes

    def benign_score(self, costs) -> np.ndarray:
        return (self.k - self.adversarial_votes(costs)).astype(np.float64)

    def to_dict(self) -> dict:
        return {
            "type": "knn",
            "name": self.name,
            "k": self.k,
            "references": self.references.astype(int).tolist()
            if np.all(self.references == np.round(self.references)) else self.references.tolist(),
            "adversarial": self.adversarial.astype(int).tolist(),
            "example_ids": self.example_ids.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KnnDetector":
        return cls(np.array(d["references"], dtype=np.float64), np.array(d["adversarial"], dtype=bool),
                   np.array(d["example_ids"]), d["k"], d.get("name", "knn"))


def knn_fit(fingerprints: Sequence[Fingerprint], k: int = 100, columns=None, name: str = "knn") -> KnnDetector:
    """K-NN detector over all cost columns, or only `columns` (indices)."""
    if not fingerprints:
        raise FitError("no reference fingerprints")
    refs = cost_matrix(fingerprints)
    if columns is not None:
        refs = refs[:, list(columns)]
    labels = [fp.adversarial for fp in fingerprints]
    ids = [fp.example_id for fp in fingerprints]
    return KnnDetector(refs, labels, ids, k, name)


def knn_classify(det: KnnDetector, fp) -> str:
    costs = fp.costs if isinstance(fp, Fingerprint) else fp
    return verdict(bool(det.is_adversarial(_as_costs(costs, det.dim))[0]))


# ---------------------------------------------------------------- Box-Cox and Z-score

def boxcox(y, lam: float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if lam == 0:
        return np.log(y)
    return (np.power(y, lam) - 1.0) / lam


def boxcox_llf(lam: float, y: np.ndarray) -> float:
    """Profile log-likelihood of the Box-Cox normal model (variance profiled out)."""
    t = boxcox(y, lam)
    var = np.var(t)
    if var <= 0:
        return -np.inf
    return float((lam - 1.0) * np.sum(np.log(y)) - 0.5 * len(y) * np.log(var))


def boxcox_fit(benign_costs, offset: float = 1.0, grid=BOXCOX_GRID) -> tuple:
    """Grid-search the Box-Cox lambda on ``costs + offset``. Returns (lambda, offset)."""
    c = np.asarray(benign_costs, dtype=np.float64).ravel()
    if c.size == 0 or np.any(c < 0):
        raise FitError("benign costs must be a nonempty set of nonnegative values")
    if np.all(c == c[0]):
        raise FitError("benign costs are constant; pick a defense attack whose costs vary")
    y = c + offset
    scores = np.array([boxcox_llf(lam, y) for lam in grid])
    return float(grid[int(np.argmax(scores))]), float(offset)


@dataclass
class ZScoreDetector:
    boxcox_lambda: float
    boxcox_offset: float
    mu: float
    sigma: float
    threshold_h: float = DEFAULT_H
    column: int = 0  # which fingerprint column this detector reads
    name: str = "zscore"

    def __post_init__(self):
        if not self.sigma > 0:
            raise FitError("sigma must be positive")

    def transform(self, cost) -> np.ndarray:
        return boxcox(np.asarray(cost, dtype=np.float64) + self.boxcox_offset, self.boxcox_lambda)

    def zscore(self, cost) -> np.ndarray:
        return (self.transform(cost) - self.mu) / self.sigma

    def _column(self, costs) -> np.ndarray:
        c = np.asarray(costs, dtype=np.float64)
        if c.ndim == 2:
            return c[:, self.column]
        return c

    def benign_score(self, costs) -> np.ndarray:
        return np.atleast_1d(self.zscore(self._column(costs)))

    def is_adversarial(self, costs) -> np.ndarray:
        return self.benign_score(costs) < self.threshold_h

    def to_dict(self) -> dict:
        return {"type": "zscore", **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ZScoreDetector":
        d = {k: v for k, v in d.items() if k != "type"}
        return cls(**d)


def zscore_fit(benign_costs, h: float = DEFAULT_H, min_samples: int = 30, column: int = 0,
               name: str = "zscore") -> ZScoreDetector:
    c = np.asarray(benign_costs, dtype=np.float64).ravel()
    if c.size < min_samples:
        raise FitError(f"need at least {min_samples} benign costs, got {c.size}")
    lam, offset = boxcox_fit(c)
    t = boxcox(c + offset, lam)
    sigma = float(np.std(t, ddof=1))
    if not sigma > 0:
        raise FitError("transformed benign costs have zero spread; pick another defense attack")
    return ZScoreDetector(lam, offset, float(np.mean(t)), sigma, h, column, name)


def zscore_classify(det: ZScoreDetector, cost) -> str:
    return verdict(bool(det.is_adversarial(np.asarray([cost], dtype=np.float64))[0]))


@dataclass
class EnsembleZ:
    """Benign iff at least `vote_k` member detectors say benign."""

    members: list
    vote_k: int = 2
    name: str = "ensemble"

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs members")
        if not 1 <= self.vote_k <= len(self.members):
            raise ValueError(f"vote_k must lie in [1, {len(self.members)}]")

    @property
    def dim(self) -> int:
        return len(self.members)

    def member_z(self, costs) -> np.ndarray:
        c = _as_costs(costs, self.dim)
        return np.column_stack([m.zscore(c[:, j]) for j, m in enumerate(self.members)])

    def benign_votes(self, costs) -> np.ndarray:
        c = _as_costs(costs, self.dim)
        return np.column_stack([~m.is_adversarial(c[:, j]) for j, m in enumerate(self.members)]).sum(axis=1)

    def is_adversarial(self, costs) -> np.ndarray:
        return self.benign_votes(costs) < self.vote_k

    def benign_score(self, costs) -> np.ndarray:
        # margin of the vote_k-th most benign member over its own threshold
        c = _as_costs(costs, self.dim)
        margins = np.column_stack([m.zscore(c[:, j]) - m.threshold_h for j, m in enumerate(self.members)])
        return -np.sort(-margins, axis=1)[:, self.vote_k - 1]

    def to_dict(self) -> dict:
        return {"type": "ensemble", "name": self.name, "vote_k": self.vote_k,
                "members": [m.to_dict() for m in self.members]}

    @classmethod
    def from_dict(cls, d: dict) -> "EnsembleZ":
        return cls([ZScoreDetector.from_dict(m) for m in d["members"]], d["vote_k"], d.get("name", "ensemble"))


def ensemble_fit(benign: np.ndarray, h: float = DEFAULT_H, vote_k: int = 2, names=None) -> EnsembleZ:
    """One Z-score member per column of the (n, d) benign cost matrix."""
    benign = _as_costs(benign)
    names = names or [f"zscore{j + 1}" for j in range(benign.shape[1])]
    members = [zscore_fit(benign[:, j], h, column=j, name=names[j]) for j in range(benign.shape[1])]
    return EnsembleZ(members, vote_k)


def ensemble_z_classify(ens: EnsembleZ, fp) -> str:
    costs = fp.costs if isinstance(fp, Fingerprint) else fp
    return verdict(bool(ens.is_adversarial(costs)[0]))


# ---------------------------------------------------------------- serialization

_TYPES = {"knn": KnnDetector, "zscore": ZScoreDetector, "ensemble": EnsembleZ}


def detector_from_dict(d: dict):
    try:
        return _TYPES[d["type"]].from_dict(d)
    except KeyError as exc:
        raise ValueError(f"unknown detector type in {sorted(d)}") from exc


def save_detector(det, path, extra: dict | None = None) -> None:
    payload = {"detector": det.to_dict(), **(extra or {})}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_detector(path) -> tuple:
    """Returns (detector, the rest of the JSON payload)."""
    with open(path) as fh:
        payload = json.load(fh)
    return detector_from_dict(payload.pop("detector")), payload


# ---------------------------------------------------------------- metrics

def auroc(benign_costs, adv_costs) -> float:
    """AUROC of "lower cost means adversarial", by the rank-sum statistic.

    Equals P(adv < benign) + 0.5 * P(adv == benign) over all pairs.
    """
    b = np.asarray(benign_costs, dtype=np.float64).ravel()
    a = np.asarray(adv_costs, dtype=np.float64).ravel()
    if b.size == 0 or a.size == 0:
        raise ValueError("both classes need at least one example")
    ranks = rankdata(np.concatenate([b, a]))
    u = ranks[:b.size].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (b.size * a.size))


def roc_curve(benign_costs, adv_costs) -> list:
    """(fpr, tpr) points for "flag if cost <= t" over every distinct t, from (0, 0) to (1, 1)."""
    b = np.sort(np.asarray(benign_costs, dtype=np.float64).ravel())
    a = np.sort(np.asarray(adv_costs, dtype=np.float64).ravel())
    if b.size == 0 or a.size == 0:
        raise ValueError("both classes need at least one example")
    points = [(0.0, 0.0)]
    for t in np.unique(np.concatenate([b, a])):
        fpr = np.searchsorted(b, t, side="right") / b.size
        tpr = np.searchsorted(a, t, side="right") / a.size
        points.append((float(fpr), float(tpr)))
    return points


@dataclass
class DetectionReport:
    detector: str
    corpus: str
    n_benign: int
    n_adv: int
    true_negatives: int
    false_positives: int
    true_positives: int
    false_negatives: int
    accuracy_benign: float
    accuracy_adv: float
    accuracy: float
    fpr: float
    tpr: float
    auroc: float | None
    mean_queries_benign: float | None
    mean_queries_adv: float | None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def csv_header() -> list:
        return list(DetectionReport.__dataclass_fields__)

    def csv_row(self) -> list:
        return [("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
                for v in self.to_dict().values()]


def write_reports_csv(reports: Sequence[DetectionReport], path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DetectionReport.csv_header())
    for r in reports:
        w.writerow(r.csv_row())
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def _rate(num, den):
    return num / den if den else 0.0


def evaluate(detector, fingerprints: Sequence[Fingerprint], corpus: str = "", name: str | None = None,
             columns=None) -> DetectionReport:
    """Confusion counts and rates of `detector` over labeled fingerprints.

    The origin of each fingerprint is the ground truth. `columns` selects the
    fingerprint entries the detector reads (default: all).
    """
    costs = cost_matrix(fingerprints)
    if columns is not None:
        costs = costs[:, list(columns)]
    truth = np.array([fp.adversarial for fp in fingerprints], dtype=bool)
    queries = np.array([fp.queries for fp in fingerprints], dtype=np.float64)
    flagged = np.asarray(detector.is_adversarial(costs), dtype=bool) if len(costs) else np.zeros(0, bool)
    tn = int(np.sum(~truth & ~flagged))
    fp = int(np.sum(~truth & flagged))
    tp = int(np.sum(truth & flagged))
    fn = int(np.sum(truth & ~flagged))
    nb, na = tn + fp, tp + fn
    auc = None
    if nb and na and hasattr(detector, "benign_score"):
        score = np.asarray(detector.benign_score(costs), dtype=np.float64)
        auc = auroc(score[~truth], score[truth])
    return DetectionReport(
        detector=name or getattr(detector, "name", type(detector).__name__),
        corpus=corpus,
        n_benign=nb, n_adv=na,
        true_negatives=tn, false_positives=fp, true_positives=tp, false_negatives=fn,
        accuracy_benign=_rate(tn, nb), accuracy_adv=_rate(tp, na),
        accuracy=_rate(tn + tp, nb + na), fpr=_rate(fp, nb), tpr=_rate(tp, na),
        auroc=auc,
        mean_queries_benign=float(queries[~truth].mean()) if nb else None,
        mean_queries_adv=float(queries[truth].mean()) if na else None,
    )
