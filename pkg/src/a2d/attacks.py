"""Instrumented adversarial attacks.

Every attack reports its cost: ``iterations`` (the robustness proxy used by
the detectors) and ``queries`` (model evaluations, one forward or one
forward+backward pass on one example each).

All attacks are vectorized over a batch internally. The single-example
functions (`fgsm`, `bim`, ...) are thin wrappers over `run_attack`.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import nn

KINDS = ("FGSM", "BIM_Linf", "BIM_L2", "JSMA", "DBA", "CW_L2")
ITERATIVE_KINDS = ("BIM_Linf", "BIM_L2", "JSMA", "DBA", "CW_L2")


@dataclass(frozen=True)
class Targeting:
    mode: str = "untargeted"  # "untargeted" | "rank" | "class"
    value: int = 0

    def __post_init__(self):
        if self.mode not in ("untargeted", "rank", "class"):
            raise ValueError(f"unknown targeting mode {self.mode!r}")
        if self.mode == "rank" and self.value < 2:
            raise ValueError("target rank must be >= 2 (rank 1 is the current prediction)")

    def __str__(self):
        return "untargeted" if self.mode == "untargeted" else f"{self.mode}:{self.value}"

    @classmethod
    def parse(cls, text: str) -> "Targeting":
        text = text.strip().lower()
        if text in ("untargeted", "untarget", "none"):
            return cls()
        mode, _, value = text.partition(":")
        if mode in ("rank", "class") and value:
            return cls(mode, int(value))
        raise ValueError(f"bad targeting {text!r}; use untargeted, rank:<r> or class:<t>")


UNTARGETED = Targeting()


def target_rank(r: int) -> Targeting:
    return Targeting("rank", r)


def target_class(t: int) -> Targeting:
    return Targeting("class", t)


@dataclass(frozen=True)
class AttackConfig:
    kind: str
    epsilon: float = 0.3
    alpha: float = 0.01
    max_iter: int = 500
    theta: float = 1.0
    gamma: float = 0.1
    mse_threshold: float = 0.02
    kappa: float = 0.0
    c: float = 1.0
    targeting: Targeting = UNTARGETED
    seed: int = 0
    norm: str = "linf"  # FGSM only: "linf" or "l2"
    # DBA proposal geometry, both relative to the current distance to x
    spherical_step: float = 0.1
    source_step: float = 0.1
    max_init_draws: int = 100
    init_search_steps: int = 10  # DBA: bisection toward x from the starting noise

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {KINDS}")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.c <= 0:
            raise ValueError("c must be > 0")
        if self.epsilon < 0 or self.alpha < 0:
            raise ValueError("epsilon and alpha must be nonnegative")
        if self.norm not in ("linf", "l2"):
            raise ValueError("norm must be 'linf' or 'l2'")
        if self.kind in ("JSMA", "CW_L2") and self.targeting.mode == "untargeted":
            raise ValueError(f"{self.kind} needs a target: use rank:<r> or class:<t>")

    def replace(self, **changes) -> "AttackConfig":
        return dataclasses.replace(self, **changes)

    @property
    def is_iterative(self) -> bool:
        return self.kind in ITERATIVE_KINDS


# Parameters for generating adversarial MNIST corpora and for the defense
# attacks. The CW step size and constant are tuned for plain gradient descent
# (no binary search over c).
GENERATION_DEFAULTS = {
    "fgsm": AttackConfig("FGSM", epsilon=0.3),
    "bim": AttackConfig("BIM_Linf", epsilon=0.3, alpha=0.01, max_iter=500),
    "jsma": AttackConfig("JSMA", theta=1.0, gamma=0.1, max_iter=500, targeting=target_rank(2)),
    "cw": AttackConfig("CW_L2", kappa=0.0, c=5.0, alpha=0.05, max_iter=1000, targeting=target_rank(2)),
}

DEFENSE_DEFAULTS = {
    "bim": AttackConfig("BIM_Linf", epsilon=0.3, alpha=0.01, max_iter=500),
    "bim2": AttackConfig("BIM_L2", epsilon=2.8, alpha=0.05, max_iter=500),
    "jsma": AttackConfig("JSMA", theta=1.0, gamma=1.0, max_iter=200, targeting=target_rank(2)),
    "dba": AttackConfig("DBA", mse_threshold=0.02, max_iter=500),
}


@dataclass
class AttackOutcome:
    success: bool
    iterations: int
    queries: int
    adversarial: Optional[np.ndarray]
    final_label: int
    distortion_l0: float = 0.0
    distortion_l2: float = 0.0
    distortion_linf: float = 0.0

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "iterations": self.iterations,
            "queries": self.queries,
            "final_label": self.final_label,
            "distortion_l0": self.distortion_l0,
            "distortion_l2": self.distortion_l2,
            "distortion_linf": self.distortion_linf,
        }


def distortions(x: np.ndarray, adv: np.ndarray) -> tuple:
    delta = adv - x
    return float(np.count_nonzero(delta)), float(np.linalg.norm(delta)), float(np.max(np.abs(delta), initial=0.0))


# ---------------------------------------------------------------- helpers

def _resolve_targets(model, x: np.ndarray, targeting: Targeting, ref: np.ndarray) -> np.ndarray:
    if targeting.mode == "class":
        if not 0 <= targeting.value < model.num_classes:
            raise ValueError(f"target class {targeting.value} out of range")
        return np.full(len(x), targeting.value, dtype=np.int64)
    if targeting.mode == "rank":
        if targeting.value > model.num_classes:
            raise ValueError(f"target rank {targeting.value} exceeds number of classes")
        z = nn.forward(model, x)
        # stable sort keeps the lowest index first among equal logits
        order = np.argsort(-z, axis=1, kind="stable")
        return order[:, targeting.value - 1]
    return np.full(len(x), -1, dtype=np.int64)


def _is_done(labels_now, ref, targets, targeted):
    if targeted:
        return labels_now == targets
    return labels_now != ref


def _outcomes(x, cur, success, iters, queries, final_labels) -> list:
    out = []
    for i in range(len(x)):
        if success[i]:
            l0, l2, linf = distortions(x[i], cur[i])
            out.append(AttackOutcome(True, int(iters[i]), int(queries[i]), cur[i].copy(),
                                     int(final_labels[i]), l0, l2, linf))
        else:
            out.append(AttackOutcome(False, int(iters[i]), int(queries[i]), None, int(final_labels[i])))
    return out


def _l2_normalize(g: np.ndarray) -> tuple:
    norms = np.linalg.norm(g, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return g / safe[:, None], norms > 0


def _project(x0, xa, epsilon, norm):
    delta = xa - x0
    if norm == "linf":
        delta = np.clip(delta, -epsilon, epsilon)
    else:
        n = np.linalg.norm(delta, axis=1)
        scale = np.minimum(1.0, epsilon / np.where(n > 0, n, 1.0))
        delta = delta * scale[:, None]
    return np.clip(x0 + delta, 0.0, 1.0)


# ---------------------------------------------------------------- FGSM / BIM

def _fgsm_batch(model, x, cfg, ref, targets):
    targeted = cfg.targeting.mode != "untargeted"
    loss = nn.CrossEntropy(targets if targeted else ref)
    _, _, g = nn.logits_and_gradient(model, x, loss)
    if targeted:
        g = -g
    ok = np.ones(len(x), dtype=bool)
    if cfg.norm == "linf":
        step = cfg.epsilon * np.sign(g)
    else:
        direction, ok = _l2_normalize(g)
        step = cfg.epsilon * direction
    adv = np.clip(x + step, 0.0, 1.0)
    labels_now = nn.predict_labels(model, adv)
    success = _is_done(labels_now, ref, targets, targeted) & ok
    ones = np.ones(len(x), dtype=np.int64)
    return _outcomes(x, adv, success, ones, ones, labels_now)


def _bim_batch(model, x, cfg, ref, targets, epsilon=None, early_stop=True):
    """BIM with per-example early stop; `epsilon` may be a per-row array."""
    norm = "linf" if cfg.kind == "BIM_Linf" else "l2"
    targeted = cfg.targeting.mode != "untargeted"
    n = len(x)
    eps = np.broadcast_to(np.asarray(cfg.epsilon if epsilon is None else epsilon, dtype=np.float64), (n,))
    cur = x.copy()
    iters = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    final = np.zeros(n, dtype=np.int64)
    active = np.arange(n)
    goal = targets if targeted else ref
    for it in range(1, cfg.max_iter + 1):
        if active.size == 0:
            break
        logits, _, g = nn.logits_and_gradient(model, cur[active], nn.CrossEntropy(goal[active]))
        if it > 1 and early_stop:
            # logits of the previous iterate come for free with this gradient
            labels_now = np.argmax(logits, axis=1)
            hit = _is_done(labels_now, ref[active], targets[active], targeted)
            success[active[hit]] = True
            final[active[hit]] = labels_now[hit]
            keep = ~hit
            active, g = active[keep], g[keep]
            if active.size == 0:
                break
        if targeted:
            g = -g
        if norm == "linf":
            step = cfg.alpha * np.sign(g)
        else:
            direction, ok = _l2_normalize(g)
            if not ok.all():
                # zero gradient: no L2 direction to follow, attack fails here
                stuck = active[~ok]
                iters[stuck] = it
                final[stuck] = ref[stuck]
                active, direction = active[ok], direction[ok]
            step = cfg.alpha * direction
        cur[active] = _project(x[active], cur[active] + step, eps[active, None] if norm == "linf" else eps[active], norm)
        iters[active] = it
    if active.size:
        labels_now = nn.predict_labels(model, cur[active])
        final[active] = labels_now
        success[active] = _is_done(labels_now, ref[active], targets[active], targeted)
    queries = iters.copy()
    return _outcomes(x, cur, success, iters, queries, final)


# ---------------------------------------------------------------- JSMA

def select_pixel_pair(a: np.ndarray, b: np.ndarray, domain: np.ndarray):
    """Best pixel pair (p, q), p < q, for the two-pixel saliency map.

    Maximizes (a_p + a_q) * |b_p + b_q| over pairs in `domain` with
    a_p + a_q > 0 and b_p + b_q < 0. `a` is d Z_t / dx, `b` is the summed
    gradient of all other logits. Returns None if no pair is eligible.
    Ties go to the lexicographically smallest pair.
    """
    idx = np.flatnonzero(domain)
    if idx.size < 2:
        return None
    aa = a[idx]
    bb = b[idx]
    sa = aa[:, None] + aa[None, :]
    sb = bb[:, None] + bb[None, :]
    score = np.where((sa > 0) & (sb < 0), sa * -sb, -np.inf)
    score[np.tril_indices(idx.size)] = -np.inf
    best = int(np.argmax(score))
    i, j = divmod(best, idx.size)
    if not np.isfinite(score[i, j]):
        return None
    return int(idx[i]), int(idx[j])


def _jsma_batch(model, x, cfg, ref, targets):
    n, d = x.shape
    budget = int(np.floor(cfg.gamma * d))
    cur = x.copy()
    iters = np.zeros(n, dtype=np.int64)
    queries = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    final = ref.copy()
    modified = np.zeros((n, d), dtype=bool)
    if cfg.theta > 0:
        domain = cur < 1.0
    else:
        domain = cur > 0.0
    active = np.arange(n)
    if budget < 2:
        return _outcomes(x, cur, success, iters, queries, final)
    for it in range(1, cfg.max_iter + 2):
        if active.size == 0:
            break
        logits, jac = nn.jacobian(model, cur[active])
        labels_now = np.argmax(logits, axis=1)
        hit = labels_now == targets[active]
        if hit.any() or it > 1:
            success[active[hit]] = True
            final[active] = labels_now
            active, jac = active[~hit], jac[~hit]
        if it > cfg.max_iter:
            break
        keep = []
        for row, i in enumerate(active):
            if modified[i].sum() + 2 > budget:
                continue
            t = targets[i]
            a = jac[row, t]
            b = jac[row].sum(axis=0) - a
            pair = select_pixel_pair(a, b, domain[i])
            if pair is None:
                continue
            p, q = pair
            for pix in (p, q):
                cur[i, pix] = np.clip(cur[i, pix] + cfg.theta, 0.0, 1.0)
                modified[i, pix] = True
                if cur[i, pix] >= 1.0 or cur[i, pix] <= 0.0:
                    domain[i, pix] = False
            iters[i] = it
            queries[i] = it
            keep.append(i)
        active = np.asarray(keep, dtype=np.int64)
    return _outcomes(x, cur, success, iters, queries, final)


# ---------------------------------------------------------------- DBA

def _dba_batch(model, x, cfg, ref, pool=None):
    n, d = x.shape
    rngs = [np.random.default_rng(cfg.seed) for _ in range(n)]
    cur = x.copy()
    queries = np.zeros(n, dtype=np.int64)
    iters = np.zeros(n, dtype=np.int64)
    success = np.zeros(n, dtype=bool)
    final = ref.copy()
    started = np.zeros(n, dtype=bool)

    # starting points: the input itself if already misclassified
    labels0 = nn.predict_labels(model, x)
    queries += 1
    already = labels0 != ref
    started[already] = True
    final[already] = labels0[already]

    pending = np.flatnonzero(~started)
    for _ in range(cfg.max_init_draws):
        if pending.size == 0:
            break
        noise = np.stack([rngs[i].uniform(0.0, 1.0, d) for i in pending])
        labels_now = nn.predict_labels(model, noise)
        queries[pending] += 1
        hit = labels_now != ref[pending]
        cur[pending[hit]] = noise[hit]
        final[pending[hit]] = labels_now[hit]
        started[pending[hit]] = True
        pending = pending[~hit]
    if pending.size and pool is not None and len(pool):
        pool_labels = nn.predict_labels(model, pool)
        for i in pending:
            candidates = np.flatnonzero(pool_labels != ref[i])
            if candidates.size:
                cur[i] = pool[candidates[0]]
                final[i] = pool_labels[candidates[0]]
                queries[i] += 1
                started[i] = True

    # pull each start toward x along the segment start -> x, keeping it misclassified
    rows = np.flatnonzero(started & ~already)
    if rows.size and cfg.init_search_steps:
        lo = np.zeros(rows.size)  # blend weight on the start point known to be safe
        hi = np.ones(rows.size)
        start = cur[rows].copy()
        for _ in range(cfg.init_search_steps):
            mid = 0.5 * (lo + hi)
            probe = x[rows] + mid[:, None] * (start - x[rows])
            labels_now = nn.predict_labels(model, probe)
            queries[rows] += 1
            bad = labels_now != ref[rows]
            hi = np.where(bad, mid, hi)
            lo = np.where(bad, lo, mid)
        cur[rows] = x[rows] + hi[:, None] * (start - x[rows])
        final[rows] = nn.predict_labels(model, cur[rows])

    def mse(rows):
        return np.mean((cur[rows] - x[rows]) ** 2, axis=1)

    active = np.flatnonzero(started)
    done = mse(active) < cfg.mse_threshold
    success[active[done]] = True
    active = active[~done]
    for _ in range(cfg.max_iter):
        if active.size == 0:
            break
        src = x[active]
        adv = cur[active]
        diff = src - adv
        dist = np.linalg.norm(diff, axis=1)
        unit = diff / dist[:, None]
        eta = np.stack([rngs[i].standard_normal(d) for i in active])
        eta -= np.sum(eta * unit, axis=1, keepdims=True) * unit
        eta *= (cfg.spherical_step * dist / np.linalg.norm(eta, axis=1))[:, None]
        cand = adv + eta
        # back onto the sphere of radius `dist` around x, then toward x
        offset = cand - src
        cand = src + offset * (dist / np.linalg.norm(offset, axis=1))[:, None]
        cand = np.clip(cand + cfg.source_step * (src - cand), 0.0, 1.0)
        labels_now = nn.predict_labels(model, cand)
        queries[active] += 1
        ok = labels_now != ref[active]
        accepted = active[ok]
        cur[accepted] = cand[ok]
        final[accepted] = labels_now[ok]
        iters[accepted] += 1
        reached = mse(accepted) < cfg.mse_threshold
        success[accepted[reached]] = True
        finished = np.zeros(active.size, dtype=bool)
        finished[np.flatnonzero(ok)[reached]] = True
        active = active[~finished]
    return _outcomes(x, cur, success, iters, queries, final)


# ---------------------------------------------------------------- C&W L2

def _cw_batch(model, x, cfg, ref, targets):
    n = len(x)
    kappa = cfg.kappa
    rows = np.arange(n)

    def margin_ok(z):
        other, _ = nn.max_other(z, targets)
        return (np.argmax(z, axis=1) == targets) & (z[rows, targets] - other >= kappa)

    iters = np.zeros(n, dtype=np.int64)
    queries = np.ones(n, dtype=np.int64)
    z0 = nn.forward(model, x)
    best = x.copy()
    best_l2 = np.full(n, np.inf)
    success = margin_ok(z0)
    best_l2[success] = 0.0
    final = np.argmax(z0, axis=1)

    active = np.flatnonzero(~success)
    if active.size:
        xa = x[active]
        ta = targets[active]
        w = np.arctanh((2.0 * xa - 1.0) * (1.0 - 1e-6))
        loss = nn.MarginCW(ta, kappa)
        sub_rows = np.arange(active.size)
        for it in range(1, cfg.max_iter + 2):
            xh = 0.5 * (np.tanh(w) + 1.0)
            z, _, gz = nn.logits_and_gradient(model, xh, loss)
            other, _ = nn.max_other(z, ta)
            ok = (np.argmax(z, axis=1) == ta) & (z[sub_rows, ta] - other >= kappa)
            l2 = np.linalg.norm(xh - xa, axis=1)
            better = ok & (l2 < best_l2[active])
            best[active[better]] = xh[better]
            best_l2[active[better]] = l2[better]
            success[active[better]] = True
            final[active[better]] = ta[better]
            if it > cfg.max_iter:
                break
            grad_x = 2.0 * (xh - xa) + cfg.c * gz
            w -= cfg.alpha * grad_x * 0.5 * (1.0 - np.tanh(w) ** 2)
            iters[active] = it
            queries[active] = it + 1
        lost = active[~success[active]]
        if lost.size:
            final[lost] = np.argmax(nn.forward(model, 0.5 * (np.tanh(w[~success[active]]) + 1.0)), axis=1)
    return _outcomes(x, best, success, iters, queries, final)


# ---------------------------------------------------------------- entry points

def run_attack(model, x, cfg: AttackConfig, labels=None, pool=None) -> list:
    """Attack every row of `x`; returns one AttackOutcome per row.

    `labels` are the labels being attacked away from. They default to the
    model's own predictions, which is what a defender fingerprinting an
    unknown input uses. `pool` supplies DBA fallback starting points.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.input_dim:
        raise nn.ShapeError(f"expected {model.input_dim} values per example, got {x.shape[1]}")
    if len(x) == 0:
        return []
    if labels is None:
        ref = nn.predict_labels(model, x)
    else:
        ref = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x),)).copy()
    targets = _resolve_targets(model, x, cfg.targeting, ref)
    if cfg.kind == "FGSM":
        return _fgsm_batch(model, x, cfg, ref, targets)
    if cfg.kind in ("BIM_Linf", "BIM_L2"):
        return _bim_batch(model, x, cfg, ref, targets)
    if cfg.kind == "JSMA":
        return _jsma_batch(model, x, cfg, ref, targets)
    if cfg.kind == "DBA":
        return _dba_batch(model, x, cfg, ref, pool)
    return _cw_batch(model, x, cfg, ref, targets)


def _single(kinds, model, x, cfg, label=None, **kw):
    if cfg.kind not in kinds:
        raise ValueError(f"config kind {cfg.kind} not valid here (expected {kinds})")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise nn.ShapeError("single-example attacks take a 1-D input; use run_attack for batches")
    return run_attack(model, x, cfg, None if label is None else [label], **kw)[0]


def fgsm(model, x, cfg, label=None) -> AttackOutcome:
    return _single(("FGSM",), model, x, cfg, label)


def bim(model, x, cfg, label=None) -> AttackOutcome:
    return _single(("BIM_Linf", "BIM_L2"), model, x, cfg, label)


def jsma(model, x, cfg, label=None) -> AttackOutcome:
    return _single(("JSMA",), model, x, cfg, label)


def dba(model, x, cfg, label=None, pool=None) -> AttackOutcome:
    return _single(("DBA",), model, x, cfg, label, pool=pool)


def cw_l2(model, x, cfg, label=None) -> AttackOutcome:
    return _single(("CW_L2",), model, x, cfg, label)


# ---------------------------------------------------------------- robustness radius

def robustness_radius_batch(model, x, base: AttackConfig, bisection_steps: int = 10,
                            eps_max: float | None = None, labels=None) -> np.ndarray:
    """Smallest BIM budget that flips each row, found by bisection on [0, eps_max].

    Rows whose attack never succeeds at eps_max get eps_max; rows already
    misclassified w.r.t. `labels` get 0.
    """
    if base.kind not in ("BIM_Linf", "BIM_L2") or base.targeting.mode != "untargeted":
        raise ValueError("robustness radius needs an untargeted BIM config")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    eps_max = base.epsilon if eps_max is None else eps_max
    pred = nn.predict_labels(model, x)
    ref = pred if labels is None else np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x),)).copy()
    targets = np.full(len(x), -1)

    def succeeds(rows, eps):
        outs = _bim_batch(model, x[rows], base, ref[rows], targets[rows], epsilon=eps)
        return np.array([o.success for o in outs], dtype=bool)

    radius = np.full(len(x), float(eps_max))
    radius[pred != ref] = 0.0
    open_rows = np.flatnonzero(pred == ref)
    if open_rows.size == 0:
        return radius
    ok = succeeds(open_rows, np.full(open_rows.size, eps_max))
    open_rows = open_rows[ok]
    lo = np.zeros(open_rows.size)
    hi = np.full(open_rows.size, float(eps_max))
    for _ in range(bisection_steps):
        mid = 0.5 * (lo + hi)
        ok = succeeds(open_rows, mid)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    radius[open_rows] = hi
    return radius


def robustness_radius(model, x, base: AttackConfig, bisection_steps: int = 10,
                      eps_max: float | None = None, label=None) -> float:
    labels = None if label is None else [label]
    return float(robustness_radius_batch(model, np.asarray(x)[None, :], base, bisection_steps, eps_max, labels)[0])
