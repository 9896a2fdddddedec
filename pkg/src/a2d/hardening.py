"""Adaptive-attack evaluation.

Confidence sweeps with C&W-L2, the autoencoder (reconstruction error)
detector for large perturbations, PGD adversarial training, and the
combined "flag if any defense flags" rule.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import attacks as A
from . import fingerprint as F
from . import nn

L2_CAP_MNIST = 8.4
L2_CAP_CIFAR10 = 1.6  # recorded for completeness; no CIFAR model here
AE_HIDDEN = 128
AE_BOTTLENECK = 32
DEFAULT_AE_FPR = 0.01


# ---------------------------------------------------------------- autoencoder detector

def autoencoder(input_dim: int = 784, hidden: int = AE_HIDDEN, bottleneck: int = AE_BOTTLENECK,
                seed: int = 0, weight_init_scale: float = 1.0) -> nn.Model:
    return nn.mlp([input_dim, hidden, bottleneck, hidden, input_dim], seed=seed,
                  weight_init_scale=weight_init_scale)


def train_autoencoder(benign, bottleneck_dim: int = AE_BOTTLENECK, cfg: nn.TrainConfig | None = None,
                      hidden: int = AE_HIDDEN) -> nn.Model:
    """Fit an autoencoder to benign images (array or Dataset) on per-pixel MSE."""
    x = np.asarray(getattr(benign, "images", benign), dtype=np.float64)
    # the loss averages over pixels, so gradients are small and the step is large
    cfg = cfg or nn.TrainConfig(learning_rate=2.0, epochs=20, batch_size=64)
    model = autoencoder(x.shape[1], hidden, bottleneck_dim, cfg.seed, cfg.weight_init_scale)
    trained, _ = nn.train_regression(model, x, x, cfg)
    return trained


def reconstruction_error(ae: nn.Model, x) -> np.ndarray:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    out = np.empty(len(x))
    for s in range(0, len(x), 2048):
        xb = x[s:s + 2048]
        out[s:s + 2048] = np.mean((nn.forward(ae, xb) - xb) ** 2, axis=1)
    return out


@dataclass
class AeDetector:
    autoencoder: nn.Model
    tau: float

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def is_adversarial(self, x) -> np.ndarray:
        return reconstruction_error(self.autoencoder, x) > self.tau


def ae_fit_threshold(ae: nn.Model, benign, target_fpr: float = DEFAULT_AE_FPR) -> AeDetector:
    """Set tau to the (1 - target_fpr) quantile of benign reconstruction error."""
    if not 0 <= target_fpr < 1:
        raise ValueError("target_fpr must lie in [0, 1)")
    errors = reconstruction_error(ae, np.asarray(getattr(benign, "images", benign)))
    return AeDetector(ae, float(np.quantile(errors, 1.0 - target_fpr)))


def ae_classify(det: AeDetector, x) -> str:
    return "adversarial" if bool(det.is_adversarial(x)[0]) else "benign"


# ---------------------------------------------------------------- adversarial training

def pgd_perturbation(pgd: A.AttackConfig):
    """Batch hook for `nn.train`: random start in the eps-ball, then
    `pgd.max_iter` signed-gradient steps on the true labels, no early stop."""
    if pgd.kind != "BIM_Linf":
        raise ValueError("adversarial training expects an L-inf BIM config as inner maximizer")
    eps, alpha, steps = pgd.epsilon, pgd.alpha, pgd.max_iter

    def perturb(model, xb, yb, rng):
        start = rng.uniform(-eps, eps, size=xb.shape)
        cur = np.clip(xb + start, 0.0, 1.0)
        loss = nn.CrossEntropy(yb)
        for _ in range(steps):
            _, _, g = nn.logits_and_gradient(model, cur, loss)
            cur = np.clip(np.clip(cur + alpha * np.sign(g) - xb, -eps, eps) + xb, 0.0, 1.0)
        return cur

    return perturb


def pgd_adversarial_train(arch: nn.Model, data, pgd: A.AttackConfig, cfg: nn.TrainConfig) -> tuple:
    """Train `arch` (initial weights) on PGD-perturbed batches. Returns (model, history)."""
    return nn.train(arch, data, cfg, perturb=pgd_perturbation(pgd))


# ---------------------------------------------------------------- kappa sweep

@dataclass
class SweepRow:
    kappa: float
    attempts: int
    successes: int  # successful within the L2 cap
    asr: float  # without any defense
    mean_l2: float | None
    mean_costs: list  # mean defense-attack cost per A2D defense over successes
    detection: dict  # defense name -> detection rate over successes
    residual_asr: dict  # defense name -> fraction of attempts successful and undetected


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)
    defenses: list = field(default_factory=list)
    l2_cap: float = L2_CAP_MNIST
    adversarially_trained: bool = False

    def row(self, kappa) -> SweepRow:
        for r in self.rows:
            if r.kappa == kappa:
                return r
        raise KeyError(kappa)

    def to_dict(self) -> dict:
        return {"defenses": self.defenses, "l2_cap": self.l2_cap,
                "adversarially_trained": self.adversarially_trained,
                "rows": [asdict(r) for r in self.rows]}

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def save_csv(self, path) -> None:
        width = max((len(r.mean_costs) for r in self.rows), default=0)
        header = ["kappa", "attempts", "successes", "asr", "mean_l2"]
        header += [f"mean_cost_{j + 1}" for j in range(width)]
        header += [f"detect_{d}" for d in self.defenses] + [f"residual_asr_{d}" for d in self.defenses]
        fmt = lambda v: "" if v is None else f"{v:.6f}"  # noqa: E731
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                w.writerow([f"{r.kappa:g}", r.attempts, r.successes, fmt(r.asr), fmt(r.mean_l2)]
                           + [fmt(c) for c in r.mean_costs]
                           + [fmt(r.detection[d]) for d in self.defenses]
                           + [fmt(r.residual_asr[d]) for d in self.defenses])


def a2d_flags(model, x, defenses: Sequence[A.AttackConfig], detector, workers: int = 1, pool=None) -> tuple:
    """Fingerprint `x` with `defenses` and apply a fitted detector. Returns (flags, costs)."""
    batch = F.fingerprint_batch(model, x, defenses, workers=workers, pool=pool)
    costs = batch.costs()
    if len(costs) == 0:
        return np.zeros(0, dtype=bool), costs
    return np.asarray(detector.is_adversarial(costs), dtype=bool), costs


def kappa_sweep(model, inputs, kappas: Sequence[float], cw: A.AttackConfig, *,
                a2d=None, ae: AeDetector | None = None, l2_cap: float = L2_CAP_MNIST,
                labels=None, adversarially_trained: bool = False, workers: int = 1,
                pool=None) -> SweepResult:
    """Craft C&W-L2 examples at each confidence and measure each defense.

    `a2d` is ``(defense configs, fitted detector)``. An attempt whose L2
    distortion exceeds `l2_cap` counts as a failed attack. Detection rates
    are over successful attempts (1.0 when there are none); residual ASR
    is over all attempts. "A2D+AE" flags if either member flags.
    """
    if not len(kappas):
        raise ValueError("kappas must be nonempty")
    if not l2_cap > 0:
        raise ValueError("l2_cap must be positive")
    if cw.kind != "CW_L2":
        raise ValueError("kappa sweep uses a CW_L2 base config")
    x = np.atleast_2d(np.asarray(getattr(inputs, "images", inputs), dtype=np.float64))
    if labels is None and hasattr(inputs, "labels"):
        labels = inputs.labels
    names = []
    if a2d is not None:
        names.append("A2D")
    if ae is not None:
        names.append("AE")
    if a2d is not None and ae is not None:
        names.append("A2D+AE")
    result = SweepResult(defenses=names, l2_cap=l2_cap, adversarially_trained=adversarially_trained)
    for kappa in kappas:
        outcomes = A.run_attack(model, x, cw.replace(kappa=float(kappa)), labels=labels)
        ok = np.array([o.success and o.distortion_l2 <= l2_cap for o in outcomes], dtype=bool)
        advs = np.array([o.adversarial for o, s in zip(outcomes, ok) if s]).reshape(-1, x.shape[1])
        n, s = len(x), int(ok.sum())
        flags = {}
        mean_costs = []
        if a2d is not None:
            defenses, detector = a2d
            flags["A2D"], costs = a2d_flags(model, advs, defenses, detector, workers, pool)
            mean_costs = [float(v) for v in costs.mean(axis=0)] if s else []
        if ae is not None:
            flags["AE"] = ae.is_adversarial(advs) if s else np.zeros(0, dtype=bool)
        if "A2D+AE" in names:
            flags["A2D+AE"] = flags["A2D"] | flags["AE"]
        result.rows.append(SweepRow(
            kappa=float(kappa),
            attempts=n,
            successes=s,
            asr=s / n if n else 0.0,
            mean_l2=float(np.mean([o.distortion_l2 for o, v in zip(outcomes, ok) if v])) if s else None,
            mean_costs=mean_costs,
            detection={d: float(f.mean()) if s else 1.0 for d, f in flags.items()},
            residual_asr={d: float(np.sum(~f)) / n if n else 0.0 for d, f in flags.items()},
        ))
    return result
