"""Command-line pipeline: train -> attack -> fingerprint -> fit-detector -> evaluate/detect, and sweep.

Every command reads the same config file and writes under ``--out``; each
artifact is recorded with its sha256 in ``manifest.json``.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attacks as A
from . import data as D
from . import detectors as det
from . import fingerprint as F
from . import hardening as H
from . import nn
from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("a2d")

COMMANDS = ("train", "attack", "fingerprint", "fit-detector", "detect", "evaluate", "sweep")
SPLITS = ("fit", "eval")


class MissingArtifact(RuntimeError):
    pass


# ---------------------------------------------------------------- workspace

class Workspace:
    """Output directory plus the manifest of artifacts written into it."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.out)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def need(self, rel: str, produced_by: str) -> Path:
        p = self.root / rel
        if not p.exists():
            raise MissingArtifact(f"{p} not found; run `a2d {produced_by}` with the same --out first")
        return p

    def record(self, command: str, rels) -> None:
        mpath = self.root / "manifest.json"
        manifest = json.loads(mpath.read_text()) if mpath.exists() else {}
        if manifest.get("config_sha256") != self.cfg.sha256():
            manifest = {}  # artifacts from another config are stale
        manifest["config_sha256"] = self.cfg.sha256()
        manifest["seed"] = self.cfg.seed
        artifacts = manifest.setdefault("artifacts", {})
        for rel in rels:
            artifacts[rel] = {"sha256": sha256_file(self.root / rel), "command": command}
        manifest["artifacts"] = dict(sorted(artifacts.items()))
        mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- data

def _blobs(cfg: RunConfig) -> tuple:
    """One blob population split into (train, test pool); both share the class centers."""
    d = cfg.data
    extra = -(-(d["fit_n"] + d["eval_n"]) // d["classes"])
    full = D.synthetic_blobs(d["classes"], d["per_class"] + extra, d["dim"], d["spread"], cfg.seed)
    n_test = extra * d["classes"]
    train, test = D.split(full, len(full) - n_test, n_test, cfg.seed)
    return train, test


def load_train(cfg: RunConfig) -> D.Dataset:
    if cfg.data["source"] == "blobs":
        full = _blobs(cfg)[0]
    else:
        full = D.load_mnist("train", cfg.data_dir or None)
    n = min(cfg.data["train_n"], len(full))
    if n == len(full):
        return full
    return D.split(full, n, 0, cfg.seed)[0]


def load_test_pool(cfg: RunConfig) -> D.Dataset:
    if cfg.data["source"] == "blobs":
        return _blobs(cfg)[1]
    return D.load_mnist("test", cfg.data_dir or None)


def test_splits(cfg: RunConfig) -> dict:
    """Index arrays into the test pool for the detector-fitting and evaluation splits."""
    pool = load_test_pool(cfg)
    fit, ev = D.split_indices(len(pool), cfg.data["fit_n"], cfg.data["eval_n"], cfg.seed)
    return {"pool": pool, "fit": fit, "eval": ev}


def corpus_paths(name: str, split: str) -> tuple:
    stem = f"corpora/{name}-{split}"
    return f"{stem}-images.idx", f"{stem}-labels.idx", f"{stem}.json"


def corpus_names(cfg: RunConfig) -> list:
    return ["benign"] + list(cfg.attacks)


def load_corpus(ws: Workspace, name: str, split: str) -> tuple:
    ip, lp, sp = corpus_paths(name, split)
    ds = D.load_idx(ws.need(ip, "attack"), ws.need(lp, "attack"), name=f"{name}-{split}")
    side = json.loads(ws.need(sp, "attack").read_text())
    return ds, np.array(side["example_ids"], dtype=np.int64)


def origin_of(name: str) -> str:
    return F.BENIGN if name == "benign" else F.adv_origin(name)


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig, ws: Workspace, args) -> int:
    train = load_train(cfg)
    m = cfg.model
    sizes = [train.input_dim, *m["hidden"], train.num_classes]
    tcfg = nn.TrainConfig(m["learning_rate"], m["epochs"], m["batch_size"], cfg.seed, m["weight_init_scale"])
    arch = nn.mlp(sizes, seed=cfg.seed, weight_init_scale=m["weight_init_scale"])
    if m["adversarial_training"]:
        model, history = H.pgd_adversarial_train(arch, train, cfg.attacks[m["adversarial_training"]], tcfg)
    else:
        model, history = nn.train(arch, train, tcfg)
    nn.save_model(model, ws.path("model.a2dm"))
    test = load_test_pool(cfg)
    summary = {"sizes": sizes, "train_examples": len(train), "history": history,
               "test_accuracy": nn.evaluate_accuracy(model, test.images, test.labels)}
    write_json(ws.path("train.json"), summary)
    ws.record("train", ["model.a2dm", "train.json"])
    print(f"trained {sizes}: test accuracy {summary['test_accuracy']:.4f}")
    return 0


def load_model(ws: Workspace) -> nn.Model:
    return nn.load_model(ws.need("model.a2dm", "train"))


def cmd_attack(cfg: RunConfig, ws: Workspace, args) -> int:
    model = load_model(ws)
    sp = test_splits(cfg)
    pool = sp["pool"]
    written = []
    summary = {}
    for split in SPLITS:
        idx = sp[split]
        x, y = pool.images[idx], pool.labels[idx]
        correct = nn.predict_labels(model, x) == y
        ids, x, y = idx[correct], x[correct], y[correct]
        corpora = {"benign": (ids, x, y, None)}
        for name, acfg in cfg.attacks.items():
            outcomes = A.run_attack(model, x, acfg, labels=y)
            ok = np.array([o.success for o in outcomes], dtype=bool)
            advs = np.array([o.adversarial for o in outcomes if o.success]).reshape(-1, x.shape[1])
            corpora[name] = (ids[ok], advs, y[ok], [o.to_dict() for o, s in zip(outcomes, ok) if s])
            summary[f"{name}-{split}"] = {"attempts": len(x), "successes": int(ok.sum())}
            log.info("%s/%s: %d/%d successful", name, split, ok.sum(), len(x))
        for name, (cids, cx, cy, records) in corpora.items():
            ip, lp, jp = corpus_paths(name, split)
            D.write_idx(D.Dataset(cx.reshape(-1, pool.input_dim), cy, pool.num_classes),
                        ws.path(ip), ws.path(lp), lossless=True)
            side = {"name": name, "split": split, "example_ids": cids.tolist()}
            if records is not None:
                side["attack"] = _attack_dict(cfg.attacks[name])
                side["outcomes"] = records
            write_json(ws.path(jp), side)
            written += [ip, lp, jp]
    write_json(ws.path("attack.json"), summary)
    ws.record("attack", written + ["attack.json"])
    for key, s in summary.items():
        print(f"{key}: {s['successes']}/{s['attempts']} adversarial examples")
    return 0


def _attack_dict(c: A.AttackConfig) -> dict:
    d = dataclasses.asdict(c)
    d["targeting"] = str(c.targeting)
    return d


def _attack_from_dict(d: dict) -> A.AttackConfig:
    d = dict(d)
    d["targeting"] = A.Targeting.parse(d["targeting"])
    return A.AttackConfig(**d)


def _dba_pool(cfg: RunConfig):
    # DBA falls back to a benign training image of another class when noise never works
    train = load_train(cfg)
    return train.images[: min(1000, len(train))]


def cmd_fingerprint(cfg: RunConfig, ws: Workspace, args) -> int:
    model = load_model(ws)
    defenses = list(cfg.defenses.values())
    pool = _dba_pool(cfg) if any(d.kind == "DBA" for d in defenses) else None
    written = []
    queries = {"defenses": list(cfg.defenses), "corpora": {}}
    eval_groups = {}
    for split in SPLITS:
        for name in corpus_names(cfg):
            ds, ids = load_corpus(ws, name, split)
            batch = F.fingerprint_batch(model, ds.images, defenses, cfg.workers, origin_of(name), ids, pool)
            rel = f"fingerprints/{name}-{split}.csv"
            F.save_csv(batch.fingerprints, ws.path(rel))
            written.append(rel)
            qm = batch.query_matrix
            queries["corpora"][f"{name}-{split}"] = {
                "examples": len(batch),
                "total_queries": batch.total_queries,
                "mean_queries": {d: (float(qm[:, j].mean()) if len(batch) else 0.0)
                                 for j, d in enumerate(cfg.defenses)},
            }
            log.info("fingerprinted %s-%s: %d examples, %.1fs", name, split, len(batch), batch.seconds)
            if split == "eval" and len(batch):
                eval_groups[name] = batch.fingerprints
    write_json(ws.path("fingerprints/queries.json"), queries)
    written.append("fingerprints/queries.json")
    if len(eval_groups) >= 2:
        names, mat = F.set_distance_matrix(eval_groups, seed=cfg.seed)
        rel = "fingerprints/set_distance.csv"
        with open(ws.path(rel), "w") as fh:
            fh.write("group," + ",".join(names) + "\n")
            for name, row in zip(names, mat):
                fh.write(name + "," + ",".join(f"{v:.6f}" for v in row) + "\n")
        written.append(rel)
    ws.record("fingerprint", written)
    print(f"wrote {len(written)} fingerprint artifacts under {ws.root / 'fingerprints'}")
    return 0


def _columns(cfg: RunConfig) -> list:
    order = list(cfg.defenses)
    return [order.index(n) for n in cfg.detector_defenses()]


def _load_fps(ws: Workspace, name: str, split: str) -> list:
    return F.load_csv(ws.need(f"fingerprints/{name}-{split}.csv", "fingerprint"))


def _select(fps: list, cols: list) -> list:
    return [F.Fingerprint(tuple(fp.costs[c] for c in cols), fp.example_id, fp.origin, fp.queries) for fp in fps]


def cmd_fit_detector(cfg: RunConfig, ws: Workspace, args) -> int:
    cols = _columns(cfg)
    names = cfg.detector_defenses()
    d = cfg.detector
    benign = _select(_load_fps(ws, "benign", "fit"), cols)
    if d["type"] == "knn":
        advs = {a: _select(_load_fps(ws, a, "fit"), cols) for a in cfg.attacks}
        if not any(advs.values()):
            raise MissingArtifact("a K-NN detector needs adversarial fit corpora; add [attack.*] sections")
        # balanced reference set: each attack contributes an equal share of len(benign)
        rng = np.random.default_rng(cfg.seed)
        share = max(1, len(benign) // max(1, len(advs)))
        refs = list(benign)
        for a, fps in advs.items():
            take = rng.choice(len(fps), size=min(share, len(fps)), replace=False) if fps else []
            refs += [fps[i] for i in sorted(take)]
        detector = det.knn_fit(refs, min(d["k"], len(refs)), name="knn:" + "+".join(names))
    elif d["type"] == "zscore":
        detector = det.zscore_fit([fp.costs[0] for fp in benign], d["h"], name=f"zscore:{names[0]}")
    else:
        detector = det.ensemble_fit(F.cost_matrix(benign), d["h"], d["vote_k"], names=names)
        detector.name = "ensemble:" + "+".join(names)
    extra = {"defenses": [{"name": n, "attack": _attack_dict(cfg.defenses[n])} for n in names],
             "model_sha256": sha256_file(ws.need("model.a2dm", "train"))}
    det.save_detector(detector, ws.path("detector.json"), extra)
    ws.record("fit-detector", ["detector.json"])
    print(f"fitted {detector.name} on {len(benign)} benign fingerprints")
    return 0


def load_fitted(ws: Workspace) -> tuple:
    detector, extra = det.load_detector(ws.need("detector.json", "fit-detector"))
    defenses = [(d["name"], _attack_from_dict(d["attack"])) for d in extra["defenses"]]
    return detector, defenses


def cmd_evaluate(cfg: RunConfig, ws: Workspace, args) -> int:
    detector, defenses = load_fitted(ws)
    order = list(cfg.defenses)
    try:
        cols = [order.index(n) for n, _ in defenses]
    except ValueError as exc:
        raise MissingArtifact("detector.json does not match the configured defenses; rerun fit-detector") from exc
    benign = _load_fps(ws, "benign", "eval")
    reports = []
    aurocs = []
    everything = list(benign)
    for a in cfg.attacks:
        adv = _load_fps(ws, a, "eval")
        everything += adv
        reports.append(det.evaluate(detector, _select(benign + adv, cols), corpus=a))
        for j, dname in enumerate(order):
            if benign and adv:
                aurocs.append({"defense": dname, "attack": a,
                               "auroc": det.auroc([fp.costs[j] for fp in benign], [fp.costs[j] for fp in adv])})
    reports.append(det.evaluate(detector, _select(everything, cols), corpus="all"))
    write_json(ws.path("report.json"), {"reports": [r.to_dict() for r in reports], "auroc": aurocs})
    det.write_reports_csv(reports, ws.path("report.csv"))
    with open(ws.path("auroc.csv"), "w") as fh:
        fh.write("defense,attack,auroc\n")
        for row in aurocs:
            fh.write(f"{row['defense']},{row['attack']},{row['auroc']:.6f}\n")
    ws.record("evaluate", ["report.json", "report.csv", "auroc.csv"])
    for r in reports:
        print(f"{r.corpus}: acc_benign {r.accuracy_benign:.3f} acc_adv {r.accuracy_adv:.3f} "
              f"auroc {'' if r.auroc is None else f'{r.auroc:.4f}'}")
    return 0


def cmd_detect(cfg: RunConfig, ws: Workspace, args) -> int:
    if not args.input:
        raise ConfigError("detect needs --input <IDX image file>")
    model = load_model(ws)
    detector, defenses = load_fitted(ws)
    images = D.load_idx_images(args.input)
    if images.shape[1] != model.input_dim:
        raise nn.ShapeError(f"{args.input}: images have {images.shape[1]} pixels, model expects {model.input_dim}")
    configs = [c for _, c in defenses]
    pool = _dba_pool(cfg) if any(c.kind == "DBA" for c in configs) else None
    batch = F.fingerprint_batch(model, images, configs, cfg.workers, pool=pool)
    costs = batch.costs()
    flags = detector.is_adversarial(costs)
    labels = nn.predict_labels(model, images)
    for i, fp in enumerate(batch.fingerprints):
        parts = [f"image {i}: {det.verdict(bool(flags[i]))}", f"label {labels[i]}",
                 "costs " + " ".join(f"{n}={c}" for (n, _), c in zip(defenses, fp.costs))]
        if isinstance(detector, det.EnsembleZ):
            parts.append("z " + " ".join(f"{n}={z:.3f}" for (n, _), z in zip(defenses, detector.member_z(costs[i])[0])))
        elif isinstance(detector, det.ZScoreDetector):
            parts.append(f"z {defenses[0][0]}={float(detector.zscore(costs[i, 0])):.3f}")
        else:
            parts.append(f"adversarial votes {int(detector.adversarial_votes(costs[i])[0])}/{detector.k}")
        print("  ".join(parts))
    return 0


def cmd_sweep(cfg: RunConfig, ws: Workspace, args) -> int:
    model = load_model(ws)
    detector, defenses = load_fitted(ws)
    sw = cfg.sweep
    benign_eval, _ = load_corpus(ws, "benign", "eval")
    inputs = benign_eval.subset(np.arange(min(sw["n"], len(benign_eval))))
    written = []
    ae = None
    if sw["ae"]:
        train = load_train(cfg)
        n = min(sw["ae_train_n"], len(train))
        ae_data = train if n == len(train) else D.split(train, n, 0, cfg.seed)[0]
        acfg = nn.TrainConfig(sw["ae_learning_rate"], sw["ae_epochs"], 64, cfg.seed)
        ae_model = H.train_autoencoder(ae_data, sw["ae_bottleneck"], acfg)
        nn.save_model(ae_model, ws.path("ae.a2dm"))
        written.append("ae.a2dm")
        benign_fit, _ = load_corpus(ws, "benign", "fit")
        ae = H.ae_fit_threshold(ae_model, benign_fit, sw["ae_fpr"])
    configs = [c for _, c in defenses]
    pool = _dba_pool(cfg) if any(c.kind == "DBA" for c in configs) else None
    result = H.kappa_sweep(model, inputs, sw["kappas"], cfg.sweep_attack(), a2d=(configs, detector), ae=ae,
                           l2_cap=sw["l2_cap"], adversarially_trained=bool(cfg.model["adversarial_training"]),
                           workers=cfg.workers, pool=pool)
    result.save_csv(ws.path("sweep.csv"))
    result.save_json(ws.path("sweep.json"))
    written += ["sweep.csv", "sweep.json"]
    ws.record("sweep", written)
    for r in result.rows:
        rates = " ".join(f"{d}={r.detection[d]:.3f}" for d in result.defenses)
        print(f"kappa {r.kappa:g}: asr {r.asr:.3f} mean_l2 {r.mean_l2 if r.mean_l2 is None else round(r.mean_l2, 3)} "
              f"detection {rates}")
    return 0


HANDLERS = {
    "train": cmd_train,
    "attack": cmd_attack,
    "fingerprint": cmd_fingerprint,
    "fit-detector": cmd_fit_detector,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="a2d", description="Detect adversarial examples by their attack cost.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="global seed (overrides the config)")
    p.add_argument("--workers", type=int, help="threads for fingerprinting")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--data-dir", help=f"MNIST IDX directory (else ${D.DATA_DIR_ENV} or {D.DEFAULT_DATA_DIR})")
    p.add_argument("--input", help="detect: IDX image file to classify")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers,
                                        "out": args.out, "data_dir": args.data_dir})
        ws = Workspace(cfg)
        return HANDLERS[args.command](cfg, ws, args)
    except (ConfigError, MissingArtifact, FileNotFoundError, D.IdxFormatError, nn.FormatError,
            nn.ShapeError, det.FitError) as exc:
        print(f"a2d {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
