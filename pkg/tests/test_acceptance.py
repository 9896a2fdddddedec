"""Acceptance gate: twelve criteria on a desk-scale MNIST run.

Every test records one PASS/FAIL line (see the "acceptance criteria"
section of the pytest summary) and then asserts the same verdict.
The heavy experiment lives in acceptance_experiment.py and runs once per
session; set A2D_ACCEPTANCE_CACHE to reuse a finished run.
"""
import time

import numpy as np
import pytest

from a2d import detectors as D
from a2d.fingerprint import BENIGN, Fingerprint, adv_origin, set_distance_matrix
from acceptance_experiment import load_or_run
from oracles import BOXCOX_FAMILIES, boxcox_sample, brute_knn, fine_grid_lambda, pairwise_auroc

pytestmark = pytest.mark.acceptance

ATTACKS = ["fgsm", "bim", "jsma", "cw"]
DEFENSES = ["bim", "bim2", "jsma", "dba"]
WHITE_BOX = ["bim", "bim2", "jsma"]


@pytest.fixture(scope="module")
def exp():
    if not __import__("a2d").data.find_mnist("train"):
        pytest.skip("MNIST not available; set A2D_DATA_DIR")
    return load_or_run()


def costs(exp, split, name):
    return np.array(exp["fingerprints"][split][name]["costs"], dtype=float)


def queries(exp, split, name):
    return np.array(exp["fingerprints"][split][name]["queries"], dtype=float)


def adv_costs(exp, split="eval"):
    return np.concatenate([costs(exp, split, a) for a in ATTACKS])


def fingerprints(exp, split, names):
    out, i = [], 0
    for name in names:
        origin = BENIGN if name == "benign" else adv_origin(name)
        for c in costs(exp, split, name):
            out.append(Fingerprint(tuple(int(v) for v in c), i, origin))
            i += 1
    return out


# ---------------------------------------------------------------- 1

def test_c01_gradient_fidelity(exp, criterion_line):
    g = exp["gradcheck"]
    worst = max(v["worst_rel_error"] for v in g.values())
    coords = {k: v["coordinates"] for k, v in g.items()}
    secs = sum(v["seconds"] for v in g.values())
    ok = worst < 1e-4 and min(coords.values()) >= 1000 and secs < 60
    assert criterion_line(1, ok, "gradient fidelity",
                          f"worst relative error {worst:.2e}, coordinates {coords}, {secs:.1f} s")


# ---------------------------------------------------------------- 2

def test_c02_model_quality(exp, criterion_line):
    m = exp["model"]
    ok = m["train_n"] >= 10000 and m["test_accuracy"] >= 0.95 and m["seconds"] < 600
    assert criterion_line(2, ok, "model quality",
                          f"{m['train_n']} training images, test accuracy {m['test_accuracy']:.4f}, "
                          f"{m['seconds']:.0f} s")


# ---------------------------------------------------------------- 3

def test_c03_cost_separation(exp, criterion_line):
    benign_median = np.median(costs(exp, "eval", "benign")[:, 0])
    medians = {a: float(np.median(costs(exp, "eval", a)[:, 0])) for a in ("fgsm", "jsma", "cw")}
    medians_ok = all(m < benign_median for m in medians.values())
    # set distances on the JSMA_d cost column
    j = DEFENSES.index("jsma")
    groups = {}
    for name in ["benign"] + ATTACKS:
        groups[name] = [Fingerprint((int(c[j]),), i) for i, c in enumerate(costs(exp, "eval", name))]
    names, dist = set_distance_matrix(groups, seed=0)
    b = names.index("benign")
    adv = [i for i in range(len(names)) if i != b]
    benign_vs_adv = min(dist[b, i] for i in adv)
    adv_vs_adv = max(dist[i, k] for i in adv for k in adv)
    dist_ok = benign_vs_adv > adv_vs_adv
    assert criterion_line(
        3, medians_ok and dist_ok, "cost separation",
        f"BIM_d medians benign {benign_median:g} vs {medians} ({'ok' if medians_ok else 'not below'}); "
        f"JSMA_d set distance min benign-adv {benign_vs_adv:.2f} vs max adv-adv {adv_vs_adv:.2f} "
        f"({'ok' if dist_ok else 'overlap'})")


# ---------------------------------------------------------------- 4

def test_c04_auroc(exp, criterion_line):
    benign = costs(exp, "eval", "benign")[:, 0]
    floors = {"bim": 0.95, "cw": 0.95, "fgsm": 0.93, "jsma": 0.93}
    aucs, sizes = {}, {}
    for a in ATTACKS:
        c = costs(exp, "eval", a)[:, 0]
        aucs[a] = D.auroc(benign, c)
        sizes[a] = len(c)
    secs = exp["timing"]["eval_total"]
    ok = (all(aucs[a] >= floors[a] for a in ATTACKS) and len(benign) >= 500
          and min(sizes.values()) >= 500 and secs < 1800)
    shown = ", ".join(f"{a} {aucs[a]:.4f} (need {floors[a]})" for a in ATTACKS)
    assert criterion_line(4, ok, "BIM_d AUROC",
                          f"{shown}; {len(benign)} benign + {min(sizes.values())}+ per attack, {secs:.0f} s")


# ---------------------------------------------------------------- 5

def test_c05_zscore_operating_point(exp, criterion_line):
    det = D.zscore_fit(costs(exp, "fit", "benign")[:, 0])
    fpr = float(det.is_adversarial(costs(exp, "eval", "benign")[:, 0]).mean())
    adv_acc = float(det.is_adversarial(adv_costs(exp)[:, 0]).mean())
    ok = abs(fpr - 0.10) <= 0.04 and adv_acc >= 0.95
    assert criterion_line(5, ok, "Z-score operating point",
                          f"held-out benign FPR {fpr:.3f} (10% +- 4), BIM_d adversarial accuracy {adv_acc:.3f}, "
                          f"lambda {det.boxcox_lambda:g}")


# ---------------------------------------------------------------- 6

def test_c06_query_efficiency(exp, criterion_line):
    benign_q = queries(exp, "eval", "benign").mean(axis=0)
    adv_q = np.concatenate([queries(exp, "eval", a) for a in ATTACKS]).mean(axis=0)
    means = {d: (float(benign_q[DEFENSES.index(d)]), float(adv_q[DEFENSES.index(d)])) for d in WHITE_BOX}
    ok = all(b > a for b, a in means.values()) and means["bim"][1] <= 40
    shown = ", ".join(f"{d} {b:.1f}/{a:.1f}" for d, (b, a) in means.items())
    assert criterion_line(6, ok, "query efficiency", f"mean queries benign/adversarial: {shown}")


# ---------------------------------------------------------------- 7

def test_c07_knn(exp, criterion_line):
    # one detector per (defense, attack) from balanced references, scored on that attack's mixed corpus
    per = exp["settings"]["end_per_attack"]
    avg = {}
    for j, d in enumerate(DEFENSES):
        accs = []
        for a in ATTACKS:
            det = D.knn_fit(fingerprints(exp, "fit", ["benign", a]), k=100, columns=[j], name=d)
            accs.append(D.evaluate(det, fingerprints(exp, "eval", ["benign", a]), columns=[j]).accuracy)
        avg[d] = float(np.mean(accs))
    # END: every defense cost, references mixing all attacks
    refs = fingerprints(exp, "fit", ["benign"])
    for a in ATTACKS:
        refs += fingerprints(exp, "fit", [a])[:per]
    refs = [Fingerprint(f.costs, i, f.origin) for i, f in enumerate(refs)]
    end = D.knn_fit(refs, k=100, name="END")
    avg["END"] = float(np.mean([D.evaluate(end, fingerprints(exp, "eval", ["benign", a])).accuracy
                                for a in ATTACKS]))
    best_single = max(avg[d] for d in DEFENSES)
    ok = avg["bim"] >= 0.90 and avg["END"] >= best_single - 0.03
    shown = ", ".join(f"{k} {v:.3f}" for k, v in avg.items())
    assert criterion_line(7, ok, "K-NN (K=100)", f"average accuracy over attack corpora: {shown}")


# ---------------------------------------------------------------- 8

def test_c08_oracle_equivalences(criterion_line):
    timings, ok = {}, True
    start = time.perf_counter()
    for seed in range(5):
        rng = np.random.default_rng(seed)
        refs = rng.integers(0, 8, (200, 2)).astype(float)
        adv = rng.uniform(size=200) < 0.5
        ids = rng.permutation(5000)[:200]
        for k in (1, 2, 10, 100):
            det = D.KnnDetector(refs, adv, ids, k)
            probes = rng.integers(0, 8, (50, 2)).astype(float)
            for p, flag, nb in zip(probes, det.is_adversarial(probes), det.neighbors(probes)):
                want_flag, want_ids = brute_knn(refs, adv, ids, k, p)
                ok &= bool(flag == want_flag) and sorted(det.example_ids[nb].tolist()) == want_ids
    timings["knn"] = time.perf_counter() - start

    start = time.perf_counter()
    worst_auc = 0.0
    for seed in range(300):
        rng = np.random.default_rng(seed)
        b = rng.integers(0, 20, rng.integers(1, 40))
        a = rng.integers(0, 20, rng.integers(1, 40))
        worst_auc = max(worst_auc, abs(D.auroc(b, a) - pairwise_auroc(b, a)))
    ok &= worst_auc <= 1e-12
    timings["auroc"] = time.perf_counter() - start

    start = time.perf_counter()
    worst_lam = 0.0
    for seed in range(40):
        c = boxcox_sample(np.random.default_rng(seed), BOXCOX_FAMILIES[seed % 4])
        lam, offset = D.boxcox_fit(c)
        worst_lam = max(worst_lam, abs(lam - fine_grid_lambda(c + offset)))
    ok &= worst_lam <= 0.01 + 1e-12
    timings["boxcox"] = time.perf_counter() - start
    ok &= all(t < 60 for t in timings.values())
    assert criterion_line(8, ok, "oracle equivalences",
                          f"K-NN exact, AUROC max diff {worst_auc:.1e}, Box-Cox max lambda gap {worst_lam:.3f}; "
                          + ", ".join(f"{k} {v:.1f} s" for k, v in timings.items()))


# ---------------------------------------------------------------- 9

def test_c09_adaptive_trend(exp, criterion_line):
    rows = {r["kappa"]: r for r in exp["sweep"]["rows"]}
    ks = [0.0, 2.0, 4.0, 6.0, 8.0]
    l2 = [rows[k]["mean_l2"] for k in ks]
    cost = [rows[k]["mean_costs"][0] if rows[k]["mean_costs"] else None for k in ks]
    ok = None not in l2 and None not in cost
    ok = ok and all(b > a for a, b in zip(l2, l2[1:])) and all(b > a for a, b in zip(cost, cost[1:]))
    ratio = cost[-1] / cost[0] if ok else float("nan")
    ok = ok and ratio >= 5
    assert criterion_line(9, ok, "adaptive trend",
                          "mean L2 " + " ".join(f"{v:.3f}" for v in l2)
                          + "; mean BIM_d cost " + " ".join(f"{v:.2f}" for v in cost)
                          + f"; ratio kappa 8 / kappa 0 {ratio:.2f}")


# ---------------------------------------------------------------- 10

def test_c10_combined_defense(exp, criterion_line):
    rows = exp["sweep"]["rows"]
    worst_residual = max(r["residual_asr"]["A2D+AE"] for r in rows)
    low = [r for r in rows if r["kappa"] <= 10]
    worst_a2d = min(r["detection"]["A2D"] for r in low)
    secs = exp["sweep"]["seconds"]
    ok = worst_residual <= 0.05 and worst_a2d >= 0.95 and secs < 3600
    per_kappa = " ".join(f"{r['kappa']:g}:{r['detection']['A2D']:.2f}/{r['residual_asr']['A2D+AE']:.2f}"
                         for r in rows)
    assert criterion_line(10, ok, "combined defense",
                          f"max A2D+AE residual ASR {worst_residual:.3f}, min A2D detection (kappa <= 10) "
                          f"{worst_a2d:.3f}; kappa:A2D detection/residual {per_kappa}; {secs:.0f} s")


# ---------------------------------------------------------------- 11

def test_c11_adversarial_training(exp, criterion_line):
    plain = next(r for r in exp["sweep"]["rows"] if r["kappa"] == 0)
    robust = exp["pgd"]["sweep"]["rows"][0]
    ok = robust["asr"] < plain["asr"] and robust["detection"]["A2D"] >= 0.95
    assert criterion_line(11, ok, "adversarial training",
                          f"C&W kappa 0 success {plain['asr']:.3f} plain vs {robust['asr']:.3f} PGD "
                          f"(clean accuracy {exp['pgd']['test_accuracy']:.4f}); A2D detects "
                          f"{robust['detection']['A2D']:.3f} of {robust['successes']} survivors")


# ---------------------------------------------------------------- 12

def test_c12_determinism(exp, criterion_line):
    c = exp["cli"]
    detail = (f"{c.get('artifacts', 0)} artifacts byte-identical across two MNIST pipeline runs" if c["ok"]
              else f"differs: {c.get('differing') or c.get('error')}")
    assert criterion_line(12, c["ok"], "determinism", detail)
