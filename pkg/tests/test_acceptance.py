"""Acceptance criteria 1-10. Each test prints one ``CRITERION k: PASS|FAIL`` line.

Criteria 7, 8 and 10 share one synthetic intervention run (five seeds, about
40k training rows per seed) and are marked slow.
"""

import itertools
import math
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import max_grad_error, record_criterion, tiny_config
from disectr.aggregator import LossWeights
from disectr.config import load_config, from_dict
from disectr.disentangler import cluster_project, discrepancy_loss, select_shared, weak_supervise
from disectr.encoder import probsparse_attention
from disectr.experiment import run_config
from disectr.metrics import auc, gauc, logloss
from disectr.model import ModelConfig, build_model
from disectr.ood import GroupRule, OodEasySpec, build_ood_easy, keep_ratio
from test_metrics import brute_gauc, pair_count_auc
from test_ood import _price_dataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _t(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


# 1 ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    worst = {}
    for mode in ("ood_easy", "adaptive"):
        extra = {"affected_field": 2, "affected_threshold": 2} if mode == "ood_easy" else {}
        cfg = ModelConfig(M=2, H=1, h=2, d=3, c=2, weak_mode=mode, **extra)
        model = build_model([5, 4, 5, 3], cfg, seed=11, dtype=torch.float64)
        pos = torch.tensor([[1, 2, 1, 0], [3, 1, 4, 2]])
        neg = torch.tensor([[1, 3, 2, 1], [3, 0, 4, 1]])
        weights = LossWeights(alpha=0.1, lam=1e-3, beta=0.5)

        def value():
            return model.pair_loss(pos, neg, weights).total

        def classifier_side():
            return model.pair_loss(pos, neg, weights, weak_objective=True).total

        # gradient reversal: the weak classifier itself minimises the plain weak CE
        numeric = {"weak.W_weak": classifier_side} if mode == "ood_easy" else {}
        errors = max_grad_error(value, dict(model.named_parameters()), h=1e-5, numeric_fns=numeric)
        worst[mode] = max(errors.values())
    ok = max(worst.values()) <= 1e-5
    record_criterion(1, ok, f"max rel error ood_easy={worst['ood_easy']:.2e} adaptive={worst['adaptive']:.2e} (tol 1e-5)")
    assert ok


# 2 ---------------------------------------------------------------------------


def _dense_attention(e, w_q, w_k, w_v, H):
    """Plain multi-head softmax attention over all N queries, pooled by the mean."""
    q, k, v = w_q @ e, w_k @ e, w_v @ e
    dh = q.shape[0] // H
    heads = []
    for h in range(H):
        rows = slice(h * dh, (h + 1) * dh)
        s = q[rows].T @ k[rows] / math.sqrt(dh)
        a = np.exp(s - s.max(1, keepdims=True))
        heads.append((a / a.sum(1, keepdims=True)) @ v[rows].T)
    return np.concatenate(heads, axis=1).mean(0)


def test_criterion_2_full_attention_reduction():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        N, d, H = int(rng.integers(1, 8)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        e = rng.normal(size=(d, N))
        w_q, w_k, w_v = (rng.normal(size=(H * d, d)) for _ in range(3))
        expected = _dense_attention(e, w_q, w_k, w_v, H)
        got = probsparse_attention(_t(e).T[None], _t(w_q), _t(w_k), _t(w_v), H, N)[0].numpy()
        worst = max(worst, np.abs(got - expected).max() / max(np.abs(expected).max(), 1e-12))
    ok = worst <= 1e-10
    record_criterion(2, ok, f"max rel error {worst:.2e} over 100 instances (tol 1e-10)")
    assert ok


# 3 ---------------------------------------------------------------------------


def _brute_discrepancy(pos, neg):
    def cos(a, b):
        return a @ b / (np.linalg.norm(a) * np.linalg.norm(b))

    M = pos.shape[0]
    return sum(cos(Z[i], Z[j]) for Z in (pos, neg) for i, j in itertools.permutations(range(M), 2)) / 2


def test_criterion_3_disentangler_invariants():
    rng = np.random.default_rng(3)
    worst_row_sum = worst_dis = 0.0
    failures = Counter()
    for _ in range(1000):
        M, dim = int(rng.integers(1, 7)), int(rng.integers(1, 6))
        pos, neg = rng.normal(size=(1, M, dim)), rng.normal(size=(1, M, dim))
        protos = rng.normal(size=(M, dim))
        tau = float(rng.uniform(0.05, 2.0))
        P = cluster_project(_t(pos), _t(protos), tau).P
        worst_row_sum = max(worst_row_sum, (P.sum(-1) - 1).abs().max().item())
        shared = select_shared(_t(pos), _t(neg))
        if int(shared.mask.sum()) != 1:
            failures["|A|"] += 1
        a, b = weak_supervise(_t(pos), _t(neg), shared)
        if not torch.equal(a[shared.mask], b[shared.mask]):
            failures["shared rows"] += 1
        dis = discrepancy_loss(_t(pos), _t(neg)).item()
        worst_dis = max(worst_dis, abs(dis - _brute_discrepancy(pos[0], neg[0])))
        if abs(dis) > M * (M - 1) + 1e-12:
            failures["bound"] += 1
    ok = worst_row_sum <= 1e-6 and worst_dis <= 1e-10 and not failures
    record_criterion(
        3, ok, f"row-sum dev {worst_row_sum:.1e}, L_dis dev {worst_dis:.1e}, violations {dict(failures) or 0} over 1000 inputs"
    )
    assert ok


# 4 ---------------------------------------------------------------------------


def test_criterion_4_ood_easy_construction():
    which, ratio = keep_ratio(0.6, 0.2)
    exact = which == "positives" and ratio == 1 / 6
    rule = GroupRule("price", 2)
    ds = _price_dataset(15_000, 10_000, 10_000, 15_000, seed=4)
    assert len(ds) == 50_000
    gaps, subset = {}, True
    for e_prime in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6):
        out = build_ood_easy(ds, OodEasySpec("price", rule, 0.6, e_prime), rng_seed=int(e_prime * 10))
        g = rule.groups(out)
        gaps[e_prime] = max(abs(out.labels[g == 0].mean() - e_prime), abs(out.labels[g == 1].mean() - (1 - e_prime)))
        src = Counter(ds.ids.tolist())
        subset &= all(src[i] >= c for i, c in Counter(out.ids.tolist()).items())
        subset &= bool(np.array_equal(out.codes, ds.codes[out.ids]) and np.array_equal(out.labels, ds.labels[out.ids]))
    ok = exact and subset and max(gaps.values()) <= 0.02
    record_criterion(4, ok, f"keep_ratio(0.6,0.2)=({which}, {ratio!r}); worst group CTR gap {max(gaps.values()):.4f}; subset={subset}")
    assert ok


# 5 ---------------------------------------------------------------------------


def _brute_logloss(p, y):
    p = [min(max(x, 1e-7), 1 - 1e-7) for x in p]
    return math.fsum(-(t * math.log(q) + (1 - t) * math.log(1 - q)) for q, t in zip(p, y)) / len(y)


def test_criterion_5_metric_oracles():
    rng = np.random.default_rng(5)
    mismatches = Counter()
    for _ in range(200):
        n = int(rng.integers(2, 101))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = (rng.integers(0, 12, n) / 4.0).tolist()
        users = rng.integers(0, 6, n).tolist()
        labels = labels.tolist()
        if auc(scores, labels) != float(pair_count_auc(scores, labels)):
            mismatches["auc"] += 1
        try:
            expected = float(brute_gauc(users, scores, labels))
        except ZeroDivisionError:
            expected = None
        if expected is not None and gauc(users, scores, labels) != expected:
            mismatches["gauc"] += 1
        probs = rng.uniform(0, 1, n).tolist()
        if logloss(probs, labels) != _brute_logloss(probs, labels):
            mismatches["logloss"] += 1
        ints = rng.integers(-40, 40, n)
        base = auc(ints, labels)
        for f in (lambda s: 3 * s + 1, lambda s: s**3, lambda s: np.exp(s / 10)):
            if auc(f(ints), labels) != base:
                mismatches["monotone"] += 1
    ok = not mismatches
    record_criterion(5, ok, f"mismatches {dict(mismatches) or 0} over 200 instances")
    assert ok


# 6 ---------------------------------------------------------------------------


def test_criterion_6_parameter_accounting():
    results = []
    cards = [7, 5, 9, 4, 6]
    for M, H, d, h in ((1, 1, 4, 8), (3, 2, 8, 16), (4, 4, 6, 5)):
        cfg = ModelConfig(M=M, H=H, d=d, h=h)
        model = build_model(cards, cfg, seed=0)
        d_out = cfg.d_out
        emb = sum(p.numel() for p in model.embedding.parameters())
        results.append(
            model.prototypes.Z_p.numel() == M * d_out
            and model.aggregator.W_agg.numel() == h * d_out
            and emb == sum(cards) * d
            and emb == sum(p.numel() for p in build_model(cards, ModelConfig(M=M + 2, H=H, d=d, h=h), 0).embedding.parameters())
        )
    ok = all(results)
    record_criterion(6, ok, f"3 configurations {results}")
    assert ok


# 7, 8, 10 --------------------------------------------------------------------


@pytest.fixture(scope="module")
def intervention_report(tmp_path_factory):
    cfg = load_config(CONFIGS / "intervention.yaml", env={"DISECTR_OUT": str(tmp_path_factory.mktemp("intervention"))})
    return run_config(cfg, plots=False)


def _rows(report, model, fraction):
    return {
        r["seed"]: r for r in report.rows if r["model"] == model and r["protocol"] == "intervention" and r["fraction"] == fraction
    }


@pytest.mark.slow
def test_criterion_7_disectr_drop_vs_mlp(intervention_report):
    dis, mlp = _rows(intervention_report, "disectr_M4", 0.1), _rows(intervention_report, "mlp", 0.1)
    wins = [s for s in sorted(dis) if dis[s]["drop"] <= mlp[s]["drop"]]
    detail = ", ".join(f"seed {s}: {dis[s]['drop']:+.4f} vs {mlp[s]['drop']:+.4f}" for s in sorted(dis))
    ok = len(wins) >= 4
    record_criterion(7, ok, f"DiseCTR drop <= MLP drop in {len(wins)}/5 seeds (need 4) [{detail}]")
    assert ok


@pytest.mark.slow
def test_criterion_8_transfer_distance_localized(intervention_report):
    rows = _rows(intervention_report, "disectr_M4", 0.1)
    ratios = {}
    for s, r in sorted(rows.items()):
        d = r["prototype_distances"]
        ratios[s] = d[-1] / (math.fsum(d[:-1]) / (len(d) - 1))
    hits = [s for s, v in ratios.items() if v >= 1.5]
    ok = len(hits) >= 3
    record_criterion(
        8, ok, f"pinned prototype ratio >= 1.5 in {len(hits)}/5 seeds (need 3) [" + ", ".join(f"{v:.2f}" for v in ratios.values()) + "]"
    )
    assert ok


@pytest.mark.slow
def test_criterion_10_more_finetune_data_no_worse(intervention_report):
    low, high = _rows(intervention_report, "disectr_M4", 0.01), _rows(intervention_report, "disectr_M4", 0.1)
    bad = [s for s in sorted(low) if high[s]["auc"] < low[s]["auc"] - 0.01]
    detail = ", ".join(f"{low[s]['auc']:.4f}->{high[s]['auc']:.4f}" for s in sorted(low))
    ok = not bad and len(low) == 5
    record_criterion(10, ok, f"AUC at 1% -> 10% per seed [{detail}]")
    assert ok


# 9 ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    raw = tiny_config(
        tmp_path / "run",
        seeds=[0, 1],
        models=[{"kind": "disectr", "M": 2, "d": 4, "h": 4, "H": 1}, {"kind": "fm", "d": 4}, {"kind": "mlp", "hidden": [8]}],
        protocols={"iid": True, "intervention": True, "ood_easy": {"affected_field": "g0_f0", "e_prime": [0.2]}},
        train={"max_epochs": 2, "batch_size": 128},
    )
    run_config(from_dict(raw), plots=True)
    names = ["report.json", "rows.csv", "plots/transfer_efficiency.csv", "plots/transfer_efficiency.png"]
    first = {n: (tmp_path / "run" / n).read_bytes() for n in names}
    run_config(from_dict(raw), force=True, plots=True)
    same = {n: (tmp_path / "run" / n).read_bytes() == b for n, b in first.items()}
    ok = all(same.values())
    record_criterion(9, ok, f"byte-identical rerun {same}")
    assert ok
