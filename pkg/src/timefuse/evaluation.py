"""Clustering evaluation against gold event labels.

Implements B-Cubed, CEAF-e (optimal one-to-one cluster alignment), MUC,
pair-counting scores (adjusted Rand, Fowlkes-Mallows) and information-
theoretic scores (V-measure, AMI with the hypergeometric expected-MI
correction).

Undefined-denominator conventions are fixed and flagged in the report:
MUC with no links on a side scores 0; two trivial identical partitions score
1 for the pair/information metrics.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .assignment import linear_assignment
from .ioutil import atomic_write

Partition = Mapping[str, object]  # doc id -> cluster label


def _check_ids(pred: Partition, gold: Partition) -> None:
    if not pred and not gold:
        raise ValueError("cannot evaluate an empty id set")
    if set(pred) != set(gold):
        raise ValueError("pred and gold must cover the same document ids")


def clusters_of(partition: Partition) -> dict[object, set]:
    out: dict[object, set] = {}
    for item, label in partition.items():
        out.setdefault(label, set()).add(item)
    return out


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def bcubed(pred: Partition, gold: Partition) -> tuple[float, float, float]:
    """Per-item precision/recall averaged over items."""
    _check_ids(pred, gold)
    pred_clusters = clusters_of(pred)
    gold_clusters = clusters_of(gold)
    p_sum = r_sum = 0.0
    for item in pred:
        k = pred_clusters[pred[item]]
        r = gold_clusters[gold[item]]
        overlap = len(k & r)
        p_sum += overlap / len(k)
        r_sum += overlap / len(r)
    n = len(pred)
    return p_sum / n, r_sum / n, _f1(p_sum / n, r_sum / n)


def _phi4(a: set, b: set) -> float:
    return 2.0 * len(a & b) / (len(a) + len(b))


def ceafe(pred: Partition, gold: Partition) -> tuple[float, float, float]:
    """Entity-based CEAF: optimal one-to-one alignment under phi4."""
    _check_ids(pred, gold)
    pred_sets = list(clusters_of(pred).values())
    gold_sets = list(clusters_of(gold).values())
    sims = np.array([[_phi4(k, r) for r in gold_sets] for k in pred_sets])
    rows, cols = linear_assignment(-sims)
    phi = float(sims[rows, cols].sum())
    p = phi / len(pred_sets)
    r = phi / len(gold_sets)
    return p, r, _f1(p, r)


def _muc_side(clusters: dict[object, set], other: Partition) -> tuple[int, int]:
    num = den = 0
    for members in clusters.values():
        partitions = len({other[m] for m in members})
        num += len(members) - partitions
        den += len(members) - 1
    return num, den


def muc(pred: Partition, gold: Partition) -> tuple[float, float, float, bool]:
    """Link-based MUC; returns (P, R, F1, defined). A side with no links
    (all singletons) makes the score undefined: reported as 0, flagged."""
    _check_ids(pred, gold)
    r_num, r_den = _muc_side(clusters_of(gold), pred)
    p_num, p_den = _muc_side(clusters_of(pred), gold)
    defined = p_den > 0 and r_den > 0
    p = p_num / p_den if p_den > 0 else 0.0
    r = r_num / r_den if r_den > 0 else 0.0
    return p, r, _f1(p, r), defined


def contingency(pred: Partition, gold: Partition):
    """(matrix nij, pred sizes, gold sizes, n)."""
    pred_labels = sorted(set(pred.values()), key=repr)
    gold_labels = sorted(set(gold.values()), key=repr)
    pi = {lab: i for i, lab in enumerate(pred_labels)}
    gi = {lab: i for i, lab in enumerate(gold_labels)}
    table = np.zeros((len(pred_labels), len(gold_labels)), dtype=np.int64)
    for item, lab in pred.items():
        table[pi[lab], gi[gold[item]]] += 1
    return table, table.sum(axis=1), table.sum(axis=0), len(pred)


def _comb2(x) -> int:
    return int(x) * (int(x) - 1) // 2


def pair_counts(pred: Partition, gold: Partition) -> tuple[int, int, int, int]:
    """(a, b, c, d): pairs together in both / pred only / gold only /
    neither."""
    table, rows, cols, n = contingency(pred, gold)
    a = int(sum(_comb2(v) for v in table.flat))
    b = int(sum(_comb2(v) for v in rows)) - a
    c = int(sum(_comb2(v) for v in cols)) - a
    d = _comb2(n) - a - b - c
    return a, b, c, d


def pair_counting(pred: Partition, gold: Partition) -> tuple[float, float, bool]:
    """(ARI, Fowlkes-Mallows, defined). Two identical trivial partitions
    score 1 by convention."""
    _check_ids(pred, gold)
    if len(pred) < 2:
        raise ValueError("pair counting needs at least two documents")
    a, b, c, d = pair_counts(pred, gold)
    if b == 0 and c == 0:
        # no disagreeing pairs at all: identical partitions (possibly with
        # no co-clustered pairs, where the quotients are 0/0)
        return 1.0, 1.0, a > 0
    total = a + b + c + d
    index = a
    expected = (a + b) * (a + c) / total
    maximum = 0.5 * ((a + b) + (a + c))
    ari = (index - expected) / (maximum - expected) if maximum != expected else 0.0
    fm = a / math.sqrt((a + b) * (a + c)) if (a + b) > 0 and (a + c) > 0 else 0.0
    return float(ari), float(fm), True


def _entropy(sizes: np.ndarray, n: int) -> float:
    probs = sizes[sizes > 0] / n
    return float(-(probs * np.log(probs)).sum())


def mutual_information(table: np.ndarray, rows: np.ndarray, cols: np.ndarray,
                       n: int) -> float:
    mi = 0.0
    for i in range(table.shape[0]):
        for j in range(table.shape[1]):
            nij = table[i, j]
            if nij > 0:
                mi += (nij / n) * math.log(n * nij / (rows[i] * cols[j]))
    return mi


def expected_mutual_information(rows: np.ndarray, cols: np.ndarray, n: int) -> float:
    """E[MI] under the fixed-marginals permutation model, with exact integer
    hypergeometric weights."""
    fact = [1] * (n + 1)
    for k in range(2, n + 1):
        fact[k] = fact[k - 1] * k
    emi = 0.0
    for ai in rows:
        ai = int(ai)
        for bj in cols:
            bj = int(bj)
            lo = max(1, ai + bj - n)
            hi = min(ai, bj)
            for nij in range(lo, hi + 1):
                weight = Fraction(
                    fact[ai] * fact[bj] * fact[n - ai] * fact[n - bj],
                    fact[n] * fact[nij] * fact[ai - nij] * fact[bj - nij]
                    * fact[n - ai - bj + nij],
                )
                emi += (nij / n) * math.log(n * nij / (ai * bj)) * float(weight)
    return emi


def information_metrics(pred: Partition, gold: Partition) -> tuple[float, float]:
    """(V-measure, adjusted mutual information)."""
    _check_ids(pred, gold)
    table, rows, cols, n = contingency(pred, gold)
    occupied = table > 0
    if np.all(occupied.sum(axis=0) == 1) and np.all(occupied.sum(axis=1) == 1):
        # identical partitions up to relabeling: both scores are exactly 1,
        # which two float summation routes cannot be trusted to reproduce
        return 1.0, 1.0
    h_pred = _entropy(rows, n)
    h_gold = _entropy(cols, n)
    mi = mutual_information(table, rows, cols, n)

    homogeneity = 1.0 if h_gold == 0 else mi / h_gold
    completeness = 1.0 if h_pred == 0 else mi / h_pred
    v = _f1(homogeneity, completeness)

    emi = expected_mutual_information(rows, cols, n)
    normalizer = 0.5 * (h_pred + h_gold)
    denom = normalizer - emi
    if denom == 0.0:
        ami = 1.0 if abs(mi - emi) < 1e-15 else 0.0
    else:
        ami = (mi - emi) / denom
    return v, float(ami)


@dataclass
class EvalReport:
    metrics: dict[str, dict] = dc_field(default_factory=dict)
    cn: int = 0
    flags: list[str] = dc_field(default_factory=list)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "CN": self.cn, "flags": self.flags}


def evaluate(pred: Partition, gold: Partition) -> EvalReport:
    """Score a predicted partition against gold with the full metric suite."""
    report = EvalReport(cn=len(set(pred.values())))
    p, r, f = bcubed(pred, gold)
    report.metrics["bcubed"] = {"precision": p, "recall": r, "f1": f}
    p, r, f = ceafe(pred, gold)
    report.metrics["ceaf_e"] = {"precision": p, "recall": r, "f1": f}
    p, r, f, defined = muc(pred, gold)
    report.metrics["muc"] = {"precision": p, "recall": r, "f1": f}
    if not defined:
        report.flags.append("muc undefined (no links on one side); reported as 0")
    if len(pred) >= 2:
        ari, fm, defined = pair_counting(pred, gold)
        if not defined:
            report.flags.append("pair metrics degenerate (no co-clustered pairs)")
    else:
        ari, fm = 1.0, 1.0
        report.flags.append("single-document corpus: pair metrics trivial")
    report.metrics["adjusted_rand"] = {"score": ari}
    report.metrics["fowlkes_mallows"] = {"score": fm}
    v, ami = information_metrics(pred, gold)
    report.metrics["v_measure"] = {"score": v}
    report.metrics["adjusted_mutual_info"] = {"score": ami}
    return report


def render_table(report: EvalReport) -> str:
    """Aligned plain-text table with [0,1] values and a x100 column."""
    lines = [f"{'metric':<22}{'P':>9}{'R':>9}{'F1/score':>10}{'x100':>9}"]
    for name, vals in report.metrics.items():
        if "f1" in vals:
            main = vals["f1"]
            p = f"{vals['precision']:.4f}"
            r = f"{vals['recall']:.4f}"
        else:
            main = vals["score"]
            p = r = "-"
        lines.append(f"{name:<22}{p:>9}{r:>9}{main:>10.4f}{100 * main:>9.2f}")
    lines.append(f"{'CN':<22}{'':>9}{'':>9}{report.cn:>10}")
    for flag in report.flags:
        lines.append(f"# {flag}")
    return "\n".join(lines)


def save_report(report: EvalReport, path) -> None:
    with atomic_write(path) as handle:
        json.dump(report.to_dict(), handle, indent=2)
        handle.write("\n")
