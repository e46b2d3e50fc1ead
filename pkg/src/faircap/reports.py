"""Bias report assembly and rendering.

The report is a pure view over persisted prediction files: every numeric
cell is re-derivable from the rows alone. Emitted as machine-readable JSON,
a human-readable text table set, and a CSV subgroup panel for external
plotting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .cohort import age_band
from .errors import ValidationError
from .fairness import STANDARD_COMPARISONS, compare, max_auroc_gap, subgroup_metrics
from .fairness import MARGINAL_KEYS
from .metrics import auroc, auprc, bootstrap_ci, brier, threshold_metrics
from .prompting import PredictionRecord
from .reliance import FactorVocabulary, profile, similarity

STRATEGY_LABELS = {
    "base": "Base",
    "fairness": "Fair",
    "system2": "System 2",
    "cap": "CAP",
    "baseline": "statistical baseline (LR substitute for XGBoost)",
}


@dataclass(frozen=True)
class PredRow:
    """Lightweight patient shim reconstructed from a prediction file row."""

    id: str
    age: int
    sex: str
    race: str
    died_in_hospital: bool

    @property
    def age_band(self) -> str:
        return age_band(self.age)


def rows_to_pairs(rows: list[dict]) -> list[tuple[PredRow, PredictionRecord]]:
    pairs = []
    for row in rows:
        if row.get("failed"):
            continue
        shim = PredRow(
            id=row["id"],
            age=int(row["age"]),
            sex=row["sex"],
            race=row["race"],
            died_in_hospital=bool(row["label"]),
        )
        pred = PredictionRecord(
            mortality_probability=float(row["mortality_probability"]),
            confidence=float(row["confidence"]),
            key_factors=tuple(row["key_factors"]),
            reasoning=row.get("reasoning", ""),
            strategy=row["strategy"],
            parse_attempts=int(row.get("parse_attempts", 1)),
            clamped=bool(row.get("clamped", False)),
        )
        pairs.append((shim, pred))
    return pairs


def _performance(pairs, threshold: float, resamples: int, level: float, seed: int) -> dict:
    scores = [p.mortality_probability for _, p in pairs]
    labels = [r.died_in_hospital for r, _ in pairs]
    tm = threshold_metrics(scores, labels, threshold)
    try:
        auroc_value = auroc(scores, labels)
    except ValidationError:
        auroc_value = None
    try:
        auprc_value = auprc(scores, labels)
    except ValidationError:
        auprc_value = None
    ci = bootstrap_ci(scores, labels, "brier", resamples=resamples, seed=seed, level=level)
    return {
        "n": len(pairs),
        "auroc": auroc_value,
        "auprc": auprc_value,
        "accuracy": tm.accuracy,
        "f1": tm.f1,
        "precision": tm.precision,
        "sensitivity": tm.sensitivity,
        "specificity": tm.specificity,
        "npv": tm.npv,
        "brier": brier(scores, labels),
        "brier_ci": {"lo": ci.lo, "hi": ci.hi, "resamples": ci.resamples, "seed": ci.seed},
    }


def _fairness(pairs, threshold: float) -> dict:
    data = [(r, p.mortality_probability) for r, p in pairs]
    comparisons = []
    for dimension, key_a, key_b in STANDARD_COMPARISONS:
        name = f"{key_a.label()} vs {key_b.label()}"
        try:
            a = subgroup_metrics(data, threshold, key_a)
            b = subgroup_metrics(data, threshold, key_b)
            c = compare(dimension, a, b)
            comparisons.append(
                {
                    "dimension": dimension,
                    "comparison": name,
                    "group_a": c.group_a,
                    "group_b": c.group_b,
                    "eod": c.eod,
                    "fpr_a": c.fpr_a,
                    "fpr_b": c.fpr_b,
                    "auroc_gap": c.auroc_gap,
                    "flag_eod": c.flag_eod,
                    "flag_auroc": c.flag_auroc,
                }
            )
        except ValidationError as exc:
            comparisons.append(
                {"dimension": dimension, "comparison": name, "insufficient_data": str(exc)}
            )
    gaps = {}
    for dimension in ("sex", "age", "race"):
        gaps[dimension] = max_auroc_gap(data, threshold, dimension)
    return {"comparisons": comparisons, "max_auroc_gap": gaps}


def _reliance(pairs, vocab: FactorVocabulary, k: int = 3) -> dict:
    out = {}
    for dimension, key_a, key_b in STANDARD_COMPARISONS:
        name = f"{key_a.label()} vs {key_b.label()}"
        try:
            pa = profile(pairs, key_a, vocab)
            pb = profile(pairs, key_b, vocab)
            sim = similarity(pa, pb, k=k)
            out[name] = {
                "dimension": dimension,
                "topk_jaccard": sim.topk_jaccard,
                "all_jaccard": sim.all_jaccard,
                "cosine": sim.cosine,
                "js_divergence": sim.js_divergence,
            }
        except ValidationError as exc:
            out[name] = {"dimension": dimension, "insufficient_data": str(exc)}
    return out


def _subgroup_panel(pairs, threshold: float) -> list[dict]:
    data = [(r, p.mortality_probability) for r, p in pairs]
    panel = []
    for key in MARGINAL_KEYS:
        try:
            m = subgroup_metrics(data, threshold, key)
            panel.append({"subgroup": key.label(), "n": m.n, "auroc": m.auroc})
        except ValidationError:
            panel.append({"subgroup": key.label(), "n": 0, "auroc": None})
    return panel


def assemble_report(
    predictions: dict[str, list[dict]],
    threshold: float,
    resamples: int,
    level: float,
    seed: int,
    provenance: dict,
    vocab: FactorVocabulary | None = None,
) -> dict:
    """Build the full report dict from per-strategy prediction rows."""
    vocab = vocab or FactorVocabulary()
    report: dict = {
        "provenance": dict(provenance),
        "performance": {},
        "fairness": {},
        "reliance": {},
        "subgroup_auroc": {},
    }
    for strategy, rows in predictions.items():
        pairs = rows_to_pairs(rows)
        if not pairs:
            raise ValidationError(f"strategy {strategy}: no usable prediction rows")
        report["performance"][strategy] = _performance(pairs, threshold, resamples, level, seed)
        report["fairness"][strategy] = _fairness(pairs, threshold)
        report["reliance"][strategy] = _reliance(pairs, vocab)
        report["subgroup_auroc"][strategy] = _subgroup_panel(pairs, threshold)
    return report


# ---------------------------------------------------------------------------
# Renderers
# ---------------------------------------------------------------------------

def _fmt(value, digits: int = 3) -> str:
    if value is None:
        return "NA"
    return f"{value:.{digits}f}"


def render_text(report: dict) -> str:
    lines: list[str] = []
    prov = report["provenance"]
    lines.append("BIAS AUDIT REPORT")
    lines.append(f"seed={prov.get('seed')} config_hash={prov.get('config_hash')}")
    lines.append(f"threshold={prov.get('threshold')} created={prov.get('created_utc')}")
    strategies = list(report["performance"])

    lines.append("")
    lines.append("Performance")
    header = (
        f"{'Method':<44}{'AUROC':>7}{'AUPRC':>7}{'Acc':>7}{'F1':>7}"
        f"{'Prec':>7}{'Sen':>7}{'Spec':>7}{'NPV':>7}{'Brier':>7}  Brier 95% CI"
    )
    lines.append(header)
    lines.append("-" * len(header))
    for strategy in strategies:
        perf = report["performance"][strategy]
        ci = perf["brier_ci"]
        lines.append(
            f"{STRATEGY_LABELS.get(strategy, strategy):<44}"
            f"{_fmt(perf['auroc']):>7}{_fmt(perf['auprc']):>7}{_fmt(perf['accuracy']):>7}"
            f"{_fmt(perf['f1']):>7}{_fmt(perf['precision']):>7}{_fmt(perf['sensitivity']):>7}"
            f"{_fmt(perf['specificity']):>7}{_fmt(perf['npv']):>7}{_fmt(perf['brier']):>7}"
            f"  ({_fmt(ci['lo'])}-{_fmt(ci['hi'])})"
        )

    lines.append("")
    lines.append("Equal Opportunity Difference (EOD) and FPR by subgroup comparison")
    head2 = f"{'Comparison':<24}" + "".join(f"{STRATEGY_LABELS.get(s, s)[:12]:>14}" for s in strategies)
    lines.append(head2)
    lines.append("-" * len(head2))
    first = strategies[0]
    for i, comp in enumerate(report["fairness"][first]["comparisons"]):
        name = comp["comparison"]
        eod_cells = []
        fpr_cells = []
        for strategy in strategies:
            c = report["fairness"][strategy]["comparisons"][i]
            if "insufficient_data" in c:
                eod_cells.append(f"{'insuff.':>14}")
                fpr_cells.append(f"{'':>14}")
            else:
                flag = "*" if c["flag_eod"] else ""
                eod_cells.append(f"{_fmt(c['eod']) + flag:>14}")
                fpr_cells.append(f"{_fmt(c['fpr_a']) + '/' + _fmt(c['fpr_b']):>14}")
        lines.append(f"{name:<24}" + "".join(eod_cells))
        lines.append(f"{'  FPR (a/b)':<24}" + "".join(fpr_cells))
    lines.append("(* = EOD above the 0.05 bias threshold)")
    lines.append("")
    lines.append("Max AUROC gap by dimension")
    for dimension in ("sex", "age", "race"):
        cells = []
        for strategy in strategies:
            gap = report["fairness"][strategy]["max_auroc_gap"][dimension]
            flag = "*" if gap is not None and gap > 0.05 else ""
            cells.append(f"{_fmt(gap) + flag:>14}")
        lines.append(f"{dimension:<24}" + "".join(cells))

    lines.append("")
    lines.append("Feature-reliance similarity across subgroups")
    head3 = f"{'Comparison':<24}{'Method':<44}{'Top3 Jac':>9}{'All Jac':>9}{'Cosine':>9}{'JS Div':>9}"
    lines.append(head3)
    lines.append("-" * len(head3))
    first_rel = report["reliance"][first]
    for name in first_rel:
        for strategy in strategies:
            rel = report["reliance"][strategy][name]
            label = STRATEGY_LABELS.get(strategy, strategy)
            if "insufficient_data" in rel:
                lines.append(f"{name:<24}{label:<44}{'insufficient data':>36}")
            else:
                lines.append(
                    f"{name:<24}{label:<44}"
                    f"{_fmt(rel['topk_jaccard']):>9}{_fmt(rel['all_jaccard']):>9}"
                    f"{_fmt(rel['cosine']):>9}{_fmt(rel['js_divergence']):>9}"
                )

    lines.append("")
    lines.append("Subgroup AUROC panel")
    head4 = f"{'Subgroup':<12}" + "".join(f"{STRATEGY_LABELS.get(s, s)[:12]:>14}" for s in strategies)
    lines.append(head4)
    lines.append("-" * len(head4))
    panel_first = report["subgroup_auroc"][first]
    for i, entry in enumerate(panel_first):
        cells = []
        for strategy in strategies:
            cell = report["subgroup_auroc"][strategy][i]
            cells.append(f"{_fmt(cell['auroc']):>14}")
        lines.append(f"{entry['subgroup']:<12}" + "".join(cells))
    return "\n".join(lines) + "\n"


def render_subgroup_csv(report: dict) -> str:
    strategies = list(report["subgroup_auroc"])
    lines = ["subgroup,n," + ",".join(f"auroc_{s}" for s in strategies)]
    first = report["subgroup_auroc"][strategies[0]]
    for i, entry in enumerate(first):
        cells = [entry["subgroup"], str(entry["n"])]
        for strategy in strategies:
            value = report["subgroup_auroc"][strategy][i]["auroc"]
            cells.append("" if value is None else repr(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def write_report_json(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
