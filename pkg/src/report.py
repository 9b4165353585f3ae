"""
Reports
Plot-ready CSV tables and the human-readable run summaries.
"""

from typing import Dict, List, Optional, Sequence

import pandas as pd

from evaluate import GapReport, ViolationReport, WelfareReport
from flexreq import FlexRequestSet
from market import DeterministicResult, StochasticResult
from uncertainty import EpsilonConfig


AUDIT_NOTES = (
    "Reactive rating margins use (1 - beta) * eps_s, consistent with the two "
    "absolute-value chance constraints they replace.",
    "Expected activation cost enters the stochastic clearing through the convex "
    "upper bound lambda_A * sqrt(mu^2 + sigma^2) of E|activation|.",
)

WELFARE_COLUMNS = [
    "liquidity", "mechanism", "scenarios", "procured_up_mw", "procured_down_mw",
    "offer_cost_eur", "request_payment_eur", "procurement_welfare_eur",
    "shedding_cost_eur", "curtailment_cost_eur", "activation_cost_eur",
    "realtime_cost_eur", "social_welfare_eur", "dso_cost_eur",
]
DSO_COST_COLUMNS = ["liquidity", "mechanism", "request_payment_eur", "realtime_cost_eur", "dso_cost_eur"]
VIOLATION_COLUMNS = ["kind", "family", "constraint", "frequency"]
REQUEST_COLUMNS = ["bus", "period", "direction", "quantity_mw", "price_eur_per_mw", "alpha"]


def welfare_table(reports: Sequence[WelfareReport]) -> pd.DataFrame:
    return pd.DataFrame([r.to_dict() for r in reports], columns=WELFARE_COLUMNS)


def dso_cost_table(reports: Sequence[WelfareReport]) -> pd.DataFrame:
    return welfare_table(reports)[DSO_COST_COLUMNS]


def violation_table(reports: Sequence[ViolationReport]) -> pd.DataFrame:
    """One row per individual constraint, sorted for stable output."""
    rows = [
        [r.kind, family, constraint, freq]
        for r in reports
        for family, table in sorted(r.per_constraint.items())
        for constraint, freq in sorted(table.items())
    ]
    return pd.DataFrame(rows, columns=VIOLATION_COLUMNS)


def request_table(requests: FlexRequestSet) -> pd.DataFrame:
    return pd.DataFrame(requests.to_records(), columns=REQUEST_COLUMNS)


def gap_table(report: GapReport) -> pd.DataFrame:
    doc = report.to_dict()
    return pd.DataFrame([{k: doc[k] for k in ("L_U", "L_SC", "L_FR", "Xi_SC", "Xi_FR", "Xi_FS", "level")}])


def audit_lines(epsilons: EpsilonConfig) -> List[str]:
    q = epsilons.quantiles()
    return [
        f"ℹ️  {AUDIT_NOTES[0]} (z_P = {q['rating_p']:.5f}, z_Q = {q['rating_q']:.5f}, beta = {epsilons.beta})",
        f"ℹ️  {AUDIT_NOTES[1]}",
    ]


def request_summary(requests: FlexRequestSet, epsilons: Optional[EpsilonConfig] = None) -> str:
    lines = ["=" * 60, "📋 FLEXREQUESTS", "=" * 60]
    if requests.is_empty:
        lines.append("✨ No flexibility needed: the network stays within limits at the required confidence.")
    for r in requests.to_records():
        arrow = "⬆️ " if r["direction"] == "up" else "⬇️ "
        lines.append(
            f"  {arrow} bus {r['bus']:>3} | period {r['period']} | {r['quantity_mw']:.4f} MW "
            f"@ {r['price_eur_per_mw']:.2f} EUR/MW | alpha {r['alpha']:+.4f}"
        )
    lines.append("-" * 60)
    lines.append(f"  Total: {requests.total_up:.4f} MW up, {requests.total_down:.4f} MW down ({requests.method}, {requests.mode.value})")
    if epsilons is not None:
        lines.extend(audit_lines(epsilons))
    return "\n".join(lines) + "\n"


def clearing_summary(result: DeterministicResult, zones_name: str) -> str:
    matched = sum(result.matched.values())
    return (
        f"✅ Deterministic clearing ({zones_name}): {matched:.4f} MW matched, "
        f"procurement {result.procurement_cost:.2f} EUR, welfare {result.welfare:.2f} EUR"
    )


def stochastic_summary(result: StochasticResult) -> str:
    costs = result.costs
    return (
        f"✅ Stochastic clearing: {result.procured_up.sum():.4f} MW up, {result.procured_down.sum():.4f} MW down, "
        f"expected cost {costs['total']:.2f} EUR (shedding {costs['shedding']:.2f}, curtailment {costs['curtailment']:.2f})"
    )


def evaluation_summary(welfare_reports: Sequence[WelfareReport], violations: Sequence[ViolationReport], epsilons: EpsilonConfig) -> str:
    lines = ["=" * 60, "📊 EVALUATION SUMMARY", "=" * 60]
    for v in violations:
        worst = v.worst
        where = f" at {worst[0]} {worst[1]}" if worst else ""
        flag = "✅" if v.max_frequency <= max(epsilons.to_dict().values()) * 1.1 else "⚠️ "
        lines.append(f"  {flag} {v.kind}: max violation {v.max_frequency:.4f} over {v.count} scenarios{where}")

    by_liquidity: Dict[str, List[WelfareReport]] = {}
    for r in welfare_reports:
        by_liquidity.setdefault(r.liquidity, []).append(r)
    for liquidity, reports in by_liquidity.items():
        lines.append(f"\n  💧 Liquidity: {liquidity}")
        for r in reports:
            lines.append(
                f"     {r.mechanism:<28} welfare {r.social_welfare:>10.2f} EUR | DSO cost {r.dso_cost:>10.2f} EUR"
            )
    lines.append("")
    lines.extend(audit_lines(epsilons))
    return "\n".join(lines) + "\n"


def gap_summary(report: GapReport) -> str:
    def pct(x):
        return "n/a" if x is None else f"{100 * x:.2f}%"

    return "\n".join([
        "=" * 60,
        "📐 SUB-OPTIMALITY GAP BOUNDS",
        "=" * 60,
        f"  L_U  = {report.l_u:.4f} EUR",
        f"  L_SC = {report.l_sc:.4f} EUR",
        f"  L_FR = {report.l_fr:.4f} EUR",
        f"  Xi_SC = {pct(report.xi_sc)} | Xi_FR = {pct(report.xi_fr)} | Xi_FS = {pct(report.xi_fs)}",
        f"  Level {report.level}: {report.classification}",
    ]) + "\n"
