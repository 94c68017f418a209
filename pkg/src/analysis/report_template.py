"""
report_template.py
Text templates for the analysis commands' console output
"""
from typing import Dict, List, Sequence

from analysis.metrics import BiasHistogram, ParamReport, RankReport

PARAM_LINE_TEMPLATE = "{model}: {total} params, unimodal {unimodal}, increment {percent:.2f}% ({absolute})"

RANK_HEADER = "Average active rank per block (init {r_init}, target {r_target})"

HISTOGRAM_HEADER = "|rho| histogram at {tap} ({source}): mean {mean:.4f}, {valid} pairs, {excluded} excluded"


def format_count(n: int) -> str:
    """Compact parameter count: 68, 4.2K, 0.15M"""
    if abs(n) < 1_000:
        return str(n)
    if abs(n) < 100_000:
        return f"{n / 1_000:.1f}K"
    return f"{n / 1_000_000:.2f}M"


def build_param_line(report: ParamReport) -> str:
    """
    Table-style increment line for one model kind.

    Args:
        report: closed-form (and, for built models, storage) counts

    Returns:
        e.g. "lma_fixed: 1234 params, unimodal 1200, increment 2.83% (34)"
    """
    return PARAM_LINE_TEMPLATE.format(
        model=report.model,
        total=report.total,
        unimodal=report.unimodal,
        percent=report.increment_percent,
        absolute=format_count(report.increment),
    )


def build_rank_table(report: RankReport) -> str:
    lines = [RANK_HEADER.format(r_init=report.r_init, r_target=report.r_target)]
    for block, average in zip(report.blocks, report.averages):
        marker = "+" if average > report.r_target else ("-" if average < report.r_target else "=")
        lines.append(f"  {block:<8} {average:6.3f} {marker}")
    lines.append(
        f"  total active {report.total_active} over {report.n_adaptors} adaptors "
        f"(average {report.global_average:.3f})"
    )
    return "\n".join(lines)


def build_histogram_table(histogram: BiasHistogram) -> str:
    lines = [HISTOGRAM_HEADER.format(
        tap=histogram.tap, source=histogram.source.value, mean=histogram.mean_abs_rho,
        valid=histogram.valid_pairs, excluded=histogram.excluded,
    )]
    edges = BiasHistogram.bin_edges()
    for i, proportion in enumerate(histogram.proportions):
        closing = "]" if i == len(histogram.proportions) - 1 else ")"
        bar = "#" * int(round(proportion * 40))
        lines.append(f"  [{edges[i]:.1f}, {edges[i + 1]:.1f}{closing} {proportion:6.3f} {bar}")
    return "\n".join(lines)


def build_profile_table(profile: Dict[str, float]) -> str:
    lines = ["Heterogeneity (1 - mean |rho|) by depth"]
    lines.extend(f"  {tap:<4} {value:.4f}" for tap, value in profile.items())
    return "\n".join(lines)


def build_eval_summary(accuracy: float, per_class: Sequence[float], split: str) -> str:
    lines: List[str] = [f"Accuracy on {split}: {accuracy * 100:.2f}%"]
    lines.extend(f"  class {c}: {a * 100:.2f}%" for c, a in enumerate(per_class))
    return "\n".join(lines)
