"""Plain-text rendering of fit reports (two-decimal tables)."""
from __future__ import annotations

import math

import numpy as np


def _fmt(x, nd=2):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    s = f"{float(x):.{nd}f}"
    return s


def coefficient_table(coefs, nd=2, p_values=True):
    """Lines of the "Effect Value t value p value" table."""
    head = ["Effect", "Value", "t value"] + (["p value"] if p_values else [])
    rows = [[c["effect"], _fmt(c["estimate"], nd), _fmt(c["t"], nd)]
            + ([_fmt(c["p"], nd)] if p_values else []) for c in coefs]
    widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
    out = []
    for r in [head] + rows:
        cells = [r[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(r[1:], widths[1:])]
        out.append("  ".join(cells).rstrip())
    return out


def fit_text(report: dict, nd=2) -> str:
    """Render a fit dictionary (``FitResult.to_dict`` or a failure) as text."""
    mid = report.get("model_id") or "model"
    lines = [f"Model {mid}"]
    if not report.get("converged", False):
        conv = report.get("convergence", {})
        lines.append("Status: FAILED TO CONVERGE")
        lines.append(f"  message: {conv.get('message', '')}")
        for key in ("iterations", "cycles", "restarts_used", "gradient_norm", "objective"):
            if key in conv:
                lines.append(f"  {key}: {conv[key]}")
        if conv.get("boundary"):
            lines.append(f"  parameters at boundary: {', '.join(conv['boundary'])}")
        for n in report.get("notes", []):
            lines.append(f"  note: {n}")
        return "\n".join(lines) + "\n"
    lines.append(f"{report['method']} fit, {report['n_obs']} observations, "
                 f"{report['n_groups']} pairs")
    lines.append("")
    lines += coefficient_table(report["coefficients"], nd)
    lines.append("")
    lines.append("Variance components")
    for name, val in report["variance_components"].items():
        lines.append(f"  {name}  {_fmt(val, 3)}")
    lines.append("")
    lines.append(f"logLik {_fmt(report['loglik'], nd)}  AIC {_fmt(report['aic'], nd)}  "
                 f"BIC {_fmt(report['bic'], nd)}  (k = {report['k']})")
    mfc = report.get("max_fixed_correlation")
    if mfc is not None and np.isfinite(mfc):
        lines.append(f"max |corr(beta)| {_fmt(mfc, nd)}")
    lines.append("Status: converged")
    for n in report.get("notes", []):
        lines.append(f"note: {n}")
    return "\n".join(lines) + "\n"


def pca_text(result, k=3, nd=2) -> str:
    """Loadings of the first ``k`` components plus cumulative variance."""
    names = list(result.columns)
    w = max(len(n) for n in names + ["Variable"])
    lines = ["Variable".ljust(w) + "".join(f"{'PC' + str(i + 1):>8}" for i in range(k))]
    for j, name in enumerate(names):
        lines.append(name.ljust(w) + "".join(f"{result.loadings[j, i]:>8.{nd}f}" for i in range(k)))
    cum = result.cumvar
    lines.append("Cumulative variance " + " ".join(
        f"PC{i + 1}={cum[i]:.{nd}f}" for i in range(k)))
    return "\n".join(lines) + "\n"
