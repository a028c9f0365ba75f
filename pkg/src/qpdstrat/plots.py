"""Figure rendering for CLI reports. Files are written next to the CSV output."""

from __future__ import annotations

from collections import defaultdict

MODEL_COLORS = {"oracle": "tab:red", "shots:1": "tab:blue", "shots:64": "tab:green"}


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _model_key(row) -> str:
    return row["model"] if row["model"] == "oracle" else f"shots:{row['R']}"


def save_concentration_figure(profile, path, title: str = "") -> None:
    """Cumulative stratum mass against mass-sorted stratum rank."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ranks = range(1, len(profile.weights) + 1)
    ax.plot(ranks, profile.cumulative, lw=1.5)
    ax.axhline(profile.threshold, color="grey", ls="--", lw=0.8)
    ax.axvline(profile.t_q, color="grey", ls="--", lw=0.8)
    ax.set_xscale("log")
    ax.set_xlabel("stratum rank (by decreasing mass)")
    ax.set_ylabel("cumulative mass")
    frac = profile.t_q / max(1, profile.total_strata)
    ax.set_title(title or f"t={profile.t_q} of {profile.total_strata} strata ({100 * frac:.1f}%)")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_ratio_figure(ratio_rows, path, g1norms: dict | None = None) -> None:
    """Variance ratio against depth, one line per model, with bootstrap bands."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    by_model = defaultdict(list)
    for row in ratio_rows:
        by_model[_model_key(row)].append(row)
    for model, rows in sorted(by_model.items()):
        rows = sorted(rows, key=lambda r: r["L"])
        xs = [r["L"] for r in rows]
        ys = [r["rho"] for r in rows]
        lo = [r["rho_ci_lo"] for r in rows]
        hi = [r["rho_ci_hi"] for r in rows]
        color = MODEL_COLORS.get(model)
        ax.plot(xs, ys, "o-", label=model, color=color)
        ax.fill_between(xs, lo, hi, alpha=0.2, color=color)
    ax.set_xlabel("depth L")
    ax.set_ylabel("variance ratio")
    ax.set_ylim(bottom=0.0)
    ax.legend(loc="best", fontsize=8)
    if g1norms:
        ax2 = ax.twinx()
        xs = sorted(g1norms)
        ax2.plot(xs, [g1norms[x] for x in xs], "--", color="tab:orange", lw=1.0)
        ax2.set_ylabel("circuit 1-norm", color="tab:orange")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_normalized_variance_figure(result_rows, path, budget: int | None = None) -> None:
    """Estimator variance over squared 1-norm against depth, per design and model."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    by_line = defaultdict(list)
    for row in result_rows:
        by_line[(row["design"], _model_key(row))].append(row)
    for (design, model), rows in sorted(by_line.items()):
        rows = sorted(rows, key=lambda r: r["L"])
        xs = [r["L"] for r in rows]
        ys = [r["var_hat"] / r["g1norm"] ** 2 for r in rows]
        style = "--" if design == "naive" else "-"
        ax.plot(xs, ys, style, marker="o", ms=3, label=f"{design} {model}", color=MODEL_COLORS.get(model))
    if budget:
        ax.axhline(1.0 / budget, color="grey", lw=0.8, label=f"1/K (K={budget})")
    ax.set_yscale("log")
    ax.set_xlabel("depth L")
    ax.set_ylabel("variance / squared 1-norm")
    ax.legend(loc="best", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
