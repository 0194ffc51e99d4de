"""Figures for result tables (written next to the CSV)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from d2dcache.experiments import AGGREGATE_REPLICATE  # noqa: E402


def _aggregates(table):
    # {metric: {policy: [(x, mean, std), ...]}} from the *_mean / *_std rows
    means, stds = {}, {}
    for r in table.rows:
        if r.replicate != AGGREGATE_REPLICATE:
            continue
        if r.metric.endswith("_mean"):
            means.setdefault(r.metric[:-5], {}).setdefault(r.policy, {})[r.sweep_value] = r.value
        elif r.metric.endswith("_std"):
            stds.setdefault(r.metric[:-4], {}).setdefault(r.policy, {})[r.sweep_value] = r.value
    out = {}
    for metric, by_policy in means.items():
        out[metric] = {
            policy: [(x, m, stds.get(metric, {}).get(policy, {}).get(x, 0.0))
                     for x, m in sorted(points.items(), key=lambda kv: float(kv[0]))]
            for policy, points in by_policy.items()
        }
    return out


def plot_table(table, path, title=None):
    """Render one panel per metric; returns the path or None for an empty table."""
    data = _aggregates(table)
    if not data:
        return None
    sweep_param = table.rows[0].sweep_param
    metrics = sorted(data)
    fig, axes = plt.subplots(1, len(metrics), figsize=(6.0 * len(metrics), 4.2), squeeze=False)
    for ax, metric in zip(axes[0], metrics):
        by_policy = data[metric]
        single = all(len(pts) == 1 for pts in by_policy.values())
        if single:
            names = sorted(by_policy)
            vals = [by_policy[n][0][1] for n in names]
            errs = [by_policy[n][0][2] for n in names]
            ax.bar(range(len(names)), vals, yerr=errs, capsize=3)
            ax.set_xticks(range(len(names)))
            ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        else:
            for policy in sorted(by_policy):
                xs, ms, ss = zip(*by_policy[policy])
                ax.errorbar([float(x) for x in xs], ms, yerr=ss, marker="o", ms=3, capsize=2,
                            label=policy)
            ax.set_xlabel(sweep_param)
            ax.legend(fontsize=7)
        ax.set_ylabel(metric)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
