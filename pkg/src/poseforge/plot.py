"""SVG figure for an evaluation report: error histogram and accuracy curve."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def accuracy_curve(errors_deg, thresholds_deg):
    """Fraction of errors strictly below each threshold."""
    e = np.sort(np.asarray(errors_deg, dtype=float))
    return np.searchsorted(e, thresholds_deg, side="left") / max(len(e), 1)


def plot_report(report, out_path):
    errors = np.array([r["err_deg"] for r in report["per_sample"]], dtype=float)
    thresholds = np.linspace(0.0, 180.0, 181)
    acc = accuracy_curve(errors, thresholds)
    # fixed ids and no timestamp keep the SVG byte-identical across runs
    with matplotlib.rc_context({"svg.hashsalt": "poseforge", "svg.fonttype": "none"}):
        fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.6))
        ax0.hist(errors, bins=np.arange(0, 185, 5), color="0.35")
        ax0.axvline(30.0, color="tab:red", lw=1, ls="--")
        ax0.set_xlabel("rotation error (deg)")
        ax0.set_ylabel("samples")
        ax0.set_xlim(0, 180)
        ax1.plot(thresholds, acc, color="tab:blue")
        ax1.axvline(30.0, color="tab:red", lw=1, ls="--")
        ax1.set_xlabel("threshold (deg)")
        ax1.set_ylabel("accuracy")
        ax1.set_xlim(0, 180)
        ax1.set_ylim(0, 1.02)
        agg = report.get("aggregate", {})
        fig.suptitle(f"{report.get('split', '')}: n={len(errors)}, "
                     f"Acc pi/6={agg.get('acc_pi6', float('nan')):.3f}, "
                     f"MedErr={agg.get('mederr_deg', float('nan')):.1f} deg")
        fig.tight_layout()
        fig.savefig(out_path, format="svg", metadata={"Date": None})
        plt.close(fig)
