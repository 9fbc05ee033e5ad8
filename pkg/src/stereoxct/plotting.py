"""Report figures rendered to files with the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version string in PNG metadata, so reruns write identical files
_META = {"Software": None}


def _save(fig, path) -> None:
    fig.savefig(path, dpi=100, metadata=_META)
    plt.close(fig)


def plot_roc(path, curves: dict, title: str = "ROC") -> None:
    """``curves`` maps a label to a RocCurve."""
    fig, ax = plt.subplots(figsize=(4.5, 4.5))
    for label, c in curves.items():
        ax.plot(c.fpr, c.tpr, label=f"{label} (AUC {c.auc:.4f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.01)
    ax.set_title(title)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_projection(path, image, mask=None, candidates=(), truth_uv=None, title="") -> None:
    """Projection in grey with the mask outline and candidate markers."""
    data = image.data if hasattr(image, "data") else np.asarray(image)
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.imshow(data, cmap="gray", origin="upper",
              extent=(0, data.shape[1], data.shape[0], 0))
    if mask is not None:
        bits = mask.bits if hasattr(mask, "bits") else np.asarray(mask)
        ax.contour(np.arange(bits.shape[1]) + 0.5, np.arange(bits.shape[0]) + 0.5,
                   bits.astype(float), levels=[0.5], colors="yellow", linewidths=0.6)
    styles = {"point": ("r", "+"), "line_endpoint": ("c", "x"), "line_sample": ("c", ".")}
    for c in candidates:
        col, mk = styles[c.kind]
        ax.plot(c.position[0], c.position[1], mk, color=col, ms=6)
    if truth_uv is not None and len(truth_uv):
        uv = np.asarray(truth_uv)
        ax.plot(uv[:, 0], uv[:, 1], "o", mfc="none", mec="lime", ms=8)
    ax.set_title(title)
    ax.set_axis_off()
    fig.tight_layout()
    _save(fig, path)


def plot_features_3d(path, features, truth=None, title="") -> None:
    """Predicted 3D features against the true point centres and lines."""
    fig = plt.figure(figsize=(5, 5))
    ax = fig.add_subplot(projection="3d")
    if truth is not None:
        for p in truth.points:
            ax.scatter(*p.center, marker="o", facecolors="none", edgecolors="g", s=40)
        for l in truth.lines:
            seg = np.array([l.a, l.b])
            ax.plot(seg[:, 0], seg[:, 1], seg[:, 2], color="g", lw=2, alpha=0.5)
    for f in features:
        if f.kind == "point":
            ax.scatter(*f.position, marker="x", color="r" if f.occlusion_flag else "b", s=30)
        else:
            ax.plot(f.positions[:, 0], f.positions[:, 1], f.positions[:, 2], "b.-", lw=1)
    ax.set_xlabel("x (mm)")
    ax.set_ylabel("y (mm)")
    ax.set_zlabel("z (mm)")
    ax.set_title(title)
    fig.tight_layout()
    _save(fig, path)
