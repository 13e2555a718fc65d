"""Correlation analysis and static plots."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import torch  # noqa: E402

from ..bec import NeuronSelection  # noqa: E402
from ..model import all_feature_maps  # noqa: E402
from .pipeline import RunRecord, pearson  # noqa: E402

ACTIVATION_NOTE = "backdoor activation rate = ASR on the triggered test set"


def correlation_report(records, out_png=None) -> dict:
    """Pearson r between BEC and white-box ASR across defenses (pooled over records).

    ``records`` are :class:`RunRecord` objects or their dict form. When
    ``out_png`` is given, also draws BEC against activation rate, one colour
    per defense and one marker per attack mode.
    """
    points = []
    for rec in records:
        d = rec.to_dict() if isinstance(rec, RunRecord) else rec
        for label, rep in d["bec"].items():
            modes = d["attacks"].get(label, {})
            points.append({
                "defense": label,
                "bec": rep["bec"],
                "defense_asr": d["metrics"][label]["asr"],
                **{m: r["test_asr"] for m, r in modes.items()},
            })
    corr = pearson([p["bec"] for p in points], [p.get("wba") for p in points])
    if out_png is not None:
        _scatter(points, corr, out_png)
    return {**corr, "points": points}


def _scatter(points, corr, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    markers = {"defense_asr": "o", "wba": "^", "bba": "s", "ta": "D"}
    names = {"defense_asr": "no re-activation", "wba": "WBA", "bba": "BBA", "ta": "TA"}
    colours = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for i, p in enumerate(points):
        for key, marker in markers.items():
            if p.get(key) is None:
                continue
            ax.scatter(p["bec"], p[key], marker=marker, color=colours[i % len(colours)],
                       label=f"{p['defense']} / {names[key]}")
    r = "n/a" if corr["r"] is None else f"{corr['r']:.3f}"
    ax.set_xlabel("BEC")
    ax.set_ylabel("backdoor activation rate")
    ax.set_title(f"Pearson r(BEC, WBA ASR) = {r}")
    ax.set_xlim(-0.05, 1.05)
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=6, loc="best")
    fig.text(0.01, 0.01, ACTIVATION_NOTE, fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def feature_map_plot(models: dict, x_triggered: torch.Tensor, selection: NeuronSelection, path, top=4) -> Path:
    """Grid of the highest-TAC channel activations of each model on one triggered image.

    ``models`` maps a display name (e.g. clean / backdoored / defended) to a
    classifier; rows are layers, column groups are models, and channels within
    a group follow the backdoored model's descending TAC order.
    """
    if x_triggered.ndim == 3:
        x_triggered = x_triggered[None]
    maps = {name: all_feature_maps(m, x_triggered[:1]) for name, m in models.items()}
    n_layers = len(selection.indices)
    cols = top * len(models)
    fig, axes = plt.subplots(n_layers, cols, figsize=(cols * 1.0, n_layers * 1.1), squeeze=False)
    for l in range(n_layers):
        channels = selection.indices[l][:top]
        for g, (name, fmap) in enumerate(maps.items()):
            layer = fmap[l][0]
            vmax = max(float(layer[channels].max()), 1e-8)
            for j in range(top):
                ax = axes[l][g * top + j]
                ax.axis("off")
                if j < len(channels):
                    ax.imshow(layer[channels[j]].numpy(), cmap="viridis", vmin=0, vmax=vmax)
                if l == 0 and j == 0:
                    ax.set_title(name, fontsize=7, loc="left")
    fig.suptitle("top-TAC channel activations (rows: layers)", fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def write_reports(pipe, record: RunRecord) -> dict:
    """Emit the scatter plot, the feature-map grid and a correlation JSON next to the results."""
    out = pipe.out
    corr = correlation_report([record], out / "bec_vs_asr.png")
    (out / "correlation.json").write_text(json.dumps(corr, indent=2))
    labels = [d.label for d in pipe.cfg.defenses]
    if labels:
        x = pipe.attacker_images(pipe.cfg.wba.fraction, "wba")[:1]
        models = {"clean": pipe.clean_model(), "backdoored": pipe.backdoored_model(),
                  labels[0]: pipe.model(labels[0])}
        feature_map_plot(models, x, pipe.selection, out / "feature_maps.png")
    return corr
