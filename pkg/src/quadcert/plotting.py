"""Figure layouts for position and trajectory tracking runs.

Every figure is written twice: a PNG and a plain-text file with the
plotted series, so results can be diffed without image tolerances.
"""
from __future__ import annotations

import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .dynamics import Trajectory, read_trajectory_csv

AXES = ("x", "y", "z")
PNG_META = {"Software": None}


class EmptyInputError(ValueError):
    pass


def _load(path) -> Trajectory:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if len(lines) < 2:
        raise EmptyInputError(f"{path}: CSV has no data rows")
    return read_trajectory_csv(path)


def _panels(ax, t, series, labels, title, ylabel, store, key, ref=None):
    for k, lab in enumerate(labels):
        ax.plot(t, series[:, k], lw=1.0, label=lab)
        store.append((f"{key}.{lab}", series[:, k]))
    if ref is not None:
        for k, lab in enumerate(labels):
            ax.plot(t, ref[:, k], "--", lw=0.8, color="0.4")
            store.append((f"{key}.{lab}_ref", ref[:, k]))
    ax.set_title(title, fontsize=9)
    ax.set_xlabel("t [s]")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, loc="best")


def _write_data(path, t, store):
    with open(path, "w") as fh:
        fh.write("t " + " ".join(name for name, _ in store) + "\n")
        cols = np.column_stack([t] + [v for _, v in store])
        for row in cols:
            fh.write(" ".join("%.9g" % v for v in row) + "\n")


def _save(fig, out_prefix):
    """Write the PNG; returns ``(png_path, data_path, panel_count)``."""
    png = out_prefix + ".png"
    n = len(fig.axes)
    fig.savefig(png, dpi=100, metadata=PNG_META)
    plt.close(fig)
    return png, out_prefix + ".txt", n


def plot_position(csv_paths, out_prefix, titles=None):
    """Six-panel layout.

    With two CSVs (nominal, combined) the columns are the two runs and the
    rows are position, velocity and positional error.  With one CSV the
    panels are position, velocity, error, attitude, body rates and the
    learned input.
    """
    paths = [csv_paths] if isinstance(csv_paths, (str, os.PathLike)) else list(csv_paths)
    if not 1 <= len(paths) <= 2:
        raise ValueError("position plot takes one or two CSV files")
    runs = [_load(p) for p in paths]
    store = []
    fig, axs = plt.subplots(3, 2, figsize=(10, 9), constrained_layout=True)
    t = runs[0].t
    if len(runs) == 2:
        if runs[1].t.shape != t.shape:
            raise ValueError("runs must share the same time grid")
        titles = titles or ("nominal", "combined")
        for c, (tr, name) in enumerate(zip(runs, titles)):
            e = tr.states[:, 0:3] - tr.refs[:, 0:3]
            _panels(axs[0, c], t, tr.states[:, 0:3], AXES, f"position, {name}", "[m]", store,
                    f"pos{c}", tr.refs[:, 0:3])
            _panels(axs[1, c], t, tr.states[:, 6:9], AXES, f"velocity, {name}", "[m/s]", store, f"vel{c}")
            _panels(axs[2, c], t, e, AXES, f"positional error, {name}", "[m]", store, f"err{c}")
    else:
        tr = runs[0]
        e = tr.states[:, 0:3] - tr.refs[:, 0:3]
        _panels(axs[0, 0], t, tr.states[:, 0:3], AXES, "position", "[m]", store, "pos", tr.refs[:, 0:3])
        _panels(axs[0, 1], t, tr.states[:, 6:9], AXES, "velocity", "[m/s]", store, "vel")
        _panels(axs[1, 0], t, e, AXES, "positional error", "[m]", store, "err")
        _panels(axs[1, 1], t, tr.states[:, 3:6], ("phi", "theta", "psi"), "attitude", "[rad]", store, "att")
        _panels(axs[2, 0], t, tr.states[:, 9:12], ("p", "q", "r"), "body rates", "[rad/s]", store, "rate")
        _panels(axs[2, 1], t, tr.controls, ("u1", "u2", "u3", "u4"), "learned input", "[N]", store, "u")
    _write_data(out_prefix + ".txt", t, store)
    return _save(fig, out_prefix)


def plot_trajectory(csv_path, out_prefix):
    """Four panels: planar path against the reference, position, velocity, error."""
    tr = _load(csv_path)
    t = tr.t
    store = []
    fig, axs = plt.subplots(2, 2, figsize=(10, 7), constrained_layout=True)
    ax = axs[0, 0]
    ax.plot(tr.refs[:, 0], tr.refs[:, 1], "r--", lw=1.0, label="reference")
    ax.plot(tr.states[:, 0], tr.states[:, 1], "b", lw=1.0, label="actual")
    store += [("path.x", tr.states[:, 0]), ("path.y", tr.states[:, 1]),
              ("path.x_ref", tr.refs[:, 0]), ("path.y_ref", tr.refs[:, 1])]
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title("trajectory", fontsize=9)
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    _panels(axs[0, 1], t, tr.states[:, 0:3], AXES, "position", "[m]", store, "pos", tr.refs[:, 0:3])
    _panels(axs[1, 0], t, tr.states[:, 6:9], AXES, "velocity", "[m/s]", store, "vel")
    _panels(axs[1, 1], t, tr.states[:, 0:3] - tr.refs[:, 0:3], AXES, "positional error", "[m]",
            store, "err")
    _write_data(out_prefix + ".txt", t, store)
    return _save(fig, out_prefix)


def plot_learning_curve(curve, out_prefix):
    """Mean reward against iteration from a learning-curve array."""
    curve = np.asarray(curve)
    if curve.size == 0:
        raise EmptyInputError("empty learning curve")
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    ax.plot(curve[:, 0], curve[:, 1], lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("mean reward")
    ax.grid(alpha=0.3)
    _write_data(out_prefix + ".txt", curve[:, 0], [("mean_reward", curve[:, 1])])
    return _save(fig, out_prefix)

