#!/usr/bin/env python3
"""Render this run's CSV artifacts; writes PNGs next to the script."""
import csv
import os

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read(name):
    with open(os.path.join(HERE, name)) as fh:
        return list(csv.DictReader(fh))


def col(rows, key):
    return [float(r[key]) for r in rows]


def by_time(rows):
    groups = {}
    for r in rows:
        groups.setdefault(float(r["t"]), []).append(r)
    return sorted(groups.items())


def save(fig, name):
    fig.tight_layout()
    fig.savefig(os.path.join(HERE, name), dpi = 150)
    plt.close(fig)
    print("wrote", name)

fig, ax = plt.subplots(figsize = (7, 4.5))
for t, rows in by_time(read("sde_discontinuous_hist.csv")):
    ax.plot(col(rows, "x1"), col(rows, "f"), label = "sde_discontinuous_hist t = " + str(t), drawstyle = "steps-mid")
for t, rows in by_time(read("sde_surrogate_hist.csv")):
    ax.plot(col(rows, "x1"), col(rows, "f"), label = "sde_surrogate_hist t = " + str(t), drawstyle = "steps-mid")
rows = read("equilibrium.csv")
ax.plot(col(rows, "x1"), col(rows, "f"), "k--", label = "steady state")
ax.set_xlabel("x")
ax.set_ylabel("density")
ax.legend(fontsize = 7)
save(fig, "fig_density.png")

fig, axes = plt.subplots(1, 2, figsize = (10, 4))
rows = read("sde_discontinuous_trajectory.csv")
axes[0].plot(col(rows, "t"), col(rows, "mean_x1"), label = "sde_discontinuous_trajectory")
axes[1].plot(col(rows, "t"), col(rows, "energy"), label = "sde_discontinuous_trajectory")
rows = read("sde_surrogate_trajectory.csv")
axes[0].plot(col(rows, "t"), col(rows, "mean_x1"), label = "sde_surrogate_trajectory")
axes[1].plot(col(rows, "t"), col(rows, "energy"), label = "sde_surrogate_trajectory")
axes[0].set_xlabel("t")
axes[0].set_ylabel("mean (first axis)")
axes[0].legend(fontsize = 7)
axes[1].set_xlabel("t")
axes[1].set_ylabel("energy")
axes[1].legend(fontsize = 7)
save(fig, "fig_moments.png")
