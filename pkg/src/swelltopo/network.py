"""Coordinate network design field: Fourier features -> 2 ReLU layers -> softmax/sigmoid heads.

The forward and reverse passes are written out by hand for this fixed
architecture; all trainable weights live in one flat vector.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .io import atomic_write


def default_bandwidth(n_max, num_fourier=64):
    """Bandwidth whose largest sampled frequency resolves roughly four elements."""
    return n_max / (8.0 * np.sqrt(2.0 * np.log(max(num_fourier, 2))))


@dataclass
class DesignNetwork:
    B: np.ndarray                    # (num_fourier, dim), frozen
    box_lo: np.ndarray
    box_hi: np.ndarray
    layout: list                     # [(name, shape)] in flat order
    w: np.ndarray
    heads: dict                      # head name -> output width
    seed: int = 0
    sigma: float = 1.0
    hidden: tuple = (40, 40)
    init_record: dict = field(default_factory=dict)

    @property
    def n_params(self):
        return self.w.size

    def unflatten(self, w=None):
        w = self.w if w is None else w
        out, k = {}, 0
        for name, shape in self.layout:
            n = int(np.prod(shape))
            out[name] = w[k:k + n].reshape(shape)
            k += n
        return out

    def normalize(self, coords):
        coords = np.asarray(coords, float)
        return 2.0 * (coords - self.box_lo) / (self.box_hi - self.box_lo) - 1.0

    def features(self, coords):
        z = 2.0 * np.pi * self.normalize(coords) @ self.B.T
        return np.concatenate([np.cos(z), np.sin(z)], axis=-1)

    def header(self):
        return {"hidden": list(self.hidden), "heads": self.heads, "seed": self.seed,
                "sigma": self.sigma, "num_fourier": int(self.B.shape[0]), "dim": int(self.B.shape[1]),
                "box_lo": self.box_lo.tolist(), "box_hi": self.box_hi.tolist(),
                "layout": [[n, list(s)] for n, s in self.layout]}


def init_network(seed, spatial_dim=2, num_fourier=64, heads=None, hidden=(40, 40),
                 sigma=1.0, box=((0.0, 0.0), (1.0, 1.0))) -> DesignNetwork:
    """Seeded Xavier-normal network; the Fourier matrix is drawn N(0, sigma^2) and frozen."""
    heads = dict(heads or {"rho": 3})
    if spatial_dim < 1 or num_fourier < 1 or any(h < 1 for h in hidden) or any(v < 1 for v in heads.values()):
        raise ValueError("network sizes must be positive")
    rng = np.random.default_rng(seed)
    B = rng.normal(0.0, sigma, size=(num_fourier, spatial_dim))
    widths = [2 * num_fourier, *hidden]
    layout, parts = [], []
    for i in range(len(hidden)):
        fan_in, fan_out = widths[i], widths[i + 1]
        layout += [(f"W{i}", (fan_in, fan_out)), (f"b{i}", (fan_out,))]
        parts += [rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)).ravel(),
                  np.zeros(fan_out)]
    for name in sorted(heads):
        fan_in, fan_out = hidden[-1], heads[name]
        layout += [(f"W_{name}", (fan_in, fan_out)), (f"b_{name}", (fan_out,))]
        parts += [rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out)).ravel(),
                  np.zeros(fan_out)]
    lo, hi = (np.asarray(b, float) for b in box)
    return DesignNetwork(B=B, box_lo=lo, box_hi=hi, layout=layout, w=np.concatenate(parts),
                         heads=heads, seed=seed, sigma=sigma, hidden=tuple(hidden),
                         init_record={"scheme": "xavier_normal", "bias": "zeros"})


def _forward(net, coords, w):
    p = net.unflatten(w)
    a = [net.features(coords)]
    pre = []
    for i in range(len(net.hidden)):
        z = a[-1] @ p[f"W{i}"] + p[f"b{i}"]
        pre.append(z)
        a.append(np.maximum(z, 0.0))
    out = {}
    if "rho" in net.heads:
        logits = a[-1] @ p["W_rho"] + p["b_rho"]
        logits = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(logits)
        out["rho"] = e / e.sum(axis=-1, keepdims=True)
    if "theta" in net.heads:
        z = a[-1] @ p["W_theta"] + p["b_theta"]
        sig = expit(z[..., 0])
        out["theta"] = np.pi * sig
        out["_sig"] = sig
    return out, (p, a, pre)


def evaluate(net: DesignNetwork, coords, w=None):
    """Phase pseudodensities ``rho`` (n, n_phases) and/or fiber angles ``theta`` (n,) in [0, pi)."""
    out, _ = _forward(net, coords, net.w if w is None else w)
    out.pop("_sig", None)
    return out


def pullback(net: DesignNetwork, coords, cot_rho=None, cot_theta=None, w=None):
    """Gradient of ``sum(cot_rho * rho) + sum(cot_theta * theta)`` with respect to the flat weights."""
    w = net.w if w is None else w
    out, (p, a, pre) = _forward(net, coords, w)
    grads = {name: np.zeros(shape) for name, shape in net.layout}
    da = np.zeros_like(a[-1])
    if cot_rho is not None and "rho" in net.heads:
        rho = out["rho"]
        c = np.asarray(cot_rho, float)
        dlog = rho * (c - np.sum(rho * c, axis=-1, keepdims=True))
        grads["W_rho"] = a[-1].T @ dlog
        grads["b_rho"] = dlog.sum(axis=0)
        da = da + dlog @ p["W_rho"].T
    if cot_theta is not None and "theta" in net.heads:
        sig = out["_sig"]
        dz = (np.asarray(cot_theta, float) * np.pi * sig * (1.0 - sig))[:, None]
        grads["W_theta"] = a[-1].T @ dz
        grads["b_theta"] = dz.sum(axis=0)
        da = da + dz @ p["W_theta"].T
    for i in reversed(range(len(net.hidden))):
        dz = da * (pre[i] > 0)
        grads[f"W{i}"] = a[i].T @ dz
        grads[f"b{i}"] = dz.sum(axis=0)
        da = dz @ p[f"W{i}"].T
    return np.concatenate([grads[name].ravel() for name, _ in net.layout])


def save_snapshot(net: DesignNetwork, path, extra=None):
    """Text snapshot: one JSON header line, then one weight per line at full precision."""
    header = net.header()
    header["B"] = net.B.ravel().tolist()
    if extra:
        header["extra"] = extra
    with atomic_write(path) as fh:
        fh.write("# " + json.dumps(header) + "\n")
        np.savetxt(fh, net.w, fmt="%.17g")


def load_snapshot(path) -> DesignNetwork:
    with open(path) as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise ValueError(f"{path}: missing snapshot header")
        h = json.loads(first[2:])
        w = np.loadtxt(fh, ndmin=1)
    B = np.asarray(h["B"], float).reshape(h["num_fourier"], h["dim"])
    layout = [(n, tuple(s)) for n, s in h["layout"]]
    net = DesignNetwork(B=B, box_lo=np.asarray(h["box_lo"]), box_hi=np.asarray(h["box_hi"]), layout=layout,
                        w=w, heads=h["heads"], seed=h["seed"], sigma=h["sigma"], hidden=tuple(h["hidden"]))
    net.init_record = {"extra": h.get("extra", {})}
    return net
