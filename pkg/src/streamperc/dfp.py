"""Toy dual-flow fusion of two feature maps.

Both frames pass through one shared 1x1 projection followed by a fixed
affine normalization and SiLU. The dynamic flow joins the two projections
(channel concatenation, current frame first, or element-wise sum) and the
static flow adds the current feature map back as a residual.
Feature maps are ``(C, H, W)`` float arrays.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    pass


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def silu(x):
    out = np.asarray(x, dtype=float) * sigmoid(x)
    return float(out) if out.ndim == 0 else out


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + np.asarray(x, dtype=float) * (1.0 - s))


@dataclass
class ProjectionParams:
    """1x1 convolution ``weight`` (C_out, C_in) with per-channel ``scale``/``shift``."""
    weight: np.ndarray
    scale: np.ndarray
    shift: np.ndarray

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        self.shift = np.asarray(self.shift, dtype=float)
        c_out = self.weight.shape[0]
        if self.weight.ndim != 2 or self.scale.shape != (c_out,) or self.shift.shape != (c_out,):
            raise ShapeError(f"inconsistent projection shapes: weight {self.weight.shape}, "
                             f"scale {self.scale.shape}, shift {self.shift.shape}")

    @classmethod
    def random(cls, c_in: int, c_out: int, seed: int = 0) -> "ProjectionParams":
        rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
        return cls(rng.normal(0, 1 / np.sqrt(c_in), (c_out, c_in)),
                   rng.uniform(0.5, 1.5, c_out), rng.normal(0, 0.1, c_out))

    @classmethod
    def zeros(cls, c_in: int, c_out: int) -> "ProjectionParams":
        return cls(np.zeros((c_out, c_in)), np.ones(c_out), np.zeros(c_out))

    def to_json(self) -> dict:
        return {"weight": array_to_json(self.weight), "scale": array_to_json(self.scale),
                "shift": array_to_json(self.shift)}

    @classmethod
    def from_json(cls, doc: dict) -> "ProjectionParams":
        return cls(array_from_json(doc["weight"]), array_from_json(doc["scale"]),
                   array_from_json(doc["shift"]))


@dataclass(frozen=True)
class DFPConfig:
    fusion: str = "concat"  # or "add"
    residual: bool = True

    def __post_init__(self):
        if self.fusion not in ("concat", "add"):
            raise ValueError(f"unsupported fusion {self.fusion!r}")

    def projected_channels(self, c: int) -> int:
        return c // 2 if self.fusion == "concat" else c


def _check_map(f: np.ndarray, name: str) -> np.ndarray:
    f = np.asarray(f, dtype=float)
    if f.ndim != 3:
        raise ShapeError(f"{name} must be (C, H, W), got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ShapeError(f"{name} has non-finite values")
    return f


def _pre_activation(f: np.ndarray, p: ProjectionParams) -> np.ndarray:
    if p.weight.shape[1] != f.shape[0]:
        raise ShapeError(f"projection expects {p.weight.shape[1]} channels, got {f.shape[0]}")
    lin = np.einsum("oc,chw->ohw", p.weight, f)
    return p.scale[:, None, None] * lin + p.shift[:, None, None]


def reduce_project(f: np.ndarray, p: ProjectionParams) -> np.ndarray:
    """``SiLU(scale * (W @ f[:, y, x]) + shift)`` at every pixel."""
    return silu(_pre_activation(_check_map(f, "feature map"), p))


def dfp_fuse(f_prev: np.ndarray, f_cur: np.ndarray, params: ProjectionParams,
             cfg: DFPConfig = DFPConfig()) -> np.ndarray:
    f_prev = _check_map(f_prev, "f_prev")
    f_cur = _check_map(f_cur, "f_cur")
    if f_prev.shape != f_cur.shape:
        raise ShapeError(f"frame shapes differ: {f_prev.shape} vs {f_cur.shape}")
    c = f_cur.shape[0]
    if cfg.fusion == "concat" and c % 2:
        raise ShapeError(f"concat fusion needs an even channel count, got {c}")
    if params.weight.shape[0] != cfg.projected_channels(c):
        raise ShapeError(f"{cfg.fusion} fusion needs {cfg.projected_channels(c)} output "
                         f"channels, params give {params.weight.shape[0]}")
    r_cur = reduce_project(f_cur, params)
    r_prev = reduce_project(f_prev, params)
    dynamic = np.concatenate([r_cur, r_prev], axis=0) if cfg.fusion == "concat" else r_cur + r_prev
    return dynamic + f_cur if cfg.residual else dynamic


def dfp_fuse_grad(f_prev, f_cur, params: ProjectionParams, cfg: DFPConfig = DFPConfig(),
                  grad_output: np.ndarray | None = None) -> ProjectionParams:
    """Gradient of ``sum(grad_output * dfp_fuse(...))`` w.r.t. the projection params.

    ``grad_output`` defaults to ones, i.e. the plain sum of outputs. The
    result is packed in a :class:`ProjectionParams` of gradients.
    """
    f_prev = _check_map(f_prev, "f_prev")
    f_cur = _check_map(f_cur, "f_cur")
    g = np.ones_like(f_cur) if grad_output is None else np.asarray(grad_output, dtype=float)
    co = params.weight.shape[0]
    if cfg.fusion == "concat":
        g_cur, g_prev = g[:co], g[co:]
    else:
        g_cur, g_prev = g, g
    gw = np.zeros_like(params.weight)
    gs = np.zeros_like(params.scale)
    gb = np.zeros_like(params.shift)
    for f, gy in ((f_cur, g_cur), (f_prev, g_prev)):
        lin = np.einsum("oc,chw->ohw", params.weight, f)
        z = params.scale[:, None, None] * lin + params.shift[:, None, None]
        gz = gy * silu_grad(z)
        gb += gz.sum(axis=(1, 2))
        gs += (gz * lin).sum(axis=(1, 2))
        gw += np.einsum("ohw,chw->oc", gz * params.scale[:, None, None], f)
    return ProjectionParams(gw, gs, gb)


def dfp_grad_check(params: ProjectionParams, f_prev, f_cur, cfg: DFPConfig = DFPConfig(),
                   step: float = 1e-5, grad_output=None, grad_fn=None) -> float:
    """Max relative error of analytic vs central-difference parameter gradients.

    ``grad_fn`` overrides the analytic gradient (used to test failure paths).
    """
    g = np.ones_like(np.asarray(f_cur, dtype=float)) if grad_output is None else grad_output
    analytic = (grad_fn or dfp_fuse_grad)(f_prev, f_cur, params, cfg, g)

    def objective(p):
        return float(np.sum(g * dfp_fuse(f_prev, f_cur, p, cfg)))

    worst = 0.0
    for name in ("weight", "scale", "shift"):
        base = getattr(params, name)
        a = getattr(analytic, name)
        for idx in np.ndindex(base.shape):
            plus = {k: getattr(params, k).copy() for k in ("weight", "scale", "shift")}
            minus = {k: v.copy() for k, v in plus.items()}
            plus[name][idx] += step
            minus[name][idx] -= step
            num = (objective(ProjectionParams(**plus)) - objective(ProjectionParams(**minus))) / (2 * step)
            err = abs(a[idx] - num) / max(abs(a[idx]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst


def random_instance(seed: int, c: int = 4, h: int = 3, w: int = 3, fusion: str = "concat"):
    """Random (params, f_prev, f_cur) for checks."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))
    cfg = DFPConfig(fusion=fusion)
    params = ProjectionParams.random(c, cfg.projected_channels(c), seed)
    return params, rng.normal(size=(c, h, w)), rng.normal(size=(c, h, w))


def array_to_json(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=float)
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def array_from_json(doc: dict) -> np.ndarray:
    return np.array(doc["values"], dtype=float).reshape(doc["shape"])


def dumps_feature_map(f: np.ndarray) -> str:
    return json.dumps(array_to_json(f))


def loads_feature_map(text: str) -> np.ndarray:
    return array_from_json(json.loads(text))
