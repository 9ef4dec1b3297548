"""Image perturbations: the similar-state distribution and sim-to-real randomisation.

Every function takes an ``H x W x C`` uint8 array with ``C`` a multiple of 3
(single frames or stacked frame pairs) and returns a new array. Stochastic
spatial content (noise masks, rectangle and band placement) is carried in the
sampled parameters, so :func:`apply` itself is deterministic.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv
from pydantic import BaseModel, Field, model_validator

PHI_KINDS = ("brightness", "contrast", "rotation", "salt_pepper", "gaussian_blur", "cutoff")
SIM2REAL_ORDER = ("hsv_shift", "reflection", "salt_pepper")
KINDS = PHI_KINDS + ("reflection", "hsv_shift")


class AugmentConfigError(ValueError):
    pass


class ParameterRangeError(ValueError):
    pass


def _range(lo, hi):
    return Field(default=(lo, hi))


class PerturbationConfig(BaseModel):
    brightness: tuple[float, float] = _range(0.6, 1.4)
    contrast: tuple[float, float] = _range(0.6, 1.4)
    rotation_deg: tuple[float, float] = _range(-5.0, 5.0)
    salt_pepper: tuple[float, float] = _range(0.0, 0.02)
    salt_ratio: float = Field(0.5, ge=0, le=1)
    blur_sigma: tuple[float, float] = _range(0.0, 1.5)
    cutoff_max_area: float = Field(0.10, ge=0, le=1)
    reflection_intensity: tuple[float, float] = _range(0.0, 0.5)
    reflection_width: tuple[float, float] = _range(0.05, 0.3)  # fraction of image width
    hue_shift_deg: tuple[float, float] = _range(-20.0, 20.0)
    saturation_scale: tuple[float, float] = _range(0.7, 1.3)
    value_scale: tuple[float, float] = _range(0.8, 1.2)
    phi_enabled: list[str] = Field(default_factory=lambda: list(PHI_KINDS))
    phi_compose: bool = False
    sim2real_enabled: list[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check(self):
        for name, value in self:
            if isinstance(value, tuple) and len(value) == 2 and not value[0] <= value[1]:
                raise ValueError(f"{name}: range must satisfy lo <= hi, got {value}")
        for lo, hi, name in (*self.salt_pepper, "salt_pepper"), (*self.reflection_intensity, "reflection_intensity"):
            if lo < 0 or hi > 1:
                raise ValueError(f"{name}: probabilities/intensities must lie in [0, 1]")
        if self.blur_sigma[0] < 0:
            raise ValueError("blur_sigma must be >= 0")
        if self.brightness[0] < 0 or self.contrast[0] < 0:
            raise ValueError("brightness/contrast factors must be >= 0")
        for kind in self.phi_enabled:
            if kind not in KINDS:
                raise ValueError(f"unknown perturbation kind {kind!r}")
        for kind in self.sim2real_enabled:
            if kind not in SIM2REAL_ORDER:
                raise ValueError(f"{kind!r} is not a sim-to-real perturbation")
        return self


def _in(value, rng, name):
    lo, hi = rng
    if not lo - 1e-12 <= value <= hi + 1e-12:
        raise ParameterRangeError(f"{name}={value} outside configured range [{lo}, {hi}]")


def check_params(kind: str, params: dict, cfg: PerturbationConfig) -> None:
    if kind == "brightness":
        _in(params["factor"], cfg.brightness, "brightness factor")
    elif kind == "contrast":
        _in(params["factor"], cfg.contrast, "contrast factor")
    elif kind == "rotation":
        _in(params["angle_deg"], cfg.rotation_deg, "rotation angle")
    elif kind == "salt_pepper":
        _in(params["prob"], cfg.salt_pepper, "salt/pepper probability")
    elif kind == "gaussian_blur":
        _in(params["sigma"], cfg.blur_sigma, "blur sigma")
    elif kind == "cutoff":
        _in(params["area"], (0.0, cfg.cutoff_max_area), "cutoff area")
    elif kind == "reflection":
        _in(params["intensity"], cfg.reflection_intensity, "reflection intensity")
    elif kind == "hsv_shift":
        _in(params["hue_deg"], cfg.hue_shift_deg, "hue shift")
        _in(params["sat"], cfg.saturation_scale, "saturation scale")
        _in(params["val"], cfg.value_scale, "value scale")
    else:
        raise ParameterRangeError(f"unknown perturbation kind {kind!r}")


def _to_u8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


def _frames(obs: np.ndarray):
    c = obs.shape[-1]
    if c % 3:
        raise ValueError(f"channel count {c} is not a multiple of 3")
    return [obs[..., i:i + 3] for i in range(0, c, 3)]


def brightness(obs, factor):
    if factor == 1.0:
        return obs.copy()
    return _to_u8(obs.astype(np.float64) * factor)


def contrast(obs, factor):
    if factor == 1.0:
        return obs.copy()
    out = []
    for f in _frames(obs.astype(np.float64)):
        mean = f.mean()
        out.append((f - mean) * factor + mean)
    return _to_u8(np.concatenate(out, axis=-1))


def rotation(obs, angle_deg):
    """Bilinear rotation about the image centre; exposed corners are black."""
    if angle_deg == 0:
        return obs.copy()
    h, w = obs.shape[:2]
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map: output pixel -> source coordinate
    sx = c * (xx - cx) - s * (yy - cy) + cx
    sy = s * (xx - cx) + c * (yy - cy) + cy
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = (sx - x0)[..., None]
    fy = (sy - y0)[..., None]
    src = obs.astype(np.float64)

    def tap(yi, xi):
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = src[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return np.where(ok[..., None], vals, 0.0)

    out = ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
           + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))
    return _to_u8(out)


def salt_pepper(obs, prob, salt_ratio=0.5, seed=0):
    if prob == 0:
        return obs.copy()
    r = np.random.default_rng(seed)
    h, w = obs.shape[:2]
    hit = r.random((h, w)) < prob
    salt = r.random((h, w)) < salt_ratio
    out = obs.copy()
    out[hit & salt] = 255
    out[hit & ~salt] = 0
    return out


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(obs, sigma):
    """Separable Gaussian blur with reflected borders, kernel radius ceil(3 sigma)."""
    if sigma == 0:
        return obs.copy()
    k = gaussian_kernel(sigma)
    r = len(k) // 2
    x = obs.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * x.ndim
        pad[axis] = (r, r)
        xp = np.pad(x, pad, mode="symmetric")
        n = x.shape[axis]
        acc = np.zeros_like(x)
        for i, wgt in enumerate(k):
            acc += wgt * np.take(xp, np.arange(i, i + n), axis=axis)
        x = acc
    return _to_u8(x)


def cutoff(obs, area, top=0, left=0, aspect=1.0):
    """Black rectangle covering ``area`` (fraction of the image) at (top, left)."""
    if area == 0:
        return obs.copy()
    h, w = obs.shape[:2]
    pixels = area * h * w
    rh = int(min(h, max(1, round(math.sqrt(pixels * aspect)))))
    rw = int(min(w, math.floor(pixels / rh)))
    if rw < 1:
        return obs.copy()
    top = int(min(max(top, 0), h - rh))
    left = int(min(max(left, 0), w - rw))
    out = obs.copy()
    out[top:top + rh, left:left + rw] = 0
    return out


def reflection(obs, intensity, center=0.5, width=0.15, angle_deg=0.0):
    """Additive white glare band; ``center``/``width`` are fractions of image width."""
    if intensity == 0:
        return obs.copy()
    h, w = obs.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    t = math.tan(math.radians(angle_deg))
    offset = (xx - (yy - h / 2.0) * t) / w - center
    profile = np.clip(1.0 - np.abs(offset) / max(width / 2.0, 1e-9), 0.0, 1.0)
    return _to_u8(obs.astype(np.float64) + 255.0 * intensity * profile[..., None])


def hsv_shift(obs, hue_deg=0.0, sat=1.0, val=1.0):
    out = []
    for f in _frames(obs):
        hsv = rgb_to_hsv(f.astype(np.float64) / 255.0)
        hsv[..., 0] = (hsv[..., 0] + hue_deg / 360.0) % 1.0
        hsv[..., 1] = np.clip(hsv[..., 1] * sat, 0.0, 1.0)
        hsv[..., 2] = np.clip(hsv[..., 2] * val, 0.0, 1.0)
        out.append(hsv_to_rgb(hsv) * 255.0)
    return _to_u8(np.concatenate(out, axis=-1))


_APPLY: dict[str, Callable] = {
    "brightness": lambda o, p: brightness(o, p["factor"]),
    "contrast": lambda o, p: contrast(o, p["factor"]),
    "rotation": lambda o, p: rotation(o, p["angle_deg"]),
    "salt_pepper": lambda o, p: salt_pepper(o, p["prob"], p.get("salt_ratio", 0.5), p.get("seed", 0)),
    "gaussian_blur": lambda o, p: gaussian_blur(o, p["sigma"]),
    "cutoff": lambda o, p: cutoff(o, p["area"], p.get("top", 0), p.get("left", 0), p.get("aspect", 1.0)),
    "reflection": lambda o, p: reflection(o, p["intensity"], p.get("center", 0.5), p.get("width", 0.15),
                                          p.get("angle_deg", 0.0)),
    "hsv_shift": lambda o, p: hsv_shift(o, p.get("hue_deg", 0.0), p.get("sat", 1.0), p.get("val", 1.0)),
}


def apply(kind: str, params: dict, obs: np.ndarray, cfg: PerturbationConfig | None = None) -> np.ndarray:
    """Apply one perturbation. With ``cfg`` given, parameters are range-checked first."""
    if kind not in _APPLY:
        raise ParameterRangeError(f"unknown perturbation kind {kind!r}")
    if cfg is not None:
        check_params(kind, params, cfg)
    return _APPLY[kind](obs, params)


def sample_params(kind: str, cfg: PerturbationConfig, rng: np.random.Generator, shape) -> dict:
    h, w = shape[:2]
    u = rng.uniform
    if kind == "brightness":
        return {"factor": u(*cfg.brightness)}
    if kind == "contrast":
        return {"factor": u(*cfg.contrast)}
    if kind == "rotation":
        return {"angle_deg": u(*cfg.rotation_deg)}
    if kind == "salt_pepper":
        return {"prob": u(*cfg.salt_pepper), "salt_ratio": cfg.salt_ratio,
                "seed": int(rng.integers(2**63))}
    if kind == "gaussian_blur":
        return {"sigma": u(*cfg.blur_sigma)}
    if kind == "cutoff":
        return {"area": u(0.0, cfg.cutoff_max_area), "top": int(rng.integers(h)),
                "left": int(rng.integers(w)), "aspect": float(np.exp(u(-0.7, 0.7)))}
    if kind == "reflection":
        return {"intensity": u(*cfg.reflection_intensity), "center": u(0.0, 1.0),
                "width": u(*cfg.reflection_width), "angle_deg": u(-30.0, 30.0)}
    if kind == "hsv_shift":
        return {"hue_deg": u(*cfg.hue_shift_deg), "sat": u(*cfg.saturation_scale),
                "val": u(*cfg.value_scale)}
    raise ParameterRangeError(f"unknown perturbation kind {kind!r}")


def sample_phi(cfg: PerturbationConfig, obs: np.ndarray, rng: np.random.Generator,
               return_kind: bool = False):
    """Draw a similar state: one enabled kind chosen uniformly, parameters uniform in range."""
    kinds = list(cfg.phi_enabled)
    if not kinds:
        raise AugmentConfigError("spatial perturbation set is empty")
    if cfg.phi_compose:
        out = obs
        for kind in kinds:
            out = apply(kind, sample_params(kind, cfg, rng, obs.shape), out)
        return (out, "compose") if return_kind else out
    kind = kinds[int(rng.integers(len(kinds)))]
    out = apply(kind, sample_params(kind, cfg, rng, obs.shape), obs)
    return (out, kind) if return_kind else out


def sim2real_pipeline(cfg: PerturbationConfig, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = obs
    for kind in SIM2REAL_ORDER:
        if kind in cfg.sim2real_enabled:
            out = apply(kind, sample_params(kind, cfg, rng, obs.shape), out)
    return out.copy() if out is obs else out


def identity(obs: np.ndarray) -> np.ndarray:
    return obs


def invert(obs: np.ndarray) -> np.ndarray:
    return 255 - obs


TRANSLATORS: dict[str, Callable[[np.ndarray], np.ndarray]] = {"identity": identity, "invert": invert}


def get_translator(name_or_fn) -> Callable[[np.ndarray], np.ndarray]:
    if callable(name_or_fn):
        return name_or_fn
    try:
        return TRANSLATORS[name_or_fn]
    except KeyError:
        raise AugmentConfigError(f"unknown translator {name_or_fn!r}; known: {sorted(TRANSLATORS)}") from None


def translate(obs: np.ndarray, translator="identity") -> np.ndarray:
    """Observation-translator seam; a learned sim/real mapping plugs in via ``TRANSLATORS``."""
    return get_translator(translator)(obs)


def contact_sheet(obs: np.ndarray, cfg: PerturbationConfig, rng: np.random.Generator,
                  samples_per_kind: int = 4, kinds=KINDS) -> np.ndarray:
    """Grid image: one row per kind, first column the clean frame."""
    h, w = obs.shape[:2]
    rows = []
    for kind in kinds:
        tiles = [obs]
        for _ in range(samples_per_kind):
            tiles.append(apply(kind, sample_params(kind, cfg, rng, obs.shape), obs))
        rows.append(np.concatenate([np.pad(t, ((1, 1), (1, 1), (0, 0))) for t in tiles], axis=1))
    return np.concatenate(rows, axis=0)
