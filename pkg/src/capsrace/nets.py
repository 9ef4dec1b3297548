"""Policy and twin-critic networks on top of :mod:`capsrace.autodiff`."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel, Field

from . import autodiff as ad
from .autodiff import NumericError, Tensor

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
FORMAT_VERSION = 1
MAGIC = b"CAPSPRM\x00"


class ParamFileError(ValueError):
    pass


class ArchConfig(BaseModel):
    # (kernel, stride, channels) per conv layer
    conv: list[tuple[int, int, int]] = Field(default_factory=lambda: [(8, 4, 16), (4, 2, 32), (3, 1, 32)])
    hidden: int = Field(256, ge=1)
    dtype: str = "float32"
    policy_head_scale: float = 0.01


class ParamSet:
    """Ordered named arrays with immutable shapes and a version counter."""

    def __init__(self, arrays: dict[str, np.ndarray], version: int = 0, arch: dict | None = None):
        self.arrays = dict(arrays)
        self.version = version
        self.arch = arch or {}

    def __getitem__(self, name):
        return self.arrays[name]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def shapes(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.arrays.items()}

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.arrays.items()}, self.version, dict(self.arch))

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def arch_hash(self) -> str:
        blob = json.dumps(self.arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def equal(self, other: "ParamSet") -> bool:
        return (self.shapes() == other.shapes()
                and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items()))

    def max_abs_diff(self, other: "ParamSet") -> float:
        return max(float(np.max(np.abs(v - other.arrays[k]))) for k, v in self.arrays.items())


def conv_output_hw(h: int, w: int, conv) -> tuple[int, int]:
    for k, s, _ in conv:
        h = (h - k) // s + 1
        w = (w - k) // s + 1
        if h < 1 or w < 1:
            raise ValueError(f"conv stack {conv} does not fit the input; shrinks to {h}x{w}")
    return h, w


def _uniform(rng, shape, fan_in, dtype, scale=1.0):
    bound = scale / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _encoder_params(rng, obs_shape, arch, prefix=""):
    h, w, c = obs_shape
    out = {}
    cin = c
    for i, (k, s, cout) in enumerate(arch.conv, 1):
        fan = k * k * cin
        out[f"{prefix}conv{i}.w"] = _uniform(rng, (k, k, cin, cout), fan, arch.dtype)
        out[f"{prefix}conv{i}.b"] = _uniform(rng, (cout,), fan, arch.dtype)
        cin = cout
    oh, ow = conv_output_hw(h, w, arch.conv)
    return out, oh * ow * cin


def build_policy(rng, obs_shape, action_dims, arch: ArchConfig) -> ParamSet:
    p, flat = _encoder_params(rng, obs_shape, arch)
    p["fc.w"] = _uniform(rng, (flat, arch.hidden), flat, arch.dtype)
    p["fc.b"] = _uniform(rng, (arch.hidden,), flat, arch.dtype)
    s = arch.policy_head_scale
    p["head.w"] = _uniform(rng, (arch.hidden, 2 * action_dims), arch.hidden, arch.dtype, s)
    p["head.b"] = _uniform(rng, (2 * action_dims,), arch.hidden, arch.dtype, s)
    meta = {"kind": "policy", "obs_shape": list(obs_shape), "action_dims": action_dims, **arch.model_dump()}
    return ParamSet(p, arch=meta)


def build_critic(rng, obs_shape, action_dims, arch: ArchConfig) -> ParamSet:
    p, flat = _encoder_params(rng, obs_shape, arch)
    fan = flat + action_dims
    p["fc.w"] = _uniform(rng, (fan, arch.hidden), fan, arch.dtype)
    p["fc.b"] = _uniform(rng, (arch.hidden,), fan, arch.dtype)
    p["q.w"] = _uniform(rng, (arch.hidden, 1), arch.hidden, arch.dtype)
    p["q.b"] = _uniform(rng, (1,), arch.hidden, arch.dtype)
    meta = {"kind": "critic", "obs_shape": list(obs_shape), "action_dims": action_dims, **arch.model_dump()}
    return ParamSet(p, arch=meta)


@dataclass
class Networks:
    policy: ParamSet
    critic1: ParamSet
    critic2: ParamSet
    target1: ParamSet
    target2: ParamSet
    log_alpha: float = math.log(0.3)

    def named(self) -> dict[str, ParamSet]:
        return {"policy": self.policy, "critic1": self.critic1, "critic2": self.critic2,
                "target1": self.target1, "target2": self.target2}

    def copy(self) -> "Networks":
        return Networks(*(p.copy() for p in self.named().values()), log_alpha=self.log_alpha)


def build_networks(obs_shape, action_dims: int = 2, arch: ArchConfig | None = None,
                   seed: int = 0, alpha_init: float = 0.3) -> Networks:
    arch = arch or ArchConfig()
    if len(obs_shape) != 3 or obs_shape[2] % 3:
        raise ValueError(f"observation shape must be H x W x (3k), got {obs_shape}")
    rng = np.random.default_rng(seed)
    policy = build_policy(rng, obs_shape, action_dims, arch)
    c1 = build_critic(rng, obs_shape, action_dims, arch)
    c2 = build_critic(rng, obs_shape, action_dims, arch)
    return Networks(policy, c1, c2, c1.copy(), c2.copy(), math.log(alpha_init))


def _input(obs, dtype) -> Tensor:
    if isinstance(obs, Tensor):
        return obs
    x = np.asarray(obs)
    if x.ndim == 3:
        x = x[None]
    if x.dtype == np.uint8:
        x = x.astype(dtype) / np.asarray(255.0, dtype=dtype)
    else:
        x = x.astype(dtype, copy=False)
    return Tensor(x)


def _encode(t: dict[str, Tensor], x: Tensor, conv) -> Tensor:
    for i, (_, s, _) in enumerate(conv, 1):
        x = ad.check_finite(ad.relu(ad.conv2d(x, t[f"conv{i}.w"], t[f"conv{i}.b"], s)), f"conv{i}")
    return ad.reshape(x, (x.shape[0], -1))


def policy_forward(params: ParamSet, obs, tensors: dict[str, Tensor] | None = None):
    """Mean and clamped log-std of the pre-squash Gaussian; both ``(N, action_dims)``."""
    t = tensors if tensors is not None else params.tensors(requires_grad=False)
    conv = params.arch.get("conv", [])
    x = _encode(t, _input(obs, params["fc.w"].dtype), conv)
    hdn = ad.check_finite(ad.relu(ad.dense(x, t["fc.w"], t["fc.b"])), "fc")
    out = ad.check_finite(ad.dense(hdn, t["head.w"], t["head.b"]), "head")
    k = out.shape[1] // 2
    mean = ad.slice_cols(out, 0, k)
    log_std = ad.clip(ad.slice_cols(out, k, 2 * k), LOG_STD_MIN, LOG_STD_MAX)
    return mean, log_std


def critic_forward(params: ParamSet, obs, action, tensors: dict[str, Tensor] | None = None,
                   features: Tensor | None = None) -> Tensor:
    """Q-value per batch row, shape ``(N,)``."""
    t = tensors if tensors is not None else params.tensors(requires_grad=False)
    if features is None:
        features = critic_features(params, obs, t)
    a = action if isinstance(action, Tensor) else Tensor(np.asarray(action, dtype=params["fc.w"].dtype).reshape(features.shape[0], -1))
    hdn = ad.check_finite(ad.relu(ad.dense(ad.concat([features, a], axis=1), t["fc.w"], t["fc.b"])), "critic.fc")
    q = ad.check_finite(ad.dense(hdn, t["q.w"], t["q.b"]), "critic.q")
    return ad.reshape(q, (q.shape[0],))


def critic_features(params: ParamSet, obs, tensors: dict[str, Tensor] | None = None) -> Tensor:
    t = tensors if tensors is not None else params.tensors(requires_grad=False)
    return _encode(t, _input(obs, params["fc.w"].dtype), params.arch.get("conv", []))


_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def squashed_sample(mean: Tensor, log_std: Tensor, eps: np.ndarray):
    """Reparameterised tanh-Gaussian sample and its log-density, summed over action dims."""
    eps = np.asarray(eps, dtype=mean.data.dtype)
    u = mean + ad.exp(log_std) * Tensor(eps)
    a = ad.tanh(u)
    gauss = ad.tsum(Tensor(-0.5 * eps * eps - _HALF_LOG_2PI) - log_std, axis=1)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u))
    corr = ad.tsum((math.log(2.0) - u - ad.softplus(-2.0 * u)) * 2.0, axis=1)
    return a, gauss - corr


@dataclass
class ActionSample:
    action: np.ndarray
    log_prob: np.ndarray | None = None


def sample_action(mean, log_std, rng: np.random.Generator | None = None) -> ActionSample:
    """Deterministic (``rng is None``) tanh(mean), or a stochastic squashed-Gaussian draw."""
    mean = mean if isinstance(mean, Tensor) else Tensor(np.atleast_2d(mean))
    log_std = log_std if isinstance(log_std, Tensor) else Tensor(np.atleast_2d(log_std))
    if rng is None:
        return ActionSample(np.tanh(mean.data))
    eps = rng.standard_normal(mean.shape)
    a, logp = squashed_sample(Tensor(mean.data), Tensor(log_std.data), eps)
    return ActionSample(a.data, logp.data)


def act(params: ParamSet, obs, rng: np.random.Generator | None = None) -> np.ndarray:
    mean, log_std = policy_forward(params, obs)
    return sample_action(mean, log_std, rng).action


def grads_of(tensors: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in tensors.items()}


class Adam:
    def __init__(self, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def state_dict(self) -> dict:
        return {"t": self.t, "m": {k: v.copy() for k, v in self.m.items()},
                "v": {k: v.copy() for k, v in self.v.items()}}


def apply_update(params: ParamSet, grads: dict[str, np.ndarray], opt: Adam) -> ParamSet:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", name)
    opt.t += 1
    c1 = 1.0 - opt.b1 ** opt.t
    c2 = 1.0 - opt.b2 ** opt.t
    for name, p in params.arrays.items():
        g = grads[name].astype(p.dtype, copy=False)
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= opt.b1
        m += (1 - opt.b1) * g
        v *= opt.b2
        v += (1 - opt.b2) * g * g
        p -= (opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)).astype(p.dtype, copy=False)
    params.version += 1
    return params


def soft_update(target: ParamSet, online: ParamSet, tau: float) -> ParamSet:
    if target.shapes() != online.shapes():
        raise ValueError("soft_update: parameter shapes differ")
    for name, t in target.arrays.items():
        t[...] = (1.0 - tau) * t + tau * online.arrays[name]
    return target


def save(params: ParamSet, path) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, arr in params.items():
        le = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
        blob = le.tobytes()
        manifest.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.lstrip("<>=|"),
                         "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"format_version": FORMAT_VERSION, "param_version": params.version,
                         "arch": params.arch, "arch_hash": params.arch_hash(),
                         "arrays": manifest}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load(path, expected: ParamSet | None = None) -> ParamSet:
    raw = Path(path).read_bytes()
    if len(raw) < len(MAGIC) + 4 or raw[: len(MAGIC)] != MAGIC:
        raise ParamFileError(f"{path}: not a parameter file (bad magic or truncated)")
    (hlen,) = struct.unpack("<I", raw[len(MAGIC): len(MAGIC) + 4])
    start = len(MAGIC) + 4
    if len(raw) < start + hlen:
        raise ParamFileError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start: start + hlen])
    except json.JSONDecodeError as exc:
        raise ParamFileError(f"{path}: corrupt header ({exc})") from None
    if header.get("format_version") != FORMAT_VERSION:
        raise ParamFileError(f"{path}: version mismatch (file {header.get('format_version')}, "
                             f"expected {FORMAT_VERSION})")
    body = raw[start + hlen:]
    arrays = {}
    for entry in header["arrays"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(body):
            raise ParamFileError(f"{path}: truncated data for {entry['name']}")
        dt = np.dtype("<" + entry["dtype"])
        if int(np.prod(entry["shape"])) * dt.itemsize != entry["nbytes"]:
            raise ParamFileError(f"{path}: shape manifest for {entry['name']} disagrees with its data size")
        arr = np.frombuffer(body[entry["offset"]: end], dtype=dt).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(dt.newbyteorder("="), copy=True)
    params = ParamSet(arrays, header.get("param_version", 0), header.get("arch", {}))
    if expected is not None:
        if params.shapes() != expected.shapes():
            raise ParamFileError(f"{path}: shape manifest does not match the configured architecture")
        if expected.arch and params.arch_hash() != expected.arch_hash():
            raise ParamFileError(f"{path}: architecture hash mismatch")
    return params


def save_networks(nets: Networks, path) -> None:
    merged = {}
    arch = {}
    for prefix, ps in nets.named().items():
        for k, v in ps.items():
            merged[f"{prefix}/{k}"] = v
        arch[prefix] = ps.arch
    merged["log_alpha"] = np.array([nets.log_alpha], dtype=np.float64)
    save(ParamSet(merged, nets.policy.version, arch), path)


def load_networks(path, expected: Networks | None = None) -> Networks:
    ps = load(path)
    parts: dict[str, dict] = {}
    for k, v in ps.items():
        if "/" in k:
            prefix, name = k.split("/", 1)
            parts.setdefault(prefix, {})[name] = v
    try:
        sets = {p: ParamSet(parts[p], ps.version, ps.arch.get(p, {}))
                for p in ("policy", "critic1", "critic2", "target1", "target2")}
    except KeyError as exc:
        raise ParamFileError(f"{path}: checkpoint lacks network {exc.args[0]!r}") from None
    if expected is not None:
        for name, ref in expected.named().items():
            if sets[name].shapes() != ref.shapes():
                raise ParamFileError(f"{path}: {name} shape manifest does not match the configured architecture")
    return Networks(**sets, log_alpha=float(ps["log_alpha"][0]))
