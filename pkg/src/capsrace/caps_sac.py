"""Soft actor-critic learner with temporal and spatial action-smoothness penalties."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Literal

import numpy as np
from pydantic import BaseModel, Field

from . import autodiff as ad
from . import nets
from .augment import PerturbationConfig, sample_phi
from .autodiff import NumericError, Tensor


class SacConfig(BaseModel):
    gamma: float = Field(0.98, gt=0, lt=1)
    n_step: int = Field(4, ge=1)
    alpha_init: float = Field(0.3, gt=0)
    alpha_mode: Literal["fixed", "auto"] = "auto"
    target_entropy: float | None = None  # defaults to -action_dims
    batch_size: int = Field(512, ge=1)
    lr: float = Field(3e-4, gt=0)
    tau: float = Field(0.005, ge=0, le=1)


class CapsConfig(BaseModel):
    lambda_T: float = Field(1.0, ge=0, allow_inf_nan=False)
    lambda_S: float = Field(1.0, ge=0, allow_inf_nan=False)
    phi: PerturbationConfig | None = None  # None means the default perturbation ranges
    distance_actions: Literal["deterministic", "sampled"] = "deterministic"


@dataclass
class LossReport:
    critic_loss: float
    policy_loss: float
    l_temporal: float
    l_spatial: float
    alpha_value: float
    total_policy_objective: float

    def as_dict(self) -> dict:
        return asdict(self)


class LossError(NumericError):
    def __init__(self, message, where=None, report: dict | None = None):
        super().__init__(message, where)
        self.report = report or {}


PolicyFn = Callable[[np.ndarray], "Tensor | np.ndarray"]


def _as_actions(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


def mean_distance(a, b) -> Tensor:
    """Batch mean of the Euclidean distance between action rows."""
    a, b = _as_actions(a), _as_actions(b)
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"batch length mismatch: {a.shape[0]} vs {b.shape[0]}")
    return ad.mean(ad.row_norm(a - b))


def temporal_loss(policy: PolicyFn, s_t, s_t1) -> Tensor:
    if len(s_t) != len(s_t1):
        raise ValueError(f"batch length mismatch: {len(s_t)} vs {len(s_t1)}")
    return mean_distance(policy(s_t), policy(s_t1))


def perturb_batch(phi: PerturbationConfig, s_t, rng: np.random.Generator) -> np.ndarray:
    """One fresh draw from the similar-state distribution per state."""
    return np.stack([sample_phi(phi, s, rng) for s in s_t])


def spatial_loss(policy: PolicyFn, s_t, phi: PerturbationConfig, rng: np.random.Generator,
                 perturbed=None) -> Tensor:
    if perturbed is None:
        perturbed = perturb_batch(phi, s_t, rng)
    return mean_distance(policy(s_t), policy(perturbed))


def deterministic_policy(params: nets.ParamSet, tensors=None) -> PolicyFn:
    def fn(obs):
        mean, _ = nets.policy_forward(params, obs, tensors)
        return ad.tanh(mean)
    return fn


def steering_penalty_reward(action, coefficient: float = 0.003, steering_limit: float = 0.45) -> float:
    """Reward-shaping baseline: ``-coefficient * |steering in degrees|``."""
    steer = float(np.clip(action[0], -1.0, 1.0))
    return -coefficient * abs(math.degrees(steer * steering_limit))


@dataclass
class PolicyTerms:
    sac: Tensor
    l_temporal: Tensor
    l_spatial: Tensor
    total: Tensor
    log_prob: np.ndarray

    def objective(self, lambda_T: float, lambda_S: float) -> float:
        return float(self.sac.data) + lambda_T * float(self.l_temporal.data) + lambda_S * float(self.l_spatial.data)


def policy_terms(n: nets.Networks, obs, successor_obs, perturbed, eps, alpha: float,
                 caps: CapsConfig | None, tensors=None, eps_extra=None) -> PolicyTerms:
    """Policy objective pieces for fixed noise ``eps`` and fixed perturbed states.

    CAPS terms only enter the differentiated graph when their weight is
    non-zero; otherwise they are evaluated detached for reporting.
    """
    t = tensors if tensors is not None else n.policy.tensors(requires_grad=False)
    mean, log_std = nets.policy_forward(n.policy, obs, t)
    a, logp = nets.squashed_sample(mean, log_std, eps)
    q1 = nets.critic_forward(n.critic1, obs, a)
    q2 = nets.critic_forward(n.critic2, obs, a)
    sac = ad.mean(alpha * logp - ad.minimum(q1, q2))
    if caps is None:
        zero = Tensor(np.zeros((), dtype=sac.data.dtype))
        return PolicyTerms(sac, zero, zero, sac, logp.data)

    detached = n.policy.tensors(requires_grad=False)
    terms = []
    for lam, other, key in ((caps.lambda_T, successor_obs, 0), (caps.lambda_S, perturbed, 1)):
        tt = t if lam != 0 else detached
        if caps.distance_actions == "sampled":
            base = a if lam != 0 else Tensor(a.data)
            m2, ls2 = nets.policy_forward(n.policy, other, tt)
            other_a, _ = nets.squashed_sample(m2, ls2, eps_extra[key])
        else:
            base = ad.tanh(mean) if lam != 0 else Tensor(np.tanh(mean.data))
            other_a = deterministic_policy(n.policy, tt)(other)
        terms.append(mean_distance(base, other_a))
    l_t, l_s = terms
    total = sac
    if caps.lambda_T != 0:
        total = total + caps.lambda_T * l_t
    if caps.lambda_S != 0:
        total = total + caps.lambda_S * l_s
    return PolicyTerms(sac, l_t, l_s, total, logp.data)


class Learner:
    """Owns the online/target parameters, optimisers and learner RNG streams."""

    def __init__(self, networks: nets.Networks, sac: SacConfig, caps: CapsConfig | None,
                 seed: int = 0, action_dims: int = 2):
        self.nets = networks
        self.sac = sac
        self.caps = caps
        ss = np.random.SeedSequence(seed)
        sac_seed, phi_seed = ss.spawn(2)
        self.rng = np.random.default_rng(sac_seed)
        # separate stream so CAPS sampling never shifts the SAC noise
        self.phi_rng = np.random.default_rng(phi_seed)
        self.policy_opt = nets.Adam(sac.lr)
        self.critic1_opt = nets.Adam(sac.lr)
        self.critic2_opt = nets.Adam(sac.lr)
        self.alpha_opt = nets.Adam(sac.lr)
        self.log_alpha = np.array([networks.log_alpha], dtype=np.float64)
        self.target_entropy = sac.target_entropy if sac.target_entropy is not None else -float(action_dims)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return float(math.exp(self.log_alpha[0]))

    def critic_target(self, batch) -> np.ndarray:
        n = self.nets
        mean, log_std = nets.policy_forward(n.policy, batch.bootstrap_obs)
        eps = self.rng.standard_normal(mean.shape)
        a, logp = nets.squashed_sample(mean, log_std, eps)
        q1 = nets.critic_forward(n.target1, batch.bootstrap_obs, a).data
        q2 = nets.critic_forward(n.target2, batch.bootstrap_obs, a).data
        soft_v = np.minimum(q1, q2) - self.alpha * logp.data
        mask = 1.0 - np.asarray(batch.done, dtype=np.float64)
        discount = self.sac.gamma ** self.sac.n_step
        return (np.asarray(batch.n_step_return, dtype=np.float64) + discount * mask * soft_v).astype(q1.dtype)

    def update(self, batch, weights=None) -> tuple[LossReport, np.ndarray]:
        n = self.nets
        report: dict = {}
        alpha = self.alpha
        bsz = len(batch.action)
        w = np.ones(bsz) if weights is None else np.asarray(weights, dtype=np.float64)

        # critics
        y = self.critic_target(batch)
        t1 = n.critic1.tensors()
        t2 = n.critic2.tensors()
        dt = y.dtype
        act = np.asarray(batch.action, dtype=dt)
        q1 = nets.critic_forward(n.critic1, batch.obs, act, t1)
        q2 = nets.critic_forward(n.critic2, batch.obs, act, t2)
        wt = Tensor(w.astype(dt))
        l1 = ad.mean(wt * ad.square(q1 - Tensor(y)))
        l2 = ad.mean(wt * ad.square(q2 - Tensor(y)))
        report["critic_loss"] = 0.5 * (float(l1.data) + float(l2.data))
        self._check(report, "critic_loss")
        (l1 + l2).backward()
        nets.apply_update(n.critic1, nets.grads_of(t1), self.critic1_opt)
        nets.apply_update(n.critic2, nets.grads_of(t2), self.critic2_opt)
        td = 0.5 * (np.abs(q1.data - y) + np.abs(q2.data - y))

        # policy
        eps = self.rng.standard_normal((bsz, act.shape[1]))
        perturbed = None
        eps_extra = None
        if self.caps is not None:
            perturbed = perturb_batch(self.caps.phi or PerturbationConfig(), batch.obs, self.phi_rng)
            if self.caps.distance_actions == "sampled":
                eps_extra = (self.phi_rng.standard_normal(eps.shape), self.phi_rng.standard_normal(eps.shape))
        tp = n.policy.tensors()
        terms = policy_terms(n, batch.obs, batch.successor_obs, perturbed, eps, alpha, self.caps, tp, eps_extra)
        report["policy_loss"] = float(terms.sac.data)
        report["l_temporal"] = float(terms.l_temporal.data)
        report["l_spatial"] = float(terms.l_spatial.data)
        lt = self.caps.lambda_T if self.caps else 0.0
        ls = self.caps.lambda_S if self.caps else 0.0
        report["total_policy_objective"] = terms.objective(lt, ls)
        for key in ("policy_loss", "l_temporal", "l_spatial", "total_policy_objective"):
            self._check(report, key)
        terms.total.backward()
        nets.apply_update(n.policy, nets.grads_of(tp), self.policy_opt)

        # entropy temperature
        if self.sac.alpha_mode == "auto":
            g = -np.mean(terms.log_prob.astype(np.float64) + self.target_entropy)
            nets.apply_update(_AlphaParams(self.log_alpha), {"log_alpha": np.array([g])}, self.alpha_opt)
            n.log_alpha = float(self.log_alpha[0])
        report["alpha_value"] = self.alpha

        nets.soft_update(n.target1, n.critic1, self.sac.tau)
        nets.soft_update(n.target2, n.critic2, self.sac.tau)
        self.updates += 1
        return LossReport(**{k: report[k] for k in LossReport.__dataclass_fields__}), td

    @staticmethod
    def _check(report, key):
        if not math.isfinite(report[key]):
            raise LossError(f"non-finite {key}", key, dict(report))


class _AlphaParams(nets.ParamSet):
    def __init__(self, log_alpha):
        super().__init__({"log_alpha": log_alpha})


def learner_update(batch, learner: Learner, weights=None) -> LossReport:
    report, _ = learner.update(batch, weights)
    return report
