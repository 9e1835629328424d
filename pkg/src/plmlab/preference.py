"""DPO, self-refinement and combined preference losses over log-probability batches.

Every loss returns ``(loss, grads)`` where ``grads`` maps each policy field to
d loss / d logprob, shaped like the field.  Reference log-probs are constants.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

DIRECT_FIELDS = ("policy_chosen", "policy_rejected", "ref_chosen", "ref_rejected")
# refinement contexts: (x, y_l, z) -> given_rejected_*, (x, y_w, z) -> given_chosen_*
REFINE_FIELDS = tuple(f"{ctx}_{who}_{resp}"
                      for ctx in ("given_rejected", "given_chosen")
                      for who in ("policy", "ref")
                      for resp in ("chosen", "rejected"))


@dataclass
class PreferenceBatch:
    """Sequence log-probabilities per example; refinement fields are optional for DPO."""

    policy_chosen: np.ndarray
    policy_rejected: np.ndarray
    ref_chosen: np.ndarray
    ref_rejected: np.ndarray
    given_rejected_policy_chosen: np.ndarray | None = None
    given_rejected_policy_rejected: np.ndarray | None = None
    given_rejected_ref_chosen: np.ndarray | None = None
    given_rejected_ref_rejected: np.ndarray | None = None
    given_chosen_policy_chosen: np.ndarray | None = None
    given_chosen_policy_rejected: np.ndarray | None = None
    given_chosen_ref_chosen: np.ndarray | None = None
    given_chosen_ref_rejected: np.ndarray | None = None

    def __post_init__(self):
        n = None
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            v = np.atleast_1d(np.asarray(v, dtype=np.float64))
            if v.ndim != 1:
                raise ValueError(f"{f.name} must be one log-prob per example")
            if not np.isfinite(v).all() or (v > 0).any():
                raise ValueError(f"{f.name} must hold finite log-probabilities <= 0")
            if n is None:
                n = len(v)
            elif len(v) != n:
                raise ValueError(f"{f.name} has {len(v)} entries, expected {n}")
            setattr(self, f.name, v)
        if not n:
            raise ValueError("empty batch")

    def __len__(self) -> int:
        return len(self.policy_chosen)

    @property
    def has_refinement(self) -> bool:
        return all(getattr(self, f) is not None for f in REFINE_FIELDS)

    def replace(self, **changes) -> "PreferenceBatch":
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data.update(changes)
        return PreferenceBatch(**data)

    def to_dict(self) -> dict:
        return {f.name: (None if getattr(self, f.name) is None else getattr(self, f.name).tolist())
                for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "PreferenceBatch":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown batch fields: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.8
    beta_dpo: float = 0.1
    beta_refine: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta_dpo <= 0 or self.beta_refine <= 0:
            raise ValueError("beta must be positive")


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _softplus(z):
    return np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))


def _margin(b: PreferenceBatch, prefix: str = "") -> np.ndarray:
    g = lambda name: getattr(b, prefix + name)  # noqa: E731
    return (g("policy_chosen") - g("ref_chosen")) - (g("policy_rejected") - g("ref_rejected"))


def dpo_loss(batch: PreferenceBatch, beta: float = 0.1):
    """mean -log sigmoid(beta * margin) with margin the chosen-minus-rejected log-ratio."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    z = beta * _margin(batch)
    loss = float(_softplus(-z).mean())
    # d/dz softplus(-z) = -sigmoid(-z)
    g = -_sigmoid(-z) * beta / len(batch)
    return loss, {"policy_chosen": g, "policy_rejected": -g}


def refine_loss(batch: PreferenceBatch, beta: float = 0.01):
    """Sum over the two refinement contexts of mean (1/2 - beta * margin)^2."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    if not batch.has_refinement:
        missing = [f for f in REFINE_FIELDS if getattr(batch, f) is None]
        raise ValueError(f"refinement fields missing: {missing}")
    loss, grads = 0.0, {}
    for ctx in ("given_rejected_", "given_chosen_"):
        u = 0.5 - beta * _margin(batch, ctx)
        loss += float((u * u).mean())
        g = -2.0 * u * beta / len(batch)
        grads[ctx + "policy_chosen"] = g
        grads[ctx + "policy_rejected"] = -g
    return loss, grads


def aries_loss(batch: PreferenceBatch, params: LossParams = LossParams()):
    """(1 - alpha) * DPO(beta_dpo) + alpha * refine(beta_refine)."""
    a = params.alpha
    l_dpo, g_dpo = dpo_loss(batch, params.beta_dpo)
    l_ref, g_ref = refine_loss(batch, params.beta_refine)
    grads = {k: (1.0 - a) * v for k, v in g_dpo.items()}
    grads.update({k: a * v for k, v in g_ref.items()})
    return (1.0 - a) * l_dpo + a * l_ref, grads


def implicit_rewards(batch: PreferenceBatch, beta: float = 0.1):
    """beta * log(pi / pi_ref) for the chosen and the rejected response."""
    return (beta * (batch.policy_chosen - batch.ref_chosen),
            beta * (batch.policy_rejected - batch.ref_rejected))


def implicit_reward_accuracy(batch: PreferenceBatch, beta: float = 0.1) -> float:
    """Share of examples whose chosen reward beats the rejected one; exact ties score 0.5.

    The comparison uses the unscaled log-ratios so the result cannot depend on beta.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    w = batch.policy_chosen - batch.ref_chosen
    l = batch.policy_rejected - batch.ref_rejected  # noqa: E741
    score = np.where(w > l, 1.0, np.where(w == l, 0.5, 0.0))
    return float(score.mean())


# -- gradient checking --------------------------------------------------------

REL_FLOOR = 1e-6


def grad_check(loss_fn, point, eps: float = 1e-5) -> float:
    """Largest relative error between ``loss_fn``'s analytic gradient and central differences.

    ``loss_fn(x)`` returns (loss, grad) for a float array ``x``.  The relative
    error is |a - n| / max(|a|, |n|, REL_FLOOR).
    """
    x = np.array(point, dtype=np.float64)
    _, analytic = loss_fn(x.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    for idx in np.ndindex(*x.shape):
        hi, lo = x.copy(), x.copy()
        hi[idx] += eps
        lo[idx] -= eps
        num = (loss_fn(hi)[0] - loss_fn(lo)[0]) / (2 * eps)
        a = analytic[idx]
        worst = max(worst, abs(a - num) / max(abs(a), abs(num), REL_FLOOR))
    return worst


def policy_fields(batch: PreferenceBatch) -> tuple[str, ...]:
    names = ["policy_chosen", "policy_rejected"]
    if batch.has_refinement:
        names += [f for f in REFINE_FIELDS if "_policy_" in f]
    return tuple(names)


def as_vector_fn(loss, batch: PreferenceBatch, *args):
    """Wrap ``loss(batch, *args)`` as a function of the stacked policy log-probs.

    Returns (fn, x0) for use with ``grad_check``.  Perturbed points may leave
    the log-prob domain, so validation is skipped for them.
    """
    names = policy_fields(batch)
    n = len(batch)
    x0 = np.concatenate([getattr(batch, f) for f in names])

    def fn(x):
        b = PreferenceBatch.__new__(PreferenceBatch)
        for f in fields(PreferenceBatch):
            setattr(b, f.name, getattr(batch, f.name))
        for i, f in enumerate(names):
            setattr(b, f, x[i * n:(i + 1) * n])
        value, grads = loss(b, *args)
        g = np.concatenate([grads.get(f, np.zeros(n)) for f in names])
        return value, g

    return fn, x0


def random_batch(rng: np.random.Generator, n: int = 8, refinement: bool = True) -> PreferenceBatch:
    """Log-probs drawn as -Exponential(scale 20), a plausible range for sequence log-likelihoods."""
    names = DIRECT_FIELDS + (REFINE_FIELDS if refinement else ())
    return PreferenceBatch(**{f: -rng.exponential(20.0, size=n) for f in names})
