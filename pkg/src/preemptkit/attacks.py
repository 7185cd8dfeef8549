"""FGSM and PGD (L-inf / L2) against any model exposing ``loss_and_grad``.

Models are duck-typed: ``loss_and_grad(x, y) -> (losses, input_grads)`` and
``loss(x, y) -> losses`` on batches.  Inputs may be one image or a batch;
the output has the same shape as ``x``.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NonFiniteError
from .tensor_core import project_l2, project_linf, sign


@dataclass(frozen=True)
class AttackBudget:
    norm: str = "linf"
    eps: float = 8 / 255
    alpha: float = 2 / 255
    iters: int = 20
    restarts: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"norm must be linf or l2, got {self.norm!r}")
        if not self.eps > 0 or not self.alpha > 0:
            raise ConfigError("eps and alpha must be > 0")
        if self.iters < 1 or self.restarts < 1:
            raise ConfigError("iters and restarts must be >= 1")

    @classmethod
    def default(cls, eps=8 / 255, **kw):
        """Evaluation defaults: alpha = eps/4, 20 iterations, 5 restarts."""
        return cls(eps=eps, alpha=kw.pop("alpha", eps / 4), **kw)

    def to_dict(self):
        return asdict(self)


def _project(norm, x, cand, eps):
    return project_linf(x, cand, eps) if norm == "linf" else project_l2(x, cand, eps)


def _batched(x, y):
    x = np.asarray(x)
    y = np.asarray(y)
    single = y.ndim == 0
    if single:
        return x[None], y[None], True
    return x, y, False


def random_start(x, eps, rng, norm="linf"):
    """``x`` plus i.i.d. U(-eps, eps) noise per pixel, projected back."""
    noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    return _project(norm, x, x + noise, eps)


def fgsm_attack(f, x, y, eps, random_init=False, seed=0):
    """One signed-gradient ascent step of size ``eps``."""
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    xb, yb, single = _batched(x, y)
    start = random_start(xb, eps, np.random.default_rng(seed)) if random_init else xb
    _, g = f.loss_and_grad(start, yb)
    out = project_linf(xb, start + eps * sign(g), eps)
    return out[0] if single else out


def _l2_direction(g):
    flat = g.reshape(g.shape[0], -1)
    norms = np.sqrt(np.sum(np.square(flat, dtype=np.float64), axis=1))
    safe = np.where(norms > 0, norms, 1.0)
    d = flat / safe[:, None]
    # zero gradient: direction undefined, skip the step
    d[norms == 0] = 0
    return d.reshape(g.shape).astype(g.dtype)


def pgd_attack(f, x, y, budget, random_init=True):
    """``budget.iters`` projected steps of size ``budget.alpha`` from a random start."""
    xb, yb, single = _batched(x, y)
    rng = np.random.default_rng(budget.seed)
    cur = random_start(xb, budget.eps, rng, budget.norm) if random_init else xb.copy()
    for _ in range(budget.iters):
        losses, g = f.loss_and_grad(cur, yb)
        if not np.all(np.isfinite(losses)):
            raise NonFiniteError("non-finite loss during PGD")
        step = sign(g) if budget.norm == "linf" else _l2_direction(g)
        cur = _project(budget.norm, xb, cur + budget.alpha * step, budget.eps)
    return cur[0] if single else cur


def pgd_multi_restart(f, x, y, budget, return_losses=False):
    """Run ``budget.restarts`` PGD instances (seeds ``seed + r``) and keep, per
    sample, the candidate with the highest loss; ties go to the earlier restart."""
    xb, yb, single = _batched(x, y)
    best = best_loss = None
    for r in range(budget.restarts):
        b = AttackBudget(budget.norm, budget.eps, budget.alpha, budget.iters, 1, budget.seed + r)
        cand = pgd_attack(f, xb, yb, b)
        loss = f.loss(cand, yb)
        if best is None:
            best, best_loss = cand, loss
        else:
            better = loss > best_loss
            best = np.where(better.reshape((-1,) + (1,) * (xb.ndim - 1)), cand, best)
            best_loss = np.where(better, loss, best_loss)
    if single:
        best, best_loss = best[0], best_loss[0]
    return (best, best_loss) if return_losses else best


def attack_success_rate(f, x_adv, y):
    return float(np.mean(f.predict(x_adv) != np.asarray(y)))

