"""Fast Preemption: protective perturbations from a forward/backward cascade.

The classifier ``f_c`` labels the clean input once; every subsequent step
works on the cross-entropy of the backbone ``f_b`` against that label.
Forward steps descend the loss directly with N averaged FGSM samples;
backward steps run the same N-sample FGSM *ascent* and then move against
it.  Every iterate is projected back into the eps-ball around the original
image and into [0, 1].
"""

import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from .errors import ConfigError
from .tensor_core import DTYPE, project_linf, sign

SCHEDULES = ("f-then-b", "alternate")
OPTIMIZERS = ("fgsm", "pgd")
SATURATION_RULE = "eta * (t_forward + t_backward) > 1"


@dataclass(frozen=True)
class DefenseConfig:
    eps: float = 8 / 255
    eta: float = 0.7
    t_forward: int = 1
    t_backward: int = 2
    n_samples: int = 20
    optimizer: str = "fgsm"
    pgd_iters: int = 10
    schedule: str = "f-then-b"
    random_init: bool = True
    seed: int = 0
    # skip the saturation rule; used for analysis of under-budget schedules
    relaxed: bool = False

    def __post_init__(self):
        if not self.eps > 0:
            raise ConfigError("eps must be > 0")
        if not self.eta > 0:
            raise ConfigError("eta must be > 0")
        if self.t_forward < 0 or self.t_backward < 0 or self.t_forward + self.t_backward < 1:
            raise ConfigError("need t_forward, t_backward >= 0 and at least one step")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.optimizer == "pgd" and self.pgd_iters < 1:
            raise ConfigError("pgd_iters must be >= 1")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"schedule must be one of {SCHEDULES}")
        if not self.relaxed and not self.eta * (self.t_forward + self.t_backward) > 1:
            raise ConfigError(
                f"constraint violated: {SATURATION_RULE} "
                f"(got {self.eta} * ({self.t_forward} + {self.t_backward}) = "
                f"{self.eta * (self.t_forward + self.t_backward):g})"
            )

    @property
    def pgd_alpha(self):
        return self.eps / 4

    def steps(self):
        """Step directions in execution order, e.g. ``"FBB"``."""
        total = self.t_forward + self.t_backward
        if self.schedule == "alternate":
            return "".join("F" if i % 2 == 0 else "B" for i in range(total))
        return "F" * self.t_forward + "B" * self.t_backward

    def to_dict(self):
        return asdict(self)

    def canonical_json(self):
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown defense config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def replace(self, **kw):
        return DefenseConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class RobustExample:
    x_r: np.ndarray
    origin: np.ndarray
    label_used: int
    fingerprint: str
    seconds: float = 0.0

    @property
    def delta(self):
        return self.x_r - self.origin


def label_input(f_c, x):
    """Classifier argmax; ties resolve to the lowest class index."""
    return int(np.argmax(f_c.logits(x)))


def average_perturbations(samples, base):
    samples = np.asarray(samples)
    if samples.shape[0] == 0:
        raise ValueError("need at least one sample")
    if samples.shape[1:] != np.shape(base):
        raise ValueError("sample/base shape mismatch")
    return np.mean(samples - base, axis=0).astype(samples.dtype)


def _inner_samples(f_b, label, x_t, origin, cfg, rng, ascend):
    """N perturbed copies of ``x_t`` pushed by FGSM (or PGD) up or down the loss."""
    n = cfg.n_samples
    cur = np.broadcast_to(x_t, (n,) + x_t.shape).astype(x_t.dtype)
    if cfg.random_init:
        cur = cur + rng.uniform(-cfg.eps, cfg.eps, size=cur.shape).astype(x_t.dtype)
    labels = np.full(n, label, dtype=np.int64)
    direction = 1.0 if ascend else -1.0
    if cfg.optimizer == "fgsm":
        steps, size = 1, cfg.eps
    else:
        steps, size = cfg.pgd_iters, cfg.pgd_alpha
    for _ in range(steps):
        _, g = f_b.loss_and_grad(cur, labels)
        cur = project_linf(origin, cur + direction * size * sign(g), cfg.eps)
    return cur


def forward_step(f_b, label, x_t, origin, cfg, rng=None):
    """Direct enhancement: move by eta times the averaged loss-decreasing perturbation."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    samples = _inner_samples(f_b, label, x_t, origin, cfg, rng, ascend=False)
    delta = average_perturbations(samples, x_t)
    return project_linf(origin, x_t + cfg.eta * delta, cfg.eps)


def backward_step(f_b, label, x_t, origin, cfg, rng=None):
    """Reverse an averaged loss-increasing perturbation by eta."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    samples = _inner_samples(f_b, label, x_t, origin, cfg, rng, ascend=True)
    delta = average_perturbations(samples, x_t)
    return project_linf(origin, x_t - cfg.eta * delta, cfg.eps)


def fast_preemption(f_c, f_b, x, cfg, label=None, seed=None):
    """Robust example for one image.

    ``label`` overrides the classifier (used to inject wrong labels);
    ``seed`` overrides ``cfg.seed`` for the random starts.
    """
    t0 = time.perf_counter()
    origin = np.asarray(x, dtype=DTYPE)
    if label is None:
        label = label_input(f_c, origin)
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    x_t = origin.copy()
    for kind in cfg.steps():
        step = forward_step if kind == "F" else backward_step
        x_t = step(f_b, label, x_t, origin, cfg, rng)
    return RobustExample(x_t, origin, int(label), cfg.fingerprint(), time.perf_counter() - t0)


def sample_seed(base_seed, sample_id):
    return int(base_seed) ^ int(sample_id)


def worker_count():
    try:
        return max(1, int(os.environ.get("PREEMPTKIT_THREADS", "1")))
    except ValueError:
        return 1


def batch_defend(f_c, f_b, images, cfg, ids=None, labels=None, workers=None):
    """Defend every image independently with seed ``cfg.seed ^ id``.

    ``ids`` default to positions; pass the original positions when
    defending a reordered dataset to get the same per-sample outputs.
    """
    images = np.asarray(images, dtype=DTYPE)
    if len(images) == 0:
        raise ValueError("dataset is empty")
    ids = range(len(images)) if ids is None else ids
    jobs = list(zip(range(len(images)), ids))

    def run(job):
        pos, sid = job
        label = None if labels is None else int(labels[pos])
        return fast_preemption(f_c, f_b, images[pos], cfg, label=label, seed=sample_seed(cfg.seed, sid))

    workers = workers or worker_count()
    if workers == 1:
        return [run(j) for j in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(run, jobs))


def stack(res):
    return np.stack([r.x_r for r in res])
