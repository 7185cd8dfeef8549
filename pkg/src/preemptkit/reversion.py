"""Preemptive Reversion and the corrupted-label reversion protocol."""

from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .fore_back import DefenseConfig, batch_defend, fast_preemption, sample_seed, stack
from .tensor_core import DTYPE, clamp01


def reversion_raw(defense, x_r):
    """``x_r - (defense(x_r) - x_r)`` without clamping, computed in float64.

    Returns ``(x_tilde, defended)``; ``x_tilde + defended == 2 * x_r`` holds
    exactly for float32 inputs.
    """
    x_r = np.asarray(x_r)
    defended = np.asarray(defense(x_r), dtype=np.float64)
    return 2.0 * x_r.astype(np.float64) - defended, defended


def preemptive_reversion(defense, x_r):
    """Estimate the pre-defense image by undoing a second run of ``defense``."""
    x_tilde, _ = reversion_raw(defense, x_r)
    return clamp01(x_tilde).astype(np.asarray(x_r).dtype)


def noise_distortion(x, sigma, seed):
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    x = np.asarray(x)
    if sigma == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    return clamp01(x + rng.normal(0.0, sigma, size=x.shape)).astype(x.dtype)


def corrupt_labels(labels, fraction, seed, k):
    """Reassign a seeded ``floor(fraction * n)`` subset to a uniformly random wrong class."""
    if k < 2:
        raise ConfigError("need at least two classes")
    if not 0 <= fraction <= 1:
        raise ConfigError("fraction must lie in [0, 1]")
    labels = np.asarray(labels, dtype=np.int64)
    out = labels.copy()
    n = len(labels)
    rng = np.random.default_rng(seed)
    chosen = rng.choice(n, size=int(np.floor(fraction * n)), replace=False)
    out[chosen] = (labels[chosen] + rng.integers(1, k, size=len(chosen))) % k
    return out


def perturbation_cosine(a, b):
    """Cosine similarity between two flattened perturbations (0 if either is zero)."""
    a = np.ravel(a).astype(np.float64)
    b = np.ravel(b).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    return float(a @ b / (na * nb)) if na > 0 and nb > 0 else 0.0


@dataclass
class ReversionScenario:
    """Attacker knowledge for one reversion attempt.

    ``white_box`` reuses the defender's backbone, config (incl. seed) and
    labels.  ``black_box`` brings its own backbone and seed, and labels
    inputs with ``classifier`` (its own backbone when not given).
    """

    name: str
    mode: str
    backbone: object
    cfg: DefenseConfig
    defender_fingerprint: str = ""
    classifier: object = None

    def __post_init__(self):
        if self.mode not in ("white_box", "black_box"):
            raise ConfigError("mode must be white_box or black_box")
        if self.mode == "white_box" and self.cfg.fingerprint() != self.defender_fingerprint:
            raise ConfigError("white-box scenario requires the defender's exact config fingerprint")


@dataclass
class ProtocolReport:
    original: float
    defended: float
    fraction: float
    n: int
    reversions: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    residual_linf: dict = field(default_factory=dict)
    residual_l2: dict = field(default_factory=dict)
    cosine_first_second: float = 0.0
    fingerprint: str = ""

    def to_dict(self):
        return asdict(self)

    def table(self):
        cols = ["Original", "Defended"] + list(self.reversions)
        vals = [self.original, self.defended] + list(self.reversions.values())
        widths = [max(len(c), 8) for c in cols]
        head = " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = " | ".join(f"{100 * v:.1f}".rjust(w) for v, w in zip(vals, widths))
        verdict = " | ".join(
            (self.verdicts.get(c, "")).rjust(w) for c, w in zip(cols, widths)
        )
        return "\n".join([head, "-" * len(head), row, verdict])


def _mean_norm(delta, order):
    flat = np.asarray(delta, dtype=np.float64).reshape(len(delta), -1)
    return float(np.mean(np.linalg.norm(flat, ord=order, axis=1)))


def verdict(original, defended, after):
    """``reversed`` iff accuracy rose after reversion and moved toward the original."""
    if after > defended and abs(after - original) < abs(defended - original):
        return "reversed"
    return "distorted"


def run_reversion_protocol(f_v, f_c, f_b, images, labels, cfg, scenarios, fraction=0.1,
                           noise_sigma=0.05, seed=0):
    """Corrupt a fraction of the defender's labels, defend, then try each reversion.

    Victim accuracy is measured against the true ``labels`` throughout.
    ``scenarios`` is a list of :class:`ReversionScenario`; an additive noise
    baseline is always included.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    k = f_v.class_count

    def acc(x):
        return float(np.mean(f_v.predict(x) == labels))

    original = acc(images)
    used = np.array([np.argmax(f_c.logits(x)) for x in images])
    used = corrupt_labels(used, fraction, seed, k)
    res = batch_defend(f_c, f_b, images, cfg, labels=used)
    x_r = stack(res)
    defended = acc(x_r)
    if not defended < original:
        raise ConfigError(
            f"pre-flight failed: defended accuracy {defended:.3f} is not below original "
            f"{original:.3f}; increase the corruption fraction"
        )
    report = ProtocolReport(original, defended, fraction, len(images), fingerprint=cfg.fingerprint())
    first = x_r - images
    for sc in scenarios:
        out = np.empty_like(x_r)
        second = np.empty_like(x_r)
        for i in range(len(x_r)):
            s = sample_seed(sc.cfg.seed, i)
            if sc.mode == "white_box":
                lab, clf = used[i], None
            else:
                lab, clf = None, sc.classifier or sc.backbone

            def defense(z, lab=lab, clf=clf, s=s):
                return fast_preemption(clf, sc.backbone, z, sc.cfg, label=lab, seed=s).x_r

            x_tilde, d = reversion_raw(defense, x_r[i])
            out[i] = clamp01(x_tilde)
            second[i] = d - x_r[i]
        report.reversions[sc.name] = acc(out)
        report.residual_linf[sc.name] = _mean_norm(out - images, np.inf)
        report.residual_l2[sc.name] = _mean_norm(out - images, 2)
        if sc.mode == "white_box":
            report.cosine_first_second = float(np.mean(
                [perturbation_cosine(a, b) for a, b in zip(first, second)]))
    noisy = noise_distortion(x_r, noise_sigma, seed + 1)
    report.reversions["noise"] = acc(noisy)
    report.residual_linf["defended"] = _mean_norm(first, np.inf)
    report.residual_l2["defended"] = _mean_norm(first, 2)
    for name, value in report.reversions.items():
        report.verdicts[name] = verdict(original, defended, value)
    return report
