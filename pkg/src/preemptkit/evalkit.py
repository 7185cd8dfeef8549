"""Metrics and report emission: accuracy, clean/robust evaluation, SSIM,
perturbation visualisation and binary netpbm images."""

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .attacks import pgd_multi_restart
from .diffnet import atomic_write
from .errors import ConfigError, FormatError, ShapeError
from .fore_back import batch_defend, stack
from .tensor_core import DTYPE

NTSC_WEIGHTS = (0.299, 0.587, 0.114)
SSIM_K1, SSIM_K2, SSIM_WIN, SSIM_SIGMA = 0.01, 0.03, 11, 1.5

# Full-scale reference (CIFAR-10, robust victim, AutoAttack); informational only.
REFERENCE_FULL_SCALE = {"dataset": "CIFAR-10", "clean": 0.953, "robust_linf": 0.856,
                        "seconds_per_sample": 0.04, "mean_ssim": 0.962}


def accuracy(f_v, examples, labels):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    if len(examples) != len(labels):
        raise ShapeError("examples and labels differ in length")
    return float(np.mean(f_v.predict(np.asarray(examples, dtype=DTYPE)) == labels))


# -- SSIM ------------------------------------------------------------------


def _gaussian_window(size=SSIM_WIN, sigma=SSIM_SIGMA):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' filtering over the last two axes
    rows = sliding_window_view(img, len(g), axis=-2) @ g
    return sliding_window_view(rows, len(g), axis=-1) @ g


def ssim_map(a, b, data_range=1.0):
    """Per-window SSIM for (C, H, W) images; falls back to one global window
    when the image is smaller than the 11x11 Gaussian window.

    Returns ``(map, fallback)``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    fallback = a.shape[-1] < SSIM_WIN or a.shape[-2] < SSIM_WIN
    if fallback:
        def filt(z):
            return z.mean(axis=(-2, -1), keepdims=True)
    else:
        g = _gaussian_window()

        def filt(z):
            return _filter_valid(z, g)
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den, fallback


def ssim(a, b, return_fallback=False):
    """Mean SSIM (Gaussian 11x11, sigma 1.5, K1=0.01, K2=0.03, L=1)."""
    m, fallback = ssim_map(a, b)
    value = float(np.mean(m))
    return (value, fallback) if return_fallback else value


# -- perturbation visualisation -------------------------------------------


def perturbation_grayscale(delta, eps, tol=1e-6):
    """Map a perturbation in [-eps, eps] to a one-channel image in [0, 1].

    Channels are first normalised by ``(d + eps) / (2 eps)``; RGB is reduced
    with NTSC luma weights, single-channel input is passed through.
    """
    if not eps > 0:
        raise ConfigError("eps must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    if delta.ndim != 3:
        raise ShapeError("expected a (C, H, W) perturbation")
    if np.max(np.abs(delta)) > eps + tol:
        raise ConfigError("perturbation exceeds eps")
    rgb = (delta + eps) / (2 * eps)
    if rgb.shape[0] == 3:
        w = np.asarray(NTSC_WEIGHTS)
        # dividing by the weight sum keeps +eps -> 1.0 exact in floating point
        gray = np.tensordot(w, rgb, axes=1) / w.sum()
    elif rgb.shape[0] == 1:
        gray = rgb[0]
    else:
        raise ShapeError("perturbation must have 1 or 3 channels")
    return np.clip(gray, 0.0, 1.0)[None]


# -- netpbm ---------------------------------------------------------------


def to_u8(img):
    """Round-half-up quantisation of [0, 1] values to 0..255."""
    return np.floor(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def netpbm_bytes(img, comment=None):
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[None]
    c, h, w = img.shape
    if c == 1:
        magic, body = b"P5", to_u8(img[0]).tobytes()
    elif c == 3:
        magic, body = b"P6", to_u8(img).transpose(1, 2, 0).tobytes()
    else:
        raise ShapeError("netpbm needs 1 (P5) or 3 (P6) channels")
    header = magic + b"\n"
    if comment:
        header += b"# " + comment.encode("ascii") + b"\n"
    header += f"{w} {h}\n255\n".encode("ascii")
    return header + body


def write_netpbm(path, img, comment=None):
    atomic_write(path, netpbm_bytes(img, comment))


def read_netpbm(path):
    """Read a P5/P6 file written by :func:`write_netpbm`; returns ``(uint8 (C,H,W), comments)``."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError("not a binary PGM/PPM file")
    tokens, comments, pos = [], [], 2
    while len(tokens) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode().strip())
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(int(data[pos:end]))
        pos = end
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError("only 8-bit netpbm is supported")
    c = 1 if magic == b"P5" else 3
    body = np.frombuffer(data, dtype=np.uint8, count=w * h * c, offset=pos)
    img = body.reshape(h, w, c).transpose(2, 0, 1) if c == 3 else body.reshape(1, h, w)
    return img, comments


# -- clean / robust evaluation ---------------------------------------------


@dataclass
class EvalReport:
    clean: dict = field(default_factory=dict)
    robust: dict = field(default_factory=dict)
    ssim_mean: float = 1.0
    ssim_min: float = 1.0
    ssim_fallback: bool = False
    seconds_per_sample: float = 0.0
    n: int = 0
    attack: dict = field(default_factory=dict)
    fingerprints: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    reference_full_scale: dict = field(default_factory=lambda: dict(REFERENCE_FULL_SCALE))

    def to_dict(self, timing=True):
        d = asdict(self)
        if not timing:
            # wall-clock numbers are not reproducible; manifests carry them instead
            d.pop("seconds_per_sample")
        return d

    def to_json(self, timing=True):
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def table(self, timing=True):
        rows = [("Condition", "Clean (%)", "Robust (%)")]
        for name in self.clean:
            rob = self.robust.get(name)
            rows.append((name, f"{100 * self.clean[name]:.1f}", "-" if rob is None else f"{100 * rob:.1f}"))
        widths = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [" | ".join(cell.ljust(w) for cell, w in zip(r, widths)) for r in rows]
        lines.insert(1, "-+-".join("-" * w for w in widths))
        lines.append(f"SSIM(RE, original): mean {self.ssim_mean:.4f}, min {self.ssim_min:.4f}"
                     + (" [global-statistics fallback]" if self.ssim_fallback else ""))
        if timing:
            lines.append(f"defense time per sample: {self.seconds_per_sample:.4f} s")
        return "\n".join(lines)


def same_model(a, b):
    if a is b:
        return True
    pa, pb = getattr(a, "params", None), getattr(b, "params", None)
    if pa is None or pb is None or len(pa.tensors) != len(pb.tensors):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(pa.tensors, pb.tensors))


def clean_robust_eval(f_v, originals, labels, res, budget, f_b=None, seconds_per_sample=0.0,
                      defense_fingerprint=""):
    """Victim clean and robust accuracy on originals and on robust examples.

    ``res`` are the defended images (array or list of RobustExample).  The
    attack hits ``f_v`` with the true labels; ``budget=None`` means a
    zero-strength attack (robust == clean).  Passing the backbone ``f_b``
    enforces that the victim is a different model.
    """
    if f_b is not None and same_model(f_v, f_b):
        raise ConfigError("transferable evaluation requires a victim distinct from the backbone")
    originals = np.asarray(originals, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    if len(res) and hasattr(res[0], "x_r"):
        fps = {r.fingerprint for r in res}
        if defense_fingerprint and fps != {defense_fingerprint}:
            raise ConfigError("robust examples were produced under a different defense config")
        res = np.stack([r.x_r for r in res])
    res = np.asarray(res, dtype=DTYPE)
    if res.shape != originals.shape:
        raise ShapeError("robust examples must match originals")
    report = EvalReport(n=len(labels), seconds_per_sample=float(seconds_per_sample))
    report.fingerprints["defense"] = defense_fingerprint
    for name, x in (("original", originals), ("defended", res)):
        report.clean[name] = accuracy(f_v, x, labels)
        if budget is None:
            report.robust[name] = report.clean[name]
        else:
            report.robust[name] = accuracy(f_v, pgd_multi_restart(f_v, x, labels, budget), labels)
    report.attack = {"kind": "pgd_multi_restart", **(budget.to_dict() if budget else {"eps": 0.0})}
    if budget is not None:
        report.seeds["attack_seed"] = budget.seed
    values, flags = zip(*(ssim(a, b, return_fallback=True) for a, b in zip(res, originals)))
    report.ssim_mean = float(np.mean(values))
    report.ssim_min = float(np.min(values))
    report.ssim_fallback = bool(any(flags))
    return report



# -- schedule ablation -------------------------------------------------------

ABLATION_SCHEDULES = (("F1-B2", 1, 2, "f-then-b"), ("F0-B3", 0, 3, "f-then-b"),
                      ("F3-B0", 3, 0, "f-then-b"), ("F2-B1", 2, 1, "f-then-b"),
                      ("Alternate", 1, 2, "alternate"))


def schedule_ablation(f_c, f_b, f_v, images, labels, cfg, budget, schedules=ABLATION_SCHEDULES):
    """Robust accuracy per step schedule, on the backbone (white-box) and the victim (transfer).

    ``gap = white_box - transfer``; a large gap means the protection is fitted
    to the backbone and transfers poorly.
    """
    images = np.asarray(images, dtype=DTYPE)
    labels = np.asarray(labels, dtype=np.int64)
    rows = {}
    for name, tf, tb, sched in schedules:
        c = cfg.replace(t_forward=tf, t_backward=tb, schedule=sched)
        x_r = stack(batch_defend(f_c, f_b, images, c))
        wb = accuracy(f_b, pgd_multi_restart(f_b, x_r, labels, budget), labels)
        tr = accuracy(f_v, pgd_multi_restart(f_v, x_r, labels, budget), labels)
        rows[name] = {"white_box": wb, "transfer": tr, "gap": wb - tr,
                      "clean_transfer": accuracy(f_v, x_r, labels), "fingerprint": c.fingerprint()}
    return rows
