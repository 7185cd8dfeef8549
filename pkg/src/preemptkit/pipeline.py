"""Config resolution and the reusable desk pipeline behind the CLI.

Configs are JSON.  Precedence is command-line flag > config file > built-in
default.  Every seed is named and derives from the top-level ``seed``
unless set explicitly.
"""

import copy
import hashlib
import json
import os

from .attacks import AttackBudget
from .data import SynthSpec, load_idx, synth_dataset
from .diffnet import Network, TrainConfig, desk_cnn, load_weights, train
from .errors import ConfigError
from .fore_back import DefenseConfig

ROLES = ("classifier", "backbone", "victim", "blackbox")
ROLE_MODES = {"classifier": "standard", "backbone": "adversarial", "victim": "standard",
              "blackbox": "adversarial"}
ROLE_SEED_OFFSET = {"classifier": 1, "backbone": 2, "victim": 3, "blackbox": 4}

DEFAULTS = {
    "seed": 0,
    "data": {
        "kind": "synthetic",
        "classes": 10,
        "per_class": 300,
        "size": 16,
        "channels": 1,
        "blobs": 3,
        "contrast": 0.3,
        "noise": 0.15,
        "jitter": 1,
        "n_train": 2000,
        "n_test": 1000,
    },
    "model": {"channels": 8},
    "train": {"epochs": 15, "batch_size": 32, "lr": 0.05,
              "adv_eps": 8 / 255, "adv_alpha": 2 / 255, "adv_iters": 7},
    "defense": {},
    "attack": {"norm": "linf", "eps": 8 / 255, "iters": 20, "restarts": 5},
    "protocol": {"fraction": 0.1, "noise_sigma": 0.05},
    "viz": {"count": 8},
    "gradcheck": {"n_nets": 100, "h": 1e-5},
    "models": {},
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def derived_seeds(top):
    seeds = {f"train_{role}": top + off for role, off in ROLE_SEED_OFFSET.items()}
    seeds.update(data=top, defense=top, attack=top + 5, protocol=top, blackbox_defense=top + 99)
    return seeds


def resolve_config(file_cfg=None, seed=None):
    """Fill defaults and derived seeds.

    ``seed`` (the ``--seed`` flag) replaces the top-level seed; named seeds
    pinned under ``seeds`` in the file still take precedence over derived
    ones.  A RunManifest may be passed in place of a config file.
    """
    file_cfg = dict(file_cfg or {})
    if "subcommand" in file_cfg and "config" in file_cfg:
        file_cfg = file_cfg["config"]
    cfg = _merge(DEFAULTS, file_cfg)
    if seed is not None:
        cfg["seed"] = int(seed)
    cfg["seeds"] = {**derived_seeds(int(cfg["seed"])), **file_cfg.get("seeds", {})}
    return cfg


def config_fingerprint(cfg):
    text = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


def defense_config(cfg):
    d = {**cfg.get("defense", {})}
    d.setdefault("seed", cfg["seeds"]["defense"])
    return DefenseConfig.from_dict(d)


def attack_budget(cfg):
    """The evaluation attack, or None for a zero-strength attack (eps == 0)."""
    a = cfg["attack"]
    if float(a["eps"]) == 0:
        return None
    return AttackBudget(norm=a.get("norm", "linf"), eps=float(a["eps"]),
                        alpha=float(a.get("alpha", float(a["eps"]) / 4)),
                        iters=int(a["iters"]), restarts=int(a["restarts"]),
                        seed=int(cfg["seeds"]["attack"]))


def load_data(cfg):
    """``(train, test)`` datasets per the ``data`` section."""
    d = cfg["data"]
    n_train, n_test = int(d["n_train"]), int(d["n_test"])
    if d["kind"] == "synthetic":
        spec = SynthSpec(**{k: d[k] for k in ("classes", "per_class", "size", "channels", "blobs",
                                              "contrast", "noise", "jitter")})
        ds = synth_dataset(spec, seed=cfg["seeds"]["data"])
    elif d["kind"] == "idx":
        ds = load_idx(d["images"], d["labels"], class_count=int(d.get("classes", 10)))
        if "test_images" in d:
            test = load_idx(d["test_images"], d["test_labels"], class_count=int(d.get("classes", 10)))
            return ds.subset(0, n_train), test.subset(0, n_test)
    else:
        raise ConfigError(f"unknown data kind {d['kind']!r}")
    return ds.split(n_train, n_test)


def network_def(cfg, image_shape, class_count):
    shape = tuple(image_shape)
    if shape[1] % 2 or shape[2] % 2:
        raise ConfigError("desk CNN needs even image height and width")
    return desk_cnn(shape, class_count, int(cfg["model"]["channels"]))


def train_config(cfg, role):
    t = cfg["train"]
    per_role = t.get(role, {})
    merged = {**{k: v for k, v in t.items() if not isinstance(v, dict)}, **per_role}
    merged.setdefault("mode", ROLE_MODES[role])
    merged["seed"] = int(cfg["seeds"][f"train_{role}"])
    return TrainConfig(**{k: merged[k] for k in ("epochs", "batch_size", "lr", "seed", "mode",
                                                 "adv_eps", "adv_alpha", "adv_iters")})


def train_role(cfg, role, train_ds):
    nd = network_def(cfg, train_ds.image_shape, train_ds.class_count)
    params = train(nd, (train_ds.images, train_ds.labels), train_config(cfg, role))
    return Network(nd, params)


def model_path(cfg, role, out_dir):
    return cfg["models"].get(role) or os.path.join(out_dir, f"{role}.pkw")


def load_role(cfg, role, out_dir, netdef):
    path = model_path(cfg, role, out_dir)
    if not os.path.exists(path):
        raise ConfigError(f"missing {role} weights at {path}; run `preemptkit train` first")
    return Network(netdef, load_weights(netdef, path)), path


def desk_models(cfg, train_ds, roles=ROLES):
    return {role: train_role(cfg, role, train_ds) for role in roles}


def netdef_for(cfg, ds):
    return network_def(cfg, ds.image_shape, ds.class_count)


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()

