"""``preemptkit`` command-line entry point.

    preemptkit <train|defend|attack|eval|revert|viz|gradcheck> [--config PATH] [--seed N] [--out DIR]

Every run writes ``manifest-<subcommand>.json`` to the output directory with
the fully resolved config, named seeds, input/artifact hashes and wall-clock
timings.  Passing that manifest back as ``--config`` replays the run.
"""

import argparse
import io
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__
from . import pipeline as pl
from .attacks import pgd_multi_restart
from .diffnet import atomic_write, save_weights, with_meta
from .errors import FingerprintMismatch, PreemptKitError
from .evalkit import accuracy, clean_robust_eval, perturbation_grayscale, write_netpbm
from .fore_back import batch_defend, stack
from .gradcheck import run_gradcheck
from .reversion import ReversionScenario, run_reversion_protocol

log = logging.getLogger("preemptkit")

SUBCOMMANDS = ("train", "defend", "attack", "eval", "revert", "viz", "gradcheck")


class Run:
    """Collects artifacts, inputs and timings for one subcommand invocation."""

    def __init__(self, subcommand, cfg, out_dir, config_path):
        self.subcommand = subcommand
        self.cfg = cfg
        self.out = out_dir
        self.config_path = config_path
        self.fingerprint = pl.config_fingerprint(cfg)
        self.artifacts = {}
        self.inputs = {}
        self.timings = {}
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def write_bytes(self, name, data):
        atomic_write(self.path(name), data)
        self.artifacts[name] = pl.file_sha256(self.path(name))

    def write_json(self, name, obj):
        obj = {**obj, "config_fingerprint": self.fingerprint}
        self.write_bytes(name, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())

    def write_text(self, name, text):
        self.write_bytes(name, (f"# config {self.fingerprint}\n" + text + "\n").encode())

    def write_npy(self, name, arr):
        # .npy headers take no extra keys; the JSON sidecar records this file's hash
        buf = io.BytesIO()
        np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
        self.write_bytes(name, buf.getvalue())

    def record_input(self, path):
        self.inputs[os.path.abspath(path)] = pl.file_sha256(path)

    def manifest(self):
        return {
            "subcommand": self.subcommand,
            "version": __version__,
            "config": self.cfg,
            "config_path": self.config_path,
            "config_fingerprint": self.fingerprint,
            "seeds": self.cfg["seeds"],
            "inputs": self.inputs,
            "artifacts": self.artifacts,
            "timings": self.timings,
        }

    def finish(self):
        text = json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n"
        atomic_write(self.path(f"manifest-{self.subcommand}.json"), text.encode())
        return self.manifest()


def _load_models(run, roles, netdef):
    models = {}
    for role in roles:
        net, path = pl.load_role(run.cfg, role, run.out, netdef)
        run.record_input(path)
        models[role] = net
    return models


def _load_res(run, expected_fp):
    meta_path, arr_path = run.path("res.json"), run.path("res.npy")
    src = run.cfg.get("res_dir")
    if src:
        meta_path, arr_path = os.path.join(src, "res.json"), os.path.join(src, "res.npy")
    if not os.path.exists(meta_path):
        raise PreemptKitError(f"no robust examples at {meta_path}; run `preemptkit defend` first")
    with open(meta_path) as f:
        meta = json.load(f)
    if meta["defense_fingerprint"] != expected_fp:
        raise FingerprintMismatch(
            f"robust examples were made with defense config {meta['defense_fingerprint'][:12]}..., "
            f"but this run declares {expected_fp[:12]}..."
        )
    run.record_input(meta_path)
    run.record_input(arr_path)
    if meta.get("res_sha256") not in (None, run.inputs[os.path.abspath(arr_path)]):
        raise FingerprintMismatch(f"{arr_path} does not match the hash recorded in {meta_path}")
    return np.load(arr_path), meta


def cmd_train(run):
    train_ds, test_ds = pl.load_data(run.cfg)
    roles = run.cfg.get("train_roles", list(pl.ROLES))
    summary = {}
    for role in roles:
        t0 = time.perf_counter()
        net = pl.train_role(run.cfg, role, train_ds)
        run.timings[f"train_{role}_s"] = time.perf_counter() - t0
        params = with_meta(net.params, role=role, config_fingerprint=run.fingerprint)
        save_weights(params, run.path(f"{role}.pkw"), net.netdef)
        run.artifacts[f"{role}.pkw"] = pl.file_sha256(run.path(f"{role}.pkw"))
        summary[role] = {**params.meta, "test_accuracy": accuracy(net, test_ds.images, test_ds.labels)}
    run.write_json("train.json", {"models": summary})
    return summary


def cmd_defend(run):
    _, test_ds = pl.load_data(run.cfg)
    netdef = pl.netdef_for(run.cfg, test_ds)
    m = _load_models(run, ("classifier", "backbone"), netdef)
    dcfg = pl.defense_config(run.cfg)
    t0 = time.perf_counter()
    res = batch_defend(m["classifier"], m["backbone"], test_ds.images, dcfg)
    elapsed = time.perf_counter() - t0
    run.timings.update(defend_s=elapsed, seconds_per_sample=elapsed / len(res))
    x_r = stack(res)
    run.write_npy("res.npy", x_r)
    linf = float(np.max(np.abs(x_r - test_ds.images)))
    run.write_json("res.json", {
        "defense_fingerprint": dcfg.fingerprint(),
        "defense": dcfg.to_dict(),
        "n": len(res),
        "res_sha256": run.artifacts["res.npy"],
        "labels_used": [r.label_used for r in res],
        "max_linf": linf,
        "within_budget": bool(linf <= dcfg.eps + 1e-6 and x_r.min() >= 0 and x_r.max() <= 1),
    })
    return {"n": len(res), "max_linf": linf}


def cmd_attack(run):
    _, test_ds = pl.load_data(run.cfg)
    netdef = pl.netdef_for(run.cfg, test_ds)
    victim = _load_models(run, ("victim",), netdef)["victim"]
    target = run.cfg.get("attack_target", "original")
    x = test_ds.images
    if target == "defended":
        x, _ = _load_res(run, pl.defense_config(run.cfg).fingerprint())
    budget = pl.attack_budget(run.cfg)
    t0 = time.perf_counter()
    adv = x if budget is None else pgd_multi_restart(victim, x, test_ds.labels, budget)
    run.timings["attack_s"] = time.perf_counter() - t0
    run.write_npy("adv.npy", adv)
    out = {
        "target": target,
        "adv_sha256": run.artifacts["adv.npy"],
        "budget": budget.to_dict() if budget else {"eps": 0.0},
        "clean_accuracy": accuracy(victim, x, test_ds.labels),
        "robust_accuracy": accuracy(victim, adv, test_ds.labels),
    }
    out["success_rate"] = 1.0 - out["robust_accuracy"]
    run.write_json("attack.json", out)
    return out


def cmd_eval(run):
    _, test_ds = pl.load_data(run.cfg)
    netdef = pl.netdef_for(run.cfg, test_ds)
    m = _load_models(run, ("victim", "backbone"), netdef)
    dcfg = pl.defense_config(run.cfg)
    x_r, _ = _load_res(run, dcfg.fingerprint())
    report = clean_robust_eval(m["victim"], test_ds.images, test_ds.labels, x_r, pl.attack_budget(run.cfg),
                               f_b=m["backbone"], defense_fingerprint=dcfg.fingerprint())
    report.seeds = dict(run.cfg["seeds"])
    report.fingerprints["config"] = run.fingerprint
    run.write_json("report.json", report.to_dict(timing=False))
    run.write_text("report.txt", report.table(timing=False))
    defend_manifest = run.path("manifest-defend.json")
    if os.path.exists(defend_manifest):
        with open(defend_manifest) as f:
            spent = json.load(f)["timings"].get("seconds_per_sample")
        if spent is not None:
            run.timings["defense_seconds_per_sample"] = spent
    return report.to_dict(timing=False)


def cmd_revert(run):
    _, test_ds = pl.load_data(run.cfg)
    netdef = pl.netdef_for(run.cfg, test_ds)
    m = _load_models(run, pl.ROLES, netdef)
    dcfg = pl.defense_config(run.cfg)
    p = run.cfg["protocol"]
    scenarios = [
        ReversionScenario("white_box_pr", "white_box", m["backbone"], dcfg, dcfg.fingerprint()),
        ReversionScenario("black_box_pr", "black_box", m["blackbox"],
                          dcfg.replace(seed=run.cfg["seeds"]["blackbox_defense"])),
    ]
    t0 = time.perf_counter()
    report = run_reversion_protocol(m["victim"], m["classifier"], m["backbone"], test_ds.images,
                                    test_ds.labels, dcfg, scenarios, fraction=float(p["fraction"]),
                                    noise_sigma=float(p["noise_sigma"]), seed=run.cfg["seeds"]["protocol"])
    run.timings["revert_s"] = time.perf_counter() - t0
    run.write_json("protocol.json", report.to_dict())
    run.write_text("protocol.txt", report.table())
    return report.to_dict()


def cmd_viz(run):
    _, test_ds = pl.load_data(run.cfg)
    dcfg = pl.defense_config(run.cfg)
    x_r, _ = _load_res(run, dcfg.fingerprint())
    count = min(int(run.cfg["viz"]["count"]), len(x_r))
    comment = f"config {run.fingerprint}"
    for i in range(count):
        delta = x_r[i].astype(np.float64) - test_ds.images[i]
        delta = np.clip(delta, -dcfg.eps, dcfg.eps)
        for name, img in (("original", test_ds.images[i]), ("defended", x_r[i]),
                          ("delta", perturbation_grayscale(delta, dcfg.eps))):
            ext = "ppm" if img.shape[0] == 3 else "pgm"
            rel = os.path.join("viz", f"{name}_{i:03d}.{ext}")
            write_netpbm(run.path(rel), img, comment)
            run.artifacts[rel] = pl.file_sha256(run.path(rel))
    return {"count": count}


def cmd_gradcheck(run):
    g = run.cfg["gradcheck"]
    t0 = time.perf_counter()
    res = run_gradcheck(int(g["n_nets"]), seed=run.cfg["seed"], h=float(g["h"]))
    run.timings["gradcheck_s"] = time.perf_counter() - t0
    res["passed"] = bool(res["max_input_rel_err"] <= 1e-4 and res["max_param_rel_err"] <= 1e-4)
    run.write_json("gradcheck.json", res)
    return {k: v for k, v in res.items() if k != "nets"}


COMMANDS = {
    "train": cmd_train, "defend": cmd_defend, "attack": cmd_attack, "eval": cmd_eval,
    "revert": cmd_revert, "viz": cmd_viz, "gradcheck": cmd_gradcheck,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="preemptkit", description=__doc__.split("\n")[0])
    parser.add_argument("subcommand", choices=SUBCOMMANDS)
    parser.add_argument("--config", help="JSON config file or a previous run manifest")
    parser.add_argument("--seed", type=int, help="top-level seed (overrides the config file)")
    parser.add_argument("--out", default="preemptkit-out", help="artifact directory")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(subcommand, config=None, out="preemptkit-out", seed=None, config_path=None):
    """Programmatic entry point; returns ``(summary, manifest)``."""
    if subcommand not in COMMANDS:
        raise PreemptKitError(f"unknown subcommand {subcommand!r}")
    cfg = pl.resolve_config(config, seed)
    # fail fast on an invalid defense config, before any models are loaded
    pl.defense_config(cfg)
    r = Run(subcommand, cfg, out, config_path)
    t0 = time.perf_counter()
    summary = COMMANDS[subcommand](r)
    r.timings["total_s"] = time.perf_counter() - t0
    return summary, r.finish()


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    config = None
    if args.config:
        with open(args.config) as f:
            config = json.load(f)
    try:
        summary, manifest = run(args.subcommand, config, args.out, args.seed, args.config)
    except (PreemptKitError, OSError, json.JSONDecodeError) as exc:
        print(f"preemptkit {args.subcommand}: error: {exc}", file=sys.stderr)
        return 2
    print(json.dumps(summary, indent=2, sort_keys=True, default=str))
    log.info("manifest written to %s", os.path.join(args.out, f"manifest-{args.subcommand}.json"))
    return 0


if __name__ == "__main__":
    sys.exit(main())
