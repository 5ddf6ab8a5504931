"""Command-line entry point: ``radiomap {gen,train,estimate,sweep,probe,baseline}``.

Every command takes an optional JSON config (``--config``) whose keys can
be overridden with ``--key value`` flags; dotted keys reach into nested
sections (``--train.learning_rate 1e-3``). Outputs are written atomically
and accompanied by ``run_manifest.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import rmt

log = logging.getLogger("radiomap")

COMMANDS = ("gen", "train", "estimate", "sweep", "probe", "baseline")

# short flags mapped onto config keys
ALIASES = {
    "loss": "train.loss",
    "qt": "train.q_t",
    "q_t": "train.q_t",
    "split": "train.split",
    "lr": "train.learning_rate",
    "learning_rate": "train.learning_rate",
    "iterations": "train.iterations",
    "batch_size": "train.batch_size",
    "pretrained": "train.pretrained",
    "T": "T",
}


class CLIError(Exception):
    pass


def __version__():
    from importlib.metadata import PackageNotFoundError, version

    try:
        return version("radiomap")
    except PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------- config plumbing


def _parse_value(text):
    try:
        return json.loads(text)
    except (json.JSONDecodeError, TypeError):
        return text


def parse_overrides(tokens):
    """``["--a.b", "1", "--flag", "x"]`` -> ``{"a.b": 1, "flag": "x"}``."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise CLIError(f"unexpected argument {tok!r}; overrides must look like --key value")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, val = key.split("=", 1)
            out[key] = _parse_value(val)
            i += 1
            continue
        if i + 1 >= len(tokens):
            raise CLIError(f"override {tok} needs a value")
        out[key] = _parse_value(tokens[i + 1])
        i += 2
    return out


def apply_overrides(config: dict, overrides: dict) -> dict:
    config = json.loads(json.dumps(config))
    for key, val in overrides.items():
        key = ALIASES.get(key, key)
        parts = key.split(".")
        node = config
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise CLIError(f"cannot override {key!r}: {p!r} is not a section")
        node[parts[-1]] = val
    return config


def load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise CLIError(f"config file not found: {p}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CLIError(f"config file {p} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CLIError(f"config file {p} must hold a JSON object")
    return cfg


def _require_file(path, what):
    if path is None:
        raise CLIError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise CLIError(f"{what} not found: {p}")
    return p


def _require_key(cfg, key, what=None):
    if cfg.get(key) is None:
        raise CLIError(f"missing {what or key!r} (set it in the config or pass --{key})")
    return cfg[key]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_tree(path: Path) -> dict:
    path = Path(path)
    if path.is_file():
        return {path.name: _sha256(path)}
    return {
        str(p.relative_to(path)): _sha256(p)
        for p in sorted(path.rglob("*"))
        if p.is_file() and p.name != "run_manifest.json"
    }


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs):
    from . import kernels

    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: _hash_tree(Path(v)) for k, v in inputs.items() if v is not None},
        "outputs": {str(Path(o).name): _hash_tree(Path(o)) for o in outputs},
        "versions": {
            "radiomap": __version__(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "kernel_backend": kernels.BACKEND,
        },
    }
    text = json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    rmt.atomic_write_bytes(Path(out_dir) / "run_manifest.json", text.encode())


# ---------------------------------------------------------------- commands


def cmd_gen(cfg):
    from .propagation import GeneratorConfig, generate_dataset, write_dataset

    out = Path(_require_key(cfg, "output", "output directory"))
    T = int(cfg.get("T", 100))
    seed = int(cfg.get("seed", 0))
    gen = GeneratorConfig.from_dict(cfg.get("generator", {}))
    write_dataset(out, generate_dataset(T, gen, seed), T, gen, seed)
    write_run_manifest(out, "gen", cfg, {}, [out / "manifest.json"])
    return out


def cmd_train(cfg):
    from .network.archive import save_model
    from .network.model import NetworkSpec
    from .network.training import TrainConfig, TrainingSet, train
    from .propagation import load_dataset, read_manifest

    data = _require_file(cfg.get("data"), "training dataset")
    out = Path(_require_key(cfg, "output", "output directory"))
    tcfg_d = dict(cfg.get("train", {}))
    if "seed" in cfg:
        tcfg_d.setdefault("seed", int(cfg["seed"]))
    tcfg = TrainConfig.from_dict(tcfg_d)
    if tcfg.pretrained:
        _require_file(Path(tcfg.pretrained) / "manifest.json", "pretrained model")
    manifest = read_manifest(data)
    n_f = len(manifest["frequencies"])
    net = dict(cfg.get("network", {}))
    grid = manifest["grid"]
    net.setdefault("n_y", grid["n_y"])
    net.setdefault("n_x", grid["n_x"])
    net.setdefault("value_channels", 1 if tcfg.loss == "freq_separated" else n_f)
    if net.pop("bem", False):
        net["basis"] = manifest["basis"]
    spec = NetworkSpec.from_dict(net)
    records = list(load_dataset(data))
    ts = TrainingSet(records, tcfg.loss, tcfg.q_t, tcfg.split, tcfg.seed)
    result = train(spec, ts, tcfg)
    save_model(out, result.model, tcfg, {
        "dataset": str(data),
        "dataset_T": manifest["T"],
        "final_loss": result.losses[-1] if result.losses else None,
        "iterations": tcfg.iterations,
    })
    losses = "\n".join(f"{v:.9g}" for v in result.losses)
    rmt.atomic_write_bytes(out / "losses.txt", (losses + "\n").encode())
    write_run_manifest(out, "train", cfg, {"data": data}, [out])
    return out


def _load_sampled(cfg):
    """Sampled map from ``input``/``mask`` files or from a dataset record."""
    from .grid import GridSpec, SampledMap
    from .propagation import load_dataset, read_manifest

    if cfg.get("data") is not None:
        data = _require_file(cfg["data"], "dataset")
        index = int(cfg.get("index", 0))
        T = read_manifest(data)["T"]
        if not 0 <= index < T:
            raise CLIError(f"record index {index} outside dataset of {T} records")
        for t, rec in enumerate(load_dataset(data)):
            if t == index:
                return rec.sampled, {"data": data}
    inp = _require_file(cfg.get("input"), "input map file")
    mask_path = _require_file(cfg.get("mask"), "mask file")
    values = rmt.load(inp)
    if values.ndim == 2:
        values = values[:, :, None]
    mask = rmt.load(mask_path)
    n_y, n_x = values.shape[:2]
    side = float(cfg.get("side", 100.0))
    grid = GridSpec.square(side, n_x) if n_x == n_y else GridSpec(n_y, n_x, side / (n_x - 1), side / (n_x - 1))
    buildings = None
    if cfg.get("buildings") is not None:
        buildings = rmt.load(_require_file(cfg["buildings"], "building mask file")) != 0
    freqs = np.asarray(cfg.get("frequencies", np.zeros(values.shape[2])), dtype=float)
    sampled = SampledMap(grid, values, mask, freqs, buildings=buildings)
    return sampled, {"input": inp, "mask": mask_path, "buildings": cfg.get("buildings")}


def _window(cfg):
    from .evaluation import DEFAULT_WINDOW

    return tuple(cfg.get("pgm_window", DEFAULT_WINDOW))


def cmd_estimate(cfg):
    from .evaluation import write_pgm
    from .network.archive import load_model

    model_dir = _require_file(cfg.get("model"), "model archive")
    _require_file(model_dir / "manifest.json", "model manifest")
    sampled, inputs = _load_sampled(cfg)
    out = Path(_require_key(cfg, "output", "output directory"))
    model = load_model(model_dir)
    est = model.estimate(sampled)
    out.mkdir(parents=True, exist_ok=True)
    rmt.save(out / "estimate.rmt", est.values)
    f = int(cfg.get("slice", 0))
    write_pgm(out / "estimate.pgm", est.values[..., f], _window(cfg))
    outputs = [out / "estimate.rmt", out / "estimate.pgm"]
    if model.bem is not None:
        x = model.make_input(*model.sampled_to_arrays(sampled))
        rmt.save(out / "coefficients.rmt", model.coefficients(x)[0])
        outputs.append(out / "coefficients.rmt")
    write_run_manifest(out, "estimate", cfg, {"model": model_dir, **inputs}, outputs)
    return out


def cmd_baseline(cfg):
    from .baselines import BaselineConfig, run_baseline
    from .evaluation import write_pgm

    keys = BaselineConfig.__dataclass_fields__
    bcfg = BaselineConfig(**{k: cfg[k] for k in keys if k in cfg})
    sampled, inputs = _load_sampled(cfg)
    out = Path(_require_key(cfg, "output", "output directory"))
    est = run_baseline(sampled, bcfg)
    out.mkdir(parents=True, exist_ok=True)
    name = f"{bcfg.method}_estimate"
    rmt.save(out / f"{name}.rmt", est.values)
    write_pgm(out / f"{name}.pgm", est.values[..., int(cfg.get("slice", 0))], _window(cfg))
    write_run_manifest(out, "baseline", cfg, inputs, [out / f"{name}.rmt", out / f"{name}.pgm"])
    return out


def cmd_sweep(cfg):
    from .evaluation import ExperimentConfig, sweep

    out = Path(_require_key(cfg, "output", "output directory"))
    exp_d = {k: v for k, v in cfg.items() if k in ExperimentConfig.__dataclass_fields__}
    exp_d["output_dir"] = str(out)
    exp = ExperimentConfig.from_dict(exp_d)
    for key, path in exp.models.items():
        _require_file(Path(path) / "manifest.json", f"model {key!r} manifest")
    sweep(exp)
    outputs = sorted(p for p in out.iterdir() if p.name != "run_manifest.json")
    write_run_manifest(out, "sweep", cfg, dict(exp.models), outputs)
    return out


def cmd_probe(cfg):
    from .evaluation import LatentProbe, encode_records, latent_statistics, probe_code, write_pgm
    from .network.archive import load_model
    from .propagation import load_dataset

    model_dir = _require_file(cfg.get("model"), "model archive")
    _require_file(model_dir / "manifest.json", "model manifest")
    data = _require_file(cfg.get("data"), "dataset")
    out = Path(_require_key(cfg, "output", "output directory"))
    kind = cfg.get("kind", "eigen_perturbation")
    subset = cfg.get("subset", [])
    if isinstance(subset, str):
        subset = [int(s) for s in subset.split(",") if s]
    elif isinstance(subset, int):
        subset = [subset]
    indices = cfg.get("index", [1, 2, 3])
    indices = [indices] if isinstance(indices, int) else list(indices)
    alpha = float(cfg.get("alpha", 10.0))
    model = load_model(model_dir)
    records = list(load_dataset(data))
    limit = cfg.get("max_records")
    if limit:
        records = records[: int(limit)]
    codes = encode_records(model, records)
    stats = latent_statistics(codes)
    grid = records[0].sampled.grid
    out.mkdir(parents=True, exist_ok=True)
    probes = [LatentProbe(kind, subset, alpha, i) for i in (indices if kind == "eigen_perturbation" else [1])]
    outputs = []
    f = int(cfg.get("slice", 0))
    base = model.decode(stats.mean, grid)
    write_pgm(out / "mean_code.pgm", base.values[..., f], _window(cfg))
    outputs.append(out / "mean_code.pgm")
    for p in probes:
        m = model.decode(probe_code(stats, p), grid)
        name = f"{kind}_{p.index}.pgm" if kind == "eigen_perturbation" else f"{kind}.pgm"
        write_pgm(out / name, m.values[..., f], _window(cfg))
        outputs.append(out / name)
    summary = {"eigenvalues": stats.eigenvalues.tolist(), "eigen_residual": stats.residual,
               "n_codes": len(codes)}
    rmt.atomic_write_bytes(out / "latent_summary.json", (json.dumps(summary, indent=2) + "\n").encode())
    outputs.append(out / "latent_summary.json")
    write_run_manifest(out, "probe", cfg, {"model": model_dir, "data": data}, outputs)
    return out


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "estimate": cmd_estimate,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
    "baseline": cmd_baseline,
}


def _threads(value):
    if value is None:
        value = os.environ.get("RADIOMAP_THREADS")
    if value in (None, ""):
        return None
    n = int(value)
    if n < 1:
        raise CLIError("--threads must be >= 1")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="radiomap", description="Radio map estimation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--threads", help="thread cap for numerical libraries (1 = deterministic)")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", "--output", dest="output", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args, rest = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        cfg = apply_overrides(cfg, parse_overrides(rest))
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.output is not None:
            cfg["output"] = args.output
        threads = _threads(args.threads)
        from threadpoolctl import threadpool_limits

        if threads is not None:
            with threadpool_limits(limits=threads):
                out = HANDLERS[args.command](cfg)
        else:
            out = HANDLERS[args.command](cfg)
    except (CLIError, FileNotFoundError, ValueError, KeyError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"radiomap {args.command}: error: {exc}", file=sys.stderr)
        return 2
    print(out)
    return 0


if __name__ == "__main__":
    sys.exit(main())
