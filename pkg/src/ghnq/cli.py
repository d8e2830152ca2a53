"""Command-line entry point: ``ghnq <command> [--config FILE] [key=value ...]``.

Commands:
    init-study  train/calibrate/evaluate the zoo under every initializer
    gen-graphs  sample the graph dataset (train + test splits)
    ghn-train   finetune the hypernetwork (fp32, qat:W/A, qat-noise:2/2)
    ghn-eval    evaluate a checkpoint on test splits at several bit settings
    report      rebuild tables from per-run CSVs and validate every CSV

Every command writes ``manifest.json`` with the fully resolved config, so
``ghnq <command> --config <out>/manifest.json`` reruns it exactly.

Exit codes: 0 success, 1 config error, 2 divergence, 3 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Optional

import torch

from . import __version__
from .data import DataError, load_image_data
from .ghn import GhnConfig, GhnModel, load_checkpoint, save_checkpoint
from .graphs import (
    DEFAULT_SIZES,
    ConfigError as GraphConfigError,
    GraphError,
    default_dataset_configs,
    generate_dataset,
    load_dataset,
)
from .init import ALL_INITIALIZERS, InitError, InitializerSpec
from .quant import STANDARD_BITS, BitConfig, ObserverConfig, QuantError
from .schemas import SchemaError, validate_csv
from .train import (
    TrainError,
    TrainSchedule,
    EvalReport,
    EvalRow,
    calibrate_activations,
    evaluate,
    evaluate_ghn,
    ghn_finetune_fp32,
    ghn_qat,
    layerwise_report,
    plot_layerwise,
    train_cnn,
    write_layerwise_csv,
    write_study_csv,
)
from .zoo import ALL_VARIANTS, BlockVariant, build_network

log = logging.getLogger("ghnq")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3


class CliConfigError(ValueError):
    pass


# Every default is listed here; a JSON config or key=value overrides replace them.
DEFAULTS = {
    "init-study": {
        "seed": 0,
        "variants": [v.name for v in ALL_VARIANTS],
        "initializers": list(ALL_INITIALIZERS),
        "width": 1.0,
        "depth": 1.0,
        "hidden_units": 128,
        "epochs": 30,
        "batch_size": 128,
        "lr": 0.01,
        "momentum": 0.9,
        "milestones": [0.375, 0.6, 0.85],
        "bits": "8/8",
        "calib_samples": 1024,
        "calib_fraction": 0.01,
        "act_observer": "percentile",
        "cifar_dir": None,
        "num_classes": 10,
        "separability": 1.0,
        "n_train": 5000,
        "n_test": 1000,
        "plots": False,
    },
    "gen-graphs": {
        "seed": 0,
        "num_classes": 10,
        "sizes": dict(DEFAULT_SIZES),
        "bn_free_only": False,
        "sampler": {},
    },
    "ghn-train": {
        "seed": 0,
        "dataset": None,
        "mode": "fp32",
        "init_checkpoint": None,
        "ghn": asdict(GhnConfig()),
        "epochs": 10,
        "steps_per_epoch": None,
        "max_steps": None,
        "batch_size": 32,
        "meta_batch": 4,
        "lr": 1e-3,
        "weight_decay": 1e-5,
        "milestones": [0.75],
        "grad_clip": 5.0,
        "weight_observer": "absolute",
        "act_observer": "absolute",
        "max_graphs": None,
        "cifar_dir": None,
        "num_classes": 10,
        "separability": 1.0,
        "n_train": 5000,
        "n_test": 1000,
    },
    "ghn-eval": {
        "seed": 0,
        "dataset": None,
        "checkpoint": None,
        "splits": ["TestID", "Deep", "Wide", "BNFree"],
        "bits": ["Float32"] + list(STANDARD_BITS),
        "max_graphs": None,
        "max_images": None,
        "batch_size": 64,
        "cifar_dir": None,
        "num_classes": 10,
        "separability": 1.0,
        "n_train": 5000,
        "n_test": 1000,
    },
    "report": {"inputs": []},
}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(command: str, config_path: Optional[str], overrides: list, seed: Optional[int]) -> dict:
    """Defaults, then the JSON file (a manifest is accepted), then key=value overrides."""
    cfg = json.loads(json.dumps(DEFAULTS[command]))
    if config_path:
        try:
            loaded = json.loads(Path(config_path).read_text())
        except json.JSONDecodeError as exc:
            raise CliConfigError(f"{config_path}: invalid JSON ({exc})") from None
        if isinstance(loaded, dict) and "command" in loaded and "config" in loaded:
            loaded = loaded["config"]
        if not isinstance(loaded, dict):
            raise CliConfigError(f"{config_path}: config must be a JSON object")
        _merge(cfg, loaded, command)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliConfigError(f"override {item!r} is not key=value")
        target = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            target = target.setdefault(p, {})
        if parts[0] not in cfg:
            raise CliConfigError(f"unknown config key {key!r} for {command}")
        target[parts[-1]] = _parse_value(value)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def _merge(cfg: dict, loaded: dict, command: str) -> None:
    unknown = sorted(set(loaded) - set(cfg))
    if unknown:
        raise CliConfigError(f"unknown config keys for {command}: {unknown}")
    cfg.update(loaded)


def write_manifest(out: Path, command: str, cfg: dict, outputs: list, extra: Optional[dict] = None) -> None:
    path = out / "manifest.json"
    # gen-graphs shares the file with the dataset index read by load_dataset
    previous = json.loads(path.read_text()) if command == "gen-graphs" and path.is_file() else {}
    manifest = {
        **{k: v for k, v in previous.items() if k in ("schema_version", "name", "splits")},
        "command": command,
        "config": cfg,
        "seed": cfg.get("seed"),
        "version": __version__,
        "torch": torch.__version__,
        "python": platform.python_version(),
        "threads": torch.get_num_threads(),
        "outputs": sorted(outputs),
        **(extra or {}),
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_data(cfg: dict, seed: int):
    return load_image_data(cfg.get("cifar_dir"), cfg["n_train"], cfg["n_test"], cfg["num_classes"],
                           cfg["separability"], seed)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_init_study(cfg: dict, out: Path) -> dict:
    variants = [BlockVariant.parse(v) for v in cfg["variants"]]
    inits = [InitializerSpec.parse(i) for i in cfg["initializers"]]
    bits = BitConfig.parse(cfg["bits"], act_observer=ObserverConfig(cfg["act_observer"], cfg["calib_fraction"]))
    obs = ObserverConfig(cfg["act_observer"], cfg["calib_fraction"], cfg["calib_samples"])
    sched = TrainSchedule(epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"],
                          momentum=cfg["momentum"], milestones=tuple(cfg["milestones"]))
    train, test = _load_data(cfg, cfg["seed"])
    plots = cfg["plots"]
    results, outputs, diverged = [], [], 0
    for vi, variant in enumerate(variants):
        for ii, init in enumerate(inits):
            run_seed = cfg["seed"] * 100_003 + vi * 1000 + ii
            gen = torch.Generator().manual_seed(run_seed)
            net = build_network(variant, init, cfg["width"], cfg["depth"], gen, num_classes=train.num_classes,
                                hidden_units=cfg["hidden_units"])
            t0 = time.time()
            res = train_cnn(net, train, sched, gen)
            if res.diverged:
                diverged += 1
                results.append(EvalRow(net.name, bits.name, float("nan"), float("nan"), status="diverged"))
                log.warning("%s diverged after %d steps", net.name, res.steps)
                continue
            calibrate_activations(net, train, obs, gen)
            row = evaluate(net, test, bits, generator=gen)
            metrics = (row.fp32_top1, row.q_top1, row.qmse, row.qce, row.percent_decrease)
            if not all(math.isfinite(v) for v in metrics):
                # finite weights that still overflow at inference
                diverged += 1
                row.status = "diverged"
                results.append(row)
                log.warning("%s produces non-finite outputs", net.name)
                continue
            results.append(row)
            recs = layerwise_report(net, bits=8)
            lw = out / "layerwise" / f"{net.name}.csv"
            write_layerwise_csv(recs, lw)
            outputs.append(str(lw.relative_to(out)))
            if plots:
                svg = lw.with_suffix(".svg")
                plot_layerwise(recs, svg, net.name)
                outputs.append(str(svg.relative_to(out)))
            log.info("%s: fp32 %.2f%% %s %.2f%% (%.0fs)", net.name, row.fp32_top1, bits.name, row.q_top1,
                     time.time() - t0)
    write_study_csv(results, out / "study.csv")
    write_study_csv([r for r in results if r.status == "ok"], out / "table.csv")
    _strip_flag_column(out / "table.csv")
    outputs += ["study.csv", "table.csv"]
    return {"outputs": outputs, "runs": len(results), "diverged": diverged}


def _strip_flag_column(path: Path) -> None:
    with open(path, newline="") as fh:
        rows = [r[:-1] for r in csv.reader(fh)]
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(rows)


def cmd_gen_graphs(cfg: dict, out: Path) -> dict:
    sampler = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg["sampler"].items()}
    ranges = {k: sampler.pop(k) for k in ("cells", "channels") if k in sampler}
    configs = default_dataset_configs(cfg["seed"], cfg["num_classes"], cfg["bn_free_only"], **ranges)
    if sampler:
        configs = {s: replace(c, **sampler) for s, c in configs.items()}
    sizes = {s: int(cfg["sizes"].get(s, 0)) for s in configs}
    configs = {s: c for s, c in configs.items() if sizes[s] > 0}
    manifest = generate_dataset(out, configs, sizes)
    return {"outputs": [info["file"] for info in manifest["splits"].values()] + ["manifest.json"]}


def parse_train_mode(mode: str, cfg: dict) -> Optional[BitConfig]:
    """``fp32`` -> None; ``qat:W/A`` -> simulated quantization; ``qat-noise:W/A`` -> noise."""
    if mode == "fp32":
        return None
    kind, _, bits = mode.partition(":")
    if kind not in ("qat", "qat-noise") or not bits:
        raise CliConfigError(f"mode must be fp32, qat:W/A or qat-noise:W/A, got {mode!r}")
    w_obs = ObserverConfig(cfg["weight_observer"])
    a_obs = ObserverConfig(cfg["act_observer"])
    b = BitConfig.parse(bits)
    return BitConfig(b.weight_bits, b.act_bits, "noisequant" if kind == "qat-noise" else "simquant", w_obs, a_obs)


def _ghn_schedule(cfg: dict) -> TrainSchedule:
    return TrainSchedule.ghn_default(
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], meta_batch=cfg["meta_batch"], lr=cfg["lr"],
        weight_decay=cfg["weight_decay"], milestones=tuple(cfg["milestones"]),
        steps_per_epoch=cfg["steps_per_epoch"], max_steps=cfg["max_steps"], grad_clip=cfg["grad_clip"],
    )


def _require_path(value, what: str) -> Path:
    if not value:
        raise CliConfigError(f"{what} is required")
    return Path(value)


def _graph_classes(root) -> Optional[int]:
    manifest = json.loads((Path(root) / "manifest.json").read_text())
    for info in manifest.get("splits", {}).values():
        return info.get("config", {}).get("num_classes")
    return None


def cmd_ghn_train(cfg: dict, out: Path) -> dict:
    bits = parse_train_mode(cfg["mode"], cfg)
    sched = _ghn_schedule(cfg)
    splits = load_dataset(_require_path(cfg["dataset"], "dataset"))
    if "Train" not in splits:
        raise CliConfigError("dataset has no Train split")
    graphs = splits["Train"][: cfg["max_graphs"]] if cfg["max_graphs"] else splits["Train"]
    train, _ = _load_data(cfg, cfg["seed"])
    head = _graph_classes(cfg["dataset"])
    if head is not None and head != train.num_classes:
        raise CliConfigError(f"graphs predict {head} classes but the data has {train.num_classes}")
    torch.manual_seed(cfg["seed"])
    if cfg["init_checkpoint"]:
        model, _ = load_checkpoint(cfg["init_checkpoint"])
    else:
        model = GhnModel(GhnConfig(**cfg["ghn"]))
    gen = torch.Generator().manual_seed(cfg["seed"])

    def progress(step, total, loss):
        if step % 10 == 0 or step == total - 1:
            log.info("step %d/%d loss %.4f", step + 1, total, loss)

    if bits is None:
        res = ghn_finetune_fp32(model, graphs, train, sched, gen, progress)
    else:
        res = ghn_qat(model, graphs, train, bits, sched, gen, progress)
    save_checkpoint(model, out / "ghn.pt", extra={"mode": cfg["mode"], "status": res.status, "steps": res.steps})
    with open(out / "losses.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr"])
        for i, (loss, lr) in enumerate(zip(res.losses, res.lrs)):
            w.writerow([i, f"{loss:.6g}" if loss == loss and abs(loss) != float("inf") else "", lr])
    info = {"outputs": ["ghn.pt", "losses.csv"], "status": res.status, "steps": res.steps}
    if res.diverged:
        info["diverged"] = 1
    return info


def cmd_ghn_eval(cfg: dict, out: Path, bits_override: Optional[list] = None) -> dict:
    model, extra = load_checkpoint(_require_path(cfg["checkpoint"], "checkpoint"))
    splits = load_dataset(_require_path(cfg["dataset"], "dataset"))
    missing = [s for s in cfg["splits"] if s not in splits]
    if missing:
        raise CliConfigError(f"dataset lacks splits {missing}")
    chosen = {s: splits[s][: cfg["max_graphs"]] if cfg["max_graphs"] else splits[s] for s in cfg["splits"]}
    bits = bits_override or cfg["bits"]
    _, test = _load_data(cfg, cfg["seed"])
    report = evaluate_ghn(model, chosen, bits, test, cfg["batch_size"], cfg["max_images"], cfg["seed"],
                          lambda s, i, n: log.info("%s graph %d/%d", s, i + 1, n))
    report.write_rows_csv(out / "eval_rows.csv")
    report.write_table_csv(out / "table_top1.csv", "top1")
    report.write_table_csv(out / "table_top5.csv", "top5")
    return {"outputs": ["eval_rows.csv", "table_top1.csv", "table_top5.csv"], "checkpoint_mode": extra.get("mode")}


_SCHEMA_BY_NAME = {
    "study.csv": "study",
    "table.csv": "study_table",
    "eval_rows.csv": "eval_rows",
    "table_top1.csv": "split_table",
    "table_top5.csv": "split_table",
    "losses.csv": "loss_history",
}


def schema_for(path: Path) -> Optional[str]:
    if path.name in _SCHEMA_BY_NAME:
        return _SCHEMA_BY_NAME[path.name]
    if path.parent.name == "layerwise" and path.suffix == ".csv":
        return "layerwise"
    return None


def cmd_report(cfg: dict, out: Path) -> dict:
    """Validate every known CSV under the input run directories and rebuild
    the aggregate tables from per-graph evaluation rows."""
    inputs = [Path(p) for p in cfg["inputs"]]
    if not inputs:
        raise CliConfigError("report needs inputs=[run directories]")
    checked, outputs = {}, []
    for root in inputs:
        if not root.is_dir():
            raise FileNotFoundError(f"no run directory {root}")
        for path in sorted(root.rglob("*.csv")):
            schema = schema_for(path)
            if schema:
                checked[str(path)] = {"schema": schema, "rows": validate_csv(path, schema)}
        rows = root / "eval_rows.csv"
        if rows.is_file():
            rep = EvalReport.read_rows_csv(rows)
            name = root.name or "run"
            for metric in ("top1", "top5"):
                target = out / f"{name}_table_{metric}.csv"
                rep.write_table_csv(target, metric)
                outputs.append(target.name)
    (out / "validated.json").write_text(json.dumps(checked, indent=2, sort_keys=True) + "\n")
    return {"outputs": outputs + ["validated.json"], "validated": len(checked)}


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ghnq", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in DEFAULTS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config (or a previous run's manifest.json)")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--threads", type=int, default=1, help="torch intra-op threads (1 = deterministic)")
        sp.add_argument("--plots", action="store_true", help="emit layerwise SVG plots (init-study)")
        sp.add_argument("--bits", default=None, help="bit setting W/A, comma-separated for ghn-eval")
        sp.add_argument("--mode", default=None, help="ghn-train mode: fp32 | qat:W/A | qat-noise:2/2")
        sp.add_argument("--bn-free-only", action="store_true", help="gen-graphs: BN-free train and test splits")
        sp.add_argument("overrides", nargs="*", help="key=value config overrides (values parsed as JSON)")
    return p


def run(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    # overrides may be interleaved with options
    stray = [a for a in extra if a.startswith("-") or "=" not in a]
    if stray:
        parser.error(f"unrecognized arguments: {' '.join(stray)}")
    args.overrides = list(args.overrides) + extra
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    out = Path(args.out)
    try:
        cfg = resolve_config(args.command, args.config, args.overrides, args.seed)
        if args.mode is not None:
            if args.command != "ghn-train":
                raise CliConfigError("--mode applies to ghn-train only")
            cfg["mode"] = args.mode
        bits_override = None
        if args.bits is not None:
            if args.command == "ghn-eval":
                bits_override = [b.strip() for b in args.bits.split(",")]
                cfg["bits"] = bits_override
            elif args.command == "init-study":
                cfg["bits"] = args.bits
            else:
                raise CliConfigError("--bits applies to init-study and ghn-eval")
        if args.plots:
            if args.command != "init-study":
                raise CliConfigError("--plots applies to init-study only")
            cfg["plots"] = True
        if args.bn_free_only:
            if args.command != "gen-graphs":
                raise CliConfigError("--bn-free-only applies to gen-graphs only")
            cfg["bn_free_only"] = True
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "init-study":
            info = cmd_init_study(cfg, out)
        elif args.command == "gen-graphs":
            info = cmd_gen_graphs(cfg, out)
        elif args.command == "ghn-train":
            info = cmd_ghn_train(cfg, out)
        elif args.command == "ghn-eval":
            info = cmd_ghn_eval(cfg, out, bits_override)
        else:
            info = cmd_report(cfg, out)
        outputs = info.pop("outputs")
        write_manifest(out, args.command, cfg, outputs, {"result": info})
    except (CliConfigError, GraphConfigError, GraphError, InitError, QuantError, TrainError, KeyError,
            TypeError, ValueError) as exc:
        if isinstance(exc, (DataError, SchemaError)):
            log.error("I/O error: %s", exc)
            return EXIT_IO
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (OSError, DataError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    if info.get("diverged") and args.command == "ghn-train" or (
            args.command == "init-study" and info.get("diverged") == info.get("runs")):
        log.error("run diverged")
        return EXIT_DIVERGED
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
