"""Command-line front end.

    coopetition train --config standard_bursty [--seed 0,1] [--out DIR]
    coopetition probe RUN_OR_CKPT clamp --head 3 --grid 0,0.25,0.5,0.75,1
    coopetition toy --config paper_settings --seed 1
    coopetition sweep --config paper_settings --threads 4
    coopetition presets

``--config`` takes a bundled preset name or a path to a flat ``key = value``
file. Output goes to ``--out`` or ``$COOPETITION_OUT/<name>`` (default root
``./runs``); every output directory gets ``config.cfg`` and ``VERSION``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from importlib import resources
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from . import checkpoint as ckio
from . import config as cfgio
from . import engine as E
from . import probes as P
from . import toy
from . import trainer

log = logging.getLogger("coopetition")

META_KEYS = ("command", "name", "seeds", "out", "threads", "workers")
PRESET_DIR = "presets"


class CLIError(Exception):
    pass


# ---------------------------------------------------------------- config docs


def preset_names() -> list[str]:
    root = resources.files(__package__) / PRESET_DIR
    return sorted(p.name[:-4] for p in root.iterdir() if p.name.endswith(".cfg"))


def load_doc(ref: str) -> tuple[dict, str]:
    """Load a preset by name or a config file by path; return (doc, name)."""
    path = Path(ref)
    if path.is_file():
        return cfgio.load(path), path.stem
    res = resources.files(__package__) / PRESET_DIR / f"{ref}.cfg"
    if res.is_file():
        return cfgio.loads(res.read_text(encoding="utf-8")), ref
    raise CLIError(f"no config file or preset named {ref!r}; presets: {', '.join(preset_names())}")


def apply_sets(doc: dict, sets: list[str]) -> dict:
    doc = dict(doc)
    for s in sets or ():
        if "=" not in s:
            raise CLIError(f"--set expects key=value, got {s!r}")
        k, v = s.split("=", 1)
        doc[k.strip()] = cfgio.parse_value(v)
    return doc


def parse_seeds(text) -> list[int]:
    if text is None:
        return []
    if isinstance(text, int):
        return [text]
    if isinstance(text, (list, tuple)):
        return [int(s) for s in text]
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise CLIError(f"bad seed list {text!r}") from None


def out_root() -> Path:
    return Path(os.environ.get("COOPETITION_OUT", "runs"))


def out_dir(args, doc: dict, name: str) -> Path:
    if args.out:
        return Path(args.out)
    if doc.get("out"):
        return Path(doc["out"])
    return out_root() / str(doc.get("name") or name)


def stamp(d: Path, doc: dict) -> None:
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.cfg").write_text(cfgio.dumps(doc), encoding="utf-8")
    (d / "VERSION").write_text(__version__ + "\n")


def resolve_checkpoint(ref: str | None, root: Path | None = None) -> str | None:
    """``path.ckpt``, ``run_dir`` (last checkpoint) or ``run_dir@STEP`` (latest
    checkpoint at or before STEP). Relative run dirs are also looked up under
    the output root."""
    if not ref:
        return None
    ref = str(ref)
    base, _, at = ref.partition("@")
    p = Path(base)
    if not p.exists() and not p.is_absolute():
        p = (root or out_root()) / base
    if p.is_file():
        return str(p.resolve())
    cks = ckio.list_checkpoints(p) if p.is_dir() else []
    if not cks:
        raise CLIError(f"no checkpoint found for {ref!r}")
    if at:
        limit = int(at)
        cks = [c for c in cks if _step_of(c) <= limit]
        if not cks:
            raise CLIError(f"no checkpoint at or before step {limit} in {p}")
    return str(cks[-1].resolve())


def _step_of(path: Path) -> int:
    return int(path.stem.split("_")[1])


# ---------------------------------------------------------------------- train


def train_config(doc: dict) -> trainer.TrainConfig:
    flat = {k: v for k, v in doc.items() if k not in META_KEYS}
    for key in ("init.path", "init.lower_from", "init.upper_from"):
        if flat.get(key):
            flat[key] = resolve_checkpoint(flat[key])
    try:
        return trainer.TrainConfig.from_flat(flat)
    except (KeyError, ValueError, TypeError) as err:
        raise CLIError(f"invalid train config: {err}") from err


def cmd_train(args) -> int:
    doc, name = load_doc(args.config)
    doc = apply_sets(doc, args.set)
    if args.precision:
        doc["precision"] = args.precision
    seeds = parse_seeds(args.seed) or parse_seeds(doc.get("seeds"))
    root = out_dir(args, doc, name)
    runs = [(None, root)] if not seeds else [
        (s, root if len(seeds) == 1 else root / f"seed_{s}") for s in seeds]
    for seed, d in runs:
        run_doc = dict(doc)
        if seed is not None:
            run_doc["model_seed"] = seed
            run_doc["data_seed"] = seed
        if args.resume and ckio.list_checkpoints(d):
            run_doc["init.kind"] = "checkpoint"
            run_doc["init.path"] = str(ckio.list_checkpoints(d)[-1])
        cfg = train_config(run_doc)
        log.info("training %s -> %s (%d steps)", name, d, cfg.total_steps)
        try:
            trainer.train(cfg, d)
        except trainer.TrainingAborted as err:
            print(f"error: training aborted: {err}; last checkpoint: {err.last_checkpoint}",
                  file=sys.stderr)
            return 3
    return 0


# ---------------------------------------------------------------------- probe


PROBE_NAMES = tuple(P.PROBES) + ("transplant",)
STANDARD_PRESERVE = ("all", "all-but-values", "all-but-keys", "all-but-queries")


def _floats(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text) -> list[int] | None:
    if text is None:
        return None
    if isinstance(text, (list, tuple)):
        return [int(x) for x in text]
    return [int(x) for x in str(text).split(",") if x.strip()]


def run_probe(name: str, model, bank, opts: dict, ckid: str) -> list[P.ProbeReport]:
    """Run one named probe; list-valued options (heads, preserve sets, modes) fan out."""
    n, seed = int(opts.get("n", 2000)), int(opts.get("seed", 0))
    H, L = model.cfg.num_heads, model.cfg.num_layers
    top = L - 1
    heads = _ints(opts.get("head")) or list(range(H))
    kw = dict(n=n, seed=seed, checkpoint=ckid)
    if name == "profile":
        lp = opts.get("label_pos")
        layer = int(opts.get("layer", -1))
        return [P.attention_profile(model, bank, opts.get("kind", "EVAL_CIWL"), layer,
                                    label_pos=None if lp in (None, "free") else int(lp), **kw)]
    if name == "induction":
        return [P.induction_strength(model, bank, layer=int(opts.get("layer", 1)), **kw)]
    if name == "clamp":
        grid = _floats(opts.get("grid", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"))
        return [P.clamp_sweep(model, bank, h, grid, layer=int(opts.get("layer", top)), **kw)
                for h in heads]
    if name == "composition":
        pres = opts.get("preserve") or STANDARD_PRESERVE
        pres = [pres] if isinstance(pres, str) and ";" not in pres else pres
        if isinstance(pres, str):
            pres = pres.split(";")
        return [P.composition_ablation(model, bank, p, **kw) for p in pres]
    if name == "l1_output":
        return [P.l1_output_ablation(model, bank, **kw)]
    if name == "direct_path":
        modes = [opts["mode"]] if opts.get("mode") else list(P.DIRECT_MODES)
        return [P.direct_path_ablation(model, bank, m, **kw) for m in modes]
    if name == "temperature":
        grid = _floats(opts.get("grid", "0.125,0.25,0.5,1,2"))
        return [P.temperature_probe(model, bank, h, grid,
                                    all_heads_active=bool(opts.get("all_heads_active", False)),
                                    layer=int(opts.get("layer", top)),
                                    label_only=bool(opts.get("label_only", True)), **kw)
                for h in heads]
    if name == "scatter":
        pair = _ints(opts.get("heads")) or [0, 1]
        if len(pair) != 2:
            raise CLIError("--heads expects exactly two heads")
        return [P.per_seq_attention_scatter(model, bank, tuple(pair),
                                            layer=int(opts.get("layer", top)), **kw)]
    if name == "l1_attention":
        kinds = opts.get("kinds") or ("EVAL_ICL", "EVAL_CIWL", "EVAL_FLIP")
        if isinstance(kinds, str):
            kinds = kinds.split(",")
        return [P.l1_attention_summary(model, bank, kinds, **kw)]
    raise CLIError(f"unknown probe {name!r}; valid: {', '.join(PROBE_NAMES)}")


def _targets(target: Path, all_ckpts: bool) -> list[Path]:
    if target.is_file():
        return [target]
    cks = ckio.list_checkpoints(target)
    if not cks:
        raise CLIError(f"no checkpoints under {target}")
    return cks if all_ckpts else [cks[-1]]


def cmd_probe(args) -> int:
    doc = {}
    if args.config:
        doc, _ = load_doc(args.config)
    doc = apply_sets(doc, args.set)
    names = [args.probe] if args.probe else doc.get("probes") or []
    if isinstance(names, str):
        names = [names]
    if not names:
        raise CLIError(f"name a probe; valid: {', '.join(PROBE_NAMES)}")
    for nm in names:
        if nm not in PROBE_NAMES:
            raise CLIError(f"unknown probe {nm!r}; valid: {', '.join(PROBE_NAMES)}")
    target_ref = args.target or doc.get("target")
    if not target_ref:
        raise CLIError("no checkpoint or run directory given")
    target = Path(target_ref)
    if not target.exists() and (out_root() / target).exists():
        target = out_root() / target
    if not target.exists():
        raise CLIError(f"checkpoint or run {target} does not exist")
    run_dir = target.parent.parent if target.is_file() else target
    dest = Path(args.out) if args.out else run_dir / "probes"

    opts = {k[len("probe."):]: v for k, v in doc.items() if k.startswith("probe.")}
    for key in ("head", "heads", "grid", "preserve", "mode", "kind", "label_pos", "layer",
                "kinds", "n", "seed", "part", "source_step"):
        v = getattr(args, key, None)
        if v is not None:
            opts[key] = v
    if args.all_heads_active:
        opts["all_heads_active"] = True
    if args.no_label_only:
        opts["label_only"] = False
    all_ckpts = args.all_checkpoints or bool(doc.get("all_checkpoints", False))
    stamp(dest, {"command": "probe", "target": str(target), "probes": list(names),
                 "all_checkpoints": all_ckpts, **{f"probe.{k}": v for k, v in opts.items()}})

    for nm in names:
        if nm == "transplant":
            _transplant(run_dir, opts, dest)
            continue
        series = []
        for ck in _targets(target, all_ckpts):
            model, _, bank, step = trainer.load_model(ck, dtype=_dtype(args))
            for rep in run_probe(nm, model, bank, opts, ck.stem):
                rep.write(dest)
                series += [(step, rep.probe + (f"__{rep.tag}" if rep.tag else ""), rep.provenance, k, v, n)
                           for k, (v, n) in rep.summary.items()]
            log.info("probe %s on %s done", nm, ck.name)
        if all_ckpts:
            _write_series(dest / f"{nm}__timeseries.csv", series)
    return 0


def _dtype(args):
    return E.DTYPES[args.precision] if args.precision else None


def _write_series(path: Path, series) -> None:
    extra = sorted({k for _, _, prov, *_ in series for k in prov} - {"checkpoint"})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "probe", "key", "value", "n"] + extra)
        for step, probe, prov, k, v, n in series:
            w.writerow([step, probe, k, repr(float(v)), n] + [prov.get(e, "") for e in extra])


def _transplant(run_dir: Path, opts: dict, dest: Path) -> None:
    part = opts.get("part", "UPPER-from-final")
    step = opts.get("source_step")
    metrics = trainer.weight_transplant_eval(
        run_dir, part, None if step is None else int(step),
        n_per_eval=int(opts.get("n", 2000)), seed=int(opts.get("seed", 12345)))
    tag = part if step is None else f"{part}{step}"
    metrics.to_csv(dest / f"{run_dir.name}__transplant_{tag}.csv")


# ------------------------------------------------------------------ toy/sweep


def toy_config(doc: dict) -> toy.ToyConfig:
    flat = {k[len("toy."):]: v for k, v in doc.items() if k.startswith("toy.")}
    unknown = set(doc) - set(META_KEYS) - {k for k in doc if k.startswith("toy.")}
    if unknown:
        raise CLIError(f"unknown toy config keys: {sorted(unknown)}")
    try:
        return cfgio.unflatten(toy.ToyConfig, flat)
    except (KeyError, ValueError, TypeError) as err:
        raise CLIError(f"invalid toy config: {err}") from err


def cmd_toy(args, sweep: bool = False) -> int:
    doc, name = load_doc(args.config)
    doc = apply_sets(doc, args.set)
    base = toy_config(doc)
    seeds = parse_seeds(args.seed) or parse_seeds(doc.get("seeds")) or [base.seed]
    dest = out_dir(args, doc, name)
    workers = int(args.threads or doc.get("workers") or doc.get("threads") or 1)
    stamp(dest, {**doc, "command": "sweep" if sweep else "toy", "seeds": seeds})
    configs = toy.seeds_configs(base, seeds)
    try:
        res = toy.toy_sweep(configs, workers=workers if sweep else 1)
    except toy.ToyDiverged as err:
        err.trace.to_csv(dest / f"trace_seed{err.trace.config.seed}_partial.csv")
        print(f"error: {err}", file=sys.stderr)
        return 3
    toy.write_outputs(res, dest)
    for row in res.rows:
        log.info("seed %s: stuck=%s transient=%s divot=%s", row["seed"], row["plateau_stuck"],
                 row["transient"], row["divot"])
    return 0


def cmd_presets(args) -> int:
    for n in preset_names():
        doc, _ = load_doc(n)
        print(f"{n:24s} {doc.get('command', '?')}")
    return 0


# ----------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="coopetition", description=__doc__.split("\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="preset name or config path")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", help="seed or comma-separated seeds")
        p.add_argument("--threads", type=int, help="BLAS threads (sweep: worker processes)")
        p.add_argument("--precision", type=int, choices=(32, 64))
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="run probes on a checkpoint or run")
    p.add_argument("target", nargs="?", help="checkpoint file or run directory")
    p.add_argument("probe", nargs="?", help=f"one of {', '.join(PROBE_NAMES)}")
    common(p, config_required=False)
    p.add_argument("--all-checkpoints", action="store_true")
    p.add_argument("--head", help="head index or list (default: all heads)")
    p.add_argument("--heads", help="two heads for scatter, e.g. 2,5")
    p.add_argument("--grid", help="comma-separated clamp weights or temperatures")
    p.add_argument("--preserve", help="e.g. all, all-but-values, or keys,queries")
    p.add_argument("--mode", choices=P.DIRECT_MODES)
    p.add_argument("--kind")
    p.add_argument("--kinds")
    p.add_argument("--label-pos", dest="label_pos", type=int, choices=(1, 3))
    p.add_argument("--layer", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--all-heads-active", action="store_true")
    p.add_argument("--no-label-only", action="store_true")
    p.add_argument("--part", choices=("UPPER-from-final", "LOWER-from-step"))
    p.add_argument("--source-step", dest="source_step", type=int)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("toy", help="run the toy model for one or more seeds")
    common(p)
    p.set_defaults(func=lambda a: cmd_toy(a, sweep=False))

    p = sub.add_parser("sweep", help="toy model seed sweep with signature summary")
    common(p)
    p.set_defaults(func=lambda a: cmd_toy(a, sweep=True))

    p = sub.add_parser("presets", help="list bundled presets")
    p.set_defaults(func=cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    threads = getattr(args, "threads", None)
    limit = threads if threads and args.command != "sweep" else None
    try:
        with threadpool_limits(limits=limit):
            return args.func(args)
    except CLIError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
