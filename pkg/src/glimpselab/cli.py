"""Command-line driver: ``glimpselab <command> [options]``.

Every command writes into an output directory (``--out``, or a named
subdirectory of ``$GLIMPSE_OUT`` / ``./runs``) together with a
``manifest.json`` holding the resolved configuration, seed and argv.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import platform
import sys
from pathlib import Path
from typing import Optional, Sequence

log = logging.getLogger("glimpselab")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


# -- config -------------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise UsageError(f"config line {n}: empty key")
        out[k] = v
    return out


def read_config(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from e
    return parse_config_text(text)


def _coerce(value: str, like):
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(value)
    return type(like)(value)


def resolve_model_config(preset: str, overrides: dict[str, str], seed: Optional[int]):
    from .model import PRESETS

    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}")
    cfg = PRESETS[preset]()
    fields = cfg.to_dict()
    kw = {}
    for k, v in overrides.items():
        if k not in fields:
            raise UsageError(f"unknown config key {k!r}")
        try:
            kw[k] = _coerce(v, fields[k])
        except ValueError:
            raise UsageError(f"bad value for {k}: {v!r}") from None
    if seed is not None:
        kw["seed"] = seed
    try:
        return dataclasses.replace(cfg, **kw)
    except ValueError as e:
        raise UsageError(str(e)) from e


# -- output -------------------------------------------------------------------

def output_dir(args, default_name: str) -> Path:
    if args.out:
        d = Path(args.out)
    else:
        d = Path(os.environ.get("GLIMPSE_OUT", "runs")) / default_name
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_manifest(outdir: Path, command: str, argv: Sequence[str], resolved: dict) -> Path:
    import numpy as np

    from . import __version__

    m = {
        "command": command,
        "argv": list(argv),
        "resolved": resolved,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "threads": os.environ.get("OMP_NUM_THREADS"),
    }
    p = outdir / MANIFEST
    p.write_text(json.dumps(m, indent=2, sort_keys=True, default=str) + "\n")
    return p


def _rng(seed: int):
    import numpy as np
    return np.random.default_rng(seed)


def _load(path):
    from .model import load_params
    if not Path(path).exists():
        raise UsageError(f"checkpoint not found: {path}")
    return load_params(path)


def _read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise UsageError(f"empty csv {path}")
    return rows[0], rows[1:]


def _num(col: list[str]):
    import numpy as np
    return np.array([float(v) if v not in ("", "nan") else np.nan for v in col])


# -- commands -------------------------------------------------------------------

def cmd_train(args, argv) -> int:
    from .model import train
    from .worldgen import TrainConstraint

    overrides = read_config(args.config) if args.config else {}
    for item in args.set or []:
        overrides.update(parse_config_text(item))
    cfg = resolve_model_config(args.preset, overrides, args.seed)
    constraint = TrainConstraint() if args.constraint else None
    out = output_dir(args, f"train_{args.preset}_s{cfg.seed}{'_constraint' if constraint else ''}")
    write_manifest(out, "train", argv, {"config": cfg.to_dict(), "preset": args.preset,
                                        "constraint": dataclasses.asdict(constraint) if constraint else None})

    def progress(b, loss, acc):
        if b == 1 or b % args.print_every == 0:
            log.info("batch %d/%d loss %.4f acc_last20 %.3f", b, cfg.total_batches, loss, acc)

    res = train(cfg, constraint, log_path=out / "train_log.csv", checkpoint_path=out / "model.glck",
                checkpoint_every=args.checkpoint_every, progress=progress)
    log.info("trained %d batches in %.1f s -> %s", cfg.total_batches, res.seconds, out / "model.glck")
    (out / "train_summary.json").write_text(json.dumps(
        {"seconds": res.seconds, "batches": cfg.total_batches, "final_loss": res.log[-1][1]}, indent=2) + "\n")
    _plot_train_log(out / "train_log.csv", out / "train_log.svg")
    return EXIT_OK


def _plot_train_log(csv_path, svg_path):
    from . import svgplot

    head, rows = _read_csv(csv_path)
    cols = list(zip(*rows)) if rows else [[] for _ in head]
    x = _num(list(cols[0]))
    svg = svgplot.line_chart(x, {"loss": _num(list(cols[1]))}, title="training loss",
                             xlabel="batch", ylabel="cross-entropy")
    svgplot.save(svg_path, svg)


def cmd_eval(args, argv) -> int:
    from . import svgplot
    from .model import evaluate_curve, fresh_episodes, write_curve
    from .oracle import curves_on
    from .worldgen import TrainConstraint

    params = _load(args.checkpoint)
    out = output_dir(args, "eval")
    write_manifest(out, "eval", argv, vars(args))
    rng = _rng(args.seed)
    constraint = TrainConstraint() if args.constraint else None
    eps = fresh_episodes(args.episodes, args.seq_len, rng, constraint, args.tokens)
    curve = evaluate_curve(params, eps)
    write_curve(out / "curve.csv", curve)
    oc = curves_on(eps, rng.spawn(1)[0])
    oc.write_csv(out / "oracle.csv")
    t = list(range(len(curve.accuracy)))
    svgplot.save(out / "curve.svg", svgplot.line_chart(
        t, {"model": curve.accuracy, "oracle": oc.oracle.accuracy, "cache": oc.cache.accuracy},
        bands={"model": (curve.ci_low, curve.ci_high)},
        title="next-token accuracy on unseen scenes", xlabel="timestep", ylabel="accuracy"))
    log.info("mean accuracy t>=35: %.3f", float(curve.accuracy[35:].mean()) if len(t) > 35 else float("nan"))
    return EXIT_OK


def cmd_oracle(args, argv) -> int:
    from . import svgplot
    from .oracle import oracle_curve

    out = output_dir(args, "oracle")
    write_manifest(out, "oracle", argv, vars(args))
    oc = oracle_curve(args.episodes, args.seq_len, _rng(args.seed), n_tokens=args.tokens)
    oc.write_csv(out / "oracle.csv")
    svgplot.save(out / "oracle.svg", svgplot.line_chart(
        list(range(len(oc.oracle.accuracy))), {"oracle": oc.oracle.accuracy, "cache": oc.cache.accuracy},
        title="symbolic agents", xlabel="timestep", ylabel="accuracy"))
    log.info("t=0 oracle accuracy %.4f", oc.oracle.accuracy[0])
    return EXIT_OK


def _parse_window(s: str) -> tuple[int, int]:
    try:
        a, b = (int(v) for v in s.split(":"))
    except ValueError:
        raise UsageError(f"window must look like 35:100, got {s!r}") from None
    if not 0 <= a <= b:
        raise UsageError(f"bad window {s!r}")
    return a, b


def cmd_probe(args, argv) -> int:
    from . import svgplot
    from .model import LAYERS
    from .probes import binding_gap, collect_probe_data, run_probe_suite, scene_folds

    a, b = _parse_window(args.window)
    layers = args.layers.split(",") if args.layers else list(LAYERS)
    for l in layers:
        if l not in LAYERS:
            raise UsageError(f"unknown layer {l!r}")
    params = _load(args.checkpoint)
    out = output_dir(args, "probe")
    write_manifest(out, "probe", argv, vars(args))
    rng = _rng(args.seed)
    ds = collect_probe_data(params, args.scenes, rng, seq_len=max(b, 100), window=(a, b))
    ts = list(range(a, b + 1, args.stride))
    rep = run_probe_suite(ds, layers, scene_folds(ds.n_scenes, 5, args.seed), ts, binding=not args.no_binding)
    rep.write_csv(out / "probe.csv")
    groups = list(rep.components)
    series = {}
    for kind in ("label", "position"):
        for off in (0, 1, 2):
            series[f"{kind} t+{off}"] = [rep.components[l][(kind, off)].mean for l in groups]
    svgplot.save(out / "components.svg", svgplot.bar_chart(groups, series, title="component decoding",
                                                           ylabel="accuracy"))
    if rep.binding:
        tgroups, tser, terr = [], {"tuple": [], "baseline": []}, {"tuple": ([], [])}
        for row in rep.binding:
            tgroups.append(f"{row.layer} L{row.label_offset}P{row.position_offset}")
            tser["tuple"].append(float(row.tuple_acc[~_isnan(row.tuple_acc)].mean()))
            tser["baseline"].append(row.mean_baseline)
        svgplot.save(out / "tuples.svg", svgplot.bar_chart(tgroups, tser, title="tuple decoding vs baseline",
                                                           ylabel="accuracy"))
        by_layer: dict = {}
        for row in rep.binding:
            by_layer.setdefault(row.layer, []).append(row)
        for layer, rows in by_layer.items():
            g = binding_gap(rows)
            log.info("%s: congruent excess %.4f [%.4f, %.4f], incongruent %.4f [%.4f, %.4f]%s", layer,
                     *g.congruent, *g.incongruent, "" if g.informative else " (uninformative)")
    return EXIT_OK


def _isnan(a):
    import numpy as np
    return np.isnan(a)


def cmd_intervene(args, argv) -> int:
    from . import interventions as I
    from . import svgplot

    params = _load(args.checkpoint)
    out = output_dir(args, f"intervene_{args.kind}")
    write_manifest(out, f"intervene {args.kind}", argv, vars(args))
    rng = _rng(args.seed)
    if args.kind == "withheld":
        rep = I.run_withheld_saccade(params, args.scenes, rng)
        rep.write_csv(out / "withheld.csv")
        s = rep.summary()
        names = list(s)
        svgplot.save(out / "withheld.svg", svgplot.bar_chart(
            names, {"accuracy": [s[n][0] for n in names]},
            errors={"accuracy": ([s[n][1] for n in names], [s[n][2] for n in names])},
            title="forced withheld saccade", ylabel="accuracy"))
        log.info("model %.3f oracle %.3f cache %.3f", s["model"][0], s["oracle"][0], s["cache"][0])
    elif args.kind == "replace":
        switch = 35 if args.switch is None else args.switch
        horizon = 250 if args.horizon is None else args.horizon
        model, oracle = I.run_replacement(params, args.scenes, rng, switch, horizon)
        model.write_csv(out / "replace.csv")
        oracle.write_csv(out / "replace_oracle.csv")
        t = list(range(horizon))
        lo, hi = model.ci()
        svgplot.save(out / "replace.svg", svgplot.line_chart(
            t, {"changed": model.changed_acc, "unchanged": model.unchanged_acc,
                "err original": model.err_original, "err other": model.err_other,
                "oracle changed": oracle.changed_acc},
            bands={"changed": (lo, hi)}, title=f"label replacement at t={switch}",
            xlabel="timestep", ylabel="fraction"))
        pre, post, z, p = model.unchanged_test()
        log.info("unchanged positions pre %.3f post %.3f (z=%.2f, p=%.3g)", pre, post, z, p)
    elif args.kind == "add":
        switch = 35 if args.switch is None else args.switch
        post = 150 if args.horizon is None else args.horizon - switch
        if post < 1:
            raise UsageError("horizon must exceed the switch step")
        model, oracle = I.run_addition(params, args.scenes, rng, switch, post)
        model.write_csv(out / "add.csv")
        oracle.write_csv(out / "add_oracle.csv")
        lo, hi = model.ci()
        svgplot.save(out / "add.svg", svgplot.line_chart(
            list(range(switch + post)), {"new token": model.new_acc, "old tokens": model.old_acc,
                                         "oracle new": oracle.new_acc},
            bands={"new token": (lo, hi)}, title=f"token addition at t={switch}",
            xlabel="timestep", ylabel="accuracy"))
        log.info("rise time to 90%% of plateau: %s steps", model.rise_time())
    elif args.kind == "ood":
        seq_len = 100 if args.horizon is None else args.horizon
        model, oracle = I.run_ood_binding(params, args.scenes, rng, seq_len)
        model.write_csv(out / "ood.csv")
        oracle.write_csv(out / "ood_oracle.csv")
        svgplot.save(out / "ood.svg", svgplot.line_chart(
            list(range(seq_len)), {"k at novel position": model.k_acc, "other at control": model.control_acc},
            title="out-of-distribution binding", xlabel="timestep", ylabel="accuracy"))
        log.info("end accuracy k %.3f control %.3f", *model.end_accuracy())
    return EXIT_OK


def cmd_plot(args, argv) -> int:
    from . import svgplot

    try:
        head, rows = _read_csv(args.csv)
    except OSError as e:
        raise UsageError(f"cannot read {args.csv}: {e.strerror}") from e
    cols = dict(zip(head, (list(c) for c in zip(*rows)))) if rows else {h: [] for h in head}
    x = args.x or head[0]
    ys = args.y.split(",") if args.y else [h for h in head if h != x]
    for c in [x, *ys]:
        if c not in cols:
            raise UsageError(f"no column {c!r} in {args.csv}")
    svg = svgplot.line_chart(_num(cols[x]), {c: _num(cols[c]) for c in ys},
                             title=args.title or Path(args.csv).stem, xlabel=x, ylabel="value")
    dest = Path(args.output) if args.output else Path(args.csv).with_suffix(".svg")
    svgplot.save(dest, svg)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="glimpselab", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 keeps runs bit-reproducible)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=0):
        sp.add_argument("--seed", type=int, default=seed)
        sp.add_argument("--out", help="output directory")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--preset", default="desk", choices=["desk", "paper"])
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.add_argument("--constraint", action="store_true", help="pin label k to (1,1) during training")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out")
    t.add_argument("--print-every", type=int, default=100)
    t.add_argument("--checkpoint-every", type=int, default=500)

    e = sub.add_parser("eval", help="accuracy curve on unseen scenes")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--episodes", type=int, default=500)
    e.add_argument("--seq-len", type=int, default=100)
    e.add_argument("--tokens", type=int, default=None)
    e.add_argument("--constraint", action="store_true")
    common(e, 1)

    o = sub.add_parser("oracle", help="symbolic agent curves")
    o.add_argument("--episodes", type=int, default=10000)
    o.add_argument("--seq-len", type=int, default=100)
    o.add_argument("--tokens", type=int, default=None)
    common(o)

    pr = sub.add_parser("probe", help="linear decoding on pentagon scenes")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--scenes", type=int, default=500)
    pr.add_argument("--window", default="35:100")
    pr.add_argument("--stride", type=int, default=1, help="decode every n-th window timestep")
    pr.add_argument("--layers", default=None, help="comma-separated subset of layers")
    pr.add_argument("--no-binding", action="store_true")
    common(pr, 2)

    iv = sub.add_parser("intervene", help="causal memory experiments")
    iv.add_argument("kind", choices=["withheld", "replace", "add", "ood"])
    iv.add_argument("--checkpoint", required=True)
    iv.add_argument("--scenes", type=int, default=500)
    iv.add_argument("--switch", type=int, default=None)
    iv.add_argument("--horizon", type=int, default=None)
    common(iv, 3)

    pl = sub.add_parser("plot", help="SVG line chart from any result CSV")
    pl.add_argument("csv")
    pl.add_argument("--x", default=None)
    pl.add_argument("--y", default=None, help="comma-separated columns")
    pl.add_argument("--title", default=None)
    pl.add_argument("-o", "--output", default=None)
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "oracle": cmd_oracle, "probe": cmd_probe,
            "intervene": cmd_intervene, "plot": cmd_plot}


def _set_threads(n: int) -> None:
    # only effective before numpy is first imported, which is why command
    # modules are imported lazily
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"glimpselab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("glimpselab: usage error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    _set_threads(args.threads)
    try:
        return COMMANDS[args.command](args, argv)
    except UsageError as e:
        print(f"glimpselab: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # runtime failure
        log.debug("traceback", exc_info=True)
        print(f"glimpselab: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
