"""Command-line entry point: ``snredit <command> [options]``.

Options may also come from an INI file (``--config``).  The file's
``[common]`` section applies to every command and a section named after the
command (``[edit]``, ``[train]``...) overrides it.  Keys mirror the long flag
names; dashes and underscores are interchangeable.  Precedence is
flag > ``SNR_SEED`` (seed only) > file > built-in default.

Exit codes: 0 success, 1 check failure or divergence, 2 usage error,
3 I/O or format error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    BoundReport,
    DISCRETIZATION_MARGIN,
    METRIC_FIELDS,
    VARIANTS,
    edit_metrics,
    field_error_check,
    oracle_source_trajectory,
    rows_to_csv,
    run_ablation,
    sensitivity_sweep,
    verify_trajectory_bound,
)
from .edit import NOISE_MODES, EditConfig, edit
from .errors import FormatError, IntegrationDiverged, InvalidArgument, InvalidInput, TrainingFailed
from .flow import Dataset, MlpFlowModel, TrainConfig, load_checkpoint, save_checkpoint, train
from .formats import read_fgrid, render_latent, svg_line_plot
from .grid import RngStream, broadcast_channels, minmax_normalize
from .prior import PriorConfig, load_masks, prior_from_image, prior_from_regions, segment_synthetic
from .scenarios import SCENARIOS, get_scenario

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


# --- option plumbing --------------------------------------------------------


def _int_list(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).replace(" ", "").split(",") if v]


def _float_list(text) -> list[float]:
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(" ", "").split(",") if v]


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


# name -> (type, default, help); shared by several commands
_OPTIONS = {
    "seed": (int, 0, "master seed"),
    "scenario": (str, "shapes16", f"scenario ({', '.join(sorted(SCENARIOS))})"),
    "n": (int, None, "number of samples (default: scenario size)"),
    "data": (str, None, "dataset stem written by gen-data (default: generate)"),
    "model": (str, None, "checkpoint path (default: analytic oracle if available)"),
    "resume": (str, None, "checkpoint to resume training from"),
    "steps": (int, None, "training steps / Euler steps"),
    "lr": (float, 1e-3, "learning rate"),
    "batch": (int, 64, "batch size"),
    "momentum": (float, 0.9, "momentum"),
    "hidden": (_int_list, [256, 256, 256], "hidden widths, comma separated"),
    "time_dim": (int, 32, "time embedding size"),
    "cond_dim": (int, 16, "condition embedding size"),
    "lambda_struct": (float, 0.1, "structural noise scale"),
    "lambda_stoch": (float, 0.9, "stochastic noise scale"),
    "t_max": (float, 1.0, "editing start time"),
    "noise_mode": (str, "resample_per_step", f"one of {NOISE_MODES}"),
    "method": (str, "snr", "snr or flowedit"),
    "record_trajectory": (_bool, False, "dump per-step states"),
    "source": (str, None, "source image FGRID (default: scenario sample)"),
    "source_seed": (int, None, "scenario sample seed (default: --seed)"),
    "c_src": (int, None, "source class (default: scenario)"),
    "c_tar": (int, None, "target class (default: scenario)"),
    "masks": (str, None, "region mask JSON (default: segment the source)"),
    "projection_seed": (int, 0, "seed of the frozen projection"),
    "c_desc": (int, 32, "descriptor size"),
    "seeds": (int, 20, "number of seeds"),
    "first_seed": (int, 0, "first seed"),
    "jobs": (int, 1, "worker processes (seeds are split across workers)"),
    "debug_l_scale": (float, 1.0, "scale the Lipschitz constants (negative control)"),
    "field_points": (int, 16, "random field-error checks per seed"),
    "variants": (str, ",".join(VARIANTS), "comma separated ablation variants"),
    "values": (_float_list, [0.0, 0.25, 0.5, 0.75, 0.9, 1.0], "lambda_stoch values"),
    "edited": (str, None, "edited image FGRID"),
    "target_class": (int, None, "class for the alignment proxy"),
}

_COMMAND_OPTIONS = {
    "gen-data": ["seed", "n"],
    "train": ["scenario", "seed", "data", "resume", "steps", "lr", "batch", "momentum",
              "hidden", "time_dim", "cond_dim"],
    "edit": ["scenario", "seed", "model", "steps", "lambda_struct", "lambda_stoch", "t_max",
             "noise_mode", "method", "record_trajectory", "source", "source_seed", "c_src", "c_tar",
             "masks", "projection_seed", "c_desc"],
    "verify-bounds": ["scenario", "seed", "steps", "seeds", "first_seed", "jobs", "debug_l_scale",
                      "lambda_struct", "lambda_stoch", "t_max", "field_points"],
    "ablate": ["scenario", "seed", "model", "steps", "seeds", "first_seed", "jobs", "variants",
               "lambda_struct", "lambda_stoch", "t_max", "projection_seed", "c_desc"],
    "sweep": ["scenario", "seed", "model", "steps", "seeds", "first_seed", "values", "t_max",
              "projection_seed", "c_desc"],
    "metrics": ["scenario", "source", "edited", "target_class"],
}

# per-command defaults that differ from the shared table
_COMMAND_DEFAULTS = {
    "train": {"steps": 5000},
    "edit": {"steps": 50},
    "verify-bounds": {"steps": 1000, "scenario": "blobs2h"},
    "ablate": {"steps": 50},
    "sweep": {"steps": 50},
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snredit", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"snredit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd, names in _COMMAND_OPTIONS.items():
        sp = sub.add_parser(cmd)
        if cmd == "gen-data":
            sp.add_argument("scenario_name", metavar="SCENARIO")
        sp.add_argument("--config", help="INI configuration file")
        sp.add_argument("--out", help="output directory (required except for metrics)")
        for name in names:
            _, default, text = _OPTIONS[name]
            default = _COMMAND_DEFAULTS.get(cmd, {}).get(name, default)
            sp.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                            help=f"{text} (default: {default})")
    return p


def _read_config_file(path: str, command: str) -> dict[str, str]:
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config {path}: {exc}") from exc
    names = set(_COMMAND_OPTIONS[command]) | {"out"}
    out: dict[str, str] = {}
    for section in ("common", command):
        if not cp.has_section(section):
            continue
        for k, v in cp.items(section):
            key = k.replace("-", "_")
            # [common] may hold keys other commands use; the command section may not
            if key not in names:
                if section == command:
                    raise UsageError(f"unknown key {k!r} in [{command}] of {path}")
                continue
            out[key] = v
    return out


def resolve_options(command: str, args: argparse.Namespace, environ=None) -> dict:
    """Merge defaults, config file, ``SNR_SEED`` and flags into typed values."""
    environ = os.environ if environ is None else environ
    names = _COMMAND_OPTIONS[command]
    values = {n: _COMMAND_DEFAULTS.get(command, {}).get(n, _OPTIONS[n][1]) for n in names}
    raw: dict[str, object] = {}
    if args.config:
        file_vals = _read_config_file(args.config, command)
        raw.update({k: v for k, v in file_vals.items() if k in names})
        if args.out is None and "out" in file_vals:
            args.out = file_vals["out"]
    if "seed" in names and environ.get("SNR_SEED") not in (None, ""):
        raw["seed"] = environ["SNR_SEED"]
    for n in names:
        v = getattr(args, n, None)
        if v is not None:
            raw[n] = v
    for n, v in raw.items():
        conv = _OPTIONS[n][0]
        try:
            values[n] = conv(v)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"bad value for {n.replace('_', '-')}: {v!r}") from exc
    return values


# --- helpers ----------------------------------------------------------------


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, command: str, options: dict, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "options": options}
    if extra:
        doc.update(extra)
    (out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_field(opts: dict, scenario):
    if opts.get("model"):
        model, _ = load_checkpoint(opts["model"])
        if model.latent_shape != scenario.latent_shape:
            raise UsageError(f"model latent shape {model.latent_shape} != scenario {scenario.latent_shape}")
        return model
    try:
        return scenario.oracle()
    except InvalidArgument as exc:
        raise UsageError(f"{exc}; pass --model") from None


def _edit_config(opts: dict, seed: int) -> EditConfig:
    return EditConfig(
        lambda_struct=opts["lambda_struct"],
        lambda_stoch=opts["lambda_stoch"],
        num_steps=opts["steps"],
        t_max=opts["t_max"],
        seed=seed,
        noise_mode=opts.get("noise_mode", "resample_per_step"),
        record_trajectory=opts.get("record_trajectory", False),
    )


def _prior_config(opts: dict) -> PriorConfig:
    return PriorConfig(c_desc=opts["c_desc"], projection_seed=opts["projection_seed"])


def _seed_list(opts: dict) -> list[int]:
    if opts["seeds"] < 1:
        raise UsageError("--seeds must be >= 1")
    return list(range(opts["first_seed"], opts["first_seed"] + opts["seeds"]))


def _chunks(items: list, jobs: int) -> list[list]:
    jobs = max(1, min(jobs, len(items)))
    return [items[k::jobs] for k in range(jobs)]


def _map_seeds(fn, seeds: list[int], jobs: int, *args) -> dict[int, object]:
    """Run ``fn(seed_chunk, *args)`` (returning {seed: result}) serially or
    across worker processes; callers merge results in seed order."""
    if jobs <= 1:
        return fn(seeds, *args)
    merged: dict[int, object] = {}
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for part in pool.map(fn, _chunks(seeds, jobs), *[[a] * jobs for a in args]):
            merged.update(part)
    return merged


# --- commands ---------------------------------------------------------------


def cmd_gen_data(opts: dict, out: Path) -> int:
    sc = get_scenario(opts["scenario_name"])
    data = sc.generate(opts["seed"], opts["n"])
    if sc.name == "shapes16":
        # every sample must expose at least two structural regions
        for k, x in enumerate(data.samples):
            if len(segment_synthetic(x)) < 2:
                print(f"sample {k}: fewer than 2 regions", file=sys.stderr)
                return EXIT_CHECK
    data.save(out / "data")
    _write_manifest(out, "gen-data", opts, {"files": ["data.fgrid", "data.json"]})
    print(f"wrote {len(data)} {sc.name} samples to {out}")
    return EXIT_OK


def cmd_train(opts: dict, out: Path) -> int:
    sc = get_scenario(opts["scenario"])
    data = Dataset.load(opts["data"]) if opts["data"] else sc.generate(opts["seed"])
    cfg = TrainConfig(lr=opts["lr"], steps=opts["steps"], batch=opts["batch"], seed=opts["seed"],
                      momentum=opts["momentum"])
    state = None
    if opts["resume"]:
        model, state = load_checkpoint(opts["resume"])
        if state is None:
            raise UsageError(f"{opts['resume']} holds no optimizer state")
    else:
        model = MlpFlowModel(data.latent_shape, data.num_classes, tuple(opts["hidden"]), opts["time_dim"],
                             opts["cond_dim"], seed=opts["seed"])
    start = state.step if state is not None else 0
    try:
        model, losses, state = train(model, data, cfg, state)
    except TrainingFailed as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_CHECK
    save_checkpoint(out / "model.snrm", model, state)
    rows = [{"step": start + k, "loss": float(v)} for k, v in enumerate(losses)]
    (out / "loss.csv").write_text(rows_to_csv(rows, ["step", "loss"]) or "step,loss\n", encoding="utf-8")
    if losses:
        svg_line_plot(out / "loss.svg", {"loss": ([r["step"] for r in rows], losses)}, "training loss", "step")
    _write_manifest(out, "train", opts, {"files": ["model.snrm", "loss.csv"], "final_step": state.step})
    if losses:
        print(f"step {state.step}: loss {losses[0]:.4g} -> {losses[-1]:.4g}")
    return EXIT_OK


def cmd_edit(opts: dict, out: Path) -> int:
    sc = get_scenario(opts["scenario"])
    fld = _load_field(opts, sc)
    if opts["source"]:
        x = read_fgrid(opts["source"])
    else:
        x = sc.source(opts["source_seed"] if opts["source_seed"] is not None else opts["seed"])
    c_src = sc.c_src if opts["c_src"] is None else opts["c_src"]
    c_tar = sc.c_tar if opts["c_tar"] is None else opts["c_tar"]
    if opts["method"] == "snr":
        pcfg = _prior_config(opts)
        if opts["masks"]:
            prior = prior_from_regions(load_masks(opts["masks"]), x.shape, pcfg).latent
        else:
            prior = prior_from_image(x, x.shape, pcfg).latent
    elif opts["method"] == "flowedit":
        prior = None
    else:
        raise UsageError(f"unknown method {opts['method']!r}")
    try:
        run = edit(fld, x, c_src, c_tar, prior, _edit_config(opts, opts["seed"]), method=opts["method"])
    except IntegrationDiverged as exc:
        print(f"edit diverged at step {exc.step}", file=sys.stderr)
        return EXIT_CHECK
    run.save(out)
    render_latent(out / "source", x)
    render_latent(out / "output", run.output)
    if prior is not None:
        render_latent(out / "prior", (prior + 1.0) / 2.0)
    _write_manifest(out, "edit", opts, {"run": "run.json"})
    print(f"edited {sc.name} class {c_src} -> {c_tar}; result in {out}")
    return EXIT_OK


def _bound_seeds(seeds: list[int], opts: dict) -> dict[int, tuple[BoundReport, BoundReport]]:
    """Per seed: trajectory-bound report and random field-error checks."""
    sc = get_scenario(opts["scenario"])
    fld = sc.oracle()
    l_tar = opts["debug_l_scale"] * fld.lipschitz_sup(0.0, opts["t_max"], sc.c_tar)
    l_src = opts["debug_l_scale"] * fld.lipschitz_sup(0.0, opts["t_max"], sc.c_src)
    h, w = sc.latent_shape[1:]
    out = {}
    for seed in seeds:
        rng = RngStream(seed)
        z_src = sc.source(seed)
        phi = broadcast_channels(minmax_normalize(rng.uniform(0.0, 1.0, (h, w))), sc.latent_shape[0])
        eps = opts["lambda_struct"] * phi + opts["lambda_stoch"] * rng.normal(sc.latent_shape)
        traj = verify_trajectory_bound(fld, z_src, sc.c_src, sc.c_tar, eps, t_max=opts["t_max"],
                                       num_steps=opts["steps"], l_scale=opts["debug_l_scale"], seed=seed)
        field = BoundReport()
        for t in rng.uniform(0.0, opts["t_max"], opts["field_points"]):
            z = z_src + rng.normal(sc.latent_shape)
            z_true = oracle_source_trajectory(fld, z_src, float(t), sc.c_src)
            z_tilde = (1.0 - t) * z_src + t * eps
            rec = field_error_check(fld, z, float(t), z_true, z_tilde, z_src, sc.c_src, sc.c_tar, l_tar, l_src)
            rec.seed = seed
            field.records.append(rec)
        out[seed] = (traj, field)
    return out


def cmd_verify_bounds(opts: dict, out: Path) -> int:
    sc = get_scenario(opts["scenario"])
    try:
        sc.oracle()
    except InvalidArgument as exc:
        raise UsageError(str(exc)) from None
    seeds = _seed_list(opts)
    results = _map_seeds(_bound_seeds, seeds, opts["jobs"], opts)
    traj = BoundReport(margin=DISCRETIZATION_MARGIN)
    worst = BoundReport(margin=DISCRETIZATION_MARGIN)
    field = BoundReport()
    summary = []
    for s in seeds:
        tr, fe = results[s]
        traj.extend(tr)
        field.extend(fe)
        # one row per seed: the node with the least relative headroom
        worst.records.append(max(tr.records, key=lambda r: r.measured / r.bound if r.bound > 0 else 0.0))
        summary.append({"seed": s, "violations": tr.violations, "field_violations": fe.violations,
                        "min_slack": tr.min_slack, "final_deviation": tr.records[-1].measured,
                        "final_bound": tr.records[-1].bound})
    (out / "trajectory.csv").write_text(worst.to_csv(), encoding="utf-8")
    (out / "trajectory_full.csv").write_text(traj.to_csv(), encoding="utf-8")
    (out / "trajectory.json").write_text(traj.to_json(), encoding="utf-8")
    (out / "field.csv").write_text(field.to_csv(), encoding="utf-8")
    (out / "summary.csv").write_text(rows_to_csv(summary), encoding="utf-8")
    first = results[seeds[0]][0].records
    svg_line_plot(out / "bound.svg", {"deviation": ([opts["t_max"] - r.t for r in first], [r.measured for r in first]),
                                      "bound": ([opts["t_max"] - r.t for r in first], [r.bound for r in first])},
                  f"seed {seeds[0]}", "elapsed time")
    _write_manifest(out, "verify-bounds", opts, {"trajectory_violations": traj.violations,
                                                 "field_violations": field.violations})
    bad = traj.violations + field.violations
    print(f"{len(seeds)} seeds: {traj.violations} trajectory and {field.violations} field violations, "
          f"min slack {min(traj.min_slack, field.min_slack):.4g}")
    return EXIT_CHECK if bad else EXIT_OK


def _ablate_seeds(seeds: list[int], opts: dict) -> dict[int, list[dict]]:
    sc = get_scenario(opts["scenario"])
    fld = _load_field(opts, sc)
    means = sc.generate(0).class_means()
    variants = [v for v in opts["variants"].split(",") if v]
    cfg = _edit_config(opts, 0)
    out = {s: [] for s in seeds}
    for v in variants:
        for row in run_ablation(v, sc, fld, seeds, cfg, _prior_config(opts), means):
            out[row["seed"]].append(row)
    return out


def cmd_ablate(opts: dict, out: Path) -> int:
    variants = [v for v in opts["variants"].split(",") if v]
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown or not variants:
        raise UsageError(f"unknown variants {unknown}; known: {', '.join(VARIANTS)}")
    sc = get_scenario(opts["scenario"])
    _load_field(opts, sc)
    seeds = _seed_list(opts)
    results = _map_seeds(_ablate_seeds, seeds, opts["jobs"], opts)
    rows = [r for s in seeds for r in results[s]]
    cols = ["seed", "variant", *METRIC_FIELDS, "prior_fingerprint"]
    (out / "ablation.csv").write_text(rows_to_csv(rows, cols), encoding="utf-8")
    means = []
    for v in variants:
        sel = [r for r in rows if r["variant"] == v]
        means.append({"variant": v, **{k: float(np.mean([r[k] for r in sel])) for k in METRIC_FIELDS}})
    (out / "ablation_mean.csv").write_text(rows_to_csv(means, ["variant", *METRIC_FIELDS]), encoding="utf-8")
    xs = list(range(len(variants)))
    svg_line_plot(out / "ablation.svg", {k: (xs, [m[k] for m in means]) for k in ("ssim", "background_mse", "alignment")},
                  "variants: " + ", ".join(variants), "variant index")
    _write_manifest(out, "ablate", opts)
    for m in means:
        print(f"{m['variant']:>20}: " + " ".join(f"{k}={m[k]:.4g}" for k in METRIC_FIELDS))
    return EXIT_OK


def cmd_sweep(opts: dict, out: Path) -> int:
    sc = get_scenario(opts["scenario"])
    fld = _load_field(opts, sc)
    cfg = EditConfig(num_steps=opts["steps"], t_max=opts["t_max"])
    rows = sensitivity_sweep(opts["values"], sc, fld, _seed_list(opts), cfg, _prior_config(opts),
                             sc.generate(0).class_means())
    (out / "sweep.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    xs = [r["lambda_stoch"] for r in rows]
    svg_line_plot(out / "sweep.svg", {"ssim": (xs, [r["ssim"] for r in rows]),
                                      "alignment": (xs, [r["alignment"] for r in rows])},
                  "sensitivity to lambda_stoch", "lambda_stoch")
    _write_manifest(out, "sweep", opts)
    for r in rows:
        print(f"lambda_stoch={r['lambda_stoch']:.2f} ssim={r['ssim']:.4f} alignment={r['alignment']:.4f}")
    return EXIT_OK


def cmd_metrics(opts: dict, out: Path | None) -> int:
    if not opts["source"] or not opts["edited"]:
        raise UsageError("metrics needs --source and --edited")
    sc = get_scenario(opts["scenario"])
    a, b = read_fgrid(opts["source"]), read_fgrid(opts["edited"])
    if a.shape != sc.latent_shape:
        raise UsageError(f"image shape {a.shape} != scenario shape {sc.latent_shape}")
    target = sc.c_tar if opts["target_class"] is None else opts["target_class"]
    m = edit_metrics(a, b, sc.edit_mask(), target, sc.generate(0).class_means())
    text = json.dumps(m, indent=2, sort_keys=True)
    print(text)
    if out is not None:
        (out / "metrics.json").write_text(text + "\n", encoding="utf-8")
        _write_manifest(out, "metrics", opts)
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "edit": cmd_edit,
    "verify-bounds": cmd_verify_bounds,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "metrics": cmd_metrics,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        opts = resolve_options(args.command, args)
        if args.command == "gen-data":
            opts["scenario_name"] = args.scenario_name
            get_scenario(args.scenario_name)
        if args.out is None and args.command != "metrics":
            raise UsageError(f"{args.command} needs --out (flag or config key)")
        out = _out_dir(args.out) if args.out else None
        return _COMMANDS[args.command](opts, out)
    except (UsageError, InvalidArgument, InvalidInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
