"""Command-line front end: ``knowe {run,ablate,analyze,gen-data,export-features}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field, replace
from importlib import resources

import jsonschema
import numpy as np

from . import analysis
from .checkpoint import atomic_write, load_checkpoint, save_checkpoint
from .data import (
    LAYOUTS,
    LabeledDataset,
    SyntheticParams,
    build_hierarchy,
    export_feature_file,
    generate_synthetic,
    load_feature_file,
    make_session_stream,
)
from .embedding import OptimConfig
from .errors import ConfigError, KnoweError
from .protocol import MODES, PRESETS, Preset, RunFlags, run_experiment, with_epochs

FLAG_NAMES = ("contrastive_base", "freeze_embedding", "normalize_weights", "freeze_classifier")
TRUE_WORDS = {"1", "true", "yes", "on"}
FALSE_WORDS = {"0", "false", "no", "off"}
U64_MAX = 2**64 - 1


class ConfigProblem(Exception):
    """Configuration error carrying a ``source:line:`` anchor."""


def load_schema(name: str) -> dict:
    return json.loads(resources.files("knowe").joinpath("schemas", f"{name}.schema.json").read_text("utf-8"))


def locate(text: str, keys) -> int:
    """1-based line of the last key in ``keys``, following them in order through the text."""
    pos, line = 0, 1
    for k in keys:
        if not isinstance(k, str):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(k)).search(text, pos)
        if m is None:
            break
        pos = m.end()
        line = text.count("\n", 0, m.start()) + 1
    return line


@dataclass
class RunConfig:
    preset: Preset
    seed: int
    seeds: list
    out: str
    flags: RunFlags
    dataset: dict
    stream: dict
    analysis: dict = field(default_factory=dict)
    source: str = "<defaults>"
    text: str = ""

    def anchor(self, *keys) -> str:
        if not self.text:
            return f"{self.source}:1"
        return f"{self.source}:{locate(self.text, keys)}"


def _read_config(path: str | None) -> tuple[dict, str, str]:
    if path is None:
        return {}, "<defaults>", ""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigProblem(f"{path}:1: cannot read config: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigProblem(f"{path}:{e.lineno}: invalid JSON: {e.msg} (column {e.colno})") from None
    try:
        jsonschema.validate(raw, load_schema("config"))
    except jsonschema.ValidationError as e:
        keys = list(e.absolute_path)
        if e.validator == "additionalProperties" and isinstance(e.instance, dict):
            allowed = set(e.schema.get("properties", {}))
            extra = sorted(k for k in e.instance if k not in allowed)
            keys = keys + extra[:1]
        where = ".".join(str(k) for k in e.absolute_path) or "<root>"
        raise ConfigProblem(f"{path}:{locate(text, keys)}: {where}: {e.message}") from None
    return raw, path, text


def _parse_bool(word: str, key: str) -> bool:
    w = word.strip().lower()
    if w in TRUE_WORDS:
        return True
    if w in FALSE_WORDS:
        return False
    raise ConfigProblem(f"--flags:1: {key}: expected a boolean, got {word!r}")


def parse_flag_overrides(csv_text: str | None) -> dict:
    out = {}
    if not csv_text:
        return out
    for item in csv_text.split(","):
        item = item.strip()
        if not item:
            continue
        if "=" not in item:
            raise ConfigProblem(f"--flags:1: expected key=value, got {item!r}")
        key, value = (s.strip() for s in item.split("=", 1))
        if key == "mode":
            if value not in MODES:
                raise ConfigProblem(f"--flags:1: mode must be one of {', '.join(MODES)}, got {value!r}")
            out[key] = value
        elif key in FLAG_NAMES:
            out[key] = _parse_bool(value, key)
        else:
            raise ConfigProblem(f"--flags:1: unknown flag {key!r}")
    return out


def _opt(base: OptimConfig, over: dict) -> OptimConfig:
    return replace(base, **over) if over else base


def resolve_config(args, default_seeds: int = 1) -> RunConfig:
    """Merge preset defaults, the config file and command-line flags (in rising priority)."""
    raw, source, text = _read_config(args.config)
    cli_flags = parse_flag_overrides(getattr(args, "flags", None))
    preset_name = args.preset or raw.get("preset", "desk")
    preset = PRESETS[preset_name]
    optim = raw.get("optim", {})
    try:
        preset = replace(
            preset,
            base=_opt(preset.base, optim.get("base", {})),
            session=_opt(preset.session, optim.get("session", {})),
            lam=optim.get("lam", preset.lam),
        )
    except ConfigError as e:
        raise ConfigProblem(f"{source}:{locate(text, ['optim'])}: optim: {e}") from None

    seed = args.seed if args.seed is not None else raw.get("seed", 0)
    if not 0 <= seed <= U64_MAX:
        raise ConfigProblem(f"--seed:1: seed must lie in [0, 2^64), got {seed}")
    if args.seed is not None or "seeds" not in raw:
        seeds = [seed + i for i in range(default_seeds)]
    else:
        seeds = list(raw["seeds"])

    layout = LAYOUTS[raw.get("layout", "desk")]
    ds = {"kind": "synthetic", "R": layout.R, "fine_per_coarse": layout.fine_per_coarse}
    ds.update(raw.get("dataset", {}))
    if ds["kind"] == "features" and "path" not in ds:
        raise ConfigProblem(f"{source}:{locate(text, ['dataset', 'kind'])}: dataset: features need a path")
    stream = dict(C=layout.C, K=layout.K, H=layout.H, T=layout.T)
    stream.update(raw.get("stream", {}))

    file_flags = dict(raw.get("flags", {}))
    mode = cli_flags.pop("mode", file_flags.pop("mode", "knowe"))
    file_flags.update(cli_flags)
    flags = RunFlags.for_mode(mode, **file_flags)

    an = dict(eps=1.0, plasticity_trials=100, norm_epochs=3000, scheduled_columns=False)
    an.update(raw.get("analysis", {}))
    out = args.out or raw.get("out") or "knowe-out"
    return RunConfig(preset, seed, seeds, out, flags, ds, stream, an, source, text)


def build_dataset(cfg: RunConfig, seed: int) -> LabeledDataset:
    d = cfg.dataset
    if d["kind"] == "features":
        try:
            _, ds = load_feature_file(d["path"])
        except OSError as e:
            raise ConfigProblem(f"{cfg.anchor('dataset', 'path')}: dataset.path: {e.strerror}") from None
        return ds
    keys = ("input_dim", "coarse_sep", "fine_sep", "noise_sigma", "n_per_fine")
    try:
        params = SyntheticParams(**{k: d[k] for k in keys if k in d})
        h = build_hierarchy(d["R"], d["fine_per_coarse"])
        return generate_synthetic(h, params, seed)
    except ConfigError as e:
        raise ConfigProblem(f"{cfg.anchor('dataset')}: dataset: {e}") from None


def build_stream(cfg: RunConfig, seed: int):
    ds = build_dataset(cfg, seed)
    try:
        return make_session_stream(ds, seed=seed, **cfg.stream)
    except ConfigError as e:
        raise ConfigProblem(f"{cfg.anchor('stream')}: stream: {e}") from None


# --- output helpers ------------------------------------------------------------


def fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path: str, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    atomic_write(path, buf.getvalue().encode("utf-8"))


def write_json(path: str, obj, schema: str) -> None:
    jsonschema.validate(obj, load_schema(schema))
    atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode("utf-8"))


def _flags_dict(flags: RunFlags) -> dict:
    return {k: getattr(flags, k) for k in FLAG_NAMES}


# --- subcommands -------------------------------------------------------------------


def cmd_run(args) -> int:
    cfg = resolve_config(args)
    stream = build_stream(cfg, cfg.seed)
    os.makedirs(cfg.out, exist_ok=True)
    exp = run_experiment(stream, cfg.flags, cfg.preset, cfg.seed)
    s = exp.summary
    reports = exp.reports
    write_csv(
        os.path.join(cfg.out, "sessions.csv"),
        ["t", "A_c", "A_f", "A_t", "now_acc", "n_queries"],
        [(r.t, r.A_c, r.A_f, r.A_t, r.now_acc, r.n_queries) for r in reports],
    )
    for r in reports:
        present = sorted(set(np.flatnonzero(r.confusion.sum(axis=1))))
        write_csv(
            os.path.join(cfg.out, f"confusion_t{r.t}.csv"),
            ["true_column"] + [f"pred_{j}" for j in range(r.confusion.shape[1])],
            [[i, *r.confusion[i].tolist()] for i in present],
        )
    write_csv(
        os.path.join(cfg.out, "norms.csv"),
        ["t", "block", "frobenius_norm"],
        [(r.t, u, n) for r in reports for u, n in enumerate(r.block_norms)],
    )
    summary = dict(
        A_bar=s.A_bar,
        F=s.F,
        F_f={str(t): v for t, v in s.F_f.items()},
        F_c={str(t): v for t, v in s.F_c.items()},
        seed=cfg.seed,
        mode=cfg.flags.mode,
        flags=_flags_dict(cfg.flags),
        sessions=[
            dict(t=r.t, A_c=r.A_c, A_f=r.A_f, A_t=r.A_t, now_acc=r.now_acc, n_queries=r.n_queries,
                 block_norms=list(r.block_norms))
            for r in reports
        ],
    )
    write_json(os.path.join(cfg.out, "summary.json"), summary, "summary")
    save_checkpoint(os.path.join(cfg.out, "model.knwe"), exp.model)
    return 0


def cmd_ablate(args) -> int:
    cfg = resolve_config(args, default_seeds=5)
    streams = {s: build_stream(cfg, s) for s in cfg.seeds}
    os.makedirs(cfg.out, exist_ok=True)
    cells, table = analysis.ablation_grid(streams, cfg.preset, cfg.analysis["eps"])
    write_csv(
        os.path.join(cfg.out, "ablation.csv"),
        ["seed", "normalize_weights", "freeze_classifier", "freeze_embedding", "A_bar", "F"],
        [(c.seed, c.p, c.q, c.e, c.A_bar, c.F) for c in cells],
    )
    try:
        rho = analysis.rank_consistency(cells)
    except KnoweError:
        rho = None
    if rho is not None and np.isnan(rho):
        rho = None
    rows = [{k: row[k] for k in ("p", "q", "r", "expected_r", "agrees", "delta")} for row in table["rows"]]
    out = dict(eps=table["eps"], seeds=cfg.seeds, truth_table=rows, verdicts=table["verdicts"], rank_correlation=rho)
    write_json(os.path.join(cfg.out, "conjectures.json"), out, "conjectures")
    return 0


def cmd_analyze(args) -> int:
    cfg = resolve_config(args, default_seeds=10)
    an = cfg.analysis
    streams = {s: build_stream(cfg, s) for s in cfg.seeds}
    os.makedirs(cfg.out, exist_ok=True)

    rep = analysis.compare_variants(streams, cfg.preset, scheduled=an["scheduled_columns"])
    write_csv(
        os.path.join(cfg.out, "stability.csv"),
        ["variant", "normalize_weights", "freeze_classifier", "median_D", "skipped_probes", "n_seeds"],
        [
            (v, o["normalize_weights"], o["freeze_classifier"], rep.medians[v], rep.skipped[v], len(rep.seeds))
            for v, o in analysis.VARIANTS.items()
        ],
    )

    first = streams[cfg.seeds[0]]
    trials = analysis.plasticity_trials(
        an["plasticity_trials"], cfg.seed, cfg.preset.feature_dim, first.R, first.C, first.K, max(first.T, 1),
        cfg.preset.lam,
    )
    moving = [tr for tr in trials if not tr.stationary]
    descent = {}
    rows = []
    for lr in analysis.LR_GRID:
        frac = float(np.mean([tr.deltas[lr] < 0 for tr in moving])) if moving else None
        descent[repr(lr)] = frac
        rows.append((lr, len(trials), len(trials) - len(moving), frac))
    write_csv(os.path.join(cfg.out, "plasticity.csv"), ["lr", "trials", "stationary", "descent_fraction"], rows)
    pos_inner = float(np.mean([tr.inner > 0 or tr.stationary for tr in trials]))

    raw_flags = RunFlags(normalize_weights=False, freeze_classifier=False)
    preset = with_epochs(cfg.preset, session_epochs=an["norm_epochs"])
    traces, rows = [], []
    for s in cfg.seeds:
        exp = run_experiment(streams[s], raw_flags, preset, s)
        tr = analysis.weight_norm_trace(exp.summary.block_norms)
        traces.append(tr)
        grew = {b: g for _, b, g in tr.pairs}
        for i, (n, bad) in enumerate(zip(tr.norms, tr.outliers), start=1):
            rows.append((s, i, n, bad, grew.get(i)))
    write_csv(os.path.join(cfg.out, "norm_trace.csv"), ["seed", "block", "frobenius_norm", "outlier", "grew"], rows)

    def clean(x):
        return None if x is None or np.isnan(x) else float(x)

    summary = dict(
        seeds=cfg.seeds,
        stability=dict(
            medians={v: clean(m) for v, m in rep.medians.items()},
            chains=rep.chains,
            seed_ordering_fraction=float(np.mean(rep.seed_ordering())),
            scheduled_columns=an["scheduled_columns"],
        ),
        plasticity=dict(
            trials=len(trials),
            stationary=len(trials) - len(moving),
            descent_fraction=descent,
            positive_inner_fraction=pos_inner,
        ),
        norm_growth=dict(growth_fraction=analysis.pooled_growth(traces), session_epochs=an["norm_epochs"]),
    )
    write_json(os.path.join(cfg.out, "analysis.json"), summary, "analysis")
    return 0


def _feature_target(out: str, default_name: str) -> str:
    if out.endswith(os.sep) or os.path.isdir(out):
        os.makedirs(out, exist_ok=True)
        return os.path.join(out, default_name)
    parent = os.path.dirname(os.path.abspath(out))
    os.makedirs(parent, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    if cfg.dataset["kind"] != "synthetic":
        raise ConfigProblem(f"{cfg.anchor('dataset', 'kind')}: gen-data needs a synthetic dataset spec")
    ds = build_dataset(cfg, cfg.seed)
    export_feature_file(ds, _feature_target(cfg.out, "features.csv"))
    return 0


def cmd_export_features(args) -> int:
    cfg = resolve_config(args)
    model = load_checkpoint(args.checkpoint)
    ds = build_dataset(cfg, cfg.seed)
    F = model.net.features(ds.X)
    out = LabeledDataset(F, ds.coarse, ds.fine, ds.hierarchy)
    export_feature_file(out, _feature_target(cfg.out, "embedded.csv"))
    return 0


COMMANDS = {
    "run": cmd_run,
    "ablate": cmd_ablate,
    "analyze": cmd_analyze,
    "gen-data": cmd_gen_data,
    "export-features": cmd_export_features,
}


def _u64(text: str) -> int:
    try:
        v = int(text, 10)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError(f"seed must lie in [0, 2^64), got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knowe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=_u64, help="experiment seed (overrides the config)")
        sp.add_argument("--preset", choices=sorted(PRESETS), help="optimizer preset")
        sp.add_argument("--out", help="output directory (file path for gen-data / export-features)")
        sp.add_argument("--flags", help="comma-separated overrides, e.g. mode=ft_baseline,normalize_weights=false")
        if name == "export-features":
            sp.add_argument("--checkpoint", required=True, help="model checkpoint to embed with")
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        analysis.worker_count()
    except ConfigError as e:
        print(f"KNWE_THREADS:1: {e}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](args)
    except ConfigProblem as e:
        print(e, file=sys.stderr)
        return 2
    except (KnoweError, OSError, ValueError, ArithmeticError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
