"""The ``cad`` command line.

Failures print one line to stderr of the form ``error: <category>: <message>``
and exit with the category's code, so scripts can branch on either.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, parameter_table, read_index, save_checkpoint
from .config import ConfigError, RunConfig, dump_config, load_config, with_seed
from .infotheory import run_identity_suite
from .model import ABLATION_FLAGS, build_model
from .synthgen import FormatVersionError, build_dataset, load_clip, load_manifest
from .training import (REPORT_VERSION, EvalReport, Protocol, SplitPlan, TrainingDiverged,
                       ablation_sweep, ablation_table, evaluate, load_arrays, make_split, train)

log = logging.getLogger("cad")

EXIT_CODES = {
    "verify": 1,
    "argument": 2,
    "config": 3,
    "not_found": 4,
    "format": 5,
    "io": 6,
    "diverged": 7,
    "internal": 70,
}
IDENTITY_TOLERANCE = 1e-9


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------------------
# helpers


def _load_run_config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        with_seed(cfg, args.seed)
    if getattr(args, "out", None):
        cfg.out = str(args.out)
    return cfg


def _emit(args, payload: dict, text: str):
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True, default=str))
    else:
        print(text)


def _write_json(path: Path, payload: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _split_for(args, cfg: RunConfig, manifest) -> SplitPlan:
    protocol = Protocol.parse(args.protocol or cfg.eval.protocol)
    held = args.held_out or cfg.eval.held_out
    if protocol is Protocol.INTRA_70_30 and held:
        raise CliError("argument", "--held-out only applies to --protocol loco")
    return make_split(manifest, protocol, cfg.eval.split_seed, held, cfg.eval.train_fraction)


def _summarise(reports: list[EvalReport]) -> dict:
    """Mean and range of every metric across repeats."""
    out = {}
    for row in reports[0].rows:
        out[row] = {}
        for key in ("acc", "auc", "ap"):
            vals = [r.rows[row].get(key) for r in reports]
            if any(v is None for v in vals):
                out[row][key] = None
                continue
            out[row][key] = {"mean": float(np.mean(vals)), "min": float(min(vals)), "max": float(max(vals))}
    return out


def _summary_text(summary: dict, n: int) -> str:
    lines = [f"mean over {n} run(s), [min, max]:", f"{'subset':<16}{'AUC':>9}{'range':>18}{'AP':>9}"]
    for row, m in summary.items():
        auc, ap = m["auc"], m["ap"]
        if auc is None:
            lines.append(f"{row:<16}{'N/A':>9}")
            continue
        lines.append(f"{row:<16}{auc['mean']:9.2f}   [{auc['min']:6.2f},{auc['max']:6.2f}]"
                     f"{ap['mean'] if ap else float('nan'):9.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    cfg = _load_run_config(args)
    if args.n_clips is not None:
        cfg.gen.n_clips = args.n_clips
    out = Path(args.out) if args.out else Path(cfg.out) / "data"
    manifest = build_dataset(cfg.gen, out)
    counts: dict[str, int] = {}
    for e in manifest.entries:
        counts[e.label.category.value] = counts.get(e.label.category.value, 0) + 1
    payload = {"manifest": str(out / "manifest.json"), "n_clips": len(manifest), "counts": counts}
    text = f"wrote {len(manifest)} clips to {out}\n" + "\n".join(f"  {k:<14}{v:>5}" for k, v in counts.items())
    _emit(args, payload, text)
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    repeats = args.repeats if args.repeats is not None else cfg.eval.repeats
    if repeats < 1:
        raise CliError("argument", "--repeats must be at least 1")
    manifest = load_manifest(args.manifest)
    split = _split_for(args, cfg, manifest)
    data = load_arrays(manifest)
    out = Path(cfg.out)
    provenance = {**cfg.to_json(), "manifest": str(Path(args.manifest).resolve())}

    reports, curves = [], []
    for k in range(repeats):
        tcfg = dataclasses.replace(cfg.train, seed=cfg.train.seed + k)
        model = build_model(cfg.model, tcfg.seed)
        name = "model" if k == 0 else f"model-r{k}"
        extra = {"run_config": provenance, "split": split.to_json(), "train_seed": tcfg.seed}
        try:
            result = train(model, data.subset(split.train_ids), tcfg)
        except TrainingDiverged as exc:
            save_checkpoint(model, out / name, {**extra, "diverged_epoch": exc.epoch, "curve": exc.curve})
            raise CliError("diverged", f"{exc} (checkpoint {out / name}.json)") from None
        save_checkpoint(model, out / name, {**extra, "curve": result.curve})
        reports.append(evaluate(model, data, split, provenance))
        curves.append(result.curve)
        log.info("repeat %d/%d done in %.1fs", k + 1, repeats, result.seconds)

    summary = _summarise(reports)
    payload = {"format_version": REPORT_VERSION, "repeats": repeats, "summary": summary,
               "reports": [r.to_json() for r in reports], "curves": curves, "checkpoint": str(out / "model.json")}
    _write_json(out / "report.json", payload)
    _write_json(out / "split.json", split.to_json())
    text = reports[0].to_text() + ("\n\n" + _summary_text(summary, repeats) if repeats > 1 else "")
    _emit(args, payload, text)
    return 0


def cmd_eval(args) -> int:
    model, index = load_checkpoint(args.ckpt)
    extra = index.get("extra", {})
    manifest_path = args.manifest or extra.get("run_config", {}).get("manifest")
    if not manifest_path:
        raise CliError("argument", "no --manifest given and the checkpoint does not record one")
    manifest = load_manifest(manifest_path)
    if args.protocol:
        cfg = _load_run_config(args)
        split = _split_for(args, cfg, manifest)
    elif "split" in extra:
        split = SplitPlan.from_json(extra["split"])
    else:
        raise CliError("argument", "checkpoint has no stored split; pass --protocol")
    known = {e.clip_id for e in manifest.entries}
    missing = [i for i in split.test_ids if i not in known]
    if missing:
        raise CliError("not_found", f"{len(missing)} test clips absent from the manifest, e.g. {missing[0]}")
    data = load_arrays(manifest, split.test_ids)
    report = evaluate(model, data, split, extra.get("run_config", {}))
    if args.out:
        _write_json(Path(args.out), report.to_json())
    _emit(args, report.to_json(), report.to_text())
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    variants = [f.strip() for f in args.flags.split(",") if f.strip()]
    bad = sorted(set(variants) - ABLATION_FLAGS)
    if bad:
        raise CliError("argument", f"unknown ablation flag(s) {bad}; known: {sorted(ABLATION_FLAGS)}")
    manifest = load_manifest(args.manifest)
    split = _split_for(args, cfg, manifest)
    data = load_arrays(manifest)
    rows = ablation_sweep(cfg.model, cfg.train, data, split, variants, cfg.to_json())
    payload = {"format_version": REPORT_VERSION, "split": split.to_json(), "rows": rows}
    _write_json(Path(cfg.out) / "ablation.json", payload)
    _emit(args, payload, ablation_table(rows))
    return 0


def cmd_info_verify(args) -> int:
    seed = args.seed if args.seed is not None else 0
    res = run_identity_suite(seed=seed, trials=args.trials, max_support=args.max_support)
    xor = res.pop("xor_interaction_bits")
    ok = all(v <= IDENTITY_TOLERANCE for v in res.values()) and xor == -1.0
    payload = {"trials": args.trials, "seed": seed, "tolerance": IDENTITY_TOLERANCE,
               "max_residuals": res, "xor_interaction_bits": xor, "passed": ok}
    text = "\n".join([f"{k:<24}{v:.3e}" for k, v in res.items()]
                     + [f"{'xor interaction (bits)':<24}{xor:+.1f}", "PASS" if ok else "FAIL"])
    _emit(args, payload, text)
    if not ok:
        raise CliError("verify", "identity residual above tolerance")
    return 0


def _model_and_manifest(args):
    model, index = load_checkpoint(args.ckpt)
    manifest_path = args.manifest or index.get("extra", {}).get("run_config", {}).get("manifest")
    if not manifest_path:
        raise CliError("argument", "no --manifest given and the checkpoint does not record one")
    return model, index, load_manifest(manifest_path)


def cmd_export_attention(args) -> int:
    from .export import export_attention

    model, _, manifest = _model_and_manifest(args)
    clip = load_clip(manifest, args.clip)
    out = Path(args.out) if args.out else Path("attention")
    files = export_attention(model, clip, out)
    payload = {"clip_id": clip.clip_id, "out": str(out), "files": files}
    text = (f"{clip.clip_id} ({clip.label.category.value}): {len(files['specific'])} specific + "
            f"{len(files['shared'])} shared heatmaps, raw weights in {out / files['json'][0]}")
    _emit(args, payload, text)
    return 0


def cmd_export_embeddings(args) -> int:
    from .export import export_embeddings

    model, _, manifest = _model_and_manifest(args)
    data = load_arrays(manifest)
    out = Path(args.out) if args.out else Path("embeddings.csv")
    path = export_embeddings(model, data, out)
    payload = {"path": str(path), "rows": len(data), "dim": 4 * model.cfg.dim}
    _emit(args, payload, f"wrote {len(data)} embeddings of dimension {4 * model.cfg.dim} to {path}")
    return 0


def cmd_inspect(args) -> int:
    if not args.ckpt and not args.manifest and not args.config:
        raise CliError("argument", "inspect needs --ckpt, --manifest or --config")
    payload, lines = {}, []
    if args.ckpt:
        index = read_index(args.ckpt)
        table = parameter_table(index)
        payload["parameters"] = table
        payload["model_config"] = index["model_config"]
        lines.append(f"{'group':<12}{'count':>10}")
        lines += [f"{k:<12}{v:>10}" for k, v in table.items()]
    if args.manifest:
        manifest = load_manifest(args.manifest)
        counts: dict[str, int] = {}
        for e in manifest.entries:
            counts[e.label.category.value] = counts.get(e.label.category.value, 0) + 1
        payload["manifest"] = {"n_clips": len(manifest), "counts": counts}
        lines.append(f"manifest: {len(manifest)} clips")
        lines += [f"  {k:<14}{v:>5}" for k, v in counts.items()]
    if args.config:
        cfg = _load_run_config(args)
        payload["config"] = cfg.to_json()
        lines.append(dump_config(cfg).rstrip())
    _emit(args, payload, "\n".join(lines))
    return 0


# ---------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser, config: bool = True):
    p.add_argument("--seed", type=int, default=None, help="master seed; overrides every section seed")
    p.add_argument("--json", action="store_true", help="print the JSON report instead of the text table")
    p.add_argument("--out", default=None, help="output path")
    if config:
        p.add_argument("--config", default=None, help="YAML run configuration")


def _protocol_args(p: argparse.ArgumentParser):
    p.add_argument("--protocol", choices=["intra", "loco"], default=None)
    p.add_argument("--held-out", default=None, help="category held out under --protocol loco")


class _Parser(argparse.ArgumentParser):
    """argparse with the same one-line error format as everything else."""

    def error(self, message):
        print(f"error: argument: {message}", file=sys.stderr)
        sys.exit(EXIT_CODES["argument"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cad", description="Synthetic audio-visual deepfake detection.")
    parser.add_argument("--version", action="version", version=f"cad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--n-clips", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train and evaluate on a split")
    _common(p)
    p.add_argument("--manifest", required=True)
    _protocol_args(p)
    p.add_argument("--repeats", type=int, default=None, help="training seeds to average (default from config)")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", default=None)
    _protocol_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="full model against single-flag ablations")
    _common(p)
    p.add_argument("--manifest", required=True)
    _protocol_args(p)
    p.add_argument("--flags", default="no_alignment,no_distillation,video_only")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("info", help="information-theory checks")
    info = p.add_subparsers(dest="action", required=True, metavar="action")
    v = info.add_parser("verify", help="run the identity suite on random joints")
    _common(v, config=False)
    v.add_argument("--trials", type=int, default=100)
    v.add_argument("--max-support", type=int, default=4)
    v.set_defaults(func=cmd_info_verify)

    p = sub.add_parser("export-attention", help="per-frame heatmaps for one clip")
    _common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--clip", required=True)
    p.set_defaults(func=cmd_export_attention)

    p = sub.add_parser("export-embeddings", help="integrated embeddings as CSV")
    _common(p, config=False)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("inspect", help="parameter counts, manifest summary or resolved config")
    _common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_inspect)
    return parser


def _categorise(exc: BaseException) -> str:
    if isinstance(exc, CliError):
        return exc.category
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, FormatVersionError):
        return "format"
    if isinstance(exc, (FileNotFoundError, KeyError)):
        return "not_found"
    if isinstance(exc, OSError):
        return "io"
    if isinstance(exc, (ValueError, TypeError)):
        return "argument"
    return "internal"


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to one line and an exit code
        category = _categorise(exc)
        message = str(exc.args[0]) if isinstance(exc, KeyError) and exc.args else str(exc)
        print(f"error: {category}: {' '.join(message.split())}", file=sys.stderr)
        if args.verbose:
            log.exception("details")
        return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
