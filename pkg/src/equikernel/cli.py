"""``equikernel`` command line: audits, gradient checks, toy training,
retrieval evaluation, accounting reports and activation export.

Exit codes: 0 pass, 1 failed assertion, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .accounting import count_params_flops
from .audit import GRAD_TOL, AuditRow, gradient_suite, reflect_rows, rotate_audit, scale_audit
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .core import no_tape
from .data import (GaitSequence, ManifestEntry, ParseError, apply_transform, load_entry, read_gseq, read_manifest,
                   synth_walker, toy_split, write_gseq, write_manifest)
from .metrics import RetrievalMetrics, retrieval_eval
from .model import Network
from .train import TrainSettings, embed, evaluate, train

log = logging.getLogger("equikernel")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
TTA_PROBABILITIES = (0.0, 0.25, 0.5, 0.75, 1.0)


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


# --- helpers ------------------------------------------------------------------

def _emit(text: str, out_dir: Path | None, name: str) -> None:
    sys.stdout.write(text)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text, encoding="utf-8")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v: float) -> str:
    return "" if isinstance(v, float) and math.isnan(v) else f"{v:.6g}"


def audit_csv(rows: list[AuditRow]) -> str:
    return _csv(["layer", "transform", "equivariance_error", "invariance_error", "threshold", "result", "note"],
                [[r.layer, r.transform, _fmt(r.equivariance_error), _fmt(r.invariance_error), _fmt(r.threshold),
                  "pass" if r.passed else "fail", r.note] for r in rows])


def metrics_row(condition: str, p: float, m: RetrievalMetrics) -> list[str]:
    return [condition, f"{p:g}", f"{m.rank1:.6f}", f"{m.rank5:.6f}", f"{m.mAP:.6f}", f"{m.mINP:.6f}"]


METRIC_HEADER = ["condition", "p", "rank1", "rank5", "map", "minp"]


def _parse_synthetic(spec: str) -> dict[str, str]:
    keys = {"identities": "data.identities", "seqs": "data.seqs_per_identity", "frames": "data.frames"}
    out = {}
    for item in spec.replace(",", " ").split():
        k, sep, v = item.partition("=")
        if not sep or k not in keys:
            raise UsageError(f"--synthetic expects identities=I seqs=S [frames=T], got {item!r}")
        out[keys[k]] = v
    return out


def build_network(run: RunConfig, seed: int, num_classes: int | None = None) -> Network:
    return Network(run.backbone(num_classes=num_classes), seed=seed)


def load_network(run: RunConfig, checkpoint: Path, seed: int) -> Network:
    """Rebuild the configured network and load ``checkpoint`` into it; the
    class count is taken from the stored classifier."""
    try:
        state = load_checkpoint(checkpoint)
    except OSError as e:
        raise UsageError(f"cannot read checkpoint: {e}") from None
    cls = state.get("head.classifier")
    net = build_network(run, seed, None if cls is None else int(cls.shape[-1]))
    try:
        net.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise UsageError(f"checkpoint does not match the config: {e}") from None
    return net.eval()


def train_settings(run: RunConfig) -> TrainSettings:
    v = run.values
    return TrainSettings(iterations=v["train.iterations"], lr=v["train.lr"], momentum=v["train.momentum"],
                         weight_decay=v["train.weight_decay"], milestones=v["train.milestones"],
                         gamma=v["train.gamma"], p=v["train.p"], k=v["train.k"], frames=v["train.frames"],
                         margin=v["train.margin"], beta=v["train.beta"], log_every=v["train.log_every"])


# --- commands -----------------------------------------------------------------

def cmd_check_equivariance(args, run: RunConfig) -> int:
    trials = args.trials or run["audit.trials"]
    cfg = run.backbone()
    if args.transform == "reflect":
        rows = reflect_rows(cfg, trials, args.seed, args.debug_break_equivariance)
    elif args.transform == "rotate":
        rows = rotate_audit(trials, args.seed)
    else:
        rows = scale_audit(trials, args.seed, widths=cfg.feature_widths)
    _emit(audit_csv(rows), args.out, f"equivariance_{args.transform}.csv")
    failed = [r.layer for r in rows if not r.passed]
    if failed:
        log.error("equivariance audit failed: %s", ", ".join(failed))
        return EXIT_FAIL
    return EXIT_OK


def cmd_grad_check(args, run: RunConfig) -> int:
    checks = gradient_suite(args.seed)
    rows = [[name, f"{err:.3e}", f"{GRAD_TOL:g}", "pass" if err <= GRAD_TOL else "fail"] for name, err in checks]
    _emit(_csv(["operator", "max_relative_error", "threshold", "result"], rows), args.out, "grad_check.csv")
    return EXIT_OK if all(err <= GRAD_TOL for _, err in checks) else EXIT_FAIL


def _synthetic_dataset(run: RunConfig, out: Path) -> tuple[list[GaitSequence], Path]:
    """Render the toy split to ``out/data`` with two manifests: transformed
    probes (``manifest.csv``) and their untransformed renders
    (``manifest_tta.csv``, for test-time augmentation sweeps)."""
    v = run.values
    split = toy_split(v["data.identities"], v["data.seqs_per_identity"], v["data.train_seqs"],
                      v["data.gallery_seqs"], v["data.frames"], v["data.probe_rotation_deg"], v["data.dilate_iters"])
    data = out / "data"
    data.mkdir(parents=True, exist_ok=True)

    def dump(seqs, role, tag):
        entries = []
        for i, s in enumerate(seqs):
            name = f"{role}_{tag}_{s.identity}_{i:03d}.gseq"
            write_gseq(data / name, s)
            entries.append(ManifestEntry(f"data/{name}", s.identity, s.condition, role))
        return entries

    train_e = dump(split.train, "train", "n")
    gallery_e = dump(split.gallery, "gallery", "n")
    write_manifest(out / "manifest.csv", train_e + gallery_e + dump(split.probes, "probe", "t"))
    write_manifest(out / "manifest_tta.csv", gallery_e + dump(split.clean_probes, "probe", "c"))
    return split.train, out / "manifest.csv"


def _load_role(entries: list[ManifestEntry], role: str, root: Path) -> list[GaitSequence]:
    return [load_entry(e, root) for e in entries if e.role == role]


def cmd_train_toy(args, run: RunConfig) -> int:
    out = args.out or Path("run")
    out.mkdir(parents=True, exist_ok=True)
    if args.synthetic:
        run = run.with_overrides(_parse_synthetic(args.synthetic))
    manifest = args.manifest or (Path(run["data.manifest"]) if run["data.manifest"] else None)
    if manifest is None:
        seqs, manifest = _synthetic_dataset(run, out)
    else:
        seqs = _load_role(read_manifest(manifest), "train", manifest.parent)
    if not seqs:
        raise UsageError("no training sequences")
    n_ids = len({s.identity for s in seqs})
    settings = train_settings(run)
    if n_ids < settings.p:
        raise UsageError(f"(P,K) sampling needs at least P={settings.p} identities, found {n_ids}")
    net = build_network(run, args.seed, n_ids)
    (out / "config.txt").write_text(run.render(), encoding="utf-8")
    with open(out / "train_log.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, ["iteration", "lr", "loss", "triplet", "ce", "active"], lineterminator="\n")
        w.writeheader()
        train(net, seqs, settings, seed=args.seed, on_log=w.writerow)
    save_checkpoint(out / "checkpoint.rrsg", net)
    log.info("wrote %s", out / "checkpoint.rrsg")
    entries = read_manifest(manifest)
    gallery, probes = _load_role(entries, "gallery", manifest.parent), _load_role(entries, "probe", manifest.parent)
    if gallery and probes:
        m = evaluate(net, gallery, probes)
        _emit(_csv(METRIC_HEADER, [metrics_row("all", 0.0, m)]), out, "eval.csv")
    return EXIT_OK


def tta_sweep(net: Network, gallery, probes, kind: str, seed: int, rotation_deg: float = 20.0,
              probabilities=TTA_PROBABILITIES) -> list[tuple[float, RetrievalMetrics]]:
    """One uniform draw per probe decides, for every p, whether that probe is
    transformed (draw < p), so the transformed sets are nested in p."""
    rng = np.random.default_rng(seed)
    draws = rng.random(len(probes))
    signs = np.where(rng.random(len(probes)) < 0.5, -1.0, 1.0)
    g = embed(net, gallery)
    gl = [s.identity for s in gallery]
    plain = embed(net, probes)
    transformed = embed(net, [apply_transform(s, kind, 1.0, param=sg * rotation_deg if kind == "rotate" else 0.0)
                              for s, sg in zip(probes, signs)])
    out = []
    for p in probabilities:
        pick = (draws < p)[:, None]
        out.append((p, retrieval_eval(np.where(pick, transformed, plain), [s.identity for s in probes], g, gl)))
    return out


def cmd_eval(args, run: RunConfig) -> int:
    if args.checkpoint is None or args.manifest is None:
        raise UsageError("eval needs --checkpoint and --manifest")
    net = load_network(run, args.checkpoint, args.seed)
    entries = read_manifest(args.manifest)
    gallery = _load_role(entries, "gallery", args.manifest.parent)
    probes = _load_role(entries, "probe", args.manifest.parent)
    if not gallery or not probes:
        raise UsageError("manifest needs gallery and probe entries")
    rows = []
    if args.tta:
        for p, m in tta_sweep(net, gallery, probes, args.tta, args.seed, run["data.probe_rotation_deg"]):
            rows.append(metrics_row(args.tta, p, m))
    else:
        g, pe = embed(net, gallery), embed(net, probes)
        gl, pl = [s.identity for s in gallery], np.array([s.identity for s in probes])
        rows.append(metrics_row("all", 0.0, retrieval_eval(pe, pl, g, gl)))
        conds = [s.condition for s in probes]
        for c in sorted(set(conds)):
            mask = np.array([x == c for x in conds])
            rows.append(metrics_row(c, 0.0, retrieval_eval(pe[mask], pl[mask], g, gl)))
    _emit(_csv(METRIC_HEADER, rows), args.out, "eval_tta.csv" if args.tta else "eval.csv")
    return EXIT_OK


def cmd_report(args, run: RunConfig) -> int:
    cfg = run.backbone()
    acc = count_params_flops(cfg, args.frames)
    regular = count_params_flops(replace(cfg, reel=False), args.frames) if cfg.reel else acc
    rows = [[r.module, r.params, r.macs] for r in acc.rows]
    rows.append(["backbone_total", acc.backbone_params, acc.backbone_macs])
    rows.append(["regular_conv_backbone_total", regular.backbone_params, regular.backbone_macs])
    _emit(_csv(["module", "params", "macs"], rows), args.out, "report.csv")
    return EXIT_OK


def cmd_forward(args, run: RunConfig) -> int:
    """Export per-module activation grids (channel L2 norm after temporal
    max) for one sequence as CSV files."""
    if args.checkpoint is not None:
        net = load_network(run, args.checkpoint, args.seed)
    else:
        net = build_network(run, args.seed).eval()
    seq = read_gseq(args.input) if args.input else synth_walker(args.identity, run["data.frames"])
    with no_tape():
        res = net(seq.frames[None], keep_stages=True)
    names = ["stem"] + [f"stage{i}" for i in range(1, len(res.stages))]
    maps = {n: t.data.max(axis=0) for n, t in zip(names, res.stages)}  # max over frames
    maps["f4"] = res.f4.data[0]
    if res.f4_rot is not None:
        maps["f4_rot"] = res.f4_rot.data[0]
    if res.scale is not None:
        maps["scale"] = res.scale.data[0]
    out = args.out or Path("activations")
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for name, m in maps.items():
        grid = np.sqrt((m.astype(np.float64) ** 2).sum(axis=0))
        np.savetxt(out / f"{name}.csv", grid, delimiter=",", fmt="%.6g")
        summary.append([name, "x".join(map(str, m.shape)), f"{grid.mean():.6g}", f"{grid.max():.6g}"])
    if res.theta is not None:
        summary.append(["theta_deg", "1", f"{float(res.theta.data.ravel()[0]):.6g}", ""])
        summary.append(["lambda", "1", f"{float(res.lam.data.ravel()[0]):.6g}", ""])
    _emit(_csv(["module", "shape", "mean_norm", "max_norm"], summary), out, "summary.csv")
    return EXIT_OK


# --- entry point --------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=argparse.SUPPRESS, help="key=value config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="unsigned 64-bit seed")
    common.add_argument("--out", type=Path, default=argparse.SUPPRESS, help="output directory")
    common.add_argument("--set", dest="overrides", action="append", default=argparse.SUPPRESS,
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    summary, exits = (part.strip() for part in __doc__.split("\n\n")[:2])
    p = argparse.ArgumentParser(prog="equikernel", parents=[common], epilog=exits,
                                description=summary.replace("\n", " ").replace("``", ""))
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("check-equivariance", parents=[common], help="randomised equivariance audit")
    s.add_argument("--transform", choices=("reflect", "rotate", "scale"), default="reflect")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--debug-break-equivariance", action="store_true",
                   help="disable the group swap so the audit must fail")
    s.set_defaults(func=cmd_check_equivariance)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient checks")
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("train-toy", parents=[common], help="train on a manifest or a synthetic set")
    s.add_argument("--synthetic", metavar="identities=I seqs=S", default=None)
    s.add_argument("--manifest", type=Path, default=None)
    s.set_defaults(func=cmd_train_toy)

    s = sub.add_parser("eval", parents=[common], help="retrieval metrics for a checkpoint")
    s.add_argument("--checkpoint", type=Path, default=None)
    s.add_argument("--manifest", type=Path, default=None)
    s.add_argument("--tta", choices=("reflect", "rotate"), default=None,
                   help="sweep this probe transform over p in {0, .25, .5, .75, 1}")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("report", parents=[common], help="parameter and MAC table")
    s.add_argument("--frames", type=int, default=30)
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("forward", parents=[common], help="export activation grids")
    s.add_argument("--checkpoint", type=Path, default=None)
    s.add_argument("--input", type=Path, default=None, help="GSEQ file; a synthetic walker otherwise")
    s.add_argument("--identity", type=int, default=0)
    s.set_defaults(func=cmd_forward)
    return p


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(item, "expected KEY=VALUE")
        out[key.strip()] = val.strip()
    return out


def main(argv=None) -> int:
    try:
        args = _parser().parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    args.config = getattr(args, "config", None)
    args.seed = getattr(args, "seed", 0)
    args.out = getattr(args, "out", None)
    overrides = getattr(args, "overrides", None)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    if log.level == logging.NOTSET:
        # basicConfig is a no-op when the host already configured logging
        log.setLevel(logging.INFO)
    if not 0 <= args.seed < 2 ** 64:
        log.error("--seed must be an unsigned 64-bit integer")
        return EXIT_USAGE
    try:
        run = load_config(args.config)
        if overrides:
            run = run.with_overrides(_overrides(overrides))
    except ConfigError as e:
        log.error("config error in %s", e)
        return EXIT_USAGE
    except OSError as e:
        log.error("cannot read config: %s", e)
        return EXIT_USAGE
    if args.out is not None:
        args.out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(args.out / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        logging.getLogger().addHandler(handler)
    log.info("equikernel %s command=%s config=%s seed=%d", __version__, args.command, run.digest, args.seed)
    try:
        return args.func(args, run)
    except ConfigError as e:
        log.error("config error in %s", e)
        return EXIT_USAGE
    except (UsageError, ParseError, ValueError) as e:
        log.error("%s", e)
        return EXIT_USAGE
    finally:
        for h in list(logging.getLogger().handlers):
            if isinstance(h, logging.FileHandler):
                logging.getLogger().removeHandler(h)
                h.close()


if __name__ == "__main__":
    sys.exit(main())
