"""Command-line entry point: ``ufem <command> ...``.

Every command writes into a run directory (``--run-dir``, else
``$UFEM_RUN_ROOT/<command>``, else ``./runs/<command>``) containing the
resolved ``config.yaml`` and its artifacts. Wall-clock times go to
``run.log`` only, so everything else is reproducible byte for byte.
Failures print a single ``error: <kind>: <message>`` line and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import dcp, synth
from .backbone import BackboneError, load_backbone
from .config import ConfigError, RunConfig, load_config
from .data import (DataError, DatasetManifest, DegradationSpec, build_manifest, degrade, load_image,
                   save_image)
from .runtime import (BackboneRecipe, CompositionError, ablation_report, compose_ufem,
                      evaluate_classification, load_checkpoint, train_backbone)
from .stage1 import Stage1Checkpoint, train_stage1
from .stage2 import Stage2Checkpoint, train_stage2
from .tensorio import ContainerError
from .training import TrainingError

log = logging.getLogger("ufem")

RUN_ROOT_ENV = "UFEM_RUN_ROOT"


class DependencyError(RuntimeError):
    """An upstream artifact required by the command is missing."""


# --------------------------------------------------------------------------- helpers

def _run_dir(args) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        d = Path(os.environ.get(RUN_ROOT_ENV, "runs")) / args.command
    d.mkdir(parents=True, exist_ok=True)
    return d


def _config(args) -> RunConfig:
    return load_config(args.config, args.set)


def _require(path, what: str) -> Path:
    if path is None:
        raise DependencyError(f"{what} is required")
    p = Path(path)
    if not p.exists():
        raise DependencyError(f"{what} not found: {p}")
    return p


def _manifest(path, what: str) -> DatasetManifest:
    return DatasetManifest.read(_require(path, what))


def _backbone(cfg: RunConfig):
    b = cfg.backbone
    return load_backbone(b.architecture_id, b.weights, b.input_resolution, b.class_count)


def _eval_spec(cfg: RunConfig) -> DegradationSpec | None:
    e = cfg.eval
    return None if e.kind in (None, "none") else DegradationSpec(e.kind, e.severity, e.seed)


def _echo(run_dir: Path, cfg: RunConfig, extra: dict | None = None):
    cfg.save(run_dir / "config.yaml")
    if extra:
        (run_dir / "inputs.json").write_text(json.dumps(extra, indent=1, sort_keys=True) + "\n")


def _timing(run_dir: Path, command: str, seconds: float):
    with open(run_dir / "run.log", "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {command} {seconds:.1f}s\n")


# --------------------------------------------------------------------------- commands

def cmd_synth(args):
    root = synth.write_tree(args.out, args.n_per_class, args.seed)
    print(root)


def cmd_manifest(args):
    spec = DegradationSpec(args.kind, args.severity, args.seed) if args.kind else None
    m = build_manifest(_require(args.root, "image root"), args.domain, spec, rendered=False)
    out = Path(args.out)
    m.save(out)
    print(f"{out} ({len(m)} images, {m.skipped} skipped)")


def cmd_degrade(args):
    src = _require(args.input, "input tree")
    spec = DegradationSpec(args.kind, args.severity, args.seed)
    m = build_manifest(src, args.domain, spec, rendered=True)
    out = Path(args.out)
    if out.resolve() == src.resolve():
        raise DataError("output tree must differ from the input tree")
    lines, entries = [], []
    for e in m.entries:
        rel = Path(e.path).with_suffix(".png").as_posix()
        save_image(out / rel, degrade(load_image(m.resolve(e)), e.degradation))
        lines.append(f"{rel} {e.label}")
        entries.append(type(e)(**{**e.__dict__, "path": rel}))
    (out / "labels.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    DatasetManifest(entries, out).save(out / "manifest.jsonl")
    print(f"{out} ({len(entries)} images)")


def cmd_train_backbone(args):
    cfg = _config(args)
    run_dir = _run_dir(args)
    train = _manifest(args.train, "training manifest")
    b = cfg.backbone
    recipe = BackboneRecipe(b.architecture_id, b.train_epochs, b.train_batch, b.train_lr, b.train_seed)
    handle = train_backbone(train.load(), train.labels, recipe,
                            log=lambda e, l: log.info("epoch %d loss %.4f", e + 1, l))
    out = Path(args.out) if args.out else run_dir / "backbone.ufnt"
    handle.save(out, meta={"recipe": recipe.__dict__, "train_manifest": train.digest()})
    _echo(run_dir, cfg, {"train": train.digest()})
    print(out)


def cmd_dcp_report(args):
    cfg = _config(args)
    run_dir = _run_dir(args)
    handle = _backbone(cfg)
    sets = {}
    for item in args.images:
        name, _, path = item.partition("=")
        if not path:
            raise ConfigError(f"--images expects name=manifest, got {item!r}")
        sets[name] = _manifest(path, f"manifest for {name}").load()
    tap = cfg.backbone.enhancement_tap or handle.default_insertion_tap().name
    report = dcp.dcp_report(handle, tap, sets, seed=args.seed, embed=not args.no_embed)
    report.save(run_dir / "dcp_report.json")
    if args.plot:
        dcp.plot_embedding(report, run_dir / "dcp_tsne.png")
    _echo(run_dir, cfg, {"images": args.images, "seed": args.seed})
    print(report.to_json())


def cmd_train_stage1(args):
    cfg = _config(args)
    run_dir = _run_dir(args)
    clear = _manifest(args.clear, "clear manifest")
    degraded = _manifest(args.degraded, "degraded manifest")
    handle = _backbone(cfg)
    ck = train_stage1(cfg.stage1, clear, degraded, handle, cfg.backbone.enhancement_tap,
                      log_path=run_dir / "stage1_losses.jsonl", checkpoint_dir=run_dir)
    ck.save(run_dir / "stage1.ufnt")
    _echo(run_dir, cfg, {"clear": clear.digest(), "degraded": degraded.digest()})
    print(run_dir / "stage1.ufnt")


def cmd_train_stage2(args):
    cfg = _config(args)
    s1_path = _require(args.stage1, "stage-1 checkpoint (--stage1)")
    run_dir = _run_dir(args)
    clear = _manifest(args.clear, "clear manifest")
    degraded = _manifest(args.degraded, "degraded manifest")
    handle = _backbone(cfg)
    s1 = Stage1Checkpoint.load(s1_path)
    ck = train_stage2(cfg.stage2, clear, degraded, handle, s1.g_d2c, s1.enhancement_tap,
                      log_path=run_dir / "stage2_losses.jsonl", checkpoint_dir=run_dir)
    ck.save(run_dir / "stage2.ufnt")
    _echo(run_dir, cfg, {"clear": clear.digest(), "degraded": degraded.digest(), "stage1": s1.digest()})
    print(run_dir / "stage2.ufnt")


def cmd_compose(args):
    cfg = _config(args)
    s1 = Stage1Checkpoint.load(_require(args.stage1, "stage-1 checkpoint (--stage1)"))
    s2 = Stage2Checkpoint.load(_require(args.stage2, "stage-2 checkpoint (--stage2)"))
    run_dir = _run_dir(args)
    ufem = compose_ufem(s1, s2, {"stage1_digest": s1.digest(), "stage2_digest": s2.digest()})
    out = Path(args.out) if args.out else run_dir / "ufem.ufnt"
    ufem.save(out)
    _echo(run_dir, cfg)
    print(out)


def cmd_eval(args):
    cfg = _config(args)
    m = _manifest(args.manifest, "evaluation manifest")
    ufem = load_checkpoint(_require(args.ufem, "UFEM checkpoint (--ufem)")) if args.ufem else None
    run_dir = _run_dir(args)
    handle = _backbone(cfg)
    images, labels = m.load(), m.labels
    if args.severities:
        curve = {}
        for sev in args.severities:
            spec = DegradationSpec(cfg.eval.kind, sev, cfg.eval.seed)
            base = evaluate_classification(handle, None, images, labels, spec, cfg.eval.batch)
            row = {"baseline": base.top1}
            if ufem is not None:
                row["ufem"] = evaluate_classification(handle, ufem, images, labels, spec, cfg.eval.batch).top1
            curve[sev] = row
        (run_dir / "severity_curve.json").write_text(json.dumps(curve, indent=1) + "\n")
        if args.plot:
            _plot_curve(curve, cfg.eval.kind, run_dir / "severity_curve.png")
        print(json.dumps(curve, indent=1))
    else:
        rep = evaluate_classification(handle, ufem, images, labels, _eval_spec(cfg), cfg.eval.batch)
        rep.save(run_dir / ("eval_ufem.json" if ufem else "eval_baseline.json"))
        print(rep.to_json())
    _echo(run_dir, cfg, {"manifest": m.digest(), "ufem": ufem.digest() if ufem else None})


def cmd_ablate(args):
    cfg = _config(args)
    m = _manifest(args.manifest, "evaluation manifest")
    s1 = Stage1Checkpoint.load(_require(args.stage1, "stage-1 checkpoint (--stage1)"))
    s2 = Stage2Checkpoint.load(_require(args.stage2, "stage-2 checkpoint (--stage2)"))
    run_dir = _run_dir(args)
    handle = _backbone(cfg)
    table = ablation_report(handle, m.load(), s1, s2, m.labels, _eval_spec(cfg))
    (run_dir / "ablation.tsv").write_text(table.to_text())
    (run_dir / "ablation.json").write_text(table.to_json() + "\n")
    _echo(run_dir, cfg, {"manifest": m.digest(), "stage1": s1.digest(), "stage2": s2.digest()})
    print(table.to_text(), end="")


def _plot_curve(curve: dict, kind: str, path: Path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    sev = sorted(curve)
    fig, ax = plt.subplots(figsize=(4, 3))
    for key in ("baseline", "ufem"):
        if key in curve[sev[0]]:
            ax.plot(sev, [100 * curve[s][key] for s in sev], marker="o", label=key)
    ax.set_xlabel(f"{kind} severity")
    ax.set_ylabel("top-1 (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ufem", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, run=True, config=True):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        if config:
            sp.add_argument("--config", help="YAML run configuration")
            sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                            help="override a config value (repeatable)")
        if run:
            sp.add_argument("--run-dir", help=f"output directory (default ${RUN_ROOT_ENV}/<command>)")
        return sp

    sp = add("synth", cmd_synth, run=False, config=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("manifest", cmd_manifest, run=False, config=False)
    sp.add_argument("--root", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--domain", default="clear")
    sp.add_argument("--kind", choices=("fog", "motion_blur", "low_light"))
    sp.add_argument("--severity", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)

    sp = add("degrade", cmd_degrade, run=False, config=False)
    sp.add_argument("--kind", required=True, choices=("fog", "motion_blur", "low_light"))
    sp.add_argument("--severity", type=int, required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--domain", default="degraded")

    sp = add("train-backbone", cmd_train_backbone)
    sp.add_argument("--train", required=True, help="clean training manifest")
    sp.add_argument("--out")

    sp = add("dcp-report", cmd_dcp_report)
    sp.add_argument("--images", action="append", required=True, metavar="NAME=MANIFEST")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--no-embed", action="store_true")
    sp.add_argument("--plot", action="store_true")

    for name, fn in (("train-stage1", cmd_train_stage1), ("train-stage2", cmd_train_stage2)):
        sp = add(name, fn)
        sp.add_argument("--clear", required=True)
        sp.add_argument("--degraded", required=True)
        if name == "train-stage2":
            sp.add_argument("--stage1", help="stage-1 checkpoint")

    sp = add("compose", cmd_compose)
    sp.add_argument("--stage1")
    sp.add_argument("--stage2")
    sp.add_argument("--out")

    sp = add("eval", cmd_eval)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--ufem")
    sp.add_argument("--severities", type=int, nargs="+")
    sp.add_argument("--plot", action="store_true")

    sp = add("ablate", cmd_ablate)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--stage1")
    sp.add_argument("--stage2")
    return p


ERRORS = (ConfigError, DependencyError, DataError, BackboneError, ContainerError, CompositionError,
          TrainingError, FileNotFoundError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    t = time.time()
    try:
        args.fn(args)
    except ERRORS as e:
        msg = str(e).replace("\n", " ")
        print(f"error: {type(e).__name__}: {msg}", file=sys.stderr)
        return 2 if isinstance(e, ConfigError) else 1
    if hasattr(args, "run_dir"):
        _timing(_run_dir(args), args.command, time.time() - t)
    return 0


if __name__ == "__main__":
    sys.exit(main())
