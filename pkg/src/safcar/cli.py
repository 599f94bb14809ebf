"""Command-line entry point.

Exit codes: 0 success, 1 usage/config error, 2 data or format error,
3 contract violation (failed invariant, gradient check, non-finite values).
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data.dataset import ClipDataset
from .data.splits import SplitSpec, make_compositional_split, make_fewshot_split
from .data.synth import NOUNS, VERBS
from .errors import ConfigError, ContractError, DataError, SafcarError
from .gradcheck import TOLERANCE, run_suite
from .model import TOPOLOGIES, FusionTopology, Model, ModelConfig
from .si import VARIANTS, SIVariantConfig
from .train import MetricsReport, TrainSchedule, evaluate, fewshot_finetune, train
from .vi import VIConfig

COMMANDS = ("gen", "train", "eval", "fewshot", "gradcheck", "ablate", "export", "replay")

DEFAULTS = {
    "data": "data",
    "out": "runs/latest",
    "seed": 0,
    "topology": "late",
    "si_variant": "v1",
    "preset": "toy",
    "epochs": None,
    "lr": None,
    "batch": None,
    "k": 10,
    "verbs": 8,
    "nouns": 12,
    "seeds": 20,
    "dims": [16, 64, 64],
    "split": "compositional",
    "checkpoint": None,
    "finetune_epochs": 20,
    "finetune_lr": 0.01,
    "topologies": list(TOPOLOGIES),
    "variants": list(VARIANTS),
    "parallel": 1,
    "metrics": None,
    "format": "csv",
}


class UsageError(SafcarError):
    exit_code = 1


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    git: str
    started: str
    finished: str | None = None
    outputs: dict = field(default_factory=dict)

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(asdict(self), indent=1))

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            return cls(**json.loads(Path(path).read_text()))
        except (OSError, ValueError, TypeError) as e:
            raise DataError(f"cannot read run manifest {path}: {e}") from e


def git_describe() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True,
            text=True,
            cwd=Path(__file__).resolve().parent,
            timeout=10,
        )
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="JSON file of option values (flags override it)")
    g.add_argument("--data", help="dataset root directory")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--topology", choices=TOPOLOGIES)
    g.add_argument("--si-variant", dest="si_variant", choices=VARIANTS)
    g.add_argument("--epochs", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch", type=int)
    g.add_argument("--k", type=int, help="examples per novel verb (few-shot)")
    g.add_argument("--preset", choices=("toy", "paper"))
    g.add_argument("--split", help="split name under <data>/splits (compositional or fewshot)")

    p = _Parser(prog="safcar", description="Two-pathway compositional action recognition on synthetic clips.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("gen", parents=[common], help="render a dataset and its splits")
    gen.add_argument("--verbs", type=int)
    gen.add_argument("--nouns", type=int)
    gen.add_argument("--seeds", type=int, help="clips per verb-noun pair")
    gen.add_argument("--dims", type=int, nargs=3, metavar=("T", "H", "W"))

    sub.add_parser("train", parents=[common], help="train a model on a split")

    ev = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on a split's validation ids")
    ev.add_argument("--checkpoint", required=False)

    fs = sub.add_parser("fewshot", parents=[common], help="frozen-backbone finetuning on novel verbs")
    fs.add_argument("--checkpoint", help="pretrained checkpoint (default: pretrain one first)")
    fs.add_argument("--finetune-epochs", dest="finetune_epochs", type=int)
    fs.add_argument("--finetune-lr", dest="finetune_lr", type=float)

    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")

    ab = sub.add_parser("ablate", parents=[common], help="sweep topologies and SI variants")
    ab.add_argument("--topologies", nargs="+", choices=TOPOLOGIES)
    ab.add_argument("--variants", nargs="+", choices=VARIANTS)
    ab.add_argument("--parallel", type=int, help="worker processes (default 1: sequential)")

    ex = sub.add_parser("export", parents=[common], help="convert a metrics JSON to CSV or JSON")
    ex.add_argument("--metrics", required=False)
    ex.add_argument("--format", choices=("csv", "json"))

    rp = sub.add_parser("replay", help="re-run a command from its run manifest")
    rp.add_argument("manifest")
    rp.add_argument("--out", help="output directory for the replay (default: <original out>-replay)")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < --config file < explicit flags."""
    cfg = dict(DEFAULTS)
    if getattr(args, "config", None):
        try:
            extra = json.loads(Path(args.config).read_text())
        except (OSError, ValueError) as e:
            raise ConfigError(f"cannot read config file {args.config}: {e}") from e
        unknown = set(extra) - set(DEFAULTS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(extra)
    for key, value in vars(args).items():
        if key in DEFAULTS and value is not None:
            cfg[key] = value
    if cfg["k"] < 1:
        raise ConfigError("--k must be >= 1")
    return cfg


# --------------------------------------------------------------------------
# helpers


def schedule_from(cfg: dict) -> TrainSchedule:
    overrides = {"seed": cfg["seed"]}
    if cfg["lr"] is not None:
        overrides["base_lr"] = cfg["lr"]
    if cfg["batch"] is not None:
        overrides["batch_size"] = cfg["batch"]
    sched = TrainSchedule.preset(cfg["preset"], **overrides)
    if cfg["epochs"] is not None and cfg["epochs"] != sched.total_epochs:
        # keep the drops at the same fractions of the run
        base = TrainSchedule.preset(cfg["preset"])
        drops = sorted({round(d * cfg["epochs"] / base.total_epochs) for d in base.lr_drop_epochs})
        drops = tuple(d for d in drops if 0 < d < cfg["epochs"])
        sched = TrainSchedule.preset(cfg["preset"], total_epochs=cfg["epochs"], lr_drop_epochs=drops, **overrides)
    return sched


def model_config(cfg: dict, num_classes: int, dims) -> ModelConfig:
    return ModelConfig(
        topology=FusionTopology(cfg["topology"]),
        si=SIVariantConfig.preset(cfg["si_variant"]),
        vi=VIConfig(),
        num_classes=num_classes,
        dims=tuple(dims),
    )


def verb_partition(n_verbs: int):
    half = n_verbs // 2
    return list(range(half)), list(range(half, n_verbs))


def fewshot_verbs(n_verbs: int):
    """Base = even verb ids, novel = odd ids (each novel verb's motion has a base-verb mirror)."""
    return list(range(0, n_verbs, 2)), list(range(1, n_verbs, 2))


def load_split(data: Path, name: str) -> SplitSpec:
    path = data / "splits" / f"{name}.json"
    if not path.exists():
        raise DataError(f"split {path} not found; run `safcar gen` first")
    return SplitSpec.load(path)


def _emit(line: str) -> None:
    print(line, flush=True)


# --------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict, out: Path) -> dict:
    if not 2 <= cfg["verbs"] <= len(VERBS) or not 2 <= cfg["nouns"] <= len(NOUNS):
        raise ConfigError(f"--verbs must be in 2..{len(VERBS)} and --nouns in 2..{len(NOUNS)}")
    data = Path(cfg["data"])
    ds = ClipDataset.generate(range(cfg["verbs"]), range(cfg["nouns"]), range(cfg["seeds"]), dims=cfg["dims"])
    ds.save(data)
    nouns = list(range(cfg["nouns"]))
    half = len(nouns) // 2
    outputs = {"dataset": str(data), "clips": len(ds)}
    if cfg["split"] in ("compositional", "both"):
        sp = make_compositional_split(ds.instances(), verb_partition(cfg["verbs"]), (nouns[:half], nouns[half:]))
        sp.save(data / "splits" / "compositional.json")
        _emit(f"compositional split: {len(sp.train_ids)} train / {len(sp.val_ids)} val")
        outputs["compositional"] = str(data / "splits" / "compositional.json")
    if cfg["split"] in ("fewshot", "both"):
        base, novel = fewshot_verbs(cfg["verbs"])
        sp = make_fewshot_split(ds.instances(), base, novel, cfg["k"], cfg["seed"])
        sp.save(data / "splits" / "fewshot.json")
        _emit(f"few-shot split (k={cfg['k']}): {len(sp.pretrain_ids)} pretrain / {len(sp.train_ids)} finetune / {len(sp.val_ids)} val")
        for w in sp.warnings:
            _emit(f"warning: {w}")
        outputs["fewshot"] = str(data / "splits" / "fewshot.json")
    if cfg["split"] not in ("compositional", "fewshot", "both"):
        raise ConfigError(f"--split must be compositional, fewshot or both for gen, got {cfg['split']!r}")
    _emit(f"wrote {len(ds)} clips to {data}")
    return outputs


def _train_on_split(cfg: dict, ds: ClipDataset, sp: SplitSpec, out: Path):
    if sp.mode == "fewshot":
        classes, train_ids = sp.classes("pretrain"), sp.pretrain_ids
    else:
        classes, train_ids = sp.classes(), sp.train_ids
    model = Model(model_config(cfg, len(classes), ds.dims), np.random.default_rng(cfg["seed"]))
    ckpt, report = train(model, ds, train_ids, schedule_from(cfg), classes=classes, out_dir=out, log=_emit)
    return model, ckpt, report, classes


def cmd_train(cfg: dict, out: Path) -> dict:
    ds = ClipDataset.load(cfg["data"])
    sp = load_split(Path(cfg["data"]), cfg["split"])
    model, ckpt, report, classes = _train_on_split(cfg, ds, sp, out)
    outputs = {"checkpoint": str(out / "final"), "metrics": str(out / "metrics.json")}
    if sp.mode == "compositional":
        val = evaluate(model, ds, sp.val_ids, classes)
        val.to_json(out / "val_metrics.json", include_time=False)
        _emit(f"val top-1 {val.top1:.4f} top-5 {val.top5:.4f} ({val.count} clips)")
        outputs["val_metrics"] = str(out / "val_metrics.json")
    return outputs


def cmd_eval(cfg: dict, out: Path) -> dict:
    if not cfg["checkpoint"]:
        raise ConfigError("eval needs --checkpoint")
    ds = ClipDataset.load(cfg["data"])
    sp = load_split(Path(cfg["data"]), cfg["split"])
    report = evaluate(cfg["checkpoint"], ds, sp.val_ids)
    out.mkdir(parents=True, exist_ok=True)
    report.to_json(out / "eval_metrics.json", include_time=False)
    _emit(f"top-1 {report.top1:.4f} top-5 {report.top5:.4f} ({report.count} clips)")
    for verb, acc in sorted(report.per_verb.items()):
        _emit(f"  {VERBS[verb]:<12} {acc:.3f}")
    return {"metrics": str(out / "eval_metrics.json")}


def cmd_fewshot(cfg: dict, out: Path) -> dict:
    data = Path(cfg["data"])
    ds = ClipDataset.load(data)
    stored = load_split(data, "fewshot") if (data / "splits" / "fewshot.json").exists() else None
    if stored is not None and stored.k == cfg["k"] and stored.seed == cfg["seed"]:
        sp = stored
    else:
        base, novel = stored.verb_sets if stored is not None else fewshot_verbs(int(ds.verbs.max()) + 1)
        sp = make_fewshot_split(ds.instances(), base, novel, cfg["k"], cfg["seed"])
    for w in sp.warnings:
        _emit(f"warning: {w}")
    if cfg["checkpoint"]:
        pretrained = Checkpoint.load(cfg["checkpoint"])
        if pretrained.classes != sp.classes("pretrain"):
            raise ConfigError(f"checkpoint classes {pretrained.classes} are not the base verbs {sp.classes('pretrain')}")
    else:
        _emit("pretraining on base verbs")
        _, pretrained, _, _ = _train_on_split(cfg, ds, sp, out / "pretrain")
    sched = TrainSchedule(
        base_lr=cfg["finetune_lr"],
        batch_size=cfg["batch"] or 16,
        lr_drop_epochs=(),
        total_epochs=cfg["finetune_epochs"],
        seed=cfg["seed"],
    )
    ckpt, _ = fewshot_finetune(pretrained, ds, sp.train_ids, sp.novel_verbs, cfg["k"], sched, out_dir=out / "finetune")
    report = evaluate(ckpt, ds, sp.val_ids)
    report.to_json(out / "fewshot_metrics.json", include_time=False)
    n = report.count
    chance = 1.0 / len(sp.novel_verbs)
    sigma = np.sqrt(chance * (1 - chance) / n)
    _emit(f"few-shot k={cfg['k']}: top-1 {report.top1:.4f} (chance {chance:.3f}, {(report.top1 - chance) / sigma:.1f} sigma, n={n})")
    return {"checkpoint": str(out / "finetune" / "final"), "metrics": str(out / "fewshot_metrics.json")}


def cmd_gradcheck(cfg: dict, out: Path) -> dict:
    results = run_suite(seed=cfg["seed"])
    worst = 0.0
    for name, (err, secs) in results.items():
        status = "ok" if err < TOLERANCE else "FAIL"
        _emit(f"{name:<28} max rel err {err:.3e}  ({secs:.1f}s)  {status}")
        worst = max(worst, err)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.json").write_text(json.dumps({k: v[0] for k, v in results.items()}, indent=1))
    if worst >= TOLERANCE:
        raise ContractError(f"gradient check failed: max relative error {worst:.3e} >= {TOLERANCE}")
    return {"gradcheck": str(out / "gradcheck.json")}


def _ablate_one(job):
    cfg, topology, variant, out = job
    cfg = dict(cfg, topology=topology, si_variant=variant)
    ds = ClipDataset.load(cfg["data"])
    sp = load_split(Path(cfg["data"]), cfg["split"])
    if sp.mode != "compositional":
        raise ConfigError("ablate runs on a compositional split")
    model, _, _, classes = _train_on_split(cfg, ds, sp, Path(out))
    report = evaluate(model, ds, sp.val_ids, classes)
    return topology, variant, report.top1, report.top5


def cmd_ablate(cfg: dict, out: Path) -> dict:
    jobs = [(cfg, t, v, str(out / f"{t}_{v}")) for t in cfg["topologies"] for v in cfg["variants"]]
    if cfg["parallel"] > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=cfg["parallel"]) as pool:
            rows = list(pool.map(_ablate_one, jobs))
    else:
        rows = [_ablate_one(j) for j in jobs]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["topology", "si_variant", "top1", "top5"])
        w.writerows(rows)
    lines = ["| topology | SI variant | top-1 | top-5 |", "|---|---|---|---|"]
    lines += [f"| {t} | {v} | {100 * a:.1f} | {100 * b:.1f} |" for t, v, a, b in rows]
    (out / "ablation.md").write_text("\n".join(lines) + "\n")
    for line in lines:
        _emit(line)
    return {"table": str(out / "ablation.md"), "csv": str(out / "ablation.csv")}


def cmd_export(cfg: dict, out: Path) -> dict:
    if not cfg["metrics"]:
        raise ConfigError("export needs --metrics")
    try:
        report = MetricsReport.from_dict(json.loads(Path(cfg["metrics"]).read_text()))
    except (OSError, ValueError, TypeError) as e:
        raise DataError(f"cannot read metrics {cfg['metrics']}: {e}") from e
    out.mkdir(parents=True, exist_ok=True)
    target = out / f"metrics.{cfg['format']}"
    if cfg["format"] == "csv":
        report.to_csv(target)
    else:
        report.to_json(target)
    _emit(f"wrote {target}")
    return {"export": str(target)}


HANDLERS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
    "export": cmd_export,
}


def execute(command: str, cfg: dict) -> RunManifest:
    """Write the manifest, run ``command``, then record outputs and end time."""
    out = Path(cfg["out"])
    manifest = RunManifest(command, cfg, int(cfg["seed"]), git_describe(), _now())
    manifest.save(out / "run_manifest.json")
    manifest.outputs = HANDLERS[command](cfg, out)
    manifest.finished = _now()
    manifest.save(out / "run_manifest.json")
    return manifest


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "replay":
            old = RunManifest.load(args.manifest)
            cfg = dict(old.config)
            cfg["out"] = args.out or str(Path(cfg["out"])) + "-replay"
            execute(old.command, cfg)
        else:
            execute(args.command, resolve_config(args))
    except SafcarError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
