"""Command line runner: data, training, capture, attacks, K tuning and reports.

    gifdlab prepare-data --config exp.yaml
    gifdlab train-global --config exp.yaml
    gifdlab train-generator --config exp.yaml
    gifdlab train-fl --config exp.yaml
    gifdlab capture --config exp.yaml
    gifdlab attack --config exp.yaml --workers 4
    gifdlab tune-k --config exp.yaml
    gifdlab report --config exp.yaml

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 numerical divergence.
"""

import argparse
import csv
import dataclasses
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

import numpy as np
import torch

from . import __version__
from .attacks import run_attack
from .bench import emit_report, evaluate, result_row
from .config import ConfigError, ExperimentConfig, load_config, point_name, sweep_point, with_overrides
from .core import Checkpoint, CheckpointError, derive_seed, load_checkpoint, save_checkpoint
from .data import Dataset, label_permutation, make_dataset
from .flsim import FLRoundRecord, PartitionSpec, capture_round, fedavg_train, partition_indices
from .models import (TrainingDivergedError, checkpoint_from_model, classifier_from_checkpoint,
                     generator_from_checkpoint, train_classifier, train_generator)

log = logging.getLogger("gifdlab")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 2, 3, 4


class MissingArtifactError(FileNotFoundError):
    pass


# ---------------------------------------------------------------------------
# artifact helpers


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing artifact: {path}")
    return path


def _save_dataset(ds: Dataset, path: Path, meta=None):
    save_checkpoint(Checkpoint({"images": ds.images, "labels": ds.labels.float()}, dict(meta or {})), path)


def _load_dataset(path: Path) -> Dataset:
    t = load_checkpoint(_need(path)).tensors
    return Dataset(t["images"], t["labels"].round().long())


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, extra=None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config-hash": cfg.hash(),
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "versions": {"gifdlab": __version__, "torch": torch.__version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    manifest.update(extra or {})
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _write_rows(path: Path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# ---------------------------------------------------------------------------
# commands


def cmd_prepare_data(cfg: ExperimentConfig, out: Path) -> Path:
    d = cfg.dataset
    data = out / "data"
    train = make_dataset(d.n_train, derive_seed(cfg.seed, "train-data"), d.size, d.channels, d.target_style)
    test = make_dataset(d.n_test, derive_seed(cfg.seed, "test-data"), d.size, d.channels, d.target_style)
    gen_data = make_dataset(d.n_generator, derive_seed(cfg.seed, "generator-data"), d.size, d.channels, d.style)
    perm = None
    if d.label_permutation:
        perm = label_permutation(derive_seed(cfg.seed, "label-permutation"))
        gen_data = gen_data.relabel(perm)
    _save_dataset(train, data / "train.glns", {"style": d.target_style})
    _save_dataset(test, data / "test.glns", {"style": d.target_style})
    _save_dataset(gen_data, data / "generator.glns", {"style": d.style})
    _prepare_partition(cfg, train, data / "partition")
    write_manifest(data, cfg, "prepare-data",
                   {"label-permutation": None if perm is None else [int(i) for i in perm]})
    return data


def _prepare_partition(cfg: ExperimentConfig, train: Dataset, out: Path):
    spec = PartitionSpec(cfg.partition.num_clients, cfg.partition.q, derive_seed(cfg.seed, "partition"))
    parts = partition_indices(train.labels.numpy(), spec)
    out.mkdir(parents=True, exist_ok=True)
    for c, idx in enumerate(parts):
        _save_dataset(train.subset(idx), out / f"client_{c:02d}.glns")
    counts = [np.bincount(train.labels.numpy()[idx], minlength=10).tolist() for idx in parts]
    write_manifest(out, cfg, "partition", {"q": cfg.partition.q, "num-clients": spec.num_clients,
                                            "class-counts": counts})


def _load_clients(part_dir: Path, n: int) -> List[Dataset]:
    return [_load_dataset(part_dir / f"client_{c:02d}.glns") for c in range(n)]


def cmd_train_global(cfg: ExperimentConfig, out: Path) -> Path:
    """Central pre-training of the global model (``epochs=0`` keeps the seeded init)."""
    g = cfg.global_model
    train = _load_dataset(out / "data" / "train.glns")
    test = _load_dataset(out / "data" / "test.glns")
    hist = []
    model = train_classifier(train, derive_seed(cfg.seed, "global"), g.architecture, g.epochs, g.batch_size, g.lr,
                             g.momentum, g.width, num_classes=10, val_dataset=test, history=hist)
    models = out / "models"
    save_checkpoint(checkpoint_from_model(model, {"round": "0"}), models / "global_init.glns")
    _write_rows(models / "global_curve.csv", ["epoch", "loss", "train_acc", "val_acc"], hist)
    write_manifest(models, cfg, "train-global")
    return models / "global_init.glns"


def cmd_train_generator(cfg: ExperimentConfig, out: Path) -> Path:
    """Train the conditional generator and the label-mapping classifier on the generator's data."""
    g = cfg.generator
    data = _load_dataset(out / "data" / "generator.glns")
    hist = []
    gen = train_generator(data, derive_seed(cfg.seed, "generator"), g.epochs, g.batch_size, g.lr,
                          latent_dim=g.latent_dim, base=g.base, embed_dim=g.embed_dim, disc_base=g.disc_base,
                          max_steps=g.max_steps, history=hist)
    models = out / "models"
    save_checkpoint(checkpoint_from_model(gen), models / "generator.glns")
    _write_rows(models / "generator_curve.csv", ["epoch", "step", "d_loss", "g_loss"], hist)
    mapper = train_classifier(data, derive_seed(cfg.seed, "label-map"), "convnet4", g.mapper_epochs, width=16)
    save_checkpoint(checkpoint_from_model(mapper), models / "label_map.glns")
    write_manifest(models, cfg, "train-generator")
    return models / "generator.glns"


def cmd_train_fl(cfg: ExperimentConfig, out: Path, part_dir: Optional[Path] = None,
                 fl_dir: Optional[Path] = None) -> Path:
    g = cfg.global_model
    part_dir = part_dir or out / "data" / "partition"
    fl_dir = fl_dir or out / "fl"
    clients = _load_clients(part_dir, cfg.partition.num_clients)
    model = classifier_from_checkpoint(load_checkpoint(_need(out / "models" / "global_init.glns")))
    hist = []
    ckpts = fedavg_train(model, clients, g.rounds, g.clients_per_round, g.fl_lr, derive_seed(cfg.seed, "fl"),
                         g.local_batch, history=hist, local_steps=g.local_steps)
    for r, ck in enumerate(ckpts):
        save_checkpoint(ck, fl_dir / f"round_{r:04d}.glns")
    _write_rows(fl_dir / "curve.csv", ["round", "loss"], hist)
    write_manifest(fl_dir, cfg, "train-fl")
    return fl_dir


def cmd_capture(cfg: ExperimentConfig, out: Path, rec_dir: Optional[Path] = None, part_dir: Optional[Path] = None,
                fl_dir: Optional[Path] = None) -> List[Path]:
    r = cfg.runner
    part_dir = part_dir or out / "data" / "partition"
    fl_dir = fl_dir or out / "fl"
    rec_dir = rec_dir or out / "records"
    victim = _load_dataset(part_dir / f"client_{cfg.partition.victim_client:02d}.glns")
    ck_path = fl_dir / f"round_{r.capture_round:04d}.glns"
    if r.capture_round == 0 and not ck_path.exists():
        ck_path = out / "models" / "global_init.glns"
    ck = load_checkpoint(_need(ck_path))
    defense = None if cfg.defense.kind == "none" else cfg.defense
    paths = []
    for i in range(r.num_records):
        rec = capture_round(ck, victim, r.batch_size, defense, derive_seed(cfg.seed, "capture", i),
                            round_index=r.capture_round)
        paths.append(rec.save(rec_dir / f"rec_{i:03d}"))
    write_manifest(rec_dir, cfg, "capture", {"records": len(paths)})
    return paths


def _load_generator(out: Path):
    return generator_from_checkpoint(load_checkpoint(_need(out / "models" / "generator.glns")))


def _load_mapper(out: Path):
    m = classifier_from_checkpoint(load_checkpoint(_need(out / "models" / "label_map.glns")))
    m.eval()
    return m


def attack_records(cfg: ExperimentConfig, out: Path, rec_dir: Path, dest: Path) -> Path:
    """Run every configured method on every record under ``rec_dir``; emit tables and figures."""
    recs = sorted(p for p in _need(rec_dir).iterdir() if p.is_dir())
    if not recs:
        raise MissingArtifactError(f"missing artifact: no captured records under {rec_dir}")
    needs_gen = any(m != "pixel" for m in cfg.runner.methods)
    gen = _load_generator(out) if needs_gen else None
    f_m = _load_mapper(out) if cfg.attack.label_mode == "map" else None
    rows, timings = [], []
    reports_dir = dest / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    for rp in recs:
        rec = FLRoundRecord.load(rp)
        for method in cfg.runner.methods:
            acfg = dataclasses.replace(cfg.attack, method=method, seed=derive_seed(cfg.seed, "attack", rp.name))
            rep = run_attack(rec, acfg, gen=gen, f_m=f_m)
            met = evaluate(rep.final_images.pixels, rec.victim_batch.pixels)
            rep.metrics = met.as_dict()
            row = result_row(method, rp.name, rep, met)
            rows.append({**row, "report": rep, "truth": rec.victim_batch.pixels})
            timings.append((method, rp.name, f"{rep.wall_time_s:.3f}"))
            (reports_dir / f"{rp.name}_{method}.json").write_text(json.dumps(_report_json(rep), indent=2) + "\n")
    emit_report(rows, dest, include_time=False)
    _write_rows(dest / "timings.csv", ["method", "seed", "wall_time_s"], timings)
    write_manifest(dest, cfg, "attack", {"records": [p.name for p in recs]})
    return dest / "results.csv"


def _report_json(rep) -> dict:
    return {
        "method": rep.method,
        "chosen-stage": rep.chosen_stage,
        "trial-index": rep.trial_index,
        "trial-losses": rep.trial_losses,
        "labels": rep.labels_used.labels,
        "label-method": rep.labels_used.method,
        "label-note": rep.labels_used.confidence_note,
        "defense-inferred": rep.defense_inferred,
        "metrics": rep.metrics,
        "stages": [{"stage": s.stage_id, "best-loss": s.best_loss, "best-iter": s.best_iter, "radius": s.radius}
                   for s in rep.stages],
    }


def _run_point(args):
    """One sweep point in its own directory (a worker-pool task)."""
    cfg, out, value = args
    torch.set_num_threads(1)
    pcfg = sweep_point(cfg, value)
    pdir = out / "sweep" / point_name(cfg.sweep.axis, value)
    part_dir, fl_dir = out / "data" / "partition", out / "fl"
    if cfg.sweep.axis == "q":
        part_dir, fl_dir = pdir / "partition", pdir / "fl"
        _prepare_partition(pcfg, _load_dataset(out / "data" / "train.glns"), part_dir)
        cmd_train_fl(pcfg, out, part_dir, fl_dir)
    cmd_capture(pcfg, out, pdir / "records", part_dir, fl_dir)
    attack_records(pcfg, out, pdir / "records", pdir / "attack")
    write_manifest(pdir, pcfg, "attack", {"sweep-axis": cfg.sweep.axis, "sweep-value": value})
    return str(pdir)


def cmd_attack(cfg: ExperimentConfig, out: Path, workers: int = 1):
    if cfg.sweep.axis == "none":
        return attack_records(cfg, out, out / "records", out / "attack")
    tasks = [(cfg, out, v) for v in cfg.sweep.values]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            done = list(pool.map(_run_point, tasks))
    else:
        done = [_run_point(t) for t in tasks]
    write_manifest(out / "sweep", cfg, "attack", {"points": done})
    return out / "sweep"


def cmd_tune_k(cfg: ExperimentConfig, out: Path) -> dict:
    """Run gifd for every K in 0..N on held-out test images and recommend the best K."""
    gen = _load_generator(out)
    if cfg.attack.project and len(cfg.attack.radii or []) < gen.depth:
        raise ConfigError(f"attack.radii: tune-k needs one radius per generator layer ({gen.depth}), "
                          f"got {cfg.attack.radii}")
    test = _load_dataset(out / "data" / "test.glns")
    r = cfg.runner
    ck_path = out / "fl" / f"round_{r.capture_round:04d}.glns"
    if r.capture_round == 0 and not ck_path.exists():
        ck_path = out / "models" / "global_init.glns"
    ck = load_checkpoint(_need(ck_path))
    defense = None if cfg.defense.kind == "none" else cfg.defense
    records = [capture_round(ck, test, r.batch_size, defense, derive_seed(cfg.seed, "held-out", i))
               for i in range(r.held_out)]
    rows = []
    for k in range(gen.depth + 1):
        acfg = dataclasses.replace(cfg.attack, method="gifd", K=k)
        scores = []
        for i, rec in enumerate(records):
            rep = run_attack(rec, dataclasses.replace(acfg, seed=derive_seed(cfg.seed, "tune-k", i)), gen=gen)
            scores.append(evaluate(rep.final_images.pixels, rec.victim_batch.pixels).psnr)
        rows.append((k, float(np.mean(scores))))
    best = max(rows, key=lambda kv: (kv[1], -kv[0]))[0]
    dest = out / "tune_k"
    dest.mkdir(parents=True, exist_ok=True)
    _write_rows(dest / "curve.csv", ["K", "mean_psnr"], [(k, f"{p:.6f}") for k, p in rows])
    result = {"recommended-K": best, "curve": [{"K": k, "mean-psnr": p} for k, p in rows]}
    (dest / "recommendation.json").write_text(json.dumps(result, indent=2) + "\n")
    write_manifest(dest, cfg, "tune-k")
    return result


def cmd_report(cfg: ExperimentConfig, out: Path) -> Path:
    """Collect every results.csv under the output directory into one summary table."""
    from .bench import read_csv

    found = sorted(out.rglob("results.csv"))
    if not found:
        raise MissingArtifactError(f"missing artifact: no results.csv under {out}")
    summary = []
    for path in found:
        section = str(path.parent.relative_to(out))
        rows = read_csv(path)
        for method in sorted({r["method"] for r in rows}):
            sel = [r for r in rows if r["method"] == method]
            summary.append((section, method, len(sel), *(f"{np.mean([r[m] for r in sel]):.6f}"
                                                          for m in ("psnr", "ssim", "mse"))))
    dest = out / "report"
    dest.mkdir(parents=True, exist_ok=True)
    header = ["section", "method", "n", "psnr", "ssim", "mse"]
    _write_rows(dest / "summary.csv", header, summary)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(str(v) for v in row) + " |" for row in summary]
    (dest / "summary.md").write_text("\n".join(lines) + "\n")
    write_manifest(dest, cfg, "report")
    return dest / "summary.csv"


COMMANDS = {
    "prepare-data": cmd_prepare_data,
    "train-global": cmd_train_global,
    "train-generator": cmd_train_generator,
    "train-fl": cmd_train_fl,
    "capture": cmd_capture,
    "attack": cmd_attack,
    "tune-k": cmd_tune_k,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gifdlab", description="Gradient inversion attack lab")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="YAML experiment config (defaults if omitted)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", type=Path, help="override the config output-dir")
        sp.add_argument("--workers", type=int, default=1, help="worker processes for sweeps")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        from .config import parse_config

        cfg = load_config(args.config) if args.config else parse_config({})
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = with_overrides(cfg, args.seed, args.out)
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(cfg.output_dir)
    try:
        if args.command == "attack":
            result = cmd_attack(cfg, out, args.workers)
        else:
            result = COMMANDS[args.command](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, CheckpointError) as e:
        print(f"{e}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingDivergedError, FloatingPointError) as e:
        print(f"numerical divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    if isinstance(result, dict):
        print(json.dumps(result))
    elif result is not None:
        for item in (result if isinstance(result, list) else [result]):
            print(item)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
