"""Command-line entry point: dataset generation, the two training stages,
synthesis previews, evaluation, and sweeps.

Every command validates its full configuration before touching the
filesystem, echoes the effective config into the output directory, and keeps
all randomness derived from the single configured seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import SWEEP_DEFAULT_VALUES, RunConfig, load_config
from .core import PersonCrop
from .data.manifest import (
    AnnotatedFrame,
    IngestionError,
    SearchProtocol,
    ValidationError,
    load_annotations,
    save_annotations,
)
from .data.toy import generate_toy_dataset
from .detect import (
    AidqNet,
    ConfigError,
    FileDetector,
    GroundTruthDetector,
    TemplateToyDetector,
    crops_to_batch,
    harvest_gt_crops,
    run_aidq_training,
)
from .evaluation import (
    EmptyEvaluationError,
    evaluate_protocol,
    resample_galleries,
    sweep,
)
from .figures import (
    plot_eval_summary,
    plot_sweep,
    plot_training_log,
    save_image_grid,
)
from .harness import ToyBench, embedder_fn, retrain_sweep_runner
from .reid import embed, run_joint_training
from .synthgan import (
    AppearanceEncoder,
    CheckpointError,
    SceneSynthesisModel,
    load_checkpoint,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_ERROR = 2
EXIT_UNEVALUABLE = 3


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenesearch",
        description="Configurable-scale person search: generation, training, "
        "synthesis, and retrieval evaluation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser, needs_checkpoint: bool = False):
        p.add_argument("--config", type=str, default=None, help="YAML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", type=str, default=None, help="output directory")
        p.add_argument(
            "--profile", type=str, default=None, choices=("toy", "full", "cuhk", "prw"),
            help="scale/threshold profile",
        )
        p.add_argument(
            "--force", action="store_true",
            help="allow writing into a non-empty output directory",
        )
        if needs_checkpoint:
            p.add_argument("--checkpoint", type=str, default=None, help="checkpoint path")

    add_common(sub.add_parser("gen-data", help="render a toy dataset to disk"))
    add_common(sub.add_parser("train-detect", help="train the detection-stage crop embedder"))
    add_common(sub.add_parser("train-gan", help="joint synthesis + discriminative training"))
    add_common(
        sub.add_parser("synthesize", help="render an appearance/structure swap grid"),
        needs_checkpoint=True,
    )
    add_common(
        sub.add_parser("evaluate", help="run the retrieval protocol"),
        needs_checkpoint=True,
    )
    add_common(
        sub.add_parser("sweep", help="sweep one axis with seeded repetitions"),
        needs_checkpoint=True,
    )
    return parser


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(
        args.config,
        overrides={"seed": args.seed, "out": args.out, "profile": args.profile},
    )
    if cfg.raw["deterministic"]:
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    return cfg


def _require_out(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("an output directory is required (--out or config 'out')")
    return cfg.out


def _load_dataset(cfg: RunConfig) -> tuple[list[AnnotatedFrame], SearchProtocol]:
    dataset = cfg.section("data")["dataset"]
    if dataset:
        return load_annotations(dataset)
    frames, protocol, _ = generate_toy_dataset(cfg.toy_spec)
    return frames, protocol


def _build_detector(cfg: RunConfig):
    d = cfg.section("detect")
    if d["detector"] == "gt":
        return GroundTruthDetector(jitter=d["jitter"], seed=cfg.seed)
    if d["detector"] == "template":
        return TemplateToyDetector(
            window_h=cfg.toy_spec.person_h, window_w=cfg.toy_spec.person_w
        )
    return FileDetector(d["detections"])


def cmd_gen_data(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    frames, protocol, _ = generate_toy_dataset(cfg.toy_spec)
    save_annotations(frames, protocol, out, force=args.force)
    cfg.echo(out)
    n_boxes = sum(len(f.ground_truth) for f in frames)
    print(
        f"wrote {len(frames)} frames, {n_boxes} boxes, "
        f"{cfg.toy_spec.n_identities} identities, "
        f"{len(protocol.queries)} queries to {out}"
    )
    return EXIT_OK


def cmd_train_detect(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    cfg.echo(out)
    frames, _ = _load_dataset(cfg)
    a = cfg.section("aidq")
    log_path = out / "logs" / "train_detect.csv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "aidq_loss"])
        net, memory = run_aidq_training(
            frames,
            _build_detector(cfg),
            cfg.detector_config,
            cfg.toy_spec.n_identities,
            iterations=a["iterations"],
            seed=cfg.seed,
            dim=a["dim"],
            batch_size=a["batch_size"],
            lr=a["lr"],
            crop_h=cfg.crop_h,
            crop_w=cfg.crop_w,
            log_every=1,
            log_fn=lambda it, loss: writer.writerow([it, f"{loss:.6f}"]),
        )
    ckpt = out / "checkpoints" / "aidq_final.pt"
    save_checkpoint(
        ckpt,
        cfg.gan_profile,
        {"aidq_net": net.state_dict(), "memory": memory.state_dict()},
        metadata={
            "dim": a["dim"],
            "n_identities": cfg.toy_spec.n_identities,
            "n_unlabeled_centers": int(memory.unlabeled.shape[0]),
        },
    )
    fig = plot_training_log(log_path, out / "logs" / "train_detect.png")
    print(f"trained embedder for {a['iterations']} steps; checkpoint {ckpt}; "
          f"log {log_path}; figure {fig}")
    return EXIT_OK


def cmd_train_gan(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    cfg.echo(out)
    frames, _ = _load_dataset(cfg)
    crops = harvest_gt_crops(frames, cfg.crop_h, cfg.crop_w)
    g = cfg.section("gan")
    result = run_joint_training(
        crops,
        cfg.toy_spec.n_identities,
        cfg.gan_profile,
        weights=cfg.weights,
        iterations=g["iterations"],
        batch_pairs=g["batch_pairs"],
        seed=cfg.seed,
        out_dir=out,
        teacher_iterations=g["teacher_iterations"],
        warmup_iterations=g["warmup_iterations"],
        lr_app=g["lr_app"],
        lr_adam=g["lr_adam"],
        checkpoint_every=g["checkpoint_every"],
        resume_from=g["resume"],
    )
    fig = plot_training_log(result.log_path, out / "logs" / "train_gan.png")
    print(
        f"joint training done: {result.iterations_done} steps; "
        f"checkpoint {result.checkpoint_path}; log {result.log_path}; figure {fig}"
    )
    return EXIT_OK


def _load_synthesis_model(cfg: RunConfig, path: str | Path) -> tuple[SceneSynthesisModel, dict]:
    payload = load_checkpoint(path, expect_profile=cfg.gan_profile.name)
    model = SceneSynthesisModel(cfg.gan_profile)
    model.app_encoder.load_state_dict(payload["sections"]["app_encoder"])
    model.str_encoder.load_state_dict(payload["sections"]["str_encoder"])
    model.decoder.load_state_dict(payload["sections"]["decoder"])
    model.eval()
    return model, payload


def cmd_synthesize(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    cfg.echo(out)
    ckpt = args.checkpoint or cfg.section("synthesize")["checkpoint"]
    if not ckpt:
        raise ConfigError("synthesize requires a checkpoint (--checkpoint)")
    model, _ = _load_synthesis_model(cfg, ckpt)
    frames, _ = _load_dataset(cfg)
    crops = harvest_gt_crops(frames, cfg.crop_h, cfg.crop_w)
    n_ids = cfg.section("synthesize")["n_ids"]
    by_identity: dict[int, list[PersonCrop]] = {}
    for c in crops:
        by_identity.setdefault(c.identity, []).append(c)
    if n_ids > len(by_identity):
        raise ConfigError(
            f"synthesize.n_ids={n_ids} exceeds available identities ({len(by_identity)})"
        )
    rng = np.random.default_rng(cfg.seed)
    reps = [
        by_identity[i][int(rng.integers(len(by_identity[i])))]
        for i in sorted(by_identity)[:n_ids]
    ]
    app_batch = crops_to_batch(reps)
    with torch.no_grad():
        synth = {}
        for j in range(n_ids):
            str_batch = crops_to_batch([reps[j]] * n_ids)
            out_imgs = model.decode(
                model.app_encoder(app_batch), model.str_encoder(str_batch)
            )
            synth[j] = out_imgs.permute(0, 2, 3, 1).numpy()
    cells: list[list[Optional[np.ndarray]]] = [[None] + [r.pixels for r in reps]]
    for j in range(n_ids):
        row: list[Optional[np.ndarray]] = [reps[j].pixels]
        row += [synth[j][i] for i in range(n_ids)]
        cells.append(row)
    path = save_image_grid(cells, out / "grids" / "synthesis_grid.png")
    print(f"wrote {n_ids + 1}x{n_ids + 1} synthesis grid to {path}")
    return EXIT_OK


def _load_embedder(cfg: RunConfig, path: str | Path):
    """Embedding function from a checkpoint: the detection-stage embedder or
    the appearance encoder of a joint checkpoint."""
    kind = cfg.section("eval")["embedder"]
    payload = load_checkpoint(path, expect_profile=cfg.gan_profile.name)
    if kind == "aidq":
        if "aidq_net" not in payload["sections"]:
            raise CheckpointError(f"{path} has no detection-embedder section")
        net = AidqNet(dim=payload["metadata"]["dim"])
        net.load_state_dict(payload["sections"]["aidq_net"])
        net.eval()
        return embedder_fn(net)
    if "app_encoder" not in payload["sections"]:
        raise CheckpointError(f"{path} has no appearance-encoder section")
    encoder = AppearanceEncoder(cfg.gan_profile)
    encoder.load_state_dict(payload["sections"]["app_encoder"])
    encoder.eval()

    def fn(crops: Sequence[PersonCrop]) -> np.ndarray:
        return embed(encoder, crops_to_batch(crops)).numpy()

    return fn


def cmd_evaluate(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    cfg.echo(out)
    ckpt = args.checkpoint or cfg.section("eval")["checkpoint"]
    if not ckpt:
        raise ConfigError("evaluate requires a checkpoint (--checkpoint)")
    embed_fn = _load_embedder(cfg, ckpt)
    frames, protocol = _load_dataset(cfg)
    ev = cfg.section("eval")
    if ev["gallery_size"] is not None:
        protocol = resample_galleries(frames, protocol, ev["gallery_size"], cfg.seed)
    try:
        summary = evaluate_protocol(
            frames, protocol, _build_detector(cfg), embed_fn,
            match_iou=ev["match_iou"], crop_h=cfg.crop_h, crop_w=cfg.crop_w,
        )
    except EmptyEvaluationError as exc:
        print(f"evaluation failed: {exc}", file=sys.stderr)
        return EXIT_UNEVALUABLE
    reports = out / "reports"
    reports.mkdir(parents=True, exist_ok=True)
    csv_path = reports / "evaluate.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["query", "frame", "identity", "ap"])
        for qi, (q, ap) in enumerate(zip(protocol.queries, summary.per_query)):
            writer.writerow(
                [qi, q.frame_id, q.identity, "" if ap is None else f"{ap:.6f}"]
            )
    with open(reports / "evaluate.json", "w") as fh:
        json.dump(summary.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    fig = plot_eval_summary(summary, reports / "evaluate.png")
    print(
        f"mAP {summary.mAP:.4f} top1 {summary.top1:.4f} top5 {summary.top5:.4f} "
        f"({summary.n_queries} queries, {summary.n_unevaluable} unevaluable); "
        f"reports in {reports}; figure {fig}"
    )
    if summary.n_unevaluable > summary.n_queries:
        return EXIT_UNEVALUABLE
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    out = _require_out(cfg)
    cfg.echo(out)
    sw = cfg.section("sweep")
    axis = sw["axis"]
    values = sw["values"] if sw["values"] is not None else SWEEP_DEFAULT_VALUES[axis]
    frames, protocol = _load_dataset(cfg)
    bench = ToyBench(
        frames=frames, protocol=protocol, oracle=None, spec=cfg.toy_spec,
        crop_h=cfg.crop_h, crop_w=cfg.crop_w,
    )
    if axis == "gallery_size":
        ckpt = args.checkpoint or cfg.section("eval")["checkpoint"]
        if not ckpt:
            raise ConfigError("gallery-size sweeps need a trained checkpoint")
        embed_fn = _load_embedder(cfg, ckpt)

        def runner(axis_name: str, value: float, seed: int):
            proto = resample_galleries(frames, protocol, int(value), seed)
            return evaluate_protocol(
                frames, proto, _build_detector(cfg), embed_fn,
                match_iou=cfg.section("eval")["match_iou"],
                crop_h=cfg.crop_h, crop_w=cfg.crop_w,
            )
    else:
        runner = retrain_sweep_runner(
            bench, cfg.detector_config, sw["iterations"],
            match_iou=cfg.section("eval")["match_iou"], dim=cfg.section("aidq")["dim"],
        )
    report = sweep(axis, values, sw["repetitions"], cfg.seed, runner)
    reports = out / "reports"
    report.to_csv(reports / f"sweep_{axis}.csv")
    report.to_json(reports / f"sweep_{axis}.json")
    fig = plot_sweep(report, reports / f"sweep_{axis}.png")
    means = report.mean_by_value("mAP")
    pretty = ", ".join(f"{v:g}: {m:.4f}" for v, m in sorted(means.items()))
    print(f"swept {axis} over {len(values)} values x {sw['repetitions']} reps; "
          f"mean mAP {{{pretty}}}; reports in {reports}; figure {fig}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-detect": cmd_train_detect,
    "train-gan": cmd_train_gan,
    "synthesize": cmd_synthesize,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValidationError, IngestionError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
