"""Command-line entry point: ``cofipara <subcommand> [flags]``.

Subcommands run in pipeline order::

    rationales -> reannotate (optional) -> pretrain -> finetune -> evaluate / predict

Every failure prints one line ``error: <code>: <message>`` to stderr and
exits with status 1 (argparse usage errors exit with 2).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .data import MockOcr, load_dataset, load_review, reannotate, save_dataset
from .errors import CofiParaError, RejectedInput
from .rationale import BackendConfig, HttpClient, MockClient, RationaleCache, generate_for_phase
from .sample import Phase
from .text_decoder import text_to_label
from .trainer import TrainConfig, evaluate, finetune_msti, model_from_checkpoint, predict_batch, pretrain_msd

log = logging.getLogger("cofipara")


def _config(args) -> TrainConfig:
    """Desk defaults, overlaid with the keys of --config, then --seed."""
    cfg = TrainConfig.desk()
    if args.config:
        overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        cfg = TrainConfig.from_dict({**cfg.to_dict(), **overrides})
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _require(path, what):
    if path is None:
        raise RejectedInput(f"--{what} is required")
    if not Path(path).exists():
        raise RejectedInput(f"{what} path {path} does not exist")
    return Path(path)


def _images_root(args):
    return Path(args.images) if args.images else Path(args.data).parent


def _relocated(samples, images_root, out_path):
    """Copies whose image_path resolves from the output file's directory."""
    out_dir = Path(out_path).resolve().parent
    return [
        dataclasses.replace(s, image_path=os.path.relpath((images_root / s.image_path).resolve(), out_dir))
        for s in samples
    ]


def _clock():
    # SOURCE_DATE_EPOCH pins cache timestamps for reproducible builds
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch is None:
        return None
    import datetime as dt

    stamp = dt.datetime.fromtimestamp(int(epoch), dt.timezone.utc).isoformat(timespec="seconds")
    return lambda: stamp


def cmd_rationales(args):
    data = _require(args.data, "data")
    if args.out is None:
        raise RejectedInput("--out is required")
    phase = Phase(args.phase or "pretrain")
    manifest = load_dataset(data, images_dir=args.images)
    if args.backend == "http":
        client = HttpClient(BackendConfig.from_env())
    else:
        client = MockClient()
    cache = RationaleCache(args.cache, clock=_clock())
    rationales = generate_for_phase(manifest.records, phase, client, cache, jobs=args.jobs)
    samples = _relocated(manifest.records, _images_root(args), args.out)
    save_dataset(args.out, samples, rationales)
    log.info("wrote %d augmented records to %s", len(samples), args.out)


def cmd_reannotate(args):
    data = _require(args.data, "data")
    ocr_path = _require(args.ocr, "ocr")
    if args.out is None:
        raise RejectedInput("--out is required")
    manifest = load_dataset(data, images_dir=args.images, load_images=False)
    texts = {}
    with ocr_path.open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                texts[(r["sample_id"], int(r["box_index"]))] = r["text"]
    review = load_review(_require(args.review, "review")) if args.review else None
    samples, decisions = reannotate(manifest.records, MockOcr(texts), threshold=args.threshold, review=review)
    out = Path(args.out)
    save_dataset(out, _relocated(samples, _images_root(args), out), manifest.rationales)
    log_path = out.with_name(out.stem + ".decisions.jsonl")
    with log_path.open("w", encoding="utf-8") as fh:
        for d in decisions:
            fh.write(json.dumps(d.to_dict(), sort_keys=True) + "\n")
    before, after = manifest.counts, dataclasses.replace(manifest, records=samples).counts
    log.info("visual targets %d -> %d, textual targets %d -> %d", before["visual_target_count"],
             after["visual_target_count"], before["textual_target_count"], after["textual_target_count"])


def _train_inputs(args):
    data = _require(args.data, "data")
    if args.out is None:
        raise RejectedInput("--out is required")
    pairs = load_dataset(data, images_dir=args.images).pairs()
    dev = load_dataset(_require(args.dev, "dev")).pairs() if args.dev else None
    return pairs, dev, Path(args.out)


def cmd_pretrain(args):
    pairs, dev, out = _train_inputs(args)
    cfg = _config(args)
    ckpt = pretrain_msd(pairs, cfg, log_path=out / "pretrain-log.jsonl", checkpoint_dir=out / "epochs", dev=dev)
    save_checkpoint(ckpt, out / "pretrain.safetensors")
    log.info("pretrain checkpoint written to %s", out / "pretrain.safetensors")


def cmd_finetune(args):
    pairs, dev, out = _train_inputs(args)
    cfg = _config(args)
    init = None
    if not args.from_scratch:
        init = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    ckpt = finetune_msti(init, pairs, cfg, from_scratch=args.from_scratch,
                         log_path=out / "finetune-log.jsonl", checkpoint_dir=out / "epochs", dev=dev)
    save_checkpoint(ckpt, out / "finetune.safetensors")
    log.info("finetune checkpoint written to %s", out / "finetune.safetensors")


def _eval_inputs(args):
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    pairs = load_dataset(_require(args.data, "data"), images_dir=args.images).pairs()
    if args.out is None:
        raise RejectedInput("--out is required")
    return ckpt, pairs, Phase(args.phase or ckpt.phase)


def cmd_evaluate(args):
    ckpt, pairs, phase = _eval_inputs(args)
    report = evaluate(model_from_checkpoint(ckpt), pairs, phase)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    print(report.table())


def cmd_predict(args):
    ckpt, pairs, phase = _eval_inputs(args)
    model = model_from_checkpoint(ckpt)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", encoding="utf-8") as fh:
        for i in range(0, len(pairs), 8):
            chunk = pairs[i : i + 8]
            for (s, r), p in zip(chunk, predict_batch(model, chunk, phase)):
                rec = {"id": s.id, "text": p.decoded_text, "explanation": r.r_pos if r else None}
                if phase is Phase.PRETRAIN:
                    label = text_to_label(p.decoded_text)
                    rec["label"] = label.value if label is not None else None
                else:
                    rec["targets"] = [t.strip() for t in p.decoded_text.split(";") if t.strip()]
                    rec["boxes"] = [{**b.to_dict(), "confidence": c} for b, c in p.emitted(args.conf_threshold)]
                fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


COMMANDS = {
    "rationales": cmd_rationales,
    "reannotate": cmd_reannotate,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "predict": cmd_predict,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cofipara", description="Multimodal sarcasm target identification pipeline")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", help="input JSONL split")
        p.add_argument("--images", help="image directory (default: next to --data)")
        p.add_argument("--out", help="output file or directory")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--jobs", type=int, default=1, help="max concurrent backend requests")
        return p

    p = add("rationales", "generate competing or sarcastic rationales")
    p.add_argument("--cache", help="JSONL response cache")
    p.add_argument("--phase", choices=[x.value for x in Phase], default="pretrain")
    p.add_argument("--backend", choices=["mock", "http"], default="mock")

    p = add("reannotate", "convert large OCR-text boxes to textual targets")
    p.add_argument("--threshold", type=float, default=0.15, help="box area ratio above which a box is checked")
    p.add_argument("--ocr", help="JSONL of {sample_id, box_index, text} readings")
    p.add_argument("--review", help="JSONL of manual {sample_id, box_index, action} overrides")

    for name, help_ in (("pretrain", "train on sarcasm detection"), ("finetune", "train on target identification")):
        p = add(name, help_)
        p.add_argument("--config", help="JSON file with TrainConfig keys")
        p.add_argument("--dev", help="dev split used to pick the best epoch")
        if name == "finetune":
            p.add_argument("--checkpoint", help="pretrain checkpoint to start from")
            p.add_argument("--from-scratch", action="store_true", help="skip the pretrain checkpoint")

    for name, help_ in (("evaluate", "write a metric report"), ("predict", "write per-sample predictions")):
        p = add(name, help_)
        p.add_argument("--checkpoint", help="trained checkpoint")
        p.add_argument("--phase", choices=[x.value for x in Phase], help="default: the checkpoint's phase")
        if name == "predict":
            p.add_argument("--conf-threshold", type=float, default=0.5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise RejectedInput("--jobs must be >= 1")
        COMMANDS[args.command](args)
    except CofiParaError as exc:
        print(f"error: {exc.code}: {' | '.join(str(exc).splitlines())}", file=sys.stderr)
        return 1
    except (OSError, json.JSONDecodeError, KeyError, ValueError) as exc:
        print(f"error: io: {type(exc).__name__}: {' | '.join(str(exc).splitlines())}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
