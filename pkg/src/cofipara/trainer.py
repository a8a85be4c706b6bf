"""Two-stage training: sarcasm-detection pretraining, then target-identification fine-tuning."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import torch

from .checkpoint import Checkpoint, from_model, load_into, save_checkpoint
from .errors import CheckpointLoadError, ContractViolation, DatasetValidationError
from .image_decoder import to_candidates
from .metrics import MetricReport, msd_report, msti_report
from .model import SHARED_TAGS, CofiPara, ModelConfig, collate
from .rationale import RationaleSet
from .sample import Phase, Sample
from .text_decoder import Prediction, text_to_label
from .tokenizer import ByteTokenizer

log = logging.getLogger(__name__)

Pair = tuple[Sample, Optional[RationaleSet]]


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    learning_rate: float = 5e-5
    adam_eps: float = 1e-8
    image_size: int = 64
    alpha: float = 0.2
    beta: float = 1e-3
    gamma: float = 0.1
    L: int = 2
    K: int = 2
    seed: int = 0
    d_model: int = 64
    heads: int = 4
    encoder_layers: int = 2
    n_q: int = 16
    patch_size: int = 8
    max_tokens: int = 256
    max_target_len: int = 64
    max_steps: int = 0  # 0 = no cap

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("seed", "max_steps", "epochs"):
                if v < 0:
                    raise ContractViolation(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ContractViolation(f"{f.name} must be positive, got {v}")

    @classmethod
    def desk(cls, **overrides):
        """Small from-scratch settings used by the tests and the CLI default.

        A larger step size than the default stands in for pretrained backbones.
        """
        base = dict(learning_rate=1e-3)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def paper(cls, **overrides):
        """Full-size settings (12 decoder layers, 6 detector layers, 600px images)."""
        base = dict(image_size=600, L=12, K=6, d_model=768, heads=12, encoder_layers=12, max_tokens=512)
        base.update(overrides)
        return cls(**base)

    @property
    def loss_weights(self):
        return (self.alpha, self.beta, self.gamma)

    def model_config(self) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        return ModelConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractViolation(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_model(cfg: TrainConfig) -> CofiPara:
    torch.manual_seed(cfg.seed)
    return CofiPara(cfg.model_config())


def model_from_checkpoint(ckpt: Checkpoint) -> CofiPara:
    cfg = TrainConfig.from_dict(ckpt.config)
    model = build_model(cfg)
    load_into(model, ckpt)
    model.eval()
    return model


def validate_pairs(pairs: Sequence[Pair], phase: Phase):
    for s, r in pairs:
        if s.image is None:
            raise DatasetValidationError(f"sample {s.id!r}: image not loaded", s.id, "image")
        if r is None or not r.r_pos:
            raise DatasetValidationError(f"sample {s.id!r}: missing r_pos", s.id, "rationale_pos")
        if phase is Phase.PRETRAIN:
            if not r.r_neg:
                raise DatasetValidationError(f"sample {s.id!r}: missing r_neg", s.id, "rationale_neg")
            if s.msd_label is None:
                raise DatasetValidationError(f"sample {s.id!r}: missing msd_label", s.id, "msd_label")
        elif not s.is_msti:
            raise DatasetValidationError(f"sample {s.id!r}: no textual or visual targets", s.id, "textual_targets")


def _image_features(model: CofiPara, samples: Sequence[Sample], cfg: TrainConfig):
    """Frozen-encoder features, computed once per sample."""
    from .fusion import preprocess_image

    dtype = next(model.parameters()).dtype
    feats = {}
    for s in samples:
        px = preprocess_image(s.image, cfg.image_size, dtype).unsqueeze(0)
        feats[s.id] = model.image_encoder(px)[0]
    return feats


class TrainLog:
    """Per-step loss records; optionally mirrored to a JSONL file."""

    def __init__(self, path=None):
        self.records: list[dict] = []
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: dict):
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _run_stage(
    model: CofiPara,
    pairs: Sequence[Pair],
    cfg: TrainConfig,
    phase: Phase,
    train_log: TrainLog,
    checkpoint_dir=None,
    dev: Optional[Sequence[Pair]] = None,
    on_epoch: Optional[Callable[[int, CofiPara], None]] = None,
):
    tags = SHARED_TAGS if phase is Phase.PRETRAIN else None
    params = [p for _, p in model.trainable_parameters()]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate, eps=cfg.adam_eps)
    gen = torch.Generator().manual_seed(cfg.seed)
    tok = ByteTokenizer()
    feats = _image_features(model, [s for s, _ in pairs], cfg)
    best_state, best_score = None, None
    step = 0
    stop = False
    for epoch in range(cfg.epochs):
        model.train()
        order = torch.randperm(len(pairs), generator=gen).tolist()
        for start in range(0, len(order), cfg.batch_size):
            chunk = [pairs[i] for i in order[start : start + cfg.batch_size]]
            samples = [s for s, _ in chunk]
            batch = collate(
                samples, [r for _, r in chunk], phase, model.cfg, tok,
                image_feats=torch.stack([feats[s.id] for s in samples]),
            )
            losses, _ = model.losses(batch, phase, cfg.loss_weights)
            opt.zero_grad(set_to_none=True)
            losses.total.backward()
            opt.step()
            step += 1
            rec = {"step": step, "epoch": epoch, "lr": cfg.learning_rate}
            rec.update({k: v for k, v in losses.as_floats().items() if k.startswith("l_") or k == "total"})
            train_log.append(rec)
            if cfg.max_steps and step >= cfg.max_steps:
                stop = True
                break
        model.eval()
        if checkpoint_dir is not None:
            save_checkpoint(from_model(model, cfg.to_dict(), phase.value, tags), Path(checkpoint_dir) / f"{phase.value}-epoch{epoch:03d}.safetensors")
        if on_epoch is not None:
            on_epoch(epoch, model)
        if dev:
            score = _dev_score(model, dev, phase)
            log.info("%s epoch %d dev score %.4f", phase.value, epoch, score)
            if best_score is None or score > best_score:
                best_score, best_state = score, copy.deepcopy(model.state_dict())
        if stop:
            break
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return from_model(model, cfg.to_dict(), phase.value, tags)


def _dev_score(model, dev, phase):
    report = evaluate(model, dev, phase)
    if phase is Phase.PRETRAIN:
        return report.msd_accuracy
    return (report.em + report.ap50) / 2


def pretrain_msd(
    pairs: Sequence[Pair], cfg: TrainConfig, log_path=None, checkpoint_dir=None, dev=None, train_log=None, on_epoch=None
) -> Checkpoint:
    """Train on sarcasm detection with the text loss only.

    The returned checkpoint holds the modules shared with fine-tuning
    (encoders, fusion, text decoder); the detector is not part of this stage.
    """
    validate_pairs(pairs, Phase.PRETRAIN)
    model = build_model(cfg)
    train_log = train_log if train_log is not None else TrainLog(log_path)
    return _run_stage(model, pairs, cfg, Phase.PRETRAIN, train_log, checkpoint_dir, dev, on_epoch)


def init_finetune_model(init: Optional[Checkpoint], cfg: TrainConfig, from_scratch=False) -> CofiPara:
    """Fresh model whose shared modules come from ``init`` (unless ``from_scratch``)."""
    model = build_model(cfg)
    if from_scratch:
        return model
    if init is None:
        raise ContractViolation("fine-tuning needs a pretrain checkpoint unless from_scratch is set")
    if init.phase != Phase.PRETRAIN.value:
        raise CheckpointLoadError(f"expected a pretrain checkpoint, got phase {init.phase!r}")
    load_into(model, init, tags=SHARED_TAGS)
    return model


def finetune_msti(
    init: Optional[Checkpoint], pairs: Sequence[Pair], cfg: TrainConfig, from_scratch=False,
    log_path=None, checkpoint_dir=None, dev=None, train_log=None, on_epoch=None,
) -> Checkpoint:
    """Fine-tune on target identification with L_img + L_text."""
    validate_pairs(pairs, Phase.FINETUNE)
    model = init_finetune_model(init, cfg, from_scratch)
    train_log = train_log if train_log is not None else TrainLog(log_path)
    return _run_stage(model, pairs, cfg, Phase.FINETUNE, train_log, checkpoint_dir, dev, on_epoch)


@torch.no_grad()
def predict_batch(model: CofiPara, pairs: Sequence[Pair], phase) -> list[Prediction]:
    phase = Phase(phase)
    model.eval()
    tok = ByteTokenizer()
    dtype = next(model.parameters()).dtype
    batch = collate([s for s, _ in pairs], [r for _, r in pairs], phase, model.cfg, tok, with_targets=False, dtype=dtype)
    enc = model.encode(batch.ids, batch.mask, model.image_encoder(batch.pixels))
    tokens = model.text_decoder.generate(enc.memory, enc.text_mask, enc.queries.I_Q, model.cfg.max_target_len)
    preds = [Prediction(tokens=t, decoded_text=tok.decode(t)) for t in tokens]
    if phase is Phase.FINETUNE:
        boxes, logits = model.detect(enc)
        for p, b, lg in zip(preds, boxes, logits):
            cands = to_candidates(b, lg)
            p.boxes = sorted(cands, key=lambda bc: -bc[1])
    return preds


def predict(model, sample: Sample, rationales: Optional[RationaleSet], phase) -> Prediction:
    """Predict one sample; ``model`` may be a CofiPara or a Checkpoint."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    return predict_batch(model, [(sample, rationales)], phase)[0]


def evaluate(model, pairs: Sequence[Pair], phase, batch_size=8) -> MetricReport:
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    phase = Phase(phase)
    preds = []
    for i in range(0, len(pairs), batch_size):
        preds.extend(predict_batch(model, pairs[i : i + batch_size], phase))
    if phase is Phase.PRETRAIN:
        return msd_report([text_to_label(p.decoded_text) for p in preds], [s.msd_label for s, _ in pairs])
    return msti_report(
        [p.decoded_text for p in preds],
        [s.textual_targets for s, _ in pairs],
        [p.boxes for p in preds],
        [s.visual_targets for s, _ in pairs],
    )
