"""Dataset JSONL I/O, the OCR-target re-annotation pass and synthetic fixtures.

Record schema (one JSON object per line)::

    {"id": str, "text": str, "image_path": str,
     "msd_label": "sarcastic" | "non-sarcastic" (optional),
     "textual_targets": [str], "visual_targets": [{"cx","cy","w","h"}],
     "rationale_pos": str (optional), "rationale_neg": str (optional)}

``image_path`` is relative to the images directory (default: the JSONL
file's directory).
"""
from __future__ import annotations

import enum
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Protocol

import numpy as np

from .boxes import BoundingBox
from .errors import DatasetValidationError
from .rationale import RationaleSet, content_hash64
from .sample import Sample, Stance, contains_span

log = logging.getLogger(__name__)

DEFAULT_AREA_THRESHOLD = 0.15
OCR_MARKER = "[ocr]"


@dataclass
class DatasetManifest:
    split: str
    records: list[Sample]
    rationales: dict[str, RationaleSet] = field(default_factory=dict)

    @property
    def counts(self):
        return {
            "textual_target_count": sum(len(s.textual_targets) for s in self.records),
            "visual_target_count": sum(len(s.visual_targets) for s in self.records),
            "total": len(self.records),
        }

    def pairs(self):
        return [(s, self.rationales.get(s.id)) for s in self.records]


def load_image(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def _parse_record(rec: dict, lineno: int) -> Sample:
    rid = rec.get("id")
    if not isinstance(rid, str) or not rid:
        raise DatasetValidationError(f"line {lineno}: missing or non-string id", record_id=rid, field="id")
    for key, kind in (("text", str), ("image_path", str)):
        if not isinstance(rec.get(key), kind):
            raise DatasetValidationError(f"record {rid}: field {key!r} missing or not a string", rid, key)
    label = rec.get("msd_label")
    if label is not None:
        try:
            label = Stance(label)
        except ValueError:
            raise DatasetValidationError(f"record {rid}: bad msd_label {label!r}", rid, "msd_label") from None
    tt = rec.get("textual_targets", [])
    if not isinstance(tt, list) or not all(isinstance(t, str) for t in tt):
        raise DatasetValidationError(f"record {rid}: textual_targets must be a list of strings", rid, "textual_targets")
    boxes = []
    for i, b in enumerate(rec.get("visual_targets", [])):
        try:
            boxes.append(BoundingBox(float(b["cx"]), float(b["cy"]), float(b["w"]), float(b["h"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetValidationError(f"record {rid}: visual_targets[{i}] invalid: {exc}", rid, "visual_targets") from None
    sample = Sample(
        id=rid, text=rec["text"], image_path=rec["image_path"], msd_label=label,
        textual_targets=list(tt), visual_targets=boxes,
    )
    problems = sample.invariant_errors()
    if problems:
        fld, msg = problems[0]
        raise DatasetValidationError(f"record {rid}: {fld}: {msg}", rid, fld)
    return sample


def load_dataset(path, split="train", images_dir=None, load_images=True) -> DatasetManifest:
    """Read and validate a JSONL split; images are resolved and (optionally) loaded."""
    path = Path(path)
    if not path.exists():
        raise DatasetValidationError(f"dataset file {path} does not exist")
    root = Path(images_dir) if images_dir is not None else path.parent
    records, rationales, seen = [], {}, set()
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetValidationError(f"line {lineno}: invalid JSON ({exc})") from None
            sample = _parse_record(rec, lineno)
            if sample.id in seen:
                raise DatasetValidationError(f"duplicate id {sample.id!r}", sample.id, "id")
            seen.add(sample.id)
            if rec.get("rationale_pos"):
                rationales[sample.id] = RationaleSet(
                    r_pos=rec["rationale_pos"], r_neg=rec.get("rationale_neg"),
                    backend_id=rec.get("rationale_backend", "file"),
                    prompt_hash=content_hash64(rec["rationale_pos"], rec.get("rationale_neg") or ""),
                )
            records.append(sample)
    missing = [str(root / s.image_path) for s in records if not (root / s.image_path).exists()]
    if missing:
        raise DatasetValidationError("missing image files:\n  " + "\n  ".join(missing), field="image_path")
    if load_images:
        for s in records:
            s.image = load_image(root / s.image_path)
    return DatasetManifest(split=split, records=records, rationales=rationales)


def record_dict(sample: Sample, rationales: Optional[RationaleSet] = None) -> dict:
    rec = {
        "id": sample.id,
        "text": sample.text,
        "image_path": sample.image_path,
        "textual_targets": list(sample.textual_targets),
        "visual_targets": [b.to_dict() for b in sample.visual_targets],
    }
    if sample.msd_label is not None:
        rec["msd_label"] = sample.msd_label.value
    if rationales is not None:
        rec["rationale_pos"] = rationales.r_pos
        if rationales.r_neg is not None:
            rec["rationale_neg"] = rationales.r_neg
        rec["rationale_backend"] = rationales.backend_id
    return rec


def save_dataset(path, samples: Iterable[Sample], rationales: Optional[dict] = None):
    """Write JSONL with sorted keys, one record per line, in the given order."""
    rationales = rationales or {}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(record_dict(s, rationales.get(s.id)), sort_keys=True, ensure_ascii=False) + "\n")
    return path


# --- re-annotation -------------------------------------------------------


class Action(str, enum.Enum):
    KEEP_BOX = "keep_box"
    CONVERT_TO_TEXT = "convert_to_text"
    DROP = "drop"


@dataclass
class ReannotationDecision:
    sample_id: str
    box_index: int
    box: BoundingBox
    area_ratio: float
    flagged: bool
    ocr_text: Optional[str] = None
    action: Action = Action.KEEP_BOX
    note: str = ""

    def to_dict(self):
        return {
            "sample_id": self.sample_id,
            "box_index": self.box_index,
            "box": self.box.to_dict(),
            "area_ratio": self.area_ratio,
            "flagged": self.flagged,
            "ocr_text": self.ocr_text,
            "action": self.action.value,
            "note": self.note,
        }


class OcrClient(Protocol):
    def read(self, sample: Sample, box_index: int) -> Optional[str]:
        """Characters inside ``sample.visual_targets[box_index]``, or None if nothing is legible."""


class Corrector(Protocol):
    def confirm(self, sample: Sample, box_index: int, text: str) -> bool:
        """Does ``text`` match the characters shown in the box?"""


class MockOcr:
    """Returns canned text keyed by (sample id, box index); raises for ids in ``fail``."""

    def __init__(self, texts: dict, fail=()):
        self.texts = dict(texts)
        self.fail = set(fail)

    def read(self, sample, box_index):
        if sample.id in self.fail:
            raise RuntimeError(f"OCR engine failed on {sample.id}")
        return self.texts.get((sample.id, box_index))


class AcceptAll:
    def confirm(self, sample, box_index, text):
        return bool(text and text.strip())


def area_ratio_filter(sample: Sample, threshold: float = DEFAULT_AREA_THRESHOLD) -> list[ReannotationDecision]:
    """Flag boxes whose area, as a fraction of the image, exceeds ``threshold``."""
    out = []
    for i, b in enumerate(sample.visual_targets):
        ratio = b.w * b.h
        out.append(ReannotationDecision(sample.id, i, b, ratio, flagged=ratio > threshold))
    return out


def load_review(path) -> dict[tuple[str, int], Action]:
    """Manual-validation overrides: JSONL of {sample_id, box_index, action}."""
    overrides = {}
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                overrides[(r["sample_id"], int(r["box_index"]))] = Action(r["action"])
    return overrides


def convert_ocr_targets(sample: Sample, decisions, ocr: OcrClient, corrector: Optional[Corrector] = None, review=None):
    """Turn confirmed OCR boxes into textual targets.

    Returns (new sample, decisions with actions filled in). A confirmed box
    is removed from ``visual_targets``; its text becomes a textual target
    and, if it is not already a span of the tweet, is appended to the text
    behind an ``[ocr]`` marker. If the text is already a textual target the
    box is dropped instead, so no duplicate target is created. OCR failures
    and unconfirmed readings keep the box.
    """
    corrector = corrector or AcceptAll()
    review = review or {}
    text = sample.text
    textual = list(sample.textual_targets)
    remove = set()
    out = []
    for d in decisions:
        d = ReannotationDecision(**{**d.__dict__})
        if d.flagged:
            try:
                d.ocr_text = ocr.read(sample, d.box_index)
            except Exception as exc:  # any engine failure keeps the box
                log.warning("OCR failed for %s box %d: %s", sample.id, d.box_index, exc)
                d.ocr_text, d.note = None, f"ocr failure: {exc}"
            reading = (d.ocr_text or "").strip()
            if reading and corrector.confirm(sample, d.box_index, reading):
                d.ocr_text = reading
                already = any(t.strip().lower() == reading.lower() for t in textual)
                d.action = Action.DROP if already else Action.CONVERT_TO_TEXT
            override = review.get((sample.id, d.box_index))
            if override is not None:
                if override is Action.CONVERT_TO_TEXT and not reading:
                    d.note = "override ignored: no OCR text"
                else:
                    d.action = override
            if d.action is Action.CONVERT_TO_TEXT:
                if not contains_span(text, reading):
                    text = f"{text} {OCR_MARKER} {reading}"
                textual.append(reading)
                remove.add(d.box_index)
            elif d.action is Action.DROP:
                remove.add(d.box_index)
        out.append(d)
    if not remove:
        return sample, out
    new = Sample(
        id=sample.id, text=text, image=sample.image, image_path=sample.image_path,
        msd_label=sample.msd_label, textual_targets=textual,
        visual_targets=[b for i, b in enumerate(sample.visual_targets) if i not in remove],
    )
    return new, out


def reannotate(samples, ocr, corrector=None, threshold=DEFAULT_AREA_THRESHOLD, review=None):
    """Run filter + conversion over a split; output order follows sample id."""
    new_samples, log_records = [], []
    for s in sorted(samples, key=lambda s: s.id):
        decisions = area_ratio_filter(s, threshold)
        s2, decided = convert_ocr_targets(s, decisions, ocr, corrector, review)
        new_samples.append(s2)
        log_records.extend(decided)
    return new_samples, log_records


# --- synthetic fixtures --------------------------------------------------

_PALETTE = [(230, 57, 70), (42, 157, 143), (233, 196, 106), (69, 123, 157), (244, 162, 97), (131, 56, 236)]


def render_image(boxes: Iterable[BoundingBox], size=64, seed=0) -> np.ndarray:
    """A noisy grey canvas with each box painted as a solid coloured rectangle."""
    rng = np.random.default_rng(seed)
    img = rng.integers(90, 130, size=(size, size, 3), dtype=np.uint8)
    for k, b in enumerate(boxes):
        x1, y1, x2, y2 = (int(round(v * size)) for v in b.corners())
        img[y1:y2, x1:x2] = _PALETTE[(seed + k) % len(_PALETTE)]
    return img


_SUBJECTS = ["the train driver", "the new phone", "monday morning", "the weather", "my boss", "the traffic jam",
             "the free lunch", "the long queue", "the wifi", "the meeting", "the diet plan", "the parking lot"]
_FRAMES = ["wow {} is just amazing", "love how {} works today", "thank god for {} again",
           "nothing beats {} honestly", "so glad about {} right now", "what a joy {} is"]
_PLAIN = ["had a quiet walk near {}", "here is a photo of {}", "just saw {} on the way", "a picture of {} from today"]


def synthetic_msd(n, size=64, seed=0) -> list[Sample]:
    """Balanced detection samples: even ids sarcastic, odd ids not."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        subj = _SUBJECTS[(i + seed) % len(_SUBJECTS)]
        sarcastic = i % 2 == 0
        frame = _FRAMES[i % len(_FRAMES)] if sarcastic else _PLAIN[i % len(_PLAIN)]
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        box = BoundingBox(float(cx), float(cy), 0.3, 0.3)
        out.append(Sample(
            id=f"msd-{seed}-{i:03d}", text=frame.format(subj), image=render_image([box], size, seed + i),
            image_path=f"msd-{seed}-{i:03d}.png",
            msd_label=Stance.SARCASTIC if sarcastic else Stance.NON_SARCASTIC,
        ))
    return out


def synthetic_msti(n, size=64, seed=0, with_text=True, with_box=True) -> list[Sample]:
    """Sarcastic samples with one textual target and one visual target each."""
    rng = np.random.default_rng(seed + 1000)
    out = []
    for i in range(n):
        subj = _SUBJECTS[(i * 5 + seed) % len(_SUBJECTS)]
        frame = _FRAMES[(i + seed) % len(_FRAMES)]
        w, h = rng.uniform(0.2, 0.45, size=2)
        cx = rng.uniform(w / 2, 1 - w / 2)
        cy = rng.uniform(h / 2, 1 - h / 2)
        box = BoundingBox(float(cx), float(cy), float(w), float(h))
        target = subj.split(" ", 1)[-1] if subj.startswith("the ") or subj.startswith("my ") else subj
        out.append(Sample(
            id=f"msti-{seed}-{i:03d}", text=frame.format(subj),
            image=render_image([box] if with_box else [], size, seed + 100 + i),
            image_path=f"msti-{seed}-{i:03d}.png", msd_label=Stance.SARCASTIC,
            textual_targets=[target] if with_text else [], visual_targets=[box] if with_box else [],
        ))
    return out


def write_fixture(directory, name, samples, rationales=None):
    """Save PNGs next to a JSONL file so :func:`load_dataset` can read it back."""
    from PIL import Image

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for s in samples:
        Image.fromarray(s.image).save(directory / s.image_path)
    return save_dataset(directory / name, samples, rationales)
