"""Byte-level tokenizer with a handful of reserved ids.

The vocabulary is fixed (4 specials + 256 bytes), so checkpoints from the
detection stage and the target-identification stage always agree on the
embedding shape regardless of which corpus they were trained on.
"""
from __future__ import annotations

from .rationale import SEP

PAD, BOS, EOS, SEP_ID = 0, 1, 2, 3
_OFFSET = 4
VOCAB_SIZE = _OFFSET + 256


class ByteTokenizer:
    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    sep_id = SEP_ID
    vocab_size = VOCAB_SIZE

    def encode(self, text: str, add_eos: bool = False) -> list[int]:
        ids: list[int] = []
        for i, part in enumerate(text.split(SEP)):
            if i:
                ids.append(SEP_ID)
            ids.extend(b + _OFFSET for b in part.encode("utf-8"))
        if add_eos:
            ids.append(EOS)
        return ids

    def decode(self, ids) -> str:
        out = bytearray()
        pieces = []
        for i in ids:
            i = int(i)
            if i == EOS:
                break
            if i == SEP_ID:
                pieces.append(out.decode("utf-8", errors="replace"))
                out = bytearray()
            elif i >= _OFFSET:
                out.append(i - _OFFSET)
        pieces.append(out.decode("utf-8", errors="replace"))
        return SEP.join(pieces)
