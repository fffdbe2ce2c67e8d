"""
Knowledge-base files: the neuron bank and its experts, bound to one base checkpoint.

Layout (little-endian)::

    b"SCENKB"              magic, 6 bytes
    u32                    format version
    u32 layer, f64 theta, u32 h, u32 d_model, 8 bytes base fingerprint,
    u32 expert count, u8 neuron input mode
    per expert:
        u32 index
        u16 member count, then per member u16 length + utf-8 id
        u32 expert steps, f64 expert loss, u8 expert success
        u32 neuron steps, f64 neuron loss, u8 neuron success, f64 target activation
        f32[h]                neuron row
        f32[h * d_model]      expert W_down
"""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Union

import numpy as np

from src.scenlab.editing.editor import EditRun
from src.scenlab.editing.records import ExpertRecord, NeuronBank, NeuronInput, NeuronRecord, merge_neurons
from src.scenlab.exceptions import FingerprintError, KnowledgeBaseError
from src.scenlab.lm.checkpoint import checkpoint_fingerprint
from src.scenlab.lm.model import TransformerLM
from src.utils.files import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"SCENKB"
VERSION = 1
_HEADER = struct.Struct("<IdII8sIB")
_MODES = (NeuronInput.PRE_ACTIVATION, NeuronInput.POST_ACTIVATION)


@dataclass
class KnowledgeBase:

    """
    Stored edits of one layer.

    :param fingerprint: digest of the base checkpoint the edits were made on.
    :param neuron_input: FNN vector the neurons read.
    """

    bank: NeuronBank
    experts: List[ExpertRecord]
    neurons: List[NeuronRecord]
    fingerprint: bytes
    neuron_input: NeuronInput
    d_model: int

    @classmethod
    def from_run(cls, run: EditRun, model: TransformerLM, neuron_input: NeuronInput) -> "KnowledgeBase":
        """Bind the output of :func:`sequential_edit` to the model it was made on."""
        return cls(
            bank=run.bank,
            experts=list(run.experts),
            neurons=list(run.neurons),
            fingerprint=checkpoint_fingerprint(model),
            neuron_input=NeuronInput(neuron_input),
            d_model=model.config.d_model,
        )

    def check_model(self, model: TransformerLM) -> None:
        """
        Refuse a model other than the one the edits were made on.

        :raises FingerprintError: fingerprint or sizes differ.
        """
        if (self.bank.width, self.d_model) != (model.config.d_ffn, model.config.d_model):
            raise FingerprintError(f"knowledge base sizes h={self.bank.width}, d_model={self.d_model} do not match the checkpoint")
        if checkpoint_fingerprint(model) != self.fingerprint:
            raise FingerprintError("knowledge base was built on a different base checkpoint")


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise KnowledgeBaseError(f"sample id too long: {text[:40]!r}...")
    return struct.pack("<H", len(raw)) + raw


def kb_bytes(kb: KnowledgeBase) -> bytes:
    """Serialize ``kb``."""
    if len(kb.experts) != len(kb.neurons) or len(kb.experts) != len(kb.bank):
        raise KnowledgeBaseError(f"{len(kb.experts)} experts, {len(kb.neurons)} neurons and {len(kb.bank)} bank rows")
    h, d = kb.bank.width, kb.d_model
    parts = [
        MAGIC,
        struct.pack("<I", VERSION),
        _HEADER.pack(kb.bank.layer, kb.bank.theta, h, d, kb.fingerprint, len(kb.experts), _MODES.index(kb.neuron_input)),
    ]
    for expert, neuron, row in zip(kb.experts, kb.neurons, kb.bank.rows):
        if expert.weight.shape != (h, d) or row.shape != (h,):
            raise KnowledgeBaseError(f"expert {expert.index} does not have shape ({h}, {d})")
        parts.append(struct.pack("<IH", expert.index, len(expert.member_ids)))
        parts.extend(_pack_text(member) for member in expert.member_ids)
        parts.append(struct.pack("<IdB", expert.steps, expert.final_loss, expert.success))
        parts.append(struct.pack("<IdBd", neuron.steps, neuron.final_loss, neuron.success, neuron.target_activation))
        parts.append(np.asarray(row, dtype="<f4").tobytes())
        parts.append(np.asarray(expert.weight, dtype="<f4").tobytes())
    return b"".join(parts)


def save_kb(path: Union[str, Path], kb: KnowledgeBase) -> Path:
    """Write ``kb`` atomically."""
    path = atomic_write_bytes(path, kb_bytes(kb))
    logger.info("knowledge base with %d experts written to %s", len(kb.experts), path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise KnowledgeBaseError("truncated knowledge base")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def floats(self, count: int) -> np.ndarray:
        end = self.offset + 4 * count
        if end > len(self.data):
            raise KnowledgeBaseError("truncated knowledge base")
        values = np.frombuffer(self.data, dtype="<f4", count=count, offset=self.offset).astype(np.float32)
        self.offset = end
        return values

    def text(self) -> str:
        (length,) = self.unpack("<H")
        if self.offset + length > len(self.data):
            raise KnowledgeBaseError("truncated knowledge base")
        raw = self.data[self.offset : self.offset + length]
        self.offset += length
        return raw.decode("utf-8")


def parse_kb(data: bytes, allow_empty: bool = False) -> KnowledgeBase:
    """
    Rebuild a knowledge base from bytes.

    :param allow_empty: accept a well-formed file that holds zero experts.
    :raises KnowledgeBaseError: empty, malformed, truncated or unsupported data.
    """
    if not data:
        raise KnowledgeBaseError("no experts: knowledge base file is empty")
    if data[: len(MAGIC)] != MAGIC:
        raise KnowledgeBaseError("bad magic: not a scenlab knowledge base")
    reader = _Reader(data)
    reader.offset = len(MAGIC)
    (version,) = reader.unpack("<I")
    if version != VERSION:
        raise KnowledgeBaseError(f"unsupported version {version} (expected {VERSION})")
    layer, theta, h, d, fingerprint, count, mode = reader.unpack(_HEADER.format)
    if count == 0 and not allow_empty:
        raise KnowledgeBaseError("no experts in knowledge base")
    if mode >= len(_MODES):
        raise KnowledgeBaseError(f"unknown neuron input mode {mode}")

    experts, neurons = [], []
    for _ in range(count):
        index, n_members = reader.unpack("<IH")
        members = tuple(reader.text() for _ in range(n_members))
        expert_steps, expert_loss, expert_success = reader.unpack("<IdB")
        neuron_steps, neuron_loss, neuron_success, target_activation = reader.unpack("<IdBd")
        row = reader.floats(h)
        weight = reader.floats(h * d).reshape(h, d)
        experts.append(ExpertRecord(index, layer, weight, members, expert_steps, expert_loss, bool(expert_success)))
        neurons.append(NeuronRecord(index, layer, row, members, neuron_steps, neuron_loss, bool(neuron_success), target_activation))
    if reader.offset != len(data):
        raise KnowledgeBaseError(f"{len(data) - reader.offset} trailing bytes after the last expert")
    if [e.index for e in experts] != list(range(count)):
        raise KnowledgeBaseError("expert indices are not consecutive")
    bank = merge_neurons(neurons, theta, layer=layer, width=h)
    return KnowledgeBase(bank=bank, experts=experts, neurons=neurons, fingerprint=fingerprint, neuron_input=_MODES[mode], d_model=d)


def load_kb(path: Union[str, Path], model: Optional[TransformerLM] = None, allow_empty: bool = False) -> KnowledgeBase:
    """
    Read a knowledge base, optionally checking it against the loaded base model.

    :raises FingerprintError: ``model`` is not the checkpoint the edits were made on.
    """
    with open(path, "rb") as f:
        kb = parse_kb(f.read(), allow_empty=allow_empty)
    if model is not None:
        kb.check_model(model)
    return kb
