"""
Toy pre-norm decoder-only transformer.

Each block computes ``x + attn(ln1(x))`` followed by ``x + W_down(act(W_up(ln2(x))))``.
The vector entering the FNN, ``ln2(x)`` after the attention residual, is what the
editing code taps at the last prompt token.
"""

import logging
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.scenlab.autodiff import ops
from src.scenlab.autodiff.tensor import Tensor
from src.scenlab.exceptions import ConfigError, ShapeError
from src.scenlab.lm.tokenizer import Tokenizer

logger = logging.getLogger(__name__)

NORM_STYLE = "pre"


@dataclass(frozen=True)
class ModelConfig:

    """
    Transformer sizes.

    ``d_ffn`` is the FNN intermediate width, the length of every indexing neuron and
    the row count of every expert matrix. ``vocab_size`` of 0 means "take it from the
    tokenizer".
    """

    vocab_size: int = 0
    d_model: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 256
    max_seq_len: int = 32
    nonlinearity: str = "gelu"
    seed: int = 1234

    def validate(self) -> "ModelConfig":
        """Check sizes; returns self so calls can be chained."""
        for name in ("d_model", "n_layers", "n_heads", "d_ffn", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 0:
            raise ConfigError("model.vocab_size must be >= 0")
        if self.d_model % self.n_heads:
            raise ConfigError(f"model.d_model ({self.d_model}) must be divisible by model.n_heads ({self.n_heads})")
        if self.nonlinearity not in ops.NONLINEARITIES:
            raise ConfigError(f"model.nonlinearity must be one of {sorted(ops.NONLINEARITIES)}")
        return self


@dataclass(frozen=True)
class FnnOverride:

    """Replacement ``W_down`` (``d_ffn x d_model``) for one layer."""

    layer: int
    weight: Tensor


@dataclass(frozen=True)
class TapRequest:

    """
    Ask the forward pass for the FNN input of ``layer``.

    :param positions: one position per batch row; defaults to each row's last token.
    :param stop: skip everything after the tapped layer's ``W_up`` (no logits).
    """

    layer: int
    positions: Optional[Sequence[int]] = None
    stop: bool = False


@dataclass
class TapResult:

    """FNN input ``x_att`` (``B x d_model``) and its ``W_up`` image before and after the nonlinearity."""

    layer: int
    x_att: np.ndarray
    up: np.ndarray
    hidden: np.ndarray


@dataclass
class ForwardResult:

    """Logits (absent when the tap stopped early) and the optional tap."""

    logits: Optional[Tensor]
    tap: Optional[TapResult] = None


def parameter_names(config: ModelConfig) -> List[str]:
    """Parameter names in initialization and serialization order."""
    names = ["tok_emb", "pos_emb"]
    for layer in range(config.n_layers):
        names += [f"h{layer}.{p}" for p in ("ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_up", "w_down")]
    return names + ["lnf_g", "lnf_b", "w_out"]


def parameter_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Shape of every parameter."""
    d, h = config.d_model, config.d_ffn
    shapes = {"tok_emb": (config.vocab_size, d), "pos_emb": (config.max_seq_len, d), "lnf_g": (d,), "lnf_b": (d,), "w_out": (d, config.vocab_size)}
    for layer in range(config.n_layers):
        p = f"h{layer}."
        shapes.update({p + "ln1_g": (d,), p + "ln1_b": (d,), p + "ln2_g": (d,), p + "ln2_b": (d,), p + "w_up": (d, h), p + "w_down": (h, d)})
        shapes.update({p + name: (d, d) for name in ("w_q", "w_k", "w_v", "w_o")})
    return shapes


def down_name(layer: int) -> str:
    """Parameter name of a layer's ``W_down``."""
    return f"h{layer}.w_down"


class TransformerLM:

    """
    The frozen base model: config, tokenizer and named weights.

    :param config: model sizes; ``vocab_size`` must match the tokenizer.
    :param tokenizer: the closed-vocabulary tokenizer the model was trained with.
    :param params: weights by name, see :func:`parameter_names`.
    """

    def __init__(self, config: ModelConfig, tokenizer: Tokenizer, params: Dict[str, Tensor]):
        """Check the weights against the config."""
        config.validate()
        if config.vocab_size != tokenizer.vocab_size:
            raise ConfigError(f"vocab_size {config.vocab_size} does not match tokenizer ({tokenizer.vocab_size})")
        shapes = parameter_shapes(config)
        if set(params) != set(shapes):
            raise ConfigError(f"parameter names do not match config: {sorted(set(params) ^ set(shapes))}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise ShapeError(name, params[name].shape, shape)
        self.config = config
        self.tokenizer = tokenizer
        self.params = params

    @classmethod
    def init(cls, config: ModelConfig, tokenizer: Tokenizer) -> "TransformerLM":
        """
        Fresh weights drawn from a Philox generator seeded with ``config.seed``.

        Draws happen in :func:`parameter_names` order: embeddings ``N(0, 0.1)``,
        projections ``N(0, 1/fan_in)``, norm gains 1 and biases 0.
        """
        if config.vocab_size == 0:
            config = replace(config, vocab_size=tokenizer.vocab_size)
        config.validate()
        rng = np.random.Generator(np.random.Philox(config.seed))
        shapes = parameter_shapes(config)
        params = {}
        for name in parameter_names(config):
            shape = shapes[name]
            short = name.split(".")[-1]
            if short.endswith("_g"):
                value = np.ones(shape, dtype=np.float32)
            elif short.endswith("_b"):
                value = np.zeros(shape, dtype=np.float32)
            elif short in ("tok_emb", "pos_emb"):
                value = rng.normal(0.0, 0.1, size=shape).astype(np.float32)
            else:
                value = rng.normal(0.0, shape[0] ** -0.5, size=shape).astype(np.float32)
            params[name] = Tensor(value, name=name)
        return cls(config, tokenizer, params)

    @property
    def fnn_width(self) -> int:
        """``h``, the FNN intermediate width."""
        return self.config.d_ffn

    def check_layer(self, layer: int) -> None:
        """Raise if ``layer`` does not exist."""
        if not 0 <= layer < self.config.n_layers:
            raise ValueError(f"layer {layer} out of range [0, {self.config.n_layers})")

    def _attention(self, x: Tensor, layer: int) -> Tensor:
        p = self.params
        batch, length, d = x.shape
        heads = self.config.n_heads
        width = d // heads

        def split(t: Tensor) -> Tensor:
            return ops.transpose(ops.reshape(t, (batch, length, heads, width)), (0, 2, 1, 3))

        q = split(ops.matmul(x, p[f"h{layer}.w_q"]))
        k = split(ops.matmul(x, p[f"h{layer}.w_k"]))
        v = split(ops.matmul(x, p[f"h{layer}.w_v"]))
        scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), width**-0.5)
        mixed = ops.matmul(ops.softmax(scores, causal=True), v)
        merged = ops.reshape(ops.transpose(mixed, (0, 2, 1, 3)), (batch, length, d))
        return ops.matmul(merged, p[f"h{layer}.w_o"])

    def forward(self, tokens, fnn_override: Optional[FnnOverride] = None, tap: Optional[TapRequest] = None) -> ForwardResult:
        """
        Run the model.

        :param tokens: one id sequence or a ``(batch, length)`` array.
        :param fnn_override: replace one layer's ``W_down``; everything else is the base model.
        :param tap: capture the FNN input of one layer.
        :return: logits ``(batch, length, vocab)`` and the tap result.
        """
        ids = np.asarray(tokens, dtype=np.int64)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.shape[1] == 0:
            raise ShapeError("forward", ids.shape, (1, self.config.max_seq_len))
        batch, length = ids.shape
        if length > self.config.max_seq_len:
            raise ShapeError("forward", ids.shape, (batch, self.config.max_seq_len))
        if fnn_override is not None:
            self.check_layer(fnn_override.layer)
            if fnn_override.weight.shape != (self.config.d_ffn, self.config.d_model):
                raise ShapeError("fnn_override", fnn_override.weight.shape, (self.config.d_ffn, self.config.d_model))
        if tap is not None:
            self.check_layer(tap.layer)

        p = self.params
        positions = np.broadcast_to(np.arange(length), (batch, length))
        x = ops.add(ops.embedding(p["tok_emb"], ids), ops.embedding(p["pos_emb"], positions))
        captured = None
        for layer in range(self.config.n_layers):
            x = ops.add(x, self._attention(ops.layer_norm(x, p[f"h{layer}.ln1_g"], p[f"h{layer}.ln1_b"]), layer))
            x_att = ops.layer_norm(x, p[f"h{layer}.ln2_g"], p[f"h{layer}.ln2_b"])
            up = ops.matmul(x_att, p[f"h{layer}.w_up"])
            hidden = ops.activation(up, self.config.nonlinearity)
            if tap is not None and tap.layer == layer:
                rows = np.arange(batch)
                cols = np.full(batch, length - 1) if tap.positions is None else np.asarray(tap.positions, dtype=np.int64)
                captured = TapResult(layer=layer, x_att=x_att.data[rows, cols].copy(), up=up.data[rows, cols].copy(), hidden=hidden.data[rows, cols].copy())
                if tap.stop:
                    return ForwardResult(logits=None, tap=captured)
            w_down = fnn_override.weight if fnn_override is not None and fnn_override.layer == layer else p[down_name(layer)]
            x = ops.add(x, ops.matmul(hidden, w_down))
        x = ops.layer_norm(x, p["lnf_g"], p["lnf_b"])
        return ForwardResult(logits=ops.matmul(x, p["w_out"]), tap=captured)

    def logits(self, tokens, fnn_override: Optional[FnnOverride] = None) -> np.ndarray:
        """Logits as an array, for inference callers."""
        return self.forward(tokens, fnn_override=fnn_override).logits.data

    def fnn_input(self, prompt_ids: Sequence[int], layer: int) -> TapResult:
        """FNN input of ``layer`` at the last prompt token, computing nothing above it."""
        if len(prompt_ids) == 0:
            raise ValueError("prompt must not be empty")
        return self.forward(list(prompt_ids), tap=TapRequest(layer=layer, stop=True)).tap

    def state_bytes(self) -> bytes:
        """Concatenated raw bytes of every weight, in parameter order."""
        return b"".join(self.params[name].data.astype("<f4").tobytes() for name in parameter_names(self.config))
