"""Fusion-in-Decoder encoder-decoder.

Every retrieved passage becomes one encoder row
``question: <q> title: <t> context: <text>``. Rows are encoded
independently by a shared pre-norm transformer encoder (positions restart
at 0 in each row), then the decoder cross-attends over the row-order
concatenation of all encoder outputs. The output projection is tied to
the shared token embedding.

Checkpoint layout (little-endian)::

    magic       8 bytes  b"FIDCKPT\\x00"
    version     u32      1
    header_len  u32
    header      UTF-8 JSON {"config": {...}, "vocab": [...], "arrays": [[name, shape], ...]}
    arrays      float32 data, concatenated in header order (== param_shapes order)
"""

from __future__ import annotations

import json
import math
import struct
from collections import Counter
from collections.abc import Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DataError
from .rng import DROPOUT, INIT, make_rng
from .tensor import Tensor
from .vocab import CONTEXT, DECODER_START, EOS, PAD, QUESTION, TITLE, Vocab

CKPT_MAGIC = b"FIDCKPT\x00"
CKPT_VERSION = 1
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    d_ff: int = 128
    max_input_len: int = 250
    max_answer_len: int = 16
    dropout_p: float = 0.1
    layer_norm_eps: float = 1e-6
    init_std: float = INIT_STD

    def __post_init__(self) -> None:
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_input_len < 3:
            raise ValueError("max_input_len must leave room for the three markers")
        if self.max_answer_len < 1:
            raise ValueError("max_answer_len must be >= 1")
        if self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")
        for name in ("vocab_size", "d_model", "n_heads", "n_enc_layers", "n_dec_layers", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")


def _attn_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    out = {}
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.w{proj}"] = (d, d)
        out[f"{prefix}.b{proj}"] = (d,)
    return out


def _norm_shapes(prefix: str, d: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (d,), f"{prefix}.b": (d,)}


def _ff_shapes(prefix: str, d: int, d_ff: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (d, d_ff), f"{prefix}.b1": (d_ff,), f"{prefix}.w2": (d_ff, d), f"{prefix}.b2": (d,)}


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in canonical (checkpoint) order."""
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "embed": (config.vocab_size, d),
        "enc.pos": (config.max_input_len, d),
        "dec.pos": (config.max_answer_len, d),
    }
    for i in range(config.n_enc_layers):
        p = f"enc.{i}"
        shapes |= _norm_shapes(f"{p}.attn_norm", d) | _attn_shapes(f"{p}.attn", d)
        shapes |= _norm_shapes(f"{p}.ff_norm", d) | _ff_shapes(f"{p}.ff", d, config.d_ff)
    shapes |= _norm_shapes("enc.norm", d)
    for i in range(config.n_dec_layers):
        p = f"dec.{i}"
        shapes |= _norm_shapes(f"{p}.self_norm", d) | _attn_shapes(f"{p}.self_attn", d)
        shapes |= _norm_shapes(f"{p}.cross_norm", d) | _attn_shapes(f"{p}.cross_attn", d)
        shapes |= _norm_shapes(f"{p}.ff_norm", d) | _ff_shapes(f"{p}.ff", d, config.d_ff)
    shapes |= _norm_shapes("dec.norm", d)
    return shapes


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """normal(0, init_std) weights and embeddings, zero biases, unit norm gains.

    Draws happen in float64 in canonical order, then cast, so float32 and
    float64 models built from one seed hold the same values up to rounding.
    """
    rng = make_rng(seed, INIT)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arr = np.ones(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, config.init_std, size=shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    return params


# inputs ------------------------------------------------------------------------

def format_passage_input(question: str, title: str, text: str, vocab: Vocab, max_len: int,
                         pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Token row for one passage plus its non-PAD mask."""
    if max_len < 3:
        raise ValueError("max_len must be >= 3")
    ids = ([QUESTION] + vocab.encode(question) + [TITLE] + vocab.encode(title)
           + [CONTEXT] + vocab.encode(text))[:max_len]
    width = len(ids) if pad_to is None else pad_to
    if width < len(ids):
        raise ValueError(f"pad_to={pad_to} shorter than the row ({len(ids)} tokens)")
    row = np.full(width, PAD, dtype=np.int64)
    row[:len(ids)] = ids
    return row, row != PAD


@dataclass
class FidInput:
    question: str
    passages: list[tuple[str, str]]
    tokens: np.ndarray
    mask: np.ndarray

    @property
    def n_passages(self) -> int:
        return self.tokens.shape[0]


def make_input(question: str, passages: Sequence[tuple[str, str]], vocab: Vocab, max_len: int,
               pad_to: int | None = None) -> FidInput:
    if not passages:
        raise ValueError("at least one passage is required")
    rows = [format_passage_input(question, title, text, vocab, max_len)[0] for title, text in passages]
    width = pad_to if pad_to is not None else max(len(r) for r in rows)
    tokens = np.full((len(rows), width), PAD, dtype=np.int64)
    for i, r in enumerate(rows):
        if len(r) > width:
            raise ValueError(f"pad_to={pad_to} shorter than a row ({len(r)} tokens)")
        tokens[i, :len(r)] = r
    return FidInput(question, list(passages), tokens, tokens != PAD)


def collate(inputs: Sequence[FidInput], pad_to: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Stack examples with equal passage counts into (B, n, L) token and mask arrays."""
    n = inputs[0].n_passages
    if any(x.n_passages != n for x in inputs):
        raise ValueError("all examples in a batch need the same number of passages")
    width = pad_to if pad_to is not None else max(x.tokens.shape[1] for x in inputs)
    tokens = np.full((len(inputs), n, width), PAD, dtype=np.int64)
    for b, x in enumerate(inputs):
        tokens[b, :, :x.tokens.shape[1]] = x.tokens
    return tokens, tokens != PAD


@dataclass
class EncodedBlock:
    """Encoder output of shape (B, n, L, d) with its (B, n, L) mask."""

    states: Tensor
    mask: np.ndarray
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def flat(self) -> Tensor:
        b, n, length, d = self.states.shape
        return self.states.reshape(b, n * length, d)

    @property
    def flat_mask(self) -> np.ndarray:
        b, n, length = self.mask.shape
        return self.mask.reshape(b, n * length)


def count_cross_passage_interactions(n: int, length: int, config: ModelConfig | None = None) -> tuple[int, int]:
    """Encoder attention pairs per layer per head: independent rows vs one joint sequence."""
    if n < 1 or length < 1:
        raise ValueError("n and length must be >= 1")
    return n * length * length, (n * length) ** 2


def encoder_pair_total(n: int, length: int, config: ModelConfig) -> int:
    fid, _ = count_cross_passage_interactions(n, length, config)
    return fid * config.n_enc_layers * config.n_heads


def _additive_mask(keep: np.ndarray, dtype) -> np.ndarray:
    return np.where(keep, 0.0, T.NEG_INF).astype(dtype)


class FidModel:
    def __init__(self, config: ModelConfig, vocab: Vocab, seed: int = 0, dtype=np.float32,
                 params: dict[str, Tensor] | None = None):
        if len(vocab) != config.vocab_size:
            raise ValueError(f"vocab has {len(vocab)} entries, config says {config.vocab_size}")
        self.config = config
        self.vocab = vocab
        self.seed = seed
        self.params = params if params is not None else init_params(config, seed, dtype)
        self.training = False
        self.dropout_rng = make_rng(seed, DROPOUT)
        # encoder_pairs / encoder_tokens: instrumented work counters
        self.counters: Counter[str] = Counter()
        # set to a dict to record attention probabilities per block kind
        self.trace: dict[str, list[np.ndarray]] | None = None

    @property
    def dtype(self):
        return self.params["embed"].dtype

    def train(self) -> FidModel:
        self.training = True
        return self

    def eval(self) -> FidModel:
        self.training = False
        return self

    def astype(self, dtype) -> FidModel:
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return FidModel(self.config, self.vocab, self.seed, dtype, params)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        expected = param_shapes(self.config)
        if set(state) != set(expected):
            raise DataError("parameter names do not match the model config")
        for name, shape in expected.items():
            if tuple(state[name].shape) != shape:
                raise DataError(f"parameter {name}: shape {state[name].shape} != {shape}")
            self.params[name].data[...] = state[name]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # building blocks -------------------------------------------------------
    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return T.layer_norm(x, self._p(f"{prefix}.g"), self._p(f"{prefix}.b"), self.config.layer_norm_eps)

    def _drop(self, x: Tensor) -> Tensor:
        return T.dropout(x, self.config.dropout_p, self.dropout_rng, self.training)

    def _heads(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        h = self.config.n_heads
        return x.reshape(b, t, h, self.config.d_model // h).transpose(0, 2, 1, 3)

    def _project_kv(self, prefix: str, x_kv: Tensor) -> tuple[Tensor, Tensor]:
        k = self._heads(T.linear(x_kv, self._p(f"{prefix}.wk"), self._p(f"{prefix}.bk")))
        v = self._heads(T.linear(x_kv, self._p(f"{prefix}.wv"), self._p(f"{prefix}.bv")))
        return k, v

    def _attention(self, prefix: str, x_q: Tensor, kv: tuple[Tensor, Tensor], add_mask: np.ndarray,
                   kind: str) -> Tensor:
        q = self._heads(T.linear(x_q, self._p(f"{prefix}.wq"), self._p(f"{prefix}.bq")))
        k, v = kv
        scale = 1.0 / math.sqrt(self.config.d_model // self.config.n_heads)
        scores = T.matmul(q, T.swap_last(k)) * scale + add_mask
        if kind == "encoder":
            self.counters["encoder_pairs"] += scores.data.size
        probs = T.softmax(scores, axis=-1)
        if self.trace is not None:
            self.trace.setdefault(kind, []).append(probs.data.copy())
        b, _, t, _ = q.shape
        ctx = T.matmul(probs, v).transpose(0, 2, 1, 3).reshape(b, t, self.config.d_model)
        return T.linear(ctx, self._p(f"{prefix}.wo"), self._p(f"{prefix}.bo"))

    def _ff(self, x: Tensor, prefix: str) -> Tensor:
        h = T.gelu(T.linear(x, self._p(f"{prefix}.w1"), self._p(f"{prefix}.b1")))
        return T.linear(h, self._p(f"{prefix}.w2"), self._p(f"{prefix}.b2"))

    # encoder / decoder -------------------------------------------------------
    def encode(self, tokens: np.ndarray, mask: np.ndarray | None = None) -> EncodedBlock:
        """Encode (B, n, L) or (n, L) token ids; rows never attend to one another."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 2:
            tokens = tokens[None]
        if tokens.ndim != 3:
            raise ValueError(f"tokens must have shape (B, n, L), got {tokens.shape}")
        mask = tokens != PAD if mask is None else np.asarray(mask, dtype=bool).reshape(tokens.shape)
        b, n, length = tokens.shape
        if length > self.config.max_input_len:
            raise ValueError(f"row length {length} exceeds max_input_len {self.config.max_input_len}")
        rows = tokens.reshape(b * n, length)
        x = T.embedding(self._p("embed"), rows) + self._p("enc.pos")[:length]
        x = self._drop(x)
        add_mask = _additive_mask(mask.reshape(b * n, 1, 1, length), self.dtype)
        for i in range(self.config.n_enc_layers):
            p = f"enc.{i}"
            h = self._norm(x, f"{p}.attn_norm")
            x = x + self._drop(self._attention(f"{p}.attn", h, self._project_kv(f"{p}.attn", h), add_mask, "encoder"))
            x = x + self._drop(self._ff(self._norm(x, f"{p}.ff_norm"), f"{p}.ff"))
        x = self._norm(x, "enc.norm")
        self.counters["encoder_tokens"] += b * n * length
        return EncodedBlock(x.reshape(b, n, length, self.config.d_model), mask)

    def decode(self, dec_in: np.ndarray, encoded: EncodedBlock) -> Tensor:
        """Teacher-forced decoder logits of shape (B, T, V)."""
        dec_in = np.asarray(dec_in, dtype=np.int64)
        b, t = dec_in.shape
        if t > self.config.max_answer_len:
            raise ValueError(f"decoder prefix length {t} exceeds max_answer_len {self.config.max_answer_len}")
        memory = encoded.flat
        cross_mask = _additive_mask(encoded.flat_mask[:, None, None, :], self.dtype)
        causal = _additive_mask(np.tril(np.ones((t, t), dtype=bool))[None, None], self.dtype)
        use_cache = not T.is_grad_enabled()
        y = self._drop(T.embedding(self._p("embed"), dec_in) + self._p("dec.pos")[:t])
        for i in range(self.config.n_dec_layers):
            p = f"dec.{i}"
            h = self._norm(y, f"{p}.self_norm")
            y = y + self._drop(self._attention(f"{p}.self_attn", h, self._project_kv(f"{p}.self_attn", h),
                                               causal, "self"))
            h = self._norm(y, f"{p}.cross_norm")
            if use_cache:
                kv = encoded.cache.get(i)
                if kv is None:
                    kv = encoded.cache[i] = self._project_kv(f"{p}.cross_attn", memory)
            else:
                kv = self._project_kv(f"{p}.cross_attn", memory)
            y = y + self._drop(self._attention(f"{p}.cross_attn", h, kv, cross_mask, "cross"))
            y = y + self._drop(self._ff(self._norm(y, f"{p}.ff_norm"), f"{p}.ff"))
        y = self._norm(y, "dec.norm")
        return T.linear(y, T.transpose(self._p("embed")))

    def decode_step(self, prefix: np.ndarray, encoded: EncodedBlock) -> np.ndarray:
        """Next-token logits (B, V) after ``prefix``, which starts with DECODER_START."""
        prefix = np.asarray(prefix, dtype=np.int64)
        if prefix.ndim == 1:
            prefix = prefix[None]
        if prefix.shape[1] == 0 or np.any(prefix[:, 0] != DECODER_START):
            raise ValueError("prefix must start with DECODER_START")
        with T.no_grad():
            return self.decode(prefix, encoded).data[:, -1, :]

    def loss(self, tokens: np.ndarray, mask: np.ndarray, dec_in: np.ndarray, targets: np.ndarray) -> Tensor:
        """Teacher-forced next-token cross-entropy: mean over each example's
        non-PAD target tokens, then mean over the batch."""
        if len(tokens) == 0:
            raise ValueError("empty batch")
        real = targets != PAD
        counts = real.sum(axis=1)
        if np.any(counts == 0):
            raise ValueError("every example needs at least one target token")
        weights = real / (counts[:, None] * len(targets))
        logits = self.decode(dec_in, self.encode(tokens, mask))
        flat_targets = np.where(real, targets, -100).reshape(-1)
        return T.cross_entropy(logits.reshape(-1, self.config.vocab_size), flat_targets, ignore_index=-100,
                               weights=weights.reshape(-1))

    def generate(self, tokens: np.ndarray, mask: np.ndarray | None = None,
                 max_answer_len: int | None = None) -> list[list[int]]:
        """Greedy decoding; argmax ties resolve to the lowest token id."""
        max_len = min(max_answer_len or self.config.max_answer_len, self.config.max_answer_len)
        was_training = self.training
        self.eval()
        try:
            with T.no_grad():
                encoded = self.encode(tokens, mask)
                b = encoded.states.shape[0]
                prefix = np.full((b, 1), DECODER_START, dtype=np.int64)
                outputs: list[list[int]] = [[] for _ in range(b)]
                done = np.zeros(b, dtype=bool)
                for _ in range(max_len):
                    nxt = np.argmax(self.decode_step(prefix, encoded), axis=-1)
                    for i in np.flatnonzero(~done):
                        if nxt[i] == EOS:
                            done[i] = True
                        else:
                            outputs[i].append(int(nxt[i]))
                    if done.all() or prefix.shape[1] == max_len:
                        break
                    prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
        finally:
            self.training = was_training
        return outputs

    def greedy_decode(self, question: str, passages: Sequence[tuple[str, str]],
                      max_answer_len: int | None = None) -> str:
        x = make_input(question, passages, self.vocab, self.config.max_input_len)
        return self.vocab.decode(self.generate(x.tokens[None], x.mask[None], max_answer_len)[0])

    # persistence -------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        shapes = param_shapes(self.config)
        header = json.dumps({
            "config": asdict(self.config),
            "vocab": self.vocab.tokens,
            "arrays": [[name, list(shape)] for name, shape in shapes.items()],
        }, ensure_ascii=False, sort_keys=True).encode("utf-8")
        parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header]
        for name in shapes:
            parts.append(np.ascontiguousarray(self.params[name].data, dtype="<f4").tobytes())
        Path(path).write_bytes(b"".join(parts))

    @classmethod
    def load(cls, path: str | Path, dtype=np.float32, seed: int = 0) -> FidModel:
        path = Path(path)
        try:
            buf = path.read_bytes()
        except OSError as exc:
            raise DataError(f"{path}: cannot read checkpoint: {exc.strerror}") from exc
        if buf[:8] != CKPT_MAGIC:
            raise DataError(f"{path}: not a FiD checkpoint")
        version, header_len = struct.unpack_from("<II", buf, 8)
        if version != CKPT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(buf[16:16 + header_len].decode("utf-8"))
        config = ModelConfig(**header["config"])
        vocab = Vocab(header["vocab"])
        expected = param_shapes(config)
        stored = [(name, tuple(shape)) for name, shape in header["arrays"]]
        if stored != list(expected.items()):
            raise DataError(f"{path}: array table does not match the stored config")
        pos = 16 + header_len
        state = {}
        for name, shape in stored:
            count = int(np.prod(shape))
            if pos + 4 * count > len(buf):
                raise DataError(f"{path}: truncated checkpoint")
            state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
            pos += 4 * count
        model = cls(config, vocab, seed=seed, dtype=dtype)
        model.load_state_dict(state)
        return model
