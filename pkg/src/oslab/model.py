"""GRU encoder-decoder with dot-product attention.

The decoder attends with its *incoming* state, then advances its GRU on the
previous target token; the output layer reads ``[new state; context]``.
Because the attention context never feeds back into the recurrence, the
batched training path can compute attention and the output projection for
all target positions at once after the recurrent loop.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .vocab import BOS, PAD, Vocabulary

CHECKPOINT_VERSION = 1
_MASK = -1e9


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    d_embed: int = 32
    d_hidden: int = 64
    dropout_rate: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.d_embed < 1 or self.d_hidden < 1:
            raise ValueError("d_embed and d_hidden must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.src_vocab < 5 or self.tgt_vocab < 5:
            raise ValueError("vocabularies need at least one content token")


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    E, H = config.d_embed, config.d_hidden
    return {
        "src_embed": (config.src_vocab, E),
        "tgt_embed": (config.tgt_vocab, E),
        "enc_Wx": (E, 3 * H),
        "enc_Wh": (H, 3 * H),
        "enc_b": (1, 3 * H),
        "dec_init_W": (H, H),
        "dec_init_b": (1, H),
        "dec_Wx": (E, 3 * H),
        "dec_Wh": (H, 3 * H),
        "dec_b": (1, 3 * H),
        "out_W": (2 * H, config.tgt_vocab),
        "out_b": (1, config.tgt_vocab),
    }


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, Tensor]
    update_count: int = 0
    alpha: float = 0.0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def with_arrays(self, arrays: dict[str, np.ndarray], **meta) -> "ModelParams":
        tensors = {k: Tensor(arrays[k], name=k) for k in self.tensors}
        kw = {"update_count": self.update_count, "alpha": self.alpha, **meta}
        return ModelParams(self.config, tensors, **kw)

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors.values())

    # decoding interface shared with decoding.TableModel
    def start(self, source: Sequence[int]):
        enc = encode(self, source)
        return enc, initial_state(self, enc)

    def step(self, context, states, prev_tokens):
        enc, _ = context
        logp, h = decode_step(self, enc, states, prev_tokens)
        return logp.data, h

    def initial(self, context):
        return context[1]

    def select(self, states, rows: np.ndarray):
        return Tensor._wrap(states.data[rows])

    def teacher_forced(self, source, target) -> np.ndarray:
        return sequence_log_probs(self, source, target).data


def init_params(config: ModelConfig) -> ModelParams:
    """Glorot-uniform matrices, zero biases; deterministic in ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, (fan_in, fan_out) in param_shapes(config).items():
        if name.endswith("_b"):
            arr = np.zeros((fan_in, fan_out))
        else:
            s = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-s, s, size=(fan_in, fan_out))
        tensors[name] = Tensor(arr, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# building blocks


def _bias(b: Tensor, rows: int) -> Tensor:
    return ad.matmul(np.ones((rows, 1)), b)


def _gru(gx: Tensor, h: Tensor, Wh: Tensor, H: int) -> Tensor:
    """One GRU update; ``gx`` already holds the input projection plus bias."""
    gh = ad.matmul(h, Wh)
    zr = ad.sigmoid(ad.add(ad.slice_(gx, (slice(None), slice(0, 2 * H))),
                           ad.slice_(gh, (slice(None), slice(0, 2 * H)))))
    z = ad.slice_(zr, (slice(None), slice(0, H)))
    r = ad.slice_(zr, (slice(None), slice(H, 2 * H)))
    n = ad.tanh(ad.add(ad.slice_(gx, (slice(None), slice(2 * H, 3 * H))),
                       ad.mul(r, ad.slice_(gh, (slice(None), slice(2 * H, 3 * H))))))
    return ad.add(n, ad.mul(z, ad.sub(h, n)))


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def _check_ids(ids, vocab_size: int, what: str) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() >= vocab_size):
        raise ValueError(f"{what} token id out of range [0, {vocab_size}): {arr.tolist()}")
    return arr


def _encoder_steps(params: ModelParams, src: np.ndarray, rng=None) -> list[Tensor]:
    """Run the encoder over a (B, S) id matrix; returns S states of shape (B, H)."""
    cfg = params.config
    B, S = src.shape
    H = cfg.d_hidden
    bias = _bias(params["enc_b"], B)
    h = Tensor._wrap(np.zeros((B, H)))
    states = []
    for t in range(S):
        e = ad.embedding(params["src_embed"], src[:, t])
        if rng is not None and cfg.dropout_rate > 0:
            e = ad.dropout(e, _dropout_mask(rng, e.shape, cfg.dropout_rate))
        gx = ad.add(ad.matmul(e, params["enc_Wx"]), bias)
        h = _gru(gx, h, params["enc_Wh"], H)
        states.append(h)
    return states


def encode(params: ModelParams, source: Sequence[int], rng=None) -> Tensor:
    """Encoder states, one row per source token (S x d_hidden)."""
    src = _check_ids(source, params.config.src_vocab, "source")
    if src.size == 0:
        raise ValueError("empty source")
    states = _encoder_steps(params, src.reshape(1, -1), rng)
    return ad.concat(states, axis=0) if len(states) > 1 else states[0]


def initial_state(params: ModelParams, enc: Tensor) -> Tensor:
    """tanh(W h_last + b) from the final encoder row."""
    last = ad.slice_(enc, (slice(enc.shape[0] - 1, enc.shape[0]), slice(None)))
    return ad.tanh(ad.add(ad.matmul(last, params["dec_init_W"]), params["dec_init_b"]))


def decode_step(
    params: ModelParams,
    enc: Tensor,
    state: Tensor,
    prev_token,
    rng=None,
) -> tuple[Tensor, Tensor]:
    """One decoder step for K parallel hypotheses sharing one source.

    ``prev_token`` is an int (returns a length-V row and a 1 x H state) or a
    length-K id array (returns K x V and K x H).
    """
    cfg = params.config
    H = cfg.d_hidden
    scalar = np.ndim(prev_token) == 0
    prev = _check_ids(np.atleast_1d(prev_token), cfg.tgt_vocab, "previous")
    K = prev.shape[0]
    if state.shape != (K, H):
        raise ValueError(f"decoder state shape {state.shape} != {(K, H)}")

    attn = ad.softmax(ad.matmul(state, ad.transpose(enc)))
    ctx = ad.matmul(attn, enc)

    e = ad.embedding(params["tgt_embed"], prev)
    if rng is not None and cfg.dropout_rate > 0:
        e = ad.dropout(e, _dropout_mask(rng, e.shape, cfg.dropout_rate))
    gx = ad.add(ad.matmul(e, params["dec_Wx"]), _bias(params["dec_b"], K))
    h = _gru(gx, state, params["dec_Wh"], H)

    feat = ad.concat([h, ctx], axis=1)
    if rng is not None and cfg.dropout_rate > 0:
        feat = ad.dropout(feat, _dropout_mask(rng, feat.shape, cfg.dropout_rate))
    logp = ad.log_softmax(ad.add(ad.matmul(feat, params["out_W"]), _bias(params["out_b"], K)))
    if scalar:
        logp = ad.reshape(logp, (cfg.tgt_vocab,))
    return logp, h


def sequence_log_probs(
    params: ModelParams,
    source: Sequence[int],
    target: Sequence[int],
    mode: str = "inference",
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Teacher-forced T x V log-probabilities by chaining :func:`decode_step`.

    In ``train`` mode dropout is sampled from ``rng`` (default seeded by the
    model seed); the result joins whatever tape is armed.
    """
    if len(target) == 0:
        raise ValueError("empty target")
    if mode not in ("train", "inference"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(params.config.seed)
    if mode == "inference":
        rng = None
    _check_ids(target, params.config.tgt_vocab, "target")
    enc = encode(params, source, rng)
    h = initial_state(params, enc)
    prev = BOS
    rows = []
    for y in target:
        row, h = decode_step(params, enc, h, prev, rng)
        rows.append(ad.reshape(row, (1, -1)))
        prev = int(y)
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


# ---------------------------------------------------------------------------
# batched teacher forcing (training / evaluation)


def pad_batch(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


def batch_log_probs(
    params: ModelParams,
    sources: Sequence[Sequence[int]],
    targets: Sequence[Sequence[int]],
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Teacher-forced log-probs for a batch: (B x T x V tensor, padded targets, lengths).

    Rows at padded target positions are well defined but meaningless.
    """
    cfg = params.config
    H, V = cfg.d_hidden, cfg.tgt_vocab
    src, src_len = pad_batch(sources)
    tgt, tgt_len = pad_batch(targets)
    _check_ids(src, cfg.src_vocab, "source")
    _check_ids(tgt, V, "target")
    if src_len.min() < 1 or tgt_len.min() < 1:
        raise ValueError("empty source or target in batch")
    B, S = src.shape
    T = tgt.shape[1]
    drop = rng is not None and cfg.dropout_rate > 0

    enc_steps = _encoder_steps(params, src, rng)
    enc = ad.concat([ad.reshape(h, (B, 1, H)) for h in enc_steps], axis=1)
    flat = ad.reshape(enc, (B * S, H))
    last = ad.embedding(flat, np.arange(B) * S + src_len - 1)
    h = ad.tanh(ad.add(ad.matmul(last, params["dec_init_W"]), _bias(params["dec_init_b"], B)))

    prev = np.concatenate([np.full((B, 1), BOS), tgt[:, :-1]], axis=1)
    bias = _bias(params["dec_b"], B)
    queries, outs = [], []
    for t in range(T):
        queries.append(ad.reshape(h, (B, 1, H)))
        e = ad.embedding(params["tgt_embed"], prev[:, t])
        if drop:
            e = ad.dropout(e, _dropout_mask(rng, e.shape, cfg.dropout_rate))
        h = _gru(ad.add(ad.matmul(e, params["dec_Wx"]), bias), h, params["dec_Wh"], H)
        outs.append(ad.reshape(h, (B, 1, H)))

    Q = ad.concat(queries, axis=1) if T > 1 else queries[0]
    Hs = ad.concat(outs, axis=1) if T > 1 else outs[0]
    mask = np.where(np.arange(S)[None, None, :] < src_len[:, None, None], 0.0, _MASK)
    scores = ad.add(ad.matmul(Q, ad.transpose(enc)), np.broadcast_to(mask, (B, T, S)))
    ctx = ad.matmul(ad.softmax(scores), enc)

    feat = ad.reshape(ad.concat([Hs, ctx], axis=2), (B * T, 2 * H))
    if drop:
        feat = ad.dropout(feat, _dropout_mask(rng, feat.shape, cfg.dropout_rate))
    logits = ad.add(ad.matmul(feat, params["out_W"]), _bias(params["out_b"], B * T))
    logp = ad.reshape(ad.log_softmax(logits), (B, T, V))
    return logp, tgt, tgt_len


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(Exception):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class VocabularyMismatchError(CheckpointError):
    pass


_CONFIG_TYPES = {f.name: f.type for f in fields(ModelConfig)}


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    header = {"version": CHECKPOINT_VERSION, **asdict(params.config),
              "update_count": params.update_count, "alpha": repr(float(params.alpha)),
              "n_tensors": len(params.tensors)}
    parts = [(" ".join(f"{k}={v}" for k, v in header.items()) + "\n").encode()]
    for name, t in params.tensors.items():
        parts.append(f"{name}\n".encode())
        parts.append((" ".join(str(d) for d in t.shape) + "\n").encode())
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
        parts.append(b"\n")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def _parse_header(line: bytes) -> dict[str, str]:
    try:
        text = line.decode("ascii").strip()
        pairs = dict(item.split("=", 1) for item in text.split())
    except (UnicodeDecodeError, ValueError) as exc:
        raise CheckpointCorruptError(f"unreadable checkpoint header: {exc}") from None
    if "version" not in pairs:
        raise CheckpointCorruptError("checkpoint header lacks version")
    return pairs


def load_checkpoint(
    path: str | Path,
    src_vocab: Vocabulary | None = None,
    tgt_vocab: Vocabulary | None = None,
) -> ModelParams:
    blob = Path(path).read_bytes()
    pos = blob.find(b"\n")
    if pos < 0:
        raise CheckpointCorruptError(f"{path}: missing header line")
    hdr = _parse_header(blob[:pos])
    try:
        version = int(hdr["version"])
    except ValueError:
        raise CheckpointCorruptError(f"bad version field {hdr['version']!r}") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    try:
        cfg_kw = {}
        for k, typ in _CONFIG_TYPES.items():
            cfg_kw[k] = float(hdr[k]) if typ in ("float", float) else int(hdr[k])
        config = ModelConfig(**cfg_kw)
        update_count = int(hdr["update_count"])
        alpha = float(hdr["alpha"])
        n_tensors = int(hdr["n_tensors"])
    except (KeyError, ValueError) as exc:
        raise CheckpointCorruptError(f"bad checkpoint header: {exc}") from None

    for vocab, size, side in ((src_vocab, config.src_vocab, "source"),
                              (tgt_vocab, config.tgt_vocab, "target")):
        if vocab is not None and len(vocab) != size:
            raise VocabularyMismatchError(
                f"{side} vocabulary size {len(vocab)} != checkpoint {side} vocabulary size {size}")

    expected = param_shapes(config)
    tensors = {}
    pos += 1
    for _ in range(n_tensors):
        name_end = blob.find(b"\n", pos)
        shape_end = blob.find(b"\n", name_end + 1) if name_end >= 0 else -1
        if shape_end < 0:
            raise CheckpointCorruptError(f"{path}: truncated tensor record")
        name = blob[pos:name_end].decode("ascii", "replace")
        try:
            shape = tuple(int(x) for x in blob[name_end + 1:shape_end].split())
        except ValueError:
            raise CheckpointCorruptError(f"{path}: bad shape line for {name!r}") from None
        if name not in expected:
            raise CheckpointCorruptError(f"{path}: unknown tensor {name!r}")
        if shape != expected[name]:
            raise CheckpointShapeError(
                f"tensor {name!r} has shape {shape}, header config implies {expected[name]}")
        n = int(np.prod(shape))
        start = shape_end + 1
        stop = start + 8 * n
        if stop + 1 > len(blob) or blob[stop:stop + 1] != b"\n":
            raise CheckpointCorruptError(f"{path}: truncated data for tensor {name!r}")
        arr = np.frombuffer(blob[start:stop], dtype="<f8").astype(np.float64).reshape(shape)
        tensors[name] = Tensor(arr, name=name)
        pos = stop + 1
    if set(tensors) != set(expected):
        raise CheckpointCorruptError(f"{path}: missing tensors {sorted(set(expected) - set(tensors))}")
    if pos != len(blob):
        raise CheckpointCorruptError(f"{path}: trailing bytes after last tensor")
    ordered = {k: tensors[k] for k in expected}
    return ModelParams(config, ordered, update_count=update_count, alpha=alpha)
