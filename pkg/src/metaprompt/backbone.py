"""A tiny decoder-only text-to-text model used as the frozen backbone.

The sequence fed to the stack is ``[prompt rows; X (left padded); SEP; Y]``
with a causal mask; the loss is teacher-forced next-token NLL over the
output positions only (mean per supervised token).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor, concat, gather_rows, record, softmax_cross_entropy

PAD, BOS, EOS, SEP = "<pad>", "<bos>", "<eos>", "<sep>"
SPECIALS = (PAD, BOS, EOS, SEP)
N_LABELS = 5
N_MARKERS = 4

_MASK_VALUE = -1e9
_NORM_EPS = 1e-6


def make_vocab(V: int) -> list[str]:
    """Closed synthetic vocabulary: specials, label words, markers, content words."""
    base = list(SPECIALS)
    if V <= len(base):
        return base[:V]
    labels = [f"L{i}" for i in range(N_LABELS)]
    markers = [f"Q{i}" for i in range(N_MARKERS)]
    vocab = base + labels + markers
    n_content = V - len(vocab)
    vocab += [f"w{i:02d}" for i in range(max(n_content, 0))]
    return vocab[:V]


def param_names(n_layers: int) -> list[str]:
    names = ["tok_emb", "pos_emb"]
    for i in range(n_layers):
        names += [f"l{i}.wq", f"l{i}.wk", f"l{i}.wv", f"l{i}.wo", f"l{i}.w1", f"l{i}.w2"]
    names.append("head")
    return names


def _checksum(params: Mapping[str, np.ndarray], header: dict) -> str:
    h = hashlib.sha256(json.dumps(header, sort_keys=True).encode())
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FrozenBackbone:
    d: int
    n_layers: int
    V: int
    seed: int
    vocab: tuple
    params: Mapping[str, np.ndarray] = field(repr=False)
    max_len: int = 64
    n_heads: int = 1
    prenorm: bool = True
    linear_layers: int = 0
    checksum: str = ""

    def __post_init__(self):
        for arr in self.params.values():
            arr.setflags(write=False)
        if not self.checksum:
            object.__setattr__(self, "checksum", self.compute_checksum())

    @property
    def header(self) -> dict:
        return {"d": self.d, "L": self.n_layers, "V": self.V, "seed": self.seed,
                "max_len": self.max_len, "n_heads": self.n_heads, "prenorm": self.prenorm,
                "linear_layers": self.linear_layers}

    def compute_checksum(self) -> str:
        return _checksum(self.params, self.header)

    @property
    def token_to_id(self) -> dict:
        return {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def token_embeddings(self) -> np.ndarray:
        return self.params["tok_emb"]

    def with_params(self, params: Mapping[str, np.ndarray]) -> "FrozenBackbone":
        """Clone with replaced parameter arrays (used by the fine-tuning baseline)."""
        copied = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        return FrozenBackbone(self.d, self.n_layers, self.V, self.seed, self.vocab,
                              copied, self.max_len, self.n_heads, self.prenorm,
                              self.linear_layers)

    def save(self, path) -> None:
        header = dict(self.header, checksum=self.checksum, vocab=list(self.vocab))
        arrays = {f"p:{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, header=np.array(json.dumps(header)), **arrays)

    @classmethod
    def load(cls, path) -> "FrozenBackbone":
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            params = {k[2:]: np.array(z[k]) for k in z.files if k.startswith("p:")}
        bb = cls(header["d"], header["L"], header["V"], header["seed"],
                 tuple(header["vocab"]), params, header["max_len"], header["n_heads"], header["prenorm"],
                 header["linear_layers"])
        if bb.checksum != header["checksum"]:
            raise ValueError(f"checksum mismatch loading {path}")
        return bb


def init_backbone(d: int, L: int, V: int, seed: int, max_len: int = 64,
                  style: str = "memory", head_scale: float | None = None,
                  sharpness: float = 8.0, pool_focus: float = 1.0, noise: float = 0.05,
                  n_heads: int = 1) -> FrozenBackbone:
    """Deterministic backbone; logits start small so per-token loss is near ln V.

    ``style="random"`` draws every matrix i.i.d. and uses pre-norm blocks.
    ``style="memory"`` (default) keeps random embeddings and head but gives
    the blocks a fixed key/value layout, standing in for what pre-training
    would provide: the first half of each embedding is a key, the second
    half a value.  Layer 0 is an unnormalized (linear) causal attention whose
    output at each position sums earlier values weighted by key similarity,
    so prompt rows act as a linear associative memory over input tokens.
    Later layers mean-pool the token positions, told apart from prompt rows
    by a flag channel in the position embedding.  Every structured matrix
    gets i.i.d. noise of relative size ``noise``.
    """
    if min(d, L, V) < 1:
        raise ValueError("d, L and V must be >= 1")
    if n_heads < 1 or d % n_heads:
        raise ValueError("n_heads must divide d")
    if style not in ("memory", "random"):
        raise ValueError(f"unknown backbone style {style!r}")
    rng = np.random.default_rng(seed)
    vocab = tuple(make_vocab(V))
    if style == "random":
        scale = 0.6 if head_scale is None else head_scale
        params = {
            "tok_emb": rng.normal(0.0, 0.18, (V, d)),
            "pos_emb": rng.normal(0.0, 0.09, (max_len, d)),
        }
        for i in range(L):
            for name in ("wq", "wk", "wv", "wo"):
                params[f"l{i}.{name}"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
            params[f"l{i}.w1"] = rng.normal(0.0, np.sqrt(2.0 / d), (d, 4 * d))
            params[f"l{i}.w2"] = rng.normal(0.0, 1.0 / np.sqrt(4 * d), (4 * d, d))
        params["head"] = rng.normal(0.0, scale / np.sqrt(d), (d, V))
        return FrozenBackbone(d, L, V, seed, vocab, params, max_len, n_heads, True, 0)

    if d < 3:
        raise ValueError("the memory layout needs d >= 3")
    half = d // 2
    key = np.zeros((d, d))
    key[:half, :half] = np.eye(half)
    flag = np.zeros((d, d))
    flag[d - 1, d - 1] = 1.0
    value = np.eye(d) - key - flag
    root = np.sqrt(d / n_heads)

    def jitter(m):
        return m + rng.normal(0.0, noise / np.sqrt(d), (d, d))

    tok = rng.normal(0.0, 1.0 / np.sqrt(half), (V, d))
    tok[:len(SPECIALS), :half] = 0.0  # special tokens never trigger a lookup
    tok[:, d - 1] = 0.0
    pos = rng.normal(0.0, noise / np.sqrt(d), (max_len, d))
    pos[:, d - 1] = 1.0
    params = {"tok_emb": tok, "pos_emb": pos}
    for i in range(L):
        if i == 0:
            params["l0.wq"] = jitter(sharpness * key)
            params["l0.wk"] = jitter(key)
        else:
            params[f"l{i}.wq"] = jitter(pool_focus * root * flag)
            params[f"l{i}.wk"] = jitter(flag)
        params[f"l{i}.wv"] = jitter(value)
        params[f"l{i}.wo"] = jitter(np.eye(d))
        params[f"l{i}.w1"] = rng.normal(0.0, np.sqrt(2.0 / d), (d, 4 * d))
        params[f"l{i}.w2"] = rng.normal(0.0, noise / np.sqrt(4 * d), (4 * d, d))
        # nothing writes into the flag channel, so it stays exactly 1 on tokens
        for name in ("wo", "w2"):
            params[f"l{i}.{name}"][:, d - 1] = 0.0
    scale = 2.0 if head_scale is None else head_scale
    params["head"] = rng.normal(0.0, scale / np.sqrt(d), (d, V))
    return FrozenBackbone(d, L, V, seed, vocab, params, max_len, n_heads, False, 1)


@dataclass(frozen=True)
class TokenBatch:
    """Tokenized examples: left-padded inputs, right-padded outputs ending in EOS."""

    input_ids: np.ndarray
    output_ids: np.ndarray
    output_mask: np.ndarray

    def __len__(self):
        return self.input_ids.shape[0]

    def rows(self, idx) -> "TokenBatch":
        idx = np.asarray(idx)
        return TokenBatch(self.input_ids[idx], self.output_ids[idx], self.output_mask[idx])


def tokenize(vocab_index: Mapping[str, int], text: str) -> list[int]:
    ids = []
    for tok in text.split():
        try:
            ids.append(vocab_index[tok])
        except KeyError:
            raise ValueError(f"token {tok!r} not in vocabulary") from None
    return ids


def encode_batch(backbone: FrozenBackbone, pairs) -> TokenBatch:
    """Tokenize ``(input_text, output_text)`` pairs into a :class:`TokenBatch`."""
    index = backbone.token_to_id
    pad, eos = index[PAD], index[EOS]
    xs = [tokenize(index, x) for x, _ in pairs]
    ys = [tokenize(index, y) + [eos] for _, y in pairs]
    if not xs:
        raise ValueError("cannot encode an empty batch")
    t_in = max(len(x) for x in xs)
    t_out = max(len(y) for y in ys)
    inp = np.full((len(xs), t_in), pad, dtype=np.int64)
    out = np.full((len(xs), t_out), pad, dtype=np.int64)
    mask = np.zeros((len(xs), t_out))
    for i, (x, y) in enumerate(zip(xs, ys)):
        if x:
            inp[i, t_in - len(x):] = x
        out[i, :len(y)] = y
        mask[i, :len(y)] = 1.0
    return TokenBatch(inp, out, mask)


def _rms_norm(h: Tensor) -> Tensor:
    return h.rms_norm(_NORM_EPS)


def _as_param_tensors(backbone, params):
    if params is None:
        return {k: Tensor(v) for k, v in backbone.params.items()}
    return params


def forward_hidden(backbone: FrozenBackbone, prompt, input_ids: np.ndarray,
                   dec_ids: np.ndarray, params=None) -> Tensor:
    """Final normalized hidden states for the positions ``[SEP; Y...]``.

    ``prompt`` is a ``(P, d)`` Tensor/array or None.  ``params`` optionally
    supplies (tracked) parameter tensors in place of the frozen arrays.
    """
    p = _as_param_tensors(backbone, params)
    pad_id = backbone.token_to_id[PAD]
    B, t_in = input_ids.shape
    t_dec = dec_ids.shape[1]
    tokens = np.concatenate([input_ids, dec_ids], axis=1)
    T_tok = tokens.shape[1]
    if T_tok > backbone.max_len:
        raise ValueError(f"sequence length {T_tok} exceeds max_len {backbone.max_len}")
    h = gather_rows(p["tok_emb"], tokens) + p["pos_emb"][:T_tok]
    n_prompt = 0
    if prompt is not None:
        prompt = prompt if isinstance(prompt, Tensor) else Tensor(prompt)
        if prompt.ndim != 2 or prompt.shape[1] != backbone.d:
            raise ValueError(f"prompt width {prompt.shape} does not match d={backbone.d}")
        n_prompt = prompt.shape[0]
    if n_prompt:
        rows = record("broadcast_to", [prompt], shape=(B, n_prompt, backbone.d))
        h = concat([rows, h], axis=1)
    T = n_prompt + T_tok

    key_ok = np.ones((B, T), dtype=bool)
    key_ok[:, n_prompt:] = tokens != pad_id
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None, :, :] & key_ok[:, None, :]
    mask = np.where(allowed, 0.0, _MASK_VALUE)
    H = backbone.n_heads
    dh = backbone.d // H
    scale = 1.0 / np.sqrt(dh)
    keep = allowed.astype(np.float64)
    if H > 1:
        mask = mask[:, None, :, :]
        keep = keep[:, None, :, :]

    def heads(t):
        return t.reshape(B, T, H, dh).permute(0, 2, 1, 3) if H > 1 else t

    for i in range(backbone.n_layers):
        x = _rms_norm(h) if backbone.prenorm else h
        q = heads(x @ p[f"l{i}.wq"])
        k = heads(x @ p[f"l{i}.wk"])
        v = heads(x @ p[f"l{i}.wv"])
        if i < backbone.linear_layers:
            att = ((q @ k.T) * scale).tanh() * keep
        else:
            att = ((q @ k.T) * scale + mask).softmax(axis=-1)
        ctx = att @ v
        if H > 1:
            ctx = ctx.permute(0, 2, 1, 3).reshape(B, T, backbone.d)
        h = h + ctx @ p[f"l{i}.wo"]
        x = _rms_norm(h) if backbone.prenorm else h
        h = h + (x @ p[f"l{i}.w1"]).relu() @ p[f"l{i}.w2"]

    start = n_prompt + t_in
    out = h[:, start:start + t_dec, :]
    return _rms_norm(out) if backbone.prenorm else out


def decoder_inputs(backbone: FrozenBackbone, batch: TokenBatch) -> np.ndarray:
    sep = backbone.token_to_id[SEP]
    B = len(batch)
    return np.concatenate([np.full((B, 1), sep, dtype=np.int64), batch.output_ids[:, :-1]], axis=1)


def nll_loss(backbone: FrozenBackbone, prompt, batch: TokenBatch, params=None) -> Tensor:
    """Teacher-forced mean per-token negative log-likelihood of the outputs."""
    if batch.output_mask.sum() <= 0:
        raise ValueError("batch has no supervised output positions")
    p = _as_param_tensors(backbone, params)
    h = forward_hidden(backbone, prompt, batch.input_ids, decoder_inputs(backbone, batch), p)
    logits = h @ p["head"]
    return softmax_cross_entropy(logits, batch.output_ids, batch.output_mask)


def greedy_decode(backbone: FrozenBackbone, prompt, input_ids: np.ndarray,
                  max_new_tokens: int, params=None) -> list[list[int]]:
    """Greedy argmax decoding; each row stops at its first EOS (EOS not returned)."""
    if input_ids.shape[1] + max_new_tokens > backbone.max_len:
        raise ValueError("decode length overflow: input plus max_new_tokens exceeds max_len")
    if params is not None:
        params = {k: Tensor(v.data if isinstance(v, Tensor) else v) for k, v in params.items()}
    prompt = None if prompt is None else Tensor(prompt.data if isinstance(prompt, Tensor) else prompt)
    index = backbone.token_to_id
    B = input_ids.shape[0]
    dec = np.full((B, 1), index[SEP], dtype=np.int64)
    head = backbone.params["head"] if params is None else params["head"].data
    for _ in range(max_new_tokens):
        h = forward_hidden(backbone, prompt, input_ids, dec, params)
        nxt = np.argmax(h.data[:, -1, :] @ head, axis=-1)
        dec = np.concatenate([dec, nxt[:, None]], axis=1)
    eos = index[EOS]
    out = []
    for row in dec[:, 1:]:
        seq = []
        for t in row:
            if t == eos:
                break
            seq.append(int(t))
        out.append(seq)
    return out
