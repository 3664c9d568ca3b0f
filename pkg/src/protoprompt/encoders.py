"""Frozen encoder surrogates.

The text encoder is a tiny pre-norm transformer over token embeddings; it
is differentiable with respect to its *input* prompt vectors while every
weight stays frozen. The fusion encoder shares the same transformer core
design and scores fused image/text sequences through a pooler head, with
image latents entering as projected pseudo-tokens. Image encoders either
look latents up from a store or pool them through the fusion encoder with
an empty text side.

All weights are drawn once from a seeded numpy PCG64 generator and never
change afterwards; constructing an encoder twice with one seed yields
bit-identical weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import DEFAULT_VOCAB, SPECIAL_TOKENS, write_matrix, read_matrix
from .errors import ContractError, MissingExampleError

__all__ = [
    "TokenEmbeddingTable",
    "FrozenTextEncoder",
    "FrozenImageEncoder",
    "FrozenFusionEncoder",
    "build_synthetic_encoders",
    "save_weight_snapshot",
    "snapshot_bytes",
]


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    """Classic sin/cos position table, shape (length, dim)."""
    pos = np.arange(length)[:, None]
    i = np.arange(dim // 2)[None, :]
    angles = pos / np.power(10000.0, 2.0 * i / dim)
    table = np.zeros((length, dim))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    return table


class TokenEmbeddingTable:
    """Frozen vocabulary embeddings with reserved CLS/SEP/PAD ids."""

    CLS = 0
    SEP = 1
    PAD = 2

    def __init__(self, vocab_size: int = DEFAULT_VOCAB, d_tok: int = 64,
                 seed: int = 0):
        if vocab_size <= SPECIAL_TOKENS:
            raise ContractError("vocab too small for special tokens")
        rng = np.random.default_rng(seed)
        self.vocab_size = vocab_size
        self.d_tok = d_tok
        self.matrix = rng.normal(0.0, 1.0, (vocab_size, d_tok))

    def rows(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise ContractError(f"token id out of range for vocab {self.vocab_size}")
        return self.matrix[ids]

    def named_weights(self) -> dict:
        return {"token_table": self.matrix}


class _TransformerCore:
    """Pre-norm transformer stack with frozen random weights.

    Weight matrices are N(0, 1/sqrt(d_model)) (standard deviation
    1/sqrt(d_model)); layer-norm gains start at one, biases at zero.
    """

    def __init__(self, d_model: int, n_layers: int = 2, n_heads: int = 4,
                 ffn_mult: int = 4, seed: int = 0):
        if d_model % n_heads != 0:
            raise ContractError(f"d_model {d_model} not divisible by {n_heads} heads")
        if d_model % 2 != 0:
            raise ContractError("d_model must be even for sinusoidal positions")
        rng = np.random.default_rng(seed)
        std = 1.0 / np.sqrt(d_model)
        self.d_model = d_model
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.layers = []
        for _ in range(n_layers):
            layer = {
                "wq": rng.normal(0, std, (d_model, d_model)),
                "wk": rng.normal(0, std, (d_model, d_model)),
                "wv": rng.normal(0, std, (d_model, d_model)),
                "wo": rng.normal(0, std, (d_model, d_model)),
                "w1": rng.normal(0, std, (d_model, ffn_mult * d_model)),
                "w2": rng.normal(0, std, (ffn_mult * d_model, d_model)),
                "ln1_g": np.ones(d_model), "ln1_b": np.zeros(d_model),
                "ln2_g": np.ones(d_model), "ln2_b": np.zeros(d_model),
            }
            self.layers.append({k: Tensor(v) for k, v in layer.items()})
        self.final_g = Tensor(np.ones(d_model))
        self.final_b = Tensor(np.zeros(d_model))
        self._pos_cache: dict[int, Tensor] = {}

    def positions(self, length: int) -> Tensor:
        if length not in self._pos_cache:
            self._pos_cache[length] = Tensor(
                sinusoidal_positions(length, self.d_model)
            )
        return self._pos_cache[length]

    def forward(self, x: Tensor) -> Tensor:
        """(B, T, d_model) -> (B, T, d_model); gradients flow to x only."""
        b, t, d = x.shape
        for lw in self.layers:
            h = ad.layer_norm(x, lw["ln1_g"], lw["ln1_b"])
            x = ad.add(x, self._attention(h, lw))
            h = ad.layer_norm(x, lw["ln2_g"], lw["ln2_b"])
            ff = ad.matmul(ad.tanh(ad.matmul(h, lw["w1"])), lw["w2"])
            x = ad.add(x, ff)
        return ad.layer_norm(x, self.final_g, self.final_b)

    def _attention(self, h: Tensor, lw) -> Tensor:
        b, t, d = h.shape
        nh, hd = self.n_heads, self.head_dim

        def split(m):
            return ad.transpose(ad.reshape(m, (b, t, nh, hd)), (0, 2, 1, 3))

        q = split(ad.matmul(h, lw["wq"]))
        k = split(ad.matmul(h, lw["wk"]))
        v = split(ad.matmul(h, lw["wv"]))
        scores = ad.scale(
            ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd)
        )
        ctx = ad.matmul(ad.softmax(scores), v)
        merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, t, d))
        return ad.matmul(merged, lw["wo"])

    def named_weights(self, prefix: str) -> dict:
        out = {}
        for i, lw in enumerate(self.layers):
            for k, v in lw.items():
                out[f"{prefix}.layer{i}.{k}"] = v.data
        out[f"{prefix}.final_g"] = self.final_g.data
        out[f"{prefix}.final_b"] = self.final_b.data
        return out


class FrozenTextEncoder:
    """g(.): prompt vectors + category tokens -> unit vector in latent space."""

    def __init__(self, table: TokenEmbeddingTable, d_lat: int = 64,
                 n_layers: int = 2, n_heads: int = 4, seed: int = 1):
        self.table = table
        self.d_lat = d_lat
        self.core = _TransformerCore(table.d_tok, n_layers, n_heads, seed=seed)
        rng = np.random.default_rng(seed + 7_001)
        self.out_proj = Tensor(
            rng.normal(0, 1.0 / np.sqrt(table.d_tok), (table.d_tok, d_lat))
        )
        self._cat_cache: dict[tuple, np.ndarray] = {}

    @property
    def d_tok(self) -> int:
        return self.table.d_tok

    def encode_batch(self, prompt: Tensor | None, id_seqs) -> Tensor:
        """Encode one prompt against many category token sequences.

        prompt: (m, d_tok) tensor or None for m = 0; id_seqs: list of
        non-empty token-id lists. Returns (C, d_lat), rows L2-normalized.
        Gradients flow only into ``prompt``.
        """
        if prompt is not None and prompt.shape[0]:
            stacked = ad.reshape(prompt, (1,) + tuple(prompt.shape))
        else:
            stacked = None
        out = self.encode_all(stacked, id_seqs)
        return ad.reshape(out, (len(id_seqs), self.d_lat))

    def encode_all(self, prompts: Tensor | None, id_seqs) -> Tensor:
        """Encode K prompts against C category sequences in one batch.

        prompts: (K, m, d_tok) or None; returns (K, C, d_lat) with rows
        L2-normalized. Row [k, c] equals encode_batch(prompts[k], ...)[c].
        """
        if not id_seqs:
            raise ContractError("encode_batch: no category sequences")
        m = 0 if prompts is None else prompts.shape[1]
        for seq in id_seqs:
            if len(seq) == 0 and m == 0:
                raise ContractError("encode_text: empty total sequence")
        k = 1 if prompts is None else prompts.shape[0]
        lengths = {len(s) for s in id_seqs}
        if len(lengths) == 1:
            out = self._encode_uniform(prompts, id_seqs, k)
        else:
            cols = [self._encode_uniform(prompts, [seq], k) for seq in id_seqs]
            out = ad.concat(cols, axis=1)
        return out

    def _cat_rows(self, id_seqs) -> np.ndarray:
        key = tuple(tuple(s) for s in id_seqs)
        cached = self._cat_cache.get(key)
        if cached is None:
            cached = np.stack([self.table.rows(seq) for seq in id_seqs])
            self._cat_cache[key] = cached
        return cached

    def _encode_uniform(self, prompts, id_seqs, k) -> Tensor:
        c = len(id_seqs)
        parts = []
        m = 0 if prompts is None else prompts.shape[1]
        if m:
            parts.append(ad.repeat0(prompts, c))  # (K*C, m, d_tok)
        t_cat = len(id_seqs[0])
        if t_cat:
            cat = self._cat_rows(id_seqs)
            parts.append(Tensor(np.tile(cat, (k, 1, 1))))
        seq = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        total = m + t_cat
        seq = ad.add(seq, self.core.positions(total))
        hidden = self.core.forward(seq)
        pooled = ad.mean(hidden, axis=1)
        rows = ad.l2_normalize(ad.matmul(pooled, self.out_proj))
        return ad.reshape(rows, (k, c, self.d_lat))

    def encode(self, prompt: Tensor | None, category_token_ids) -> Tensor:
        """Single-sequence variant; returns (d_lat,)."""
        if len(category_token_ids) == 0:
            raise ContractError("encode_text: category needs >= 1 token id")
        out = self.encode_batch(prompt, [list(category_token_ids)])
        return ad.reshape(out, (self.d_lat,))

    def named_weights(self) -> dict:
        out = self.core.named_weights("text")
        out["text.out_proj"] = self.out_proj.data
        out.update(self.table.named_weights())
        return out


class FrozenFusionEncoder:
    """Single-tower scorer: image pseudo-tokens fused with text tokens.

    The pooler head maps the first-position output through a frozen linear
    layer and tanh; the match head reduces the pooled vector to a scalar.
    """

    def __init__(self, table: TokenEmbeddingTable, d_lat: int = 64,
                 pseudo_tokens: int = 4, n_layers: int = 2, n_heads: int = 4,
                 seed: int = 2):
        self.table = table
        self.d_lat = d_lat
        self.pseudo_tokens = pseudo_tokens
        self.core = _TransformerCore(table.d_tok, n_layers, n_heads, seed=seed)
        rng = np.random.default_rng(seed + 7_002)
        d_tok = table.d_tok
        std = 1.0 / np.sqrt(d_tok)
        self.img_proj = Tensor(rng.normal(0, std, (d_lat, pseudo_tokens * d_tok)))
        self.pooler_w = Tensor(rng.normal(0, std, (d_tok, d_lat)))
        self.match_w = Tensor(rng.normal(0, 1.0 / np.sqrt(d_lat), (d_lat, 1)))

    def _pseudo(self, latents: np.ndarray) -> np.ndarray:
        # (B, d_lat) -> (B, p, d_tok); frozen projection, plain numpy
        flat = latents @ self.img_proj.data
        return flat.reshape(latents.shape[0], self.pseudo_tokens, self.table.d_tok)

    def pool_image(self, latent: np.ndarray) -> np.ndarray:
        """Pooler output over [CLS] + pseudo-tokens + [SEP] with empty text."""
        latent = np.asarray(latent, dtype=np.float64)
        pseudo = self._pseudo(latent[None, :])
        cls = self.table.rows([self.table.CLS])[None]
        sep = self.table.rows([self.table.SEP])[None]
        seq = np.concatenate([cls, pseudo, sep], axis=1)
        x = Tensor(seq)
        x = ad.add(x, self.core.positions(seq.shape[1]))
        hidden = self.core.forward(x)
        first = ad.reshape(ad.narrow(hidden, 1, 0, 1), (1, self.table.d_tok))
        pooled = ad.tanh(ad.matmul(first, self.pooler_w))
        return pooled.data.reshape(self.d_lat)

    def match_batch(self, latents: np.ndarray, prompt: Tensor | None,
                    id_seqs) -> Tensor:
        """Match scores for every (image, category) pair: (B, C) tensor.

        Sequence per pair: [CLS] + pseudo-tokens + [SEP] + prompt vectors +
        category tokens. Differentiable w.r.t. ``prompt`` only.
        """
        if not id_seqs:
            raise ContractError("match_batch: no category sequences")
        lengths = {len(s) for s in id_seqs}
        if 0 in lengths:
            raise ContractError("fusion_match: category needs >= 1 token id")
        if len(lengths) != 1:
            cols = [self.match_batch(latents, prompt, [seq]) for seq in id_seqs]
            return ad.concat(cols, axis=1)

        latents = np.asarray(latents, dtype=np.float64)
        return self.match_from_pseudo(self._pseudo(latents), prompt, id_seqs)

    def match_from_pseudo(self, pseudo: np.ndarray, prompt: Tensor | None,
                          id_seqs) -> Tensor:
        """As :meth:`match_batch` but with precomputed pseudo-tokens (B, p, d_tok)."""
        b = pseudo.shape[0]
        c = len(id_seqs)
        n = b * c
        d_tok = self.table.d_tok
        pseudo = np.repeat(np.asarray(pseudo, dtype=np.float64), c, axis=0)
        cls = np.broadcast_to(self.table.rows([self.table.CLS])[None], (n, 1, d_tok))
        sep = np.broadcast_to(self.table.rows([self.table.SEP])[None], (n, 1, d_tok))
        cat = np.tile(np.stack([self.table.rows(s) for s in id_seqs]), (b, 1, 1))

        parts = [Tensor(cls.copy()), Tensor(pseudo), Tensor(sep.copy())]
        m = 0 if prompt is None else prompt.shape[0]
        if m:
            parts.append(ad.tile0(prompt, n))
        parts.append(Tensor(cat))
        seq = ad.concat(parts, axis=1)
        total = 2 + self.pseudo_tokens + m + len(id_seqs[0])
        seq = ad.add(seq, self.core.positions(total))
        hidden = self.core.forward(seq)
        first = ad.reshape(ad.narrow(hidden, 1, 0, 1), (n, d_tok))
        pooled = ad.tanh(ad.matmul(first, self.pooler_w))
        scores = ad.matmul(pooled, self.match_w)
        return ad.reshape(scores, (b, c))

    def match(self, latent: np.ndarray, prompt: Tensor | None,
              category_token_ids) -> Tensor:
        out = self.match_batch(
            np.asarray(latent, dtype=np.float64)[None, :], prompt,
            [list(category_token_ids)],
        )
        return ad.reshape(out, (1,))

    def named_weights(self) -> dict:
        out = self.core.named_weights("fusion")
        out["fusion.img_proj"] = self.img_proj.data
        out["fusion.pooler_w"] = self.pooler_w.data
        out["fusion.match_w"] = self.match_w.data
        return out


class FrozenImageEncoder:
    """f(.): example id -> latent vector, via lookup or pooled fusion."""

    def __init__(self, mode: str, ids: np.ndarray, latents: np.ndarray,
                 fusion: FrozenFusionEncoder | None = None):
        if mode not in ("lookup", "pooled-fusion"):
            raise ContractError(f"unknown image encoder mode {mode!r}")
        if mode == "pooled-fusion" and fusion is None:
            raise ContractError("pooled-fusion mode needs a fusion encoder")
        self.mode = mode
        self.fusion = fusion
        self._index = {int(i): row for row, i in enumerate(ids)}
        self._raw = np.asarray(latents, dtype=np.float64)
        self._pool_cache: dict[int, np.ndarray] = {}

    @staticmethod
    def lookup(ids, latents) -> "FrozenImageEncoder":
        return FrozenImageEncoder("lookup", ids, latents)

    @staticmethod
    def pooled(ids, latents, fusion: FrozenFusionEncoder) -> "FrozenImageEncoder":
        return FrozenImageEncoder("pooled-fusion", ids, latents, fusion)

    def raw_latent(self, example_id: int) -> np.ndarray:
        """Backing-store latent (the fusion input in pooled mode)."""
        row = self._index.get(int(example_id))
        if row is None:
            raise MissingExampleError(f"example id {example_id} not in store")
        return self._raw[row]

    def encode(self, example_id: int) -> np.ndarray:
        """f(x), unnormalized."""
        if self.mode == "lookup":
            return self.raw_latent(example_id)
        key = int(example_id)
        if key not in self._pool_cache:
            self._pool_cache[key] = self.fusion.pool_image(self.raw_latent(key))
        return self._pool_cache[key]

    def encode_normalized(self, example_id: int) -> np.ndarray:
        v = self.encode(example_id)
        return v / max(np.linalg.norm(v), 1e-12)

    def batch(self, example_ids) -> np.ndarray:
        return np.stack([self.encode(i) for i in example_ids])

    def batch_normalized(self, example_ids) -> np.ndarray:
        m = self.batch(example_ids)
        norms = np.maximum(np.linalg.norm(m, axis=1, keepdims=True), 1e-12)
        return m / norms

    def batch_raw(self, example_ids) -> np.ndarray:
        return np.stack([self.raw_latent(i) for i in example_ids])


def build_synthetic_encoders(mode: str, d_lat: int = 64, d_tok: int = 64,
                             vocab_size: int = DEFAULT_VOCAB, seed: int = 0,
                             n_layers: int = 2, n_heads: int = 4):
    """Construct the frozen surrogate stack for one run.

    Returns (table, text_encoder, fusion_encoder); the fusion encoder is
    None in bi-encoder mode. The head count shrinks for widths that do not
    split into the default four heads.
    """
    while d_tok % n_heads != 0:
        n_heads //= 2
    table = TokenEmbeddingTable(vocab_size=vocab_size, d_tok=d_tok, seed=seed)
    text = FrozenTextEncoder(table, d_lat=d_lat, n_layers=n_layers,
                             n_heads=n_heads, seed=seed + 1)
    fusion = None
    if mode == "single":
        fusion = FrozenFusionEncoder(table, d_lat=d_lat, n_layers=n_layers,
                                     n_heads=n_heads, seed=seed + 2)
    return table, text, fusion


def save_weight_snapshot(outdir, named_weights: dict) -> None:
    """One PTPE binary per weight matrix plus a manifest of names/shapes."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for name, mat in sorted(named_weights.items()):
        mat2d = np.atleast_2d(np.asarray(mat))
        write_matrix(outdir / f"{name}.ptpe", mat2d)
        manifest[name] = list(np.asarray(mat).shape)
    (outdir / "weights.json").write_text(json.dumps(manifest, sort_keys=True))


def snapshot_bytes(named_weights: dict) -> bytes:
    """Deterministic byte serialization for frozen-ness checks."""
    chunks = []
    for name, mat in sorted(named_weights.items()):
        chunks.append(name.encode())
        chunks.append(np.ascontiguousarray(np.asarray(mat, dtype="<f8")).tobytes())
    return b"".join(chunks)
