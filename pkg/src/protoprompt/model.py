"""Prototype-gated prompt model.

K learnable image prototypes live in the raw image latent space; each one
owns a soft prompt of m learnable token vectors. Gating compares the raw
encoder output against the prototypes through a softmax; matching compares
the L2-normalized output against the encoded category texts. A query image
is scored per prompt — softmax over categories of match/tau for
separate-tower encoders, elementwise sigmoid for the fused tower — and the
final category scores are the gate-weighted sum of the per-prompt rows.

Two regularizers tie prototypes to the data: the prototype-to-nearest-
example mean pushes each prototype onto some minibatch latent, and the
example-to-nearest-prototype mean clusters the minibatch around the
prototypes. Both are averages of minimum squared distances, the minimum
taken over the current minibatch only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import CategoryCatalog, DatasetBundle, FewShotEpisode, write_matrix, read_matrix
from .encoders import (
    FrozenFusionEncoder,
    FrozenImageEncoder,
    FrozenTextEncoder,
    build_synthetic_encoders,
)
from .errors import ContractError, DataError, IoError, NumericError

MODES = ("bi", "single", "real-offset")
PROB_FLOOR = 1e-12


def similarity_weights(fx: np.ndarray, prototypes: np.ndarray) -> np.ndarray:
    """Softmax over prototype dot products, max-subtracted for stability.

    fx: (d,) or (N, d); prototypes: (K, d). Returns (K,) or (N, K).
    """
    fx = np.asarray(fx, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if not (np.all(np.isfinite(fx)) and np.all(np.isfinite(prototypes))):
        raise NumericError("similarity_weights: non-finite input")
    if fx.shape[-1] != prototypes.shape[-1]:
        raise ContractError(
            f"similarity_weights: dim mismatch {fx.shape} vs {prototypes.shape}"
        )
    logits = fx @ prototypes.T
    shifted = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def category_softmax(matches: np.ndarray, tau: float) -> np.ndarray:
    """Probability rows from match scores: softmax over the last axis of
    matches/tau. Shift-invariant in the match scores."""
    scaled = np.asarray(matches, dtype=np.float64) / tau
    shifted = scaled - np.max(scaled, axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def regularizer_r1(prototypes: np.ndarray, batch_latents: np.ndarray) -> float:
    """Mean over prototypes of the squared distance to the nearest latent."""
    r1, _ = _regularizer_pair(prototypes, batch_latents)
    return r1


def regularizer_r2(prototypes: np.ndarray, batch_latents: np.ndarray) -> float:
    """Mean over latents of the squared distance to the nearest prototype."""
    _, r2 = _regularizer_pair(prototypes, batch_latents)
    return r2


def _regularizer_pair(prototypes, batch_latents) -> tuple[float, float]:
    batch_latents = np.asarray(batch_latents, dtype=np.float64)
    if batch_latents.size == 0:
        raise ContractError("regularizers need a non-empty batch")
    p = Tensor(prototypes)
    x = Tensor(batch_latents)
    sq = ad.pairwise_sqdist(p, x)
    r1 = ad.mean(ad.reduce_min(sq, axis=1))
    r2 = ad.mean(ad.reduce_min(sq, axis=0))
    return r1.item(), r2.item()


def mixture_scores(weights: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Weighted sum of per-prompt rows: (..., K) x (..., K, C) -> (..., C)."""
    return np.einsum("...k,...kc->...c", weights, rows)


def cross_entropy_term(final: Tensor, onehot: np.ndarray) -> tuple[Tensor, int]:
    """Mean negative log of the true-category mixture score, floored at
    PROB_FLOOR. Returns (scalar tensor, number of floored entries)."""
    picked = ad.reduce_sum(ad.mul(final, Tensor(onehot)), axis=1)
    clamped = int(np.sum(picked.data < PROB_FLOOR))
    loss = ad.scale(ad.mean(ad.log(ad.clamp(picked, lo=PROB_FLOOR))), -1.0)
    return loss, clamped


def binary_cross_entropy_term(final: Tensor, onehot: np.ndarray) -> tuple[Tensor, int]:
    """One-vs-rest binary cross-entropy, summed over categories and averaged
    over the batch; scores are clamped into [PROB_FLOOR, 1 - PROB_FLOOR]."""
    floor, ceil = PROB_FLOOR, 1.0 - PROB_FLOOR
    clamped = int(np.sum((final.data < floor) | (final.data > ceil)))
    s = ad.clamp(final, lo=floor, hi=ceil)
    pos = ad.mul(Tensor(onehot), ad.log(s))
    ones = Tensor(np.ones_like(onehot))
    neg = ad.mul(Tensor(1.0 - onehot), ad.log(ad.sub(ones, s)))
    loss = ad.scale(ad.mean(ad.reduce_sum(ad.add(pos, neg), axis=1)), -1.0)
    return loss, clamped


@dataclass
class PredictionBreakdown:
    weights: np.ndarray      # (K,) similarity weights, sum to 1
    rows: np.ndarray         # (K, C) per-prompt category scores
    final: np.ndarray        # (C,) mixture scores
    predicted: int           # argmax, lowest index on ties


class PtpModel:
    """K prototype components over frozen encoders.

    The learnable set is exactly the image prototypes, the prompt vectors,
    and (real-offset mode only) the per-prototype text offsets. Encoders
    are referenced, never owned, and never updated.
    """

    def __init__(self, k: int, mode: str, catalog: CategoryCatalog,
                 image_encoder: FrozenImageEncoder,
                 text_encoder: FrozenTextEncoder | None = None,
                 fusion_encoder: FrozenFusionEncoder | None = None,
                 text_matrix: np.ndarray | None = None,
                 m: int = 16, d_tok: int = 64, tau: float = 0.01,
                 lam: float = 1.0, seed: int = 0,
                 init_latents: np.ndarray | None = None,
                 train_prototypes: bool = True, method: str = "ptp"):
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        if k < 1:
            raise ContractError("need at least one prototype component")
        if m < 0:
            raise ContractError("m must be >= 0")
        if mode == "bi" and text_encoder is None:
            raise ContractError("bi mode needs a text encoder")
        if mode == "single" and fusion_encoder is None:
            raise ContractError("single mode needs a fusion encoder")
        if mode == "real-offset" and text_matrix is None:
            raise ContractError("real-offset mode needs category text rows")

        self.k = k
        self.mode = mode
        self.catalog = catalog
        self.image_encoder = image_encoder
        self.text_encoder = text_encoder
        self.fusion_encoder = fusion_encoder
        self.m = m
        self.d_tok = d_tok
        self.tau = float(tau)
        self.lam = float(lam)
        self.seed = seed
        self.train_prototypes = train_prototypes
        self.method = method
        self.clamp_warnings = 0

        if mode == "real-offset":
            norms = np.maximum(np.linalg.norm(text_matrix, axis=1, keepdims=True), 1e-12)
            self._g0 = Tensor(text_matrix / norms)
            self.d_lat = text_matrix.shape[1]
        else:
            self._g0 = None
            self.d_lat = image_encoder._raw.shape[1] if mode == "bi" else (
                image_encoder.fusion.d_lat)

        rng = np.random.default_rng(seed)
        if init_latents is not None:
            init_latents = np.asarray(init_latents, dtype=np.float64)
            if init_latents.shape[0] < k:
                raise DataError(
                    f"need >= {k} support latents to anchor prototypes, "
                    f"got {init_latents.shape[0]}"
                )
            pick = rng.choice(init_latents.shape[0], size=k, replace=False)
            p_init = init_latents[pick]
        else:
            p_init = rng.normal(0.0, 0.02, (k, self.d_lat))
        self.prototypes = Parameter("image_prototypes", p_init, weight_decay=False)
        self.prompts = Parameter(
            "prompt_vectors", rng.normal(0.0, 0.02, (k, m, d_tok))
        )
        self.offsets = None
        if mode == "real-offset":
            self.offsets = Parameter("text_offsets", np.zeros((k, self.d_lat)))

        names = [p.name for p in self._all_parameters()]
        if len(set(names)) != len(names):
            raise ContractError("parameter names must be unique within a model")

        self._cat_ids = [catalog.ids_for(j) for j in range(len(catalog))]

    # -- parameters ---------------------------------------------------------

    def _all_parameters(self) -> list[Parameter]:
        out = [self.prototypes, self.prompts]
        if self.offsets is not None:
            out.append(self.offsets)
        return out

    def trainable_parameters(self) -> list[Parameter]:
        out = []
        if self.train_prototypes:
            out.append(self.prototypes)
        if self.prompts.size > 0:
            out.append(self.prompts)
        if self.offsets is not None:
            out.append(self.offsets)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    # -- forward pieces -----------------------------------------------------

    def _prompt_view(self, k: int) -> Tensor:
        return ad.reshape(
            ad.narrow(self.prompts.tensor, 0, k, 1), (self.m, self.d_tok)
        )

    def _category_rows_tensor(self, k: int) -> Tensor:
        """Per-prompt category text representations, (C, d_lat)."""
        if self.mode == "bi":
            prompt = self._prompt_view(k) if self.m else None
            return self.text_encoder.encode_batch(prompt, self._cat_ids)
        if self.mode == "real-offset":
            u_k = ad.narrow(self.offsets.tensor, 0, k, 1)  # (1, d_lat)
            return ad.l2_normalize(ad.add(self._g0, u_k))
        raise ContractError("single mode scores pairs; no standalone rows")

    def _all_category_rows_tensor(self) -> Tensor:
        """Stacked per-prompt category rows, (K, C, d_lat), one batch."""
        if self.mode == "bi":
            prompts = self.prompts.tensor if self.m else None
            return self.text_encoder.encode_all(prompts, self._cat_ids)
        if self.mode == "real-offset":
            u = ad.reshape(self.offsets.tensor, (self.k, 1, self.d_lat))
            return ad.l2_normalize(ad.add(u, self._g0))
        raise ContractError("single mode scores pairs; no standalone rows")

    def category_matrix(self) -> np.ndarray:
        """(K, C, d_lat) frozen snapshot of the per-prompt category rows."""
        return np.stack([self._category_rows_tensor(k).data for k in range(self.k)])

    def prototype_weights(self, fx: np.ndarray) -> np.ndarray:
        """Gating weights from the raw (unnormalized) encoder output."""
        return similarity_weights(fx, self.prototypes.tensor.data)

    def prompt_probability_row(self, example_id: int, k: int) -> np.ndarray:
        """Row of per-category scores under prompt k for one example."""
        if len(self.catalog) == 0:
            raise ContractError("empty catalog")
        if self.mode == "single":
            raw = self.image_encoder.raw_latent(example_id)[None, :]
            prompt = self._prompt_view(k) if self.m else None
            scores = self.fusion_encoder.match_batch(raw, prompt, self._cat_ids)
            return _sigmoid(scores.data[0])
        fx = self.image_encoder.encode_normalized(example_id)
        g = self._category_rows_tensor(k).data
        return category_softmax(g @ fx, self.tau)

    # -- prediction ---------------------------------------------------------

    def predict_scores(self, example_ids) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Vectorized forward over examples: (weights, rows, final).

        Gating runs on the raw encoder outputs; matching on the normalized
        ones.
        """
        fx_raw = self.image_encoder.batch(example_ids)
        fx = self.image_encoder.batch_normalized(example_ids)
        weights = similarity_weights(fx_raw, self.prototypes.tensor.data)
        n, c = fx.shape[0], len(self.catalog)
        rows = np.empty((n, self.k, c))
        if self.mode == "single":
            raw = self.image_encoder.batch_raw(example_ids)
            for k in range(self.k):
                prompt = self._prompt_view(k) if self.m else None
                scores = self.fusion_encoder.match_batch(raw, prompt, self._cat_ids)
                rows[:, k, :] = _sigmoid(scores.data)
        else:
            g = self.category_matrix()
            for k in range(self.k):
                rows[:, k, :] = category_softmax(fx @ g[k].T, self.tau)
        final = mixture_scores(weights, rows)
        return weights, rows, final

    def predict(self, example_ids) -> np.ndarray:
        _, _, final = self.predict_scores(example_ids)
        return np.argmax(final, axis=1)

    def mixture_predict(self, example_id: int) -> PredictionBreakdown:
        weights, rows, final = self.predict_scores([example_id])
        return PredictionBreakdown(
            weights=weights[0], rows=rows[0], final=final[0],
            predicted=int(np.argmax(final[0])),
        )

    # -- training loss ------------------------------------------------------

    def loss_on_batch(self, example_ids, labels) -> tuple[Tensor, dict]:
        """Tape-tracked objective on one minibatch.

        Returns (scalar loss tensor, parts dict with ce_or_bce / r1 / r2).
        Gradients flow into exactly the learnable parameters.
        """
        labels = np.asarray(labels, dtype=np.int64)
        c = len(self.catalog)
        if c == 0:
            raise ContractError("empty catalog")
        if labels.size == 0:
            raise ContractError("empty batch")
        if labels.min() < 0 or labels.max() >= c:
            raise DataError(f"labels outside [0, {c})")

        fx_raw = Tensor(self.image_encoder.batch(example_ids))
        fx = Tensor(self.image_encoder.batch_normalized(example_ids))
        b = fx.shape[0]
        sims = ad.softmax(
            ad.matmul(fx_raw, ad.transpose(self.prototypes.tensor, (1, 0)))
        )

        if self.mode == "single":
            raw = self.image_encoder.batch_raw(example_ids)
            final = None
            for k in range(self.k):
                row_k = self._row_tensor(fx, raw, k)
                weighted = ad.mul(ad.narrow(sims, 1, k, 1), row_k)
                final = weighted if final is None else ad.add(final, weighted)
        else:
            g_all = self._all_category_rows_tensor()          # (K, C, d_lat)
            matches = ad.matmul(
                ad.reshape(fx, (1, b, self.d_lat)),
                ad.transpose(g_all, (0, 2, 1)),
            )                                                  # (K, B, C)
            rows = ad.softmax(ad.scale(matches, 1.0 / self.tau))
            gates = ad.reshape(ad.transpose(sims, (1, 0)), (self.k, b, 1))
            final = ad.reduce_sum(ad.mul(rows, gates), axis=0)  # (B, C)

        onehot = np.zeros((b, c))
        onehot[np.arange(b), labels] = 1.0

        if self.mode == "single":
            err, clamped = binary_cross_entropy_term(final, onehot)
        else:
            err, clamped = cross_entropy_term(final, onehot)
        self.clamp_warnings += clamped

        sq = ad.pairwise_sqdist(self.prototypes.tensor, fx_raw)
        r1 = ad.mean(ad.reduce_min(sq, axis=1))
        r2 = ad.mean(ad.reduce_min(sq, axis=0))
        if self.lam != 0.0:
            total = ad.add(err, ad.scale(ad.add(r1, r2), self.lam))
        else:
            total = err
        parts = {"ce_or_bce": err.item(), "r1": r1.item(), "r2": r2.item()}
        return total, parts

    def _row_tensor(self, fx: Tensor, raw: np.ndarray | None, k: int) -> Tensor:
        if self.mode == "single":
            prompt = self._prompt_view(k) if self.m else None
            scores = self.fusion_encoder.match_batch(raw, prompt, self._cat_ids)
            return ad.sigmoid(scores)
        g_k = self._category_rows_tensor(k)
        matches = ad.matmul(fx, ad.transpose(g_k, (1, 0)))
        return ad.softmax(ad.scale(matches, 1.0 / self.tau))

    # -- persistence --------------------------------------------------------

    def manifest(self) -> dict:
        return {
            "kind": "checkpoint",
            "method": self.method,
            "mode": self.mode,
            "K": self.k,
            "m": self.m,
            "d_tok": self.d_tok,
            "d_lat": self.d_lat,
            "tau": self.tau,
            "lambda": self.lam,
            "seed": self.seed,
            "train_prototypes": self.train_prototypes,
            "classes": list(self.catalog.names),
        }


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# construction and checkpoints
# ---------------------------------------------------------------------------

DEFAULT_M = {"bi": 16, "single": 5, "real-offset": 0}


def build_image_encoder(bundle: DatasetBundle, mode: str,
                        fusion: FrozenFusionEncoder | None) -> FrozenImageEncoder:
    ids = np.concatenate([bundle.train.ids, bundle.test.ids])
    latents = np.concatenate([bundle.train.latents, bundle.test.latents])
    if mode == "single":
        return FrozenImageEncoder.pooled(ids, latents, fusion)
    return FrozenImageEncoder.lookup(ids, latents)


def build_ptp_model(bundle: DatasetBundle, episode: FewShotEpisode, mode: str,
                    k: int, m: int | None = None, lam: float = 1.0,
                    tau: float = 0.01, seed: int = 0, encoder_seed: int = 0,
                    d_tok: int = 64, train_prototypes: bool = True,
                    method: str = "ptp") -> PtpModel:
    """Assemble encoders and a prototype model for one run.

    Prototypes are anchored at the encoded latents of ``k`` distinct support
    examples; prompt vectors start at N(0, 0.02^2). The encoder stack is
    seeded independently of the run seed so every run shares one frozen
    "pretrained" surrogate.
    """
    if m is None:
        m = DEFAULT_M[mode]
    d_lat = bundle.train.dim
    text_encoder = fusion = None
    text_matrix = None
    if mode == "real-offset":
        if bundle.text_matrix is None:
            raise DataError("real-offset mode needs a text.ptpe store in the dataset")
        text_matrix = bundle.text_matrix
    else:
        _, text_encoder, fusion = build_synthetic_encoders(
            mode, d_lat=d_lat, d_tok=d_tok, seed=encoder_seed
        )
    image_encoder = build_image_encoder(bundle, mode, fusion)
    init_latents = image_encoder.batch(episode.support.ids)
    return PtpModel(
        k=k, mode=mode, catalog=bundle.catalog, image_encoder=image_encoder,
        text_encoder=text_encoder, fusion_encoder=fusion,
        text_matrix=text_matrix, m=m, d_tok=d_tok, tau=tau, lam=lam,
        seed=seed, init_latents=init_latents,
        train_prototypes=train_prototypes, method=method,
    )


def save_checkpoint(outdir, manifest: dict, matrices: dict) -> None:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    listing = {}
    for name, mat in sorted(matrices.items()):
        mat = np.asarray(mat, dtype=np.float64)
        shape = list(mat.shape)
        write_matrix(outdir / f"{name}.ptpe", mat.reshape(-1, mat.shape[-1]) if mat.ndim > 1 else mat.reshape(1, -1))
        listing[name] = shape
    payload = dict(manifest)
    payload["matrices"] = listing
    (outdir / "checkpoint.json").write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_checkpoint(indir) -> tuple[dict, dict]:
    indir = Path(indir)
    try:
        payload = json.loads((indir / "checkpoint.json").read_text())
    except OSError as err:
        raise IoError(f"cannot read checkpoint manifest in {indir}: {err}") from err
    matrices = {}
    for name, shape in payload.get("matrices", {}).items():
        flat = read_matrix(indir / f"{name}.ptpe")
        matrices[name] = flat.reshape(shape)
    return payload, matrices


def save_model(model: PtpModel, outdir) -> None:
    matrices = {
        "image_prototypes": model.prototypes.tensor.data,
        "prompt_vectors": model.prompts.tensor.data,
    }
    if model.offsets is not None:
        matrices["text_offsets"] = model.offsets.tensor.data
    save_checkpoint(outdir, model.manifest(), matrices)


def load_model(indir, bundle: DatasetBundle, encoder_seed: int = 0) -> PtpModel:
    payload, matrices = load_checkpoint(indir)
    if list(bundle.catalog.names) != payload["classes"]:
        raise DataError("checkpoint classes do not match dataset catalog")
    mode = payload["mode"]
    text_encoder = fusion = None
    text_matrix = None
    if mode == "real-offset":
        if bundle.text_matrix is None:
            raise DataError("real-offset checkpoint needs text.ptpe in the dataset")
        text_matrix = bundle.text_matrix
    else:
        _, text_encoder, fusion = build_synthetic_encoders(
            mode, d_lat=payload["d_lat"], d_tok=payload["d_tok"],
            seed=encoder_seed,
        )
    image_encoder = build_image_encoder(bundle, mode, fusion)
    model = PtpModel(
        k=payload["K"], mode=mode, catalog=bundle.catalog,
        image_encoder=image_encoder, text_encoder=text_encoder,
        fusion_encoder=fusion, text_matrix=text_matrix,
        m=payload["m"], d_tok=payload["d_tok"], tau=payload["tau"],
        lam=payload["lambda"], seed=payload["seed"],
        train_prototypes=payload["train_prototypes"],
        method=payload.get("method", "ptp"),
    )
    model.prototypes.assign(matrices["image_prototypes"])
    model.prompts.assign(matrices["prompt_vectors"])
    if model.offsets is not None:
        model.offsets.assign(matrices["text_offsets"])
    return model
