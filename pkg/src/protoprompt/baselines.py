"""Comparison methods: manual prompt, vision matching, linear probe, soft prompt.

All four share the frozen encoders with the prototype model. MCP and VM
carry zero learnable parameters; LP trains a linear head on frozen image
latents with the same optimizer settings as the main model; SP is literally
the prototype model with one component, no regularizers, and its unused
image prototype kept out of the optimizer.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import DatasetBundle, FewShotEpisode
from .errors import ContractError, DataError
from .model import (
    PtpModel,
    build_image_encoder,
    build_ptp_model,
    category_softmax,
    load_checkpoint,
    save_checkpoint,
)
from .encoders import build_synthetic_encoders

# frozen prefix for the manual prompt in synthetic mode: the last four
# vocabulary ids, reserved by convention (collision-free for C <= 1017)
MCP_PREFIX_TOKENS = 4


class McpClassifier:
    """Fixed manual prompt; zero learnable parameters."""

    method = "mcp"

    def __init__(self, bundle: DatasetBundle, mode: str = "bi",
                 encoder_seed: int = 0, d_tok: int = 64):
        self.catalog = bundle.catalog
        self.mode = mode
        if bundle.text_matrix is not None:
            # real mode: exported template embeddings, one row per category
            norms = np.maximum(
                np.linalg.norm(bundle.text_matrix, axis=1, keepdims=True), 1e-12
            )
            self._rows = bundle.text_matrix / norms
            self.image_encoder = build_image_encoder(bundle, "bi", None)
            return
        if mode == "real-offset":
            raise DataError(
                "manual-prompt real mode needs a template text store "
                "(text.ptpe) in the dataset"
            )
        table, text, fusion = build_synthetic_encoders(
            mode, d_lat=bundle.train.dim, d_tok=d_tok, seed=encoder_seed
        )
        self.image_encoder = build_image_encoder(bundle, mode, fusion)
        prefix_ids = list(range(table.vocab_size - MCP_PREFIX_TOKENS,
                                table.vocab_size))
        prompt = Tensor(table.rows(prefix_ids))
        cat_ids = [self.catalog.ids_for(j) for j in range(len(self.catalog))]
        if mode == "single":
            self._fusion = fusion
            self._prompt = prompt
            self._cat_ids = cat_ids
            self._rows = None
        else:
            self._rows = text.encode_batch(prompt, cat_ids).data
            self._fusion = None

    def trainable_parameters(self) -> list:
        return []

    def param_count(self) -> int:
        return 0

    def predict(self, example_ids) -> np.ndarray:
        if self._rows is not None:
            fx = self.image_encoder.batch_normalized(example_ids)
            return np.argmax(fx @ self._rows.T, axis=1)
        raw = self.image_encoder.batch_raw(example_ids)
        scores = self._fusion.match_batch(raw, self._prompt, self._cat_ids)
        return np.argmax(scores.data, axis=1)


class ClassMeanBank:
    """Per-category mean latent with support counts."""

    def __init__(self, means: np.ndarray, counts: np.ndarray):
        self.means = means
        self.counts = counts

    @property
    def normalized(self) -> np.ndarray:
        norms = np.maximum(np.linalg.norm(self.means, axis=1, keepdims=True), 1e-12)
        return self.means / norms


class VisionMatcher:
    """Nearest normalized class mean in the frozen image latent space."""

    method = "vm"

    def __init__(self, bundle: DatasetBundle, mode: str = "bi",
                 encoder_seed: int = 0, d_tok: int = 64):
        fusion = None
        if mode == "single":
            _, _, fusion = build_synthetic_encoders(
                mode, d_lat=bundle.train.dim, d_tok=d_tok, seed=encoder_seed
            )
        self.catalog = bundle.catalog
        self.image_encoder = build_image_encoder(
            bundle, mode if mode == "single" else "bi", fusion
        )
        self.bank: ClassMeanBank | None = None

    def fit(self, episode: FewShotEpisode) -> ClassMeanBank:
        support = episode.support
        c = len(self.catalog)
        missing = [j for j in range(c) if np.sum(support.labels == j) == 0]
        if missing:
            raise DataError(f"vision matching needs support in every "
                            f"category; empty: {missing}")
        fx = self.image_encoder.batch_normalized(support.ids)
        means = np.stack([
            fx[support.labels == j].mean(axis=0) for j in range(c)
        ])
        counts = np.bincount(support.labels, minlength=c)
        self.bank = ClassMeanBank(means, counts)
        return self.bank

    def trainable_parameters(self) -> list:
        return []

    def param_count(self) -> int:
        return 0

    def predict(self, example_ids) -> np.ndarray:
        if self.bank is None:
            raise ContractError("vision matcher not fitted")
        fx = self.image_encoder.batch_normalized(example_ids)
        return np.argmax(fx @ self.bank.normalized.T, axis=1)


class LinearProbeHead:
    """Linear classifier on frozen image latents, trained by cross-entropy.

    No bias by default, matching the published d*C parameter count; pass
    ``bias=True`` to add one.
    """

    method = "lp"

    def __init__(self, bundle: DatasetBundle, mode: str = "bi",
                 encoder_seed: int = 0, d_tok: int = 64, bias: bool = False,
                 seed: int = 0):
        fusion = None
        if mode == "single":
            _, _, fusion = build_synthetic_encoders(
                mode, d_lat=bundle.train.dim, d_tok=d_tok, seed=encoder_seed
            )
        self.catalog = bundle.catalog
        self.image_encoder = build_image_encoder(
            bundle, mode if mode == "single" else "bi", fusion
        )
        d_lat = bundle.train.dim if mode != "single" else fusion.d_lat
        c = len(bundle.catalog)
        self.weights = Parameter("probe_weights", np.zeros((d_lat, c)))
        self.bias = Parameter("probe_bias", np.zeros(c)) if bias else None
        self.seed = seed

    def trainable_parameters(self) -> list:
        out = [self.weights]
        if self.bias is not None:
            out.append(self.bias)
        return out

    def param_count(self) -> int:
        return sum(p.size for p in self.trainable_parameters())

    def logits(self, example_ids) -> np.ndarray:
        fx = self.image_encoder.batch_normalized(example_ids)
        out = fx @ self.weights.tensor.data
        if self.bias is not None:
            out = out + self.bias.tensor.data
        return out

    def loss_on_batch(self, example_ids, labels):
        labels = np.asarray(labels, dtype=np.int64)
        fx = Tensor(self.image_encoder.batch_normalized(example_ids))
        logits = ad.matmul(fx, self.weights.tensor)
        if self.bias is not None:
            logits = ad.add(logits, self.bias.tensor)
        probs = ad.softmax(logits)
        onehot = np.zeros(probs.shape)
        onehot[np.arange(len(labels)), labels] = 1.0
        picked = ad.reduce_sum(ad.mul(probs, Tensor(onehot)), axis=1)
        loss = ad.scale(ad.mean(ad.log(ad.clamp(picked, lo=1e-12))), -1.0)
        parts = {"ce_or_bce": loss.item(), "r1": 0.0, "r2": 0.0}
        return loss, parts

    def predict(self, example_ids) -> np.ndarray:
        return np.argmax(self.logits(example_ids), axis=1)


def build_soft_prompt(bundle: DatasetBundle, episode: FewShotEpisode,
                      mode: str = "bi", m: int | None = None, tau: float = 0.01,
                      seed: int = 0, encoder_seed: int = 0,
                      d_tok: int = 64) -> PtpModel:
    """One universal prompt: the prototype model with K=1 and no
    regularizers, sharing every code path; the single unused image
    prototype stays out of the optimizer."""
    return build_ptp_model(
        bundle, episode, mode=mode, k=1, m=m, lam=0.0, tau=tau, seed=seed,
        encoder_seed=encoder_seed, d_tok=d_tok, train_prototypes=False,
        method="sp",
    )


# -- persistence -------------------------------------------------------------

def save_baseline(obj, outdir) -> None:
    if isinstance(obj, VisionMatcher):
        if obj.bank is None:
            raise ContractError("fit the vision matcher before saving")
        save_checkpoint(outdir, {"method": "vm", "classes": list(obj.catalog.names)},
                        {"class_means": obj.bank.means,
                         "class_counts": obj.bank.counts.astype(np.float64)[None, :]})
    elif isinstance(obj, LinearProbeHead):
        mats = {"probe_weights": obj.weights.tensor.data}
        if obj.bias is not None:
            mats["probe_bias"] = obj.bias.tensor.data[None, :]
        save_checkpoint(outdir, {"method": "lp", "classes": list(obj.catalog.names)},
                        mats)
    elif isinstance(obj, McpClassifier):
        save_checkpoint(outdir, {"method": "mcp", "classes": list(obj.catalog.names)}, {})
    else:
        raise ContractError(f"cannot checkpoint {type(obj).__name__}")


def load_baseline(indir, bundle: DatasetBundle, mode: str = "bi",
                  encoder_seed: int = 0, d_tok: int = 64):
    payload, matrices = load_checkpoint(indir)
    method = payload.get("method")
    if payload.get("classes") != list(bundle.catalog.names):
        raise DataError("checkpoint classes do not match dataset catalog")
    if method == "vm":
        vm = VisionMatcher(bundle, mode=mode, encoder_seed=encoder_seed, d_tok=d_tok)
        vm.bank = ClassMeanBank(
            matrices["class_means"],
            matrices["class_counts"].reshape(-1).astype(np.int64),
        )
        return vm
    if method == "lp":
        lp = LinearProbeHead(bundle, mode=mode, encoder_seed=encoder_seed,
                             d_tok=d_tok, bias="probe_bias" in matrices)
        lp.weights.assign(matrices["probe_weights"])
        if lp.bias is not None:
            lp.bias.assign(matrices["probe_bias"].reshape(-1))
        return lp
    if method == "mcp":
        return McpClassifier(bundle, mode=mode, encoder_seed=encoder_seed,
                             d_tok=d_tok)
    raise DataError(f"unknown baseline checkpoint method {method!r}")
