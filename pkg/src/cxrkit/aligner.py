"""Contrastive image/text alignment.

A patch-embedding image encoder and a word-level text encoder trained with
a symmetric InfoNCE loss over in-batch negatives. One trained aligner
serves three consumers: regional visual features for the language model's
prefix, pooled text conditions for the diffusion model, and pooled image
embeddings for the Frechet distance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint as ckpt
from .config import Config
from .corpus import load_image, load_split
from .metrics import extract_labels, tokenize
from .nn import (Embedding, LayerNorm, Linear, ParamStore, TransformerBlock,
                 l2_normalize, patchify)
from .optim import Adam
from .rng import Rng
from .tensor import Graph, Tensor, forward_backward

PAD, NULL, UNK = 0, 1, 2
_SPECIALS = ["<pad>", "<null>", "<unk>"]

TEMP_MIN, TEMP_MAX = 0.01, 1.0


@dataclass
class RegionalFeatures:
    tokens: np.ndarray   # (P, D)
    pooled: np.ndarray   # (D,), unit norm


@dataclass
class TextCondition:
    tokens: np.ndarray   # (L, D)
    pooled: np.ndarray   # (D,), unit norm


def build_vocab(texts, max_size: int = 4000) -> list[str]:
    seen = {}
    for t in texts:
        for w in tokenize(t):
            seen[w] = seen.get(w, 0) + 1
    words = sorted(seen, key=lambda w: (-seen[w], w))[:max_size - len(_SPECIALS)]
    return _SPECIALS + words


class Aligner:
    """Paired encoders producing a shared unit-norm embedding space."""

    def __init__(self, config: Config, vocab: list[str], seed_stream: str = "aligner.init"):
        self.config = config
        self.vocab = list(vocab)
        self.tok_to_id = {w: i for i, w in enumerate(self.vocab)}
        self.max_text_len = 40
        d = config.embed_dim
        patch = config.patch
        self.n_patches = (config.image_size // patch) ** 2
        rng = Rng(config.seed, seed_stream)
        s = ParamStore()
        self.store = s
        self.patch_proj = Linear(s, "aligner.img.patch", patch * patch, d, rng)
        self.img_pos = s.add("aligner.img.pos", 0.02 * rng.normal((self.n_patches, d), np.float64))
        self.img_blocks = [TransformerBlock(s, f"aligner.img.block{i}", d,
                                            config.aligner_heads, rng)
                           for i in range(config.aligner_layers)]
        self.img_ln = LayerNorm(s, "aligner.img.ln", d)
        self.img_head = Linear(s, "aligner.img.head", d, d, rng, bias=False)

        self.tok_emb = Embedding(s, "aligner.txt.tok", len(self.vocab), d, rng)
        self.txt_pos = s.add("aligner.txt.pos", 0.02 * rng.normal((self.max_text_len, d), np.float64))
        self.txt_blocks = [TransformerBlock(s, f"aligner.txt.block{i}", d,
                                            config.aligner_heads, rng)
                           for i in range(config.aligner_layers)]
        self.txt_ln = LayerNorm(s, "aligner.txt.ln", d)
        self.txt_head = Linear(s, "aligner.txt.head", d, d, rng, bias=False)
        self.temperature = s.add("aligner.temperature", np.array(0.07))

    # ---- encoding ---------------------------------------------------------

    def text_ids(self, text: str) -> list[int]:
        words = tokenize(text)
        if not words:
            return [NULL]
        ids = [self.tok_to_id.get(w, UNK) for w in words]
        return ids[: self.max_text_len]

    def image_forward(self, pixels: np.ndarray):
        """pixels (B, H, W) in [0,1] -> (tokens, pooled) Tensors."""
        if pixels.ndim != 3 or pixels.shape[1] != self.config.image_size:
            raise ValueError(f"expected (B, {self.config.image_size}, "
                             f"{self.config.image_size}) pixels, got {pixels.shape}")
        x = Tensor(patchify(pixels.astype(np.float64) * 2.0 - 1.0, self.config.patch))
        h = self.patch_proj(x) + self.img_pos
        for blk in self.img_blocks:
            h = blk(h)
        tokens = self.img_ln(h)
        pooled = l2_normalize(self.img_head(tokens.mean(axis=1)))
        return tokens, pooled

    def text_forward(self, ids: np.ndarray, mask: np.ndarray):
        """ids (B, L) int, mask (B, L) float -> (tokens, pooled) Tensors."""
        h = self.tok_emb(ids) + self.txt_pos[: ids.shape[1]]
        for blk in self.txt_blocks:
            h = blk(h)
        tokens = self.txt_ln(h)
        m = Tensor(mask[:, :, None])
        pooled_raw = (tokens * m).sum(axis=1) / Tensor(
            np.maximum(mask.sum(axis=1, keepdims=True), 1.0))
        pooled = l2_normalize(self.txt_head(pooled_raw))
        return tokens, pooled

    def encode_image(self, pixels: np.ndarray) -> RegionalFeatures:
        tokens, pooled = self.image_forward(pixels[None])
        return RegionalFeatures(tokens=tokens.data[0].copy(),
                                pooled=pooled.data[0].copy())

    def encode_text(self, text: str) -> TextCondition:
        ids = np.array([self.text_ids(text)], dtype=np.int64)
        mask = np.ones_like(ids, dtype=np.float64)
        tokens, pooled = self.text_forward(ids, mask)
        return TextCondition(tokens=tokens.data[0].copy(),
                             pooled=pooled.data[0].copy())

    def empty_condition(self) -> TextCondition:
        return self.encode_text("")

    # ---- contrastive loss ---------------------------------------------------

    def contrastive_loss(self, pixels: np.ndarray, ids: np.ndarray,
                         mask: np.ndarray) -> Tensor:
        if len(pixels) < 2:
            raise ValueError("contrastive loss needs batch size >= 2")
        _, img = self.image_forward(pixels)
        _, txt = self.text_forward(ids, mask)
        logits = (img @ txt.transpose(1, 0)) / self.temperature
        n = len(pixels)
        diag = (np.arange(n), np.arange(n))
        loss_i = -logits.log_softmax(axis=1)[diag].mean()
        loss_t = -logits.log_softmax(axis=0)[diag].mean()
        return (loss_i + loss_t) * 0.5

    # ---- persistence --------------------------------------------------------

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.store.state(),
                             meta={"vocab": self.vocab,
                                   "config_hash": self.config.hash()})

    @classmethod
    def load(cls, path, config: Config) -> "Aligner":
        tensors, meta = ckpt.load_checkpoint(path)
        model = cls(config, meta["vocab"])
        model.store.load_state(tensors)
        return model


def _pad_batch(id_lists, max_len):
    L = min(max(len(x) for x in id_lists), max_len)
    ids = np.zeros((len(id_lists), L), dtype=np.int64)
    mask = np.zeros((len(id_lists), L), dtype=np.float64)
    for i, x in enumerate(id_lists):
        x = x[:L]
        ids[i, :len(x)] = x
        mask[i, :len(x)] = 1.0
    return ids, mask


def _content_key(text: str):
    """View plus parsed findings; the paraphrase template is not observable
    from the image, so retrieval is scored on report content."""
    view = "lateral" if text.lower().startswith("lateral") else "pa"
    return (view, tuple(sorted(extract_labels(text).present.items())))


def retrieval_at_1(model: Aligner, pixels: np.ndarray, texts: list[str]) -> float:
    """Image-to-text retrieval, correct when the retrieved report carries the
    same content (view, findings, attributes) as the true one — the grammar
    yields duplicate and paraphrased captions."""
    _, img = model.image_forward(pixels)
    ids, mask = _pad_batch([model.text_ids(t) for t in texts], model.max_text_len)
    _, txt = model.text_forward(ids, mask)
    sims = img.data @ txt.data.T
    top = sims.argmax(axis=1)
    keys = [_content_key(t) for t in texts]
    return float(np.mean([keys[top[i]] == keys[i] for i in range(len(texts))]))


def train_aligner(corpus_dir, config: Config, log=print):
    """Symmetric InfoNCE over (image, report) pairs; returns (model, history)."""
    train = load_split(corpus_dir, "train")
    val = load_split(corpus_dir, "val")
    texts = [r.text for r in train]
    model = Aligner(config, build_vocab(texts))
    pixels = np.stack([load_image(corpus_dir, "train", r.record_id) for r in train])
    id_lists = [model.text_ids(t) for t in texts]
    val_pixels = np.stack([load_image(corpus_dir, "val", r.record_id) for r in val])
    val_texts = [r.text for r in val]

    opt = Adam(model.store.params, lr=config.aligner_lr)
    data_rng = Rng(config.seed, "aligner.data")
    graph = Graph(model.store.params)
    history = []
    for epoch in range(config.aligner_epochs):
        # half-cosine decay to 10% of the base rate over the schedule
        frac = epoch / max(1, config.aligner_epochs - 1)
        opt.lr = config.aligner_lr * (0.1 + 0.9 * 0.5 * (1 + np.cos(np.pi * frac)))
        order = data_rng.permutation(len(train))
        losses = []
        for start in range(0, len(order) - 1, config.aligner_batch):
            idx = order[start:start + config.aligner_batch]
            if len(idx) < 2:
                continue
            ids, mask = _pad_batch([id_lists[i] for i in idx], model.max_text_len)
            batch_px = pixels[idx] + 0.02 * data_rng.normal(pixels[idx].shape)
            loss = model.contrastive_loss(batch_px, ids, mask)
            grads = forward_backward(graph, loss)
            opt.step(grads)
            np.clip(model.temperature.data, TEMP_MIN, TEMP_MAX, out=model.temperature.data)
            losses.append(loss.item())
        r1 = retrieval_at_1(model, val_pixels, val_texts)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_r@1": r1})
        log(f"[aligner] epoch {epoch} loss {np.mean(losses):.4f} val r@1 {r1:.3f}")
    return model, history
