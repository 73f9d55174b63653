"""Downstream multi-label image classifier used to audit generated images.

A small residual CNN with a sigmoid head over the five pathology categories,
trained on the synthetic train split; NoFindings corresponds to all heads
staying below threshold.
"""

from __future__ import annotations

import numpy as np

from . import checkpoint as ckpt
from .config import Config
from .corpus import PATHOLOGIES, load_image, load_split
from .metrics import extract_labels
from .nn import Conv2d, GroupNorm, Linear, ParamStore
from .optim import Adam
from .rng import Rng
from .tensor import Graph, Tensor, avg_pool2d, forward_backward


class _ResBlock:
    def __init__(self, store, prefix, cin, cout, rng):
        self.gn1 = GroupNorm(store, f"{prefix}.gn1", cin)
        self.conv1 = Conv2d(store, f"{prefix}.conv1", cin, cout, 3, rng)
        self.gn2 = GroupNorm(store, f"{prefix}.gn2", cout)
        self.conv2 = Conv2d(store, f"{prefix}.conv2", cout, cout, 3, rng)
        self.skip = Conv2d(store, f"{prefix}.skip", cin, cout, 1, rng) \
            if cin != cout else None

    def __call__(self, x):
        h = self.conv1(self.gn1(x).gelu())
        h = self.conv2(self.gn2(h).gelu())
        return h + (self.skip(x) if self.skip else x)


class PathologyClassifier:
    """conv stem, three residual stages with pooling, global-pool sigmoid head."""

    def __init__(self, config: Config):
        self.config = config
        self.categories = PATHOLOGIES
        rng = Rng(config.seed, "clf.init")
        s = ParamStore()
        self.store = s
        self.stem = Conv2d(s, "clf.stem", 1, 16, 3, rng)
        self.blocks = [
            _ResBlock(s, "clf.rb1", 16, 32, rng),
            _ResBlock(s, "clf.rb2", 32, 48, rng),
            _ResBlock(s, "clf.rb3", 48, 64, rng),
        ]
        self.head = Linear(s, "clf.head", 64, len(self.categories), rng)

    def logits(self, pixels: np.ndarray) -> Tensor:
        if pixels.ndim != 3:
            raise ValueError("expected (batch, H, W) grayscale pixels")
        h = self.stem(Tensor(pixels[:, None] * 2.0 - 1.0))
        for blk in self.blocks:
            h = blk(avg_pool2d(h, 2))
        B, C = h.shape[0], h.shape[1]
        pooled = h.reshape(B, C, -1).mean(axis=-1)
        return self.head(pooled)

    def predict_proba(self, pixels: np.ndarray) -> np.ndarray:
        return self.logits(pixels).sigmoid().data.astype(np.float64)

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.store.state(),
                             meta={"config_hash": self.config.hash(),
                                   "categories": list(self.categories)})

    @classmethod
    def load(cls, path, config: Config) -> "PathologyClassifier":
        tensors, _ = ckpt.load_checkpoint(path)
        model = cls(config)
        model.store.load_state(tensors)
        return model


def bce_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Numerically stable binary cross-entropy from logits."""
    y = Tensor(targets.astype(np.float64))
    # log(1+e^x) = relu(x) + log(1+e^-|x|)
    return (logits.relu() - logits * y
            + (1.0 + (-logits.abs()).exp()).log()).mean()


def report_multihot(text: str) -> np.ndarray:
    present = extract_labels(text).categories()
    return np.array([c in present for c in PATHOLOGIES], dtype=np.float64)


def _load_labeled_split(corpus_dir, split):
    records = load_split(corpus_dir, split)
    pixels = np.stack([load_image(corpus_dir, split, r.record_id)
                       for r in records])
    labels = np.stack([report_multihot(r.text) for r in records])
    return pixels, labels


def train_classifier(corpus_dir, config: Config, log=print):
    model = PathologyClassifier(config)
    px, y = _load_labeled_split(corpus_dir, "train")
    vpx, vy = _load_labeled_split(corpus_dir, "val")
    opt = Adam(model.store.params, lr=config.clf_lr)
    graph = Graph(model.store.params)
    rng = Rng(config.seed, "clf.data")
    history = []
    for epoch in range(config.clf_epochs):
        order = rng.permutation(len(px))
        losses = []
        for start in range(0, len(order), config.clf_batch):
            idx = order[start:start + config.clf_batch]
            noisy = px[idx] + 0.02 * rng.normal(px[idx].shape)
            loss = bce_loss(model.logits(noisy), y[idx])
            opt.step(forward_backward(graph, loss))
            losses.append(loss.item())
        acc = per_label_accuracy(model, vpx, vy, config.clf_batch)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                        "val_acc": acc.tolist()})
        log(f"[clf] epoch {epoch} loss {np.mean(losses):.4f} "
            f"val acc {np.round(acc, 3)}")
    return model, history


def per_label_accuracy(model: PathologyClassifier, pixels: np.ndarray,
                       labels: np.ndarray, batch: int = 64) -> np.ndarray:
    preds = predict_batched(model, pixels, batch) >= 0.5
    return (preds == labels.astype(bool)).mean(axis=0)


def predict_batched(model: PathologyClassifier, pixels: np.ndarray,
                    batch: int = 64) -> np.ndarray:
    return np.concatenate([model.predict_proba(pixels[s:s + batch])
                           for s in range(0, len(pixels), batch)])
