"""Decoder-only language model with low-rank adapters and a visual prefix.

The base model is warmed up on corpus reports, then frozen; instruction
tuning trains only the adapters (rank-r deltas on the attention query and
value projections) plus the visual prefix adapter. The loss is masked to
assistant answer tokens.
"""

from __future__ import annotations

import re

import numpy as np

from . import checkpoint as ckpt
from .config import Config
from .nn import Embedding, LayerNorm, Linear, ParamStore, TransformerBlock
from .optim import Adam
from .rng import Rng
from .tensor import Graph, Tensor, concat, forward_backward

PAD, BOS, EOS, HUMAN, ASSISTANT, XRAY_OPEN, XRAY_CLOSE, IMG = range(8)
SPECIAL_TOKENS = ["<pad>", "<bos>", "<eos>", "<human>", "<assistant>",
                  "<Xray>", "</Xray>", "<img>"]
N_BYTES = 256
_BYTE_BASE = len(SPECIAL_TOKENS)
_WORD_BASE = _BYTE_BASE + N_BYTES

_TOKEN_RE = re.compile(r"<Xray>|</Xray>|[A-Za-z0-9]+(?:[-'][A-Za-z0-9]+)*|[^\sA-Za-z0-9]")
_NO_SPACE_BEFORE = set(".,;:!?)%]'’")
_NO_SPACE_AFTER = set("([")


class Vocab:
    """Word-level vocabulary with reserved specials and byte fallback."""

    def __init__(self, words: list[str]):
        self.words = list(words)
        self.id_of = {w: _WORD_BASE + i for i, w in enumerate(self.words)}
        self.size = _WORD_BASE + len(self.words)

    @classmethod
    def build(cls, texts) -> "Vocab":
        seen = {}
        for text in texts:
            for piece in _TOKEN_RE.findall(text):
                if piece in ("<Xray>", "</Xray>"):
                    continue
                seen[piece] = seen.get(piece, 0) + 1
        return cls(sorted(seen, key=lambda w: (-seen[w], w)))

    def encode(self, text: str) -> list[int]:
        ids = []
        for piece in _TOKEN_RE.findall(text):
            if piece == "<Xray>":
                ids.append(XRAY_OPEN)
            elif piece == "</Xray>":
                ids.append(XRAY_CLOSE)
            elif piece in self.id_of:
                ids.append(self.id_of[piece])
            else:
                ids.extend(_BYTE_BASE + b for b in piece.encode("utf-8"))
        return ids

    def _surface(self, tid: int) -> str:
        if tid == XRAY_OPEN:
            return "<Xray>"
        if tid == XRAY_CLOSE:
            return "</Xray>"
        if tid < _BYTE_BASE:
            return SPECIAL_TOKENS[tid]
        if tid < _WORD_BASE:
            raise AssertionError("byte ids handled by decode")
        return self.words[tid - _WORD_BASE]

    def decode(self, ids) -> str:
        pieces = []
        byte_buf = []
        for tid in ids:
            tid = int(tid)
            if _BYTE_BASE <= tid < _WORD_BASE:
                byte_buf.append(tid - _BYTE_BASE)
                continue
            if byte_buf:
                pieces.append(bytes(byte_buf).decode("utf-8", errors="replace"))
                byte_buf = []
            if tid in (PAD, BOS, EOS, HUMAN, ASSISTANT, IMG):
                continue
            pieces.append(self._surface(tid))
        if byte_buf:
            pieces.append(bytes(byte_buf).decode("utf-8", errors="replace"))
        out = []
        for piece in pieces:
            if not out:
                out.append(piece)
            elif piece and piece[0] in _NO_SPACE_BEFORE and len(piece) == 1:
                out.append(piece)
            elif out[-1] and out[-1][-1] in _NO_SPACE_AFTER and len(out[-1]) == 1:
                out.append(piece)
            else:
                out.append(" " + piece)
        return "".join(out)


class LowRankAdapter:
    """Additive delta B@A (B zero-initialized) on one linear projection."""

    def __init__(self, store: ParamStore, prefix: str, din: int, dout: int,
                 rank: int, alpha: float, rng: Rng):
        self.a = store.add(f"{prefix}.a", 0.02 * rng.normal((din, rank), np.float64))
        self.b = store.add(f"{prefix}.b", np.zeros((rank, dout)))
        self.scale = alpha / rank

    def __call__(self, x: Tensor) -> Tensor:
        return (x @ self.a) @ self.b * self.scale

    def delta_weight(self) -> np.ndarray:
        return self.scale * (self.a.data @ self.b.data)


class MedLM:
    """Small causal transformer; adapters target attention q/v projections."""

    def __init__(self, config: Config, vocab: Vocab):
        self.config = config
        self.vocab = vocab
        d = config.lm_dim
        rng = Rng(config.seed, "lm.init")
        s = ParamStore()
        self.store = s
        self.tok = Embedding(s, "lm.tok", vocab.size, d, rng)
        self.pos = s.add("lm.pos", 0.02 * rng.normal((config.context_len, d), np.float64))
        self.blocks = [TransformerBlock(s, f"lm.block{i}", d, config.lm_heads, rng)
                       for i in range(config.lm_layers)]
        self.ln = LayerNorm(s, "lm.ln", d)
        self.head = Linear(s, "lm.head", d, vocab.size, rng, bias=False)
        # visual prefix adapter: aligner tokens -> model width, plus separator
        self.vis_proj = Linear(s, "lm.visual.proj", config.embed_dim, d, rng)
        self.vis_sep = s.add("lm.visual.sep", 0.02 * rng.normal((d,), np.float64))
        lrng = Rng(config.seed, "lm.lora")
        self.adapters: dict[str, LowRankAdapter] = {}
        for i in range(config.lm_layers):
            self.adapters[f"block{i}.q"] = LowRankAdapter(
                s, f"lora.block{i}.q", d, d, config.lora_rank, config.lora_alpha, lrng)
            self.adapters[f"block{i}.v"] = LowRankAdapter(
                s, f"lora.block{i}.v", d, d, config.lora_rank, config.lora_alpha, lrng)
        self.adapters_enabled = True
        self.enable_adapters(True)

    def enable_adapters(self, flag: bool) -> None:
        self.adapters_enabled = flag
        for i, blk in enumerate(self.blocks):
            if flag:
                qa, va = self.adapters[f"block{i}.q"], self.adapters[f"block{i}.v"]
                blk.attn.q_delta = qa
                blk.attn.v_delta = va
            else:
                blk.attn.q_delta = None
                blk.attn.v_delta = None

    def merge_adapters(self) -> None:
        """Fold adapter deltas into the base projections and disable them."""
        for i, blk in enumerate(self.blocks):
            blk.attn.q.w.data = blk.attn.q.w.data + \
                self.adapters[f"block{i}.q"].delta_weight().astype(blk.attn.q.w.data.dtype)
            blk.attn.v.w.data = blk.attn.v.w.data + \
                self.adapters[f"block{i}.v"].delta_weight().astype(blk.attn.v.w.data.dtype)
        self.enable_adapters(False)

    def visual_prefix(self, features: np.ndarray) -> Tensor:
        """(B, P, D_vision) aligner tokens -> (B, P+1, d) prefix embeddings."""
        proj = self.vis_proj(Tensor(features))
        B = features.shape[0]
        sep = self.vis_sep.reshape(1, 1, -1) * Tensor(np.ones((B, 1, 1)))
        return concat([proj, sep], axis=1)

    def forward(self, ids: np.ndarray, visual: np.ndarray | None = None) -> Tensor:
        """Logits (B, L_prefix + L, |V|); causal over the whole sequence."""
        ids = np.asarray(ids)
        B, L = ids.shape
        if np.any(ids >= self.vocab.size) or np.any(ids < 0):
            raise ValueError("token id out of range")
        total = L + (0 if visual is None else visual.shape[1] + 1)
        if total > self.config.context_len:
            raise ValueError(f"sequence length {total} exceeds context "
                             f"{self.config.context_len}")
        h = self.tok(ids) + self.pos[:L]
        if visual is not None:
            if visual.shape[-1] != self.config.embed_dim:
                raise ValueError("visual feature dimension mismatch")
            h = concat([self.visual_prefix(visual), h], axis=1)
        for blk in self.blocks:
            h = blk(h, causal=True)
        return self.head(self.ln(h))

    # ---- objectives --------------------------------------------------------

    def answer_loss(self, logits: Tensor, targets: np.ndarray,
                    mask: np.ndarray) -> Tensor:
        """Mean NLL over mask-true target positions (assistant answers).

        `logits` must already be sliced to text positions (B, L, |V|).
        """
        if not mask.any():
            raise ValueError("loss mask selects no tokens")
        B, L = targets.shape
        logp = logits.log_softmax(axis=-1)
        rows, cols = np.nonzero(mask)
        picked = logp[(rows, cols, targets[rows, cols])]
        return -picked.mean()

    def text_logits(self, logits: Tensor, ids: np.ndarray,
                    visual: np.ndarray | None) -> Tensor:
        offset = 0 if visual is None else visual.shape[1] + 1
        return logits[:, offset:offset + ids.shape[1], :]

    # ---- generation ----------------------------------------------------------

    def generate(self, prompt_ids: list[int], visual: np.ndarray | None = None,
                 max_new: int = 64, greedy: bool = True, top_k: int = 40,
                 temperature: float = 0.8, rng: Rng | None = None,
                 stop_ids: tuple = (EOS, HUMAN)) -> list[int]:
        ids = list(prompt_ids)
        vis = visual[None] if visual is not None and visual.ndim == 2 else visual
        out = []
        for _ in range(max_new):
            batch = np.array([ids + out], dtype=np.int64)
            logits = self.forward(batch, vis)
            last = logits.data[0, -1].astype(np.float64)
            if greedy:
                nxt = int(last.argmax())
            else:
                if rng is None:
                    raise ValueError("sampling requires an rng")
                k = min(top_k, len(last))
                top = np.argpartition(last, -k)[-k:]
                logp = last[top] / temperature
                logp -= logp.max()
                p = np.exp(logp)
                p /= p.sum()
                nxt = int(top[np.searchsorted(np.cumsum(p), rng.uniform(),
                                              side="right").clip(0, k - 1)])
            out.append(nxt)
            if nxt in stop_ids:
                break
        return out

    # ---- persistence ----------------------------------------------------------

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.store.state(),
                             meta={"vocab": self.vocab.words,
                                   "config_hash": self.config.hash()})

    @classmethod
    def load(cls, path, config: Config) -> "MedLM":
        tensors, meta = ckpt.load_checkpoint(path)
        model = cls(config, Vocab(meta["vocab"]))
        model.store.load_state(tensors)
        return model

    def base_param_names(self) -> list[str]:
        """Frozen-base contract: everything except adapters and the visual
        prefix adapter."""
        return [n for n in self.store.params
                if n.startswith("lm.") and not n.startswith("lm.visual.")]


# ---------------------------------------------------------------------------
# sequence building


def dialogue_sequence(vocab: Vocab, turns, with_image: bool,
                      context_spans: int = 0):
    """Token ids, next-token targets, and answer mask for one dialogue.

    ``context_spans`` leading assistant turns are excluded from the mask.
    Used for dialogues where an early assistant turn (e.g. a report preceding
    the questions) serves as context and is trained by its own archetype;
    keeping it in the loss would swamp the short answer spans.
    """
    ids = [BOS]
    if with_image:
        ids.append(IMG)
    answer_spans = []
    for speaker, text in turns:
        if speaker == "Human":
            ids.append(HUMAN)
            ids.extend(vocab.encode(text))
        else:
            ids.append(ASSISTANT)
            start = len(ids)
            ids.extend(vocab.encode(text))
            ids.append(EOS)
            answer_spans.append((start, len(ids)))
    inputs = np.array(ids[:-1], dtype=np.int64)
    targets = np.array(ids[1:], dtype=np.int64)
    mask = np.zeros(len(targets), dtype=bool)
    for start, end in answer_spans[context_spans:]:
        mask[start - 1:end - 1] = True
    return inputs, targets, mask


def pad_sequences(seqs, pad_id: int = PAD):
    L = max(len(s[0]) for s in seqs)
    B = len(seqs)
    ids = np.full((B, L), pad_id, dtype=np.int64)
    targets = np.full((B, L), pad_id, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for i, (inp, tgt, m) in enumerate(seqs):
        ids[i, :len(inp)] = inp
        targets[i, :len(tgt)] = tgt
        mask[i, :len(m)] = m
    return ids, targets, mask


# ---------------------------------------------------------------------------
# training


def pretrain_lm(vocab: Vocab, texts: list[str], config: Config, log_fn=print) -> MedLM:
    """Warm up the base model as a plain report language model."""
    model = MedLM(config, vocab)
    model.enable_adapters(False)
    seqs = []
    for text in texts:
        ids = [BOS] + vocab.encode(text) + [EOS]
        inp = np.array(ids[:-1], dtype=np.int64)
        tgt = np.array(ids[1:], dtype=np.int64)
        seqs.append((inp, tgt, np.ones(len(tgt), dtype=bool)))
    params = {n: p for n, p in model.store.params.items() if n.startswith("lm.")
              and not n.startswith("lm.visual.")}
    opt = Adam(params, lr=config.lm_lr)
    graph = Graph(params)
    rng = Rng(config.seed, "lm.pretrain")
    for epoch in range(config.lm_pretrain_epochs):
        order = rng.permutation(len(seqs))
        losses = []
        for start in range(0, len(order), config.lm_batch):
            idx = order[start:start + config.lm_batch]
            ids, targets, mask = pad_sequences([seqs[i] for i in idx])
            logits = model.forward(ids)
            loss = model.answer_loss(logits, targets, mask)
            opt.step(forward_backward(graph, loss))
            losses.append(loss.item())
        log_fn(f"[lm.pretrain] epoch {epoch} loss {np.mean(losses):.4f}")
    model.enable_adapters(True)
    return model


def instruction_tune(model: MedLM, train_items, val_items, config: Config,
                     log_fn=print):
    """Adapter + visual-prefix training on dialogue sequences.

    Items are (inputs, targets, mask, features|None) tuples; the base model
    stays frozen throughout.
    """
    model.enable_adapters(True)
    trainable = {n: p for n, p in model.store.params.items()
                 if n.startswith("lora.") or n.startswith("lm.visual.")}
    frozen_names = model.base_param_names()
    for n in frozen_names:
        model.store.params[n].requires_grad = False
    try:
        opt = Adam(trainable, lr=config.lm_tune_lr)
        graph = Graph(trainable)
        rng = Rng(config.seed, "lm.tune")
        history = []
        for epoch in range(config.lm_epochs):
            order = rng.permutation(len(train_items))
            losses = []
            for start in range(0, len(order), config.lm_batch):
                idx = order[start:start + config.lm_batch]
                loss = _batched_answer_loss(model, [train_items[i] for i in idx])
                opt.step(forward_backward(graph, loss))
                losses.append(loss.item())
            val_loss = evaluate_answer_loss(model, val_items, config.lm_batch)
            history.append({"epoch": epoch, "loss": float(np.mean(losses)),
                            "val_loss": val_loss})
            log_fn(f"[lm.tune] epoch {epoch} loss {np.mean(losses):.4f} "
                   f"val {val_loss:.4f}")
    finally:
        for n in frozen_names:
            model.store.params[n].requires_grad = True
    return history


def _group_by_image(items):
    with_img = [it for it in items if it[3] is not None]
    without = [it for it in items if it[3] is None]
    return with_img, without


def _batched_answer_loss(model: MedLM, items) -> Tensor:
    """Single combined loss over a mixed batch (some items carry images)."""
    with_img, without = _group_by_image(items)
    losses = []
    weights = []
    for group, visual in ((with_img, True), (without, False)):
        if not group:
            continue
        ids, targets, mask = pad_sequences([(i, t, m) for i, t, m, _ in group])
        feats = np.stack([f for _, _, _, f in group]) if visual else None
        logits = model.forward(ids, feats)
        losses.append(model.answer_loss(model.text_logits(logits, ids, feats),
                                        targets, mask))
        weights.append(mask.sum())
    total = sum(w for w in weights)
    out = losses[0] * (weights[0] / total)
    for l, w in zip(losses[1:], weights[1:]):
        out = out + l * (w / total)
    return out


def evaluate_answer_loss(model: MedLM, items, batch: int) -> float:
    vals, weights = [], []
    for start in range(0, len(items), batch):
        chunk = items[start:start + batch]
        loss = _batched_answer_loss(model, chunk)
        n = sum(it[2].sum() for it in chunk)
        vals.append(loss.item() * n)
        weights.append(n)
    return float(np.sum(vals) / np.sum(weights))
