"""Instruction dialogue construction.

Classifies the view of an image with a small patch-transformer encoder,
prepends the view sentence to reports, assembles the five-block instructor
prompt, obtains three dialogues per report (offline template instructor by
default, HTTP instructor optional), and validates `<Xray>` markup.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from .config import Config
from .corpus import (CATEGORIES, VIEW_SENTENCES, Finding, ReportRecord,
                     load_image, load_split)
from .nn import (Embedding, LayerNorm, Linear, ParamStore, TransformerBlock,
                 patchify)
from .optim import Adam
from .rng import Rng
from .tensor import Graph, Tensor, forward_backward

log = logging.getLogger(__name__)

XRAY_OPEN = "<Xray>"
XRAY_CLOSE = "</Xray>"


# ---------------------------------------------------------------------------
# view classifier


@dataclass
class ViewLabel:
    view: str          # "PA" | "Lateral"
    confidence: float  # softmax max over the two classes


class ViewClassifier:
    """Tiny patch-embedding transformer encoder with a 2-class head."""

    VIEW_ORDER = ("PA", "Lateral")

    def __init__(self, config: Config):
        self.config = config
        d = config.view_dim
        patch = config.patch
        self.n_patches = (config.image_size // patch) ** 2
        rng = Rng(config.seed, "view.init")
        s = ParamStore()
        self.store = s
        self.patch_proj = Linear(s, "view.patch", patch * patch, d, rng)
        self.pos = s.add("view.pos", 0.02 * rng.normal((self.n_patches, d), np.float64))
        self.blocks = [TransformerBlock(s, f"view.block{i}", d, config.view_heads, rng)
                       for i in range(config.view_layers)]
        self.ln = LayerNorm(s, "view.ln", d)
        self.head = Linear(s, "view.head", d, 2, rng)
        self.trained = False

    def forward(self, pixels: np.ndarray) -> Tensor:
        x = Tensor(patchify(pixels.astype(np.float64) * 2.0 - 1.0, self.config.patch))
        h = self.patch_proj(x) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.head(self.ln(h).mean(axis=1))

    def classify(self, pixels: np.ndarray) -> ViewLabel:
        if not self.trained:
            raise RuntimeError("view classifier has not been trained or loaded")
        probs = self.forward(pixels[None]).softmax(axis=-1).data[0]
        k = int(probs.argmax())
        return ViewLabel(view=self.VIEW_ORDER[k], confidence=float(probs[k]))

    def save(self, path) -> None:
        ckpt.save_checkpoint(path, self.store.state(),
                             meta={"config_hash": self.config.hash()})

    @classmethod
    def load(cls, path, config: Config) -> "ViewClassifier":
        tensors, _ = ckpt.load_checkpoint(path)
        model = cls(config)
        model.store.load_state(tensors)
        model.trained = True
        return model


def train_view_classifier(corpus_dir, config: Config, log_fn=print):
    train = load_split(corpus_dir, "train")
    val = load_split(corpus_dir, "val")
    model = ViewClassifier(config)
    pixels = np.stack([load_image(corpus_dir, "train", r.record_id) for r in train])
    labels = np.array([model.VIEW_ORDER.index(r.view) for r in train])
    vpx = np.stack([load_image(corpus_dir, "val", r.record_id) for r in val])
    vlab = np.array([model.VIEW_ORDER.index(r.view) for r in val])

    opt = Adam(model.store.params, lr=config.view_lr)
    rng = Rng(config.seed, "view.data")
    graph = Graph(model.store.params)
    batch = 64
    history = []
    for epoch in range(config.view_epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(order), batch):
            idx = order[start:start + batch]
            logits = model.forward(pixels[idx])
            nll = -logits.log_softmax(axis=-1)[(np.arange(len(idx)), labels[idx])].mean()
            opt.step(forward_backward(graph, nll))
        acc = float((model.forward(vpx).data.argmax(axis=1) == vlab).mean())
        history.append({"epoch": epoch, "val_acc": acc})
        log_fn(f"[view] epoch {epoch} val acc {acc:.4f}")
    model.trained = True
    return model, history


# ---------------------------------------------------------------------------
# view sentence handling


def prepend_view(report: str, view) -> str:
    """`"<view sentence> " + report`; already-prefixed reports pass through."""
    if not report or not report.strip():
        raise ValueError("empty report")
    for sent in VIEW_SENTENCES.values():
        if report.startswith(sent):
            return report
    name = view.view if isinstance(view, ViewLabel) else view
    return VIEW_SENTENCES[name] + " " + report


def has_view_sentence(text: str) -> bool:
    return any(text.startswith(s) for s in VIEW_SENTENCES.values())


# ---------------------------------------------------------------------------
# instructor prompt (five ordered blocks)


TASK_DESCRIPTION = (
    "Please help construct three dialogues between a person and a helpful "
    "assistant. Each chest X-ray image is represented by a DESCRIPTION "
    "wrapped between an opening and a closing X-ray marker, where "
    "DESCRIPTION is a textual description or report of the X-ray image."
)
HUMAN_CHARACTERISTICS = (
    "The person may ask for a report of their chest X-ray, ask questions "
    "about specific findings, or request a generated image in a preferred "
    "view (PA or lateral)."
)
DIALOGUE_PROPERTIES = (
    "Each dialogue must flow logically, stay grounded in the report below, "
    "and quote only the relevant part of the report between the markers "
    "rather than the whole text."
)
EXAMPLE_DIALOGUES = (
    "Example 1. Human: Could you generate a PA chest X-ray without acute "
    "findings? Assistant: Certainly. Here is the image: "
    f"{XRAY_OPEN} PA view of the chest was obtained. No acute "
    f"cardiopulmonary process. {XRAY_CLOSE}\n"
    "Example 2. Human: My report mentions an effusion; can I see what that "
    "looks like? Assistant: Of course. "
    f"{XRAY_OPEN} Lateral view of the chest was obtained. There is a small "
    f"left pleural effusion. {XRAY_CLOSE}"
)


@dataclass
class InstructorPrompt:
    task_description: str
    human_characteristics: str
    dialogue_properties: str
    report_section: str
    example_dialogues: str

    def blocks(self) -> list[str]:
        return [self.task_description, self.human_characteristics,
                self.dialogue_properties, self.report_section,
                self.example_dialogues]

    def serialize(self) -> str:
        return "\n\n".join(self.blocks())


def build_prompt(report: str) -> InstructorPrompt:
    """Five-block instructor prompt; `report` must be view-augmented."""
    if not has_view_sentence(report):
        raise ValueError("report must start with a view sentence")
    report_section = (
        "The constructed dialogues must contain questions according to the "
        "following report, using only the relevant part between the markers: "
        f"{XRAY_OPEN} {report} {XRAY_CLOSE}"
    )
    return InstructorPrompt(TASK_DESCRIPTION, HUMAN_CHARACTERISTICS,
                            DIALOGUE_PROPERTIES, report_section,
                            EXAMPLE_DIALOGUES)


# ---------------------------------------------------------------------------
# markup validation


def validate_markup(text: str) -> list[str]:
    """Violations of the `<Xray>` contract; empty list means valid."""
    violations = []
    pos = 0
    depth = 0
    spans = []
    start = None
    while True:
        i = text.find(XRAY_OPEN, pos)
        j = text.find(XRAY_CLOSE, pos)
        if i == -1 and j == -1:
            break
        if j == -1 or (i != -1 and i < j):
            if depth > 0:
                violations.append("nested marker")
            depth += 1
            start = i + len(XRAY_OPEN)
            pos = i + len(XRAY_OPEN)
        else:
            if depth == 0:
                violations.append("unmatched closing marker")
            else:
                depth -= 1
                if depth == 0 and start is not None:
                    spans.append(text[start:j])
            pos = j + len(XRAY_CLOSE)
    if depth > 0:
        violations.append("unterminated marker")
    for span in spans:
        inner = span.strip()
        if not inner:
            violations.append("empty marker span")
        elif not has_view_sentence(inner):
            violations.append("marker span missing view sentence")
    return violations


# ---------------------------------------------------------------------------
# dialogues


@dataclass
class DialogueRecord:
    turns: list  # [(speaker, text)], speakers alternate starting with Human
    source_report_id: str | None
    instructor: str  # "template" | "external"
    archetype: str = "chat"  # report | vqa | generate | chat

    def validate(self) -> list[str]:
        problems = []
        for i, (speaker, text) in enumerate(self.turns):
            expected = "Human" if i % 2 == 0 else "Assistant"
            if speaker != expected:
                problems.append(f"turn {i} speaker {speaker} != {expected}")
            if speaker == "Assistant":
                problems.extend(validate_markup(text))
            elif XRAY_OPEN in text or XRAY_CLOSE in text:
                problems.append("markers in human turn")
        return problems

    def to_dict(self):
        return {"turns": [list(t) for t in self.turns],
                "source_report_id": self.source_report_id,
                "instructor": self.instructor, "archetype": self.archetype}

    @classmethod
    def from_dict(cls, d):
        return cls(turns=[tuple(t) for t in d["turns"]],
                   source_report_id=d["source_report_id"],
                   instructor=d["instructor"], archetype=d["archetype"])


_PHRASES = {
    "Pneumothorax": "pneumothorax",
    "Edema": "pulmonary edema",
    "PleuralEffusion": "pleural effusion",
    "ConsolidationPneumonia": "consolidation",
    "LungLesion": "lung lesion",
}


def presence_question(category: str) -> str:
    if category == "NoFindings":
        return "Is this chest x-ray free of acute findings?"
    return f"Is there a {_PHRASES[category]}?"


def presence_answer(category: str, findings) -> str:
    cats = {f.category for f in findings}
    if category == "NoFindings":
        return "Yes, no acute cardiopulmonary process is seen." \
            if "NoFindings" in cats else "No, there are acute findings."
    # Keep yes/no answers grammatically parallel: the question noun phrase is
    # echoed in both. Severity and laterality have their own question topics,
    # and folding them in here makes the positive answer strictly harder to
    # emit than the negative one, which biases a small model toward "no".
    if category in cats:
        return f"Yes, there is a {_PHRASES[category]}."
    return f"No, there is no {_PHRASES[category]}."


class TemplateInstructor:
    """Deterministic offline instructor covering the three task archetypes."""

    name = "template"

    def dialogues(self, record: ReportRecord) -> list[DialogueRecord]:
        rng = Rng(record.seed, "instruct.template")
        report = prepend_view(record.text, record.view)
        findings = sorted(record.findings)

        d_report = DialogueRecord(
            turns=[("Human", "Generate a report of this chest x-ray"),
                   ("Assistant", report)],
            source_report_id=record.record_id, instructor=self.name,
            archetype="report")

        pathological = [f for f in findings if f.category != "NoFindings"]
        present = {f.category for f in findings}
        absent = [c for c in CATEGORIES if c not in present]
        # Every VQA dialogue pairs a presence question whose answer is "yes"
        # with one whose answer is "no", both about the same report.  The
        # yes/no contrast over shared context is what forces the model to read
        # the report instead of memorising a majority answer.
        if pathological:
            pos_cat = pathological[int(rng.integers(0, len(pathological)))].category
        else:
            pos_cat = "NoFindings"
        neg_cat = absent[int(rng.integers(0, len(absent)))]
        qa = [(presence_question(pos_cat), presence_answer(pos_cat, findings)),
              (presence_question(neg_cat), presence_answer(neg_cat, findings))]
        # plus one detail question for topical variety
        topic_roll = int(rng.integers(0, 2))
        if pathological:
            f = pathological[int(rng.integers(0, len(pathological)))]
            if topic_roll == 0:
                qa.append((f"Where is the {_PHRASES[f.category]}?",
                           f"The {_PHRASES[f.category]} is {f.laterality}."))
            else:
                qa.append((f"How large is the {_PHRASES[f.category]}?",
                           f"The {_PHRASES[f.category]} is {f.severity}."))
        else:
            cat = CATEGORIES[int(rng.integers(0, len(CATEGORIES)))]
            qa.append((presence_question(cat), presence_answer(cat, findings)))
        # shuffle so answer polarity is not predictable from position
        qa = [qa[i] for i in rng.permutation(len(qa))]
        # VQA conditions on image, question, and the accompanying report;
        # the report enters as a preceding exchange so answering reduces to
        # reading the context, matching how the assistant replays it at
        # inference time.
        d_vqa = DialogueRecord(
            turns=[("Human", "Generate a report of this chest x-ray"),
                   ("Assistant", report)]
                  + [t for q, a in qa for t in (("Human", q), ("Assistant", a))],
            source_report_id=record.record_id, instructor=self.name,
            archetype="vqa")

        if pathological:
            f = pathological[0]
            condition = f"a {f.severity} {f.laterality} {_PHRASES[f.category]}"
        else:
            condition = "no acute findings"
        view_word = "PA" if record.view == "PA" else "lateral"
        d_gen = DialogueRecord(
            turns=[("Human", f"Could you generate a {view_word} view of a chest "
                             f"X-ray with {condition}?"),
                   ("Assistant", "Certainly. Here is an image based on the "
                                 f"description: {XRAY_OPEN} {report} {XRAY_CLOSE}")],
            source_report_id=record.record_id, instructor=self.name,
            archetype="generate")
        return [d_report, d_vqa, d_gen]


class ExternalInstructor:
    """HTTP instructor client: POST {prompt} -> {dialogues: [s, s, s]}."""

    name = "external"

    def __init__(self, url: str, timeout: float = 10.0, retries: int = 1,
                 client=None):
        import httpx
        self.url = url
        self.timeout = timeout
        self.retries = retries
        self.client = client or httpx.Client(timeout=timeout)
        self.fallback = TemplateInstructor()

    def _parse(self, text: str, record: ReportRecord) -> DialogueRecord:
        turns = []
        for chunk in text.replace("Assistant:", "\x00Assistant:") \
                         .replace("Human:", "\x00Human:").split("\x00"):
            chunk = chunk.strip()
            if not chunk:
                continue
            speaker, _, body = chunk.partition(":")
            if speaker not in ("Human", "Assistant"):
                raise ValueError(f"bad speaker {speaker!r}")
            turns.append((speaker, body.strip()))
        if not turns:
            raise ValueError("no turns parsed")
        return DialogueRecord(turns=turns, source_report_id=record.record_id,
                              instructor=self.name)

    def dialogues(self, record: ReportRecord) -> list[DialogueRecord]:
        prompt = build_prompt(prepend_view(record.text, record.view)).serialize()
        for attempt in range(self.retries + 1):
            try:
                resp = self.client.post(self.url, json={"prompt": prompt})
                resp.raise_for_status()
                payload = resp.json()
                raw = payload["dialogues"]
                if not isinstance(raw, list) or len(raw) != 3:
                    raise ValueError("expected exactly 3 dialogues")
                out = [self._parse(t, record) for t in raw]
                bad = [p for d in out for p in d.validate()]
                if bad:
                    raise ValueError(f"invalid markup from instructor: {bad}")
                return out
            except Exception as exc:  # noqa: BLE001 - any failure falls back
                log.warning("external instructor attempt %d failed (%s); %s",
                            attempt, exc,
                            "retrying" if attempt < self.retries else
                            "falling back to template instructor")
        return self.fallback.dialogues(record)


def synthesize_dialogues(record: ReportRecord, instructor) -> list[DialogueRecord]:
    """Exactly three validated dialogues for one report record."""
    out = instructor.dialogues(record)
    if len(out) != 3:
        raise ValueError("instructor must return exactly 3 dialogues")
    for d in out:
        problems = d.validate()
        if problems:
            raise ValueError(f"invalid dialogue: {problems}")
    return out


def build_instruction_dataset(corpus_dir, out_dir, instructor=None,
                              splits=("train", "val", "test")) -> dict:
    """Writes dialogues/<split>.jsonl; returns per-split dialogue counts."""
    instructor = instructor or TemplateInstructor()
    out = Path(out_dir) / "dialogues"
    out.mkdir(parents=True, exist_ok=True)
    counts = {}
    for split in splits:
        records = load_split(corpus_dir, split)
        lines = []
        for rec in records:
            for d in synthesize_dialogues(rec, instructor):
                lines.append(json.dumps(d.to_dict(), sort_keys=True))
        (out / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
        counts[split] = len(lines)
    return counts


def load_dialogues(out_dir, split: str) -> list[DialogueRecord]:
    path = Path(out_dir) / "dialogues" / f"{split}.jsonl"
    return [DialogueRecord.from_dict(json.loads(line))
            for line in path.read_text().splitlines()]
