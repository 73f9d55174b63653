"""Multi-turn dialogue orchestration over the trained components.

Routes each user turn to one of four tasks (report, vqa, generate, chat) by
deterministic rules, runs the language model, extracts `<Xray>` spans from
its output, and hands each span to the image generator. Session history is
an append-only log.
"""

from __future__ import annotations

import io
import itertools
import re
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import diffusion, lm
from .config import Config
from .instruct import XRAY_CLOSE, XRAY_OPEN
from .rng import Rng

REPORT_INSTRUCTION = "Generate a report of this chest x-ray"

_SESSION_COUNTER = itertools.count(1)
_IMAGE_COUNTER = itertools.count(1)


@dataclass
class Session:
    id: str
    created_at: float = field(default_factory=time.time)
    history: list = field(default_factory=list)  # (role, text, image_ids)
    # runtime caches, not part of the visible log
    last_features: np.ndarray | None = None
    last_report: str | None = None
    images: dict = field(default_factory=dict)  # image id -> pixels
    turn_index: int = 0

    @classmethod
    def create(cls) -> "Session":
        return cls(id=f"session-{next(_SESSION_COUNTER)}")

    def append(self, role: str, text: str, image_ids=()) -> None:
        self.history.append((role, text, list(image_ids)))


@dataclass
class GeneratedImage:
    id: str
    prompt: str
    pixels: np.ndarray  # (H, W) in [0,1]

    def png_bytes(self) -> bytes:
        buf = io.BytesIO()
        arr = np.clip(np.rint(self.pixels * 255), 0, 255).astype(np.uint8)
        Image.fromarray(arr, mode="L").save(buf, format="PNG")
        return buf.getvalue()


@dataclass
class AssistantReply:
    text: str
    images: list
    task: str
    diagnostics: list = field(default_factory=list)


def extract_xray_prompts(text: str):
    """(prompts, cleaned_text, diagnostics) for marker spans in LM output.

    Valid, non-nested pairs become prompts; each span is replaced by a
    numbered placeholder. Invalid markup yields diagnostics and no prompts;
    stray markers are always removed from the cleaned text.
    """
    prompts = []
    diagnostics = []
    pieces = []
    pos = 0
    pattern = re.compile(r"<Xray>|</Xray>")
    open_at = None
    for m in pattern.finditer(text):
        if m.group() == XRAY_OPEN:
            if open_at is not None:
                diagnostics.append("nested <Xray>")
            else:
                pieces.append(text[pos:m.start()])
                open_at = m.end()
            pos = m.end()
        else:
            if open_at is None:
                diagnostics.append("unmatched </Xray>")
                pieces.append(text[pos:m.start()])
            else:
                inner = text[open_at:m.start()].strip()
                if inner:
                    prompts.append(inner)
                    pieces.append(f"[image {len(prompts)}]")
                else:
                    diagnostics.append("empty <Xray> span")
                open_at = None
            pos = m.end()
    if open_at is not None:
        diagnostics.append("unterminated <Xray>")
    pieces.append(text[pos:] if open_at is None else "")
    cleaned = "".join(pieces)
    if diagnostics:
        return [], cleaned, diagnostics
    return prompts, cleaned, diagnostics


def route_task(text: str, has_image: bool, session: Session) -> str:
    t = text.lower()
    is_question = "?" in t or re.match(
        r"\s*(is|are|was|were|does|do|what|where|how|which)\b", t)
    if has_image or session.last_features is not None:
        if "report" in t and not is_question:
            return "report"
        if is_question:
            return "vqa"
        if has_image:
            return "report"
    if re.search(r"\b(generate|create|draw|produce|make|show)\b", t) and \
            re.search(r"\b(image|x-?ray|view|cxr|scan)\b", t):
        return "generate"
    return "chat"


class Assistant:
    """Binds the trained models; owns no session state itself."""

    def __init__(self, model: lm.MedLM, aligner, sd_model=None,
                 sd_schedule=None, config: Config | None = None):
        self.lm = model
        self.aligner = aligner
        self.sd_model = sd_model
        self.sd_schedule = sd_schedule
        self.config = config or Config()

    # ---- prompting ---------------------------------------------------------

    def build_task_prompt(self, task: str, question: str | None = None,
                          report: str | None = None,
                          with_image: bool = False) -> list[int]:
        """Token ids ending in the ASSISTANT cue; IMG flag mirrors training."""
        v = self.lm.vocab
        if task in ("report", "vqa") and not with_image:
            raise ValueError(f"{task} task requires an image")
        ids = [lm.BOS]
        if with_image:
            ids.append(lm.IMG)
        if task == "report":
            ids += [lm.HUMAN] + v.encode(REPORT_INSTRUCTION) + [lm.ASSISTANT]
            return ids
        if task == "vqa":
            if not question:
                raise ValueError("vqa task requires a question")
            if report:
                ids += [lm.HUMAN] + v.encode(REPORT_INSTRUCTION)
                ids += [lm.ASSISTANT] + v.encode(report) + [lm.EOS]
            ids += [lm.HUMAN] + v.encode(question) + [lm.ASSISTANT]
            return ids
        if not question:
            raise ValueError("text request required")
        return ids + [lm.HUMAN] + v.encode(question) + [lm.ASSISTANT]

    def _run_lm(self, ids: list[int], features: np.ndarray | None,
                max_new: int = 80) -> str:
        out = self.lm.generate(ids, visual=features, max_new=max_new,
                               greedy=True)
        return self.lm.vocab.decode(out).strip()

    # ---- task implementations ------------------------------------------------

    def report(self, features: np.ndarray) -> str:
        ids = self.build_task_prompt("report", with_image=True)
        return self._run_lm(ids, features)

    def answer(self, features: np.ndarray, question: str,
               report: str | None = None) -> tuple[str, str]:
        """(answer, report_used); generates the report first if not given."""
        if report is None:
            report = self.report(features)
        ids = self.build_task_prompt("vqa", question=question, report=report,
                                     with_image=True)
        return self._run_lm(ids, features, max_new=32), report

    def generate_images(self, request: str, seed: int):
        ids = self.build_task_prompt("generate", question=request)
        raw = self._run_lm(ids, None, max_new=96)
        prompts, cleaned, diagnostics = extract_xray_prompts(raw)
        images = []
        for i, prompt in enumerate(prompts):
            if self.sd_model is None:
                diagnostics.append("image generator not loaded")
                break
            px = diffusion.sample(self.sd_model, self.sd_schedule, self.aligner,
                                  prompt, seed=seed + i,
                                  guidance=self.config.sd_guidance,
                                  guidance_stride=self.config.sd_guidance_stride)[0]
            images.append(GeneratedImage(id=f"img-{next(_IMAGE_COUNTER)}",
                                         prompt=prompt, pixels=px))
        return cleaned, images, diagnostics

    # ---- the orchestrated turn ------------------------------------------------

    def handle_turn(self, session: Session, text: str,
                    image: np.ndarray | None = None) -> AssistantReply:
        session.turn_index += 1
        seed = (self.config.seed * 1000003 + session.turn_index) & 0x7FFFFFFF
        attached = []
        if image is not None:
            session.last_features = self.aligner.encode_image(image).tokens
            session.last_report = None
            img_id = f"img-{next(_IMAGE_COUNTER)}"
            session.images[img_id] = image
            attached = [img_id]
        task = route_task(text, image is not None, session)
        session.append("Human", text, attached)
        try:
            reply = self._dispatch(session, task, text, seed)
        except Exception as exc:  # noqa: BLE001 - reply, keep session usable
            reply = AssistantReply(text=f"Sorry, something went wrong: {exc}",
                                   images=[], task=task,
                                   diagnostics=[f"error: {exc}"])
        for img in reply.images:
            session.images[img.id] = img.pixels
        session.append("Assistant", reply.text, [i.id for i in reply.images])
        return reply

    def _dispatch(self, session: Session, task: str, text: str,
                  seed: int) -> AssistantReply:
        if task == "report":
            report = self.report(session.last_features)
            session.last_report = report
            return AssistantReply(text=report, images=[], task=task)
        if task == "vqa":
            answer, report = self.answer(session.last_features, text,
                                         session.last_report)
            session.last_report = report
            return AssistantReply(text=answer, images=[], task=task)
        if task == "generate":
            cleaned, images, diagnostics = self.generate_images(text, seed)
            return AssistantReply(text=cleaned, images=images, task=task,
                                  diagnostics=diagnostics)
        ids = self.build_task_prompt("chat", question=text)
        return AssistantReply(text=self._run_lm(ids, None, max_new=48),
                              images=[], task="chat")
