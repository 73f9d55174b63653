"""End-to-end artifact pipeline.

Every build step writes its artifact under one workspace directory together
with a stamp recording the effective config hash; repeated invocations reuse
artifacts whose stamp matches, so `eval` or `serve` can be run cold and will
(re)build exactly what is missing or stale.
"""

from __future__ import annotations

import json
import time
from pathlib import Path

import numpy as np

from . import classifier as clf
from . import diffusion, metrics
from .aligner import Aligner, train_aligner
from .assistant import Assistant, REPORT_INSTRUCTION
from .config import Config
from .corpus import CATEGORIES, build_corpus, load_image, load_split
from .instruct import (ExternalInstructor, TemplateInstructor, ViewClassifier,
                       build_instruction_dataset, load_dialogues, prepend_view,
                       presence_question, train_view_classifier)
from .lm import MedLM, Vocab, dialogue_sequence, instruction_tune, pretrain_lm
from .probe import probe_predict, train_logistic_probe
from .rng import Rng


class Workspace:
    """Artifact paths and cached build steps for one config."""

    def __init__(self, root, config: Config, log=print):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.config = config
        self.log = log
        self.corpus_dir = self.root / "corpus"

    # ---- stamping -----------------------------------------------------------

    def _stamp_path(self, name: str) -> Path:
        return self.root / f"{name}.stamp.json"

    def _fresh(self, name: str, *paths) -> bool:
        stamp = self._stamp_path(name)
        if not stamp.exists() or not all(Path(p).exists() for p in paths):
            return False
        try:
            return json.loads(stamp.read_text())["config_hash"] == self.config.hash()
        except (json.JSONDecodeError, KeyError):
            return False

    def _write_stamp(self, name: str, extra: dict | None = None) -> None:
        payload = {"config_hash": self.config.hash(),
                   "written_at": time.time()}
        payload.update(extra or {})
        self._stamp_path(name).write_text(json.dumps(payload, indent=2))

    # ---- build steps ----------------------------------------------------------

    def ensure_corpus(self) -> Path:
        if not self._fresh("corpus", self.corpus_dir / "manifest.json"):
            self.log("[pipeline] building corpus")
            summary = build_corpus(self.config.corpus_config(), self.corpus_dir)
            self._write_stamp("corpus", {"summary": summary})
        return self.corpus_dir

    def instructor(self):
        if self.config.instructor == "external" and self.config.instructor_url:
            return ExternalInstructor(self.config.instructor_url,
                                      timeout=self.config.instructor_timeout,
                                      retries=self.config.instructor_retries)
        return TemplateInstructor()

    def ensure_dialogues(self) -> Path:
        self.ensure_corpus()
        marker = self.root / "dialogues" / "train.jsonl"
        if not self._fresh("dialogues", marker):
            self.log("[pipeline] building instruction dialogues")
            counts = build_instruction_dataset(self.corpus_dir, self.root,
                                               self.instructor())
            self._write_stamp("dialogues", {"counts": counts})
        return self.root / "dialogues"

    def ensure_view_classifier(self) -> ViewClassifier:
        self.ensure_corpus()
        path = self.root / "view.mxc"
        if not self._fresh("view", path):
            self.log("[pipeline] training view classifier")
            model, history = train_view_classifier(self.corpus_dir, self.config,
                                                   self.log)
            model.save(path)
            self._write_stamp("view", {"history": history})
        return ViewClassifier.load(path, self.config)

    def ensure_aligner(self) -> Aligner:
        self.ensure_corpus()
        path = self.root / "aligner.mxc"
        if not self._fresh("aligner", path):
            self.log("[pipeline] training aligner")
            model, history = train_aligner(self.corpus_dir, self.config, self.log)
            model.save(path)
            self._write_stamp("aligner", {"history": history})
        return Aligner.load(path, self.config)

    def ensure_lm(self) -> MedLM:
        self.ensure_dialogues()
        path = self.root / "lm.mxc"
        if not self._fresh("lm", path):
            aligner = self.ensure_aligner()
            self.log("[pipeline] training language model")
            train_dlg = load_dialogues(self.root, "train")
            val_dlg = load_dialogues(self.root, "val")
            texts = sorted({text for d in train_dlg for _, text in d.turns})
            vocab = Vocab.build(texts)
            model = pretrain_lm(vocab, self._pretrain_texts(), self.config,
                                self.log)
            feats = self._feature_cache(aligner, "train")
            train_items = [self._item(vocab, d, feats) for d in train_dlg]
            val_feats = self._feature_cache(aligner, "val")
            val_items = [self._item(vocab, d, val_feats) for d in val_dlg]
            history = instruction_tune(model, train_items, val_items,
                                       self.config, self.log)
            model.save(path)
            self._write_stamp("lm", {"history": history})
        return MedLM.load(path, self.config)

    def _pretrain_texts(self) -> list[str]:
        records = load_split(self.corpus_dir, "train")
        return [prepend_view(r.text, r.view) for r in records]

    def _feature_cache(self, aligner: Aligner, split: str) -> dict:
        records = load_split(self.corpus_dir, split)
        pixels = np.stack([load_image(self.corpus_dir, split, r.record_id)
                           for r in records])
        feats = {}
        for start in range(0, len(records), 64):
            tokens, _ = aligner.image_forward(pixels[start:start + 64])
            for i, rec in enumerate(records[start:start + 64]):
                feats[rec.record_id] = tokens.data[i].astype(np.float64)
        return feats

    def _item(self, vocab: Vocab, dialogue, feats: dict):
        with_image = (dialogue.archetype in ("report", "vqa")
                      and dialogue.source_report_id in feats)
        seq = dialogue_sequence(vocab, dialogue.turns, with_image,
                                context_spans=int(dialogue.archetype == "vqa"))
        features = feats[dialogue.source_report_id] if with_image else None
        return (*seq, features)

    def ensure_sd(self):
        self.ensure_corpus()
        base_path = self.root / "sd_base.mxc"
        ctrl_path = self.root / "sd_ctrl.mxc"
        if not self._fresh("sd", base_path, ctrl_path):
            aligner = self.ensure_aligner()
            self.log("[pipeline] training diffusion base")
            base, schedule, base_hist = diffusion.train_base(
                self.corpus_dir, aligner, self.config, self.log)
            diffusion.save_model(base_path, base, self.config)
            self.log("[pipeline] fine-tuning control branch")
            model, schedule, ctrl_hist = diffusion.attach_control_and_finetune(
                base, self.corpus_dir, aligner, self.config, self.log)
            diffusion.save_model(ctrl_path, model, self.config)
            self._write_stamp("sd", {"base_history": base_hist,
                                     "ctrl_history": ctrl_hist})
        return diffusion.load_model(ctrl_path, self.config)

    def ensure_classifier(self) -> clf.PathologyClassifier:
        self.ensure_corpus()
        path = self.root / "clf.mxc"
        if not self._fresh("clf", path):
            self.log("[pipeline] training downstream classifier")
            model, history = clf.train_classifier(self.corpus_dir, self.config,
                                                  self.log)
            model.save(path)
            self._write_stamp("clf", {"history": history})
        return clf.PathologyClassifier.load(path, self.config)

    def build_all(self) -> None:
        self.ensure_corpus()
        self.ensure_dialogues()
        self.ensure_view_classifier()
        self.ensure_aligner()
        self.ensure_lm()
        self.ensure_sd()
        self.ensure_classifier()

    def build_assistant(self) -> Assistant:
        aligner = self.ensure_aligner()
        model = self.ensure_lm()
        sd_model, schedule = self.ensure_sd()
        return Assistant(model, aligner, sd_model, schedule, self.config)


# ---------------------------------------------------------------------------
# evaluation


def _test_features(ws: Workspace, aligner: Aligner):
    records = load_split(ws.corpus_dir, "test")
    pixels = np.stack([load_image(ws.corpus_dir, "test", r.record_id)
                       for r in records])
    feats = []
    for start in range(0, len(records), 64):
        tokens, _ = aligner.image_forward(pixels[start:start + 64])
        feats.extend(tokens.data.astype(np.float64))
    return records, pixels, feats


def eval_reports(assistant: Assistant, records, feats, log=print) -> dict:
    refs, cands = [], []
    for rec, f in zip(records, feats):
        refs.append(prepend_view(rec.text, rec.view))
        cands.append(assistant.report(f))
    truth = np.stack([metrics.extract_labels(r).multihot() for r in refs])
    pred = np.stack([metrics.extract_labels(c).multihot() for c in cands])
    out = {
        "bleu": {f"bleu-{n}": metrics.bleu(cands, refs, n) for n in (1, 2, 3, 4)},
        "rouge_l": float(np.mean([metrics.rouge_l(c, r)
                                  for c, r in zip(cands, refs)])),
        "meteor_lite": float(np.mean([metrics.meteor_lite(c, r)
                                      for c, r in zip(cands, refs)])),
        "cider_d": metrics.cider_d(cands, refs),
        "label_f1": {mode: metrics.f1(pred, truth, mode=mode)
                     for mode in ("micro", "macro", "weighted")},
        "label_auroc_micro": metrics.auroc(pred, truth, mode="micro"),
    }
    log(f"[eval.report] F1 micro {out['label_f1']['micro']:.3f} "
        f"BLEU-1 {out['bleu']['bleu-1']:.3f}")
    return out


def vqa_questions(records, seed: int, per_cell: int = 8) -> list[dict]:
    """Presence questions: per category, `per_cell` positives and negatives."""
    rng = Rng(seed, "eval.vqa")
    cells = []
    for cat in CATEGORIES:
        for want in (True, False):
            pool = [i for i, r in enumerate(records)
                    if (cat in {f.category for f in r.findings}) == want]
            order = rng.permutation(len(pool))
            for j in order[:per_cell]:
                cells.append({"index": pool[j],
                              "question": presence_question(cat),
                              "answer": "yes" if want else "no",
                              "topic": "presence", "diagnosis": cat})
    return cells


def eval_vqa(assistant: Assistant, records, feats, seed: int,
             log=print) -> dict:
    questions = vqa_questions(records, seed)
    answers = []
    report_cache = {}
    for q in questions:
        i = q["index"]
        if i not in report_cache:
            report_cache[i] = assistant.report(feats[i])
        ans, _ = assistant.answer(feats[i], q["question"],
                                  report=report_cache[i])
        answers.append(ans)
    scores = metrics.vqa_score(answers, questions)
    scores["n_questions"] = len(questions)
    log(f"[eval.vqa] presence accuracy {scores['overall']:.3f} "
        f"on {len(questions)} questions")
    return scores


def _generate_batch(assistant: Assistant, prompts: list[str],
                    seed: int, guidance: float = 1.0) -> np.ndarray:
    return diffusion.sample_prompts(
        assistant.sd_model, assistant.sd_schedule, assistant.aligner, prompts,
        seed, guidance=guidance,
        guidance_stride=assistant.config.sd_guidance_stride)


def eval_generation(assistant: Assistant, classifier, records, pixels,
                    seed: int, n_images: int = 100, log=print) -> dict:
    rng = Rng(seed, "eval.gen")
    order = rng.permutation(len(records))[:n_images]
    prompts = [prepend_view(records[i].text, records[i].view) for i in order]
    generated = _generate_batch(assistant, prompts, seed,
                                assistant.config.sd_guidance)

    aligner = assistant.aligner
    def pooled(px):
        feats = []
        for start in range(0, len(px), 64):
            _, p = aligner.image_forward(px[start:start + 64])
            feats.append(p.data.astype(np.float64))
        return np.concatenate(feats)

    real = pooled(pixels)
    gen_feats = pooled(generated)
    noise = rng.uniform((len(generated), pixels.shape[1], pixels.shape[2]))
    noise_feats = pooled(noise)
    fid_gen = metrics.fid(gen_feats, real)
    fid_noise = metrics.fid(noise_feats, real)

    truth = np.stack([clf.report_multihot(p) for p in prompts])
    acc = clf.per_label_accuracy(classifier, generated, truth)
    out = {"fid_generated": fid_gen, "fid_noise": fid_noise,
           "fid_ratio": fid_gen / max(fid_noise, 1e-12),
           "classifier_per_label_acc": acc.tolist(),
           "classifier_min_label_acc": float(acc.min()),
           "n_images": int(len(generated))}
    log(f"[eval.gen] FID gen {fid_gen:.2f} noise {fid_noise:.2f} "
        f"clf acc {np.round(acc, 3)}")
    return out


def eval_view_control(assistant: Assistant, ws: Workspace, seed: int,
                      n_per_view: int = 10, log=print) -> dict:
    """Train a logistic probe on real pooled features, apply to prompted
    batches: fraction classified as the prompted view."""
    aligner = assistant.aligner
    records = load_split(ws.corpus_dir, "train")
    pixels = np.stack([load_image(ws.corpus_dir, "train", r.record_id)
                       for r in records[:400]])
    labels = np.array([1.0 if r.view == "Lateral" else 0.0
                       for r in records[:400]])
    feats = []
    for start in range(0, len(pixels), 64):
        _, p = aligner.image_forward(pixels[start:start + 64])
        feats.append(p.data.astype(np.float64))
    params = train_logistic_probe(np.concatenate(feats), labels)

    views = {"PA": "PA view of the chest was obtained. "
                   "No acute cardiopulmonary process.",
             "Lateral": "Lateral view of the chest was obtained. "
                        "No acute cardiopulmonary process."}
    correct, total = 0, 0
    per_view = {}
    for view, prompt in views.items():
        px = _generate_batch(assistant, [prompt] * n_per_view, seed)
        _, p = aligner.image_forward(px)
        pred = probe_predict(params, p.data.astype(np.float64)) >= 0.5
        want = view == "Lateral"
        hits = int((pred == want).sum())
        per_view[view] = hits / n_per_view
        correct += hits
        total += n_per_view
    out = {"probe_accuracy": correct / total, "per_view": per_view,
           "n_per_view": n_per_view}
    log(f"[eval.view] probe accuracy {out['probe_accuracy']:.3f} {per_view}")
    return out


def run_eval(ws: Workspace, split: str = "test", log=print,
             n_gen_images: int = 100, n_view: int = 10) -> dict:
    """Builds anything missing, evaluates all four tasks, returns metrics."""
    assistant = ws.build_assistant()
    classifier = ws.ensure_classifier()
    records, pixels, feats = _test_features(ws, assistant.aligner)
    t0 = time.time()
    results = {
        "config_hash": ws.config.hash(),
        "seed": ws.config.seed,
        "split": split,
        "report": eval_reports(assistant, records, feats, log),
        "vqa": eval_vqa(assistant, records, feats, ws.config.seed, log),
        "generation": eval_generation(assistant, classifier, records, pixels,
                                      ws.config.seed, n_gen_images, log),
        "view_control": eval_view_control(assistant, ws, ws.config.seed,
                                          n_view, log),
    }
    results["eval_seconds"] = time.time() - t0
    return results
