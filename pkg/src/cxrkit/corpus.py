"""Synthetic chest X-ray corpus: procedural images paired with template reports.

Six diagnostic categories over two views (PA, Lateral). Every finding draws a
bold, view-consistent signature so that downstream probes and classifiers can
verify the rendering contract, and the report grammar is exactly invertible
by the rule-based label extractor.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .rng import Rng

FORMAT_VERSION = 1

CATEGORIES = (
    "NoFindings",
    "Pneumothorax",
    "Edema",
    "PleuralEffusion",
    "ConsolidationPneumonia",
    "LungLesion",
)
PATHOLOGIES = CATEGORIES[1:]
LATERALITIES = ("left", "right", "bilateral")
SEVERITIES = ("small", "moderate", "large")
VIEWS = ("PA", "Lateral")

VIEW_SENTENCES = {
    "PA": "PA view of the chest was obtained.",
    "Lateral": "Lateral view of the chest was obtained.",
}

NO_FINDINGS_SENTENCE = "No acute cardiopulmonary process."

# >=3 paraphrase templates per pathology; NoFindings is a single fixed sentence.
REPORT_TEMPLATES = {
    "PleuralEffusion": (
        "There is a {sev} {lat} pleural effusion.",
        "A {sev} {lat} pleural effusion is present.",
        "Imaging shows a {sev} {lat} pleural effusion.",
    ),
    "Pneumothorax": (
        "There is a {sev} {lat} pneumothorax.",
        "A {sev} {lat} pneumothorax is present.",
        "Imaging shows a {sev} {lat} pneumothorax.",
    ),
    "Edema": (
        "There is {sev} {lat} pulmonary edema.",
        "{sev} {lat} pulmonary edema is present.",
        "Findings are consistent with {sev} {lat} pulmonary edema.",
    ),
    "ConsolidationPneumonia": (
        "There is a {sev} {lat} lower lobe consolidation consistent with pneumonia.",
        "New {sev} {lat} lower lobe consolidation is consistent with pneumonia.",
        "Imaging shows a {sev} {lat} consolidation worrisome for pneumonia.",
    ),
    "LungLesion": (
        "There is a {sev} {lat} lung lesion.",
        "A {sev} {lat} lung lesion is present.",
        "Imaging shows a {sev} {lat} lung lesion.",
    ),
}


@dataclass(frozen=True, order=True)
class Finding:
    category: str
    laterality: str = "none"
    severity: str = "none"

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")
        if self.category == "NoFindings":
            if self.laterality != "none" or self.severity != "none":
                raise ValueError("NoFindings requires laterality=none, severity=none")
        else:
            if self.laterality not in LATERALITIES:
                raise ValueError(f"bad laterality {self.laterality!r}")
            if self.severity not in SEVERITIES:
                raise ValueError(f"bad severity {self.severity!r}")

    def to_dict(self):
        return {"category": self.category, "laterality": self.laterality,
                "severity": self.severity}

    @classmethod
    def from_dict(cls, d):
        return cls(d["category"], d["laterality"], d["severity"])


def validate_findings(findings) -> frozenset:
    fs = frozenset(findings)
    if not fs:
        raise ValueError("empty finding set")
    cats = [f.category for f in fs]
    if len(set(cats)) != len(cats):
        raise ValueError("duplicate category in finding set")
    if any(f.category == "NoFindings" for f in fs) and len(fs) > 1:
        raise ValueError("NoFindings excludes all other findings")
    return fs


@dataclass(frozen=True)
class SynthImage:
    pixels: np.ndarray  # (H, W) float32 in [0, 1]
    view: str
    findings: frozenset
    seed: int


@dataclass
class ReportRecord:
    text: str
    view_sentence: str
    findings: frozenset
    view: str
    seed: int
    split: str | None = None
    record_id: str | None = None


# ---------------------------------------------------------------------------
# rendering


def _disk(yy, xx, cy, cx, r):
    return ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r


def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


_SEV_SCALE = {"small": 0.65, "moderate": 1.0, "large": 1.4}


def _lung_centers(view: str, size: int):
    """Centers of the lung field(s) in pixel coordinates, keyed by side."""
    s = size / 64.0
    if view == "PA":
        return {"left": (30 * s, 20 * s), "right": (30 * s, 44 * s)}
    # lateral: one overlapping field; 'left'/'right' map to anterior/posterior
    return {"left": (30 * s, 24 * s), "right": (30 * s, 40 * s)}


def render(seed: int, view: str, findings, size: int = 64) -> SynthImage:
    """Deterministic raster for a (seed, view, findings) triple."""
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    fs = validate_findings(findings)
    rng = Rng(seed, f"corpus.render.{view}")
    s = size / 64.0
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)

    img = np.full((size, size), 0.38, dtype=np.float64)
    img += 0.10 * (yy / size)  # gentle vertical gradient

    centers = _lung_centers(view, size)
    if view == "PA":
        for cy, cx in centers.values():
            img[_ellipse(yy, xx, cy, cx, 22 * s, 11 * s)] = 0.12
        # mediastinum / spine column
        img[_ellipse(yy, xx, 30 * s, 32 * s, 26 * s, 4 * s)] = 0.55
        # cardiac silhouette, center-left-lower
        img[_ellipse(yy, xx, 40 * s, 28 * s, 9 * s, 10 * s)] = 0.60
    else:
        img[_ellipse(yy, xx, 30 * s, 32 * s, 21 * s, 17 * s)] = 0.12
        # posterior spine band
        img[(xx >= 52 * s) & (xx <= 57 * s)] = 0.58
        # diaphragm arc
        img[_ellipse(yy, xx, 56 * s, 28 * s, 10 * s, 18 * s)] = 0.52
        # sternum edge
        img[(xx >= 10 * s) & (xx <= 12 * s) & (yy > 14 * s) & (yy < 48 * s)] = 0.50

    def sides(lat):
        return ("left", "right") if lat == "bilateral" else (lat,)

    for f in sorted(fs):
        if f.category == "NoFindings":
            continue
        k = _SEV_SCALE[f.severity]
        if f.category == "PleuralEffusion":
            # bright wedge pooling at the costophrenic angle
            for side in sides(f.laterality):
                cy, cx = centers[side]
                depth = 7 * s * k
                base = cy + 20 * s
                wedge = (yy >= base - depth) & (yy <= base + 2 * s) & \
                        (np.abs(xx - cx) <= 10 * s) & \
                        (yy - (base - depth) >= 0.8 * np.abs(xx - cx))
                img[wedge] = 0.88
        elif f.category == "Pneumothorax":
            # dark textureless rim around the lung apex
            for side in sides(f.laterality):
                cy, cx = centers[side]
                rim = _ellipse(yy, xx, cy, cx, (22 + 5 * k) * s, (11 + 5 * k) * s) & \
                    ~_ellipse(yy, xx, cy, cx, 20 * s, 9.5 * s) & (yy < cy + 4 * s)
                img[rim] = 0.015
        elif f.category == "Edema":
            # diffuse perihilar haze, amplitude scaled by severity
            for side in sides(f.laterality):
                cy, cx = centers[side]
                d2 = ((yy - cy) / (16 * s)) ** 2 + ((xx - cx) / (12 * s)) ** 2
                img += (0.30 * k) * np.exp(-d2)
        elif f.category == "ConsolidationPneumonia":
            # lobar bright patch in the lower lung zone
            for side in sides(f.laterality):
                cy, cx = centers[side]
                patch = _ellipse(yy, xx, cy + 10 * s, cx, 7 * s * k, 8 * s * k)
                img[patch] = 0.80
        elif f.category == "LungLesion":
            # small bright nodule, seed-jittered inside the lung field
            for side in sides(f.laterality):
                cy, cx = centers[side]
                jy = float(rng.integers(-6, 7)) * s
                jx = float(rng.integers(-3, 4)) * s
                img[_disk(yy, xx, cy + jy, cx + jx, (2.0 + 1.6 * k) * s)] = 0.95

    # seed-dependent texture (kept small so signatures dominate)
    coarse = rng.normal((size // 8, size // 8), np.float64)
    img += 0.015 * np.repeat(np.repeat(coarse, 8, 0), 8, 1)[:size, :size]
    img += 0.01 * rng.normal((size, size), np.float64)
    pixels = np.clip(img, 0.0, 1.0).astype(np.float32)
    return SynthImage(pixels=pixels, view=view, findings=fs, seed=seed)


# ---------------------------------------------------------------------------
# report grammar


def finding_sentence(f: Finding, template_index: int) -> str:
    if f.category == "NoFindings":
        return NO_FINDINGS_SENTENCE
    templates = REPORT_TEMPLATES[f.category]
    sent = templates[template_index % len(templates)].format(
        sev=f.severity, lat=f.laterality)
    return sent[0].upper() + sent[1:]


def write_report(findings, view: str, seed: int) -> ReportRecord:
    """View sentence plus one grammar sentence per finding."""
    fs = validate_findings(findings)
    if view not in VIEWS:
        raise ValueError(f"unknown view {view!r}")
    rng = Rng(seed, "corpus.report")
    parts = [VIEW_SENTENCES[view]]
    for f in sorted(fs):
        parts.append(finding_sentence(f, int(rng.integers(0, 3))))
    return ReportRecord(text=" ".join(parts), view_sentence=VIEW_SENTENCES[view],
                        findings=fs, view=view, seed=seed)


# ---------------------------------------------------------------------------
# corpus builder


@dataclass
class CorpusConfig:
    counts: dict = field(default_factory=lambda: {"train": 2000, "val": 200, "test": 200})
    image_size: int = 64
    seed: int = 1234
    nofindings_rate: float = 0.25
    category_mix: dict = field(default_factory=lambda: {c: 1.0 for c in PATHOLOGIES})
    second_finding_rate: float = 0.2

    def to_dict(self):
        return {"counts": dict(self.counts), "image_size": self.image_size,
                "seed": self.seed, "nofindings_rate": self.nofindings_rate,
                "category_mix": dict(self.category_mix),
                "second_finding_rate": self.second_finding_rate}

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def sample_record(seed: int, config: CorpusConfig):
    """Draw (findings, view) for one record, purely from its seed."""
    rng = Rng(seed, "corpus.sample")
    view = VIEWS[int(rng.integers(0, 2))]
    if rng.uniform() < config.nofindings_rate:
        return frozenset({Finding("NoFindings")}), view
    cats = [c for c in PATHOLOGIES if config.category_mix.get(c, 0.0) > 0]
    weights = [config.category_mix[c] for c in cats]

    def draw(exclude=None):
        while True:
            c = cats[rng.choice_index(weights)]
            if c != exclude:
                return Finding(c,
                               LATERALITIES[int(rng.integers(0, 3))],
                               SEVERITIES[int(rng.integers(0, 3))])

    first = draw()
    findings = {first}
    if len(cats) > 1 and rng.uniform() < config.second_finding_rate:
        findings.add(draw(exclude=first.category))
    return frozenset(findings), view


def save_png(pixels: np.ndarray, path) -> None:
    arr = np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def load_png(path) -> np.ndarray:
    arr = np.asarray(Image.open(path).convert("L"), dtype=np.float32)
    return arr / 255.0


def build_corpus(config: CorpusConfig, out_dir) -> dict:
    """Render and persist the full dataset; returns the manifest."""
    out = Path(out_dir)
    for split in config.counts:
        if config.counts[split] < 1:
            raise ValueError(f"split {split!r} needs at least one record")
        (out / "images" / split).mkdir(parents=True, exist_ok=True)
    (out / "reports").mkdir(parents=True, exist_ok=True)

    base = config.seed
    manifest = {"format_version": FORMAT_VERSION, "config": config.to_dict(),
                "config_hash": config.hash(), "counts": {}}
    offset = 0
    for split in ("train", "val", "test"):
        if split not in config.counts:
            continue
        n = config.counts[split]
        lines = []
        for i in range(n):
            seed = base + offset + i
            findings, view = sample_record(seed, config)
            rec_id = f"{split}-{i:06d}"
            image = render(seed, view, findings, config.image_size)
            save_png(image.pixels, out / "images" / split / f"{rec_id}.png")
            report = write_report(findings, view, seed)
            lines.append(json.dumps({
                "id": rec_id, "text": report.text, "view": view,
                "findings": [f.to_dict() for f in sorted(findings)],
                "seed": seed,
            }, sort_keys=True))
        (out / "reports" / f"{split}.jsonl").write_text("\n".join(lines) + "\n")
        manifest["counts"][split] = n
        offset += n
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return manifest


def load_split(corpus_dir, split: str) -> list[ReportRecord]:
    """Report records for a split; images stay on disk until asked for."""
    path = Path(corpus_dir) / "reports" / f"{split}.jsonl"
    records = []
    for line in path.read_text().splitlines():
        d = json.loads(line)
        findings = frozenset(Finding.from_dict(f) for f in d["findings"])
        records.append(ReportRecord(
            text=d["text"], view_sentence=VIEW_SENTENCES[d["view"]],
            findings=findings, view=d["view"], seed=d["seed"], split=split,
            record_id=d["id"]))
    return records


def load_image(corpus_dir, split: str, record_id: str) -> np.ndarray:
    return load_png(Path(corpus_dir) / "images" / split / f"{record_id}.png")
