"""Acceptance suite: one test per primary criterion.

Criterion 7 runs the full desk-scale pipeline (corpus 2000/200/200) and
dominates the runtime; everything else runs on miniatures. Set
CXRKIT_ACCEPT_WORKDIR to reuse a previously-built artifact directory when
re-running criterion 7.
"""

import itertools
import json
import os
import time

import numpy as np
import pytest

from cxrkit import diffusion, lm, metrics
from cxrkit.aligner import Aligner, build_vocab, train_aligner
from cxrkit.assistant import extract_xray_prompts
from cxrkit.checkpoint import load_checkpoint, save_checkpoint
from cxrkit.config import Config
from cxrkit.corpus import (LATERALITIES, PATHOLOGIES, SEVERITIES,
                           VIEW_SENTENCES, Finding, build_corpus,
                           finding_sentence)
from cxrkit.diffusion import (ControlledDenoiser, Denoiser, NoiseSchedule,
                              ResBlock, sd_loss)
from cxrkit.gradcheck import grad_check
from cxrkit.instruct import TemplateInstructor, prepend_view, synthesize_dialogues
from cxrkit.lm import MedLM, Vocab, dialogue_sequence, instruction_tune
from cxrkit.nn import Conv2d, ParamStore
from cxrkit.pipeline import Workspace, run_eval
from cxrkit.rng import Rng
from cxrkit.tensor import Tensor, use_dtype

from test_instruct import record_fixture  # noqa: E402 - shared fixture


def tiny_lm_config():
    return Config(lm_dim=16, lm_layers=1, lm_heads=2, context_len=96,
                  embed_dim=8, patch=32, lora_rank=2, lm_epochs=2,
                  lm_batch=4, seed=42)


@pytest.fixture(scope="module")
def tiny_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept-corpus")
    cfg = Config(corpus_train=32, corpus_val=12, corpus_test=12, seed=900,
                 aligner_epochs=2, sd_epochs=1, ctrl_epochs=1, sd_channels=8)
    build_corpus(cfg.corpus_config(), root)
    return root, cfg


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_criterion_1_gradient_suite(float64_mode):
    t0 = time.time()

    # Eq. 3 — answer loss through the full LM stack (adapters + visual prefix)
    cfg = tiny_lm_config()
    vocab = Vocab.build(["yes no effusion present view"])
    model = MedLM(cfg, vocab)
    feats = Rng(1, "f").normal((2, 4, cfg.embed_dim))
    w = 264  # first word id after the byte-fallback block
    ids = np.array([[lm.BOS, lm.IMG, lm.HUMAN, w + 4, lm.ASSISTANT, w, lm.EOS],
                    [lm.BOS, lm.IMG, lm.HUMAN, w + 2, lm.ASSISTANT, w + 1,
                     lm.EOS]])
    targets = np.roll(ids, -1, axis=1)
    mask = np.zeros_like(ids, dtype=bool)
    mask[:, 4:6] = True
    subset = {n: p for n, p in model.store.params.items()
              if n.startswith("lora.") or n.startswith("lm.visual.")
              or n == "lm.block0.ln1.g" or n == "lm.head.b"}

    def lm_builder():
        logits = model.forward(ids, feats)
        return model.answer_loss(model.text_logits(logits, ids, feats),
                                 targets, mask)

    report = grad_check(subset, lm_builder, tolerance=1e-4)
    assert report.passed, ("answer loss", report.worst())

    # contrastive alignment loss through both encoders
    acfg = Config(embed_dim=8, patch=32, aligner_layers=1, aligner_heads=2,
                  image_size=64, seed=7)
    aligner = Aligner(acfg, build_vocab(["a tiny effusion", "clear lungs"]))
    px = Rng(2, "px").uniform((2, 64, 64))
    tids = np.array([[5, 6], [7, 5]])
    tmask = np.ones_like(tids, dtype=np.float64)

    def infonce_builder():
        return aligner.contrastive_loss(px, tids, tmask)

    report = grad_check(aligner.store.params, infonce_builder, tolerance=1e-4)
    assert report.passed, ("contrastive", report.worst())

    # Eq. 4 — denoising loss through a frozen base plus control-style branch
    schedule = NoiseSchedule(20)
    store = ParamStore()
    rng = Rng(10, "mini")
    stem = Conv2d(store, "base.stem", 1, 16, 3, rng)
    rb = ResBlock(store, "base.rb", 16, 16, 6, rng)
    out = Conv2d(store, "base.out", 16, 1, 1, rng)
    ctrl_stem = Conv2d(store, "ctrl.stem", 1, 16, 3, rng)
    zconv = Conv2d(store, "ctrl.z", 16, 16, 1, rng)
    temb_w = store.add("base.temb", 0.1 * rng.normal((1, 6), np.float64))
    for n, p in store.params.items():
        p.requires_grad = n.startswith("ctrl.")

    def mini(zt, t, ctx):
        temb = Tensor(np.ones((zt.shape[0], 1))) @ temb_w
        h = stem(Tensor(zt)) + zconv(ctrl_stem(Tensor(zt)))
        return out(rb(h, temb))

    z0 = np.tanh(Rng(11, "t").normal((2, 1, 6, 6))).astype(np.float64)
    ctrl_params = {n: p for n, p in store.params.items() if p.requires_grad}

    def sd_builder():
        return sd_loss(mini, schedule, z0, np.zeros((2, 2, 4)),
                       Rng(12, "fixed"))

    report = grad_check(ctrl_params, sd_builder, tolerance=1e-4)
    assert report.passed, ("sd control", report.worst())
    assert time.time() - t0 < 120, "gradient suite exceeded 2 minutes"


# ---------------------------------------------------------------------------
# 2. zero-conv identity


def test_criterion_2_zero_conv_identity(tiny_corpus):
    root, cfg = tiny_corpus
    base = Denoiser(cfg)
    controlled = ControlledDenoiser(base)
    rng = Rng(77, "triples")
    for i in range(10):  # 10 batches of 10 -> 100 triples
        z = rng.normal((10, 1, 64, 64))
        t = int(rng.integers(1, cfg.diffusion_steps + 1))
        ctx = rng.normal((10, diffusion.COND_LEN, cfg.embed_dim))
        pooled = rng.normal((10, cfg.embed_dim))
        a = base(z, t, ctx).data
        b = controlled(z, t, ctx, pooled).data
        assert a.tobytes() == b.tobytes()

    aligner, _ = train_aligner(root, cfg, log=lambda *_: None)
    base = Denoiser(cfg)  # fresh store: the branch registers its own params
    before = {n: p.data.copy() for n, p in base.store.params.items()}
    model, _, _ = diffusion.attach_control_and_finetune(
        base, root, aligner, cfg, log=lambda *_: None)
    for n, v in before.items():
        assert model.store.params[n].data.tobytes() == v.tobytes(), n


# ---------------------------------------------------------------------------
# 3. LoRA identities


def test_criterion_3_lora_identities():
    cfg = tiny_lm_config()
    vocab = Vocab.build(["effusion pneumothorax yes no"])
    model = MedLM(cfg, vocab)
    w = 264
    ids = np.array([[lm.BOS, lm.HUMAN, w + 2, lm.ASSISTANT, w + 3, lm.EOS]])

    with_adapters = model.forward(ids).data
    model.enable_adapters(False)
    without = model.forward(ids).data
    model.enable_adapters(True)
    assert with_adapters.tobytes() == without.tobytes()

    items = []
    for a, b in ((w, w + 1), (w + 1, w + 2), (w + 2, w)):
        seq_ids = [lm.BOS, lm.HUMAN, a, lm.ASSISTANT, b, lm.EOS]
        inp = np.array(seq_ids[:-1])
        tgt = np.array(seq_ids[1:])
        m = np.zeros(len(tgt), dtype=bool)
        m[3:5] = True
        items.append((inp, tgt, m, None))
    instruction_tune(model, items, items, cfg, log_fn=lambda *_: None)

    tuned = model.forward(ids).data
    model.merge_adapters()
    model.enable_adapters(False)
    merged = model.forward(ids).data
    assert np.abs(tuned - merged).max() <= 1e-5


# ---------------------------------------------------------------------------
# 4. diffusion algebra


def test_criterion_4_diffusion_algebra():
    s = NoiseSchedule(50)
    assert np.allclose(s.alpha**2 + s.sigma**2, 1.0, atol=1e-12)
    assert np.all(np.diff(s.alpha) < 0) and np.all(np.diff(s.sigma) > 0)

    rng = Rng(4, "alg")
    z0 = np.tanh(rng.normal((4, 1, 8, 8))).astype(np.float64)
    for t in (1, 25, 50):
        eps = rng.normal(z0.shape)
        zt = s.q_sample(z0, t, eps)
        assert np.abs(s.predict_x0(zt, t, eps) - z0).max() <= 1e-5

    chain_rng = Rng(5, "chain")
    z = s.q_sample(z0, s.steps, chain_rng.normal(z0.shape))
    for t in range(s.steps, 0, -1):
        true_eps = (z - s.alpha[t] * z0) / s.sigma[t]
        z = s.reverse_step(z, t, true_eps, chain_rng)
    assert np.abs(z - z0).mean() <= 0.05

    # Eq. 1 marginals by Monte Carlo: mean alpha_t*x0, std sigma_t
    n = 4000
    t = 20
    mc_rng = Rng(6, "mc")
    x0 = 0.3
    samples = s.q_sample(np.full((n, 1, 1, 1), x0), t,
                         mc_rng.normal((n, 1, 1, 1)))
    se_mean = s.sigma[t] / np.sqrt(n)
    assert abs(samples.mean() - s.alpha[t] * x0) <= 3 * se_mean
    se_var = s.sigma[t] ** 2 * np.sqrt(2.0 / (n - 1))
    assert abs(samples.var() - s.sigma[t] ** 2) <= 3 * se_var


# ---------------------------------------------------------------------------
# 5. metric oracles


def test_criterion_5_metric_oracles():
    from test_metrics import oracle_auroc, oracle_bleu, oracle_tfidf_cosine

    rng = Rng(55, "metrics")
    words = ["lung", "clear", "effusion", "right", "left", "small", "is"]
    for i in range(100):
        k = 3 + int(rng.integers(0, 5))
        cand = " ".join(words[int(rng.integers(0, len(words)))] for _ in range(k))
        ref = " ".join(words[int(rng.integers(0, len(words)))] for _ in range(k))
        n = 1 + int(rng.integers(0, 2))
        assert abs(metrics.bleu([cand], [ref], n) -
                   oracle_bleu([cand], [ref], n)) <= 1e-6

        scores = rng.uniform(12)
        truths = (rng.uniform(12) > 0.5).astype(float)
        if 0 < truths.sum() < len(truths):
            assert abs(metrics.auroc(scores, truths, mode="micro") -
                       oracle_auroc(scores, truths)) <= 1e-9

    docs = ["the lungs are clear", "a small right effusion is present",
            "no pneumothorax is seen"]
    for cand, ref in itertools.permutations(docs, 2):
        ours = metrics.cider_d([cand], [ref], corpus=docs)
        assert abs(ours - oracle_tfidf_cosine(cand, ref, docs)) <= 1e-6

    # FID 1-D closed form: mu 0 vs 1, sigma 1 both -> exactly 1
    g = np.random.default_rng(3).normal(size=20000)
    a = (g - g.mean()) / g.std()      # exact mu=0, sigma=1
    b = a + 1.0                       # exact mu=1, sigma=1
    assert abs(metrics.fid(a[:, None], b[:, None]) - 1.0) <= 1e-6

    # grammar inversion over the full template sweep
    for cat, lat, sev in itertools.product(PATHOLOGIES, LATERALITIES,
                                           SEVERITIES):
        f = Finding(cat, lat, sev)
        for t in range(3):
            sent = VIEW_SENTENCES["PA"] + " " + finding_sentence(f, t)
            assert metrics.extract_labels(sent).to_findings() == frozenset({f})


# ---------------------------------------------------------------------------
# 6. markup pipeline


def test_criterion_6_markup_pipeline(tiny_corpus):
    root, cfg = tiny_corpus
    from cxrkit.corpus import load_split
    instructor = TemplateInstructor()
    checked = 0
    for rec in load_split(root, "train"):
        for d in synthesize_dialogues(rec, instructor):
            assert d.validate() == [], d.turns
            if d.archetype == "generate":
                embedded = prepend_view(rec.text, rec.view)
                prompts, cleaned, diags = extract_xray_prompts(d.turns[-1][1])
                assert prompts == [embedded]
                assert diags == []
                assert "<Xray>" not in cleaned
                checked += 1
    assert checked > 0

    paper_example = ("Sure. Here it is: <Xray> Lateral view of the chest was "
                     "obtained. New right lower lobe consolidation is "
                     "consistent with pneumonia. </Xray>.")
    prompts, _, _ = extract_xray_prompts(paper_example)
    assert prompts == ["Lateral view of the chest was obtained. New right "
                       "lower lobe consolidation is consistent with pneumonia."]


# ---------------------------------------------------------------------------
# 7. desk-scale end-to-end


def test_criterion_7_desk_scale_end_to_end(tmp_path_factory):
    workdir = os.environ.get("CXRKIT_ACCEPT_WORKDIR") or \
        tmp_path_factory.mktemp("accept-e2e")
    cfg = Config()
    assert (cfg.corpus_train, cfg.corpus_val, cfg.corpus_test) == \
        (2000, 200, 200)
    ws = Workspace(workdir, cfg)
    t0 = time.time()
    results = run_eval(ws)
    elapsed = time.time() - t0
    (ws.root / "metrics.json").write_text(
        json.dumps(results, indent=2, sort_keys=True))

    assert results["report"]["label_f1"]["micro"] >= 0.80, results["report"]
    assert results["vqa"]["overall"] >= 0.80, results["vqa"]
    assert results["vqa"]["n_questions"] == 96
    gen = results["generation"]
    assert gen["fid_generated"] <= gen["fid_noise"] / 5.0, gen
    assert gen["n_images"] >= 100
    assert min(gen["classifier_per_label_acc"]) >= 0.75, gen
    assert results["view_control"]["probe_accuracy"] >= 0.90, \
        results["view_control"]
    assert elapsed <= 90 * 60, f"end-to-end took {elapsed/60:.1f} min"


# ---------------------------------------------------------------------------
# 8. persistence / determinism


def test_criterion_8_persistence_and_determinism(tiny_corpus, tmp_path):
    # save -> load -> save byte identity
    rng = Rng(88, "ckpt")
    tensors = {"a.w": rng.normal((3, 4)).astype(np.float32),
               "b.scalar": np.float32(0.25),
               "c.long": rng.normal(17).astype(np.float32)}
    p1, p2 = tmp_path / "one.mxc", tmp_path / "two.mxc"
    save_checkpoint(p1, tensors, meta={"k": "v"})
    loaded, meta = load_checkpoint(p1)
    save_checkpoint(p2, loaded, meta=meta)
    assert p1.read_bytes() == p2.read_bytes()

    # training runs are bitwise reproducible under a fixed seed
    root, cfg = tiny_corpus
    m1, _ = train_aligner(root, cfg, log=lambda *_: None)
    m2, _ = train_aligner(root, cfg, log=lambda *_: None)
    for n, p in m1.store.params.items():
        assert p.data.tobytes() == m2.store.params[n].data.tobytes(), n

    # /generate with a fixed seed returns identical PNG bytes
    from fastapi.testclient import TestClient
    from cxrkit.assistant import Assistant
    from cxrkit.server import create_app

    aligner = Aligner(cfg, build_vocab(["pa view of the chest"]))
    sd_model = Denoiser(cfg)
    assistant = Assistant(MedLM(tiny_lm_config(), Vocab.build(["hi"])),
                          aligner, sd_model, NoiseSchedule(4), cfg)
    app = create_app(assistant=assistant)
    with TestClient(app) as client:
        req = {"prompt": "PA view of the chest was obtained.", "seed": 3}
        one = client.post("/generate", json=req).json()["png_b64"]
        two = client.post("/generate", json=req).json()["png_b64"]
    assert one == two
