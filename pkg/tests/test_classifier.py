import numpy as np
import pytest

from cxrkit.classifier import (PathologyClassifier, bce_loss, per_label_accuracy,
                               report_multihot, train_classifier)
from cxrkit.config import Config
from cxrkit.corpus import PATHOLOGIES, build_corpus
from cxrkit.rng import Rng
from cxrkit.tensor import Tensor


def test_bce_matches_hand_formula():
    rng = Rng(0, "t")
    logits = rng.normal((4, 3)).astype(np.float64)
    y = (rng.uniform((4, 3)) > 0.5).astype(np.float64)
    p = 1 / (1 + np.exp(-logits))
    ref = -(y * np.log(p) + (1 - y) * np.log(1 - p)).mean()
    got = bce_loss(Tensor(logits), y).item()
    assert got == pytest.approx(ref, rel=1e-5)


def test_probabilities_bounded_and_permutation_equivariant():
    cfg = Config(seed=5)
    model = PathologyClassifier(cfg)
    px = Rng(1, "t").uniform((6, 64, 64))
    probs = model.predict_proba(px)
    assert probs.shape == (6, len(PATHOLOGIES))
    assert (probs >= 0).all() and (probs <= 1).all()
    perm = np.array([3, 1, 5, 0, 4, 2])
    assert np.allclose(model.predict_proba(px[perm]), probs[perm], atol=1e-6)


def test_report_multihot():
    text = ("PA view of the chest was obtained. Large right pleural effusion. "
            "There is mild pulmonary edema.")
    hot = report_multihot(text)
    assert hot[PATHOLOGIES.index("PleuralEffusion")] == 1
    assert hot[PATHOLOGIES.index("Edema")] == 1
    assert hot.sum() == 2
    assert report_multihot("No acute cardiopulmonary process.").sum() == 0


def test_training_learns_on_small_corpus(tmp_path):
    cfg = Config(corpus_train=150, corpus_val=60, corpus_test=10, seed=11,
                 clf_epochs=3)
    build_corpus(cfg.corpus_config(), tmp_path)
    model, history = train_classifier(tmp_path, cfg, log=lambda *_: None)
    accs = np.array(history[-1]["val_acc"])
    assert accs.mean() > 0.7
    assert history[-1]["loss"] < history[0]["loss"]
    path = tmp_path / "clf.mxc"
    model.save(path)
    clone = PathologyClassifier.load(path, cfg)
    px = Rng(2, "t").uniform((3, 64, 64))
    assert np.array_equal(model.predict_proba(px), clone.predict_proba(px))
