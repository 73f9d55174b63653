import base64
import io
import json

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

from cxrkit import cli
from cxrkit.aligner import Aligner, build_vocab
from cxrkit.assistant import Assistant, REPORT_INSTRUCTION
from cxrkit.config import Config
from cxrkit.diffusion import NoiseSchedule
from cxrkit.lm import MedLM, Vocab
from cxrkit.pipeline import Workspace
from cxrkit.server import create_app
from cxrkit.tensor import Tensor


def tiny_config():
    return Config(lm_dim=32, lm_layers=2, lm_heads=2, context_len=320,
                  embed_dim=16, patch=16, image_size=64, diffusion_steps=4,
                  seed=5)


class _ZeroDenoiser:
    def __call__(self, z, t, ctx):
        return Tensor(np.zeros_like(z))


def tiny_assistant():
    cfg = tiny_config()
    texts = [REPORT_INSTRUCTION,
             "PA view of the chest was obtained.",
             "Lateral view of the chest was obtained.",
             "No acute cardiopulmonary process.",
             "Is there a pleural effusion? Yes. No."]
    model = MedLM(cfg, Vocab.build(texts))
    aligner = Aligner(cfg, build_vocab(texts))
    return Assistant(model, aligner, _ZeroDenoiser(), NoiseSchedule(4), cfg)


@pytest.fixture(scope="module")
def client():
    app = create_app(assistant=tiny_assistant())
    with TestClient(app, raise_server_exceptions=False) as c:
        yield c


def png_b64(size=64, seed=0):
    rng = np.random.default_rng(seed)
    arr = (rng.random((size, size)) * 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


# ---- readiness and provenance ---------------------------------------------------

def test_health_and_config_hash_header(client):
    r = client.get("/health")
    assert r.status_code == 200
    assert r.json()["status"] == "ok"
    assert r.headers["X-Config-Hash"] == tiny_config().hash()


def test_health_before_load_is_503():
    cfg = tiny_config()

    class SlowWorkspace:
        config = cfg

        def build_assistant(self):
            raise AssertionError("should not be called in this test")

    app = create_app(workspace=SlowWorkspace())
    # no startup event run: simulate not-yet-loaded state
    client = TestClient(app, raise_server_exceptions=False)
    r = client.get("/health")
    assert r.status_code == 503


# ---- sessions and chat -----------------------------------------------------------

def test_session_create_and_chat_roundtrip(client):
    sid = client.post("/session").json()["session_id"]
    r = client.post("/chat", json={"session_id": sid, "text": REPORT_INSTRUCTION,
                                   "image_b64": png_b64()})
    assert r.status_code == 200
    body = r.json()
    assert body["task"] == "report"
    assert isinstance(body["text"], str)
    assert body["images"] == []


def test_chat_unknown_session_404(client):
    r = client.post("/chat", json={"session_id": "nope", "text": "hi"})
    assert r.status_code == 404


def test_malformed_json_400_and_schema_422(client):
    r = client.post("/chat", content=b"{not json",
                    headers={"content-type": "application/json"})
    assert r.status_code == 400
    r = client.post("/chat", json={"text": "hi"})  # missing session_id
    assert r.status_code == 422


def test_bad_base64_image_400(client):
    sid = client.post("/session").json()["session_id"]
    r = client.post("/chat", json={"session_id": sid, "text": "report please",
                                   "image_b64": "!!!notb64!!!"})
    assert r.status_code == 400


def test_wrong_image_size_422(client):
    r = client.post("/report", json={"image_b64": png_b64(size=32)})
    assert r.status_code == 422


def test_report_and_vqa_endpoints(client):
    r = client.post("/report", json={"image_b64": png_b64()})
    assert r.status_code == 200 and isinstance(r.json()["text"], str)
    r = client.post("/vqa", json={"image_b64": png_b64(),
                                  "question": "Is there a pleural effusion?"})
    assert r.status_code == 200 and "answer" in r.json()
    r = client.post("/vqa", json={"image_b64": png_b64(), "question": "  "})
    assert r.status_code == 422


def test_generate_deterministic_png(client):
    req = {"prompt": "PA view of the chest was obtained.", "seed": 7}
    a = client.post("/generate", json=req)
    b = client.post("/generate", json=req)
    assert a.status_code == 200
    png = base64.b64decode(a.json()["png_b64"])
    assert png[:8] == b"\x89PNG\r\n\x1a\n"
    assert a.json()["png_b64"] == b.json()["png_b64"]
    c = client.post("/generate", json={"prompt": req["prompt"], "seed": 8})
    assert c.json()["png_b64"] != a.json()["png_b64"]


def test_internal_error_is_opaque_500():
    broken = tiny_assistant()

    def boom(*args, **kwargs):
        raise RuntimeError("weights corrupted")

    broken.report = boom
    app = create_app(assistant=broken)
    with TestClient(app, raise_server_exceptions=False) as c:
        r = c.post("/report", json={"image_b64": png_b64()})
    assert r.status_code == 500
    body = r.json()
    assert "error_id" in body and "weights corrupted" not in json.dumps(body)


# ---- CLI ---------------------------------------------------------------------------

def test_cli_usage_errors_exit_2():
    with pytest.raises(SystemExit) as e:
        cli.main(["no-such-command"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        cli.main(["eval", "--no-such-flag"])
    assert e.value.code == 2


def test_cli_runtime_failure_exit_1(tmp_path):
    missing = tmp_path / "nope.json"
    rc = cli.main(["--config", str(missing), "--workdir",
                   str(tmp_path / "w"), "build-corpus"])
    assert rc == 1


def test_cli_build_corpus_and_stamp_caching(tmp_path, capsys):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"corpus_train": 12, "corpus_val": 4,
                                    "corpus_test": 4}))
    work = tmp_path / "artifacts"
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(work),
                   "build-corpus"])
    assert rc == 0
    assert (work / "corpus" / "reports" / "train.jsonl").exists()
    stamp = json.loads((work / "corpus.stamp.json").read_text())
    first_time = stamp["written_at"]
    # second run reuses the artifact (stamp untouched)
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(work),
                   "build-corpus"])
    assert rc == 0
    stamp2 = json.loads((work / "corpus.stamp.json").read_text())
    assert stamp2["written_at"] == first_time


def test_workspace_stale_stamp_rebuilds(tmp_path):
    cfg = Config(corpus_train=12, corpus_val=4, corpus_test=4)
    ws = Workspace(tmp_path, cfg, log=lambda *_: None)
    ws.ensure_corpus()
    t0 = json.loads((tmp_path / "corpus.stamp.json").read_text())["written_at"]
    cfg2 = Config(corpus_train=14, corpus_val=4, corpus_test=4)
    ws2 = Workspace(tmp_path, cfg2, log=lambda *_: None)
    ws2.ensure_corpus()
    t1 = json.loads((tmp_path / "corpus.stamp.json").read_text())["written_at"]
    assert t1 != t0  # config change invalidated the stamp


def test_cli_build_instructions(tmp_path):
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps({"corpus_train": 12, "corpus_val": 4,
                                    "corpus_test": 4}))
    work = tmp_path / "artifacts"
    rc = cli.main(["--config", str(cfg_path), "--workdir", str(work),
                   "build-instructions"])
    assert rc == 0
    lines = (work / "dialogues" / "train.jsonl").read_text().splitlines()
    assert len(lines) == 36  # 3 dialogues per report
