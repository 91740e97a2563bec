import os
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from voxseg import phantom
from voxseg.server import create_app
from voxseg.volume import Box, save_volume

SEEDS = "12 12 12 +1\n8 8 12 +1\n15 15 12 +1\n4 4 4 -1\n20 20 20 -1\n12 12 20 -1\n"


def kv(text: str) -> dict:
    return dict(line.split(" ", 1) for line in text.strip().splitlines())


@pytest.fixture(scope="module")
def volume_base(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("srv")
    spec = {
        "dims": [24, 24, 24], "dtype": "u8", "background": 40,
        "noise": {"sigma": 8.0, "seed": 5},
        "primitives": [{"shape": "box", "lo": [6, 6, 10], "hi": [18, 18, 15],
                        "value": 200}],
    }
    vol, _ = phantom.make_phantom(spec)
    base = os.path.join(tmp, "ph")
    save_volume(vol.read_region(Box.full(vol.dims)), base)
    return base


@pytest.fixture()
def client():
    return TestClient(create_app(workers=1))


def create_session(client, volume_base, extra=""):
    body = f"volume {volume_base}\nfeatures moments,inertia\nenv_size 3\n{extra}"
    r = client.post("/sessions", content=body)
    assert r.status_code == 201
    return kv(r.text)["id"]


def wait_idle(client, sid, timeout=120.0):
    deadline = time.time() + timeout
    while time.time() < deadline:
        st = kv(client.get(f"/sessions/{sid}/status").text)
        if st["state"] == "idle":
            return st
        time.sleep(0.1)
    raise TimeoutError("session never became idle")


def run_iteration(client, sid, seeds=SEEDS):
    r = client.post(f"/sessions/{sid}/seeds", content=seeds)
    assert r.status_code == 200
    r = client.post(f"/sessions/{sid}/iterate")
    assert r.status_code == 202
    st = wait_idle(client, sid)
    assert "error" not in st, st.get("error")
    return st


class TestSessionLifecycle:
    def test_create_status_distinct_ids(self, client, volume_base):
        a = create_session(client, volume_base)
        b = create_session(client, volume_base)
        assert a != b
        st = kv(client.get(f"/sessions/{a}/status").text)
        assert st["iteration"] == "0"
        assert st["state"] == "idle"
        assert st["dims"] == "24 24 24"

    def test_missing_volume_rejected(self, client):
        r = client.post("/sessions", content="volume /nonexistent\n")
        assert r.status_code == 400
        assert kv(r.text)["code"] == "bad_volume"

    def test_unknown_session(self, client):
        assert client.get("/sessions/nope/status").status_code == 404

    def test_delete(self, client, volume_base):
        sid = create_session(client, volume_base)
        assert client.delete(f"/sessions/{sid}").status_code == 200
        assert client.get(f"/sessions/{sid}/status").status_code == 404


class TestSlices:
    def test_gray_slice_uniform_volume(self, client, tmp_path, volume_base):
        base = os.path.join(tmp_path, "const")
        save_volume(np.full((8, 8, 8), 7, dtype=np.uint8), base)
        sid = create_session(client, base)
        r = client.get(f"/sessions/{sid}/slice?axis=z&index=4&layer=gray")
        assert r.status_code == 200
        assert r.headers["content-type"] == "image/png"
        from PIL import Image
        import io
        img = np.asarray(Image.open(io.BytesIO(r.content)))
        assert img.shape == (8, 8)
        assert len(np.unique(img)) == 1

    def test_layer_before_iteration_rejected(self, client, volume_base):
        sid = create_session(client, volume_base)
        r = client.get(f"/sessions/{sid}/slice?axis=z&index=4&layer=confidence")
        assert r.status_code == 409
        assert kv(r.text)["code"] == "layer_not_computed"

    def test_bad_index_rejected(self, client, volume_base):
        sid = create_session(client, volume_base)
        r = client.get(f"/sessions/{sid}/slice?axis=z&index=99&layer=gray")
        assert r.status_code == 400

    def test_deterministic_bytes(self, client, volume_base):
        sid = create_session(client, volume_base)
        a = client.get(f"/sessions/{sid}/slice?axis=y&index=12&layer=gray").content
        b = client.get(f"/sessions/{sid}/slice?axis=y&index=12&layer=gray").content
        assert a == b


class TestSeeds:
    def test_accept_count(self, client, volume_base):
        sid = create_session(client, volume_base)
        r = client.post(f"/sessions/{sid}/seeds",
                        content="12 12 12 +1\n8 8 12 +1\n4 4 4 -1\n6 6 6 -1\n")
        assert kv(r.text)["accepted"] == "4"
        assert kv(r.text)["rejected"] == "0"

    def test_no_environment_rejected(self, client, volume_base):
        sid = create_session(client, volume_base, extra="env_size 5\n")
        r = client.post(f"/sessions/{sid}/seeds", content="0 0 0 +1\n")
        body = kv(r.text)
        assert body["accepted"] == "0" and body["rejected"] == "1"

    def test_conflicting_duplicate_rejected(self, client, volume_base):
        sid = create_session(client, volume_base)
        r = client.post(f"/sessions/{sid}/seeds",
                        content="12 12 12 +1\n12 12 12 -1\n")
        body = kv(r.text)
        assert body["accepted"] == "1" and body["rejected"] == "1"


class TestIterate:
    def test_single_class_rejected(self, client, volume_base):
        sid = create_session(client, volume_base)
        client.post(f"/sessions/{sid}/seeds", content="12 12 12 +1\n")
        r = client.post(f"/sessions/{sid}/iterate")
        assert r.status_code == 409
        assert kv(r.text)["code"] == "single_class"

    def test_full_cycle_and_layers(self, client, volume_base):
        sid = create_session(client, volume_base)
        st = run_iteration(client, sid)
        assert st["iteration"] == "1"
        assert "confidence" in st["layers"]
        r = client.get(f"/sessions/{sid}/slice?axis=z&index=12&layer=confidence")
        assert r.status_code == 200
        r = client.get(f"/sessions/{sid}/slice?axis=z&index=12&layer=uncertainty")
        assert r.status_code == 200

    def test_busy_rejected(self, client, volume_base):
        sid = create_session(client, volume_base)
        client.post(f"/sessions/{sid}/seeds", content=SEEDS)
        assert client.post(f"/sessions/{sid}/iterate").status_code == 202
        r = client.post(f"/sessions/{sid}/iterate")
        # either the job is still running (busy) or it finished already
        assert r.status_code in (202, 409)
        if r.status_code == 409:
            assert kv(r.text)["code"] in ("busy", "single_class")
        wait_idle(client, sid)

    def test_uncertainty_shrinks_over_iterations(self, client, volume_base):
        sid = create_session(client, volume_base)
        run_iteration(client, sid)
        u1 = client.get(f"/sessions/{sid}/export?what=uncertainty").content
        run_iteration(client, sid, seeds="15 15 11 +1\n10 14 12 +1\n6 18 18 -1\n18 6 4 -1\n")
        u2 = client.get(f"/sessions/{sid}/export?what=uncertainty").content

        import io
        import tarfile

        def mean_from_tar(blob):
            with tarfile.open(fileobj=io.BytesIO(blob)) as tar:
                raw = tar.extractfile("uncertainty.raw").read()
            return np.frombuffer(raw, dtype="<f4").mean()

        assert mean_from_tar(u2) < mean_from_tar(u1)


class TestExport:
    def test_seed_file_round_trip(self, client, volume_base):
        sid = create_session(client, volume_base)
        client.post(f"/sessions/{sid}/seeds", content=SEEDS)
        r = client.get(f"/sessions/{sid}/export?what=seeds")
        assert r.text == SEEDS

    def test_model_export_matches_session(self, client, volume_base, tmp_path):
        sid = create_session(client, volume_base)
        run_iteration(client, sid)
        blob = client.get(f"/sessions/{sid}/export?what=model").content
        path = os.path.join(tmp_path, "m.bin")
        open(path, "wb").write(blob)
        from voxseg.svm import deserialize_model, decision_many
        model, train = deserialize_model(path)
        dec = decision_many(model, train.vectors)
        assert np.all(np.isfinite(dec))

    def test_confidence_export_loadable(self, client, volume_base, tmp_path):
        import io
        import tarfile
        sid = create_session(client, volume_base)
        run_iteration(client, sid)
        blob = client.get(f"/sessions/{sid}/export?what=confidence").content
        with tarfile.open(fileobj=io.BytesIO(blob)) as tar:
            tar.extractall(tmp_path)
        from voxseg.volume import load_volume
        vol = load_volume(os.path.join(tmp_path, "confidence"))
        assert vol.dims == (24, 24, 24)

    def test_missing_artifact(self, client, volume_base):
        sid = create_session(client, volume_base)
        r = client.get(f"/sessions/{sid}/export?what=model")
        assert r.status_code == 409


class TestCheckpointRestart:
    def test_restored_session_reproduces_slices(self, client, volume_base, tmp_path):
        sid = create_session(client, volume_base)
        run_iteration(client, sid)
        slices = {}
        for layer in ("gray", "confidence", "uncertainty"):
            slices[layer] = client.get(
                f"/sessions/{sid}/slice?axis=z&index=12&layer={layer}").content
        ckpt = os.path.join(tmp_path, "ckpt")
        r = client.post(f"/sessions/{sid}/checkpoint", content=f"dir {ckpt}\n")
        assert r.status_code == 200

        fresh_client = TestClient(create_app(workers=1))
        r = fresh_client.post(
            "/sessions", content=f"checkpoint {ckpt}\nvolume {volume_base}\n")
        assert r.status_code == 201
        sid2 = kv(r.text)["id"]
        for layer, blob in slices.items():
            again = fresh_client.get(
                f"/sessions/{sid2}/slice?axis=z&index=12&layer={layer}").content
            assert again == blob
