import numpy as np
import pytest
from fastapi.testclient import TestClient

from app.core.config import settings
from app.main import app

client = TestClient(app)


@pytest.fixture
def image():
    ii, jj = np.mgrid[0:16, 0:16]
    return (0.5 + 0.4 * np.sin(ii / 3.0) * np.cos(jj / 4.0)).tolist()


def test_health():
    response = client.get("/")
    assert response.status_code == 200
    assert response.json()["status"] == "healthy"


def test_mask_description():
    response = client.post("/api/masks", json={"spec": "grid:5"})
    assert response.status_code == 200
    body = response.json()
    assert body["n_measured"] == body["expected_measured"] == 676
    assert body["bits"] is None
    assert body["density"] == pytest.approx(676 / 16384)

    random_cuts = client.post("/api/masks", json={"spec": "lc:4-4-2-2:random", "height": 32, "width": 32, "include_bits": True})
    assert random_cuts.status_code == 200
    assert random_cuts.json()["expected_measured"] is None
    assert len(random_cuts.json()["bits"]) == 32


def test_mask_errors():
    assert client.post("/api/masks", json={"spec": "spiral:3"}).status_code == 422
    oversized = client.post("/api/masks", json={"spec": "grid:2", "height": 1024, "width": 1024})
    assert oversized.status_code == 413


def test_time_budget():
    response = client.post("/api/timebudget", json={"mask": "grid:5", "steps": 20})
    assert response.status_code == 200
    assert response.json()["total"] == pytest.approx(0.0369, abs=1e-9)

    full = client.post("/api/timebudget", json={"n_p": 16384})
    assert full.json()["total"] == pytest.approx(0.4096, abs=1e-9)
    assert full.json()["speedup"] == pytest.approx(1.0)

    empty = client.post("/api/timebudget", json={"n_p": 0})
    assert empty.status_code == 200
    assert empty.json()["speedup"] is None

    assert client.post("/api/timebudget", json={"steps": 20}).status_code == 422


@pytest.mark.parametrize("method", ["linear", "idw", "biharmonic"])
def test_reconstruct_baselines(method, image):
    response = client.post("/api/reconstruct", json={"pixels": image, "mask": "grid:3", "method": method})
    assert response.status_code == 200
    body = response.json()
    recon = np.array(body["pixels"])
    assert recon.shape == (16, 16)
    assert np.allclose(recon[::3, ::3], np.array(image, dtype=np.float32)[::3, ::3])
    assert body["n_measured"] == 36
    assert set(body["metrics"]) >= {"rnmse", "psnr", "ssim", "iou_ridge"}


def test_reconstruct_rejects_bad_input(image):
    ragged = [[0.1, 0.2], [0.3]]
    assert client.post("/api/reconstruct", json={"pixels": ragged, "mask": "grid:2"}).status_code == 422
    assert client.post("/api/reconstruct", json={"pixels": image, "mask": "grid:0"}).status_code == 422
    assert client.post("/api/reconstruct", json={"pixels": image, "mask": "grid:3", "method": "kriging"}).status_code == 422


def test_diffusion_needs_a_configured_checkpoint(image, monkeypatch):
    monkeypatch.setattr(settings, "CHECKPOINT_PATH", None)
    response = client.post("/api/reconstruct", json={"pixels": image, "mask": "grid:3", "method": "diffusion"})
    assert response.status_code == 400
