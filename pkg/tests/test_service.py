import pytest
from fastapi.testclient import TestClient

from ciuav.net.node import sensor_node_run
from ciuav.net.trajectory import plan_trajectory
from ciuav.service.app import create_app
from ciuav.synth import SceneConfig, grid_plan


@pytest.fixture()
def client():
    with TestClient(create_app()) as c:
        yield c


def test_health(client):
    r = client.get("/health")
    assert r.status_code == 200 and r.json()["status"] == "ok"


def test_metrics(client):
    r = client.post("/metrics", json={"predictions": [[0, 0, 0], [1, 1, 1]], "truths": [[0, 0, 0], [1, 1, 2]]})
    body = r.json()
    assert r.status_code == 200
    assert body["mae_m"] == pytest.approx(0.5) and body["lmse_m2"] == pytest.approx(0.25)
    assert body["cdf"] == [[0.0, 0.5], [1.0, 1.0]]


def test_metrics_validation(client):
    assert client.post("/metrics", json={"predictions": [], "truths": []}).status_code == 422
    r = client.post("/metrics", json={"predictions": [[0, 0, 0]], "truths": [[0, 0, 0], [1, 1, 1]]})
    assert r.status_code == 422


def test_generate_preprocess_train_evaluate(client, tmp_path):
    conf = "grid_nx = 2\ngrid_ny = 2\ngrid_heights = 1.0\n"
    data = str(tmp_path / "d.jsonl")
    r = client.post("/generate", json={"out_path": data, "config_text": conf, "frames_per_point": 2})
    assert r.status_code == 200 and r.json()["N"] == 8
    r = client.post("/preprocess", json={"in_path": data, "out_path": str(tmp_path / "a.bin"), "hampel": False})
    assert r.status_code == 200 and r.json()["provenance"] == ["dac"]
    r = client.post("/train", json={"data_path": data, "out_dir": str(tmp_path / "m"), "epochs": 2, "subsets": ["1-2-3"]})
    assert r.status_code == 200
    r = client.post("/evaluate", json={"model_path": r.json()["model"], "data_path": data, "mask": "1"})
    assert r.status_code == 200 and r.json()["lmse_m2"] >= 0


def test_request_errors_are_422(client, tmp_path):
    r = client.post("/generate", json={"out_path": str(tmp_path / "d"), "config_text": "bogus = 1\n"})
    assert r.status_code == 422 and "<request>:1: unknown key" in r.json()["detail"]
    r = client.post("/preprocess", json={"in_path": str(tmp_path / "absent"), "out_path": str(tmp_path / "a")})
    assert r.status_code == 422
    assert client.post("/train", json={"data_path": "x", "out_dir": "y", "lr": -1}).status_code == 422


def test_collector_lifecycle(client, tmp_path):
    assert client.get("/collector/status").status_code == 404
    assert client.post("/collector/stop").status_code == 404
    r = client.post("/collector/start", json={"out_path": str(tmp_path / "f.jsonl"), "expected_sensors": 1})
    assert r.status_code == 200
    addr = (r.json()["host"], r.json()["port"])
    assert client.post("/collector/start", json={"out_path": str(tmp_path / "g.jsonl")}).status_code == 409
    scene = SceneConfig()
    sensor_node_run(scene, 0, plan_trajectory(grid_plan(scene)), 50.0, addr, n_ticks=20)
    final = client.post("/collector/stop").json()
    assert final["persisted"] + final["gaps"] == 20
    assert client.get("/collector/status").status_code == 404
