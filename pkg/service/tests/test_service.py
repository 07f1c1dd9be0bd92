"""Endpoint behavior: happy paths, validation errors, determinism."""

import pytest

from rapsg_service.app import ServiceConfig, create_app


class TestHealth:
    def test_echo_mode(self, client):
        resp = client.get("/v1/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "mode": "echo"}


class TestSummarize:
    def test_basic(self, client):
        resp = client.post("/v1/summarize", json={
            "descriptions": ["a red bus"], "seed": 0, "max_tokens": 20,
        })
        assert resp.status_code == 200
        assert resp.json() == {"summary": "a red bus"}

    def test_defaults_applied(self, client):
        resp = client.post("/v1/summarize", json={"descriptions": ["a red bus"]})
        assert resp.status_code == 200
        assert resp.json()["summary"] == "a red bus"

    def test_deterministic(self, client):
        body = {"descriptions": ["a man", "the man runs"], "seed": 5,
                "max_tokens": 10}
        first = client.post("/v1/summarize", json=body)
        second = client.post("/v1/summarize", json=body)
        assert first.content == second.content

    def test_max_tokens_truncates(self, client):
        resp = client.post("/v1/summarize", json={
            "descriptions": ["one two three four five six"], "max_tokens": 3,
        })
        assert resp.json()["summary"] == "one two three"

    @pytest.mark.parametrize("body,code", [
        ({}, "invalid_descriptions"),
        ({"descriptions": []}, "invalid_descriptions"),
        ({"descriptions": "not a list"}, "invalid_descriptions"),
        ({"descriptions": [1, 2]}, "invalid_descriptions"),
        ({"descriptions": ["ok"], "seed": -1}, "invalid_seed"),
        ({"descriptions": ["ok"], "seed": "zero"}, "invalid_seed"),
        ({"descriptions": ["ok"], "max_tokens": 0}, "invalid_max_tokens"),
    ])
    def test_validation_errors(self, client, body, code):
        resp = client.post("/v1/summarize", json=body)
        assert resp.status_code == 400
        error = resp.json()["error"]
        assert error["code"] == code
        assert error["message"]

    def test_malformed_json(self, client):
        resp = client.post("/v1/summarize", content=b"{nope",
                           headers={"Content-Type": "application/json"})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "invalid_json"


class TestRefine:
    def test_basic(self, client):
        resp = client.post("/v1/refine", json={
            "prediction": "a dog runs",
            "descriptions": ["brown dog on grass"],
            "seed": 0, "max_tokens": 20,
        })
        assert resp.status_code == 200
        assert resp.json() == {"summary": "a dog runs brown on grass"}

    def test_missing_prediction(self, client):
        resp = client.post("/v1/refine", json={"descriptions": ["a dog"]})
        assert resp.status_code == 400
        assert resp.json()["error"]["code"] == "invalid_prediction"

    def test_empty_prediction(self, client):
        resp = client.post("/v1/refine", json={
            "prediction": "", "descriptions": ["a dog"],
        })
        assert resp.status_code == 400


class TestConfig:
    def test_bad_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            create_app(ServiceConfig(mode="chaos"))

    def test_model_mode_requires_assets(self):
        # No model weights in this environment: startup must fail loudly,
        # not lazily on the first request.
        with pytest.raises(RuntimeError):
            create_app(ServiceConfig(
                mode="model", summarize_model="/nonexistent/model",
                refine_model="/nonexistent/model",
            ))
