"""End-to-end HTTP service tests over a synthetic four-class workspace.

One module-scoped fixture drives every pipeline stage in order through the
FastAPI test client; the per-stage tests then check the responses and the
files they left behind.  Error-path tests use fresh directories.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

import synthdata
from shapehash import __version__, cosfire, imaging, pipeline, retrieval
from shapehash.service.app import create_app

# Lobes sit 14 px from the image center, so one circle through the lobes
# plus the center point captures each class constellation.
COSFIRE = {
    "sigma_bank": [2.5],
    "radii": [0.0, 14.0],
    "t1": 0.2,
    "sigma0_blur": 2.0,
    "alpha_blur": 0.1,
}

TRAIN = {
    "learning_rate": 0.05,
    "batch_size": 16,
    "epochs": 40,
    "seed": 0,
    "patience": 40,
}

LOSS = {"margin": 8.0, "reg_weight": 1e-3, "l1_weight": 0.0, "l2_weight": 0.0}


def _post(client: TestClient, path: str, payload: dict) -> dict:
    resp = client.post(path, json=payload)
    assert resp.status_code == 200, f"{path}: {resp.status_code} {resp.text}"
    return resp.json()


@pytest.fixture(scope="module")
def client() -> TestClient:
    with TestClient(create_app()) as c:
        yield c


@pytest.fixture(scope="module")
def ws(client: TestClient, tmp_path_factory: pytest.TempPathFactory) -> dict:
    """Synthetic dataset pushed through every stage; responses keyed by stage."""
    root = tmp_path_factory.mktemp("service")
    work = root / "work"
    manifest = synthdata.make_dataset(
        root / "data", {"train": 6, "valid": 3, "test": 3}, seed=3
    )
    out: dict = {"work": work, "manifest": manifest}
    out["preprocess"] = _post(
        client,
        "/pipeline/preprocess",
        {"manifest": str(manifest), "workdir": str(work)},
    )
    out["bank"] = _post(
        client,
        "/pipeline/build-bank",
        {"workdir": str(work), "cosfire": COSFIRE, "filters_per_class": 2, "seed": 1},
    )
    out["describe"] = _post(client, "/pipeline/describe", {"workdir": str(work)})
    out["train"] = _post(
        client,
        "/pipeline/train",
        {
            "workdir": str(work),
            "bits": 16,
            "train": TRAIN,
            "loss": LOSS,
            "hidden": [24, 16],
        },
    )
    out["sweep"] = _post(
        client, "/pipeline/sweep-threshold", {"workdir": str(work), "k_eval": 10}
    )
    threshold = out["sweep"]["best_threshold"]
    for split in ("train", "test"):
        out[f"encode_{split}"] = _post(
            client,
            "/pipeline/encode",
            {"workdir": str(work), "split": split, "threshold": threshold},
        )
    out["evaluate"] = _post(
        client,
        "/pipeline/evaluate",
        {
            "workdir": str(work),
            "index": str(work / "codes" / "train.codes"),
            "queries": str(work / "codes" / "test.codes"),
            "k_eval": 10,
        },
    )
    return out


class TestHealth:
    def test_ok(self, client: TestClient) -> None:
        resp = client.get("/health")
        assert resp.status_code == 200
        assert resp.json() == {"status": "ok", "version": __version__}


class TestPreprocess:
    def test_counts_per_split(self, ws: dict) -> None:
        assert ws["preprocess"]["counts"] == {"train": 24, "valid": 12, "test": 12}

    def test_manifest_and_images_written(self, ws: dict) -> None:
        out_manifest = Path(ws["preprocess"]["out_manifest"])
        entries = imaging.read_manifest(out_manifest)
        assert len(entries) == 48
        for entry in entries:
            assert Path(entry.path).exists()
            assert Path(entry.path).suffix == ".rf32"

    def test_background_is_clipped_to_zero(self, ws: dict) -> None:
        entries = imaging.read_manifest(Path(ws["preprocess"]["out_manifest"]))
        img = imaging.load_image(entries[0].path, "rawf32")
        assert np.mean(img == 0.0) > 0.5

    def test_report_written(self, ws: dict) -> None:
        report = json.loads(Path(ws["preprocess"]["report"]).read_text())
        assert report["counts"] == ws["preprocess"]["counts"]

    def test_rerun_is_byte_identical(self, ws: dict, client: TestClient) -> None:
        out_manifest = Path(ws["preprocess"]["out_manifest"])
        sample = Path(imaging.read_manifest(out_manifest)[0].path)
        before = (out_manifest.read_bytes(), sample.read_bytes())
        again = _post(
            client,
            "/pipeline/preprocess",
            {"manifest": str(ws["manifest"]), "workdir": str(ws["work"])},
        )
        assert again == ws["preprocess"]
        assert (out_manifest.read_bytes(), sample.read_bytes()) == before


class TestBuildBank:
    def test_filters_and_classes(self, ws: dict) -> None:
        assert ws["bank"]["n_filters"] == 8
        assert ws["bank"]["classes"] == sorted(synthdata.CLASSES)
        assert len(ws["bank"]["tuples_per_filter"]) == 8
        assert all(n >= 1 for n in ws["bank"]["tuples_per_filter"])

    def test_bank_file_loads(self, ws: dict) -> None:
        bank = cosfire.load_bank(Path(ws["bank"]["bank"]))
        assert len(bank) == 8
        assert len(bank.orientations) == 12
        assert sorted(set(bank.labels)) == sorted(synthdata.CLASSES)

    def test_prototypes_exist(self, ws: dict) -> None:
        assert len(ws["bank"]["prototypes"]) == 8
        for proto in ws["bank"]["prototypes"]:
            assert Path(proto).exists()


class TestDescribe:
    def test_rows_match_splits(self, ws: dict) -> None:
        assert ws["describe"]["rows"] == {"train": 24, "valid": 12, "test": 12}
        assert ws["describe"]["descriptor_length"] == 8

    def test_descriptors_are_unit_rows(self, ws: dict) -> None:
        path = Path(ws["describe"]["files"]["train"])
        matrix, labels, names = pipeline.load_descriptors(path)
        assert matrix.shape == (24, 8)
        assert len(labels) == len(names) == 24
        norms = np.linalg.norm(matrix, axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_threaded_rerun_is_byte_identical(
        self, ws: dict, client: TestClient
    ) -> None:
        path = Path(ws["describe"]["files"]["train"])
        before = path.read_bytes()
        again = _post(
            client, "/pipeline/describe", {"workdir": str(ws["work"]), "threads": 2}
        )
        assert again["rows"] == ws["describe"]["rows"]
        assert path.read_bytes() == before


class TestTrain:
    def test_model_written(self, ws: dict) -> None:
        assert Path(ws["train"]["model"]).exists()
        assert ws["train"]["bits"] == 16

    def test_history_consistent(self, ws: dict) -> None:
        history = ws["train"]["history"]
        assert len(history) == ws["train"]["epochs_run"] <= TRAIN["epochs"]
        best = max(history, key=lambda h: h["val_map"])
        assert ws["train"]["best_epoch"] == best["epoch"]
        assert ws["train"]["best_val_map"] == pytest.approx(best["val_map"])
        assert ws["train"]["final_train_loss"] == pytest.approx(
            history[-1]["train_loss"]
        )
        assert all(0.0 <= h["val_map"] <= 1.0 for h in history)


class TestSweep:
    def test_default_grid_has_21_points(self, ws: dict) -> None:
        curve = ws["sweep"]["curve"]
        assert len(curve) == 21
        thresholds = [p["threshold"] for p in curve]
        np.testing.assert_allclose(thresholds, np.arange(-1.0, 1.01, 0.1), atol=1e-9)

    def test_best_is_smallest_argmax(self, ws: dict) -> None:
        curve = ws["sweep"]["curve"]
        top = max(p["map_at_k"] for p in curve)
        winners = [p["threshold"] for p in curve if p["map_at_k"] == top]
        assert ws["sweep"]["best_threshold"] == pytest.approx(min(winners))

    def test_curve_csv(self, ws: dict) -> None:
        lines = Path(ws["sweep"]["curve_csv"]).read_text().splitlines()
        assert lines[0] == "threshold,map_at_k"
        assert len(lines) == 22


class TestEncode:
    def test_counts_and_bits(self, ws: dict) -> None:
        assert ws["encode_train"]["count"] == 24
        assert ws["encode_test"]["count"] == 12
        assert ws["encode_train"]["bits"] == 16

    def test_codes_load_with_labels(self, ws: dict) -> None:
        index = retrieval.load_codes(Path(ws["encode_train"]["codes"]))
        assert len(index) == 24
        assert sorted(set(index.labels)) == sorted(synthdata.CLASSES)
        assert all(code.nbits == 16 for code in index.codes())

    def test_label_sidecar(self, ws: dict) -> None:
        codes = Path(ws["encode_train"]["codes"])
        sidecar = codes.with_name(codes.name + ".json")
        doc = json.loads(sidecar.read_text())
        assert doc["labels"] == sorted(synthdata.CLASSES)


class TestQuery:
    def test_code_file_query(self, ws: dict, client: TestClient) -> None:
        out = _post(
            client,
            "/retrieval/query",
            {
                "index": ws["encode_train"]["codes"],
                "code_file": ws["encode_test"]["codes"],
                "top_n": 5,
            },
        )
        assert len(out["results"]) == 5
        distances = [hit["distance"] for hit in out["results"]]
        assert distances == sorted(distances)
        assert all(hit["label"] in synthdata.CLASSES for hit in out["results"])

    def test_self_query_hits_distance_zero(self, ws: dict, client: TestClient) -> None:
        out = _post(
            client,
            "/retrieval/query",
            {
                "index": ws["encode_train"]["codes"],
                "code_file": ws["encode_train"]["codes"],
                "top_n": 1,
            },
        )
        assert out["results"][0]["distance"] == 0

    def test_image_query_matches_code_query(
        self, ws: dict, client: TestClient
    ) -> None:
        entries = imaging.read_manifest(Path(ws["preprocess"]["out_manifest"]))
        first_test = next(e for e in entries if e.split == "test")
        by_image = _post(
            client,
            "/retrieval/query",
            {
                "index": ws["encode_train"]["codes"],
                "image": str(first_test.path),
                "bank": ws["bank"]["bank"],
                "model": ws["train"]["model"],
                "threshold": ws["sweep"]["best_threshold"],
                "top_n": 5,
            },
        )
        by_code = _post(
            client,
            "/retrieval/query",
            {
                "index": ws["encode_train"]["codes"],
                "code_file": ws["encode_test"]["codes"],
                "top_n": 5,
            },
        )
        assert by_image["results"] == by_code["results"]


class TestEvaluate:
    def test_map_bounds(self, ws: dict) -> None:
        assert 0.0 <= ws["evaluate"]["map_at_k"] <= 1.0
        assert 0.0 <= ws["evaluate"]["map_at_r"]["average"] <= 1.0

    def test_per_class_counts(self, ws: dict) -> None:
        per_class = ws["evaluate"]["map_at_r"]["per_class"]
        assert sorted(per_class) == sorted(synthdata.CLASSES)
        for entry in per_class.values():
            assert entry["relevant"] == 6
            assert entry["queries"] == 3
        average = np.mean([entry["map"] for entry in per_class.values()])
        assert ws["evaluate"]["map_at_r"]["average"] == pytest.approx(average)

    def test_distance_matrices(self, ws: dict) -> None:
        within = ws["evaluate"]["query_set_matrix"]
        assert within["classes"] == sorted(synthdata.CLASSES)
        for i in range(4):
            for j in range(4):
                assert within["counts"][i][j] == (3 if i == j else 9)
        cross = ws["evaluate"]["cross_matrix"]
        assert all(count == 18 for row in cross["counts"] for count in row)
        assert ws["evaluate"]["query_set_separability"] >= 0.0
        assert ws["evaluate"]["cross_separability"] >= 0.0

    def test_map_csv_written(self, ws: dict) -> None:
        lines = Path(ws["evaluate"]["map_at_r_csv"]).read_text().splitlines()
        assert lines[0] == "class,relevant,queries,map"
        assert len(lines) == 5


class TestGrid:
    def test_small_grid(self, ws: dict, client: TestClient) -> None:
        out = _post(
            client,
            "/pipeline/grid",
            {
                "workdir": str(ws["work"]),
                "bits": 16,
                "grid": {
                    "learning_rate": [0.05],
                    "batch_size": [16],
                    "l1_weight": [0.0],
                    "l2_weight": [0.0],
                    "margin": [8.0],
                    "reg_weight": [1e-3, 1e-5],
                },
                "train": {"epochs": 10, "patience": 10, "seed": 0},
                "hidden": [24, 16],
            },
        )
        assert out["combinations"] == 2
        assert out["best"]["bits"] == 16
        lines = Path(out["csv"]).read_text().splitlines()
        assert len(lines) == 3
        assert lines[0].startswith("bits,learning_rate,batch_size")
        best = max(float(line.split(",")[-1]) for line in lines[1:])
        assert out["best"]["best_val_map"] == pytest.approx(best)


class TestFlops:
    def test_reference_network(self, ws: dict, client: TestClient) -> None:
        out = _post(client, "/pipeline/flops", {})
        assert out["layer_sizes"] == [372, 300, 200, 72]
        assert out["network_total"] == 374_572
        components = {c["name"]: c["flops"] for c in out["components"]}
        assert components == {
            "linear_1": 223_200,
            "batchnorm_1": 1_200,
            "tanh_1": 300,
            "linear_2": 120_000,
            "batchnorm_2": 800,
            "tanh_2": 200,
            "linear_3": 28_800,
            "tanh_3": 72,
        }
        assert out["descriptor_stage_reference"] == 1_139_692_788
        assert out["combined_reference"] == 1_140_067_360
        assert out["descriptor_stage_estimate"] is None
        assert out["report"] is None

    def test_bank_estimate_and_report(self, ws: dict, client: TestClient) -> None:
        out = _post(
            client,
            "/pipeline/flops",
            {
                "bank": ws["bank"]["bank"],
                "width": 64,
                "height": 64,
                "workdir": str(ws["work"]),
            },
        )
        estimate = out["descriptor_stage_estimate"]
        assert estimate["width"] == estimate["height"] == 64
        assert estimate["flops"] > 0
        lines = Path(ws["work"], "reports", "flops.csv").read_text().splitlines()
        assert lines[0] == "component,flops"
        assert lines[-1] == "total,374572"
        assert Path(out["report"]).exists()


class TestErrorMapping:
    def test_missing_manifest_is_data_error(
        self, client: TestClient, tmp_path: Path
    ) -> None:
        resp = client.post(
            "/pipeline/preprocess",
            json={"manifest": str(tmp_path / "nope.csv"), "workdir": str(tmp_path)},
        )
        assert resp.status_code == 400
        body = resp.json()
        assert body["error_kind"] == "data"
        assert "nope.csv" in body["detail"]

    def test_stage_order_enforced(self, client: TestClient, tmp_path: Path) -> None:
        cases = [
            ("/pipeline/build-bank", {"workdir": str(tmp_path)}, "preprocess"),
            ("/pipeline/describe", {"workdir": str(tmp_path)}, "build-bank"),
            ("/pipeline/train", {"workdir": str(tmp_path)}, "describe"),
            ("/pipeline/sweep-threshold", {"workdir": str(tmp_path)}, "train"),
        ]
        for path, payload, expected in cases:
            resp = client.post(path, json=payload)
            assert resp.status_code == 400, path
            assert resp.json()["error_kind"] == "data"
            assert expected in resp.json()["detail"]

    def test_encode_rejects_unknown_split(self, ws: dict, client: TestClient) -> None:
        resp = client.post(
            "/pipeline/encode",
            json={"workdir": str(ws["work"]), "split": "holdout", "threshold": 0.0},
        )
        assert resp.status_code == 400
        assert "split" in resp.json()["detail"]

    def test_query_needs_exactly_one_source(
        self, ws: dict, client: TestClient
    ) -> None:
        index = ws["encode_train"]["codes"]
        neither = client.post("/retrieval/query", json={"index": index})
        both = client.post(
            "/retrieval/query",
            json={"index": index, "code_file": index, "image": "x.rf32"},
        )
        for resp in (neither, both):
            assert resp.status_code == 400
            assert "exactly one" in resp.json()["detail"]

    def test_image_query_needs_bank_and_model(
        self, ws: dict, client: TestClient
    ) -> None:
        entries = imaging.read_manifest(Path(ws["preprocess"]["out_manifest"]))
        resp = client.post(
            "/retrieval/query",
            json={
                "index": ws["encode_train"]["codes"],
                "image": str(entries[0].path),
            },
        )
        assert resp.status_code == 400
        assert "bank" in resp.json()["detail"]

    def test_divergent_training_is_numerical_error(
        self, ws: dict, client: TestClient
    ) -> None:
        resp = client.post(
            "/pipeline/train",
            json={
                "workdir": str(ws["work"]),
                "bits": 16,
                "train": {"learning_rate": 1e200, "epochs": 5, "batch_size": 16},
                "loss": {"margin": 8.0, "l2_weight": 1.0},
                "hidden": [24, 16],
            },
        )
        assert resp.status_code == 500
        assert resp.json()["error_kind"] == "numerical"

    def test_validation_errors_are_422(self, client: TestClient, tmp_path: Path) -> None:
        missing_field = client.post("/pipeline/preprocess", json={})
        bad_margin = client.post(
            "/pipeline/train",
            json={"workdir": str(tmp_path), "loss": {"margin": 0.0}},
        )
        bad_t1 = client.post(
            "/pipeline/build-bank",
            json={"workdir": str(tmp_path), "cosfire": {"t1": 2.0}},
        )
        for resp in (missing_field, bad_margin, bad_t1):
            assert resp.status_code == 422
