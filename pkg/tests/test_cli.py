import csv
import io
import json

import numpy as np
import pytest

from qbound import (
    Activation,
    Conv2d,
    Dense,
    Flatten,
    NetworkSpec,
    load_model,
    random_weights,
    save_dataset,
    save_model,
)
from qbound.cli import main


@pytest.fixture
def toy_model(tmp_path):
    spec = NetworkSpec(
        input_shape=(3,),
        layers=(
            Dense(3, 5, "w0", "b0"),
            Activation("relu"),
            Dense(5, 4, "w1", "b1"),
            Activation("relu"),
            Dense(4, 2, "w2", "b2"),
        ),
    )
    weights = random_weights(spec, seed=21, scale=0.5)
    m, b = tmp_path / "model.json", tmp_path / "weights.bin"
    save_model(spec, weights, m, b)
    return spec, weights, str(m), str(b)


@pytest.fixture
def conv_model(tmp_path):
    spec = NetworkSpec(
        input_shape=(2, 6, 6),
        layers=(
            Conv2d(2, 3, 3, stride=1, padding=1, weight="c0"),
            Activation("relu"),
            Conv2d(3, 2, 3, stride=2, padding=1, weight="c1"),
        ),
    )
    weights = random_weights(spec, seed=5, scale=0.3)
    m, b = tmp_path / "conv.json", tmp_path / "conv.bin"
    save_model(spec, weights, m, b)
    return spec, weights, str(m), str(b)


def run_csv(capsys, argv):
    rc = main(argv)
    out = capsys.readouterr().out
    assert rc == 0
    return list(csv.DictReader(io.StringIO(out)))


class TestNorms:
    def test_toy_mlp_rows(self, toy_model, capsys):
        _, _, m, b = toy_model
        rows = run_csv(capsys, ["norms", "--model", m, "--weights", b])
        assert len(rows) == 4  # 3 stages + summary
        assert rows[-1]["stage"] == "summary"
        assert "bias-augmented" in rows[-1]["kind"]
        assert rows[-1]["r_conv"] == ""  # biased: no conv summary

    def test_conv_model_sparse_widths(self, conv_model, capsys):
        _, _, m, b = conv_model
        rows = run_csv(capsys, ["norms", "--model", m, "--weights", b])
        assert [r["kind"] for r in rows[:-1]] == ["conv", "conv"]
        assert rows[0]["sparse_width"] == "18"  # 3*3*2
        assert rows[-1]["r_conv"] != ""

    def test_bad_model_exits_nonzero(self, tmp_path, capsys):
        (tmp_path / "x.json").write_text("{}")
        (tmp_path / "x.bin").write_bytes(b"\0" * 8)
        rc = main(["norms", "--model", str(tmp_path / "x.json"),
                   "--weights", str(tmp_path / "x.bin")])
        assert rc != 0
        assert "qbound:" in capsys.readouterr().err


class TestBounds:
    def test_sweep_is_monotone_in_bits(self, toy_model, capsys):
        _, _, m, b = toy_model
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b,
            "--bits", "4,8,12,16,20,24", "--mode", "floor",
        ])
        assert len(rows) == 6
        dthetas = [float(r["dtheta_inf"]) for r in rows]
        assert all(a >= b_ for a, b_ in zip(dthetas, dthetas[1:]))
        assert [int(r["bits"]) for r in rows] == [4, 8, 12, 16, 20, 24]

    def test_estimate_below_applicable_bound(self, conv_model, capsys):
        _, _, m, b = conv_model
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b, "--bits", "4,8",
            "--estimate", "--samples", "64",
        ])
        for row in rows:
            applicable = row["applicable"]
            assert float(row["empirical_sup_error"]) <= float(row[applicable])

    def test_on_grid_weights_flagged(self, tmp_path, capsys):
        spec = NetworkSpec((2,), (Dense(2, 2, "w0"),))
        weights = {"w0": np.array([[1.0, -1.0], [0.0, 1.0]])}
        m, b = tmp_path / "m.json", tmp_path / "w.bin"
        save_model(spec, weights, m, b)
        rows = run_csv(capsys, [
            "bounds", "--model", str(m), "--weights", str(b),
            "--bits", "1", "--mode", "floor",
        ])
        assert float(rows[0]["dtheta_inf"]) == 0.0
        assert float(rows[0]["bound_mean_norm"]) == 0.0
        assert rows[0]["ratio_log10"] == ""
        assert "ratio undefined" in rows[0]["flags"]

    def test_nobias_columns_populated(self, conv_model, capsys):
        _, _, m, b = conv_model
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b, "--bits", "8",
        ])
        row = rows[0]
        assert row["applicable"] == "bound_conv"
        assert row["bound_no_bias"] != "" and row["bound_conv"] != ""

    def test_biased_model_has_no_conv_columns(self, toy_model, capsys):
        _, _, m, b = toy_model
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b, "--bits", "8",
        ])
        assert rows[0]["bound_conv"] == "" and rows[0]["bound_no_bias"] == ""
        assert rows[0]["applicable"] == "bound_mean_norm"

    def test_byte_identical_reruns(self, toy_model, tmp_path, capsys):
        _, _, m, b = toy_model
        args = ["bounds", "--model", m, "--weights", b, "--bits", "4,8",
                "--estimate", "--seed", "3"]
        out1 = tmp_path / "a.csv"
        out2 = tmp_path / "b.csv"
        assert main(args + ["--out", str(out1)]) == 0
        assert main(args + ["--out", str(out2)]) == 0
        assert out1.read_bytes() == out2.read_bytes()

    def test_json_format(self, toy_model, capsys):
        _, _, m, b = toy_model
        rc = main(["bounds", "--model", m, "--weights", b, "--bits", "4",
                   "--format", "json"])
        assert rc == 0
        rows = json.loads(capsys.readouterr().out)
        assert rows[0]["bits"] == 4


class TestQuantizeCmd:
    def test_writes_model_with_metadata(self, toy_model, tmp_path, capsys):
        spec, weights, m, b = toy_model
        out_m = tmp_path / "q.json"
        rc = main([
            "quantize", "--model", m, "--weights", b, "--bits", "8",
            "--mode", "round", "--out", str(out_m),
        ])
        assert rc == 0
        spec2, qweights, meta = load_model(out_m, tmp_path / "q.bin")
        assert meta["bits"] == 8 and meta["mode"] == "round"
        assert set(meta["eta"]) == {"w0", "w1", "w2"}
        # biases byte-identical, weights changed
        for name in ("b0", "b1", "b2"):
            assert np.array_equal(
                qweights[name], weights[name].astype(np.float32).astype(np.float64)
            )
        assert not np.array_equal(qweights["w0"], weights["w0"])

    def test_adaround_metadata_records_hyperparameters(self, toy_model, tmp_path, capsys):
        _, _, m, b = toy_model
        out_m = tmp_path / "qa.json"
        rc = main([
            "quantize", "--model", m, "--weights", b, "--bits", "6",
            "--mode", "adaround", "--out", str(out_m),
        ])
        assert rc == 0
        _, _, meta = load_model(out_m, tmp_path / "qa.bin")
        assert meta["adaround"] == {
            "calib_count": 256, "steps": 15,
            "learning_rate": 0.001, "lambda": 0.01,
        }

    def test_one_bit_grid(self, toy_model, tmp_path, capsys):
        _, _, m, b = toy_model
        out_m = tmp_path / "q1.json"
        rc = main(["quantize", "--model", m, "--weights", b, "--bits", "1",
                   "--mode", "floor", "--out", str(out_m)])
        assert rc == 0
        _, qweights, meta = load_model(out_m, tmp_path / "q1.bin")
        for name, eta in meta["eta"].items():
            k = qweights[name] / eta
            assert np.allclose(k, np.round(k), atol=1e-6)


class TestEvalCmd:
    def test_constant_classifier(self, tmp_path, capsys):
        spec = NetworkSpec((2,), (Dense(2, 3, "w", "b"),))
        weights = {"w": np.zeros((3, 2)), "b": np.array([1.0, 0.0, 0.0])}
        m, b = tmp_path / "m.json", tmp_path / "w.bin"
        save_model(spec, weights, m, b)
        save_dataset(tmp_path / "d.bin", np.zeros((8, 2)),
                     np.zeros(8, dtype=np.int64))
        rows = run_csv(capsys, [
            "eval", "--model", str(m), "--weights", str(b),
            "--dataset", str(tmp_path / "d.bin"),
        ])
        assert float(rows[0]["accuracy"]) == 1.0

    def test_missing_dataset_is_usage_error(self, toy_model, capsys):
        _, _, m, b = toy_model
        rc = main(["eval", "--model", m, "--weights", b])
        assert rc == 2
        assert "dataset" in capsys.readouterr().err


class TestReportCmd:
    def test_merged_rows(self, tmp_path, capsys):
        spec = NetworkSpec(
            input_shape=(1, 4, 4),
            layers=(
                Conv2d(1, 2, 3, padding=1, weight="c0"),
                Activation("relu"),
                Flatten(),
                Dense(32, 3, "w0", "b0"),
            ),
        )
        weights = random_weights(spec, seed=2, scale=0.4)
        m, b = tmp_path / "m.json", tmp_path / "w.bin"
        save_model(spec, weights, m, b)
        rng = np.random.default_rng(0)
        save_dataset(tmp_path / "d.bin",
                     rng.uniform(-1, 1, (20, 1, 4, 4)),
                     rng.integers(0, 3, 20))
        rows = run_csv(capsys, [
            "report", "--model", str(m), "--weights", str(b),
            "--dataset", str(tmp_path / "d.bin"),
            "--bits", "2,8", "--estimate", "--samples", "16",
        ])
        assert len(rows) == 2
        for row in rows:
            assert row["accuracy"] != "" and row["accuracy_fp"] != ""
            assert float(row["empirical_sup_error"]) <= float(
                row[row["applicable"]]
            )


class TestBoundsAgainstQuantizedFile:
    def test_compares_saved_quantized_model(self, toy_model, tmp_path, capsys):
        _, _, m, b = toy_model
        out_m = tmp_path / "q.json"
        assert main(["quantize", "--model", m, "--weights", b, "--bits", "6",
                     "--mode", "floor", "--out", str(out_m)]) == 0
        capsys.readouterr()
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b,
            "--quantized-model", str(out_m),
            "--quantized-weights", str(tmp_path / "q.bin"),
            "--estimate", "--samples", "32",
        ])
        assert len(rows) == 1
        row = rows[0]
        assert row["bits"] == "6"
        assert float(row["dtheta_inf"]) > 0
        assert float(row["empirical_sup_error"]) <= float(row[row["applicable"]])

    def test_architecture_mismatch_rejected(self, toy_model, conv_model, capsys):
        _, _, m, b = toy_model
        _, _, cm, cb = conv_model
        rc = main(["bounds", "--model", m, "--weights", b,
                   "--quantized-model", cm, "--quantized-weights", cb])
        assert rc == 2
        assert "architecture" in capsys.readouterr().err


class TestDecompose:
    def test_decomposition_column_below_mean_bound(self, toy_model, capsys):
        _, _, m, b = toy_model
        rows = run_csv(capsys, [
            "bounds", "--model", m, "--weights", b, "--bits", "4,8",
            "--decompose",
        ])
        for row in rows:
            total = float(row["decomposition_total"])
            assert total <= float(row["bound_mean_norm"]) * (1 + 1e-12)
            terms = [float(t) for t in row["per_layer_terms"].split(";")]
            assert len(terms) == 3
            assert sum(terms) == pytest.approx(total)


def test_thread_cap_keeps_output_identical(toy_model, tmp_path, monkeypatch):
    _, _, m, b = toy_model
    args = ["bounds", "--model", m, "--weights", b, "--bits", "4,8,12"]
    out1, out2 = tmp_path / "t1.csv", tmp_path / "t2.csv"
    assert main(args + ["--out", str(out1)]) == 0
    monkeypatch.setenv("QBOUND_THREADS", "1")
    assert main(args + ["--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()
