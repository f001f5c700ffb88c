import json
from dataclasses import replace

import numpy as np
import pytest
from PIL import Image

from clrp.cli import (EXIT_IO, EXIT_NUMERICAL, EXIT_OK, EXIT_USAGE,
                      MODEL_DIR_ENV, main)
from clrp.inference import apply_layer, forward, preprocess
from clrp.model import save_model
from netgen import make_convnet


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A saved model directory plus a small annotated image set."""
    root = tmp_path_factory.mktemp("cli")
    rng = np.random.default_rng(70)
    model = make_convnet(rng, in_shape=(3, 8, 8), channels=(4,), kernel=3,
                         pad=1, pool=(2, 2), fc_sizes=(8, 4), bias=True)
    # pin one class to a guaranteed negative logit for refusal tests
    last = len(model.layers) - 1
    w = model.layers[last].weights.copy()
    b = model.layers[last].bias.copy()
    w[3] = 0.0
    b[3] = -1.0
    model = model.with_layer(last, replace(model.layers[last], weights=w, bias=b))
    model_dir = root / "model"
    save_model(model, model_dir)

    records = []
    for i in range(3):
        arr = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
        name = f"img_{i}.png"
        Image.fromarray(arr).save(root / name)
        records.append({"image": name, "label": i % 3, "boxes": [[1, 1, 6, 6]]})
    ann = root / "annotations.jsonl"
    ann.write_text("\n".join(json.dumps(r) for r in records) + "\n")
    return {"root": root, "model": model, "model_dir": model_dir,
            "annotations": ann, "image": root / "img_0.png"}


class TestInfo:
    def test_prints_layers(self, workspace, capsys):
        assert main(["info", "--model", str(workspace["model_dir"])]) == EXIT_OK
        out = capsys.readouterr().out
        assert "Conv2d" in out and "Linear" in out

    def test_missing_model_dir_is_io_error(self, workspace, capsys):
        code = main(["info", "--model", str(workspace["root"] / "nope")])
        assert code == EXIT_IO
        assert "error:" in capsys.readouterr().err

    def test_no_model_argument_is_usage_error(self, monkeypatch, capsys):
        monkeypatch.delenv(MODEL_DIR_ENV, raising=False)
        assert main(["info"]) == EXIT_USAGE

    def test_model_dir_from_environment(self, workspace, monkeypatch):
        monkeypatch.setenv(MODEL_DIR_ENV, str(workspace["model_dir"]))
        assert main(["info"]) == EXIT_OK


class TestExplain:
    def _run(self, workspace, out, *extra):
        return main(["explain", "--model", str(workspace["model_dir"]),
                     "--image", str(workspace["image"]), "--out", str(out),
                     *extra])

    def test_writes_pgm_and_sidecar(self, workspace, tmp_path, capsys):
        assert self._run(workspace, tmp_path) == EXIT_OK
        printed = capsys.readouterr().out.strip()
        pgm = tmp_path / printed.rsplit("/", 1)[-1]
        assert pgm.exists() and pgm.suffix == ".pgm"
        assert pgm.read_bytes().startswith(b"P5\n")
        sidecar = json.loads(pgm.with_suffix(".json").read_text())
        for key in ("method", "target", "logit", "total_relevance",
                    "conservation_residual", "padding_leakage"):
            assert key in sidecar
        assert sidecar["method"] == "lrp"

    @pytest.mark.parametrize("method", ["clrp1", "clrp2", "grad", "guided"])
    def test_every_method_runs(self, workspace, tmp_path, method, capsys):
        x = preprocess(np.asarray(Image.open(workspace["image"]).convert("RGB")),
                       workspace["model"])
        trace = forward(workspace["model"], x)
        target = int(np.argmax(trace.logits))
        if method.startswith("clrp") and trace.logits[target] <= 0:
            pytest.skip("needs a positive logit")
        code = self._run(workspace, tmp_path, "--method", method,
                         "--target", str(target))
        capsys.readouterr()
        assert code == EXIT_OK
        assert any(p.suffix == ".pgm" for p in tmp_path.iterdir())

    def test_byte_identical_across_runs(self, workspace, tmp_path, capsys):
        out_a, out_b = tmp_path / "a", tmp_path / "b"
        assert self._run(workspace, out_a) == EXIT_OK
        assert self._run(workspace, out_b) == EXIT_OK
        capsys.readouterr()
        names = sorted(p.name for p in out_a.iterdir())
        assert names == sorted(p.name for p in out_b.iterdir())
        for name in names:
            assert (out_a / name).read_bytes() == (out_b / name).read_bytes()

    def test_negative_logit_target_refused(self, workspace, tmp_path, capsys):
        # class 3 was pinned to logit -1 in the fixture model
        code = self._run(workspace, tmp_path, "--target", "3")
        assert code == EXIT_NUMERICAL
        assert "error:" in capsys.readouterr().err

    def test_target_out_of_range_is_usage_error(self, workspace, tmp_path, capsys):
        assert self._run(workspace, tmp_path, "--target", "99") == EXIT_USAGE
        capsys.readouterr()

    def test_malformed_target_is_usage_error(self, workspace, tmp_path, capsys):
        assert self._run(workspace, tmp_path, "--target", "abc") == EXIT_USAGE
        capsys.readouterr()

    def test_missing_image_is_io_error(self, workspace, tmp_path, capsys):
        code = main(["explain", "--model", str(workspace["model_dir"]),
                     "--image", str(workspace["root"] / "nope.png"),
                     "--out", str(tmp_path)])
        assert code == EXIT_IO
        capsys.readouterr()

    def test_multi_class_map(self, workspace, tmp_path, capsys):
        x = preprocess(np.asarray(Image.open(workspace["image"]).convert("RGB")),
                       workspace["model"])
        logits = forward(workspace["model"], x).logits
        # pick a pair whose combined score is positive
        order = np.argsort(-logits)
        pair = sorted(int(i) for i in order[:2])
        if logits[order[0]] + logits[order[1]] <= 0:
            pytest.skip("no class pair with positive combined score")
        spec = ",".join(str(t) for t in pair)
        assert self._run(workspace, tmp_path, "--multi-class", spec) == EXIT_OK
        capsys.readouterr()
        label = "multi_" + "_".join(str(t) for t in pair)
        assert any(label in p.name for p in tmp_path.iterdir())

    def test_png_output_optional(self, workspace, tmp_path, capsys):
        assert self._run(workspace, tmp_path, "--png") == EXIT_OK
        capsys.readouterr()
        assert any(p.suffix == ".png" for p in tmp_path.iterdir())

    def test_larger_image_is_resized(self, workspace, tmp_path, capsys):
        big = tmp_path / "big.png"
        rng = np.random.default_rng(71)
        Image.fromarray(rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)).save(big)
        code = main(["explain", "--model", str(workspace["model_dir"]),
                     "--image", str(big), "--out", str(tmp_path / "out")])
        assert code == EXIT_OK
        capsys.readouterr()


class TestPointing:
    def _run(self, workspace, out_json, out_csv, *extra):
        return main(["pointing", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["annotations"]),
                     "--methods", "lrp,grad", "--energy", "0.25,0.5",
                     "--out-json", str(out_json), "--out-csv", str(out_csv),
                     *extra])

    def test_writes_reports(self, workspace, tmp_path):
        out_json, out_csv = tmp_path / "p.json", tmp_path / "p.csv"
        assert self._run(workspace, out_json, out_csv) == EXIT_OK
        report = json.loads(out_json.read_text())
        methods = [r["method"] for r in report["pointing"]]
        assert methods == ["lrp", "grad"]
        for r in report["pointing"]:
            assert len(r["accuracy"]) == 2
        assert out_csv.read_text().startswith("method,energy,hits,misses,accuracy")

    def test_center_baseline_row(self, workspace, tmp_path):
        out_json = tmp_path / "p.json"
        code = self._run(workspace, out_json, tmp_path / "p.csv",
                         "--center-baseline")
        assert code == EXIT_OK
        methods = [r["method"] for r in json.loads(out_json.read_text())["pointing"]]
        assert methods[-1] == "center"

    def test_reports_deterministic(self, workspace, tmp_path):
        a_json, a_csv = tmp_path / "a.json", tmp_path / "a.csv"
        b_json, b_csv = tmp_path / "b.json", tmp_path / "b.csv"
        assert self._run(workspace, a_json, a_csv, "--workers", "1") == EXIT_OK
        assert self._run(workspace, b_json, b_csv, "--workers", "3") == EXIT_OK
        assert a_json.read_bytes() == b_json.read_bytes()
        assert a_csv.read_bytes() == b_csv.read_bytes()

    def test_unknown_method_is_usage_error(self, workspace, tmp_path, capsys):
        code = main(["pointing", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["annotations"]),
                     "--methods", "lrp,bogus",
                     "--out-json", str(tmp_path / "p.json"),
                     "--out-csv", str(tmp_path / "p.csv")])
        assert code == EXIT_USAGE
        capsys.readouterr()

    def test_missing_annotations_is_io_error(self, workspace, tmp_path, capsys):
        code = main(["pointing", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["root"] / "nope.jsonl"),
                     "--out-json", str(tmp_path / "p.json"),
                     "--out-csv", str(tmp_path / "p.csv")])
        assert code == EXIT_IO
        capsys.readouterr()


class TestAblate:
    def _run(self, workspace, out_json, out_csv, *extra):
        return main(["ablate", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["annotations"]),
                     "--methods", "grad", "--patch", "3",
                     "--out-json", str(out_json), "--out-csv", str(out_csv),
                     *extra])

    def test_writes_reports_with_random_baseline(self, workspace, tmp_path):
        out_json = tmp_path / "a.json"
        assert self._run(workspace, out_json, tmp_path / "a.csv") == EXIT_OK
        methods = [r["method"] for r in json.loads(out_json.read_text())["ablation"]]
        assert methods == ["grad", "random"]

    def test_same_seed_same_bytes(self, workspace, tmp_path):
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert self._run(workspace, a, tmp_path / "a.csv", "--seed", "7") == EXIT_OK
        assert self._run(workspace, b, tmp_path / "b.csv", "--seed", "7") == EXIT_OK
        assert a.read_bytes() == b.read_bytes()


class TestNeurons:
    def test_matrix_and_maps_written(self, workspace, tmp_path, capsys):
        model = workspace["model"]
        x = preprocess(np.asarray(Image.open(workspace["image"]).convert("RGB")),
                       model)
        trace = forward(model, x)
        idx = model.layer_index("fc0")
        acts, _, _ = apply_layer(model.layers[idx], trace.inputs[idx])
        neurons = [int(i) for i in np.argsort(-acts)[:2] if acts[i] > 0]
        if len(neurons) < 2:
            pytest.skip("not enough active neurons in fixture model")
        code = main(["neurons", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["annotations"]),
                     "--image", str(workspace["image"]), "--layer", "fc0",
                     "--neurons", ",".join(str(n) for n in neurons),
                     "--patch", "3", "--out", str(tmp_path)])
        capsys.readouterr()
        assert code == EXIT_OK
        csv = (tmp_path / "ablation_matrix.csv").read_text()
        assert len(csv.strip().splitlines()) == len(neurons) + 1
        for n in neurons:
            assert (tmp_path / f"neuron_fc0_{n}.pgm").exists()

    def test_inactive_neuron_is_numerical_refusal(self, workspace, tmp_path, capsys):
        model = workspace["model"]
        x = preprocess(np.asarray(Image.open(workspace["image"]).convert("RGB")),
                       model)
        trace = forward(model, x)
        idx = model.layer_index("fc0")
        acts, _, _ = apply_layer(model.layers[idx], trace.inputs[idx])
        dead = int(np.argmin(acts))
        if acts[dead] > 0:
            pytest.skip("all neurons active")
        code = main(["neurons", "--model", str(workspace["model_dir"]),
                     "--annotations", str(workspace["annotations"]),
                     "--image", str(workspace["image"]), "--layer", "fc0",
                     "--neurons", str(dead), "--out", str(tmp_path)])
        assert code == EXIT_NUMERICAL
        capsys.readouterr()
