import json
import struct
import subprocess
import sys

import numpy as np
import pytest
import torch

from cliptrainer.cli import main
from cliptrainer.data import load_dataset, split_indices
from cliptrainer.export import export_nnwf, read_nnwf, rewrite_nnwf
from cliptrainer.model import ClipClassifier
from cliptrainer.spec import TrainSpec
from cliptrainer.train import AccuracyGateError, train_and_export


@pytest.fixture(scope="session")
def dataset(tmp_path_factory):
    """Small dataset produced by the verification toolchain's generator."""
    out = tmp_path_factory.mktemp("ds")
    cmd = [
        sys.executable, "-m", "flowcert.cli", "synth",
        "--out", str(out), "--count", "20", "--seed", "0", "--noise", "0.06",
    ]
    subprocess.run(cmd, check=True, capture_output=True)
    return out / "manifest.jsonl"


@pytest.fixture(scope="session")
def bundle(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("bundle")
    spec = TrainSpec(epochs=30, seed=0)
    result = train_and_export(spec, dataset, out)
    return out, result


class TestData:
    def test_load(self, dataset):
        clips, labels, classes, paths = load_dataset(dataset)
        assert clips.shape[1:] == (6, 16, 16, 1)
        assert classes == ["down", "left", "right", "up"]
        assert len(paths) == len(labels) == len(clips)

    def test_split_deterministic_and_disjoint(self):
        train, test = split_indices(100, 0.2)
        train2, test2 = split_indices(100, 0.2)
        assert np.array_equal(train, train2) and np.array_equal(test, test2)
        assert len(np.intersect1d(train, test)) == 0
        assert len(test) == 20


class TestTraining:
    def test_accuracy_gate_passes(self, bundle):
        _, result = bundle
        assert result["accuracy"] >= 0.90

    def test_export_files_exist(self, bundle):
        out, result = bundle
        assert (out / "model.nnwf").exists()
        fixtures = json.loads((out / "fixtures.json").read_text())
        assert len(fixtures) >= 10
        for entry in fixtures:
            assert (out / entry["video"]).exists()
            assert all(round(v, 6) == v for v in entry["logits"])

    def test_low_accuracy_refuses_export(self, dataset, tmp_path):
        spec = TrainSpec(epochs=0, seed=0)
        with pytest.raises(AccuracyGateError):
            train_and_export(spec, dataset, tmp_path / "none")
        assert not (tmp_path / "none" / "model.nnwf").exists()

    def test_cli_exit_codes(self, dataset, tmp_path):
        rc = main(["--manifest", str(dataset), "--out", str(tmp_path / "cli"), "--epochs", "0"])
        assert rc == 1
        assert not (tmp_path / "cli" / "model.nnwf").exists()


class TestNnwfFormat:
    def test_reload_reexport_byte_identical(self, bundle):
        out, _ = bundle
        path = out / "model.nnwf"
        parsed = read_nnwf(path)
        copy = out / "copy.nnwf"
        rewrite_nnwf(parsed, copy)
        assert path.read_bytes() == copy.read_bytes()

    def test_header_and_classes(self, bundle):
        out, result = bundle
        raw = (out / "model.nnwf").read_bytes()
        assert raw[:4] == b"NNWF"
        assert struct.unpack_from("<I", raw, 4)[0] == 1
        _, _, classes = read_nnwf(out / "model.nnwf")
        assert classes == result["classes"]

    def test_layer_sequence(self, bundle):
        out, _ = bundle
        conv, rec, _ = read_nnwf(out / "model.nnwf")
        assert [k for k, _, _ in conv] == [0, 1, 2, 3, 4]  # conv, relu, pool, flatten, dense
        assert [k for k, _, _ in rec] == [5, 4, 6]  # lstm, dense, softmax

    def test_lstm_gate_layout_and_bias_sum(self):
        torch.manual_seed(3)
        spec = TrainSpec()
        model = ClipClassifier(spec, 16, 16, 1, 4)
        state = model.state_dict()
        export_nnwf(model, ["a", "b", "c", "d"], "/tmp/_gate.nnwf")
        _, rec, _ = read_nnwf("/tmp/_gate.nnwf")
        kind, name, tensors = rec[0]
        assert kind == 5
        w_in, w_rec, bias = tensors
        np.testing.assert_allclose(w_in, state["lstm.weight_ih_l0"].numpy(), atol=1e-7)
        np.testing.assert_allclose(w_rec, state["lstm.weight_hh_l0"].numpy(), atol=1e-7)
        np.testing.assert_allclose(
            bias, (state["lstm.bias_ih_l0"] + state["lstm.bias_hh_l0"]).numpy(), atol=1e-7
        )

    def test_projection_column_permutation(self):
        # the exported dense must consume (h, w, c)-ordered flatten input and
        # produce the same features torch computes channel-first
        torch.manual_seed(4)
        spec = TrainSpec()
        model = ClipClassifier(spec, 16, 16, 1, 4).eval()
        export_nnwf(model, ["a", "b", "c", "d"], "/tmp/_perm.nnwf")
        conv, _, _ = read_nnwf("/tmp/_perm.nnwf")
        proj_w, proj_b = conv[4][2]
        frame = np.random.default_rng(5).random((16, 16, 1)).astype(np.float32)
        with torch.no_grad():
            want = model.features(torch.from_numpy(frame).permute(2, 0, 1)[None].float())[0].numpy()
        # manual channels-last pipeline with the exported tensors
        kernel, kbias = conv[0][2]
        x = np.zeros((14, 14, kernel.shape[0]), dtype=np.float64)
        for o in range(kernel.shape[0]):
            for dy in range(3):
                for dx in range(3):
                    x[:, :, o] += kernel[o, 0, dy, dx] * frame[dy : dy + 14, dx : dx + 14, 0]
            x[:, :, o] += kbias[o]
        x = np.maximum(x, 0.0)
        pooled = x.reshape(7, 2, 7, 2, -1).max(axis=(1, 3))
        feats = proj_w @ pooled.reshape(-1) + proj_b
        np.testing.assert_allclose(feats, want, atol=1e-4)


class TestParityWithRuntime:
    def test_fixture_logits_match_inference_runtime(self, bundle):
        out, _ = bundle
        script = (
            "import json, sys, numpy as np\n"
            "from flowcert.netrt import load_weights, logits\n"
            "from flowcert.tensors import read_vten\n"
            "root = sys.argv[1]\n"
            "net = load_weights(root + '/model.nnwf')\n"
            "worst = 0.0\n"
            "for f in json.load(open(root + '/fixtures.json')):\n"
            "    z = logits(net, read_vten(root + '/' + f['video']))\n"
            "    worst = max(worst, float(np.abs(z - np.array(f['logits'])).max()))\n"
            "print(worst)\n"
            "sys.exit(0 if worst < 1e-4 else 1)\n"
        )
        proc = subprocess.run([sys.executable, "-c", script, str(out)], capture_output=True, text=True)
        assert proc.returncode == 0, proc.stdout + proc.stderr
