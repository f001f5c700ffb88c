import json

import numpy as np
import pytest
import torch
from torch import nn

from clrp.inference import forward
from clrp.model import load_model
from clrp_exporter.export import ExportError, convert_layers, export_model

META = dict(mean=np.full(3, 0.5, np.float32), std=np.full(3, 0.5, np.float32))


def small_net(seed=0, batchnorm=False):
    torch.manual_seed(seed)
    layers = [nn.Conv2d(3, 4, 3, padding=1)]
    if batchnorm:
        layers.append(nn.BatchNorm2d(4))
    layers += [nn.ReLU(), nn.MaxPool2d(2, 2), nn.Flatten(),
               nn.Linear(4 * 8 * 8, 6)]
    if batchnorm:
        layers.append(nn.BatchNorm1d(6))
    layers.append(nn.Linear(6, 5))
    model = nn.Sequential(*layers)
    if batchnorm:
        # give the norm layers non-trivial running statistics
        model.train()
        with torch.no_grad():
            for _ in range(5):
                model(torch.randn(8, 3, 16, 16))
    return model.eval()


def names(seed=5):
    return tuple(f"class_{i}" for i in range(5))


class TestRoundTrip:
    def test_engine_matches_framework_on_reference_inputs(self, tmp_path):
        model = small_net()
        result = export_model(model, tmp_path, input_shape=(3, 16, 16),
                              class_names=names(), **META)
        reference = json.loads(result.reference_path.read_text())
        assert len(reference["inputs"]) == 10
        loaded = load_model(result.model_dir)
        for flat, want in zip(reference["inputs"], reference["logits"]):
            x = np.asarray(flat, np.float32).reshape(3, 16, 16)
            got = forward(loaded, x).logits
            np.testing.assert_allclose(got, want, atol=1e-4)
        assert result.max_logit_error <= 1e-4

    def test_default_bounds_cover_pixel_range(self, tmp_path):
        result = export_model(small_net(), tmp_path, input_shape=(3, 16, 16),
                              class_names=names(), **META)
        np.testing.assert_allclose(result.container.input_low, -1.0)
        np.testing.assert_allclose(result.container.input_high, 1.0)

    def test_export_is_deterministic(self, tmp_path):
        a = export_model(small_net(), tmp_path / "a", input_shape=(3, 16, 16),
                         class_names=names(), **META)
        b = export_model(small_net(), tmp_path / "b", input_shape=(3, 16, 16),
                         class_names=names(), **META)
        assert ((a.model_dir / "weights.bin").read_bytes()
                == (b.model_dir / "weights.bin").read_bytes())
        assert a.reference_path.read_bytes() == b.reference_path.read_bytes()


class TestBatchNormFolding:
    def test_folded_logits_match_original(self, tmp_path):
        model = small_net(seed=1, batchnorm=True)
        result = export_model(model, tmp_path, input_shape=(3, 16, 16),
                              class_names=names(), **META)
        # the container has no norm layers left
        kinds = {l.kind for l in result.container.layers}
        assert kinds <= {"Conv2d", "Linear", "ReLU", "MaxPool2d", "Flatten"}
        rng = np.random.default_rng(2)
        for _ in range(5):
            x = rng.uniform(-1, 1, (3, 16, 16)).astype(np.float32)
            with torch.no_grad():
                want = model(torch.from_numpy(x[None])).numpy()[0]
            got = forward(result.container, x).logits
            np.testing.assert_allclose(got, want, atol=1e-4)

    def test_norm_without_preceding_weight_layer_rejected(self):
        model = nn.Sequential(nn.BatchNorm2d(3), nn.Flatten(), nn.Linear(48, 2))
        with pytest.raises(ExportError, match="0"):
            convert_layers(model)

    def test_norm_after_relu_rejected(self):
        model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.ReLU(), nn.BatchNorm2d(4),
                              nn.Flatten(), nn.Linear(4, 2))
        with pytest.raises(ExportError):
            convert_layers(model)


class TestRejections:
    def test_branching_block_rejected_with_name(self):
        class Residual(nn.Module):
            def __init__(self):
                super().__init__()
                self.conv = nn.Conv2d(3, 3, 3, padding=1)

            def forward(self, x):
                return x + self.conv(x)

        model = nn.Sequential(Residual(), nn.Flatten(), nn.Linear(48, 2))
        with pytest.raises(ExportError, match="Residual"):
            convert_layers(model)

    def test_unsupported_leaf_rejected_with_name(self):
        model = nn.Sequential(nn.Conv2d(3, 4, 3), nn.Sigmoid(),
                              nn.Flatten(), nn.Linear(4, 2))
        with pytest.raises(ExportError, match="Sigmoid"):
            convert_layers(model)

    def test_model_not_ending_in_linear_rejected(self):
        model = nn.Sequential(nn.Linear(4, 2), nn.ReLU())
        with pytest.raises(ExportError, match="linear"):
            convert_layers(model)

    def test_grouped_convolution_rejected(self):
        model = nn.Sequential(nn.Conv2d(4, 4, 3, groups=2), nn.Flatten(),
                              nn.Linear(16, 2))
        with pytest.raises(ExportError, match="grouped"):
            convert_layers(model)

    def test_dropout_is_skipped(self):
        model = nn.Sequential(nn.Linear(4, 3), nn.Dropout(0.5), nn.ReLU(),
                              nn.Linear(3, 2))
        layers = convert_layers(model)
        assert [l.kind for l in layers] == ["Linear", "ReLU", "Linear"]
