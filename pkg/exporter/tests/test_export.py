import numpy as np
import pytest
import torch
from torch import nn

import qbound
from qbexport import (
    ExportConfig,
    ExportError,
    convert_module,
    export_dataset,
    export_model,
)
from qbexport.cli import main as cli_main


def _export(module, tmp_path, input_shape, bn="fold", domain=1.0):
    ckpt = tmp_path / "model.pt"
    torch.save(module, ckpt)
    cfg = ExportConfig(
        checkpoint=str(ckpt),
        input_shape=input_shape,
        bn_handling=bn,
        out_dir=str(tmp_path / "out"),
        domain_d=domain,
    )
    return export_model(cfg)


def _compare(module, manifest, blob, input_shape, n=16, atol=1e-4, seed=0):
    spec, weights, _ = qbound.load_model(manifest, blob)
    assert qbound.validate(spec, weights) == []
    rng = np.random.default_rng(seed)
    xs = rng.uniform(-1, 1, size=(n,) + tuple(input_shape)).astype(np.float32)
    module.eval()
    with torch.no_grad():
        want = module(torch.from_numpy(xs)).numpy()
    got = qbound.forward_batch(spec, weights, xs.astype(np.float64))
    np.testing.assert_allclose(got.reshape(want.shape), want, atol=atol)
    return spec, weights


class TinyBasicBlock(nn.Module):
    def __init__(self, c=2, mid=3, with_bn=False):
        super().__init__()
        self.conv1 = nn.Conv2d(c, mid, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(mid, c, 3, padding=1, bias=False)
        if with_bn:
            self.bn1 = nn.BatchNorm2d(mid)
            self.bn2 = nn.BatchNorm2d(c)
        self.relu = nn.ReLU()
        self.downsample = None

    def forward(self, x):
        out = self.conv1(x)
        if hasattr(self, "bn1"):
            out = self.bn1(out)
        out = self.conv2(self.relu(out))
        if hasattr(self, "bn2"):
            out = self.bn2(out)
        return self.relu(out + x)


class TinyInvertedResidual(nn.Module):
    def __init__(self, c=2, expand=2):
        super().__init__()
        mid = c * expand
        self.use_res_connect = True
        self.conv = nn.Sequential(
            nn.Conv2d(c, mid, 1, bias=False),
            nn.ReLU6(),
            nn.Conv2d(mid, mid, 3, padding=1, groups=mid, bias=False),
            nn.ReLU6(),
            nn.Conv2d(mid, c, 1, bias=False),
        )

    def forward(self, x):
        return x + self.conv(x)


def _randomize_bn(bn, rng):
    with torch.no_grad():
        bn.weight.copy_(torch.from_numpy(rng.uniform(0.5, 1.5, bn.num_features)))
        bn.bias.copy_(torch.from_numpy(rng.normal(0, 0.3, bn.num_features)))
        bn.running_mean.copy_(torch.from_numpy(rng.normal(0, 0.5, bn.num_features)))
        bn.running_var.copy_(torch.from_numpy(rng.uniform(0.5, 2.0, bn.num_features)))


class TestExportModel:
    def test_two_layer_mlp_round_trip(self, tmp_path):
        torch.manual_seed(0)
        module = nn.Sequential(nn.Linear(8, 16), nn.ReLU(), nn.Linear(16, 3))
        manifest, blob = _export(module, tmp_path, (8,))
        spec, _ = _compare(module, manifest, blob, (8,))
        assert sum(isinstance(l, qbound.Dense) for l in spec.layers) == 2

    def test_conv_bn_fold_matches_source(self, tmp_path):
        torch.manual_seed(1)
        module = nn.Sequential(
            nn.Conv2d(2, 4, 3, padding=1, bias=True),
            nn.BatchNorm2d(4),
            nn.ReLU(),
            nn.Conv2d(4, 2, 3, stride=2, padding=1, bias=False),
            nn.BatchNorm2d(2),
        )
        rng = np.random.default_rng(2)
        _randomize_bn(module[1], rng)
        _randomize_bn(module[4], rng)
        module.eval()
        manifest, blob = _export(module, tmp_path, (2, 6, 6), bn="fold")
        spec, _ = _compare(module, manifest, blob, (2, 6, 6))
        # BN is gone; its effect lives in the conv weights/biases
        assert all(not isinstance(l, qbound.Activation) or l.fn == "relu"
                   for l in spec.layers)
        assert sum(isinstance(l, qbound.Conv2d) for l in spec.layers) == 2

    def test_neutral_bn_fold_is_identity_on_weights(self, tmp_path):
        module = nn.Sequential(
            nn.Conv2d(1, 2, 3, padding=1, bias=False), nn.BatchNorm2d(2)
        )
        bn = module[1]
        with torch.no_grad():
            bn.weight.fill_(1.0)
            bn.bias.fill_(0.0)
            bn.running_mean.fill_(0.0)
            bn.running_var.fill_(1.0)
        bn.eps = 0.0
        module.eval()
        manifest, blob = _export(module, tmp_path, (1, 4, 4), bn="fold")
        _, weights, _ = qbound.load_model(manifest, blob)
        original = module[0].weight.detach().numpy()
        np.testing.assert_allclose(
            weights["w0"], original.astype(np.float32), atol=0
        )

    def test_strip_removes_bn(self, tmp_path):
        torch.manual_seed(3)
        module = nn.Sequential(
            nn.Conv2d(1, 2, 3, padding=1, bias=False),
            nn.BatchNorm2d(2),
            nn.ReLU(),
        )
        _randomize_bn(module[1], np.random.default_rng(4))
        module.eval()
        manifest, blob = _export(module, tmp_path, (1, 4, 4), bn="strip")
        spec, weights, _ = qbound.load_model(manifest, blob)
        assert [l.kind for l in spec.layers] == ["conv2d", "activation"]
        # stripped model equals the source with BN removed
        reference = nn.Sequential(module[0], nn.Identity(), module[2])
        _compare(reference, manifest, blob, (1, 4, 4))

    def test_mixed_stack_with_pool_and_flatten(self, tmp_path):
        torch.manual_seed(5)
        module = nn.Sequential(
            nn.Conv2d(1, 4, 3, padding=1),
            nn.ReLU6(),
            nn.AvgPool2d(2),
            nn.Flatten(),
            nn.Linear(4 * 3 * 3, 5),
            nn.Tanh(),
            nn.Linear(5, 2),
        )
        manifest, blob = _export(module, tmp_path, (1, 6, 6))
        _compare(module, manifest, blob, (1, 6, 6))

    def test_basic_block_round_trip(self, tmp_path):
        torch.manual_seed(6)
        module = nn.Sequential(TinyBasicBlock(c=2, mid=3), nn.ReLU())
        manifest, blob = _export(module, tmp_path, (2, 5, 5))
        spec, _ = _compare(module, manifest, blob, (2, 5, 5))
        assert any(isinstance(l, qbound.ResBlock) for l in spec.layers)

    def test_basic_block_bn_strip_structure(self, tmp_path):
        module = TinyBasicBlock(c=2, mid=3, with_bn=True)
        module.eval()
        manifest, blob = _export(module, tmp_path, (2, 5, 5), bn="strip")
        spec, weights, _ = qbound.load_model(manifest, blob)
        assert isinstance(spec.layers[0], qbound.ResBlock)

    def test_basic_block_bn_fold_rejected_when_bias_appears(self, tmp_path):
        module = TinyBasicBlock(c=2, mid=3, with_bn=True)
        _randomize_bn(module.bn1, np.random.default_rng(7))
        module.eval()
        with pytest.raises(ExportError, match="strip"):
            convert_module(module, "fold")

    def test_inverted_residual_round_trip(self, tmp_path):
        torch.manual_seed(8)
        module = nn.Sequential(TinyInvertedResidual(c=2, expand=2))
        manifest, blob = _export(module, tmp_path, (2, 5, 5))
        spec, _ = _compare(module, manifest, blob, (2, 5, 5))
        block = spec.layers[0]
        assert isinstance(block, qbound.Bottleneck)
        assert not block.final_activation
        assert block.activation == "relu6"
        assert block.conv2.groups == block.conv2.in_ch  # depthwise

    def test_unsupported_layer_named(self):
        module = nn.Sequential(nn.Linear(3, 3), nn.MaxPool1d(2))
        with pytest.raises(ExportError, match="MaxPool1d"):
            convert_module(module, "fold")

    def test_bn_without_preceding_layer_rejected(self):
        module = nn.Sequential(nn.BatchNorm1d(3), nn.Linear(3, 3))
        with pytest.raises(ExportError, match="fold"):
            convert_module(module, "fold")

    def test_entry_path_into_checkpoint_dict(self, tmp_path):
        module = nn.Sequential(nn.Linear(2, 2))
        ckpt = tmp_path / "c.pt"
        torch.save({"model": module, "epoch": 3}, ckpt)
        cfg = ExportConfig(
            checkpoint=str(ckpt),
            input_shape=(2,),
            out_dir=str(tmp_path / "o"),
            entry="model",
        )
        manifest, blob = export_model(cfg)
        spec, _, _ = qbound.load_model(manifest, blob)
        assert isinstance(spec.layers[0], qbound.Dense)


class TestExportDataset:
    def _source(self, n=10, shape=(1, 4, 4), labeled=True, seed=0):
        rng = np.random.default_rng(seed)
        xs = torch.from_numpy(rng.normal(size=(n,) + shape).astype(np.float32))
        ys = rng.integers(0, 3, size=n)
        if labeled:
            return [(xs[i], int(ys[i])) for i in range(n)]
        return [xs[i] for i in range(n)]

    def test_round_trip_with_labels(self, tmp_path):
        source = self._source(10)
        export_dataset(source, 7, tmp_path / "d.bin")
        ds = qbound.load_dataset(tmp_path / "d.bin")
        assert ds.count == 7
        assert ds.inputs.shape == (7, 1, 4, 4)
        assert ds.labels is not None and len(ds.labels) == 7
        np.testing.assert_allclose(
            ds.inputs[0], source[0][0].numpy(), atol=1e-7
        )

    def test_unlabeled(self, tmp_path):
        export_dataset(self._source(labeled=False), 4, tmp_path / "d.bin")
        ds = qbound.load_dataset(tmp_path / "d.bin")
        assert ds.labels is None and ds.count == 4

    def test_count_zero_valid(self, tmp_path):
        export_dataset(self._source(3), 0, tmp_path / "d.bin")
        ds = qbound.load_dataset(tmp_path / "d.bin")
        assert ds.count == 0

    def test_count_beyond_source_rejected(self, tmp_path):
        with pytest.raises(ExportError, match="outside"):
            export_dataset(self._source(3), 5, tmp_path / "d.bin")

    def test_mixed_shapes_rejected(self, tmp_path):
        source = [torch.zeros(1, 4, 4), torch.zeros(1, 5, 5)]
        with pytest.raises(ExportError, match="shape"):
            export_dataset(source, 2, tmp_path / "d.bin")

    def test_channel_duplication_flag(self, tmp_path):
        export_dataset(self._source(4), 4, tmp_path / "d.bin",
                       duplicate_channels=True)
        ds = qbound.load_dataset(tmp_path / "d.bin")
        assert ds.inputs.shape == (4, 3, 4, 4)
        np.testing.assert_array_equal(ds.inputs[:, 0], ds.inputs[:, 1])


class TestCli:
    def test_export_model_and_dataset(self, tmp_path, capsys):
        torch.manual_seed(9)
        module = nn.Sequential(nn.Linear(4, 3), nn.ReLU(), nn.Linear(3, 2))
        torch.save(module, tmp_path / "m.pt")
        rc = cli_main([
            "export-model", "--checkpoint", str(tmp_path / "m.pt"),
            "--input-shape", "4", "--out-dir", str(tmp_path / "out"),
        ])
        assert rc == 0
        spec, weights, _ = qbound.load_model(
            tmp_path / "out" / "model.json", tmp_path / "out" / "weights.bin"
        )
        assert qbound.validate(spec, weights) == []

        xs = torch.randn(6, 1, 3, 3)
        ys = torch.arange(6) % 2
        torch.save((xs, ys), tmp_path / "d.pt")
        rc = cli_main([
            "export-dataset", "--source", str(tmp_path / "d.pt"),
            "--count", "5", "--out", str(tmp_path / "d.bin"),
        ])
        assert rc == 0
        assert qbound.load_dataset(tmp_path / "d.bin").count == 5

    def test_bad_checkpoint_is_error(self, tmp_path, capsys):
        torch.save({"only": "junk"}, tmp_path / "m.pt")
        rc = cli_main([
            "export-model", "--checkpoint", str(tmp_path / "m.pt"),
            "--input-shape", "4", "--out-dir", str(tmp_path),
        ])
        assert rc == 2
        assert "module" in capsys.readouterr().err
