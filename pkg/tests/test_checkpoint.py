import numpy as np
import pytest

from oneshotid import checkpoint as ckpt
from oneshotid import layers as L
from oneshotid.capsules import CapsNet, Decoder, build_capsnet
from oneshotid.errors import FormatError
from oneshotid.rng import derive_rng
from oneshotid.tensor import Tensor


def small_stack(seed=3):
    layers = [
        L.Conv2d(2, 4, kernel=3, rng=derive_rng(seed, "c1")),
        L.Activation("relu"),
        L.MaxPool2d(2),
        L.Flatten(),
        L.Dense(4 * 3 * 3, 5, rng=derive_rng(seed, "d1")),
        L.Activation("leaky_relu", alpha=0.05),
        L.Dense(5, 2, rng=derive_rng(seed, "d2")),
    ]
    return L.LayerStack(layers, (2, 8, 8))


def tiny_capsnet(seed=7):
    enc = build_capsnet((12, 12, 1), n_classes=3, d_out=4, conv_channels=(8, 8),
                        kernels=(3, 3), strides=(1, 2), n_p=4, seed=seed)
    dec = Decoder(3, 4, (12, 12), sizes=(16,), seed=seed)
    return CapsNet(enc, dec, recon_threshold=0.02)


def test_stack_round_trip_params_and_outputs(tmp_path):
    stack = small_stack()
    path = tmp_path / "stack.ckpt"
    ckpt.save_model(path, stack)
    loaded = ckpt.load_model(path)

    assert isinstance(loaded, L.LayerStack)
    assert loaded.input_shape == stack.input_shape
    for (n1, p1), (n2, p2) in zip(stack.named_params(), loaded.named_params()):
        assert n1 == n2
        assert np.array_equal(p1.data, p2.data)

    x = Tensor(derive_rng(0, "x").normal(size=(3, 2, 8, 8)))
    assert np.array_equal(stack(x).data, loaded(x).data)


def test_stack_round_trip_preserves_layer_config(tmp_path):
    stack = small_stack()
    path = tmp_path / "stack.ckpt"
    ckpt.save_model(path, stack)
    loaded = ckpt.load_model(path)
    kinds = [l.kind for l in loaded.layers]
    assert kinds == [l.kind for l in stack.layers]
    assert loaded.layers[0].kernel == (3, 3)
    assert loaded.layers[5].alpha == 0.05


def test_capsnet_round_trip(tmp_path):
    model = tiny_capsnet()
    model.recon_loss = 0.011
    path = tmp_path / "caps.ckpt"
    ckpt.save_model(path, model)
    loaded = ckpt.load_model(path)

    assert isinstance(loaded, CapsNet)
    assert loaded.recon_threshold == model.recon_threshold
    assert loaded.recon_loss == model.recon_loss
    assert loaded.decoder.sizes == (16,)
    assert loaded.decoder.image_shape == (12, 12)

    x = Tensor(derive_rng(1, "img").uniform(size=(2, 1, 12, 12)))
    assert np.array_equal(model.encode(x).data, loaded.encode(x).data)
    assert np.array_equal(model.reconstruct(x).data, loaded.reconstruct(x).data)


def test_high_caps_routing_iters_survive(tmp_path):
    enc = build_capsnet((12, 12, 1), n_classes=2, d_out=3, conv_channels=(4, 4),
                        kernels=(3, 3), strides=(1, 2), n_p=2, routing_iters=5)
    path = tmp_path / "enc.ckpt"
    ckpt.save_model(path, enc)
    loaded = ckpt.load_model(path)
    assert loaded.layers[-1].routing_iters == 5


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(FormatError):
        ckpt.read_checkpoint(path)


def test_truncated_buffer_rejected(tmp_path):
    stack = small_stack()
    path = tmp_path / "stack.ckpt"
    ckpt.save_model(path, stack)
    raw = path.read_bytes()
    path.write_bytes(raw[:-10])
    with pytest.raises(FormatError):
        ckpt.read_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path):
    stack = small_stack()
    path = tmp_path / "stack.ckpt"
    ckpt.save_model(path, stack)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(FormatError):
        ckpt.read_checkpoint(path)


def test_unsupported_version_rejected(tmp_path):
    stack = small_stack()
    path = tmp_path / "stack.ckpt"
    ckpt.save_model(path, stack)
    raw = bytearray(path.read_bytes())
    raw[8] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        ckpt.read_checkpoint(path)


def test_float32_params_round_trip(tmp_path):
    stack = small_stack()
    for _, p in stack.named_params():
        p.data = p.data.astype(np.float32)
    path = tmp_path / "stack32.ckpt"
    ckpt.save_model(path, stack)
    loaded = ckpt.load_model(path)
    for (_, p1), (_, p2) in zip(stack.named_params(), loaded.named_params()):
        assert p2.data.dtype == np.float32
        assert np.array_equal(p1.data, p2.data)
