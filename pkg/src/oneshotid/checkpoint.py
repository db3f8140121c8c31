"""Model checkpoints: a little-endian container with a JSON manifest.

Layout: 8-byte magic, uint32 format version, uint64 manifest length, the
manifest as UTF-8 JSON, then each parameter's raw bytes in manifest
order.  The manifest records enough layer configuration to rebuild the
architecture without touching initializer seeds, so a load is exact.
"""

import json
import struct

import numpy as np

from . import capsules as caps
from . import layers as L
from .errors import FormatError
from .tensor import Tensor

_MAGIC = b"OSIDCKPT"
_VERSION = 1


def _layer_spec(layer):
    kind = layer.kind
    if kind == "conv":
        return {"kind": kind, "in_channels": layer.in_channels,
                "out_channels": layer.out_channels, "kernel": list(layer.kernel),
                "stride": list(layer.stride), "padding": layer.padding}
    if kind == "maxpool":
        return {"kind": kind, "window": list(layer.window), "stride": list(layer.stride)}
    if kind == "dense":
        return {"kind": kind, "in_features": layer.in_features,
                "out_features": layer.out_features}
    if kind == "act":
        return {"kind": kind, "name": layer.name, "alpha": layer.alpha}
    if kind == "flatten":
        return {"kind": kind}
    if kind == "primary_caps":
        return {"kind": kind, "n_p": layer.n_p}
    if kind == "high_caps":
        return {"kind": kind, "n_in": layer.n_in, "n_p": layer.n_p,
                "n_out": layer.n_out, "d_out": layer.d_out,
                "routing_iters": layer.routing_iters}
    raise FormatError(f"layer kind {kind!r} has no checkpoint spec")


def _build_layer(spec):
    kind = spec["kind"]
    if kind == "conv":
        return L.Conv2d(spec["in_channels"], spec["out_channels"],
                        kernel=tuple(spec["kernel"]), stride=tuple(spec["stride"]),
                        padding=spec["padding"])
    if kind == "maxpool":
        return L.MaxPool2d(window=tuple(spec["window"]), stride=tuple(spec["stride"]))
    if kind == "dense":
        return L.Dense(spec["in_features"], spec["out_features"])
    if kind == "act":
        return L.Activation(spec["name"], alpha=spec["alpha"])
    if kind == "flatten":
        return L.Flatten()
    if kind == "primary_caps":
        return caps.PrimaryCapsuleLayer(spec["n_p"])
    if kind == "high_caps":
        return caps.HighLevelCapsuleLayer(spec["n_in"], spec["n_p"], spec["n_out"],
                                          spec["d_out"], spec["routing_iters"])
    raise FormatError(f"unknown layer kind {kind!r} in checkpoint")


def _stack_manifest(stack):
    return {
        "layers": [_layer_spec(l) for l in stack.layers],
        "input_shape": list(stack.input_shape),
    }


def _stack_params(stack):
    return stack.named_params()


def write_checkpoint(path, manifest, named_arrays):
    """Low-level writer; ``named_arrays`` is a list of (name, ndarray)."""
    manifest = dict(manifest)
    manifest["params"] = [
        {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str.replace(">", "<")}
        for name, arr in named_arrays
    ]
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<IQ", _VERSION, len(blob)))
        f.write(blob)
        for _, arr in named_arrays:
            f.write(np.ascontiguousarray(arr).astype(arr.dtype.str.replace(">", "<")).tobytes())


def read_checkpoint(path):
    """Inverse of write_checkpoint: returns (manifest, list of (name, array))."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != _MAGIC:
            raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
        head = f.read(12)
        if len(head) < 12:
            raise FormatError(f"{path}: truncated header")
        version, mlen = struct.unpack("<IQ", head)
        if version != _VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        blob = f.read(mlen)
        if len(blob) < mlen:
            raise FormatError(f"{path}: truncated manifest")
        try:
            manifest = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{path}: bad manifest: {exc}") from exc
        arrays = []
        for spec in manifest.get("params", []):
            dtype = np.dtype(spec["dtype"])
            count = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = f.read(count * dtype.itemsize)
            if len(raw) < count * dtype.itemsize:
                raise FormatError(f"{path}: truncated buffer for {spec['name']}")
            arrays.append((spec["name"], np.frombuffer(raw, dtype=dtype).reshape(spec["shape"])))
        if f.read(1):
            raise FormatError(f"{path}: trailing bytes after parameter buffers")
    return manifest, arrays


def _load_into(stack, named_arrays, prefix=""):
    expected = {name: p for name, p in stack.named_params()}
    for name, arr in named_arrays:
        if prefix:
            if not name.startswith(prefix):
                continue
            name = name[len(prefix):]
        if name not in expected:
            raise FormatError(f"checkpoint parameter {name!r} has no home in the model")
        p = expected.pop(name)
        if tuple(arr.shape) != tuple(p.data.shape):
            raise FormatError(
                f"parameter {name!r} shape {arr.shape} does not match model {p.data.shape}"
            )
        p.data = np.array(arr, copy=True)
    if expected:
        raise FormatError(f"checkpoint missing parameters: {sorted(expected)}")


def save_model(path, model, extra=None):
    """Serialize a LayerStack or a capsule model with its architecture.

    ``extra`` is an optional JSON-compatible dict stored verbatim in the
    manifest, for callers that wrap models (merge mode, margin, chosen
    threshold, ...).
    """
    if isinstance(model, caps.CapsNet):
        manifest = {
            "model": "capsnet",
            "encoder": _stack_manifest(model.encoder),
            "decoder": {
                "n_classes": model.decoder.n_classes,
                "d_out": model.decoder.d_out,
                "image_shape": list(model.decoder.image_shape),
                "sizes": list(model.decoder.sizes),
            },
            "recon_threshold": model.recon_threshold,
            "recon_loss": model.recon_loss,
        }
        named = [("encoder." + n, p.data) for n, p in model.encoder.named_params()]
        named += [("decoder." + n, p.data) for n, p in model.decoder.named_params()]
    elif isinstance(model, L.LayerStack):
        manifest = {"model": "stack", "stack": _stack_manifest(model)}
        named = [(n, p.data) for n, p in _stack_params(model)]
    else:
        raise FormatError(f"cannot checkpoint a {type(model).__name__}")
    if extra is not None:
        manifest["extra"] = dict(extra)
    write_checkpoint(path, manifest, named)


def load_model(path):
    """Rebuild the model saved by save_model, parameters included."""
    manifest, arrays = read_checkpoint(path)
    kind = manifest.get("model")
    if kind == "stack":
        spec = manifest["stack"]
        stack = L.LayerStack([_build_layer(s) for s in spec["layers"]],
                             tuple(spec["input_shape"]))
        _load_into(stack, arrays)
        return stack
    if kind == "capsnet":
        enc_spec = manifest["encoder"]
        encoder = L.LayerStack([_build_layer(s) for s in enc_spec["layers"]],
                               tuple(enc_spec["input_shape"]))
        d = manifest["decoder"]
        decoder = caps.Decoder(d["n_classes"], d["d_out"], tuple(d["image_shape"]),
                               sizes=tuple(d["sizes"]))
        _load_into(encoder, arrays, prefix="encoder.")
        _load_into(decoder.stack, arrays, prefix="decoder.")
        model = caps.CapsNet(encoder, decoder, recon_threshold=manifest["recon_threshold"])
        model.recon_loss = manifest["recon_loss"]
        return model
    raise FormatError(f"{path}: unknown model kind {kind!r}")
