"""Neural base-material field: Fourier positional encoding followed by a ReLU MLP.

Forward and reverse passes are written out by hand so gradients can be
checked against finite differences and reduced in a fixed order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_MAGIC = b"NBMFCKPT"


class StaleCacheError(RuntimeError):
    """A forward cache was reused after the parameters changed."""


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class EncodingConfig:
    d_freq: int = 8
    include_raw: bool = False
    n_coords: int = 2

    def __post_init__(self):
        if self.d_freq < 1:
            raise ValueError("d_freq must be >= 1")
        if self.n_coords not in (2, 3):
            raise ValueError("n_coords must be 2 or 3")

    @property
    def width(self) -> int:
        return self.n_coords * 2 * self.d_freq + (self.n_coords if self.include_raw else 0)


def encode(x, cfg: EncodingConfig) -> np.ndarray:
    """Map normalised coordinates ``(B, n_coords)`` to ``(B, cfg.width)`` features.

    Per coordinate ``p`` the features are ``sin(2^j pi p), cos(2^j pi p)`` for
    ``j = 0..D-1``, interleaved; raw coordinates (if enabled) come first.
    """
    x = np.asarray(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != cfg.n_coords:
        raise ValueError(f"expected {cfg.n_coords} coordinates, got {x.shape[-1]}")
    if np.any(np.abs(x) > 1.0 + 1e-12):
        raise ValueError("coordinates must be normalised to [-1, 1]")
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    freqs = (np.pi * 2.0 ** np.arange(cfg.d_freq)).astype(dtype)
    ang = x[:, :, None] * freqs                       # (B, C, D)
    sc = np.empty(ang.shape + (2,), dtype=dtype)
    np.sin(ang, out=sc[..., 0])
    np.cos(ang, out=sc[..., 1])
    feats = sc.reshape(x.shape[0], -1)
    if cfg.include_raw:
        feats = np.concatenate([x.astype(dtype), feats], axis=1)
    return feats


@dataclass
class Layer:
    weight: np.ndarray   # (fan_in, fan_out)
    bias: np.ndarray     # (fan_out,)
    activation: str = "relu"


@dataclass
class NeuralField:
    """Coordinate network ``x (mm) -> M densities``.

    ``skip_at`` lists layer indices whose input is the previous activation
    concatenated with the encoded coordinates.
    """

    enc: EncodingConfig
    layers: list
    skip_at: tuple
    n_materials: int
    fov_radius: float
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        self.skip_at = tuple(sorted(self.skip_at))
        width = self.enc.width
        for i, layer in enumerate(self.layers):
            fan_in = width + (self.enc.width if i in self.skip_at else 0)
            if layer.weight.shape[0] != fan_in or layer.bias.shape != (layer.weight.shape[1],):
                raise ValueError(f"layer {i}: weight {layer.weight.shape} does not chain (expected fan-in {fan_in})")
            if layer.activation not in ("relu", "linear"):
                raise ValueError(f"unknown activation {layer.activation!r}")
            width = layer.weight.shape[1]
        if width != self.n_materials:
            raise ValueError(f"output width {width} != n_materials {self.n_materials}")
        if any(s <= 0 or s >= len(self.layers) for s in self.skip_at):
            raise ValueError("skip layers must be interior layer indices")

    @property
    def dtype(self):
        return self.layers[0].weight.dtype

    def params(self) -> list:
        """Parameter arrays in checkpoint order ``W0, b0, W1, b1, ...`` (views)."""
        return [a for layer in self.layers for a in (layer.weight, layer.bias)]

    def n_params(self) -> int:
        return sum(a.size for a in self.params())

    def bump(self) -> None:
        """Record a parameter change so older forward caches are rejected."""
        self.version += 1

    def astype(self, dtype) -> "NeuralField":
        layers = [Layer(l.weight.astype(dtype), l.bias.astype(dtype), l.activation) for l in self.layers]
        return NeuralField(self.enc, layers, self.skip_at, self.n_materials, self.fov_radius)

    def copy(self) -> "NeuralField":
        return self.astype(self.dtype)

    def architecture(self) -> dict:
        return {"encoding": {"d_freq": self.enc.d_freq, "include_raw": self.enc.include_raw,
                             "n_coords": self.enc.n_coords},
                "layers": [[int(l.weight.shape[0]), int(l.weight.shape[1]), l.activation]
                           for l in self.layers],
                "skip_at": list(self.skip_at), "n_materials": self.n_materials}

    def architecture_hash(self) -> str:
        blob = json.dumps(self.architecture(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def normalize(self, points) -> np.ndarray:
        """Scale mm coordinates by the FOV radius and clip into ``[-1, 1]``."""
        pts = np.asarray(points)[..., : self.enc.n_coords] / self.fov_radius
        return np.clip(pts, -1.0, 1.0)

    def eval(self, points) -> np.ndarray:
        return field_eval(self, points)


def init_field(enc: EncodingConfig, hidden: tuple = (256,) * 8, skip_at: tuple = (4,),
               n_materials: int = 2, fov_radius: float = 1.0, seed: int = 0,
               dtype=np.float64, head_scale: float = 1.0) -> NeuralField:
    """He-uniform initialised field with zero biases.

    ``head_scale`` multiplies the initial weights of the linear output layer.
    """
    rng = np.random.default_rng(seed)
    widths = list(hidden) + [n_materials]
    layers, fan_prev = [], enc.width
    for i, w in enumerate(widths):
        fan_in = fan_prev + (enc.width if i in skip_at else 0)
        lim = np.sqrt(6.0 / fan_in)
        W = rng.uniform(-lim, lim, size=(fan_in, w))
        last = i == len(widths) - 1
        if last:
            W *= head_scale
        layers.append(Layer(W.astype(dtype), np.zeros(w, dtype=dtype), "linear" if last else "relu"))
        fan_prev = w
    return NeuralField(enc, layers, tuple(skip_at), n_materials, fov_radius)


@dataclass
class ForwardCache:
    field_id: int
    version: int
    inputs: list     # input matrix of each layer
    outputs: list    # post-activation output of each layer


def mlp_forward(fld: NeuralField, features) -> tuple[np.ndarray, ForwardCache]:
    features = np.asarray(features, dtype=fld.dtype)
    if features.ndim != 2 or features.shape[1] != fld.enc.width:
        raise ValueError(f"features must have shape (B, {fld.enc.width}), got {features.shape}")
    inputs, outputs = [], []
    h = features
    for i, layer in enumerate(fld.layers):
        x = np.concatenate([h, features], axis=1) if i in fld.skip_at else h
        z = x @ layer.weight
        z += layer.bias
        if layer.activation == "relu":
            np.maximum(z, 0, out=z)
        inputs.append(x)
        outputs.append(z)
        h = z
    return h, ForwardCache(id(fld), fld.version, inputs, outputs)


@dataclass
class GradientBundle:
    """Per-layer ``(d_weight, d_bias)`` pairs congruent with a field."""

    grads: list

    def params(self) -> list:
        return [a for pair in self.grads for a in pair]

    def __add__(self, other: "GradientBundle") -> "GradientBundle":
        return GradientBundle([(a + c, b + d) for (a, b), (c, d) in zip(self.grads, other.grads)])

    def scaled(self, s: float) -> "GradientBundle":
        return GradientBundle([(a * s, b * s) for a, b in self.grads])

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.params()])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.params())

    @classmethod
    def zeros_like(cls, fld: NeuralField) -> "GradientBundle":
        return cls([(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in fld.layers])


def mlp_backward(fld: NeuralField, cache: ForwardCache, upstream) -> GradientBundle:
    """Gradients of ``sum(upstream * output)`` with respect to every parameter.

    The ReLU derivative at exactly zero is taken as zero.
    """
    if cache.field_id != id(fld) or cache.version != fld.version:
        raise StaleCacheError("forward cache does not belong to the current parameters")
    g = np.asarray(upstream, dtype=fld.dtype)
    if g.shape != cache.outputs[-1].shape:
        raise ValueError(f"upstream shape {g.shape} != output shape {cache.outputs[-1].shape}")
    grads = [None] * len(fld.layers)
    for i in range(len(fld.layers) - 1, -1, -1):
        layer = fld.layers[i]
        if layer.activation == "relu":
            g = np.multiply(g, cache.outputs[i] > 0, out=g if g.flags.writeable else None)
        grads[i] = (cache.inputs[i].T @ g, g.sum(axis=0))
        if i > 0:
            g = g @ layer.weight.T
            if i in fld.skip_at:
                g = g[:, : cache.outputs[i - 1].shape[1]]
    return GradientBundle(grads)


def field_forward(fld: NeuralField, points) -> tuple[np.ndarray, ForwardCache]:
    """Normalise, encode and run the MLP, keeping the cache for :func:`mlp_backward`."""
    pts = np.asarray(points)
    flat = fld.normalize(pts.reshape(-1, pts.shape[-1])).astype(fld.dtype, copy=False)
    out, cache = mlp_forward(fld, encode(flat, fld.enc))
    return out.reshape(pts.shape[:-1] + (fld.n_materials,)), cache


def field_eval(fld: NeuralField, points, chunk: int = 65536) -> np.ndarray:
    pts = np.asarray(points)
    flat = pts.reshape(-1, pts.shape[-1])
    out = np.empty((flat.shape[0], fld.n_materials), dtype=fld.dtype)
    for s in range(0, flat.shape[0], chunk):
        out[s:s + chunk] = field_forward(fld, flat[s:s + chunk])[0]
    return out.reshape(pts.shape[:-1] + (fld.n_materials,))


def save_checkpoint(fld: NeuralField, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, header length, JSON header, float64 LE parameter blocks."""
    header = {"architecture": fld.architecture(), "arch_hash": fld.architecture_hash(),
              "fov_radius": fld.fov_radius, "dtype": np.dtype(fld.dtype).name,
              "shapes": [list(a.shape) for a in fld.params()], **(extra or {})}
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for a in fld.params():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint_header(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(len(_MAGIC)) != _MAGIC:
            raise CheckpointError(f"{path}: not a field checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        return json.loads(fh.read(n))


def _parse_checkpoint(raw: bytes):
    off = len(_MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    header = json.loads(raw[off + 4: off + 4 + n])
    off += 4 + n
    arch = header["architecture"]
    dtype = np.dtype(header.get("dtype", "float64"))
    layers = []
    for fan_in, fan_out, act in arch["layers"]:
        W = np.frombuffer(raw, "<f8", fan_in * fan_out, off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(raw, "<f8", fan_out, off)
        off += 8 * fan_out
        layers.append(Layer(W.astype(dtype), b.astype(dtype), act))
    return header, (layers if off == len(raw) else None)


def load_checkpoint(path, expected_hash: str | None = None) -> NeuralField:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise CheckpointError(f"{path}: not a field checkpoint")
    try:
        header, layers = _parse_checkpoint(raw)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from None
    if layers is None:
        raise CheckpointError(f"{path}: size does not match the header")
    arch = header["architecture"]
    enc = EncodingConfig(**arch["encoding"])
    fld = NeuralField(enc, layers, tuple(arch["skip_at"]), arch["n_materials"], header["fov_radius"])
    if fld.architecture_hash() != header["arch_hash"]:
        raise CheckpointError(f"{path}: architecture hash mismatch")
    if expected_hash is not None and expected_hash != header["arch_hash"]:
        raise CheckpointError(f"{path}: architecture {header['arch_hash']} != expected {expected_hash}")
    return fld
