"""MLP encoder/decoder construction, initialization, and reparameterization.

An encoder is a shared trunk followed by separate mean and log-variance
heads; the decoder mirrors the trunk in reverse. Initialization uses a
counter-based Philox stream so a single seed reproduces every parameter
bit-exactly, across ensemble members and platforms.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

FAMILIES = ("gaussian", "bernoulli")

_MAGIC = b"SSADVAE1"

# init/noise streams hanging off one member seed
STREAM_INIT = 0
STREAM_ENCODER = 1
STREAM_DECODER = 2
STREAM_SHUFFLE = 3
STREAM_NOISE = 4
STREAM_SCORE = 5


def philox_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Deterministic counter-based generator for (seed, stream)."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(stream)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (hidden... , latent), activation tag and bias switch."""

    widths: tuple
    activation: str = "leaky-relu"
    leak: float = 0.1
    use_bias: bool = True

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("need at least one hidden layer plus the latent width")
        if any(int(w) < 1 for w in self.widths):
            raise ValueError(f"all widths must be >= 1, got {self.widths}")
        if self.activation not in ("leaky-relu", "relu", "sigmoid"):
            raise ValueError(f"unsupported activation {self.activation!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def latent_dim(self) -> int:
        return self.widths[-1]

    @property
    def hidden(self) -> tuple:
        return self.widths[:-1]

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activation": self.activation,
                "leak": self.leak, "use_bias": self.use_bias}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(widths=tuple(d["widths"]), activation=d["activation"],
                   leak=d["leak"], use_bias=d["use_bias"])


def _activate(spec: MlpSpec, h: Tensor) -> Tensor:
    if spec.activation == "leaky-relu":
        return gc.leaky_relu(h, spec.leak)
    if spec.activation == "relu":
        return gc.relu(h)
    return gc.sigmoid(h)


def _init_layer(rng: np.random.Generator, fan_in: int, fan_out: int,
                use_bias: bool) -> tuple:
    bound = 1.0 / np.sqrt(fan_in)
    w = gc.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    b = gc.parameter(np.zeros(fan_out)) if use_bias else None
    return w, b


def init_mlp(spec: MlpSpec, in_dim: int, seed: int) -> tuple:
    """Plain MLP parameters (weights, biases) for in_dim -> widths chain."""
    rng = philox_rng(seed, STREAM_INIT)
    ws, bs = [], []
    prev = in_dim
    for width in spec.widths:
        w, b = _init_layer(rng, prev, width, spec.use_bias)
        ws.append(w)
        bs.append(b)
        prev = width
    return ws, bs


@dataclass
class EncoderParams:
    spec: MlpSpec
    in_dim: int
    trunk_w: list
    trunk_b: list
    mu_w: Tensor
    mu_b: Optional[Tensor]
    logvar_w: Tensor
    logvar_b: Optional[Tensor]

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.trunk_w, self.trunk_b):
            out.append(w)
            if b is not None:
                out.append(b)
        out.append(self.mu_w)
        if self.mu_b is not None:
            out.append(self.mu_b)
        out.append(self.logvar_w)
        if self.logvar_b is not None:
            out.append(self.logvar_b)
        return out


@dataclass
class DecoderParams:
    spec: MlpSpec
    out_dim: int
    ws: list
    bs: list
    family: str = "gaussian"

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    def tensors(self) -> list:
        out = []
        for w, b in zip(self.ws, self.bs):
            out.append(w)
            if b is not None:
                out.append(b)
        return out

    def detached(self) -> "DecoderParams":
        """Same buffers, no gradient flow: the frozen-decoder view."""
        return DecoderParams(
            spec=self.spec, out_dim=self.out_dim,
            ws=[w.detach() for w in self.ws],
            bs=[None if b is None else b.detach() for b in self.bs],
            family=self.family)


@dataclass
class GaussianPosterior:
    """Per-sample mean and diagonal log-variance from the encoder."""

    mu: Tensor
    logvar: Tensor

    @property
    def batch(self) -> int:
        return self.mu.shape[0]

    @property
    def dim(self) -> int:
        return self.mu.shape[1]


def init_encoder(spec: MlpSpec, in_dim: int, seed: int) -> EncoderParams:
    rng = philox_rng(seed, STREAM_ENCODER)
    trunk_w, trunk_b = [], []
    prev = in_dim
    for width in spec.hidden:
        w, b = _init_layer(rng, prev, width, spec.use_bias)
        trunk_w.append(w)
        trunk_b.append(b)
        prev = width
    mu_w, mu_b = _init_layer(rng, prev, spec.latent_dim, spec.use_bias)
    logvar_w, logvar_b = _init_layer(rng, prev, spec.latent_dim, spec.use_bias)
    return EncoderParams(spec, in_dim, trunk_w, trunk_b,
                         mu_w, mu_b, logvar_w, logvar_b)


def init_decoder(spec: MlpSpec, out_dim: int, seed: int,
                 family: str = "gaussian") -> DecoderParams:
    """Decoder mirroring the encoder: latent -> reversed hidden -> out_dim."""
    if family not in FAMILIES:
        raise ValueError(f"unknown likelihood family {family!r}")
    rng = philox_rng(seed, STREAM_DECODER)
    widths = list(reversed(spec.hidden)) + [out_dim]
    ws, bs = [], []
    prev = spec.latent_dim
    for width in widths:
        w, b = _init_layer(rng, prev, width, spec.use_bias)
        ws.append(w)
        bs.append(b)
        prev = width
    return DecoderParams(spec, out_dim, ws, bs, family)


def _affine(h: Tensor, w: Tensor, b: Optional[Tensor]) -> Tensor:
    out = gc.matmul(h, w)
    return out if b is None else gc.add(out, b)


def encode(params: EncoderParams, x) -> GaussianPosterior:
    """Forward the encoder; log-variance is clamped to [-10, 10]."""
    xt = x if isinstance(x, Tensor) else gc.constant(x)
    if xt.data.ndim != 2 or xt.data.shape[1] != params.in_dim:
        raise ValueError(
            f"encoder expects (batch, {params.in_dim}) input, got {xt.data.shape}")
    if not np.isfinite(xt.data).all():
        raise ValueError("non-finite input row rejected before forward pass")
    h = xt
    for w, b in zip(params.trunk_w, params.trunk_b):
        h = _activate(params.spec, _affine(h, w, b))
    mu = _affine(h, params.mu_w, params.mu_b)
    logvar = gc.clamp(_affine(h, params.logvar_w, params.logvar_b),
                      LOGVAR_MIN, LOGVAR_MAX)
    return GaussianPosterior(mu, logvar)


def reparameterize(post: GaussianPosterior, noise) -> Tensor:
    """z = mu + exp(logvar/2) * noise; gradient reaches mu and logvar only."""
    eps = noise if isinstance(noise, Tensor) else gc.constant(noise)
    if eps.data.shape != post.mu.data.shape:
        raise ValueError(
            f"noise shape {eps.data.shape} != posterior shape {post.mu.data.shape}")
    std = gc.exp(gc.mul(post.logvar, 0.5))
    return gc.add(post.mu, gc.mul(std, eps.detach() if eps.requires_grad else eps))


def decode(params: DecoderParams, z) -> Tensor:
    """Forward the decoder; returns raw means (gaussian) or logits (bernoulli)."""
    zt = z if isinstance(z, Tensor) else gc.constant(z)
    if zt.data.ndim != 2 or zt.data.shape[1] != params.latent_dim:
        raise ValueError(
            f"decoder expects (batch, {params.latent_dim}) latents, got {zt.data.shape}")
    h = zt
    last = len(params.ws) - 1
    for i, (w, b) in enumerate(zip(params.ws, params.bs)):
        h = _affine(h, w, b)
        if i != last:
            h = _activate(params.spec, h)
    return h


# ---------------------------------------------------------------------------
# serialization: flat binary container + JSON sidecar

def write_arrays(path, arrays) -> None:
    """magic | u32 count | per array: u32 ndim, u32 dims..., f64 row-major."""
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for arr in arrays:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_arrays(path) -> list:
    with open(path, "rb") as fh:
        magic = fh.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        (count,) = struct.unpack("<I", fh.read(4))
        arrays = []
        for _ in range(count):
            (ndim,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            n = int(np.prod(shape)) if ndim else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ValueError(f"{path}: truncated array data")
            arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    return arrays


def save_params(path_bin, path_json, enc: EncoderParams, dec: DecoderParams) -> None:
    """Encoder then decoder buffers in declaration order, plus a JSON sidecar."""
    arrays = [t.data for t in enc.tensors()] + [t.data for t in dec.tensors()]
    write_arrays(path_bin, arrays)
    sidecar = {
        "spec": enc.spec.to_dict(),
        "in_dim": enc.in_dim,
        "out_dim": dec.out_dim,
        "family": dec.family,
        "n_encoder_arrays": len(enc.tensors()),
        "n_decoder_arrays": len(dec.tensors()),
    }
    with open(path_json, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_params(path_bin, path_json) -> tuple:
    with open(path_json, "r", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    spec = MlpSpec.from_dict(sidecar["spec"])
    enc = init_encoder(spec, sidecar["in_dim"], seed=0)
    dec = init_decoder(spec, sidecar["out_dim"], seed=0, family=sidecar["family"])
    arrays = read_arrays(path_bin)
    slots = enc.tensors() + dec.tensors()
    if len(arrays) != len(slots):
        raise ValueError(
            f"{path_bin}: expected {len(slots)} arrays, found {len(arrays)}")
    for slot, arr in zip(slots, arrays):
        if slot.data.shape != arr.shape:
            raise ValueError(
                f"{path_bin}: shape mismatch {arr.shape} vs {slot.data.shape}")
        slot.data = arr
    return enc, dec
