"""Toy encoder-decoder networks and checkpoint persistence.

Both networks are small UNet-style models built from the engine primitives:
3x3 convs, 2x2 average-pool downsampling, 2x nearest upsampling and skip
concatenation. The kernel estimator has one decoder; the separation network
shares one encoder between a material decoder and a shading decoder, each
with its own skip connections.

Output activations encode the physics: softplus for quantities that must
stay positive (white-balance kernels, shading), sigmoid for paper material
in (0, 1). Softplus heads carry a bias offset so they start near 1.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import CheckpointMismatch, DataIoError, ShapeMismatch

LEAKY_SLOPE = 0.1
# softplus(x) == 1 at x = ln(e - 1); used to bias positive heads toward 1
SOFTPLUS_ONE = float(np.log(np.e - 1.0))


@dataclass(frozen=True)
class Head:
    name: str
    channels: int
    activation: str  # "softplus" | "sigmoid"


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_width: int = 8
    in_channels: int = 3
    heads: tuple = (Head("kernel", 3, "softplus"),)

    def __post_init__(self):
        if self.depth < 1 or self.base_width < 1:
            raise ValueError("depth and base_width must be >= 1")
        for h in self.heads:
            if h.activation not in ("softplus", "sigmoid"):
                raise ValueError(f"unknown activation {h.activation}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "base_width": self.base_width,
            "in_channels": self.in_channels,
            "heads": [[h.name, h.channels, h.activation] for h in self.heads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(depth=int(d["depth"]), base_width=int(d["base_width"]),
                   in_channels=int(d["in_channels"]),
                   heads=tuple(Head(n, int(c), a) for n, c, a in d["heads"]))


WB_CONFIG = NetConfig(heads=(Head("kernel", 3, "softplus"),))
SMT_CONFIG = NetConfig(heads=(Head("material", 3, "sigmoid"),
                              Head("shading", 1, "softplus")))


def _conv_shapes(cfg: NetConfig):
    """Yield (name, out_ch, in_ch) for every conv layer, in creation order."""
    widths = [cfg.base_width * 2 ** k for k in range(cfg.depth)]
    prev = cfg.in_channels
    for k, wd in enumerate(widths):
        yield f"enc{k}", wd, prev
        prev = wd
    yield "mid", widths[-1], widths[-1]
    for head in cfg.heads:
        prev = widths[-1]
        for k in reversed(range(cfg.depth)):
            yield f"{head.name}.dec{k}", widths[k], prev + widths[k]
            prev = widths[k]
        yield f"{head.name}.out", head.channels, prev


def init_params(cfg: NetConfig, seed: int) -> dict:
    """Fan-in-scaled uniform init, deterministic in the seed.

    Returns a name -> Tensor dict; biases start at zero except softplus
    heads, which start at the value that makes the activation output 1.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6E65]))
    params = {}
    for name, out_ch, in_ch in _conv_shapes(cfg):
        bound = 1.0 / np.sqrt(in_ch * 9)
        w = rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3))
        params[f"{name}.w"] = ad.Tensor(w.astype(np.float32), requires_grad=True)
        bias = np.zeros(out_ch, dtype=np.float32)
        head = _head_for(cfg, name)
        if head is not None and head.activation == "softplus":
            bias[:] = SOFTPLUS_ONE
        params[f"{name}.b"] = ad.Tensor(bias, requires_grad=True)
    return params


def _head_for(cfg: NetConfig, layer_name: str):
    for head in cfg.heads:
        if layer_name == f"{head.name}.out":
            return head
    return None


def param_count(params: dict) -> int:
    return sum(p.data.size for p in params.values())


def _check_input(cfg: NetConfig, x: ad.Tensor):
    if x.data.ndim != 4:
        raise ShapeMismatch(f"expected NCHW input, got {x.data.shape}")
    n, c, h, w = x.data.shape
    if c != cfg.in_channels:
        raise ShapeMismatch(f"expected {cfg.in_channels} channels, got {c}")
    if h % cfg.divisor or w % cfg.divisor:
        raise ShapeMismatch(
            f"spatial size {h}x{w} not divisible by {cfg.divisor}")


def _encode(params: dict, x: ad.Tensor, cfg: NetConfig):
    skips = []
    h = x
    for k in range(cfg.depth):
        h = ad.leaky_relu(ad.conv2d(h, params[f"enc{k}.w"], params[f"enc{k}.b"]),
                          LEAKY_SLOPE)
        skips.append(h)
        h = ad.avg_pool2(h)
    h = ad.leaky_relu(ad.conv2d(h, params["mid.w"], params["mid.b"]), LEAKY_SLOPE)
    return h, skips


def _decode(params: dict, bottom: ad.Tensor, skips, cfg: NetConfig, head: Head):
    h = bottom
    for k in reversed(range(cfg.depth)):
        h = ad.upsample2(h)
        h = ad.concat([h, skips[k]], axis=1)
        h = ad.leaky_relu(
            ad.conv2d(h, params[f"{head.name}.dec{k}.w"],
                      params[f"{head.name}.dec{k}.b"]), LEAKY_SLOPE)
    z = ad.conv2d(h, params[f"{head.name}.out.w"], params[f"{head.name}.out.b"])
    if head.activation == "softplus":
        return ad.softplus(z)
    return ad.sigmoid(z)


def unet_forward(params: dict, x: ad.Tensor, cfg: NetConfig) -> dict:
    """Run the network; returns a head-name -> Tensor dict."""
    _check_input(cfg, x)
    bottom, skips = _encode(params, x, cfg)
    return {head.name: _decode(params, bottom, skips, cfg, head)
            for head in cfg.heads}


def wbnet_forward(params: dict, image: ad.Tensor,
                  cfg: NetConfig = WB_CONFIG) -> ad.Tensor:
    """Estimate the per-pixel white-balance kernel (3ch, > 0) from an image."""
    return unet_forward(params, image, cfg)["kernel"]


def smtnet_forward(params: dict, wb_image: ad.Tensor,
                   cfg: NetConfig = SMT_CONFIG):
    """Estimate material (3ch in (0,1)) and shading (1ch > 0) maps.

    Both decoders consume the same encoder feature pyramid but own their
    weights, so perturbing one branch never changes the other's output.
    """
    out = unet_forward(params, wb_image, cfg)
    return out["material"], out["shading"]


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"DSCK"
_VERSION = 1


def save_checkpoint(path, role: str, cfg: NetConfig, params: dict,
                    opt_state: ad.AdamState | None = None,
                    step: int = 0, seed: int = 0):
    """Binary checkpoint: magic, version, JSON header, float32 LE payload.

    Saving, loading and saving again produces identical bytes.
    """
    tensors = {name: p.data for name, p in sorted(params.items())}
    if opt_state is not None:
        for name in sorted(params):
            if name in opt_state.m:
                tensors[f"adam.m.{name}"] = opt_state.m[name]
                tensors[f"adam.v.{name}"] = opt_state.v[name]
    header = {
        "role": role,
        "config": cfg.to_dict(),
        "step": int(step),
        "opt_step": int(opt_state.step) if opt_state is not None else 0,
        "seed": int(seed),
        "tensors": [[name, list(arr.shape)] for name, arr in tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", _VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        for _, arr in tensors.items():
            f.write(np.ascontiguousarray(arr).astype("<f4").tobytes())


def load_checkpoint(path, expect_role: str | None = None):
    """Load a checkpoint; returns (role, cfg, params, opt_state, step, seed)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataIoError(f"{path}: {exc}") from exc
    if raw[:4] != _MAGIC:
        raise CheckpointMismatch(f"{path}: bad magic")
    version = struct.unpack("<I", raw[4:8])[0]
    if version != _VERSION:
        raise CheckpointMismatch(f"{path}: unsupported version {version}")
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    if expect_role is not None and header["role"] != expect_role:
        raise CheckpointMismatch(
            f"{path}: role {header['role']!r}, expected {expect_role!r}")
    cfg = NetConfig.from_dict(header["config"])
    offset = 16 + hlen
    params = {}
    opt_state = ad.AdamState(step=int(header.get("opt_step", 0)))
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        arr = arr.reshape(shape).astype(np.float32)
        if name.startswith("adam.m."):
            opt_state.m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            opt_state.v[name[len("adam.v."):]] = arr.copy()
        else:
            params[name] = ad.Tensor(arr, requires_grad=True)
    return header["role"], cfg, params, opt_state, int(header["step"]), int(header["seed"])
