"""Generators and critics for StageI (text -> low-res voxels) and StageII
(low-res -> high-res voxels, variants v0 and v1).

All network functions are batched: embeddings are [B, 128], voxel grids are
[B, 4, R, R, R], critics return one score per sample, shape [B].

Layer plans (``c`` = base_channels, ``L`` = low_res; every strided layer is k4 s2 p1,
every hidden activation is leaky ReLU 0.2):

* stage1_gen: FC 128 -> c*(L/4)^3, reshape, deconv c->c, deconv c->c, 1x1x1 conv c->4,
  gated sigmoid head.
* stage1_critic: conv 4->c, conv c->2c, concat tiled t, conv k3 (2c+128)->2c, FC -> 1.
* stage2_gen_v0/v1: conv 4->c, conv c->2c, [v1: concat tiled t, conv k3 -> 2c],
  2 residual blocks, deconv 2c->2c, deconv 2c->c, deconv c->c (to 2L), 1x1x1 conv c->4,
  plus the logit of the 2x upsampled input, gated sigmoid head.
* critic_v0: conv 4->c on high, concat low, conv (c+4)->2c, conv 2c->2c, conv k3, FC -> 1.
* critic_v1: conv 4->c, conv c->2c, conv 2c->2c, concat tiled t, conv k3, FC -> 1.

Generators end in a gated head: every channel goes through a sigmoid and the color
channels are multiplied by occupancy, so empty space carries no color. Embeddings
are scaled by TEXT_SCALE wherever they enter a layer. Weights use Glorot-uniform
init with fans counted per output voxel (strided layers see fewer outputs).
"""
from __future__ import annotations

import io
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Parameter, ShapeError, Tensor

EMBED_DIM = 128
SLOPE = 0.2
# generator output bias (r, g, b, occupancy): sigmoid(-2) ~ 0.12 is close to the
# occupied fraction of real shapes
OUTPUT_BIAS = (0.0, 0.0, 0.0, -2.0)
# embeddings are unit-norm; rescaling to unit variance per component puts text on
# the same footing as voxel features when it enters a layer
TEXT_SCALE = float(np.sqrt(EMBED_DIM))
# StageII generators add logit(upsampled input) to their output logits; inputs are
# squeezed into [SKIP_EPS, 1 - SKIP_EPS] first so the logit stays finite
SKIP_EPS = 0.01

KINDS = ("stage1_gen", "stage1_critic", "stage2_gen_v0", "stage2_gen_v1", "critic_v0", "critic_v1")

CHECKPOINT_MAGIC = b"VFC1"


class CheckpointError(ValueError):
    pass


def _stride(k):
    # every k4 layer in the plans is stride 2; k3 and k1 layers are stride 1
    return 2 if k == 4 else 1


def _glorot(rng, shape, fan_in, fan_out, dtype):
    """Glorot-uniform with fans counted as the taps that actually connect one
    input to outputs (fan_out) and one output to inputs (fan_in)."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class NetworkSpec:
    """Layer topology plus parameters for one of the six network kinds."""

    def __init__(self, kind: str, base_channels: int = 16, low_res: int = 8, high_res: int | None = None,
                 seed: int = 0, dtype=np.float32):
        if kind not in KINDS:
            raise ValueError(f"unknown network kind {kind!r}")
        high_res = 2 * low_res if high_res is None else high_res
        if high_res != 2 * low_res:
            raise ValueError(f"high_res ({high_res}) must be 2 * low_res ({low_res})")
        if low_res < 4 or low_res % 4:
            raise ValueError(f"low_res must be a positive multiple of 4, got {low_res}")
        self.kind = kind
        self.base_channels = base_channels
        self.low_res = low_res
        self.high_res = high_res
        self.dtype = np.dtype(dtype)
        self.frozen = False
        self.params: dict[str, Parameter] = {}
        self._rng = np.random.default_rng(seed)
        getattr(self, f"_build_{kind}")()
        del self._rng

    # -- construction helpers ----------------------------------------------------
    def _conv(self, name, cin, cout, k, zero=False, bias=0.0):
        shape = (cout, cin, k, k, k)
        taps = k ** 3
        # a strided conv reaches each input from only taps / stride^3 outputs
        w = (np.zeros(shape, self.dtype) if zero
             else _glorot(self._rng, shape, cin * taps, cout * taps // _stride(k) ** 3, self.dtype))
        self.params[f"{name}.w"] = Parameter(w, f"{name}.w")
        self.params[f"{name}.b"] = Parameter(np.full(cout, bias, self.dtype), f"{name}.b")

    def _deconv(self, name, cin, cout, k):
        shape = (cin, cout, k, k, k)
        self.params[f"{name}.w"] = Parameter(
            _glorot(self._rng, shape, cin * k ** 3 // 8, cout * k ** 3, self.dtype), f"{name}.w")
        self.params[f"{name}.b"] = Parameter(np.zeros(cout, self.dtype), f"{name}.b")

    def _fc(self, name, n, m):
        self.params[f"{name}.w"] = Parameter(_glorot(self._rng, (n, m), n, m, self.dtype), f"{name}.w")
        self.params[f"{name}.b"] = Parameter(np.zeros(m, self.dtype), f"{name}.b")

    def _residual(self, name, ch):
        self._conv(f"{name}.conv1", ch, ch, 3)
        self._conv(f"{name}.conv2", ch, ch, 3, zero=True)

    def _build_stage1_gen(self):
        c, s = self.base_channels, self.low_res // 4
        self._fc("fc", EMBED_DIM, c * s ** 3)
        self._deconv("deconv1", c, c, 4)
        self._deconv("deconv2", c, c, 4)
        self._conv("out", c, 4, 1, bias=OUTPUT_BIAS)

    def _build_stage1_critic(self):
        c, s = self.base_channels, self.low_res // 4
        self._conv("conv1", 4, c, 4)
        self._conv("conv2", c, 2 * c, 4)
        self._conv("joint", 2 * c + EMBED_DIM, 2 * c, 3)
        self._fc("fc", 2 * c * s ** 3, 1)

    def _build_stage2_gen(self, with_text):
        c = self.base_channels
        self._conv("conv1", 4, c, 4)
        self._conv("conv2", c, 2 * c, 4)
        if with_text:
            self._conv("joint", 2 * c + EMBED_DIM, 2 * c, 3)
        self._residual("res1", 2 * c)
        self._residual("res2", 2 * c)
        self._deconv("deconv1", 2 * c, 2 * c, 4)
        self._deconv("deconv2", 2 * c, c, 4)
        self._deconv("deconv3", c, c, 4)
        self._conv("out", c, 4, 1)

    def _build_stage2_gen_v0(self):
        self._build_stage2_gen(False)

    def _build_stage2_gen_v1(self):
        self._build_stage2_gen(True)

    def _build_critic_v0(self):
        c, s = self.base_channels, self.low_res // 4
        self._conv("conv1", 4, c, 4)
        self._conv("conv2", c + 4, 2 * c, 4)
        self._conv("conv3", 2 * c, 2 * c, 4)
        self._conv("joint", 2 * c, 2 * c, 3)
        self._fc("fc", 2 * c * s ** 3, 1)

    def _build_critic_v1(self):
        c, s = self.base_channels, self.low_res // 4
        self._conv("conv1", 4, c, 4)
        self._conv("conv2", c, 2 * c, 4)
        self._conv("conv3", 2 * c, 2 * c, 4)
        self._conv("joint", 2 * c + EMBED_DIM, 2 * c, 3)
        self._fc("fc", 2 * c * s ** 3, 1)

    # -- public surface --------------------------------------------------------------
    @property
    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> "NetworkSpec":
        self.frozen = True
        return self

    def zero_grad(self) -> None:
        T.zero_grad(self.parameters)

    def arrays(self) -> list[np.ndarray]:
        return [p.data.copy() for p in self.parameters]

    def load_arrays(self, arrays) -> None:
        arrays = list(arrays)
        if len(arrays) != len(self.params):
            raise CheckpointError(f"{self.kind}: expected {len(self.params)} parameters, got {len(arrays)}")
        for p, a in zip(self.parameters, arrays):
            if a.shape != p.shape:
                raise CheckpointError(f"{self.kind}: parameter {p.name} shape {a.shape} != {p.shape}")
            p.data[...] = a

    def astype(self, dtype) -> "NetworkSpec":
        """A copy with parameters cast to ``dtype`` (float64 for gradient checks)."""
        other = NetworkSpec(self.kind, self.base_channels, self.low_res, self.high_res, dtype=dtype)
        other.load_arrays(self.arrays())
        other.frozen = self.frozen
        return other

    def __call__(self, *inputs):
        fn = {
            "stage1_gen": stage1_generate,
            "stage1_critic": stage1_critic,
            "stage2_gen_v0": stage2_generate_v0,
            "stage2_gen_v1": stage2_generate_v1,
            "critic_v0": critic_v0,
            "critic_v1": critic_v1,
        }[self.kind]
        return fn(self, *inputs)

    def __repr__(self) -> str:
        n = sum(p.size for p in self.parameters)
        return (f"NetworkSpec({self.kind}, base_channels={self.base_channels}, "
                f"low_res={self.low_res}, high_res={self.high_res}, params={n})")


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def _tensor(x, net: NetworkSpec) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=net.dtype))


def _expect(net: NetworkSpec, kind: str) -> None:
    if net.kind != kind:
        raise ValueError(f"expected a {kind} network, got {net.kind}")


def _expect_voxels(x: Tensor, res: int, what: str) -> None:
    if x.ndim != 5 or x.shape[1] != 4:
        raise ShapeError(f"{what}: expected voxels [B, 4, {res}, {res}, {res}], got {x.shape}")
    for i, ax in enumerate("DHW"):
        if x.shape[2 + i] != res:
            raise ShapeError(f"{what}: resolution mismatch on axis {ax}: {x.shape[2 + i]} != {res}")


def _expect_embedding(t: Tensor, what: str) -> None:
    if t.ndim != 2 or t.shape[1] != EMBED_DIM:
        raise ShapeError(f"{what}: expected embeddings [B, {EMBED_DIM}], got {t.shape}")


def _conv(net, name, x, stride=2, pad=1):
    return T.conv3d(x, net.params[f"{name}.w"], net.params[f"{name}.b"], stride=stride, pad=pad)


def _deconv(net, name, x):
    return T.deconv3d(x, net.params[f"{name}.w"], net.params[f"{name}.b"], stride=2, pad=1)


def _fc(net, name, x):
    return T.fully_connected(x, net.params[f"{name}.w"], net.params[f"{name}.b"])


def _act(x):
    return T.leaky_relu(x, SLOPE)


def spatial_tile_embedding(t, side: int) -> Tensor:
    """Copy each embedding to every cell of a side^3 grid: [B, 128] -> [B, 128, side, side, side].

    A 1-D [128] input yields [128, side, side, side].
    """
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.ndim == 1:
        return T.broadcast_to(T.reshape(t, (t.shape[0], 1, 1, 1)), (t.shape[0], side, side, side))
    b, n = t.shape
    return T.broadcast_to(T.reshape(t, (b, n, 1, 1, 1)), (b, n, side, side, side))


def residual_block(x: Tensor, params: dict[str, Parameter], prefix: str = "") -> Tensor:
    """x + F(x) with F = conv k3 -> leaky ReLU -> conv k3 (channel preserving)."""
    w1, b1 = params[f"{prefix}conv1.w"], params[f"{prefix}conv1.b"]
    w2, b2 = params[f"{prefix}conv2.w"], params[f"{prefix}conv2.b"]
    if w2.shape[0] != x.shape[1] or w1.shape[1] != x.shape[1]:
        raise ShapeError(f"residual_block: channel axis (1) has {x.shape[1]}, block expects {w1.shape[1]}")
    h = _act(T.conv3d(x, w1, b1, stride=1, pad=1))
    return T.add(x, T.conv3d(h, w2, b2, stride=1, pad=1))


def _res(net, name, x):
    return residual_block(x, net.params, f"{name}.")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def voxel_head(logits: Tensor) -> Tensor:
    """Sigmoid output whose color channels are gated by occupancy, matching the
    data convention that RGB is zero wherever a voxel is empty."""
    y = T.sigmoid(logits)
    occ = T.slice_axis(y, 1, 3, 4)
    return T.concat([T.mul(T.slice_axis(y, 1, 0, 3), occ), occ], axis=1)


def stage1_generate(g1: NetworkSpec, t) -> Tensor:
    _expect(g1, "stage1_gen")
    t = _tensor(t, g1)
    _expect_embedding(t, "stage1_generate")
    s = g1.low_res // 4
    h = _act(_fc(g1, "fc", T.mul(t, TEXT_SCALE)))
    h = T.reshape(h, (t.shape[0], g1.base_channels, s, s, s))
    h = _act(_deconv(g1, "deconv1", h))
    h = _act(_deconv(g1, "deconv2", h))
    return voxel_head(_conv(g1, "out", h, stride=1, pad=0))


def _score(net, h) -> Tensor:
    h = _act(_conv(net, "joint", h, stride=1, pad=1))
    h = T.reshape(h, (h.shape[0], -1))
    return T.reshape(_fc(net, "fc", h), (h.shape[0],))


def stage1_critic(d: NetworkSpec, s, t) -> Tensor:
    _expect(d, "stage1_critic")
    s, t = _tensor(s, d), _tensor(t, d)
    _expect_voxels(s, d.low_res, "stage1_critic")
    _expect_embedding(t, "stage1_critic")
    if s.shape[0] != t.shape[0]:
        raise ShapeError(f"stage1_critic: batch axis (0) differs: voxels {s.shape[0]}, text {t.shape[0]}")
    h = _act(_conv(d, "conv1", s))
    h = _act(_conv(d, "conv2", h))
    h = T.concat([h, spatial_tile_embedding(T.mul(t, TEXT_SCALE), h.shape[2])], axis=1)
    return _score(d, h)


def upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of [B, C, R, R, R]: each voxel becomes a 2^3 block."""
    b, c, d, h, w = x.shape
    y = T.reshape(x, (b, c, d, 1, h, 1, w, 1))
    y = T.broadcast_to(y, (b, c, d, 2, h, 2, w, 2))
    return T.reshape(y, (b, c, 2 * d, 2 * h, 2 * w))


def input_logits(low: Tensor) -> Tensor:
    p = T.add(T.mul(upsample2(low), 1.0 - 2.0 * SKIP_EPS), SKIP_EPS)
    return T.sub(T.log(p), T.log(T.sub(1.0, p)))


def _stage2(g2: NetworkSpec, low: Tensor, t: Tensor | None) -> Tensor:
    h = _act(_conv(g2, "conv1", low))
    h = _act(_conv(g2, "conv2", h))
    if t is not None:
        h = T.concat([h, spatial_tile_embedding(T.mul(t, TEXT_SCALE), h.shape[2])], axis=1)
        h = _act(_conv(g2, "joint", h, stride=1, pad=1))
    h = _res(g2, "res1", h)
    h = _res(g2, "res2", h)
    h = _act(_deconv(g2, "deconv1", h))
    h = _act(_deconv(g2, "deconv2", h))
    h = _act(_deconv(g2, "deconv3", h))
    # the network learns a residual on top of the upsampled input
    return voxel_head(T.add(_conv(g2, "out", h, stride=1, pad=0), input_logits(low)))


def stage2_generate_v0(g2: NetworkSpec, low) -> Tensor:
    _expect(g2, "stage2_gen_v0")
    low = _tensor(low, g2)
    _expect_voxels(low, g2.low_res, "stage2_generate_v0")
    return _stage2(g2, low, None)


def stage2_generate_v1(g2: NetworkSpec, low, t) -> Tensor:
    _expect(g2, "stage2_gen_v1")
    low, t = _tensor(low, g2), _tensor(t, g2)
    _expect_voxels(low, g2.low_res, "stage2_generate_v1")
    _expect_embedding(t, "stage2_generate_v1")
    return _stage2(g2, low, t)


def critic_v0(d: NetworkSpec, high, low) -> Tensor:
    _expect(d, "critic_v0")
    high, low = _tensor(high, d), _tensor(low, d)
    _expect_voxels(high, d.high_res, "critic_v0 (high)")
    _expect_voxels(low, d.low_res, "critic_v0 (low)")
    if high.shape[0] != low.shape[0]:
        raise ShapeError(f"critic_v0: batch axis (0) differs: high {high.shape[0]}, low {low.shape[0]}")
    h = _act(_conv(d, "conv1", high))
    h = T.concat([h, low], axis=1)
    h = _act(_conv(d, "conv2", h))
    h = _act(_conv(d, "conv3", h))
    return _score(d, h)


def critic_v1(d: NetworkSpec, t, high) -> Tensor:
    _expect(d, "critic_v1")
    t, high = _tensor(t, d), _tensor(high, d)
    _expect_voxels(high, d.high_res, "critic_v1")
    _expect_embedding(t, "critic_v1")
    if high.shape[0] != t.shape[0]:
        raise ShapeError(f"critic_v1: batch axis (0) differs: voxels {high.shape[0]}, text {t.shape[0]}")
    h = _act(_conv(d, "conv1", high))
    h = _act(_conv(d, "conv2", h))
    h = _act(_conv(d, "conv3", h))
    h = T.concat([h, spatial_tile_embedding(T.mul(t, TEXT_SCALE), h.shape[2])], axis=1)
    return _score(d, h)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(net: NetworkSpec) -> bytes:
    """"VFC1", u8 kind length + kind, u32 low_res, u32 high_res, u32 base_channels,
    u32 parameter count, then each parameter as a serialized tensor in declaration order."""
    fh = io.BytesIO()
    fh.write(CHECKPOINT_MAGIC)
    kind = net.kind.encode("ascii")
    fh.write(struct.pack("<B", len(kind)))
    fh.write(kind)
    fh.write(struct.pack("<IIII", net.low_res, net.high_res, net.base_channels, len(net.params)))
    for p in net.parameters:
        T.write_tensor(fh, p.data)
    return fh.getvalue()


def save_checkpoint(net: NetworkSpec, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path, expect_kind: str | None = None) -> NetworkSpec:
    try:
        with open(path, "rb") as fh:
            if fh.read(4) != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a network checkpoint")
            (n,) = struct.unpack("<B", fh.read(1))
            kind = fh.read(n).decode("ascii")
            low, high, base, count = struct.unpack("<IIII", fh.read(16))
            if kind not in KINDS:
                raise CheckpointError(f"{path}: unknown kind {kind!r}")
            if expect_kind is not None and kind != expect_kind:
                raise CheckpointError(f"{path}: checkpoint holds {kind}, expected {expect_kind}")
            net = NetworkSpec(kind, base, low, high)
            if count != len(net.params):
                raise CheckpointError(f"{path}: {count} parameters, {kind} needs {len(net.params)}")
            net.load_arrays([T.read_tensor(fh) for _ in range(count)])
            if fh.read(1):
                raise CheckpointError(f"{path}: trailing bytes")
    except (struct.error, T.TensorFormatError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return net
