"""Model builders, forward execution and checkpoint serialisation.

Two architectures share one representation: a ``Network`` is a config, an
ordered name -> parameter map, and an explicit layer plan (a flat list of
instructions run against a value register plus a skip stack). Keeping the
plan explicit makes structural assertions cheap (e.g. where the coordinate
augmentation sits) and lets checkpoints store parameters only, with the plan
rebuilt from the config.

Plan instructions:
    ("coord",)                  append normalised x/y coordinate channels
    ("conv", name, stride, pad) conv with params name.w / name.b
    ("relu",) ("sigmoid",)      activations
    ("push",)                   push current value on the skip stack
    ("pool",) ("up",)           2x2 maxpool / nearest x2 upsample
    ("cat",)                    concat current with popped skip (current first)
    ("res", name)               add relu(1x1 conv of popped value) to current
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .rng import mix64

UNET_COORD = "unet-coord"
U2NET_LITE = "u2net-lite"


@dataclass
class ModelConfig:
    variant: str
    input_size: tuple[int, int] = (64, 64)
    input_channels: int = 1
    base_channels: int = 8
    depth: int = 3
    rsu_inner_depth: int = 2
    output_head: str = ""
    coord_every_level: bool = False

    def __post_init__(self):
        if self.variant not in (UNET_COORD, U2NET_LITE):
            raise ValueError(f"unknown variant {self.variant!r}")
        self.input_size = (int(self.input_size[0]), int(self.input_size[1]))
        h, w = self.input_size
        if self.base_channels < 1 or self.depth < 2:
            raise ValueError(
                f"need base_channels >= 1 and depth >= 2, got {self.base_channels}, {self.depth}"
            )
        div = 2**self.depth
        if h % div or w % div:
            raise ValueError(f"input size {h}x{w} must be divisible by 2^depth = {div}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.rsu_inner_depth < 1:
            raise ValueError("rsu_inner_depth must be >= 1")
        forced = "linear" if self.variant == UNET_COORD else "sigmoid"
        if self.output_head and self.output_head != forced:
            raise ValueError(f"variant {self.variant} forces output_head={forced!r}")
        self.output_head = forced


class Network:
    """Config + ordered parameters + layer plan. See module docstring."""

    def __init__(self, config: ModelConfig, params: dict[str, T.Tensor], plan: list[tuple]):
        self.config = config
        self.params = params
        self.plan = plan

    def parameters(self) -> list[T.Tensor]:
        return list(self.params.values())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def cast(self, dtype) -> "Network":
        """Copy with parameters in another dtype (float64 for grad oracles)."""
        params = {
            k: T.Tensor(p.data.astype(dtype), requires_grad=True) for k, p in self.params.items()
        }
        return Network(self.config, params, self.plan)


class _Builder:
    """Accumulates plan instructions and He-initialised parameters."""

    def __init__(self, in_channels: int, seed: int):
        self.plan: list[tuple] = []
        self.params: dict[str, T.Tensor] = {}
        self.ch = in_channels
        self.ch_stack: list[int] = []
        self.seed = seed
        self._n = 0

    def _new_conv_params(self, name: str, cin: int, cout: int, k: int) -> None:
        fan_in = cin * k * k
        self.params[name + ".w"] = T.he_init((cout, cin, k, k), fan_in, mix64(self.seed, self._n))
        self.params[name + ".b"] = T.Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self._n += 1

    def coord(self):
        self.plan.append(("coord",))
        self.ch += 2

    def conv(self, name: str, cout: int, k: int = 3):
        self._new_conv_params(name, self.ch, cout, k)
        self.plan.append(("conv", name, 1, k // 2))
        self.ch = cout

    def relu(self):
        self.plan.append(("relu",))

    def sigmoid(self):
        self.plan.append(("sigmoid",))

    def push(self):
        self.plan.append(("push",))
        self.ch_stack.append(self.ch)

    def pool(self):
        self.plan.append(("pool",))

    def up(self):
        self.plan.append(("up",))

    def cat(self):
        self.plan.append(("cat",))
        self.ch += self.ch_stack.pop()

    def res(self, name: str, cout: int):
        cin = self.ch_stack.pop()
        self._new_conv_params(name, cin, cout, 1)
        self.plan.append(("res", name))


def build_unet_coord(config: ModelConfig, seed: int) -> Network:
    """U-shaped heatmap regressor with coordinate channels ahead of the
    first convolution (optionally ahead of every encoder level)."""
    if config.variant != UNET_COORD:
        raise ValueError(f"config variant is {config.variant!r}, expected {UNET_COORD!r}")
    b = _Builder(config.input_channels, seed)
    base, depth = config.base_channels, config.depth
    if not config.coord_every_level:
        b.coord()
    for lvl in range(depth):
        if config.coord_every_level:
            b.coord()
        cout = base * 2**lvl
        b.conv(f"enc{lvl}a", cout)
        b.relu()
        b.conv(f"enc{lvl}b", cout)
        b.relu()
        if lvl < depth - 1:
            b.push()
            b.pool()
    for lvl in reversed(range(depth - 1)):
        b.up()
        b.cat()
        cout = base * 2**lvl
        b.conv(f"dec{lvl}a", cout)
        b.relu()
        b.conv(f"dec{lvl}b", cout)
        b.relu()
    b.conv("head", 1, k=1)
    return Network(config, b.params, b.plan)


def _rsu_block(b: _Builder, name: str, cout: int, inner_depth: int) -> None:
    # residual source saved first; inner-U skip pushes nest LIFO inside it
    b.push()
    mid = max(cout // 2, 1)
    if inner_depth == 1:
        b.conv(f"{name}.i0", cout)
        b.relu()
    else:
        b.conv(f"{name}.e0", mid)
        b.relu()
        for j in range(1, inner_depth):
            b.push()
            b.pool()
            b.conv(f"{name}.e{j}", mid)
            b.relu()
        for j in reversed(range(inner_depth - 1)):
            b.up()
            b.cat()
            b.conv(f"{name}.d{j}", cout if j == 0 else mid)
            b.relu()
    b.res(f"{name}.r", cout)


def build_u2net_lite(config: ModelConfig, seed: int) -> Network:
    """Nested-U segmenter: every outer block is a small residual U-block;
    no pre-trained weights anywhere; single sigmoid output map."""
    if config.variant != U2NET_LITE:
        raise ValueError(f"config variant is {config.variant!r}, expected {U2NET_LITE!r}")
    h, w = config.input_size
    m = config.rsu_inner_depth
    for lvl in range(config.depth):
        for i in range(m - 1):
            if (h >> (lvl + i)) % 2 or (w >> (lvl + i)) % 2:
                raise ValueError(
                    f"input size {h}x{w} cannot host an inner U of depth {m} at outer level {lvl}"
                )
    b = _Builder(config.input_channels, seed)
    base, depth = config.base_channels, config.depth
    for lvl in range(depth):
        _rsu_block(b, f"enc{lvl}", base * 2**lvl, m)
        if lvl < depth - 1:
            b.push()
            b.pool()
    for lvl in reversed(range(depth - 1)):
        b.up()
        b.cat()
        _rsu_block(b, f"dec{lvl}", base * 2**lvl, m)
    b.conv("head", 1, k=1)
    b.sigmoid()
    return Network(config, b.params, b.plan)


def build(config: ModelConfig, seed: int) -> Network:
    if config.variant == UNET_COORD:
        return build_unet_coord(config, seed)
    return build_u2net_lite(config, seed)


def forward(net: Network, batch, zero_coords: bool = False, trace: list | None = None) -> T.Tensor:
    """Run the layer plan on a [N,C,H,W] batch; returns a [N,1,H,W] map.

    ``zero_coords`` substitutes zero-filled coordinate channels, used to
    witness the position sensitivity the real channels introduce. ``trace``,
    when given a list, receives (instruction kind, output array) per step;
    the gradient oracles use it to verify evaluation points sit away from
    relu/maxpool kinks.
    """
    x = batch if isinstance(batch, T.Tensor) else T.Tensor(batch)
    h, w = net.config.input_size
    expect = (net.config.input_channels, h, w)
    if x.data.ndim != 4 or x.data.shape[1:] != expect:
        raise T.ShapeError(f"batch shape {x.data.shape} does not match model input {expect}")
    stack: list[T.Tensor] = []
    cur = x
    for op in net.plan:
        kind = op[0]
        if kind == "conv":
            _, name, stride, pad = op
            cur = T.conv2d(cur, net.params[name + ".w"], net.params[name + ".b"], stride, pad)
        elif kind == "relu":
            cur = T.relu(cur)
        elif kind == "sigmoid":
            cur = T.sigmoid(cur)
        elif kind == "coord":
            if zero_coords:
                n, _, hh, ww = cur.data.shape
                zeros = T.Tensor(np.zeros((n, 2, hh, ww), dtype=cur.data.dtype))
                cur = T.concat_channels(cur, zeros)
            else:
                cur = T.coord_augment(cur)
        elif kind == "push":
            stack.append(cur)
        elif kind == "pool":
            cur = T.maxpool2(cur)
        elif kind == "up":
            cur = T.upsample_nearest2(cur)
        elif kind == "cat":
            cur = T.concat_channels(cur, stack.pop())
        elif kind == "res":
            src = stack.pop()
            name = op[1]
            branch = T.conv2d(src, net.params[name + ".w"], net.params[name + ".b"], 1, 0)
            if trace is not None:
                trace.append(("res.conv", branch.data))
            cur = cur + T.relu(branch)
        else:
            raise ValueError(f"unknown plan instruction {op!r}")
        if trace is not None:
            trace.append((kind, cur.data))
    return cur


# -- checkpoint format --------------------------------------------------------
#
# magic "ILOC" | u32 version=1 | u16 nfields, then per field u16 keylen, key,
# u16 vallen, val (UTF-8) | per parameter u16 namelen, name, u8 ndim, u32 dims,
# little-endian float32 payload | u32 CRC-32 over everything after the magic.

MAGIC = b"ILOC"
VERSION = 1


class CheckpointError(Exception):
    """Load failure; ``section`` names the offending part of the file."""

    def __init__(self, section: str, message: str):
        super().__init__(f"checkpoint {section}: {message}")
        self.section = section


_CONFIG_FIELDS = [
    ("variant", str, str),
    ("input_size", lambda v: f"{v[0]}x{v[1]}", lambda s: tuple(int(p) for p in s.split("x"))),
    ("input_channels", str, int),
    ("base_channels", str, int),
    ("depth", str, int),
    ("rsu_inner_depth", str, int),
    ("output_head", str, str),
    ("coord_every_level", lambda v: "1" if v else "0", lambda s: s == "1"),
]


def save_checkpoint(net: Network, path) -> None:
    body = bytearray()
    body += struct.pack("<I", VERSION)
    body += struct.pack("<H", len(_CONFIG_FIELDS))
    for key, enc, _ in _CONFIG_FIELDS:
        kb = key.encode("utf-8")
        vb = enc(getattr(net.config, key)).encode("utf-8")
        body += struct.pack("<H", len(kb)) + kb + struct.pack("<H", len(vb)) + vb
    for name, p in net.params.items():
        nb = name.encode("utf-8")
        body += struct.pack("<H", len(nb)) + nb
        body += struct.pack("<B", p.data.ndim)
        for d in p.data.shape:
            body += struct.pack("<I", d)
        body += p.data.astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes(body))


class _Reader:
    def __init__(self, buf: bytes, section: str):
        self.buf = buf
        self.pos = 0
        self.section = section

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(self.section, "truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise CheckpointError("magic", f"expected {MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise CheckpointError("magic", "truncated before version")
    body, stored = raw[4:-4], struct.unpack("<I", raw[-4:])[0]
    if zlib.crc32(body) != stored:
        raise CheckpointError("checksum", "CRC-32 mismatch, file corrupted")
    r = _Reader(body, "version")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError("version", f"unsupported version {version}")
    r.section = "config"
    fields = {}
    for _ in range(r.u16()):
        key = r.take(r.u16()).decode("utf-8")
        fields[key] = r.take(r.u16()).decode("utf-8")
    expected_keys = {key for key, _, _ in _CONFIG_FIELDS}
    if set(fields) != expected_keys:
        raise CheckpointError("config", f"fields {sorted(fields)} do not match {sorted(expected_keys)}")
    try:
        kwargs = {key: dec(fields[key]) for key, _, dec in _CONFIG_FIELDS}
        config = ModelConfig(**kwargs)
    except (ValueError, IndexError) as exc:
        raise CheckpointError("config", str(exc)) from None
    net = build(config, seed=0)
    seen = set()
    while r.pos < len(body):
        r.section = "param header"
        name = r.take(r.u16()).decode("utf-8")
        r.section = f"param {name}"
        ndim = r.u8()
        shape = tuple(r.u32() for _ in range(ndim))
        if name not in net.params:
            raise CheckpointError(r.section, "unknown parameter for this config")
        if name in seen:
            raise CheckpointError(r.section, "duplicate parameter")
        expect = net.params[name].data.shape
        if shape != expect:
            raise CheckpointError(r.section, f"shape {shape} does not match plan shape {expect}")
        count = int(np.prod(shape)) if shape else 1
        payload = r.take(4 * count)
        net.params[name].data = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
        seen.add(name)
    if seen != set(net.params):
        missing = sorted(set(net.params) - seen)
        raise CheckpointError("param header", f"missing parameters: {missing}")
    return net
