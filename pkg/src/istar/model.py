"""The unfolded ISTA super-resolution network.

Data flow for an LR image x (all feature maps have width C and LR size)::

    f0   = conv(x)                                   feature lift
    dty  = conv(relu(conv(f0)))                      learned D^T y, computed once
    f_k  = ista_block_k(f_{k-1}, dty), k = 1..K       with f_0 = f0
    out  = pixel_shuffle(conv(f0 + padding(f_K)), r)

Inside an ISTA block::

    u = msa(mse(f))                   learned (E - alpha D^T D) f
    v = conv1x1(concat(u, dty))       adds the alpha D^T y term
    w = st(v)                         learned soft threshold
    return w + padding(w)

``padding`` is conv -> relu -> conv throughout.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ParamStore

MAGIC = b"ISTAR001"
OPT_MAGIC = b"OPTSTATE"
PAPER_PARAMS = 5.05e6


class CheckpointError(ValueError):
    """Checkpoint does not match the model it is loaded into."""


@dataclass(frozen=True)
class ModelConfig:
    scale: int = 2
    channels: int = 64
    iterations: int = 16
    st_channels: int = 16
    colors: int = 3
    theta_max: float = 1.0

    def __post_init__(self):
        if self.scale < 1 or self.channels < 1 or self.iterations < 1:
            raise ValueError("scale, channels and iterations must all be >= 1")
        if self.st_channels < 1 or self.colors < 1:
            raise ValueError("st_channels and colors must be >= 1")
        if self.theta_max < 0:
            raise ValueError("theta_max must be non-negative")

    def to_text(self) -> str:
        return "".join(f"model.{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_mapping(cls, kv: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            key = f"model.{f.name}"
            if key in kv:
                kw[f.name] = float(kv[key]) if f.type in (float, "float") else int(kv[key])
        return cls(**kw)


@dataclass(frozen=True)
class ConvSpec:
    name: str
    cin: int
    cout: int
    k: int

    @property
    def params(self) -> int:
        return self.cout * self.cin * self.k * self.k + self.cout

    def macs(self, height: int, width: int) -> int:
        return self.cout * self.cin * self.k * self.k * height * width


class IstarModel:
    def __init__(self, config: ModelConfig | None = None, seed: int = 0, dtype=np.float32):
        self.config = config or ModelConfig()
        self.dtype = np.dtype(dtype)
        self.params = ParamStore()
        self.convs: list[ConvSpec] = []
        self._rng = np.random.default_rng(seed)
        self._build()
        del self._rng

    # -- construction ------------------------------------------------------

    def _conv(self, name, cin, cout, k, gain=1.0):
        bound = gain * np.sqrt(6.0 / (cin * k * k))
        w = self._rng.uniform(-bound, bound, size=(cout, cin, k, k))
        self.params.add(f"{name}.weight", w.astype(self.dtype))
        self.params.add(f"{name}.bias", np.zeros(cout, dtype=self.dtype))
        self.convs.append(ConvSpec(name, cin, cout, k))

    def _multiscale(self, prefix, c):
        self._conv(f"{prefix}.b1", c, c, 1)
        self._conv(f"{prefix}.b3", c, c, 3)
        self._conv(f"{prefix}.b5a", c, c, 3)
        self._conv(f"{prefix}.b5b", c, c, 3)

    def _padding(self, prefix, c):
        self._conv(f"{prefix}.conv1", c, c, 3)
        self._conv(f"{prefix}.conv2", c, c, 3, gain=0.1)

    def _build(self):
        cfg = self.config
        c, r = cfg.channels, cfg.scale
        self._conv("head", cfg.colors, c, 3)
        self._conv("dty.conv1", c, c, 3)
        self._conv("dty.conv2", c, c, 3)
        for k in range(1, cfg.iterations + 1):
            b = f"blocks.{k}"
            self._multiscale(f"{b}.mse", c)
            self._conv(f"{b}.mse.fuse", 3 * c, c, 1)
            self._multiscale(f"{b}.msa", c)
            self._conv(f"{b}.msa.conv1", 3 * c, c, 1)
            self._conv(f"{b}.msa.conv2", c, c, 1)
            self._conv(f"{b}.fuse", 2 * c, c, 1)
            self._conv(f"{b}.st.conv1", c, cfg.st_channels, 1)
            self._conv(f"{b}.st.conv2", cfg.st_channels, c, 1)
            self.params.add(f"{b}.st.theta_max", np.full(1, cfg.theta_max, dtype=self.dtype))
            self._padding(f"{b}.pad", c)
        self._padding("tail", c)
        self._conv("upscale", c, cfg.colors * r * r, 3)
        self._interpolation_start()

    def _interpolation_start(self):
        """Make the untrained network an exact bilinear upscaler.

        The head copies the colour planes into the first feature channels, the
        tail padding leaves them alone, and the upscale conv reads only those
        channels through a bilinear sub-pixel kernel. Training then learns a
        correction instead of the whole mapping.
        """
        cfg = self.config
        n, r = cfg.colors, cfg.scale
        if cfg.channels < n:
            return
        p = self.params
        head = p["head.weight"].value
        head[:n] = 0
        for i in range(n):
            head[i, i, 1, 1] = 1
        p["tail.conv2.weight"].value[:n] = 0
        up = p["upscale.weight"].value
        up[:] = 0
        taps = [bilinear_taps(d, r) for d in range(r)]
        for col in range(n):
            for dy in range(r):
                for dx in range(r):
                    up[col * r * r + dy * r + dx, col] = np.outer(taps[dy], taps[dx])

    # -- forward -----------------------------------------------------------

    def lift(self, x) -> tuple[Node, Node]:
        x = ad.constant(x, dtype=self.dtype)
        if x.value.ndim != 4 or x.value.shape[1] != self.config.colors:
            raise ValueError(f"expected (B, {self.config.colors}, H, W) input, got {x.value.shape}")
        p = self.params
        feat = conv(p.scope("head"), x)
        dty = conv(p.scope("dty.conv2"), ad.relu(conv(p.scope("dty.conv1"), feat)))
        return feat, dty

    def block(self, k: int, feat: Node, dty: Node) -> Node:
        return ista_block(self.params.scope(f"blocks.{k}"), feat, dty)

    def features(self, x) -> Node:
        feat0, dty = self.lift(x)
        feat = feat0
        for k in range(1, self.config.iterations + 1):
            feat = self.block(k, feat, dty)
        return ad.add(feat0, padding(self.params.scope("tail"), feat))

    def forward(self, x) -> Node:
        sr = conv(self.params.scope("upscale"), self.features(x))
        return ad.pixel_shuffle(sr, self.config.scale)

    __call__ = forward

    def predict(self, lr: np.ndarray) -> np.ndarray:
        """Super-resolve a single (3, H, W) image without building a graph."""
        with ad.no_grad():
            out = self.forward(np.asarray(lr, dtype=self.dtype)[None])
        return out.value[0]

    # -- bookkeeping -------------------------------------------------------

    def count_params(self) -> int:
        return self.params.num_scalars()

    def estimate_macs(self, height: int, width: int) -> int:
        """Multiply-accumulates of all convolutions for an LR input of H x W."""
        return sum(s.macs(height, width) for s in self.convs)

    def param_breakdown(self) -> dict[str, int]:
        groups: dict[str, int] = {}
        for name, node in self.params.items():
            parts = name.split(".")
            key = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]
            groups[key] = groups.get(key, 0) + node.value.size
        return groups

    def save(self, path, optimizer: bool = False, meta: dict | None = None) -> None:
        with open(path, "wb") as fh:
            fh.write(serialize(self, optimizer=optimizer, meta=meta))

    @classmethod
    def load(cls, path, config: ModelConfig | None = None, dtype=np.float32):
        with open(path, "rb") as fh:
            return deserialize(fh.read(), config=config, dtype=dtype)


# -- blocks --------------------------------------------------------------------

def bilinear_taps(d: int, r: int) -> np.ndarray:
    """3-tap weights placing sub-pixel ``d`` of ``r`` between LR pixel centres."""
    off = (d + 0.5) / r - 0.5
    t = np.zeros(3)
    if off < 0:
        t[0], t[1] = -off, 1 + off
    else:
        t[1], t[2] = 1 - off, off
    return t


def conv(p, x: Node) -> Node:
    w = p["weight"]
    return ad.conv2d(x, w, p["bias"], stride=1, zero_pad=w.value.shape[-1] // 2)


def padding(p, x: Node) -> Node:
    return conv(p.scope("conv2"), ad.relu(conv(p.scope("conv1"), x)))


def _multiscale(p, x: Node) -> Node:
    s1 = conv(p.scope("b1"), x)
    s3 = conv(p.scope("b3"), x)
    s5 = conv(p.scope("b5b"), ad.relu(conv(p.scope("b5a"), x)))
    return ad.concat(ad.concat(s1, s3), s5)


def mse_block(p, x: Node) -> Node:
    """Parallel 1x1 / 3x3 / (3x3-relu-3x3) branches, relu, 1x1 fuse back to C."""
    return conv(p.scope("fuse"), ad.relu(_multiscale(p, x)))


def msa_attention(p, x: Node) -> Node:
    h = ad.relu(_multiscale(p, x))
    h = ad.relu(conv(p.scope("conv1"), h))
    return ad.sigmoid(conv(p.scope("conv2"), h))


def msa_block(p, x: Node) -> Node:
    """Gate x by a multi-scale attention map with values in (0, 1)."""
    return ad.mul(x, msa_attention(p, x))


def st_threshold(p, x: Node) -> Node:
    gate = ad.sigmoid(conv(p.scope("conv2"), ad.relu(conv(p.scope("conv1"), x))))
    return ad.scale(gate, p["theta_max"])


def st_block(p, x: Node) -> Node:
    """Soft threshold with a per-element map theta(x) in [0, theta_max]."""
    return ad.soft_threshold(x, st_threshold(p, x))


def ista_block(p, feat: Node, dty: Node) -> Node:
    u = msa_block(p.scope("msa"), mse_block(p.scope("mse"), feat))
    v = conv(p.scope("fuse"), ad.concat(u, dty))
    w = st_block(p.scope("st"), v)
    return ad.add(w, padding(p.scope("pad"), w))


def gradcheck_model(size: int = 8, iterations: int = 1, channels: int = 4, seed: int = 0,
                    scale: int = 2, eps: float = 1e-6, max_coords: int | None = None):
    """Finite-difference check of every parameter of a tiny float64 model.

    The loss is the L1 distance between the SR output and a random target.
    """
    model = IstarModel(ModelConfig(scale=scale, channels=channels, iterations=iterations),
                       seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    # perturb the structured start so no parameter sits exactly on zero
    for _, node in model.params.items():
        node.value += 0.05 * rng.standard_normal(node.value.shape)
    x = rng.uniform(0, 1, (1, model.config.colors, size, size))
    target = ad.constant(rng.uniform(0, 1, (1, model.config.colors, scale * size, scale * size)),
                         np.float64)

    def loss():
        return ad.mean_abs(ad.sub(model.forward(x), target))

    return ad.grad_check(loss, model.params, eps=eps, max_coords=max_coords, seed=seed)


# -- checkpoint format -------------------------------------------------------

def _frame_tensors(items) -> bytes:
    items = list(items)
    out = [struct.pack("<I", len(items))]
    for name, arr in items:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for _ in range(self.u32()):
            name = self.take(self.u32()).decode("utf-8")
            rank = self.u32()
            shape = struct.unpack(f"<{rank}I", self.take(4 * rank))
            n = int(np.prod(shape, dtype=np.int64))
            out.append((name, np.frombuffer(self.take(4 * n), dtype="<f4").reshape(shape)))
        return out


def serialize(model: IstarModel, optimizer: bool = False, meta: dict | None = None) -> bytes:
    """Bit-exact checkpoint bytes: magic, config text block, float32 tensors.

    With ``optimizer`` an OPTSTATE section follows holding the Adam step
    counter and the ``.m`` / ``.v`` moment tensors.
    """
    text = model.config.to_text() + "".join(f"{k}={v}\n" for k, v in (meta or {}).items())
    raw = text.encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(raw)), raw,
             _frame_tensors((n, node.value) for n, node in model.params.items())]
    if optimizer:
        entries = model.params.entries
        moments = [(f"{n}.m", p.m) for n, p in entries.items()]
        moments += [(f"{n}.v", p.v) for n, p in entries.items()]
        parts += [OPT_MAGIC, struct.pack("<Q", model.params.step), _frame_tensors(moments)]
    return b"".join(parts)


def parse_text_block(text: str) -> dict[str, str]:
    kv = {}
    for line in text.splitlines():
        if line.strip():
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    return kv


def deserialize(buf: bytes, config: ModelConfig | None = None, dtype=np.float32):
    """Rebuild a model from checkpoint bytes; returns ``(model, meta)``.

    If ``config`` is given it must agree with the stored one.  Any missing
    or unexpected tensor name is an error.
    """
    rd = _Reader(buf)
    if rd.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not an ISTAR checkpoint (bad magic)")
    kv = parse_text_block(rd.take(rd.u32()).decode("utf-8"))
    stored = ModelConfig.from_mapping(kv)
    if config is not None and config != stored:
        raise CheckpointError(f"checkpoint config {stored} does not match {config}")
    model = IstarModel(stored, dtype=dtype)
    _assign(model, rd.tensors(), lambda name, arr: _set_value(model, name, arr))
    if rd.pos < len(buf):
        if rd.take(len(OPT_MAGIC)) != OPT_MAGIC:
            raise CheckpointError("unknown trailing section")
        model.params.step = struct.unpack("<Q", rd.take(8))[0]
        moments = rd.tensors()
        expected = [f"{n}.m" for n in model.params] + [f"{n}.v" for n in model.params]
        if [n for n, _ in moments] != expected:
            raise CheckpointError("optimizer state names do not match the model")
        for name, arr in moments:
            entry = model.params.entries[name[:-2]]
            setattr(entry, name[-1], np.array(arr, dtype=dtype))
    if rd.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    meta = {k: v for k, v in kv.items() if not k.startswith("model.")}
    return model, meta


def _set_value(model, name, arr):
    node = model.params[name]
    if node.value.shape != arr.shape:
        raise CheckpointError(f"{name}: shape {arr.shape} != expected {node.value.shape}")
    node.value = np.array(arr, dtype=model.dtype)


def _assign(model, tensors, setter):
    names = [n for n, _ in tensors]
    expected = list(model.params)
    missing = sorted(set(expected) - set(names))
    extra = sorted(set(names) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter mismatch: missing={missing[:5]} extra={extra[:5]}")
    if len(names) != len(set(names)):
        raise CheckpointError("duplicate tensor names in checkpoint")
    for name, arr in tensors:
        setter(name, arr)
