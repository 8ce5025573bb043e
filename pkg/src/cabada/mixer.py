"""MLP-Mixer classifier for windowed time series, with exact backprop.

Pipeline per sample: each timestep's feature vector (G spatial channels x F
features) is embedded to a C-wide token; N mixer layers alternate a
temporal-mixing MLP (along the T axis, per channel, pre layer norm, skip)
and a channel-mixing MLP (along the C axis, per timestep, pre layer norm,
skip); a final layer norm, mean pooling over time, and a linear head
produce logits. All math is float64 numpy; backward() returns exact
reverse-mode gradients for every parameter and input entry and accepts
simultaneous upstream gradients on the logits and on the pooled features.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .errors import ConfigError, DataError, NumericalError

LN_EPS = 1e-5
CHECKPOINT_MAGIC = b"CABACKPT"
CHECKPOINT_VERSION = 1
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass(frozen=True)
class MixerConfig:
    """Architecture hyperparameters.

    timesteps T, spatial groups G, per-group features F (token size G*F),
    token width C, depth N, hidden widths of the two MLP kinds, class count
    M, and dropout rate applied after each MLP hidden activation.
    """

    timesteps: int
    groups: int
    group_features: int
    width: int
    depth: int
    temporal_hidden: int
    channel_hidden: int
    classes: int
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("timesteps", "groups", "group_features", "width",
                     "temporal_hidden", "channel_hidden", "classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"mixer.{name} must be a positive integer")
        if self.depth < 0:
            raise ConfigError("mixer.depth must be >= 0")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("mixer.dropout must lie in [0, 1)")

    @property
    def token_size(self) -> int:
        return self.groups * self.group_features

    def to_dict(self) -> dict:
        return {
            "timesteps": self.timesteps, "groups": self.groups,
            "group_features": self.group_features, "width": self.width,
            "depth": self.depth, "temporal_hidden": self.temporal_hidden,
            "channel_hidden": self.channel_hidden, "classes": self.classes,
            "dropout": self.dropout,
        }


def param_shapes(cfg: MixerConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map; the canonical parameter ordering."""
    t, c = cfg.timesteps, cfg.width
    th, ch = cfg.temporal_hidden, cfg.channel_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "embed.w": (cfg.token_size, c),
        "embed.b": (c,),
    }
    for i in range(cfg.depth):
        shapes[f"layer{i}.ln1.gamma"] = (c,)
        shapes[f"layer{i}.ln1.beta"] = (c,)
        shapes[f"layer{i}.temporal.w1"] = (t, th)
        shapes[f"layer{i}.temporal.b1"] = (th,)
        shapes[f"layer{i}.temporal.w2"] = (th, t)
        shapes[f"layer{i}.temporal.b2"] = (t,)
        shapes[f"layer{i}.ln2.gamma"] = (c,)
        shapes[f"layer{i}.ln2.beta"] = (c,)
        shapes[f"layer{i}.channel.w1"] = (c, ch)
        shapes[f"layer{i}.channel.b1"] = (ch,)
        shapes[f"layer{i}.channel.w2"] = (ch, c)
        shapes[f"layer{i}.channel.b2"] = (c,)
    shapes["final_ln.gamma"] = (c,)
    shapes["final_ln.beta"] = (c,)
    shapes["head.w"] = (c, cfg.classes)
    shapes["head.b"] = (cfg.classes,)
    return shapes


@dataclass
class MixerParams:
    """Named float64 tensors in the canonical ordering of param_shapes."""

    tensors: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def count(self) -> int:
        return sum(v.size for v in self.tensors.values())

    def copy(self) -> "MixerParams":
        return MixerParams({k: v.copy() for k, v in self.tensors.items()})

    def check_shapes(self, cfg: MixerConfig) -> None:
        expected = param_shapes(cfg)
        if list(self.tensors) != list(expected):
            raise ConfigError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape {self.tensors[name].shape}, "
                    f"expected {shape}"
                )


def param_count(cfg: MixerConfig) -> int:
    """Closed-form total parameter count."""
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: MixerConfig, seed: int) -> MixerParams:
    """Glorot-uniform weights, zero biases, unit layer-norm gains."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("w", "w1", "w2"):
            fan_in, fan_out = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
        elif leaf == "gamma":
            tensors[name] = np.ones(shape)
        else:
            tensors[name] = np.zeros(shape)
    return MixerParams(tensors)


def gelu(x):
    """Exact Gaussian-CDF form x * Phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return x * ndtr(x)


def gelu_grad(x):
    """d/dx [x * Phi(x)] = Phi(x) + x * phi(x)."""
    x = np.asarray(x, dtype=np.float64)
    return ndtr(x) + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI


def _ln_forward(x, gamma, beta):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def _ln_backward(dy, cache):
    xhat, inv, gamma = cache
    dgamma = (dy * xhat).sum(axis=tuple(range(dy.ndim - 1)))
    dbeta = dy.sum(axis=tuple(range(dy.ndim - 1)))
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgamma, dbeta


@dataclass
class ForwardTrace:
    """Activations cached by forward() for exact backpropagation."""

    logits: np.ndarray
    pooled_features: np.ndarray
    cfg: MixerConfig
    mode: str
    seed: int
    x: np.ndarray = field(repr=False, default=None)
    caches: list[dict] = field(repr=False, default_factory=list)
    final_ln: tuple = field(repr=False, default=None)
    pre_pool: np.ndarray = field(repr=False, default=None)


def _check_finite(arr, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite activation at {where}")


def forward(params: MixerParams, cfg: MixerConfig, values: np.ndarray,
            mode: str = "eval", seed: int = 0) -> ForwardTrace:
    """Run the network on a batch of windows, shape (n, T, G*F).

    mode="train" applies inverted dropout with masks drawn from ``seed``;
    mode="eval" is deterministic. The returned trace caches everything
    backward() needs.
    """
    if mode not in ("train", "eval"):
        raise ConfigError(f"forward mode must be 'train' or 'eval', got {mode!r}")
    params.check_shapes(cfg)
    x = np.asarray(values, dtype=np.float64)
    if x.ndim == 2:
        x = x[None, :, :]
    if x.ndim != 3 or x.shape[1] != cfg.timesteps or x.shape[2] != cfg.token_size:
        raise DataError(
            f"batch shape {x.shape} does not match (n, {cfg.timesteps}, "
            f"{cfg.token_size})"
        )
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    use_dropout = mode == "train" and cfg.dropout > 0.0
    keep = 1.0 - cfg.dropout

    h = x @ params["embed.w"] + params["embed.b"]
    _check_finite(h, "embedding")
    caches: list[dict] = []
    for i in range(cfg.depth):
        cache: dict = {"h_in": h}
        u, ln1 = _ln_forward(h, params[f"layer{i}.ln1.gamma"],
                             params[f"layer{i}.ln1.beta"])
        cache["ln1"] = ln1
        ut = u.transpose(0, 2, 1)
        cache["ut"] = ut
        z1 = ut @ params[f"layer{i}.temporal.w1"] + params[f"layer{i}.temporal.b1"]
        cache["z1"] = z1
        a1 = gelu(z1)
        if use_dropout:
            mask1 = (dropout_rng.random(a1.shape) >= cfg.dropout) / keep
            a1 = a1 * mask1
            cache["mask1"] = mask1
        cache["a1"] = a1
        z2 = a1 @ params[f"layer{i}.temporal.w2"] + params[f"layer{i}.temporal.b2"]
        h = h + z2.transpose(0, 2, 1)

        cache["h_mid"] = h
        u2, ln2 = _ln_forward(h, params[f"layer{i}.ln2.gamma"],
                              params[f"layer{i}.ln2.beta"])
        cache["ln2"] = ln2
        cache["u2"] = u2
        z3 = u2 @ params[f"layer{i}.channel.w1"] + params[f"layer{i}.channel.b1"]
        cache["z3"] = z3
        a3 = gelu(z3)
        if use_dropout:
            mask3 = (dropout_rng.random(a3.shape) >= cfg.dropout) / keep
            a3 = a3 * mask3
            cache["mask3"] = mask3
        cache["a3"] = a3
        z4 = a3 @ params[f"layer{i}.channel.w2"] + params[f"layer{i}.channel.b2"]
        h = h + z4
        _check_finite(h, f"mixer layer {i}")
        caches.append(cache)

    uf, lnf = _ln_forward(h, params["final_ln.gamma"], params["final_ln.beta"])
    pooled = uf.mean(axis=1)
    logits = pooled @ params["head.w"] + params["head.b"]
    _check_finite(logits, "head")
    return ForwardTrace(logits=logits, pooled_features=pooled, cfg=cfg,
                        mode=mode, seed=seed, x=x, caches=caches,
                        final_ln=lnf, pre_pool=uf)


def backward(trace: ForwardTrace, params: MixerParams, cfg: MixerConfig,
             d_logits: np.ndarray | None = None,
             d_pooled: np.ndarray | None = None):
    """Exact gradients for the upstream sensitivities of one forward pass.

    d_logits (n, M) is the loss gradient on the logits; d_pooled (n, C) an
    additional gradient on the pooled features (both optional, summed).
    Returns (grads: name -> array matching param_shapes, d_input (n,T,G*F)).
    """
    if trace.cfg != cfg:
        raise ConfigError("trace was produced under a different configuration")
    params.check_shapes(cfg)
    n = trace.logits.shape[0]
    grads = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
    if d_logits is None:
        d_logits = np.zeros_like(trace.logits)
    else:
        d_logits = np.asarray(d_logits, dtype=np.float64)
        if d_logits.shape != trace.logits.shape:
            raise DataError("d_logits shape mismatch")
    d_pool = np.zeros_like(trace.pooled_features)
    if d_pooled is not None:
        d_pooled = np.asarray(d_pooled, dtype=np.float64)
        if d_pooled.shape != trace.pooled_features.shape:
            raise DataError("d_pooled shape mismatch")
        d_pool = d_pool + d_pooled

    grads["head.w"] = trace.pooled_features.T @ d_logits
    grads["head.b"] = d_logits.sum(axis=0)
    d_pool = d_pool + d_logits @ params["head.w"].T

    d_uf = np.broadcast_to(d_pool[:, None, :] / cfg.timesteps,
                           trace.pre_pool.shape).copy()
    dh, dg, db = _ln_backward(d_uf, trace.final_ln)
    grads["final_ln.gamma"] = dg
    grads["final_ln.beta"] = db

    for i in reversed(range(cfg.depth)):
        cache = trace.caches[i]
        # channel-mixing MLP
        dz4 = dh
        grads[f"layer{i}.channel.w2"] = np.einsum("nth,ntc->hc", cache["a3"], dz4)
        grads[f"layer{i}.channel.b2"] = dz4.sum(axis=(0, 1))
        da3 = dz4 @ params[f"layer{i}.channel.w2"].T
        if "mask3" in cache:
            da3 = da3 * cache["mask3"]
        dz3 = da3 * gelu_grad(cache["z3"])
        grads[f"layer{i}.channel.w1"] = np.einsum("ntc,nth->ch", cache["u2"], dz3)
        grads[f"layer{i}.channel.b1"] = dz3.sum(axis=(0, 1))
        du2 = dz3 @ params[f"layer{i}.channel.w1"].T
        dh_mid, dg2, db2 = _ln_backward(du2, cache["ln2"])
        grads[f"layer{i}.ln2.gamma"] = dg2
        grads[f"layer{i}.ln2.beta"] = db2
        dh = dh + dh_mid  # skip connection

        # temporal-mixing MLP (gradients arrive transposed)
        dz2 = dh.transpose(0, 2, 1)
        grads[f"layer{i}.temporal.w2"] = np.einsum("nch,nct->ht", cache["a1"], dz2)
        grads[f"layer{i}.temporal.b2"] = dz2.sum(axis=(0, 1))
        da1 = dz2 @ params[f"layer{i}.temporal.w2"].T
        if "mask1" in cache:
            da1 = da1 * cache["mask1"]
        dz1 = da1 * gelu_grad(cache["z1"])
        grads[f"layer{i}.temporal.w1"] = np.einsum("nct,nch->th", cache["ut"], dz1)
        grads[f"layer{i}.temporal.b1"] = dz1.sum(axis=(0, 1))
        dut = dz1 @ params[f"layer{i}.temporal.w1"].T
        du = dut.transpose(0, 2, 1)
        dh_in, dg1, db1 = _ln_backward(du, cache["ln1"])
        grads[f"layer{i}.ln1.gamma"] = dg1
        grads[f"layer{i}.ln1.beta"] = db1
        dh = dh + dh_in  # skip connection

    grads["embed.w"] = np.einsum("ntd,ntc->dc", trace.x, dh)
    grads["embed.b"] = dh.sum(axis=(0, 1))
    d_input = dh @ params["embed.w"].T
    return grads, d_input


def count_macs(cfg: MixerConfig) -> int:
    """Multiply-accumulate count of one per-sample forward pass.

    Every linear layer contributes fan_out * (fan_in + 1) MACs per
    application (the +1 folds the bias add into the accumulate chain);
    layer norms, GELU, and pooling count 0.
    """
    t, c, m = cfg.timesteps, cfg.width, cfg.classes
    th, ch = cfg.temporal_hidden, cfg.channel_hidden
    embed = t * (cfg.token_size + 1) * c
    temporal = c * ((t + 1) * th + (th + 1) * t)
    channel = t * ((c + 1) * ch + (ch + 1) * c)
    head = (c + 1) * m
    return embed + cfg.depth * (temporal + channel) + head


def mask_channels(values: np.ndarray, mask, groups: int) -> np.ndarray:
    """Zero out whole spatial channels (all their features, all timesteps).

    values has shape (n, S, D) or (S, D) with D = groups * F laid out
    channel-major. Returns a copy; the input is untouched.
    """
    x = np.array(values, dtype=np.float64, copy=True)
    d = x.shape[-1]
    if d % groups != 0:
        raise DataError(f"feature count {d} not divisible by {groups} groups")
    f = d // groups
    for g in mask:
        g = int(g)
        if not (0 <= g < groups):
            raise DataError(f"channel index {g} out of range [0, {groups})")
        x[..., g * f:(g + 1) * f] = 0.0
    return x


# --- checkpoint I/O ---------------------------------------------------------

def save_checkpoint(path, params: MixerParams, cfg: MixerConfig) -> Path:
    """Single binary file: magic, JSON shape header, packed float64 blobs."""
    params.check_shapes(cfg)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "tensors": [{"name": k, "shape": list(v.shape)}
                    for k, v in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in params.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    return out


def load_checkpoint(path) -> tuple[MixerParams, MixerConfig]:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"checkpoint not found: {p}")
    raw = p.read_bytes()
    if raw[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"not a checkpoint file: {p}")
    off = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {p}: {exc}") from exc
    off += hlen
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint format_version in {p}")
    cfg = MixerConfig(**header["config"])
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off)
        tensors[entry["name"]] = arr.reshape(shape).astype(np.float64)
        off += size * 8
    params = MixerParams(tensors)
    params.check_shapes(cfg)
    return params, cfg
