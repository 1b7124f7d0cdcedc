"""Downstream network: 3-D conv frontend, residual trunk, GRU, regression and class heads.

Parameters live in a plain ``dict`` mapping names to float64 arrays. Names
starting with ``frontend.`` or ``stage`` form the trunk, which is the part
shared with the pretext networks and moved by :func:`transfer_weights`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, Tensor

CHECKPOINT_MAGIC = b"SSVK"
CHECKPOINT_VERSION = 1
FREEZE_MODES = ("none", "frontend", "trunk")


class IncompatibleCheckpoint(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    widths: tuple = (8, 16, 32, 64)
    hidden: int = 64
    num_bins: int = 20
    input_size: int = 48
    frontend_kernel: tuple = (5, 7, 7)
    bidirectional: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "frontend_kernel", tuple(int(k) for k in self.frontend_kernel))
        if not self.widths:
            raise ValueError("need at least one residual stage")

    @property
    def head_in(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)


def is_trunk(name: str) -> bool:
    return name.startswith("frontend.") or name.startswith("stage")


def trunk_of(params: dict) -> dict:
    return {k: v for k, v in params.items() if is_trunk(k)}


# ---------------------------------------------------------------------------
# initialization


def _kaiming_uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_trunk(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    p = {}
    kt, kh, kw = cfg.frontend_kernel
    w0 = cfg.widths[0]
    p["frontend.weight"] = _kaiming_uniform(rng, (w0, 1, kt, kh, kw), kt * kh * kw)
    p["frontend.scale"] = np.ones(w0)
    p["frontend.shift"] = np.zeros(w0)
    cin = w0
    for i, cout in enumerate(cfg.widths):
        p[f"stage{i}.conv1.weight"] = _kaiming_uniform(rng, (cout, cin, 3, 3), cin * 9)
        p[f"stage{i}.affine1.scale"] = np.ones(cout)
        p[f"stage{i}.affine1.shift"] = np.zeros(cout)
        p[f"stage{i}.conv2.weight"] = _kaiming_uniform(rng, (cout, cout, 3, 3), cout * 9)
        p[f"stage{i}.affine2.scale"] = np.ones(cout)
        p[f"stage{i}.affine2.shift"] = np.zeros(cout)
        cin = cout
    return p


def init_gru(prefix: str, n_in: int, hidden: int, rng: np.random.Generator) -> dict:
    bound = 1.0 / np.sqrt(hidden)
    return {
        f"{prefix}.w_ih": rng.uniform(-bound, bound, size=(n_in, 3 * hidden)),
        f"{prefix}.w_hh": rng.uniform(-bound, bound, size=(hidden, 3 * hidden)),
        f"{prefix}.b_ih": np.zeros(3 * hidden),
        f"{prefix}.b_hh": np.zeros(3 * hidden),
    }


def init_linear(prefix: str, n_in: int, n_out: int, rng: np.random.Generator) -> dict:
    return {
        f"{prefix}.weight": _kaiming_uniform(rng, (n_in, n_out), n_in),
        f"{prefix}.bias": np.zeros(n_out),
    }


def init_heads(cfg: ModelConfig, rng: np.random.Generator) -> dict:
    p = init_gru("gru", cfg.widths[-1], cfg.hidden, rng)
    if cfg.bidirectional:
        p.update(init_gru("gru_rev", cfg.widths[-1], cfg.hidden, rng))
    p.update(init_linear("reg", cfg.head_in, 2, rng))
    p.update(init_linear("cls", cfg.head_in, 2 * cfg.num_bins, rng))
    return p


def init(seed: int, cfg: ModelConfig | None = None, scheme: str = "kaiming") -> dict:
    """Fresh downstream parameters: Kaiming-uniform convs/linears, uniform GRU, zero biases."""
    if scheme != "kaiming":
        raise ValueError(f"unknown init scheme {scheme!r}")
    cfg = cfg or ModelConfig()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    params = init_trunk(cfg, rng)
    params.update(init_heads(cfg, rng))
    return params


def infer_config(params: dict, input_size: int = 48) -> ModelConfig:
    """Rebuild the configuration from parameter shapes."""
    widths = []
    i = 0
    while f"stage{i}.conv1.weight" in params:
        widths.append(params[f"stage{i}.conv1.weight"].shape[0])
        i += 1
    hidden = params["gru.w_hh"].shape[0] if "gru.w_hh" in params else 64
    num_bins = params["cls.weight"].shape[1] // 2 if "cls.weight" in params else 20
    return ModelConfig(
        widths=tuple(widths),
        hidden=hidden,
        num_bins=num_bins,
        input_size=input_size,
        frontend_kernel=tuple(params["frontend.weight"].shape[2:]),
        bidirectional="gru_rev.w_hh" in params,
    )


def count_parameters(params: dict) -> int:
    return int(sum(v.size for v in params.values()))


# ---------------------------------------------------------------------------
# forward


def as_tensors(params: dict, trainable: dict | None = None) -> dict:
    """Wrap arrays as graph leaves; ``trainable`` (name -> bool) picks which need gradients."""
    return {
        k: Tensor(v, requires_grad=True if trainable is None else bool(trainable.get(k, False)))
        for k, v in params.items()
    }


def _residual_block(P, prefix, x, stride):
    cout = P[f"{prefix}.conv1.weight"].shape[0]
    cin = x.shape[1]
    h = dc.conv2d(x, P[f"{prefix}.conv1.weight"], stride=stride, padding=1)
    h = dc.relu(dc.affine(h, P[f"{prefix}.affine1.scale"], P[f"{prefix}.affine1.shift"], axis=1))
    h = dc.conv2d(h, P[f"{prefix}.conv2.weight"], stride=1, padding=1)
    h = dc.affine(h, P[f"{prefix}.affine2.scale"], P[f"{prefix}.affine2.shift"], axis=1)
    shortcut = x
    if stride > 1:
        shortcut = shortcut[:, :, ::stride, ::stride]
    if cout > cin:
        n, _, hh, ww = shortcut.shape
        shortcut = dc.concat([shortcut, Tensor(np.zeros((n, cout - cin, hh, ww)))], axis=1)
    elif cout < cin:
        raise ContractViolation(f"{prefix}: stage narrower than its input ({cout} < {cin})")
    return dc.relu(h + shortcut)


def trunk_forward(P: dict, x) -> Tensor:
    """``[B, T, H, W]`` frames to ``[B, T, C]`` spatially pooled per-frame features.

    The temporal padding of the frontend is causal (all ``kt - 1`` frames in
    front), so frame ``t`` never sees frames after it.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise ContractViolation(f"expected [B, T, H, W] frames, got {x.shape}")
    B, T, H, W = x.shape
    w = P["frontend.weight"]
    kt, kh, kw = w.shape[2:]
    y = dc.conv3d(
        dc.reshape(x, (B, 1, T, H, W)),
        w,
        stride=(1, 2, 2),
        padding=((kt - 1, 0), (kh // 2, kh // 2), (kw // 2, kw // 2)),
    )
    y = dc.relu(dc.affine(y, P["frontend.scale"], P["frontend.shift"], axis=1))
    C, h, ww = y.shape[1], y.shape[3], y.shape[4]
    y = dc.reshape(dc.transpose(y, (0, 2, 1, 3, 4)), (B * T, C, h, ww))
    i = 0
    while f"stage{i}.conv1.weight" in P:
        y = _residual_block(P, f"stage{i}", y, 1 if i == 0 else 2)
        i += 1
    pooled = dc.mean(y, axis=(2, 3))
    return dc.reshape(pooled, (B, T, pooled.shape[1]))


def gru_forward(P: dict, prefix: str, feats: Tensor, reverse: bool = False) -> Tensor:
    """Single-layer GRU over ``[B, T, C]``; zero initial state; returns ``[B, T, H]``."""
    B, T, C = feats.shape
    w_hh = P[f"{prefix}.w_hh"]
    H = w_hh.shape[0]
    xi = dc.affine(dc.matmul(dc.reshape(feats, (B * T, C)), P[f"{prefix}.w_ih"]), shift=P[f"{prefix}.b_ih"], axis=1)
    xi = dc.reshape(xi, (B, T, 3 * H))
    h = Tensor(np.zeros((B, H)))
    outs = [None] * T
    steps = range(T - 1, -1, -1) if reverse else range(T)
    for t in steps:
        xt = xi[:, t, :]
        hh = dc.affine(dc.matmul(h, w_hh), shift=P[f"{prefix}.b_hh"], axis=1)
        r = dc.sigmoid(xt[:, :H] + hh[:, :H])
        z = dc.sigmoid(xt[:, H : 2 * H] + hh[:, H : 2 * H])
        n = dc.tanh(xt[:, 2 * H :] + r * hh[:, 2 * H :])
        h = n + z * (h - n)
        outs[t] = h
    return dc.stack(outs, axis=1)


class ModelOutput(NamedTuple):
    reg: Tensor  # [B, T, 2], in (-1, 1)
    logits: Tensor  # [B, T, 2, L]
    features: Tensor  # [B, T, hidden]


def forward(P: dict, x, cfg: ModelConfig, check_size: bool = True) -> ModelOutput:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if check_size and (x.ndim != 4 or x.shape[2:] != (cfg.input_size, cfg.input_size)):
        raise ContractViolation(f"expected [B, T, {cfg.input_size}, {cfg.input_size}] input, got {x.shape}")
    B, T = x.shape[:2]
    feats = trunk_forward(P, x)
    hidden = gru_forward(P, "gru", feats)
    if cfg.bidirectional:
        hidden = dc.concat([hidden, gru_forward(P, "gru_rev", feats, reverse=True)], axis=2)
    flat = dc.reshape(hidden, (B * T, hidden.shape[2]))
    reg = dc.tanh(dc.affine(dc.matmul(flat, P["reg.weight"]), shift=P["reg.bias"], axis=1))
    logits = dc.affine(dc.matmul(flat, P["cls.weight"]), shift=P["cls.bias"], axis=1)
    return ModelOutput(
        dc.reshape(reg, (B, T, 2)),
        dc.reshape(logits, (B, T, 2, cfg.num_bins)),
        hidden,
    )


# ---------------------------------------------------------------------------
# transfer and freezing


def transfer_weights(pretext_trunk: dict, downstream: dict) -> dict:
    """Copy every trunk tensor of ``pretext_trunk`` into a copy of ``downstream``.

    Both sides must have the same trunk names and shapes; the first mismatch
    is reported. Head parameters of ``downstream`` are kept as they are.
    """
    src = trunk_of(pretext_trunk)
    dst = trunk_of(downstream)
    for name in dst:
        if name not in src:
            raise IncompatibleCheckpoint(f"pretext trunk is missing {name}")
        if src[name].shape != dst[name].shape:
            raise IncompatibleCheckpoint(f"{name}: pretext shape {src[name].shape} != downstream shape {dst[name].shape}")
    for name in src:
        if name not in dst:
            raise IncompatibleCheckpoint(f"pretext trunk has unexpected parameter {name}")
    out = {k: v.copy() for k, v in downstream.items()}
    for name in dst:
        out[name] = src[name].copy()
    return out


def freeze_mask(params: dict, mode: str = "none") -> dict:
    """Name -> trainable. ``frontend`` fixes the first 3-D conv layer, ``trunk`` the whole shared trunk."""
    if mode not in FREEZE_MODES:
        raise ValueError(f"freeze mode must be one of {', '.join(FREEZE_MODES)}; got {mode!r}")
    if mode == "none":
        return {k: True for k in params}
    if mode == "frontend":
        return {k: not k.startswith("frontend.") for k in params}
    return {k: not is_trunk(k) for k in params}


# ---------------------------------------------------------------------------
# checkpoint file: SSVK, u32 version, then (u32 name_len, name, u32 ndim, u32 dims..., f64 data) records


def checkpoint_bytes(params: dict) -> bytes:
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(chunks)


def save_checkpoint(path, params: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(params))
    tmp.replace(path)


def parse_checkpoint(buf: bytes) -> dict:
    try:
        return _parse_records(buf)
    except (struct.error, UnicodeDecodeError) as exc:
        raise IncompatibleCheckpoint(f"truncated or corrupt checkpoint: {exc}") from exc


def _parse_records(buf: bytes) -> dict:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise IncompatibleCheckpoint("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise IncompatibleCheckpoint(f"unsupported checkpoint version {version}")
    pos = 8
    params = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos : pos + n].decode("utf-8")
        pos += n
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        end = pos + 8 * count
        if end > len(buf):
            raise IncompatibleCheckpoint(f"truncated checkpoint while reading {name}")
        params[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos = end
    return params


def load_checkpoint(path) -> dict:
    return parse_checkpoint(Path(path).read_bytes())
