"""1D vision transformer with a shared encoder and two task branches.

Layout: patching convolution -> class token -> learned positional
embeddings -> post-norm encoder layers -> MLP head on the class token ->
a stage branch (5-way softmax) and an apnea branch (4-way softmax).
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor

CHECKPOINT_MAGIC = b"SVITCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 768
    n_layers: int = 6
    n_heads: int = 6
    mlp_hidden: int = 256
    patch_kernel: int = 20
    patch_stride: int = 20
    input_channels: int = 4
    input_length: int = 1920
    head_hidden: int = 1024
    branch_hidden: int = 256
    n_stage_classes: int = 5
    n_apnea_classes: int = 4
    dropout_rate: float = 0.1
    stochastic_depth_survival: float = 0.9

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"indivisible d_model: {self.d_model} by {self.n_heads} heads")
        if self.input_length < self.patch_kernel:
            raise ValueError("input shorter than one patch")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not 0 < self.stochastic_depth_survival <= 1:
            raise ValueError("stochastic_depth_survival must be in (0, 1]")

    @property
    def n_patches(self) -> int:
        return (self.input_length - self.patch_kernel) // self.patch_stride + 1

    @property
    def n_tokens(self) -> int:
        return self.n_patches + 1

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every learnable tensor."""
    d = cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "patch.kernel": (d, cfg.input_channels, cfg.patch_kernel),
        "patch.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (cfg.n_tokens, d),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "attn.qkv.weight": (d, 3 * d),
            p + "attn.qkv.bias": (3 * d,),
            p + "attn.out.weight": (d, d),
            p + "attn.out.bias": (d,),
            p + "ln1.gain": (d,),
            p + "ln1.shift": (d,),
            p + "ffn.fc1.weight": (d, cfg.mlp_hidden),
            p + "ffn.fc1.bias": (cfg.mlp_hidden,),
            p + "ffn.fc2.weight": (cfg.mlp_hidden, d),
            p + "ffn.fc2.bias": (d,),
            p + "ln2.gain": (d,),
            p + "ln2.shift": (d,),
        })
    h = cfg.head_hidden
    shapes.update({
        "head.fc1.weight": (d, h),
        "head.fc1.bias": (h,),
        "head.fc2.weight": (h, h),
        "head.fc2.bias": (h,),
    })
    for task, k in (("stage", cfg.n_stage_classes), ("apnea", cfg.n_apnea_classes)):
        shapes.update({
            f"{task}.hidden.weight": (h, cfg.branch_hidden),
            f"{task}.hidden.bias": (cfg.branch_hidden,),
            f"{task}.out.weight": (cfg.branch_hidden, k),
            f"{task}.out.bias": (k,),
        })
    return shapes


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices and the patch kernel only."""
    return name.endswith(".weight") or name == "patch.kernel"


@dataclass
class ModelParams:
    config: ModelConfig
    tensors: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return (self.config == other.config and list(self.tensors) == list(other.tensors)
                and all(a.dtype == b.dtype and np.array_equal(a, b)
                        for a, b in zip(self.tensors.values(), other.tensors.values())))


def truncated_normal(rng: np.random.Generator, shape, std: float, bound: float = 2.0) -> np.ndarray:
    """Normal draws with |z| > bound redrawn until none remain."""
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Truncated-normal (std 0.02, cut at 2 std) weights; zero biases and embeddings."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif is_decayed(name):
            arr = truncated_normal(rng, shape, std=0.02)
        else:
            arr = np.zeros(shape)
        tensors[name] = np.asarray(arr, dtype=dtype)
    return ModelParams(config, tensors)


@dataclass
class AttentionBundle:
    """Attention probabilities per layer and head.

    ``attention`` is ``[layers, heads, tokens, tokens]`` for one example or
    ``[batch, layers, heads, tokens, tokens]`` for a batch; indexing a
    batched bundle yields the single-example bundle.
    """

    attention: np.ndarray

    @property
    def batched(self) -> bool:
        return self.attention.ndim == 5

    def __len__(self) -> int:
        return self.attention.shape[0] if self.batched else 1

    def __getitem__(self, i) -> "AttentionBundle":
        if not self.batched:
            raise IndexError("bundle holds a single example")
        return AttentionBundle(self.attention[i])

    @property
    def n_layers(self) -> int:
        return self.attention.shape[-4]


def as_leaves(params: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in params.tensors.items()}


def forward_tensors(
    p: dict[str, Tensor],
    config: ModelConfig,
    x,
    training: bool = False,
    rng: np.random.Generator | None = None,
    capture: bool = True,
):
    """Forward pass on Tensor parameters; returns (stage_probs, apnea_probs, attention list).

    In training mode dropout and stochastic depth draw from ``rng``.
    """
    x = nx.as_tensor(x, p["patch.kernel"].dtype)
    if x.ndim != 3 or x.shape[1:] != (config.input_channels, config.input_length):
        raise ValueError(f"input shape mismatch: expected [B, {config.input_channels}, "
                         f"{config.input_length}], got {list(x.shape)}")
    if training and rng is None:
        raise ValueError("training mode needs an rng")
    b = x.shape[0]
    d = config.d_model
    dtype = x.dtype
    rate = config.dropout_rate
    surv = config.stochastic_depth_survival

    def drop(t: Tensor) -> Tensor:
        return nx.apply_mask(t, nx.dropout_mask(t.shape, rate, rng, training, dtype))

    def gate(t: Tensor) -> Tensor:
        g = nx.stochastic_depth_gate(surv, rng, size=b, training=training)
        return t if g is None else nx.apply_mask(t, g.reshape(b, 1, 1))

    patches = nx.conv1d(x, p["patch.kernel"], p["patch.bias"], config.patch_stride)
    tokens = nx.transpose(patches, (0, 2, 1))  # [B, P, d]
    cls = nx.broadcast_to(nx.reshape(p["cls_token"], (1, 1, d)), (b, 1, d))
    z = nx.add(nx.concat([cls, tokens], axis=1), p["pos_embed"])
    z = drop(z)

    captured = []
    for i in range(config.n_layers):
        q = f"layers.{i}."
        attn_mask = nx.dropout_mask((b, config.n_heads, config.n_tokens, config.n_tokens),
                                    rate, rng, training, dtype)
        a, attn = nx.multi_head_attention(
            z, p[q + "attn.qkv.weight"], p[q + "attn.qkv.bias"],
            p[q + "attn.out.weight"], p[q + "attn.out.bias"], config.n_heads, attn_mask)
        if capture:
            captured.append(attn)
        z = nx.layer_norm(nx.add(z, gate(drop(a))), p[q + "ln1.gain"], p[q + "ln1.shift"])
        h = drop(nx.gelu(nx.linear(z, p[q + "ffn.fc1.weight"], p[q + "ffn.fc1.bias"])))
        h = nx.linear(h, p[q + "ffn.fc2.weight"], p[q + "ffn.fc2.bias"])
        z = nx.layer_norm(nx.add(z, gate(drop(h))), p[q + "ln2.gain"], p[q + "ln2.shift"])

    c = nx.getitem(z, (slice(None), 0))
    c = drop(nx.gelu(nx.linear(c, p["head.fc1.weight"], p["head.fc1.bias"])))
    c = drop(nx.gelu(nx.linear(c, p["head.fc2.weight"], p["head.fc2.bias"])))

    outs = []
    for task in ("stage", "apnea"):
        h = nx.relu(nx.linear(c, p[f"{task}.hidden.weight"], p[f"{task}.hidden.bias"]))
        logits = nx.linear(h, p[f"{task}.out.weight"], p[f"{task}.out.bias"])
        outs.append(nx.check_finite(nx.softmax(logits, axis=-1), f"{task} branch"))
    return outs[0], outs[1], captured


def forward(params: ModelParams, batch, mode: str = "eval",
            rng: np.random.Generator | None = None, capture: bool = True):
    """Run the model on ``batch`` [B, 4, 1920].

    Returns ``(stage_probs [B,5], apnea_probs [B,4], AttentionBundle)`` as
    numpy arrays; the bundle is ``None`` when ``capture`` is off.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    stage, apnea, attn = forward_tensors(as_leaves(params), params.config, batch,
                                         training=mode == "train", rng=rng, capture=capture)
    bundle = AttentionBundle(np.stack(attn, axis=1)) if capture else None
    return stage.data, apnea.data, bundle


def predict(params: ModelParams, x: np.ndarray, batch_size: int = 64):
    """Eval-mode class probabilities for many examples, batch by batch."""
    leaves = as_leaves(params)
    stage, apnea = [], []
    for s in range(0, len(x), batch_size):
        ps, pa, _ = forward_tensors(leaves, params.config, x[s:s + batch_size], capture=False)
        stage.append(ps.data)
        apnea.append(pa.data)
    k1, k2 = params.config.n_stage_classes, params.config.n_apnea_classes
    return (np.concatenate(stage) if stage else np.zeros((0, k1)),
            np.concatenate(apnea) if apnea else np.zeros((0, k2)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, path, extra: dict | None = None) -> None:
    """Single-file checkpoint: magic, version, JSON header, raw little-endian tensors.

    The header holds the model config, and per tensor its dtype, shape,
    byte offset and CRC-32; the header itself is covered by a CRC-32 too.
    """
    index, blobs, offset = [], [], 0
    for name, arr in params.tensors.items():
        dt = "<f8" if arr.dtype == np.float64 else "<f4"
        blob = np.ascontiguousarray(arr, dtype=dt).tobytes()
        index.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(blob), "crc32": zlib.crc32(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": params.config.to_dict(), "tensors": index,
                         "extra": extra or {}}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, len(header), zlib.crc32(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_config: ModelConfig | None = None) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"not a checkpoint file: {path}")
    version, hlen, hcrc = struct.unpack("<III", raw[8:20])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"version mismatch: file has {version}, "
                              f"reader supports {CHECKPOINT_VERSION}")
    header = raw[20:20 + hlen]
    if zlib.crc32(header) != hcrc:
        raise CheckpointError("checksum mismatch in checkpoint header")
    meta = json.loads(header)
    config = ModelConfig.from_dict(meta["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError("config mismatch between checkpoint and requested model")
    shapes = param_shapes(config)
    body = raw[20 + hlen:]
    tensors = {}
    for entry in meta["tensors"]:
        blob = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(blob) != entry["nbytes"] or zlib.crc32(blob) != entry["crc32"]:
            raise CheckpointError(f"checksum mismatch in tensor {entry['name']}")
        arr = np.frombuffer(blob, dtype=entry["dtype"]).reshape(entry["shape"])
        if tuple(arr.shape) != shapes.get(entry["name"]):
            raise CheckpointError(f"config mismatch: tensor {entry['name']} has shape "
                                  f"{arr.shape}")
        tensors[entry["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    if list(tensors) != list(shapes):
        raise CheckpointError("config mismatch: tensor set differs from config")
    return ModelParams(config, tensors)


def checkpoint_extra(path) -> dict:
    raw = Path(path).read_bytes()
    _, hlen, _ = struct.unpack("<III", raw[8:20])
    return json.loads(raw[20:20 + hlen]).get("extra", {})
