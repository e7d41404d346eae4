"""A small Vision Transformer implemented functionally over a named
parameter dictionary.

The parameter set is a plain ``dict[str, torch.Tensor]`` whose keys and
shapes are fully determined by :class:`ViTConfig`. Keeping parameters
explicit (instead of inside an ``nn.Module``) makes the teacher/student
bookkeeping, checkpointing, hand-rolled AdamW, and float64 gradient checks
straightforward.

Forward pass: patchify -> linear patch projection -> prepend class token ->
add learned position embeddings -> L pre-norm transformer blocks
(multi-head self-attention + MLP with residuals) -> final layer norm.
Alongside the (P+1) x d token sequence, the forward returns the last
layer's pre-softmax attention logits of the class-token query against the
P patch keys, one row per head.
"""

from __future__ import annotations

import io
import math
import json
import struct
from dataclasses import asdict, dataclass
from typing import Callable, Dict, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError, FormatError, InputError, NumericalError

ParamSet = Dict[str, torch.Tensor]

CHECKPOINT_MAGIC = b"DSTL"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    channels: int = 3
    dim: int = 64
    depth: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    num_classes: int | None = None

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide dim {self.dim}")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_json(self) -> dict:
        d = asdict(self)
        if d["num_classes"] is None:
            d.pop("num_classes")
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "ViTConfig":
        known = {"image_size", "patch_size", "channels", "dim", "depth", "heads",
                 "mlp_ratio", "num_classes"}
        unknown = set(obj) - known
        if unknown:
            raise FormatError(f"unknown ViTConfig keys: {sorted(unknown)}")
        return cls(**obj)


def param_shapes(config: ViTConfig) -> Dict[str, Tuple[int, ...]]:
    """Names and shapes of every tensor in a ParamSet for ``config``."""
    d, p = config.dim, config.num_patches
    in_dim = config.patch_size ** 2 * config.channels
    hidden = config.dim * config.mlp_ratio
    shapes: Dict[str, Tuple[int, ...]] = {
        "patch_embed.weight": (d, in_dim),
        "patch_embed.bias": (d,),
        "cls_token": (d,),
        "pos_embed": (p + 1, d),
    }
    for i in range(config.depth):
        b = f"blocks.{i}"
        shapes[f"{b}.norm1.weight"] = (d,)
        shapes[f"{b}.norm1.bias"] = (d,)
        shapes[f"{b}.attn.qkv.weight"] = (3 * d, d)
        shapes[f"{b}.attn.qkv.bias"] = (3 * d,)
        shapes[f"{b}.attn.proj.weight"] = (d, d)
        shapes[f"{b}.attn.proj.bias"] = (d,)
        shapes[f"{b}.norm2.weight"] = (d,)
        shapes[f"{b}.norm2.bias"] = (d,)
        shapes[f"{b}.mlp.fc1.weight"] = (hidden, d)
        shapes[f"{b}.mlp.fc1.bias"] = (hidden,)
        shapes[f"{b}.mlp.fc2.weight"] = (d, hidden)
        shapes[f"{b}.mlp.fc2.bias"] = (d,)
    shapes["norm.weight"] = (d,)
    shapes["norm.bias"] = (d,)
    if config.num_classes is not None:
        shapes["head.weight"] = (config.num_classes, d)
        shapes["head.bias"] = (config.num_classes,)
    return shapes


def _trunc_normal(shape, std, gen):
    # resample-free truncation at 2 std via clamping
    t = torch.empty(shape, dtype=torch.float32)
    t.normal_(0.0, std, generator=gen)
    return t.clamp_(-2 * std, 2 * std)


def init_params(config: ViTConfig, seed: int) -> ParamSet:
    """Deterministic initialization: Xavier-uniform linear weights,
    truncated-normal (std 0.02) position embeddings, zero biases and class
    token, unit layer-norm gains. Same seed yields an identical ParamSet.

    Xavier scaling matters at this model size: a uniform small-std init
    leaves the output nearly input-independent and optimization stalls.
    """
    gen = torch.Generator().manual_seed(seed)
    params: ParamSet = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".bias") or name == "cls_token":
            params[name] = torch.zeros(shape, dtype=torch.float32)
        elif "norm" in name and name.endswith("weight"):
            params[name] = torch.ones(shape, dtype=torch.float32)
        elif name == "pos_embed":
            params[name] = _trunc_normal(shape, 0.02, gen)
        else:
            fan_out, fan_in = shape[0], shape[1]
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            t = torch.empty(shape, dtype=torch.float32)
            t.uniform_(-bound, bound, generator=gen)
            params[name] = t
    return params


def clone_params(params: ParamSet) -> ParamSet:
    return {k: v.detach().clone() for k, v in params.items()}


def _check_params(params: ParamSet, config: ViTConfig) -> None:
    expected = param_shapes(config)
    for name, shape in expected.items():
        if name not in params:
            raise InputError(f"missing parameter tensor {name!r}")
        if tuple(params[name].shape) != shape:
            raise InputError(
                f"parameter {name!r} has shape {tuple(params[name].shape)}, expected {shape}"
            )


def patchify(img: torch.Tensor, config: ViTConfig) -> torch.Tensor:
    """(B, H, W, C) -> (B, P, patch*patch*C), row-major patch order."""
    b, h, w, c = img.shape
    if h != config.image_size or w != config.image_size or c != config.channels:
        raise InputError(
            f"image shape {(h, w, c)} does not match config "
            f"({config.image_size}, {config.image_size}, {config.channels})"
        )
    ps = config.patch_size
    g = h // ps
    x = img.reshape(b, g, ps, g, ps, c)
    x = x.permute(0, 1, 3, 2, 4, 5)  # (B, gh, gw, ps, ps, C)
    return x.reshape(b, g * g, ps * ps * c)


def to_batch(img: np.ndarray | torch.Tensor, dtype=torch.float32) -> torch.Tensor:
    """Accept one (H, W, C) image or a (B, H, W, C) batch; return a batch tensor."""
    t = torch.as_tensor(np.asarray(img), dtype=dtype) if not isinstance(img, torch.Tensor) else img.to(dtype)
    if t.ndim == 3:
        t = t.unsqueeze(0)
    if t.ndim != 4:
        raise InputError(f"expected (H, W, C) or (B, H, W, C), got shape {tuple(t.shape)}")
    return t


def patch_embeddings(params: ParamSet, config: ViTConfig, img) -> torch.Tensor:
    """Pre-block patch embeddings (projection + position), no class token.

    Exposed so tests can confirm that masking one region leaves untouched
    patches' embeddings identical before any attention mixing.
    """
    x = patchify(to_batch(img, params["patch_embed.weight"].dtype), config)
    emb = F.linear(x, params["patch_embed.weight"], params["patch_embed.bias"])
    return emb + params["pos_embed"][1:]


def forward(params: ParamSet, config: ViTConfig, img) -> Tuple[torch.Tensor, torch.Tensor]:
    """Full forward pass.

    Returns ``(tokens, attn_logits)`` where tokens is (B, P+1, d) and
    attn_logits is (B, K, P): the last layer's scaled dot-product scores of
    the class-token query against the patch keys, before softmax (the
    cls->cls entry is excluded).
    """
    _check_params(params, config)
    dtype = params["patch_embed.weight"].dtype
    imgs = to_batch(img, dtype)
    x = patchify(imgs, config)
    x = F.linear(x, params["patch_embed.weight"], params["patch_embed.bias"])
    bsz = x.shape[0]
    cls = params["cls_token"].expand(bsz, 1, -1)
    x = torch.cat([cls, x], dim=1) + params["pos_embed"]

    k_heads, hd = config.heads, config.head_dim
    n = x.shape[1]
    attn_logits = None
    for i in range(config.depth):
        b = f"blocks.{i}"
        h = F.layer_norm(x, (config.dim,), params[f"{b}.norm1.weight"], params[f"{b}.norm1.bias"])
        qkv = F.linear(h, params[f"{b}.attn.qkv.weight"], params[f"{b}.attn.qkv.bias"])
        qkv = qkv.reshape(bsz, n, 3, k_heads, hd).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]  # (B, K, N, hd)
        scores = (q @ k.transpose(-2, -1)) * (hd ** -0.5)  # (B, K, N, N)
        if i == config.depth - 1:
            attn_logits = scores[:, :, 0, 1:]
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, n, config.dim)
        x = x + F.linear(out, params[f"{b}.attn.proj.weight"], params[f"{b}.attn.proj.bias"])
        h = F.layer_norm(x, (config.dim,), params[f"{b}.norm2.weight"], params[f"{b}.norm2.bias"])
        h = F.linear(h, params[f"{b}.mlp.fc1.weight"], params[f"{b}.mlp.fc1.bias"])
        h = F.gelu(h)
        h = F.linear(h, params[f"{b}.mlp.fc2.weight"], params[f"{b}.mlp.fc2.bias"])
        x = x + h

    tokens = F.layer_norm(x, (config.dim,), params["norm.weight"], params["norm.bias"])
    return tokens, attn_logits


def classify(params: ParamSet, config: ViTConfig, img) -> torch.Tensor:
    """Linear head on the class token; returns (B, num_classes) logits."""
    if config.num_classes is None or "head.weight" not in params:
        raise ConfigError("classifier head not configured; set num_classes and attach a head")
    tokens, _ = forward(params, config, img)
    return F.linear(tokens[:, 0], params["head.weight"], params["head.bias"])


def attach_head(params: ParamSet, config: ViTConfig, num_classes: int, seed: int) -> Tuple[ParamSet, ViTConfig]:
    """Return a copy of ``params`` with a freshly initialized classifier head."""
    cfg = ViTConfig(**{**asdict(config), "num_classes": num_classes})
    gen = torch.Generator().manual_seed(seed)
    out = clone_params(params)
    out.pop("head.weight", None)
    out.pop("head.bias", None)
    out["head.weight"] = _trunc_normal((num_classes, config.dim), 0.02, gen)
    out["head.bias"] = torch.zeros(num_classes, dtype=torch.float32)
    return out, cfg


def grad(
    params: ParamSet,
    config: ViTConfig,
    loss_fn: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
    img,
) -> Tuple[float, ParamSet]:
    """Loss value and exact gradients of ``loss_fn(tokens, attn_logits)``
    with respect to every parameter tensor."""
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.items()}
    tokens, attn_logits = forward(leaves, config, img)
    loss = loss_fn(tokens, attn_logits)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss encountered: {loss.item()!r}")
    names = list(leaves)
    grads = torch.autograd.grad(loss, [leaves[n] for n in names], allow_unused=True)
    out = {
        n: (g.detach() if g is not None else torch.zeros_like(leaves[n]))
        for n, g in zip(names, grads)
    }
    return float(loss.detach()), out


def params_hash(params: ParamSet) -> str:
    """SHA-256 over names, shapes, and raw float32 bytes, order-independent."""
    import hashlib

    h = hashlib.sha256()
    for name in sorted(params):
        t = params[name].detach().to(torch.float32).contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(path, params: ParamSet, config: ViTConfig) -> None:
    """Write the bit-exact binary checkpoint format (magic "DSTL")."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    cfg_blob = json.dumps(config.to_json(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<Q", len(cfg_blob)))
    buf.write(cfg_blob)
    buf.write(struct.pack("<Q", len(params)))
    for name in sorted(params):
        t = params[name].detach().to(torch.float32).contiguous()
        name_b = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(name_b)))
        buf.write(name_b)
        buf.write(struct.pack("<I", t.ndim))
        for dim in t.shape:
            buf.write(struct.pack("<Q", dim))
        buf.write(t.numpy().astype("<f4").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> Tuple[ParamSet, ViTConfig]:
    with open(path, "rb") as f:
        data = f.read()
    view = io.BytesIO(data)

    def read(n, what):
        b = view.read(n)
        if len(b) != n:
            raise FormatError(f"checkpoint truncated while reading {what}")
        return b

    if read(4, "magic") != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic; expected 'DSTL'")
    (version,) = struct.unpack("<I", read(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<Q", read(8, "config length"))
    config = ViTConfig.from_json(json.loads(read(cfg_len, "config").decode("utf-8")))
    (count,) = struct.unpack("<Q", read(8, "tensor count"))
    params: ParamSet = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<Q", read(8, "name length"))
        name = read(name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", read(4, "rank"))
        dims = struct.unpack(f"<{rank}Q", read(8 * rank, "dims"))
        size = int(np.prod(dims)) if rank else 1
        raw = read(4 * size, f"tensor {name}")
        arr = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
        params[name] = torch.from_numpy(arr)
    _check_params(params, config)
    return params, config
