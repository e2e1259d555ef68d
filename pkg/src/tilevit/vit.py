"""Vision transformer built on the tape module.

The model takes a (3, S, S) image tensor, cuts it into non-overlapping
patches, linearly embeds each patch, prepends a learned class token, adds
learned positional embeddings, runs a stack of encoder blocks (multi-head
self-attention plus a GELU feed-forward, each wrapped in residual + layer
norm), and classifies from the class-token row.

Parameters live in a flat name -> Tensor mapping with fixed canonical names,
serialized to a single binary container file.
"""

from __future__ import annotations

import dataclasses
import json
import math
import struct
from typing import Iterator, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError, FormatError

CONTAINER_DTYPES = {"f64": np.float64, "f32": np.float32}


@dataclasses.dataclass
class ViTConfig:
    """Model geometry. All extents are validated on construction."""

    num_classes: int
    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 768
    depth: int = 12
    heads: int = 12
    mlp_ratio: float = 4.0
    norm_placement: str = "post"
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.image_size < 1 or self.patch_size < 1:
            raise ConfigError("image_size and patch_size must be positive")
        if self.image_size % self.patch_size != 0:
            raise ConfigError(
                f"patch_size {self.patch_size} must divide image_size {self.image_size}"
            )
        if self.embed_dim < 1 or self.depth < 1 or self.heads < 1:
            raise ConfigError("embed_dim, depth, and heads must be positive")
        if self.embed_dim % self.heads != 0:
            raise ConfigError(f"heads {self.heads} must divide embed_dim {self.embed_dim}")
        if self.mlp_ratio <= 0:
            raise ConfigError(f"mlp_ratio must be positive, got {self.mlp_ratio}")
        if self.mlp_dim < 1:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} gives empty hidden layer")
        if self.norm_placement not in ("post", "pre"):
            raise ConfigError(f"norm_placement must be 'post' or 'pre', got {self.norm_placement!r}")
        if self.layer_norm_eps <= 0:
            raise ConfigError(f"layer_norm_eps must be positive, got {self.layer_norm_eps}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def seq_len(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "ViTConfig":
        fields = {f.name for f in dataclasses.fields(ViTConfig)}
        unknown = set(d) - fields
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return ViTConfig(**d)


def parameter_shapes(cfg: ViTConfig) -> dict[str, tuple]:
    """Canonical parameter names and shapes, in creation order."""
    d, n = cfg.embed_dim, cfg.num_patches
    shapes: dict[str, tuple] = {
        "patch_weight": (cfg.patch_dim, d),
        "patch_bias": (d,),
        "cls_token": (d,),
        "pos_embed": (n + 1, d),
    }
    for i in range(cfg.depth):
        p = f"block{i}."
        shapes[p + "attn_q_weight"] = (d, d)
        shapes[p + "attn_k_weight"] = (d, d)
        shapes[p + "attn_v_weight"] = (d, d)
        shapes[p + "attn_out_weight"] = (d, d)
        shapes[p + "norm1_gamma"] = (d,)
        shapes[p + "norm1_beta"] = (d,)
        shapes[p + "ffn_in_weight"] = (d, cfg.mlp_dim)
        shapes[p + "ffn_out_weight"] = (cfg.mlp_dim, d)
        shapes[p + "norm2_gamma"] = (d,)
        shapes[p + "norm2_beta"] = (d,)
    shapes["head_weight"] = (d, cfg.num_classes)
    shapes["head_bias"] = (cfg.num_classes,)
    return shapes


class ModelParams:
    """Ordered name -> Tensor map holding every trainable parameter."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._tensors[name]
        except KeyError:
            raise ContractError(f"no parameter named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def with_updates(self, updates: dict[str, Tensor]) -> "ModelParams":
        """Functional update: returns a new map replacing the named entries."""
        unknown = set(updates) - set(self._tensors)
        if unknown:
            raise ContractError(f"with_updates got unknown names: {sorted(unknown)}")
        merged = dict(self._tensors)
        for name, tensor in updates.items():
            if tensor.shape != self._tensors[name].shape:
                raise DimensionError(
                    f"with_updates: {name} shape {tensor.shape} != {self._tensors[name].shape}"
                )
            merged[name] = tensor
        return ModelParams(merged)

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.zero_grad()

    def total_count(self) -> int:
        return sum(t.size for t in self._tensors.values())


def _truncated_normal(rng: np.random.Generator, shape: tuple, std: float) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within two deviations."""
    out = rng.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_params(cfg: ViTConfig, seed: int = 0, std: float = 0.02) -> ModelParams:
    """Fresh parameters: truncated normal for projection weights and
    positional embeddings; zeros for biases, norm shifts, and the class
    token; ones for norm scales. Draws happen in canonical name order so a
    seed pins every value."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf in ("patch_bias", "head_bias", "norm1_beta", "norm2_beta", "cls_token"):
            data = np.zeros(shape)
        elif leaf in ("norm1_gamma", "norm2_gamma"):
            data = np.ones(shape)
        else:
            data = _truncated_normal(rng, shape, std)
        tensors[name] = Tensor(data, requires_grad=True)
    return ModelParams(tensors)


# ---------------------------------------------------------------------------
# forward pieces


def patchify(image: Tensor, patch_size: int) -> Tensor:
    """(3, S, S) image -> (N, patch_size^2 * 3) rows of flattened patches.

    Patches run in raster order. Within a row, the layout matches flattening
    a (patch_size, patch_size, 3) window, channels fastest.
    """
    if image.ndim != 3 or image.shape[0] != 3:
        raise DimensionError(f"patchify expects shape (3, S, S), got {image.shape}")
    _, h, w = image.shape
    if h != w:
        raise DimensionError(f"patchify expects a square image, got {image.shape}")
    if patch_size < 1 or h % patch_size != 0:
        raise ConfigError(f"patch_size {patch_size} must divide image size {h}")
    g = h // patch_size
    n = g * g
    row_len = patch_size * patch_size * 3

    def fwd(arr: np.ndarray) -> np.ndarray:
        hwc = arr.transpose(1, 2, 0)
        blocks = hwc.reshape(g, patch_size, g, patch_size, 3)
        return blocks.transpose(0, 2, 1, 3, 4).reshape(n, row_len)

    def back(grad_rows: np.ndarray):
        blocks = grad_rows.reshape(g, g, patch_size, patch_size, 3)
        hwc = blocks.transpose(0, 2, 1, 3, 4).reshape(h, w, 3)
        return (hwc.transpose(2, 0, 1),)

    return ad.custom_op("patchify", fwd(image.data), (image,), back)


def embed_sequence(image: Tensor, params: ModelParams, cfg: ViTConfig) -> Tensor:
    """Patch rows -> embedded token sequence of shape (seq_len, embed_dim).

    Row 0 is the class token; rows 1..N are patch embeddings. Positional
    embeddings are added to every row, the class token's included.
    """
    patches = patchify(image, cfg.patch_size)
    bias = ad.broadcast_to(ad.reshape(params["patch_bias"], (1, cfg.embed_dim)), patches.shape[:1] + (cfg.embed_dim,))
    embedded = ad.matmul(patches, params["patch_weight"]) + bias
    cls_row = ad.reshape(params["cls_token"], (1, cfg.embed_dim))
    sequence = ad.concat([cls_row, embedded], axis=0)
    return sequence + params["pos_embed"]


def attention(
    x: Tensor,
    q_weight: Tensor,
    k_weight: Tensor,
    v_weight: Tensor,
    out_weight: Tensor,
    heads: int,
) -> Tensor:
    """Multi-head self-attention over a (T, D) sequence.

    Each head reads its own D/heads slice of the shared Q/K/V projections,
    scores with scaled dot products (1/sqrt(head_dim)), softmaxes over keys,
    and the concatenated head outputs pass through the output projection.
    """
    t, d = x.shape
    if d % heads != 0:
        raise DimensionError(f"heads {heads} must divide model width {d}")
    head_dim = d // heads
    q = ad.matmul(x, q_weight)
    k = ad.matmul(x, k_weight)
    v = ad.matmul(x, v_weight)
    outputs = []
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    for h in range(heads):
        lo, hi = h * head_dim, (h + 1) * head_dim
        qh = ad.slice_(q, (slice(None), slice(lo, hi)))
        kh = ad.slice_(k, (slice(None), slice(lo, hi)))
        vh = ad.slice_(v, (slice(None), slice(lo, hi)))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), inv_sqrt)
        weights = ad.softmax(scores)
        outputs.append(ad.matmul(weights, vh))
    merged = ad.concat(outputs, axis=1)
    return ad.matmul(merged, out_weight)


def feed_forward(x: Tensor, in_weight: Tensor, out_weight: Tensor) -> Tensor:
    return ad.matmul(ad.gelu(ad.matmul(x, in_weight)), out_weight)


def encoder_block(x: Tensor, params: ModelParams, index: int, cfg: ViTConfig) -> Tensor:
    """One transformer block.

    post (default): x = LN1(x + attn(x)); x = LN2(x + ffn(x))
    pre:            x = x + attn(LN1(x)); x = x + ffn(LN2(x))
    """
    p = f"block{index}."
    eps = cfg.layer_norm_eps

    def attn(u: Tensor) -> Tensor:
        return attention(
            u,
            params[p + "attn_q_weight"],
            params[p + "attn_k_weight"],
            params[p + "attn_v_weight"],
            params[p + "attn_out_weight"],
            cfg.heads,
        )

    def ffn(u: Tensor) -> Tensor:
        return feed_forward(u, params[p + "ffn_in_weight"], params[p + "ffn_out_weight"])

    if cfg.norm_placement == "post":
        x = ad.layer_norm(x + attn(x), params[p + "norm1_gamma"], params[p + "norm1_beta"], eps)
        x = ad.layer_norm(x + ffn(x), params[p + "norm2_gamma"], params[p + "norm2_beta"], eps)
    else:
        x = x + attn(ad.layer_norm(x, params[p + "norm1_gamma"], params[p + "norm1_beta"], eps))
        x = x + ffn(ad.layer_norm(x, params[p + "norm2_gamma"], params[p + "norm2_beta"], eps))
    return x


@dataclasses.dataclass
class ForwardResult:
    logits: Tensor
    probs: Tensor


def forward_logits(image: Tensor, params: ModelParams, cfg: ViTConfig) -> Tensor:
    """Full forward pass for one image; returns class logits of shape (C,)."""
    if image.shape != (3, cfg.image_size, cfg.image_size):
        raise DimensionError(
            f"model expects shape (3, {cfg.image_size}, {cfg.image_size}), got {image.shape}"
        )
    x = embed_sequence(image, params, cfg)
    for i in range(cfg.depth):
        x = encoder_block(x, params, i, cfg)
    cls = ad.reshape(ad.slice_(x, (0, slice(None))), (1, cfg.embed_dim))
    logits = ad.matmul(cls, params["head_weight"]) + ad.reshape(params["head_bias"], (1, cfg.num_classes))
    return ad.reshape(logits, (cfg.num_classes,))


def forward(image: Tensor, params: ModelParams, cfg: ViTConfig) -> ForwardResult:
    logits = forward_logits(image, params, cfg)
    probs = ad.softmax(logits)
    return ForwardResult(logits=logits, probs=probs)


def predict(probs) -> int:
    """Class index for a probability vector: argmax, lowest index on ties."""
    vec = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    if vec.ndim != 1 or vec.size < 1:
        raise ContractError(f"predict expects a 1-D probability vector, got shape {vec.shape}")
    return int(np.argmax(vec))


class Model:
    """Convenience bundle of config plus parameters."""

    def __init__(self, cfg: ViTConfig, params: Optional[ModelParams] = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed=seed)

    def forward(self, image: Tensor) -> ForwardResult:
        return forward(image, self.params, self.cfg)

    def predict(self, image: Tensor) -> int:
        return predict(self.forward(image).probs)


# ---------------------------------------------------------------------------
# weight container

_LENGTH_PREFIX = struct.Struct("<Q")


def write_container(path: str, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to one file.

    Layout: 8-byte little-endian header length, then a compact JSON list of
    {name, shape, dtype, byte_offset} entries (offsets relative to the start
    of the payload), then the raw little-endian row-major array bytes.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            tag = "f64"
        elif arr.dtype == np.float32:
            tag = "f32"
        else:
            raise ContractError(f"container only stores f64/f32, {name} is {arr.dtype}")
        data = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "dtype": tag, "byte_offset": offset}
        )
        chunks.append(data)
        offset += len(data)
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LENGTH_PREFIX.pack(len(header)))
        fh.write(header)
        for chunk in chunks:
            fh.write(chunk)


def read_container(path: str) -> dict[str, np.ndarray]:
    """Read a container written by write_container; byte-exact round trip."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _LENGTH_PREFIX.size:
        raise FormatError(f"{path}: too short for a container header")
    (header_len,) = _LENGTH_PREFIX.unpack_from(blob, 0)
    header_end = _LENGTH_PREFIX.size + header_len
    if header_end > len(blob):
        raise FormatError(f"{path}: header length {header_len} exceeds file size")
    try:
        entries = json.loads(blob[_LENGTH_PREFIX.size : header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad container header ({e})") from e
    if not isinstance(entries, list):
        raise FormatError(f"{path}: container header must be a list")
    payload = blob[header_end:]
    arrays: dict[str, np.ndarray] = {}
    for entry in entries:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            tag = entry["dtype"]
            start = int(entry["byte_offset"])
        except (TypeError, KeyError, ValueError) as e:
            raise FormatError(f"{path}: malformed header entry {entry!r}") from e
        if tag not in CONTAINER_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag!r} for {name}")
        dtype = np.dtype(CONTAINER_DTYPES[tag]).newbyteorder("<")
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        end = start + count * dtype.itemsize
        if start < 0 or end > len(payload):
            raise FormatError(f"{path}: {name} payload [{start}, {end}) outside file")
        arr = np.frombuffer(payload[start:end], dtype=dtype).reshape(shape)
        arrays[name] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays


def save_weights(path: str, params: ModelParams) -> None:
    write_container(path, {name: t.data for name, t in params.items()})


def load_weights(path: str, cfg: Optional[ViTConfig] = None, requires_grad: bool = True) -> ModelParams:
    """Load parameters from a container. With a config, the name set and
    every shape are validated against it; errors name the offending tensor."""
    arrays = read_container(path)
    if cfg is not None:
        expected = parameter_shapes(cfg)
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        if missing:
            detail = ", ".join(f"{name} {expected[name]}" for name in missing[:4])
            raise FormatError(f"{path}: missing parameters: {detail}")
        if extra:
            raise FormatError(f"{path}: unexpected parameters {extra[:4]}")
        for name, shape in expected.items():
            if arrays[name].shape != shape:
                raise FormatError(
                    f"{path}: {name} has shape {arrays[name].shape}, expected {shape}"
                )
        ordered = {name: arrays[name] for name in expected}
    else:
        ordered = arrays
    return ModelParams({name: Tensor(a, requires_grad=requires_grad) for name, a in ordered.items()})
