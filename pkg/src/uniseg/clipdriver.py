"""Language branch: fixed per-class text embeddings, the per-class affine
parameter generator, and the three-layer 1x1x1 conditional-convolution
segmentation heads (sigmoid output, one binary map per class).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import nnops
from .errors import EmbeddingDimMismatch, LpgDimMismatch, MissingEmbedding
from .taxonomy import Taxonomy

HEAD_CHANNELS = 8  # width of the first two head layers; the third has 1
_UEMB_MAGIC = "UEMB1"


# ---------------------------------------------------------------------------
# embedding store


@dataclass
class EmbeddingStore:
    """Class-index-keyed fixed embedding vectors, all of one dimension."""

    vectors: dict[int, np.ndarray]
    dim: int
    source: str = "unknown"

    def __post_init__(self):
        for cls, v in self.vectors.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (self.dim,):
                raise EmbeddingDimMismatch(
                    f"class {cls}: vector has shape {v.shape}, store dim {self.dim}")
            if not np.isfinite(v).all():
                raise EmbeddingDimMismatch(f"class {cls}: non-finite embedding")
            self.vectors[cls] = v

    def __contains__(self, cls: int) -> bool:
        return cls in self.vectors

    def __len__(self) -> int:
        return len(self.vectors)

    def get(self, cls: int) -> np.ndarray:
        try:
            return self.vectors[cls]
        except KeyError:
            raise MissingEmbedding(f"no embedding stored for class {cls}") from None

    def add(self, cls: int, vector: np.ndarray) -> None:
        v = np.asarray(vector, dtype=np.float64)
        if v.shape != (self.dim,):
            raise EmbeddingDimMismatch(
                f"class {cls}: vector has shape {v.shape}, store dim {self.dim}")
        self.vectors[cls] = v


def load_embeddings(path) -> EmbeddingStore:
    """Parse a UEMB1 text file: header ``UEMB1 <dim> <source>``, then one
    ``<class> <v1> ... <vdim>`` line per class. A duplicated class line wins
    last and warns."""
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) < 2 or header[0] != _UEMB_MAGIC:
            raise EmbeddingDimMismatch(f"{path}: missing {_UEMB_MAGIC} header")
        dim = int(header[1])
        source = header[2] if len(header) > 2 else "unknown"
        vectors: dict[int, np.ndarray] = {}
        for lineno, raw in enumerate(fh, 2):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise EmbeddingDimMismatch(
                    f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            cls = int(parts[0])
            if cls in vectors:
                warnings.warn(f"{path}:{lineno}: duplicate embedding for class {cls}; "
                              "keeping the last one")
            vectors[cls] = np.array([float(p) for p in parts[1:]])
    return EmbeddingStore(vectors, dim, source)


def save_embeddings(path, store: EmbeddingStore) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{_UEMB_MAGIC} {store.dim} {store.source}\n")
        for cls in sorted(store.vectors):
            vals = " ".join(format(v, ".9g") for v in store.vectors[cls])
            fh.write(f"{cls} {vals}\n")


def one_hot_store(taxonomy: Taxonomy, dim: int | None = None) -> EmbeddingStore:
    """w_cls = e_cls: the classic orthogonal encoding baseline."""
    indices = taxonomy.indices()
    d = dim if dim is not None else max(indices)
    store = EmbeddingStore({}, d, source="one-hot")
    for cls in indices:
        if cls > d:
            raise EmbeddingDimMismatch(f"class {cls} exceeds one-hot dim {d}")
        v = np.zeros(d)
        v[cls - 1] = 1.0
        store.add(cls, v)
    return store


def structured_store(taxonomy: Taxonomy) -> EmbeddingStore:
    """Embeddings with shared components for related classes: one block
    identifies the class, a second block identifies its inclusion root, so
    a tumor shares half its code with its host organ."""
    indices = taxonomy.indices()
    d = max(indices)

    def root(cls: int) -> int:
        seen = set()
        while taxonomy[cls].parent is not None and cls not in seen:
            seen.add(cls)
            cls = taxonomy[cls].parent
        return cls

    store = EmbeddingStore({}, 2 * d, source="structured")
    for cls in indices:
        v = np.zeros(2 * d)
        v[cls - 1] = 1.0
        v[d + root(cls) - 1] = 1.0
        store.add(cls, v)
    return store


# ---------------------------------------------------------------------------
# head parameters and the per-class affine generator


def head_param_count(decoder_channels: int) -> int:
    c = HEAD_CHANNELS
    return c * decoder_channels + c + (c * c + c) + (c + 1)


@dataclass
class HeadParams:
    """The three 1x1x1 conv layers of one class head."""

    w1: np.ndarray  # (8, C_dec)
    b1: np.ndarray  # (8,)
    w2: np.ndarray  # (8, 8)
    b2: np.ndarray  # (8,)
    w3: np.ndarray  # (1, 8)
    b3: np.ndarray  # (1,)

    @staticmethod
    def from_flat(theta: np.ndarray, decoder_channels: int) -> "HeadParams":
        c = HEAD_CHANNELS
        want = head_param_count(decoder_channels)
        if theta.shape != (want,):
            raise LpgDimMismatch(f"theta has shape {theta.shape}, expected ({want},)")
        parts = np.split(theta, np.cumsum([c * decoder_channels, c, c * c, c, c]))
        return HeadParams(parts[0].reshape(c, decoder_channels), parts[1],
                          parts[2].reshape(c, c), parts[3],
                          parts[4].reshape(1, c), parts[5])

    def to_flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(),
                               self.b2, self.w3.ravel(), self.b3])


@dataclass
class LpgMap:
    """Per-class affine map from (text embedding (+) pooled image feature)
    to the flattened head parameters. Maps of distinct classes share
    nothing."""

    weight: np.ndarray  # (n_params, d_text + c_last)
    bias: np.ndarray    # (n_params,)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise LpgDimMismatch(
                f"map shapes {self.weight.shape} / {self.bias.shape} inconsistent")

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


def init_lpg_map(rng: np.random.Generator, n_params: int, in_dim: int) -> LpgMap:
    return LpgMap(nnops.he_normal(rng, (n_params, in_dim), in_dim),
                  np.zeros(n_params))


def generate_params(cls: int, w_cls: np.ndarray, f: np.ndarray,
                    lpg: LpgMap, decoder_channels: int):
    """theta_cls = W (w_cls (+) f) + b, reshaped into the three-layer head.

    Returns (HeadParams, flat theta, the concatenated input) so callers can
    run the adjoint without re-concatenating.
    """
    u = np.concatenate([np.asarray(w_cls, dtype=np.float64),
                        np.asarray(f, dtype=np.float64)])
    if u.shape[0] != lpg.in_dim:
        raise LpgDimMismatch(
            f"class {cls}: embedding+feature dim {u.shape[0]} != map input {lpg.in_dim}")
    if lpg.out_dim != head_param_count(decoder_channels):
        raise LpgDimMismatch(
            f"class {cls}: map emits {lpg.out_dim} params, head needs "
            f"{head_param_count(decoder_channels)}")
    theta = lpg.weight @ u + lpg.bias
    return HeadParams.from_flat(theta, decoder_channels), theta, u


def lpg_backward(g_theta: np.ndarray, u: np.ndarray, lpg: LpgMap, d_text: int):
    """Adjoint of generate_params: gradients on the map and on the pooled
    feature half of the input (embeddings are fixed, their grad is dropped)."""
    g_weight = np.outer(g_theta, u)
    g_bias = g_theta.copy()
    g_f = lpg.weight[:, d_text:].T @ g_theta
    return g_weight, g_bias, g_f


# ---------------------------------------------------------------------------
# head forward/backward


@dataclass
class HeadTape:
    fd: np.ndarray
    mask1: np.ndarray
    a1: np.ndarray
    mask2: np.ndarray
    a2: np.ndarray
    p: np.ndarray
    slope: float


def head_forward(fd: np.ndarray, head: HeadParams, slope: float = nnops.LEAKY_SLOPE):
    """P = sigmoid(phi(phi(F_D * th1) * th2) * th3), evaluated per voxel.

    ``fd`` is (C_dec, D, H, W); returns (probability array (D, H, W), tape).
    """
    if fd.shape[0] != head.w1.shape[1]:
        raise LpgDimMismatch(
            f"F_D has {fd.shape[0]} channels, head expects {head.w1.shape[1]}")
    z1 = nnops.pointwise_conv_forward(fd, head.w1, head.b1)
    a1, mask1 = nnops.leaky_relu_forward(z1, slope)
    z2 = nnops.pointwise_conv_forward(a1, head.w2, head.b2)
    a2, mask2 = nnops.leaky_relu_forward(z2, slope)
    z3 = nnops.pointwise_conv_forward(a2, head.w3, head.b3)
    p = nnops.sigmoid(z3[0])
    return p, HeadTape(fd, mask1, a1, mask2, a2, p, slope)


def head_backward(tape: HeadTape, head: HeadParams, g_p: np.ndarray):
    """Adjoint of head_forward. Returns (grad theta flat, grad F_D)."""
    if g_p.shape != tape.p.shape:
        raise LpgDimMismatch(f"grad shape {g_p.shape} != P shape {tape.p.shape}")
    gz3 = (g_p * tape.p * (1.0 - tape.p))[None]
    ga2, gw3, gb3 = nnops.pointwise_conv_backward(tape.a2, head.w3, gz3)
    gz2 = nnops.leaky_relu_backward(tape.mask2, ga2, tape.slope)
    ga1, gw2, gb2 = nnops.pointwise_conv_backward(tape.a1, head.w2, gz2)
    gz1 = nnops.leaky_relu_backward(tape.mask1, ga1, tape.slope)
    gfd, gw1, gb1 = nnops.pointwise_conv_backward(tape.fd, head.w1, gz1)
    g_theta = HeadParams(gw1, gb1, gw2, gb2, gw3, gb3).to_flat()
    return g_theta, gfd
