"""
PrefSynth - Preference Fusion

Detailed preference (keyword text embedding plus a modal mapper over the
image-slot tokens), global preference (keyword embedding) and the balance
calibrator that fuses both into the generation preference p_gen.

Shapes, with d_t the text width, d_m the mapper output width, d_a the
attention width and d_p the preference width:

    img_tokens   L   x d_t        queries   L_q x d_t
    mapper.l.*   d_t x d_t        mapper.wo1 d_t x d_t   mapper.wo2 d_t x d_m
    attn_q       d_a x (d_t+d_m)  lifts     m x d_t x d_t
    attn_k/v     d_a x d_t        out_proj  d_p x (d_a+d_t)

The mapper uses the row-vector convention (H @ W); the calibrator uses
column vectors (W @ x).
"""
import hashlib
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from prefsynth.core.errors import DomainError
from prefsynth.core.numerics import (
    as_vector,
    attention_weights,
    scaled_dot_attention,
    sgd_step,
    softmax_rows,
    spawn_rng,
)
from prefsynth.schemas import ModelDims
from prefsynth.services.corpus import UserSequence
from prefsynth.services.encoders import KeywordSet, SemanticEncoder

MAPPER_MATRICES = ("wq", "wk", "wv", "w1", "w2")


# =============================================================================
# Parameters
# =============================================================================

@dataclass(eq=False)
class CalibratorParams:
    """Every trainable array of the mapper and calibrator, by name."""

    arrays: dict[str, np.ndarray]
    depth: int

    @classmethod
    def initialize(
        cls, dims: ModelDims, text_dim: int, pref_dim: int, seed: Optional[int] = None
    ) -> "CalibratorParams":
        rng = spawn_rng(dims.init_seed if seed is None else seed, "calibrator-init")
        d, s = text_dim, dims.init_scale

        def dense(rows: int, cols: int, fan_in: int, gain: float = 1.0) -> np.ndarray:
            return s * gain * rng.standard_normal((rows, cols)) / math.sqrt(fan_in)

        arrays: dict[str, np.ndarray] = {
            "img_tokens": dense(dims.n_img_tokens, d, d),
            "queries": dense(dims.n_queries, d, d),
        }
        for layer in range(dims.mapper_depth):
            for name in MAPPER_MATRICES:
                gain = 0.5 if name in ("w1", "w2") else 1.0
                arrays[f"mapper.{layer}.{name}"] = dense(d, d, d, gain)
        arrays["mapper.wo1"] = dense(d, d, d)
        arrays["mapper.wo2"] = dense(d, dims.mapper_dim, d)
        arrays["attn_q"] = dense(dims.attn_dim, d + dims.mapper_dim, d + dims.mapper_dim)
        arrays["lifts"] = np.stack(
            [np.eye(d) + 0.5 * s * rng.standard_normal((d, d)) / math.sqrt(d) for _ in range(dims.lift_rows)]
        )
        arrays["attn_k"] = dense(dims.attn_dim, d, d)
        arrays["attn_v"] = dense(dims.attn_dim, d, d)
        arrays["out_proj"] = dense(pref_dim, dims.attn_dim + d, dims.attn_dim + d)
        params = cls(arrays=arrays, depth=dims.mapper_depth)
        params.validate()
        return params

    @staticmethod
    def layout(depth: int) -> list[str]:
        """Array names in the order `initialize` creates them."""
        mapper = [f"mapper.{layer}.{name}" for layer in range(depth) for name in MAPPER_MATRICES]
        return [
            "img_tokens", "queries", *mapper, "mapper.wo1", "mapper.wo2",
            "attn_q", "lifts", "attn_k", "attn_v", "out_proj",
        ]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, CalibratorParams):
            return NotImplemented
        return (
            self.depth == other.depth
            and list(self.arrays) == list(other.arrays)
            and all(np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def text_dim(self) -> int:
        return int(self.arrays["queries"].shape[1])

    @property
    def mapper_dim(self) -> int:
        return int(self.arrays["mapper.wo2"].shape[1])

    @property
    def pref_dim(self) -> int:
        return int(self.arrays["out_proj"].shape[0])

    @property
    def names(self) -> list[str]:
        return list(self.arrays)

    def validate(self) -> None:
        """Shape and finiteness check across all arrays."""
        a = self.arrays
        d = a["queries"].shape[1]
        d_a = a["attn_k"].shape[0]
        expected: dict[str, tuple[int, ...]] = {
            "img_tokens": (a["img_tokens"].shape[0], d),
            "mapper.wo1": (d, d),
            "mapper.wo2": (d, a["mapper.wo2"].shape[1]),
            "attn_q": (d_a, d + a["mapper.wo2"].shape[1]),
            "lifts": (a["lifts"].shape[0], d, d),
            "attn_k": (d_a, d),
            "attn_v": (d_a, d),
            "out_proj": (a["out_proj"].shape[0], d_a + d),
        }
        for layer in range(self.depth):
            for name in MAPPER_MATRICES:
                expected[f"mapper.{layer}.{name}"] = (d, d)
        for name, shape in expected.items():
            if name not in a:
                raise DomainError(f"calibrator params missing {name}")
            if a[name].shape != shape:
                raise DomainError(f"{name}: expected shape {shape}, got {a[name].shape}")
        for name, arr in a.items():
            if not np.all(np.isfinite(arr)):
                raise DomainError(f"{name} contains non-finite entries")

    def copy(self) -> "CalibratorParams":
        return CalibratorParams({k: v.copy() for k, v in self.arrays.items()}, self.depth)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def with_flat(self, flat: np.ndarray) -> "CalibratorParams":
        out: dict[str, np.ndarray] = {}
        offset = 0
        for name, arr in self.arrays.items():
            out[name] = np.asarray(flat[offset : offset + arr.size], dtype=np.float64).reshape(arr.shape)
            offset += arr.size
        return CalibratorParams(out, self.depth)

    def step(self, grads: dict[str, np.ndarray], lr: float) -> "CalibratorParams":
        """Plain SGD on every array; returns a new params object."""
        return CalibratorParams(
            {k: sgd_step(v, grads[k], lr) for k, v in self.arrays.items()}, self.depth
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays.items():
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


# =============================================================================
# Forward pass
# =============================================================================

@dataclass
class _LayerCache:
    h_in: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn: np.ndarray
    h_mid: np.ndarray
    t: np.ndarray


@dataclass
class PreferenceTrace:
    """Forward intermediates needed for backpropagation."""

    e_txt: np.ndarray
    e_img: np.ndarray
    layers: list[_LayerCache]
    h_out: np.ndarray
    p_mid: np.ndarray
    mapped: np.ndarray
    e_d: np.ndarray
    e_g: np.ndarray
    q: np.ndarray
    lifted: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    attn: np.ndarray
    attn_out: np.ndarray
    z: np.ndarray
    p_gen: np.ndarray


@dataclass(eq=False)
class PreferenceBundle:
    e_txt: np.ndarray
    e_img: np.ndarray
    e_d: np.ndarray
    e_g: np.ndarray
    p_gen: np.ndarray
    p_ret: Optional[np.ndarray] = None
    trace: Optional[PreferenceTrace] = field(default=None, repr=False)


def _modal_map(params: CalibratorParams, e_img: np.ndarray) -> tuple[list[_LayerCache], np.ndarray, np.ndarray, np.ndarray]:
    h = params["queries"]
    scale = math.sqrt(h.shape[1])
    caches: list[_LayerCache] = []
    for layer in range(params.depth):
        p = f"mapper.{layer}."
        q = h @ params[p + "wq"]
        k = e_img @ params[p + "wk"]
        v = e_img @ params[p + "wv"]
        attn = softmax_rows(q @ k.T / scale)
        h_mid = h + attn @ v
        t = np.tanh(h_mid @ params[p + "w1"])
        caches.append(_LayerCache(h_in=h, q=q, k=k, v=v, attn=attn, h_mid=h_mid, t=t))
        h = h_mid + t @ params[p + "w2"]
    p_mid = h @ params["mapper.wo1"]
    out = p_mid @ params["mapper.wo2"]
    return caches, h, p_mid, out.mean(axis=0)


def forward(params: CalibratorParams, e_txt: np.ndarray, e_g: np.ndarray) -> PreferenceTrace:
    """Full chain from keyword embeddings to p_gen, keeping intermediates."""
    e_txt = as_vector(e_txt, "e_txt")
    e_g = as_vector(e_g, "e_g")
    d = params.text_dim
    if e_txt.size != d or e_g.size != d:
        raise DomainError(
            f"text embeddings must have dim {d}, got e_txt={e_txt.size}, e_g={e_g.size}"
        )
    e_img = params["img_tokens"] + e_txt[None, :]
    layers, h_out, p_mid, mapped = _modal_map(params, e_img)
    e_d = np.concatenate([e_txt, mapped])

    q = params["attn_q"] @ e_d
    lifted = params["lifts"] @ e_g
    keys = lifted @ params["attn_k"].T
    values = lifted @ params["attn_v"].T
    attn = attention_weights(q[None, :], keys)[0]
    attn_out = scaled_dot_attention(q[None, :], keys, values)[0]
    z = np.concatenate([attn_out, e_g])
    p_gen = params["out_proj"] @ z
    return PreferenceTrace(
        e_txt=e_txt,
        e_img=e_img,
        layers=layers,
        h_out=h_out,
        p_mid=p_mid,
        mapped=mapped,
        e_d=e_d,
        e_g=e_g,
        q=q,
        lifted=lifted,
        keys=keys,
        values=values,
        attn=attn,
        attn_out=attn_out,
        z=z,
        p_gen=p_gen,
    )


def build_detailed(
    user: UserSequence,
    keywords: KeywordSet,
    params: CalibratorParams,
    encoder: SemanticEncoder,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(e_txt, e_img, e_d) for a user's filtered keywords."""
    if keywords.is_empty():
        raise DomainError(f"user {user.user_id}: no keywords survived filtering")
    e_txt = encoder.encode(keywords.keywords, source_item=user.user_id).vec
    e_img = params["img_tokens"] + e_txt[None, :]
    _, _, _, mapped = _modal_map(params, e_img)
    return e_txt, e_img, np.concatenate([e_txt, mapped])


def build_global(keywords: KeywordSet, encoder: SemanticEncoder) -> np.ndarray:
    if keywords.is_empty():
        raise DomainError("global preference needs at least one filtered keyword")
    return encoder.encode(keywords.keywords).vec


def calibrate(e_d: np.ndarray, e_g: np.ndarray, params: CalibratorParams) -> np.ndarray:
    """Cross-attention of the detailed query over lifted global rows, plus the
    global residual, projected to the preference width."""
    e_d = as_vector(e_d, "e_d")
    e_g = as_vector(e_g, "e_g")
    if e_d.size != params["attn_q"].shape[1]:
        raise DomainError(f"e_d has dim {e_d.size}, expected {params['attn_q'].shape[1]}")
    if e_g.size != params.text_dim:
        raise DomainError(f"e_g has dim {e_g.size}, expected {params.text_dim}")
    q = params["attn_q"] @ e_d
    lifted = params["lifts"] @ e_g
    keys = lifted @ params["attn_k"].T
    values = lifted @ params["attn_v"].T
    attn_out = scaled_dot_attention(q[None, :], keys, values)[0]
    return params["out_proj"] @ np.concatenate([attn_out, e_g])


# =============================================================================
# Backward pass
# =============================================================================

def _softmax_backward(weights: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Row-wise Jacobian-vector product of softmax."""
    return weights * (grad - np.sum(grad * weights, axis=-1, keepdims=True))


def calibrator_gradients(
    trace: PreferenceTrace,
    params: CalibratorParams,
    grad_p_gen: np.ndarray,
    grad_e_d: Optional[np.ndarray] = None,
) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every array, given dL/dp_gen and the
    direct dL/de_d (from the semantic loss). Embeddings are not trainable."""
    grads: dict[str, np.ndarray] = {}
    d_a = trace.keys.shape[1]

    grads["out_proj"] = np.outer(grad_p_gen, trace.z)
    g_z = params["out_proj"].T @ grad_p_gen
    g_o = g_z[:d_a]

    g_values = np.outer(trace.attn, g_o)
    g_attn = trace.values @ g_o
    g_scores = _softmax_backward(trace.attn, g_attn) / math.sqrt(d_a)
    g_keys = np.outer(g_scores, trace.q)
    g_q = trace.keys.T @ g_scores

    grads["attn_k"] = g_keys.T @ trace.lifted
    grads["attn_v"] = g_values.T @ trace.lifted
    g_lifted = g_keys @ params["attn_k"] + g_values @ params["attn_v"]
    grads["lifts"] = g_lifted[:, :, None] * trace.e_g[None, None, :]

    grads["attn_q"] = np.outer(g_q, trace.e_d)
    g_e_d = params["attn_q"].T @ g_q
    if grad_e_d is not None:
        g_e_d = g_e_d + grad_e_d
    g_mapped = g_e_d[trace.e_txt.size :]

    n_q = trace.h_out.shape[0]
    g_out = np.tile(g_mapped / n_q, (n_q, 1))
    grads["mapper.wo2"] = trace.p_mid.T @ g_out
    g_p_mid = g_out @ params["mapper.wo2"].T
    grads["mapper.wo1"] = trace.h_out.T @ g_p_mid
    g_h = g_p_mid @ params["mapper.wo1"].T

    g_img = np.zeros_like(trace.e_img)
    scale = math.sqrt(trace.e_img.shape[1])
    for layer in reversed(range(params.depth)):
        c = trace.layers[layer]
        p = f"mapper.{layer}."
        grads[p + "w2"] = c.t.T @ g_h
        g_pre = (g_h @ params[p + "w2"].T) * (1.0 - c.t * c.t)
        grads[p + "w1"] = c.h_mid.T @ g_pre
        g_mid = g_h + g_pre @ params[p + "w1"].T

        g_attn_rows = g_mid @ c.v.T
        g_v = c.attn.T @ g_mid
        g_s = _softmax_backward(c.attn, g_attn_rows) / scale
        g_q_rows = g_s @ c.k
        g_k = g_s.T @ c.q

        grads[p + "wq"] = c.h_in.T @ g_q_rows
        grads[p + "wk"] = trace.e_img.T @ g_k
        grads[p + "wv"] = trace.e_img.T @ g_v
        g_img += g_k @ params[p + "wk"].T + g_v @ params[p + "wv"].T
        g_h = g_mid + g_q_rows @ params[p + "wq"].T

    grads["queries"] = g_h
    grads["img_tokens"] = g_img
    return {name: grads[name] for name in params.names}


def flatten_gradients(params: CalibratorParams, grads: dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([grads[name].ravel() for name in params.names])
