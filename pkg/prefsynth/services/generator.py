"""
PrefSynth - Frozen Generator

A fixed smooth map from preference vectors to image features and pixels.
Trainers call ``generate`` and read scores computed from its output; they
never see the internal constants.
"""
import hashlib
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from prefsynth.core.errors import DomainError
from prefsynth.core.numerics import as_vector, spawn_rng
from prefsynth.schemas import GeneratorConfig, Provenance
from prefsynth.services.corpus import Item, PixelRenderer


@dataclass(frozen=True, eq=False)
class GeneratedImage:
    feature: np.ndarray
    pixels: np.ndarray
    provenance: Provenance
    source_pref: Optional[np.ndarray] = None


class Generator:
    """feature = normalize(tanh(W_gen p + b_gen)); pixels from the corpus renderer."""

    def __init__(
        self,
        pref_dim: int,
        text_dim: int,
        renderer: PixelRenderer,
        config: Optional[GeneratorConfig] = None,
    ) -> None:
        self.config = config or GeneratorConfig()
        self.pref_dim = pref_dim
        self.renderer = renderer
        rng = spawn_rng(self.config.seed, "generator")
        d = pref_dim
        self._weight = self.config.gain * (
            np.eye(d) + self.config.jitter * rng.standard_normal((d, d)) / math.sqrt(d)
        )
        self._bias = self.config.bias_scale * rng.standard_normal(d) / math.sqrt(d)
        basis, _ = np.linalg.qr(rng.standard_normal((max(d, text_dim), max(d, text_dim))))
        self._global_proj = basis[:d, :text_dim]
        self._weight.setflags(write=False)
        self._bias.setflags(write=False)
        self._global_proj.setflags(write=False)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self._weight, self._bias, self._global_proj):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def feature(self, pref: np.ndarray) -> np.ndarray:
        pref = as_vector(pref, "preference")
        if pref.size != self.pref_dim:
            raise DomainError(f"preference has dim {pref.size}, expected {self.pref_dim}")
        raw = np.tanh(self._weight @ pref + self._bias)
        norm = float(np.linalg.norm(raw))
        if norm == 0.0:
            raise DomainError("generator output has zero norm for this preference")
        return raw / norm

    def generate(self, pref: np.ndarray, provenance: Provenance = Provenance.GENERATED) -> GeneratedImage:
        feature = self.feature(pref)
        return GeneratedImage(
            feature=feature,
            pixels=self.renderer.render(feature),
            provenance=provenance,
            source_pref=np.array(pref, dtype=np.float64),
        )

    def make_reference_image(self, item: Item) -> GeneratedImage:
        pixels = item.pixel_grid if item.pixel_grid is not None else self.renderer.render(item.visual_feature)
        return GeneratedImage(
            feature=item.visual_feature,
            pixels=pixels,
            provenance=Provenance.REFERENCE,
            source_pref=None,
        )

    def make_global_image(self, e_g: np.ndarray) -> GeneratedImage:
        e_g = as_vector(e_g, "e_g")
        if e_g.size != self._global_proj.shape[1]:
            raise DomainError(f"e_g has dim {e_g.size}, expected {self._global_proj.shape[1]}")
        return self.generate(self._global_proj @ e_g, provenance=Provenance.GLOBAL)
