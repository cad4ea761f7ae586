"""Synthetic ring scenes with controllable rotational symmetry.

Cameras sit uniformly on a circle. Each image's descriptor is a harmonic
map of its *folded* angle (the angle modulo the symmetry period), so
images from distinct symmetry copies at the same folded angle collide in
descriptor space: exactly the ambiguity that breaks visual-only retrieval.
Ground-truth matchability, by contrast, uses the true angular distance.
"""

import math
from dataclasses import dataclass

import numpy as np

from .embeddings import EmbeddingMatrix
from .errors import InvalidRecord
from .trainer import OverlapRecord, OverlapStore


@dataclass(frozen=True)
class SceneConfig:
    """Scene shape: image count, s-fold symmetry, matchability window,
    descriptor noise and dimension, and the generation seed."""

    n_images: int
    symmetry_s: int = 1
    overlap_angle: float = math.pi / 12
    noise_sigma: float = 0.0
    dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.n_images < 1:
            raise ValueError("need at least one image")
        if self.symmetry_s < 1:
            raise ValueError("symmetry order must be >= 1")
        if not 0.0 < self.overlap_angle < math.pi:
            raise ValueError("overlap angle must lie in (0, pi)")
        if self.noise_sigma < 0.0:
            raise ValueError("noise sigma must be non-negative")
        if self.dim < 2:
            raise ValueError("descriptor dimension must be >= 2")


@dataclass(frozen=True)
class Scene:
    embeddings: EmbeddingMatrix
    overlaps: OverlapStore
    classes: dict[int, int]


def _harmonic_map(psi: np.ndarray, dim: int) -> np.ndarray:
    """Smooth injective map of an angle onto a sphere in `dim` dimensions.

    Harmonic m gets amplitude 1/m, which makes the chord distance strictly
    increasing in angular distance over a half period (the partial sums of
    sin(m t)/m stay positive on (0, pi)).
    """
    n = psi.shape[0]
    out = np.zeros((n, dim), dtype=np.float64)
    pairs = dim // 2
    for m in range(1, pairs + 1):
        out[:, 2 * m - 2] = np.cos(m * psi) / m
        out[:, 2 * m - 1] = np.sin(m * psi) / m
    if dim % 2:
        out[:, -1] = np.cos((pairs + 1) * psi) / (pairs + 1)
    return out


def generate_scene(config: SceneConfig) -> Scene:
    """Build embeddings, overlap supervision, and symmetry-class labels.

    Camera i sits at angle 2*pi*i/n. Its folded angle is computed from the
    integer residue (i * s) mod n so that aligned copies (when s divides n)
    collide bitwise, making the zero-noise ambiguity exact. A pair is
    matchable iff its true circular distance is within the overlap window;
    its mesh-overlap and common-track scores decay linearly to zero at the
    window edge, and non-matchable pairs get no record at all.
    """
    n = config.n_images
    s = config.symmetry_s
    psi = 2.0 * math.pi * ((np.arange(n) * s) % n) / n
    vectors = _harmonic_map(psi, config.dim)
    if config.noise_sigma > 0.0:
        rng = np.random.default_rng([config.seed])
        vectors = vectors + rng.normal(0.0, config.noise_sigma, size=vectors.shape)
    emb = EmbeddingMatrix(list(range(n)), vectors)

    step = 2.0 * math.pi / n
    store = OverlapStore()
    for i in range(n):
        for j in range(i + 1, n):
            circ = min(j - i, n - (j - i)) * step
            if circ <= config.overlap_angle:
                mo = max(0.0, 1.0 - circ / config.overlap_angle)
                store.add(OverlapRecord(i, j, mo, mo))

    classes = {i: (i * s) // n for i in range(n)}
    return Scene(embeddings=emb, overlaps=store, classes=classes)


def save_classes(classes: dict[int, int]) -> str:
    return "\n".join(f"{i} {classes[i]}" for i in sorted(classes)) + "\n"


def load_classes(text: str) -> dict[int, int]:
    classes: dict[int, int] = {}
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.strip()
        if stripped:
            tokens = stripped.split()
            if len(tokens) != 2:
                raise InvalidRecord(f"class line needs `id class`, got {stripped!r}",
                                    offset=offset)
            try:
                image_id, cls = int(tokens[0]), int(tokens[1])
            except ValueError:
                raise InvalidRecord(f"bad class line {stripped!r}", offset=offset)
            if image_id in classes:
                raise InvalidRecord(f"image id {image_id} repeated", offset=offset)
            classes[image_id] = cls
        offset += len(line.encode("utf-8"))
    return classes
