"""Policy-group sampling and per-image view-set construction.

Each augmented view draws its randomness from a stream derived from
``(base_seed, image_key, epoch, view_index)``, so views are fresh every
epoch yet exactly reproducible from those four values.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass, field
from typing import List, NamedTuple, Optional, Sequence

import numpy as np

from . import imageops
from .errors import ParameterError
from .imageops import POLICIES, PolicySpec, Raster

STRATEGIES = ("asa", "randaugment-fixed", "crop-only", "copy-only")
RAW_TRANSFORMS = ("none", "crop-flip")


@dataclass
class AugmentConfig:
    n_views: int = 5
    steps: int = 2
    amplitude_mode: str = "dynamic"
    fixed_a: Optional[float] = None
    strategy: str = "asa"
    crop_scale: tuple = (0.08, 1.0)
    # Backbone crop/flip on the raw member of each view set.
    raw_transform: str = "none"
    # Stress mode: probability that an augmented view is replaced by pure noise.
    corruption_rate: float = 0.0

    def __post_init__(self):
        self.amplitude_mode = imageops.normalize_mode(self.amplitude_mode)
        self.crop_scale = tuple(float(x) for x in self.crop_scale)
        if self.n_views < 0:
            raise ParameterError("n_views must be >= 0")
        if self.steps < 1:
            raise ParameterError("steps must be >= 1")
        if self.strategy not in STRATEGIES:
            raise ParameterError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.raw_transform not in RAW_TRANSFORMS:
            raise ParameterError(f"unknown raw_transform {self.raw_transform!r}")
        if self.strategy == "randaugment-fixed" and self.amplitude_mode != imageops.FIXED:
            raise ParameterError("strategy randaugment-fixed requires amplitude_mode=fixed")
        if self.amplitude_mode == imageops.FIXED:
            if self.fixed_a is None:
                raise ParameterError("fixed amplitude mode requires fixed_a")
            if not 0.0 <= self.fixed_a <= 30.0:
                raise ParameterError("fixed_a must lie in [0, 30]")
        elif self.fixed_a is not None:
            raise ParameterError("fixed_a is only valid in fixed amplitude mode")
        if not 0.0 <= self.corruption_rate <= 1.0:
            raise ParameterError("corruption_rate must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_scale"] = list(self.crop_scale)
        return d


class PolicyDraw(NamedTuple):
    policy: str
    raw_amplitude: float
    amplitude: float
    aux_seed: int


@dataclass
class ViewSet:
    raw: Raster
    views: List[Raster]
    provenance: List[List[PolicyDraw]] = field(default_factory=list)
    corrupted: List[bool] = field(default_factory=list)

    @property
    def members(self) -> List[Raster]:
        """Raw image at index 0 followed by the augmented views."""
        return [self.raw, *self.views]

    def __len__(self):
        return 1 + len(self.views)


def derive_seed(base_seed: int, image_key: str, epoch: int, view_index: int) -> int:
    """64-bit stream seed from the four provenance components (BLAKE2b)."""
    h = hashlib.blake2b(digest_size=8, person=b"augpt-views")
    h.update(struct.pack("<qqq", int(base_seed), int(epoch), int(view_index)))
    h.update(str(image_key).encode("utf-8"))
    return int.from_bytes(h.digest(), "little")


def view_stream(base_seed: int, image_key: str, epoch: int, view_index: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base_seed, image_key, epoch, view_index))


def sample_amplitude(spec: PolicySpec, cfg: AugmentConfig, rng: np.random.Generator):
    """Return ``(raw, converted)`` amplitudes for one policy slot."""
    if cfg.amplitude_mode == imageops.DYNAMIC:
        raw = float(rng.uniform(0.0, spec.a_max))
    else:
        raw = float(cfg.fixed_a)
    return raw, imageops.convert_amplitude(spec, raw, cfg.amplitude_mode)


def sample_policy_group(
    cfg: AugmentConfig,
    stream: np.random.Generator,
    table: Optional[Sequence[PolicySpec]] = None,
) -> List[PolicyDraw]:
    """Draw ``cfg.steps`` i.i.d. (policy, amplitude, aux seed) slots."""
    table = list(POLICIES.values()) if table is None else list(table)
    if not table:
        raise ParameterError("policy table is empty")
    group = []
    for _ in range(cfg.steps):
        spec = table[int(stream.integers(len(table)))]
        raw, amp = sample_amplitude(spec, cfg, stream)
        aux_seed = int(stream.integers(0, 2**63 - 1))
        group.append(PolicyDraw(spec.name, raw, amp, aux_seed))
    return group


def apply_group(img: Raster, group: Sequence[PolicyDraw]) -> Raster:
    out = img
    for draw in group:
        out = imageops.apply_policy(out, draw.policy, draw.amplitude, draw.aux_seed)
    return out


def _crop_flip(img: Raster, cfg: AugmentConfig, rng: np.random.Generator):
    crop_seed = int(rng.integers(0, 2**63 - 1))
    flip = bool(rng.random() < 0.5)
    out = imageops.random_resized_crop(img, crop_seed, *cfg.crop_scale)
    if flip:
        out = imageops.horizontal_flip(out)
    prov = [
        PolicyDraw("RandomResizedCrop", cfg.crop_scale[0], cfg.crop_scale[1], crop_seed),
        PolicyDraw("HorizontalFlip", float(flip), float(flip), 0),
    ]
    return out, prov


def noise_raster(width: int, height: int, rng: np.random.Generator) -> Raster:
    return Raster(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def build_view_set(
    img: Raster,
    cfg: AugmentConfig,
    image_key: str,
    epoch: int = 0,
    base_seed: int = 0,
) -> ViewSet:
    """Construct the raw image plus ``cfg.n_views`` augmented variants."""
    raw = img
    if cfg.raw_transform == "crop-flip":
        raw, _ = _crop_flip(img, cfg, view_stream(base_seed, image_key, epoch, 0))
    views, provenance, corrupted = [], [], []
    for i in range(1, cfg.n_views + 1):
        rng = view_stream(base_seed, image_key, epoch, i)
        if cfg.strategy == "copy-only":
            view, prov = img, []
        elif cfg.strategy == "crop-only":
            view, prov = _crop_flip(img, cfg, rng)
        else:
            prov = sample_policy_group(cfg, rng)
            view = apply_group(img, prov)
        # The corruption draw comes after all policy draws so that enabling
        # stress mode never changes which policies a view received.
        bad = False
        if cfg.corruption_rate > 0.0:
            bad = bool(rng.random() < cfg.corruption_rate)
            if bad:
                view = noise_raster(img.width, img.height, rng)
        views.append(view)
        provenance.append(prov)
        corrupted.append(bad)
    return ViewSet(raw=raw, views=views, provenance=provenance, corrupted=corrupted)


def provenance_records(vs: ViewSet, image_key: str, epoch: int) -> List[dict]:
    """One JSON-ready record per augmented view."""
    records = []
    for i, prov in enumerate(vs.provenance, start=1):
        records.append(
            {
                "image_key": image_key,
                "epoch": epoch,
                "view_index": i,
                "policies": [d.policy for d in prov],
                "raw_amplitudes": [d.raw_amplitude for d in prov],
                "amplitudes": [d.amplitude for d in prov],
                "aux_seeds": [d.aux_seed for d in prov],
                "corrupted": vs.corrupted[i - 1] if vs.corrupted else False,
            }
        )
    return records
