"""Synthetic AU-rendered face stand-ins.

Each rendered AU owns a rectangle on a 6x6 macro-grid and a colour.  An active
AU paints its rectangle with ``colour * intensity / 5``; Gaussian pixel noise is
added on top and the result clipped to [0, 1].  Labels come from the sampled
intensities through the ordinary FACS functions, so they are exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional
from urllib.parse import parse_qsl, urlencode

import numpy as np

from ..errors import InvalidConfig
from ..facs import PainCategory3, categorize_pain_3, max_intensity
from .manifest import DEFAULT_MODELED_AUS, DatasetManifest, check_modeled_aus, make_record
from .prep import frame_rng

URI_SCHEME = "synthetic:"
EXTRA_RENDERED = (7, 10, 43)
GRID = 6

# (row, col) cells; PSPI pair members (6/7, 9/10) sit far apart so no single
# backbone position sees both.
DEFAULT_CELLS = {
    1: (0, 0), 2: (0, 2), 4: (0, 4), 10: (1, 5),
    6: (2, 0), 9: (2, 2), 12: (2, 4),
    25: (4, 0), 26: (4, 2), 43: (4, 4), 7: (5, 5),
}
DEFAULT_COLORS = {
    1: (1.0, 0.0, 0.0),
    2: (0.0, 1.0, 0.0),
    4: (0.0, 0.0, 1.0),
    6: (1.0, 1.0, 0.0),
    7: (0.0, 1.0, 1.0),
    9: (1.0, 0.0, 1.0),
    10: (1.0, 1.0, 1.0),
    12: (1.0, 0.5, 0.0),
    25: (0.5, 0.0, 1.0),
    26: (0.0, 1.0, 0.5),
    43: (1.0, 0.5, 0.5),
}
DEFAULT_MIXTURE = (0.82, 0.15, 0.03)


def cell_regions(side: int, cells: dict, grid: int = GRID, inset: Optional[int] = None) -> dict:
    """Pixel rectangles ``(r0, c0, r1, c1)`` (half-open) for grid cells."""
    step = side // grid
    if inset is None:
        inset = max(step // 8, 0)
    return {
        code: (r * step + inset, c * step + inset, (r + 1) * step - inset, (c + 1) * step - inset)
        for code, (r, c) in cells.items()
    }


@dataclass
class SynthConfig:
    side: int = 96
    count: int = 2000
    seed: int = 0
    noise: float = 0.05
    mixture: tuple = DEFAULT_MIXTURE
    modeled_aus: tuple = DEFAULT_MODELED_AUS
    regions: Optional[dict] = None
    colors: dict = field(default_factory=lambda: dict(DEFAULT_COLORS))
    n_subjects: int = 25
    frame_prefix: str = "f"
    subject_prefix: str = "s"
    # probability that both members of an (AU6, AU7) / (AU9, AU10) pair fire together
    cooccur: float = 0.3
    distractor_rate: float = 0.3

    def __post_init__(self):
        if self.regions is None:
            self.regions = cell_regions(self.side, DEFAULT_CELLS)
        self.regions = {int(k): tuple(int(x) for x in v) for k, v in self.regions.items()}
        self.colors = {int(k): tuple(float(x) for x in v) for k, v in self.colors.items()}
        self.mixture = tuple(float(x) for x in self.mixture)
        self.modeled_aus = tuple(self.modeled_aus)

    @property
    def rendered_aus(self) -> tuple:
        return tuple(sorted(set(self.modeled_aus) | set(EXTRA_RENDERED)))

    def validate(self) -> "SynthConfig":
        try:
            check_modeled_aus(self.modeled_aus)
        except ValueError as exc:
            raise InvalidConfig(str(exc)) from None
        if self.side <= 0:
            raise InvalidConfig("side must be positive")
        if self.count < 0:
            raise InvalidConfig("count must be nonnegative")
        if self.noise < 0:
            raise InvalidConfig("noise amplitude must be nonnegative")
        if len(self.mixture) != len(PainCategory3) or min(self.mixture) < 0:
            raise InvalidConfig(f"mixture needs {len(PainCategory3)} nonnegative proportions")
        if abs(sum(self.mixture) - 1.0) > 1e-9:
            raise InvalidConfig(f"mixture proportions sum to {sum(self.mixture)}, not 1")
        if not 0 <= self.cooccur <= 1 or not 0 <= self.distractor_rate <= 1:
            raise InvalidConfig("cooccur and distractor_rate must be probabilities")
        if self.n_subjects < 1:
            raise InvalidConfig("n_subjects must be >= 1")
        missing = set(self.rendered_aus) - set(self.regions)
        if missing:
            raise InvalidConfig(f"no blob region for AUs {sorted(missing)}")
        missing = set(self.rendered_aus) - set(self.colors)
        if missing:
            raise InvalidConfig(f"no colour for AUs {sorted(missing)}")
        for code, col in self.colors.items():
            if len(col) != 3 or not all(0.0 <= x <= 1.0 for x in col):
                raise InvalidConfig(f"AU{code} colour must be 3 values in [0, 1]")
        rects = [(code, self.regions[code]) for code in self.rendered_aus]
        for code, (r0, c0, r1, c1) in rects:
            if not (0 <= r0 < r1 <= self.side and 0 <= c0 < c1 <= self.side):
                raise InvalidConfig(f"AU{code} region {(r0, c0, r1, c1)} is empty or outside the image")
        for i, (a, ra) in enumerate(rects):
            for b, rb in rects[i + 1:]:
                if ra[0] < rb[2] and rb[0] < ra[2] and ra[1] < rb[3] and rb[1] < ra[3]:
                    raise InvalidConfig(f"blob regions of AU{a} and AU{b} overlap")
        return self


def _sample_pair(rng, p_active, cooccur):
    if rng.random() >= p_active:
        return 0, 0
    u = rng.random()
    if u < cooccur:
        return int(rng.integers(1, 6)), int(rng.integers(1, 6))
    if u < cooccur + (1 - cooccur) / 2:
        return int(rng.integers(1, 6)), 0
    return 0, int(rng.integers(1, 6))


def sample_intensities(rng: np.random.Generator, category: PainCategory3,
                       config: SynthConfig) -> dict:
    """Draw intensities for every rendered AU whose PSPI falls in ``category``."""
    au = {}
    for code in config.rendered_aus:
        if code in (4, 6, 7, 9, 10, 43):
            continue
        active = rng.random() < config.distractor_rate
        au[code] = int(rng.integers(1, max_intensity(code) + 1)) if active else 0
    if category == PainCategory3.NoPain:
        au.update({4: 0, 6: 0, 7: 0, 9: 0, 10: 0, 43: 0})
        return au
    while True:
        a4 = int(rng.integers(1, 6)) if rng.random() < 0.5 else 0
        a6, a7 = _sample_pair(rng, 0.6, config.cooccur)
        a9, a10 = _sample_pair(rng, 0.5, config.cooccur)
        a43 = int(rng.random() < 0.3)
        pspi = a4 + max(a6, a7) + max(a9, a10) + a43
        if pspi > 0 and categorize_pain_3(pspi) == category:
            au.update({4: a4, 6: a6, 7: a7, 9: a9, 10: a10, 43: a43})
            return au


def render_image(au: dict, config: SynthConfig, frame_id: str) -> np.ndarray:
    """``side x side x 3`` float32 image in [0, 1]."""
    img = np.zeros((config.side, config.side, 3), dtype=np.float64)
    for code in config.rendered_aus:
        value = au.get(code, 0)
        if value:
            r0, c0, r1, c1 = config.regions[code]
            img[r0:r1, c0:c1, :] = np.asarray(config.colors[code]) * (value / 5.0)
    if config.noise > 0:
        rng = frame_rng(config.seed, frame_id, "noise")
        img += config.noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _fmt_map(d: dict, sep: str) -> str:
    return ",".join(f"{k}:" + sep.join(f"{x!r}" for x in v) for k, v in sorted(d.items()))


def _parse_map(s: str, sep: str, cast) -> dict:
    out = {}
    for item in s.split(","):
        code, vals = item.split(":")
        out[int(code)] = tuple(cast(x) for x in vals.split(sep))
    return out


def synthetic_uri(config: SynthConfig, frame_id: str) -> str:
    query = {
        "frame": frame_id,
        "side": config.side,
        "noise": repr(config.noise),
        "seed": config.seed,
        "aus": ".".join(str(c) for c in config.modeled_aus),
        "regions": _fmt_map(config.regions, "."),
        "colors": _fmt_map(config.colors, "/"),
    }
    return URI_SCHEME + urlencode(query, safe=":,./")


def parse_synthetic_uri(uri: str) -> tuple[SynthConfig, str]:
    if not uri.startswith(URI_SCHEME):
        raise InvalidConfig(f"not a synthetic URI: {uri!r}")
    try:
        q = dict(parse_qsl(uri[len(URI_SCHEME):], strict_parsing=True))
        config = SynthConfig(
            side=int(q["side"]),
            noise=float(q["noise"]),
            seed=int(q["seed"]),
            modeled_aus=tuple(int(c) for c in q["aus"].split(".")),
            regions=_parse_map(q["regions"], ".", int),
            colors=_parse_map(q["colors"], "/", float),
        )
        return config, q["frame"]
    except (KeyError, ValueError) as exc:
        raise InvalidConfig(f"malformed synthetic URI {uri!r}: {exc}") from None


def frame_id_for(config: SynthConfig, index: int) -> str:
    return f"{config.frame_prefix}{index:06d}"


def synth_generate(config: SynthConfig, render: bool = True):
    """Sample a labelled synthetic dataset.

    Returns ``(manifest, images)`` where ``images`` is an ``N x side x side x 3``
    float32 array aligned with ``manifest.records`` (``None`` if ``render`` is off).
    Image references use the ``synthetic:`` scheme, so frames can be re-rendered
    from the manifest alone.
    """
    config.validate()
    records = []
    for i in range(config.count):
        fid = frame_id_for(config, i)
        rng = frame_rng(config.seed, fid, "synth")
        category = PainCategory3(int(rng.choice(len(config.mixture), p=config.mixture)))
        au = sample_intensities(rng, category, config)
        subject = f"{config.subject_prefix}{i % config.n_subjects:02d}"
        records.append(make_record(fid, subject, synthetic_uri(config, fid), au, config.modeled_aus))
    manifest = DatasetManifest(
        records,
        config.modeled_aus,
        {"source": "synthetic", "seed": int(config.seed), "count": int(config.count),
         "mixture": list(config.mixture), "noise": float(config.noise),
         "cooccur": float(config.cooccur), "history": []},
    )
    images = None
    if render:
        images = np.zeros((len(records), config.side, config.side, 3), dtype=np.float32)
        for i, r in enumerate(manifest.records):
            images[i] = render_image(r.au, config, r.frame_id)
    return manifest, images


__all__ = [
    "DEFAULT_CELLS",
    "DEFAULT_COLORS",
    "SynthConfig",
    "cell_regions",
    "parse_synthetic_uri",
    "render_image",
    "sample_intensities",
    "synth_generate",
    "synthetic_uri",
]
