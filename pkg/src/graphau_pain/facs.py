"""FACS labeling math: PSPI, pain categories and AU occurrence.

Everything here is a pure function over plain ``{au_code: intensity}`` dicts.
"""
from __future__ import annotations

from enum import IntEnum
from typing import Mapping

from .errors import InvalidIntensity, InvalidPSPI, MissingAU

AU_CODES = (1, 2, 4, 6, 7, 9, 10, 12, 25, 26, 43)
PSPI_AUS = (4, 6, 7, 9, 10, 43)
BINARY_AUS = frozenset({43})
PSPI_MAX = 16


class PainCategory3(IntEnum):
    NoPain = 0
    Mild = 1
    Obvious = 2


class PainCategory4(IntEnum):
    NoPain = 0
    Weak = 1
    Mild = 2
    Strong = 3


SCHEMES = {"3cat": PainCategory3, "4cat": PainCategory4}


def max_intensity(code: int) -> int:
    return 1 if code in BINARY_AUS else 5


def validate_intensities(aus: Mapping[int, int]) -> None:
    for code, value in aus.items():
        if code not in AU_CODES:
            raise InvalidIntensity(f"unrecognized AU code {code!r}")
        if isinstance(value, bool) or not isinstance(value, int):
            raise InvalidIntensity(f"AU{code} intensity must be an integer, got {value!r}")
        if not 0 <= value <= max_intensity(code):
            raise InvalidIntensity(
                f"AU{code} intensity {value} outside [0, {max_intensity(code)}]"
            )


def compute_pspi(aus: Mapping[int, int]) -> int:
    """PSPI = AU4 + max(AU6, AU7) + max(AU9, AU10) + AU43.

    Absent constituents raise :class:`MissingAU` instead of counting as zero.
    """
    for code in PSPI_AUS:
        if code not in aus:
            raise MissingAU(code)
    validate_intensities(aus)
    return aus[4] + max(aus[6], aus[7]) + max(aus[9], aus[10]) + aus[43]


def _check_pspi(p: int) -> None:
    if isinstance(p, bool) or not isinstance(p, int) or not 0 <= p <= PSPI_MAX:
        raise InvalidPSPI(f"PSPI must be an integer in [0, {PSPI_MAX}], got {p!r}")


def categorize_pain_3(p: int) -> PainCategory3:
    _check_pspi(p)
    if p == 0:
        return PainCategory3.NoPain
    if p <= 4:
        return PainCategory3.Mild
    return PainCategory3.Obvious


def categorize_pain_4(p: int) -> PainCategory4:
    _check_pspi(p)
    if p >= 3:
        return PainCategory4.Strong
    return PainCategory4(p)


def categorize(p: int, scheme: str = "3cat") -> IntEnum:
    if scheme == "3cat":
        return categorize_pain_3(p)
    if scheme == "4cat":
        return categorize_pain_4(p)
    raise ValueError(f"unknown scheme {scheme!r}")


def to_occurrence(aus: Mapping[int, int]) -> dict[int, int]:
    validate_intensities(aus)
    return {code: min(value, 1) for code, value in aus.items()}
