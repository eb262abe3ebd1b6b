"""Bit-level header model: field layouts, header values, wildcard masks, masked keys.

Layouts are plain data so the same code paths serve both the real five-field
layout and tiny synthetic layouts used in tests.  Bit index 0 is the most
significant bit of a field.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional


class LayoutMismatch(ValueError):
    """Two values built on different layouts were combined."""


@dataclass(frozen=True)
class FieldSpec:
    """One fixed-width header field."""

    name: str
    width: int

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError(f"field {self.name!r}: width must be >= 1, got {self.width}")

    @property
    def full_mask(self) -> int:
        return (1 << self.width) - 1


@dataclass(frozen=True)
class HeaderLayout:
    """Ordered, total set of fields; order is fixed for every walk over a header."""

    fields: tuple[FieldSpec, ...]

    def __post_init__(self) -> None:
        names = [f.name for f in self.fields]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate field names in layout: {names}")
        object.__setattr__(self, "_hash", hash(self.fields))

    def __hash__(self) -> int:  # cached; layouts are hashed on every cache probe
        return self._hash  # type: ignore[attr-defined]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.fields)

    def index(self, name: str) -> int:
        for i, f in enumerate(self.fields):
            if f.name == name:
                return i
        raise KeyError(name)

    def spec(self, name: str) -> FieldSpec:
        return self.fields[self.index(name)]

    def check_values(self, values: tuple[int, ...], what: str) -> None:
        if len(values) != len(self.fields):
            raise ValueError(f"{what}: expected {len(self.fields)} fields, got {len(values)}")
        for f, v in zip(self.fields, values):
            if not 0 <= v <= f.full_mask:
                raise ValueError(f"{what}: field {f.name!r} value {v:#x} exceeds {f.width} bits")


@dataclass(frozen=True)
class FieldVector:
    """Per-field unsigned integers bound to a layout.  Immutable and hashable."""

    layout: HeaderLayout
    values: tuple[int, ...]

    def __post_init__(self) -> None:
        self.layout.check_values(self.values, type(self).__name__)
        object.__setattr__(
            self, "_hash", hash((type(self).__name__, hash(self.layout), self.values))
        )

    def __hash__(self) -> int:  # cached; these are dictionary keys on hot paths
        return self._hash  # type: ignore[attr-defined]

    def get(self, name: str) -> int:
        return self.values[self.layout.index(name)]

    def items(self) -> Iterable[tuple[str, int]]:
        return zip(self.layout.names, self.values)


class HeaderValue(FieldVector):
    """One packet's classifier-relevant field values."""


class HeaderMask(FieldVector):
    """Bitwise wildcard mask; a set bit means the bit is examined (un-wildcarded)."""

    def is_full(self) -> bool:
        return all(v == f.full_mask for f, v in zip(self.layout.fields, self.values))


class MaskedKey(FieldVector):
    """A header AND-ed with a mask; key & ~mask == 0 holds per field by construction."""

    def as_header(self) -> HeaderValue:
        return HeaderValue(self.layout, self.values)


def header(layout: HeaderLayout, **fields: int) -> HeaderValue:
    """Build a HeaderValue by field name; every field of the layout is required."""
    missing = set(layout.names) - set(fields)
    if missing:
        raise ValueError(f"missing header fields: {sorted(missing)}")
    extra = set(fields) - set(layout.names)
    if extra:
        raise ValueError(f"unknown header fields: {sorted(extra)}")
    return HeaderValue(layout, tuple(fields[n] for n in layout.names))


def mask(layout: HeaderLayout, **fields: int) -> HeaderMask:
    """Build a HeaderMask by field name; absent fields are fully wildcarded (0)."""
    extra = set(fields) - set(layout.names)
    if extra:
        raise ValueError(f"unknown mask fields: {sorted(extra)}")
    return HeaderMask(layout, tuple(fields.get(n, 0) for n in layout.names))


def full_mask(layout: HeaderLayout) -> HeaderMask:
    return HeaderMask(layout, tuple(f.full_mask for f in layout.fields))


def apply_mask(h: HeaderValue, m: HeaderMask) -> MaskedKey:
    """Per-field bitwise AND of a header with a mask."""
    if h.layout != m.layout:
        raise LayoutMismatch("header and mask use different layouts")
    return MaskedKey(h.layout, tuple(v & mv for v, mv in zip(h.values, m.values)))


def first_diff_bit(a: int, b: int, width: int) -> Optional[int]:
    """Smallest bit index (0 = MSB) where a and b differ, or None if equal."""
    if a >> width or b >> width or a < 0 or b < 0:
        raise ValueError(f"values must fit in {width} bits")
    diff = a ^ b
    if diff == 0:
        return None
    return width - diff.bit_length()


def prefix_mask(width: int, length: int) -> int:
    """Mask with the `length` most-significant bits of a `width`-bit field set."""
    if not 0 <= length <= width:
        raise ValueError(f"prefix length {length} out of range for width {width}")
    if length == 0:
        return 0
    return ((1 << length) - 1) << (width - length)


def mask_union(m1: HeaderMask, m2: HeaderMask) -> HeaderMask:
    """Per-field bitwise OR of two masks."""
    if m1.layout != m2.layout:
        raise LayoutMismatch("masks use different layouts")
    return HeaderMask(m1.layout, tuple(a | b for a, b in zip(m1.values, m2.values)))


def megaflows_overlap(e1: tuple[MaskedKey, HeaderMask], e2: tuple[MaskedKey, HeaderMask]) -> bool:
    """True iff some header matches both entries.

    Two masked entries overlap exactly when their keys agree on every bit
    both masks examine.
    """
    k1, m1 = e1
    k2, m2 = e2
    if k1.layout != k2.layout:
        raise LayoutMismatch("entries use different layouts")
    for a, ma, b, mb in zip(k1.values, m1.values, k2.values, m2.values):
        common = ma & mb
        if (a ^ b) & common:
            return False
    return True


_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3


def header_hash64(h: HeaderValue) -> int:
    """Stable 64-bit FNV-1a hash over the header's fields, MSB-first per field."""
    acc = _FNV_OFFSET
    for f, v in zip(h.layout.fields, h.values):
        nbytes = (f.width + 7) // 8
        for byte in v.to_bytes(nbytes, "big"):
            acc ^= byte
            acc = (acc * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return acc


# The two layouts used throughout: the real five-field layout and the 3-bit
# synthetic one.  Field order is fixed; walks examine fields in this order.
FIVE_TUPLE = HeaderLayout(
    (
        FieldSpec("ip_src", 32),
        FieldSpec("ip_dst", 32),
        FieldSpec("proto", 8),
        FieldSpec("sport", 16),
        FieldSpec("dport", 16),
    )
)

HYP = HeaderLayout((FieldSpec("hyp", 3),))

IP_FIELDS = ("ip_src", "ip_dst")


def ip_to_int(dotted: str) -> int:
    parts = dotted.split(".")
    if len(parts) != 4:
        raise ValueError(f"bad IPv4 address {dotted!r}")
    out = 0
    for p in parts:
        b = int(p)
        if not 0 <= b <= 255:
            raise ValueError(f"bad IPv4 address {dotted!r}")
        out = (out << 8) | b
    return out


def int_to_ip(value: int) -> str:
    if not 0 <= value < 1 << 32:
        raise ValueError(f"IPv4 value out of range: {value}")
    return ".".join(str((value >> s) & 0xFF) for s in (24, 16, 8, 0))
