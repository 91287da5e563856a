"""Flat, prefix-nested solver options.

Keys are underscore-joined paths such as ``mg_levels_ksp_type``.  A key is a
chain of *context prefixes* (``mg_levels_``, ``mg_coarse_``, ``telescope_``)
followed by one *leaf* name from :data:`LEAVES`.  Nested maps are flattened
by joining keys with ``_``; a value of ``None`` marks a flag.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

from ..errors import InvalidValue, UnknownOption

PREFIXES = ("mg_levels_", "mg_coarse_", "telescope_")


def _enum(*choices):
    def check(key, value):
        if value not in choices:
            raise UnknownOption(f"{key}: unknown value {value!r}; choose from {', '.join(choices)}")
        return value
    check.doc = "|".join(choices)
    return check


def _int(lo=None):
    def check(key, value):
        try:
            v = int(value)
        except (TypeError, ValueError):
            raise InvalidValue(f"{key}: expected an integer, got {value!r}") from None
        if lo is not None and v < lo:
            raise InvalidValue(f"{key}: must be >= {lo}, got {v}")
        return v
    check.doc = "int" if lo is None else f"int>={lo}"
    return check


def _float(positive=False):
    def check(key, value):
        try:
            v = float(value)
        except (TypeError, ValueError):
            raise InvalidValue(f"{key}: expected a real number, got {value!r}") from None
        if positive and not v > 0:
            raise InvalidValue(f"{key}: must be positive, got {v}")
        return v
    check.doc = "real>0" if positive else "real"
    return check


def _flag(key, value):
    if value in (None, "", "1", "true", "True", True):
        return True
    if value in ("0", "false", "False", False):
        return False
    raise InvalidValue(f"{key}: expected a flag, got {value!r}")


_flag.doc = "flag"

LEAVES = {
    "ksp_type": _enum("preonly", "cg", "richardson", "chebyshev"),
    "ksp_max_it": _int(0),
    "ksp_rtol": _float(),
    "ksp_atol": _float(),
    "ksp_norm_type": _enum("unpreconditioned", "preconditioned", "none"),
    "ksp_convergence_test": _enum("standard", "skip"),
    "ksp_richardson_scale": _float(positive=True),
    "chebyshev_esteig_min_factor": _float(positive=True),
    "chebyshev_esteig_max_factor": _float(positive=True),
    "chebyshev_esteig_steps": _int(1),
    "pc_type": _enum("none", "jacobi", "lu", "mg", "patch", "telescope"),
    "pc_lu_max_dofs": _int(1),
    "pc_mg_type": _enum("multiplicative", "full"),
    "pc_mg_log": _flag,
    "patch_pc_patch_construct_type": _enum("star"),
    "patch_pc_patch_construct_dim": _enum("0"),
    "pc_telescope_reduction_factor": _int(1),
    "pc_telescope_subcomm_type": _enum("contiguous"),
}

_LEAF_RE = re.compile(r"^((?:%s)*)(%s)$" % ("|".join(PREFIXES), "|".join(sorted(LEAVES, key=len, reverse=True))))


def supported_keys():
    """``(pattern, value doc)`` for every leaf, in vocabulary order."""
    pfx = "[" + "|".join(p for p in PREFIXES) + "]*"
    return [(f"{pfx}{leaf}", LEAVES[leaf].doc) for leaf in LEAVES]


def help_text():
    lines = ["Solver options (key value); keys may be prefixed by any chain of "
             + ", ".join(PREFIXES) + ":"]
    lines += [f"  {leaf:<34s} {LEAVES[leaf].doc}" for leaf in LEAVES]
    return "\n".join(lines)


def _split_key(key):
    m = _LEAF_RE.match(key)
    if m is None:
        listing = ", ".join(LEAVES)
        raise UnknownOption(f"unknown option {key!r}; supported leaves (any prefix chain of "
                            f"{', '.join(PREFIXES)}): {listing}")
    return m.group(1), m.group(2)


def flatten_options(mapping, prefix=""):
    """Join nested option maps into flat ``a_b_c`` keys."""
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten_options(v, key + "_"))
        else:
            out[key] = v
    return out


@dataclass
class OptionTree:
    values: dict = field(default_factory=dict)       # key -> validated value
    raw: dict = field(default_factory=dict)          # key -> original string
    consumed: set = field(default_factory=set)

    def get(self, key, default=None):
        if key in self.values:
            self.consumed.add(key)
            return self.values[key]
        return default

    def has(self, key):
        return key in self.values

    def unused(self):
        return sorted(set(self.values) - self.consumed)

    def with_defaults(self, defaults: dict) -> "OptionTree":
        """Copy with ``defaults`` filled in for absent keys."""
        merged = dict(defaults)
        merged.update(self.raw)
        return parse_options(merged)

    def to_text(self):
        return "\n".join(f"{k} {'' if v is None else v}".rstrip() for k, v in sorted(self.raw.items())) + "\n"


def parse_options(source) -> OptionTree:
    """Parse a map (possibly nested) or ``key value`` text into an :class:`OptionTree`."""
    if isinstance(source, OptionTree):
        return source
    if isinstance(source, str):
        flat = {}
        for line in source.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split(None, 1)
            flat[parts[0].lstrip("-")] = parts[1].strip() if len(parts) > 1 else None
    else:
        flat = flatten_options(dict(source or {}))
    tree = OptionTree()
    for key, value in flat.items():
        _, leaf = _split_key(key)
        sval = value if value is None or isinstance(value, str) else str(value)
        tree.values[key] = LEAVES[leaf](key, sval)
        tree.raw[key] = sval
    return tree


def read_options_file(path) -> OptionTree:
    with open(path) as fh:
        return parse_options(fh.read())
