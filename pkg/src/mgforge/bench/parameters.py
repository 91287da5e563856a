"""Reference solver parameter sets and their translation to native options.

The parameter dictionaries below use the host-framework vocabulary, where
the patch smoother and the assembled coarse operator are reached through
Python delegation wrappers (``pc_type python`` plus a class name).  The
engine has no such indirection, so :func:`translate_options` rewrites them:

* ``pc_type python`` + ``pc_python_type ...PatchPC`` becomes ``pc_type patch``;
* ``pc_type python`` + ``pc_python_type ...AssembledPC`` is dropped and the
  ``assembled_`` sub-prefix is lifted into the enclosing prefix;
* ``mat_type`` keys are dropped (operators are always assembled CSR).
"""
from __future__ import annotations

import copy

from ..solver.options import flatten_options

_LEVELS = {
    "ksp_type": "chebyshev",
    "ksp_max_it": 2,
    "ksp_norm_type": "unpreconditioned",
    "ksp_convergence_test": "skip",
    "pc_type": "python",
    "pc_python_type": "firedrake.PatchPC",
    "patch_pc_patch": {
        "construct_type": "star",
        "construct_dim": 0,
    },
}

FMG_PATCH_PARAMETERS = {
    "ksp_type": "preonly",
    "pc_type": "mg",
    "pc_mg_log": None,
    "pc_mg_type": "full",
    "mg_levels": _LEVELS,
    "mg_coarse_pc_type": "lu",
}


def telescope_parameters(factor: int) -> dict:
    """The FMG/patch set with a telescoped, redundantly solved coarse LU."""
    params = copy.deepcopy(FMG_PATCH_PARAMETERS)
    del params["mg_coarse_pc_type"]
    params["mg_coarse"] = {
        "pc_type": "python",
        "pc_python_type": "firedrake.AssembledPC",
        "assembled": {
            "mat_type": "aij",
            "pc_type": "telescope",
            "pc_telescope_reduction_factor": factor,
            "pc_telescope_subcomm_type": "contiguous",
            "telescope_pc_type": "lu",
        },
    }
    return params


def translate_options(params) -> dict:
    """Flatten ``params`` and map delegation wrappers onto native keys."""
    flat = flatten_options(params) if any(isinstance(v, dict) for v in params.values()) else dict(params)
    changed = True
    while changed:
        changed = False
        for key in sorted(flat):
            if not key.endswith("pc_python_type") or key not in flat:
                continue
            prefix = key[: -len("pc_python_type")]
            target = str(flat.pop(key))
            if flat.get(prefix + "pc_type") != "python":
                raise ValueError(f"{key} given without {prefix}pc_type python")
            if target.endswith("PatchPC"):
                flat[prefix + "pc_type"] = "patch"
            elif target.endswith("AssembledPC"):
                del flat[prefix + "pc_type"]
                inner = prefix + "assembled_"
                for k in [k for k in flat if k.startswith(inner)]:
                    flat[prefix + k[len(inner):]] = flat.pop(k)
            else:
                raise ValueError(f"no native equivalent for python preconditioner {target!r}")
            changed = True
    return {k: v for k, v in flat.items() if not k.endswith("mat_type")}


def native_fmg_options() -> dict:
    return translate_options(FMG_PATCH_PARAMETERS)


def native_telescope_options(factor: int) -> dict:
    return translate_options(telescope_parameters(factor))
