"""Option-programmable Krylov solvers and preconditioners."""
from .core import (KSP, LevelOperator, OperatorStack, SolveStats, build_pc, build_solver, build_stack,
                   solve)
from .options import OptionTree, help_text, parse_options, read_options_file, supported_keys
from .patch import PatchSmoother
from .transfer import TransferOps, build_transfer, prolongation

__all__ = ["KSP", "LevelOperator", "OperatorStack", "SolveStats", "build_pc", "build_solver", "build_stack",
           "solve", "OptionTree", "help_text", "parse_options", "read_options_file", "supported_keys",
           "PatchSmoother", "TransferOps", "build_transfer", "prolongation", "mg_cycle"]


def mg_cycle(node, level, b, x=None):
    """Run one V-cycle of the multigrid preconditioner of ``node`` from ``level``."""
    pc = node.pc
    if pc.kind != "mg":
        raise TypeError("node is not multigrid-preconditioned")
    return pc.vcycle(level, b, x)
