"""Python bindings for the two-stage video virtual try-on toolkit.

All image/map arguments are flat row-major lists of floats with the shape
passed alongside; see the individual function docstrings.
"""

from ._native import (
    current_max_skip,
    fid_from_features,
    flow_consistency,
    make_toy_data,
    memory_read_py as memory_read,
    region_compose,
    run_cli,
)

__all__ = [
    "current_max_skip",
    "fid_from_features",
    "flow_consistency",
    "make_toy_data",
    "memory_read",
    "region_compose",
    "run_cli",
]
