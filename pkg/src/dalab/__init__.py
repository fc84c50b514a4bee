"""Numerical laboratory for derived-from-Anosov diffeomorphisms of the 4-torus."""
from .torus import AdaptedMetric, InvalidInput, lift_near, torus_distance, wrap
from .linear import (IntegerMatrix, SpectrumFrame, build_An, build_theoremC_matrix, char_poly,
                     solve_spectrum)
from .perturb import DiffeoModel, compose_da, make_center_booster

__version__ = "0.1.0"

__all__ = [
    "AdaptedMetric", "InvalidInput", "lift_near", "torus_distance", "wrap",
    "IntegerMatrix", "SpectrumFrame", "build_An", "build_theoremC_matrix", "char_poly",
    "solve_spectrum", "DiffeoModel", "compose_da", "make_center_booster",
]
