"""Quasi-dense image matching with multi-level correlation pyramids."""

from .autograd import Model, backward, forward, gradcheck
from .decoder import decode, decode_oracle
from .geometry import Discretization, LevelGeometry
from .matching import FlowField, Match, MatchSet, accuracy_at, epe
from .pipeline import MatchResult, match_pair
from .pyramid import SENTINEL, build_pyramid
from .synthetic import SyntheticSpec, generate_pair

__version__ = "0.1.0"

__all__ = [
    "Discretization", "FlowField", "LevelGeometry", "Match", "MatchResult", "MatchSet", "Model",
    "SENTINEL", "SyntheticSpec", "accuracy_at", "backward", "build_pyramid", "decode", "decode_oracle",
    "epe", "forward", "generate_pair", "gradcheck", "match_pair",
]
