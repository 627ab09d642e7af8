"""End-to-end matching: descriptors -> pyramid -> decode -> extract -> verify -> densify."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd, matching
from .decoder import DecodeState
from .geometry import Discretization
from .pyramid import PyramidState


@dataclass
class MatchResult:
    pyramid: PyramidState
    decoded: DecodeState
    matches: matching.MatchSet
    flow: matching.FlowField

    @property
    def q0(self) -> np.ndarray:
        return self.decoded.maps[0]


def match_pair(image0, image1, model: autograd.Model, disc: Discretization, radius: int = 8,
               confidence_first: bool = True) -> MatchResult:
    tape = autograd.forward(image0, image1, model, disc)
    geom = tape.pyramid.geoms[0]
    q0 = tape.decoded.maps[0]
    matches = matching.verify(matching.extract(q0, geom), q0, geom)
    shape = np.asarray(image0).shape[:2]
    flow = matching.densify(matches, shape, radius, confidence_first)
    return MatchResult(tape.pyramid, tape.decoded, matches, flow)
