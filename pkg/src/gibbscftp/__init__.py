"""Perfect sampling of nearest-neighbor Markov random fields on Z^d.

Coupling-from-the-past with coupled heat-bath block dynamics, plus exact
desk-scale verification of spatial-mixing conditions and grand couplings.
"""

__version__ = "0.1.0"
