"""Concept-guided conditional diffusion and concept-guided prototype networks.

A desk-scale toolkit built around a synthetic shapes dataset whose concepts
are decidable from pixels, so concept-conditioned generations and concept
predictions can be verified automatically.
"""

__version__ = "0.1.0"
