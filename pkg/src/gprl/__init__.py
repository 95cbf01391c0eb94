"""Generative-prior latent search toolkit.

Super-resolution by optimizing a style generator's latent code under a
normalizing-flow prior (anchor search), then jointly fine-tuning the code,
generator weights and noise inputs inside an l1 ball around the anchor
(ball refinement). Ships a desk-scale style generator, the flow, the
degradation battery, the experiment harness, a FastAPI service wrapping it
all, and a thin-client CLI.
"""

__version__ = "0.1.0"
