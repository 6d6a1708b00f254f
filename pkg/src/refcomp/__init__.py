"""Desk-scale reference-guided image composition.

A shared-parameter dual-stream diffusion backbone (convolutional and
token-sequence instantiations), a synthetic composition benchmark, frame
curation filters, and a feature-consistency validation lab.
"""

__version__ = "0.1.0"
