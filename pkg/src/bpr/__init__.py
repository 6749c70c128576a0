"""Brain-signal passage retrieval engine.

Dual-encoder dense retrieval where queries are word-aligned brain-signal
feature sequences and targets are text passages embedded into one shared
unit-norm vector space.
"""

__version__ = "0.1.0"
