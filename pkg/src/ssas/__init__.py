"""Two-stage multi-source domain adaptation with source selection.

Stage one scores each source domain's transferability by reverse-running the
adaptation game (domain labels classified normally, emotion labels and
per-source discrepancies pushed through gradient reversal); stage two trains
the adversarial adaptation network on the re-weighted sources. A finite
instance verifier checks the divergence bound that motivates the design.
"""

__version__ = "0.1.0"
