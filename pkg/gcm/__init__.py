"""gcm — And-Or grammar model for interactive action detection on precomputed leaf features.

Layers per clip: entities → primitive branches (body / object / human) →
concurrent action → long-range context from the memory bank → root classifier.
"""

from gcm.pipeline import main, run

__all__ = ["main", "run"]
