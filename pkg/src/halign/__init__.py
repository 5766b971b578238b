"""halign: object-hallucination scoring and preference-based captioner tuning.

The library measures how often generated captions mention objects that are
not in the image (CHAIR-style metrics), builds preference pairs by ranking
sampled completion pairs on that score, and tunes a toy captioner with
direct preference optimization so the hallucination rate drops while the
policy stays close to its reference.
"""

__version__ = "0.1.0"

from .lexicon import (  # noqa: F401
    Mention,
    SynonymLexicon,
    build_lexicon,
    extract_mentions,
    load_lexicon,
    normalize_term,
    starter_lexicon_path,
)
from .metrics import (  # noqa: F401
    EvalReport,
    GroundTruth,
    SampleScore,
    aggregate,
    chair_i,
    chair_s,
    cognition,
    coverage,
    load_detections,
    score_sample,
)
