"""Desk-scale video multi-object segmentation and tracking.

Frames go through a detection branch (channel-attention fusion with
guidance from the previous frame's output, then salient and center/offset
decoders) to yield instance proposals; each discovered object is tracked
by a small appearance model fit online with Gauss-Newton over a weighted
memory of past frames.  Everything runs on numpy arrays.
"""

from .config import PipelineConfig
from .errors import ContractError, DataError, NumericalError
from .features import Frame
from .heads import HeadParams
from .mask import InstanceMask
from .metrics import MetricReport, TrackSet, evaluate
from .pipeline import PipelineResult, RunRecord, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "ContractError",
    "DataError",
    "Frame",
    "HeadParams",
    "InstanceMask",
    "MetricReport",
    "NumericalError",
    "PipelineConfig",
    "PipelineResult",
    "RunRecord",
    "TrackSet",
    "evaluate",
    "run_pipeline",
    "__version__",
]
