"""Rate planning for tiled 360-degree video under bandwidth and viewport uncertainty."""

from .bandwidth import PredictionModel, ThroughputTrace, load_trace, predicted_capacity, true_capacity
from .fov import (FovDistribution, FovTrace, Viewport, enumerate_viewports, most_likely_set,
                  robust_set, sample_trace, synthetic_distribution)
from .model import (ContinuousRatePlan, RatePlan, Timeline, TimingOrigin, VideoConfig,
                    chunk_size_mbits, compute_timeline, reference_config, stall_time)
from .qoe import (QoeWeights, Utility, expected_chunk_qoe, objective_expected, objective_robust,
                  realized_metrics)

__version__ = "0.1.0"
