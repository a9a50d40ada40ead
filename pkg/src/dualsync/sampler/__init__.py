"""Few-step and full-chain samplers with a cross-branch feature buffer."""

from dualsync.sampler.bench import BenchRow, bench_strategies, write_bench_csv
from dualsync.sampler.buffer import FeatureBuffer, Snapshot
from dualsync.sampler.engine import (GenerationResult, branch_rngs, check_trace, lag_of, sample,
                                     sample_async, sample_sync, write_trace)
from dualsync.sampler.long import blend_weights, generate_long, seam_jumps, window_starts
from dualsync.sampler.plan import DEFAULT_STEPS, STRATEGIES, SamplerPlan, interleave_map, make_plan

__all__ = [
    "BenchRow", "bench_strategies", "write_bench_csv", "FeatureBuffer", "Snapshot",
    "GenerationResult", "branch_rngs", "check_trace", "lag_of", "sample", "sample_async",
    "sample_sync", "write_trace", "blend_weights", "generate_long", "seam_jumps", "window_starts",
    "DEFAULT_STEPS", "STRATEGIES", "SamplerPlan", "interleave_map", "make_plan",
]
