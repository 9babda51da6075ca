"""Memory-budgeted streaming over 3D volumes stored as slice stacks.

Volumes far larger than RAM stream through pull-driven pipelines as
reference-counted 2D slices. A static planner prices every stage with a
closed-form memory estimate, proves the pipeline fits a byte budget (or
repairs it with window resizing and mid-write checkpoints), and the
runtime verifies the promise with an instrumented allocator.
"""

from .core import (ALLOC, DTYPES, F32, U8, U16, AlgorithmClass, Budget,
                   DepthMismatchError, Dtype, EngineError, MemEstimate,
                   PipelineGraph, PlanStage, PlanningError, RefcountError,
                   Slice, SliceAllocator, SliceMeta, StageError, VolumeMeta,
                   chain, release, retain, slice_bytes, tee_graph)
from .ops import Histogram, Kernel3D, StructuringElement
from .planner import (MemoryLedger, Plan, RepairAction, estimate_pipeline,
                      estimate_stage, fuse_convolutions, insert_midwrites,
                      max_width, optimize_windows, plan, share_windows)
from .runtime import RunReport, execute_plan, run_graph

__version__ = "0.1.0"
