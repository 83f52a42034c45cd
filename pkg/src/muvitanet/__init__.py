"""Multi-view multi-task complication risk profiling from longitudinal claims."""

__version__ = "0.1.0"
