"""Kernel-based tests for heterogeneous treatment effects under clustered interference."""

from .data import (
    ClusteredSample,
    CsvSchema,
    ExposureMapping,
    apply_exposure_mapping,
    load_clustered_csv,
    overlap_check,
    write_clustered_csv,
)
from .errors import DataError, HteError, NumericalError, ParseError, SchemaError
from .inference import TestConfig, TestResult, holm, run_tests, s1_test, s2_test
from .kernel import BandwidthRule, KernelSpec, bandwidth

__version__ = "0.1.0"

__all__ = [
    "ClusteredSample",
    "CsvSchema",
    "ExposureMapping",
    "apply_exposure_mapping",
    "load_clustered_csv",
    "overlap_check",
    "write_clustered_csv",
    "DataError",
    "HteError",
    "NumericalError",
    "ParseError",
    "SchemaError",
    "TestConfig",
    "TestResult",
    "holm",
    "run_tests",
    "s1_test",
    "s2_test",
    "BandwidthRule",
    "KernelSpec",
    "bandwidth",
]
