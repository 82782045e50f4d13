from .report import format_table, read_csv, render_figures, write_csv
from .runner import LoadReport, RunMetrics, load, run
from .workload import (
    WORKLOADS,
    KeyChooser,
    KeySpace,
    Op,
    Operation,
    OperationStream,
    WorkloadSpec,
    ZipfianGenerator,
    workload,
)

__all__ = [
    "WORKLOADS",
    "KeyChooser",
    "KeySpace",
    "LoadReport",
    "Op",
    "Operation",
    "OperationStream",
    "RunMetrics",
    "WorkloadSpec",
    "ZipfianGenerator",
    "format_table",
    "load",
    "read_csv",
    "render_figures",
    "run",
    "workload",
    "write_csv",
]
