"""Surrogate-assisted evolution of sequential CNN architectures encoded as
register-transfer programs, with Kriging-PLS fitness imputation managed by an
expected-improvement criterion."""

__version__ = "0.1.0"

from .genome import (  # noqa: F401
    ArchitectureDescriptor,
    DEFAULT_CATALOGUE,
    Genome,
    GenomeConfig,
    Instruction,
    LayerOp,
    TensorShape,
    decode,
    effective_indices,
    from_text,
    random_genome,
    strip_introns,
    to_text,
)
from .repair import RepairConfig, RepairReport, repair  # noqa: F401
from .engine import RunConfig, RunResult, run  # noqa: F401
