"""Register-based linear program encoding of sequential network architectures.

A genome is an ordered list of register-transfer instructions over a fixed
register file.  Each register denotes an intermediate tensor: executing an
instruction applies one catalogued layer to the tensor referenced by the
source register and stores the result in the destination register.  Register 0
holds the program output.  Instructions that do not influence the final
content of register 0 are non-effective ("introns"): they are skipped when
the genome is decoded into a layer chain, but they remain part of the genome
and are visible to the variation operators.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass

import numpy as np

OUTPUT_REGISTER = 0

CONV = "conv"
MAXPOOL = "maxpool"
BATCHNORM = "batchnorm"
DROPOUT = "dropout"
DENSE = "dense"


class ParseError(ValueError):
    """Malformed genome text. Carries the offending 1-based line number."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyEffectiveCode(ValueError):
    """No instruction writes the output register, so there is nothing to decode."""


@dataclass(frozen=True)
class LayerOp:
    """One catalogued layer operation, identified by a stable catalogue index.

    All operations are unary (one input tensor).  Dense carries no width: the
    width is resolved against the incoming tensor when the architecture is
    compiled (see the repair rules).
    """

    kind: str
    name: str
    filters: int | None = None
    kernel: int | None = None
    pool: int | None = None
    rate: float | None = None


DEFAULT_CATALOGUE: tuple[LayerOp, ...] = (
    LayerOp(CONV, "Conv8k3", filters=8, kernel=3),
    LayerOp(CONV, "Conv8k5", filters=8, kernel=5),
    LayerOp(CONV, "Conv16k3", filters=16, kernel=3),
    LayerOp(CONV, "Conv16k5", filters=16, kernel=5),
    LayerOp(CONV, "Conv32k3", filters=32, kernel=3),
    LayerOp(CONV, "Conv32k5", filters=32, kernel=5),
    LayerOp(MAXPOOL, "MaxPool2", pool=2),
    LayerOp(MAXPOOL, "MaxPool3", pool=3),
    LayerOp(BATCHNORM, "BatchNorm"),
    LayerOp(DROPOUT, "Dropout25", rate=0.25),
    LayerOp(DROPOUT, "Dropout50", rate=0.5),
    LayerOp(DENSE, "Dense"),
)

# Shorthand op names accepted by the parser (bare names map to a default
# catalogue entry; canonical names are always accepted).
ALIASES = {"Conv": "Conv32k3", "MaxPool": "MaxPool3", "Dropout": "Dropout25"}


@dataclass(frozen=True)
class Instruction:
    dest: int
    op: int
    src: int


@dataclass(frozen=True)
class Genome:
    instructions: tuple[Instruction, ...]

    def __len__(self) -> int:
        return len(self.instructions)

    def __iter__(self):
        return iter(self.instructions)

    def __getitem__(self, i: int) -> Instruction:
        return self.instructions[i]


@dataclass(frozen=True)
class GenomeConfig:
    registers: int = 12
    min_len: int = 1
    max_len: int = 15
    catalogue: tuple[LayerOp, ...] = DEFAULT_CATALOGUE


@dataclass(frozen=True)
class TensorShape:
    """Spatial tensor shape. Post-flatten stages are represented as (1, 1, width)."""

    height: int
    width: int
    channels: int

    @property
    def flat(self) -> int:
        return self.height * self.width * self.channels


@dataclass(frozen=True)
class ArchitectureDescriptor:
    """Decoded effective layer chain. A softmax head of width ``num_classes``
    is appended at compile time and is not part of ``layers``."""

    layers: tuple[LayerOp, ...]
    input_shape: TensorShape
    num_classes: int


def effective_indices(g: Genome) -> tuple[int, ...]:
    """Indices of instructions reachable by a backward trace from the last
    write to register 0, in program order.  All ops are unary, so the result
    is a single chain.  Empty when nothing writes register 0."""
    chain: list[int] = []
    need = OUTPUT_REGISTER
    pos = len(g)
    while True:
        writer = None
        for j in range(pos - 1, -1, -1):
            if g[j].dest == need:
                writer = j
                break
        if writer is None:
            break
        chain.append(writer)
        need = g[writer].src
        pos = writer
    return tuple(reversed(chain))


def strip_introns(g: Genome) -> Genome:
    """Genome containing only the effective instructions, in order."""
    return Genome(tuple(g[i] for i in effective_indices(g)))


def decode(
    g: Genome,
    input_shape: TensorShape,
    num_classes: int = 3,
    catalogue: tuple[LayerOp, ...] = DEFAULT_CATALOGUE,
) -> ArchitectureDescriptor:
    """Decode the effective chain into an architecture descriptor.

    Executes effective instructions in order; every register initially
    denotes the raw input tensor, and reading a register yields the output of
    the last layer written to it.  Shapes are not validated here.
    """
    idx = effective_indices(g)
    if not idx:
        raise EmptyEffectiveCode("no instruction writes the output register")
    layers = tuple(catalogue[g[i].op] for i in idx)
    return ArchitectureDescriptor(layers, input_shape, num_classes)


def random_genome(rng: np.random.Generator, cfg: GenomeConfig = GenomeConfig()) -> Genome:
    """Uniform-length genome with uniform dest/op/src fields. Not guaranteed
    to decode to a valid architecture; repair runs afterwards."""
    length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
    n_ops = len(cfg.catalogue)
    instrs = tuple(
        Instruction(
            dest=int(rng.integers(cfg.registers)),
            op=int(rng.integers(n_ops)),
            src=int(rng.integers(cfg.registers)),
        )
        for _ in range(length)
    )
    return Genome(instrs)


def stable_key(g: Genome) -> int:
    """Order-stable 64-bit key of the instruction list (process-independent)."""
    packed = b"".join(struct.pack("<iii", ins.dest, ins.op, ins.src) for ins in g)
    return int.from_bytes(hashlib.blake2b(packed, digest_size=8).digest(), "little")


def to_text(
    g: Genome,
    catalogue: tuple[LayerOp, ...] = DEFAULT_CATALOGUE,
    annotated: bool = False,
) -> str:
    """Line-oriented listing ``r[d] := Op(r[s])``. With ``annotated`` the
    introns are rendered as ``//`` comment lines."""
    introns = set(range(len(g))) - set(effective_indices(g)) if annotated else set()
    lines = []
    for i, ins in enumerate(g):
        line = f"r[{ins.dest}] := {catalogue[ins.op].name}(r[{ins.src}])"
        if i in introns:
            line = "// " + line
        lines.append(line)
    return "\n".join(lines)


_LINE_RE = re.compile(
    r"^\s*(?://\s*)?r\[(\d+)\]\s*:=\s*([A-Za-z_]\w*)\s*\(\s*r\[(\d+)\]\s*\)\s*$"
)


def from_text(text: str, cfg: GenomeConfig = GenomeConfig()) -> Genome:
    """Parse a genome listing. Comment-prefixed lines parse as ordinary
    instructions (they are introns, which are still genome content)."""
    by_name = {op.name: i for i, op in enumerate(cfg.catalogue)}
    instrs: list[Instruction] = []
    for line_no, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        m = _LINE_RE.match(raw)
        if m is None:
            raise ParseError(line_no, f"expected 'r[d] := Op(r[s])', got {raw.strip()!r}")
        dest, name, src = int(m.group(1)), m.group(2), int(m.group(3))
        name = ALIASES.get(name, name)
        if name not in by_name:
            raise ParseError(line_no, f"unknown op {m.group(2)!r}")
        if not (0 <= dest < cfg.registers and 0 <= src < cfg.registers):
            raise ParseError(line_no, f"register out of range (file uses {cfg.registers} registers)")
        instrs.append(Instruction(dest, by_name[name], src))
    if not instrs:
        raise ParseError(0, "empty genome listing")
    return Genome(tuple(instrs))
