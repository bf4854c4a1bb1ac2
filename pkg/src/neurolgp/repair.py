"""Four-rule repair applied during genotype-to-phenotype mapping.

Every genome, however malformed, is turned into one that decodes to a
compilable architecture: (1) an empty effective section gets a convolutional
instruction, (2) a chain that does not start with a convolution gets one
prepended, (3) data-reducing layers that exhaust the spatial dimensions are
removed last-first, and (4) a fully-connected layer is appended when the
chain does not end in one or its flattened output is too wide.

Edits touch only the effective code.  Because effectiveness is defined by
register dataflow over the whole genome, a naive edit can accidentally make
an intron effective (an intron between two chain instructions may write the
register the rewired link uses).  Every edit is therefore verified against
the intended chain and intron set; in the rare case no local rewiring is
safe, the genome is re-laid-out canonically: introns keep their relative
order and the chain becomes a contiguous block wired through a register no
trailing intron writes.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

from .genome import (
    CONV,
    DENSE,
    Genome,
    GenomeConfig,
    Instruction,
    MAXPOOL,
    OUTPUT_REGISTER,
    TensorShape,
    decode,
    effective_indices,
)
from .nn import ShapeExhausted, propagate_shape

RULE_INSERT_CONV_EMPTY = "InsertConvEmpty"
RULE_PREPEND_CONV = "PrependConv"
RULE_REMOVE_REDUCING = "RemoveReducing"
RULE_INSERT_DENSE = "InsertDense"


@dataclass(frozen=True)
class RepairConfig:
    max_flatten: int = 4096
    max_params: int = 2_000_000


@dataclass(frozen=True)
class RepairReport:
    rules_applied: tuple[str, ...] = ()
    instructions_inserted: int = 0
    instructions_removed: int = 0

    @property
    def is_empty(self) -> bool:
        return not self.rules_applied

    def as_dict(self) -> dict:
        return {
            "rules": list(self.rules_applied),
            "inserted": self.instructions_inserted,
            "removed": self.instructions_removed,
        }


def _smallest_conv(catalogue) -> int:
    convs = [(op.filters, op.kernel, i) for i, op in enumerate(catalogue) if op.kind == CONV]
    if not convs:
        raise ValueError("catalogue has no convolution entry")
    return min(convs)[2]


def _dense_index(catalogue) -> int:
    for i, op in enumerate(catalogue):
        if op.kind == DENSE:
            return i
    raise ValueError("catalogue has no dense entry")


def _chain_ops(g: Genome) -> tuple[int, ...]:
    return tuple(g[i].op for i in effective_indices(g))


def _intron_multiset(g: Genome) -> Counter:
    eff = set(effective_indices(g))
    return Counter(ins for i, ins in enumerate(g) if i not in eff)


def _consistent(g: Genome, expected_ops: tuple[int, ...], expected_introns: Counter) -> bool:
    return _chain_ops(g) == expected_ops and _intron_multiset(g) == expected_introns


def _canonical(introns: list[Instruction], chain_ops: tuple[int, ...], registers: int) -> Genome:
    """Introns first (relative order kept), then the chain as a contiguous
    block piped through one register.  Introns writing the pipe register must
    come after the block, where nothing reads them."""
    writes = Counter(ins.dest for ins in introns)
    pipe = min(range(1, registers), key=lambda r: (writes[r], r))
    head = [ins for ins in introns if ins.dest != pipe]
    tail = [ins for ins in introns if ins.dest == pipe]
    chain = [Instruction(pipe, op, pipe) for op in chain_ops[:-1]]
    chain.append(Instruction(OUTPUT_REGISTER, chain_ops[-1], pipe))
    return Genome(tuple(head + chain + tail))


def _rebuild(g: Genome, candidate: Genome, expected_ops: tuple[int, ...], registers: int) -> Genome:
    """Return ``candidate`` if it realises the intended chain without touching
    the intron set, else fall back to the canonical layout."""
    introns = _intron_multiset(g)
    if _consistent(candidate, expected_ops, introns):
        return candidate
    eff = set(effective_indices(g))
    ordered_introns = [ins for i, ins in enumerate(g) if i not in eff]
    fallback = _canonical(ordered_introns, expected_ops, registers)
    assert _consistent(fallback, expected_ops, introns)
    return fallback


def _insert(g: Genome, pos: int, ins: Instruction) -> Genome:
    return Genome(g.instructions[:pos] + (ins,) + g.instructions[pos:])


def _remove_effective(g: Genome, pos: int, registers: int) -> Genome:
    """Remove one chain instruction, rewiring its downstream neighbour (or the
    output write when it was the chain end) onto its upstream neighbour."""
    eff = effective_indices(g)
    k = eff.index(pos)
    up = eff[k - 1]  # rule order guarantees the chain start is a conv, never removed
    expected = tuple(g[i].op for i in eff if i != pos)
    instrs = list(g.instructions)
    if k == len(eff) - 1:
        instrs[up] = Instruction(OUTPUT_REGISTER, g[up].op, g[up].src)
        del instrs[pos]
        return _rebuild(g, Genome(tuple(instrs)), expected, registers)
    down = eff[k + 1]
    base = list(g.instructions)
    del base[pos]
    down_i = down - 1
    # preferred wiring: reuse the upstream dest; otherwise try any register
    for reg in [g[up].dest] + [r for r in range(registers) if r != g[up].dest]:
        trial = list(base)
        trial[up] = Instruction(reg, g[up].op, g[up].src)
        trial[down_i] = Instruction(g[down].dest, g[down].op, reg)
        cand = Genome(tuple(trial))
        if _chain_ops(cand) == expected and _intron_multiset(cand) == _intron_multiset(g):
            return cand
    return _rebuild(g, Genome(tuple(base)), expected, registers)


def repair(
    g: Genome,
    input_shape: TensorShape,
    cfg: RepairConfig = RepairConfig(),
    genome_cfg: GenomeConfig = GenomeConfig(),
    num_classes: int = 3,
) -> tuple[Genome, RepairReport]:
    """Total repair: the result always shape-propagates and ends with a dense
    layer feeding the output head. Introns are preserved verbatim."""
    cat = genome_cfg.catalogue
    conv_op = _smallest_conv(cat)
    dense_op = _dense_index(cat)
    work = g
    rules: list[str] = []
    inserted = removed = 0

    if not effective_indices(work):
        # reads register 1 before any write, i.e. the raw input
        work = _insert(work, 0, Instruction(OUTPUT_REGISTER, conv_op, 1))
        rules.append(RULE_INSERT_CONV_EMPTY)
        inserted += 1

    eff = effective_indices(work)
    first = work[eff[0]]
    if cat[first.op].kind != CONV:
        expected = (conv_op,) + _chain_ops(work)
        cand = _insert(work, eff[0], Instruction(first.src, conv_op, first.src))
        work = _rebuild(work, cand, expected, genome_cfg.registers)
        rules.append(RULE_PREPEND_CONV)
        inserted += 1

    while True:
        arch = decode(work, input_shape, num_classes, cat)
        try:
            shapes = propagate_shape(arch)
            break
        except ShapeExhausted:
            eff = effective_indices(work)
            pools = [i for i in eff if cat[work[i].op].kind == MAXPOOL]
            work = _remove_effective(work, pools[-1], genome_cfg.registers)
            rules.append(RULE_REMOVE_REDUCING)
            removed += 1

    if arch.layers[-1].kind != DENSE or shapes[-1].flat > cfg.max_flatten:
        # appending after the last output write can never capture an intron
        work = Genome(work.instructions + (Instruction(OUTPUT_REGISTER, dense_op, OUTPUT_REGISTER),))
        rules.append(RULE_INSERT_DENSE)
        inserted += 1

    return work, RepairReport(tuple(rules), inserted, removed)
