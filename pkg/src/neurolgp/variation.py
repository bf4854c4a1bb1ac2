"""Genetic operators: point mutation, effective crossover and tournament selection."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .genome import Genome, GenomeConfig, Instruction, effective_indices


@dataclass(frozen=True)
class VariationConfig:
    # field-choice weights inside a point mutation; the defaults make
    # dest / src / operand equally likely (register picks split in half)
    p_mut_register: float = 2.0 / 3.0
    p_mut_operand: float = 1.0 / 3.0
    p_crossover: float = 0.8
    p_mutate: float = 0.5  # per-offspring mutation rate in the generational loop
    tournament_size: int = 3
    elitism: int = 1


def _resample_excluding(rng: np.random.Generator, n: int, current: int) -> int:
    """Uniform draw from range(n) excluding ``current`` (n >= 2)."""
    v = int(rng.integers(n - 1))
    return v if v < current else v + 1


def mutate(
    g: Genome,
    rng: np.random.Generator,
    cfg: VariationConfig = VariationConfig(),
    genome_cfg: GenomeConfig = GenomeConfig(),
) -> Genome:
    """Re-sample exactly one field (dest, src or operand) of one uniformly
    chosen instruction, effective or not. The result always differs from the
    parent in that single field."""
    i = int(rng.integers(len(g)))
    ins = g[i]
    u = rng.random()
    if u < cfg.p_mut_register:
        if rng.random() < 0.5:
            ins = Instruction(
                _resample_excluding(rng, genome_cfg.registers, ins.dest), ins.op, ins.src
            )
        else:
            ins = Instruction(
                ins.dest, ins.op, _resample_excluding(rng, genome_cfg.registers, ins.src)
            )
    else:
        ins = Instruction(
            ins.dest, _resample_excluding(rng, len(genome_cfg.catalogue), ins.op), ins.src
        )
    instrs = list(g.instructions)
    instrs[i] = ins
    return Genome(tuple(instrs))


def crossover(
    a: Genome,
    b: Genome,
    rng: np.random.Generator,
    points: tuple[tuple[int, int], tuple[int, int]] | None = None,
) -> tuple[Genome, Genome]:
    """Exchange segments delimited by two effective positions of each parent.

    The exchanged slices may contain introns, but both ends are effective
    instructions.  At each junction the incoming segment is point-repaired:
    its first instruction reads the register the removed segment read, and
    its last instruction writes the register the downstream side expects, so
    offspring always decode to a connected chain.  Instruction counts are
    conserved: len(c1) + len(c2) == len(a) + len(b).
    """
    ea = effective_indices(a)
    eb = effective_indices(b)
    if not ea or not eb:
        raise ValueError("crossover requires parents with effective code")
    if points is None:
        i1, i2 = sorted(ea[int(k)] for k in rng.integers(len(ea), size=2))
        j1, j2 = sorted(eb[int(k)] for k in rng.integers(len(eb), size=2))
    else:
        (i1, i2), (j1, j2) = points
    child1 = (
        a.instructions[:i1]
        + _fitted_segment(b.instructions[j1 : j2 + 1], a[i1].src, a[i2].dest)
        + a.instructions[i2 + 1 :]
    )
    child2 = (
        b.instructions[:j1]
        + _fitted_segment(a.instructions[i1 : i2 + 1], b[j1].src, b[j2].dest)
        + b.instructions[j2 + 1 :]
    )
    return Genome(child1), Genome(child2)


def _fitted_segment(seg: tuple[Instruction, ...], src: int, dest: int) -> tuple[Instruction, ...]:
    seg = list(seg)
    seg[0] = Instruction(seg[0].dest, seg[0].op, src)
    seg[-1] = Instruction(dest, seg[-1].op, seg[-1].src)
    return tuple(seg)


def truncate(g: Genome, max_len: int) -> Genome:
    """Drop instructions from the tail until the length bound holds."""
    return g if len(g) <= max_len else Genome(g.instructions[:max_len])


def tournament(pop, rng: np.random.Generator, size: int):
    """Winner of one tournament drawn without replacement: highest fitness,
    ties broken by lower parameter count, then earlier index."""
    contestants = rng.choice(len(pop), size=min(size, len(pop)), replace=False)
    best = min(sorted(int(i) for i in contestants), key=lambda i: (-pop[i].fitness, pop[i].param_count, i))
    return pop[best]


def select_parents(pop, rng: np.random.Generator, cfg: VariationConfig = VariationConfig()):
    """Two independent tournaments over an evaluated population."""
    return tournament(pop, rng, cfg.tournament_size), tournament(pop, rng, cfg.tournament_size)
