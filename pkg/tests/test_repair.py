"""Repair rules: totality, idempotence, intron preservation."""

from collections import Counter

import numpy as np

from neurolgp.genome import (
    Genome,
    Instruction,
    TensorShape,
    decode,
    effective_indices,
    from_text,
    random_genome,
)
from neurolgp.nn import compile_network, param_count, propagate_shape
from neurolgp.repair import (
    RULE_INSERT_CONV_EMPTY,
    RULE_INSERT_DENSE,
    RULE_PREPEND_CONV,
    RULE_REMOVE_REDUCING,
    RepairConfig,
    repair,
)

SHAPE = TensorShape(16, 16, 1)


def intron_multiset(g: Genome) -> Counter:
    eff = set(effective_indices(g))
    return Counter(ins for i, ins in enumerate(g) if i not in eff)


def chain_kinds(g: Genome):
    arch = decode(g, SHAPE)
    return [op.kind for op in arch.layers]


def test_empty_effective_code_gets_conv_first():
    g = Genome((Instruction(dest=3, op=8, src=2),))  # writes r3, never r0
    repaired, report = repair(g, SHAPE)
    assert report.rules_applied[0] == RULE_INSERT_CONV_EMPTY
    kinds = chain_kinds(repaired)
    assert kinds[0] == "conv"
    assert kinds[-1] == "dense"  # the output head must be fed by a dense layer
    assert intron_multiset(repaired) == intron_multiset(g)


def test_valid_chain_untouched():
    g = from_text("r[0] := Conv8k3(r[1])\nr[0] := MaxPool2(r[0])\nr[0] := Dense(r[0])")
    repaired, report = repair(g, SHAPE)
    assert report.is_empty
    assert repaired == g


def test_non_conv_start_gets_conv_prepended():
    g = from_text("r[0] := MaxPool2(r[1])\nr[0] := Dense(r[0])")
    repaired, report = repair(g, SHAPE)
    assert RULE_PREPEND_CONV in report.rules_applied
    assert chain_kinds(repaired)[:2] == ["conv", "maxpool"]


def test_exhausted_pools_removed_one_at_a_time():
    # 16 -> 5 -> 1, then a third 3-pool cannot act on 1x1
    g = from_text(
        "r[0] := Conv8k3(r[1])\n"
        "r[0] := MaxPool3(r[0])\n"
        "r[0] := MaxPool3(r[0])\n"
        "r[0] := MaxPool3(r[0])"
    )
    repaired, report = repair(g, SHAPE)
    assert report.rules_applied.count(RULE_REMOVE_REDUCING) == 1
    assert chain_kinds(repaired).count("maxpool") == 2


def test_oversized_flatten_triggers_dense():
    g = from_text("r[0] := Conv32k3(r[1])")  # 16*16*32 = 8192 > 4096
    repaired, report = repair(g, SHAPE)
    assert RULE_INSERT_DENSE in report.rules_applied
    kinds = chain_kinds(repaired)
    assert kinds == ["conv", "dense"]


def test_removal_survives_intron_register_capture():
    # removing the pool naively rewires the dense onto r0, which an intron
    # writes in between; repair must pick a different link register
    g = Genome(
        (
            Instruction(0, 0, 1),   # conv, effective
            Instruction(2, 7, 0),   # pool3, effective
            Instruction(0, 8, 7),   # batchnorm writing r0, intron
            Instruction(0, 11, 2),  # dense, effective
        )
    )
    repaired, report = repair(g, TensorShape(2, 2, 1))
    assert RULE_REMOVE_REDUCING in report.rules_applied
    assert chain_kinds(repaired) == ["conv", "dense"]
    assert intron_multiset(repaired) == intron_multiset(g)


def test_end_removal_falls_back_to_relayout():
    # chain ends in a failing pool; after removing it the intron writing r0
    # would hijack the output, forcing the canonical re-layout
    g = Genome(
        (
            Instruction(4, 0, 1),   # conv -> r4, effective
            Instruction(0, 8, 7),   # batchnorm writing r0, intron
            Instruction(7, 9, 2),   # dropout -> r7, intron
            Instruction(0, 7, 4),   # pool3 reading r4, effective chain end
        )
    )
    repaired, report = repair(g, TensorShape(2, 2, 1))
    assert RULE_REMOVE_REDUCING in report.rules_applied
    assert chain_kinds(repaired) == ["conv", "dense"]
    assert intron_multiset(repaired) == intron_multiset(g)


def test_totality_on_random_genomes():
    rng = np.random.default_rng(11)
    cfg = RepairConfig()
    for _ in range(1_000):
        g = random_genome(rng)
        repaired, _ = repair(g, SHAPE, cfg)
        arch = decode(repaired, SHAPE)
        propagate_shape(arch)
        compile_network(arch)
        assert arch.layers[0].kind == "conv"
        assert arch.layers[-1].kind == "dense"
        assert param_count(arch) <= cfg.max_params


def test_idempotence():
    rng = np.random.default_rng(12)
    for _ in range(500):
        g = random_genome(rng)
        once, _ = repair(g, SHAPE)
        twice, report = repair(once, SHAPE)
        assert report.is_empty
        assert twice == once


def test_introns_preserved_verbatim():
    rng = np.random.default_rng(13)
    for _ in range(500):
        g = random_genome(rng)
        repaired, _ = repair(g, SHAPE)
        assert intron_multiset(repaired) == intron_multiset(g)


def test_insertion_budget_and_report_counts():
    rng = np.random.default_rng(14)
    for _ in range(500):
        g = random_genome(rng)
        repaired, report = repair(g, SHAPE)
        assert len(repaired) == len(g) + report.instructions_inserted - report.instructions_removed
        assert len(repaired) <= len(g) + 2
        assert report.instructions_inserted == sum(
            r in (RULE_INSERT_CONV_EMPTY, RULE_PREPEND_CONV, RULE_INSERT_DENSE)
            for r in report.rules_applied
        )
        assert report.instructions_removed == report.rules_applied.count(RULE_REMOVE_REDUCING)
