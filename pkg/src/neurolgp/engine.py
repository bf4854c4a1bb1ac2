"""Evolutionary loop and the three experimental arms.

``baseline`` draws repaired random architectures every generation and trains
them fully.  ``expensive`` runs a generational GA (tournament selection,
effective crossover, point mutation, repair) with every individual fully
trained.  ``surrogate`` seeds an archive by fully training generation 0, then
in later generations partially trains everyone, ranks the population by
expected improvement under a KPLS model fitted to the archive, fully trains
only the top slice from scratch, and imputes the rest with the predictive
mean.  Costs are measured in epoch-units (one epoch of training = one unit).

All randomness is derived from the run seed; per-individual training streams
are keyed on the genome itself, so results are independent of evaluation
order and re-evaluating an architecture reproduces its fitness exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics, nn, surrogate as sm
from .genome import (
    ArchitectureDescriptor,
    Genome,
    GenomeConfig,
    decode,
    random_genome,
    stable_key,
    to_text,
)
from .repair import RepairConfig, RepairReport, repair
from .variation import VariationConfig, crossover, mutate, select_parents, truncate

MODES = ("baseline", "expensive", "surrogate")

_INIT_STREAM = 101
_VARIATION_STREAM = 202
_TRAIN_STREAM = 303
_PROXY_PHENOTYPE_STREAM = 404
_PROXY_PARTIAL_STREAM = 505


class ConfigError(ValueError):
    pass


class SurrogateUnfittable(RuntimeError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "surrogate"
    population: int = 50
    generations: int = 15
    full_epochs: int = 30
    partial_epochs: int = 10
    surrogate_fraction: float = 0.6
    seed: int = 0
    backend: str = "trainer"  # "trainer" or "proxy"
    proxy_val_instances: int = 30
    genome: GenomeConfig = GenomeConfig()
    repair: RepairConfig = RepairConfig()
    variation: VariationConfig = VariationConfig()
    data: data_mod.DataConfig = data_mod.DataConfig()
    surrogate: sm.SurrogateConfig = sm.SurrogateConfig()
    train: nn.TrainConfig = nn.TrainConfig()

    def validate(self):
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend not in ("trainer", "proxy"):
            raise ConfigError(f"backend must be 'trainer' or 'proxy', got {self.backend!r}")
        if self.population < 2 or self.generations < 1:
            raise ConfigError("population >= 2 and generations >= 1 required")
        if not 0.0 <= self.surrogate_fraction < 1.0:
            raise ConfigError("surrogate_fraction must lie in [0, 1)")
        if not 1 <= self.partial_epochs < self.full_epochs:
            raise ConfigError("need 1 <= partial_epochs < full_epochs")
        self.data.validate()


@dataclass
class Individual:
    genome: Genome
    repaired: Genome
    report: RepairReport
    arch: ArchitectureDescriptor
    generation: int
    index: int
    eval: nn.EvalResult | None = None
    predicted_mean: float | None = None
    predicted_var: float | None = None
    ei: float | None = None
    partial_fitness: float | None = None
    history: list | None = None

    @property
    def fitness(self) -> float:
        return self.eval.fitness

    @property
    def param_count(self) -> int:
        return nn.param_count(self.arch)


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_fitness: float
    mean_fitness: float
    median_fitness: float
    best_full_fitness: float
    cost_units: int
    cum_cost_units: int
    n_full: int
    n_surrogate: int
    fit_mse: float | None = None
    fit_kendall_tau: float | None = None
    fit_r2: float | None = None
    n_pairs: int = 0
    surrogate_fallback: bool = False


@dataclass(frozen=True)
class BestRecord:
    genome_text: str
    repaired_text: str
    fitness: float
    param_count: int
    generation: int
    index: int


@dataclass
class RunResult:
    mode: str
    seed: int
    stats: list[GenerationStats]
    best: BestRecord
    total_cost_units: int
    archive_size: int = 0
    archive_total_added: int = 0
    out_dir: str | None = None


@dataclass
class EvalOutcome:
    fitness: float
    phenotype: np.ndarray
    epochs: int
    partial_fitness: float | None = None
    history: list | None = None


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(list(keys))


# --------------------------------------------------------------------------
# evaluation backends


class TrainerBackend:
    """Real training backend. Full evaluations train to the partial budget,
    snapshot the phenotype, then warm-continue to the full budget (identical
    to uninterrupted training and one epoch-unit per epoch either way)."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dataset = data_mod.generate(cfg.data)
        k = cfg.data.n_classes
        n_val = len(self.dataset.splits["validation"])
        self._uniform = np.full(n_val * k, 1.0 / k)

    def _seed(self, genome: Genome) -> list[int]:
        return [self.cfg.seed, _TRAIN_STREAM, stable_key(genome)]

    def partial(self, genome: Genome, arch: ArchitectureDescriptor) -> EvalOutcome:
        seed = self._seed(genome)
        try:
            model = nn.train(arch, self.dataset, self.cfg.partial_epochs, seed, self.cfg.train)
        except nn.NumericalDivergence as e:
            epochs = e.model.epochs_trained if e.model else 0
            return EvalOutcome(0.0, self._uniform.copy(), epochs, 0.0, None)
        x, y = self.dataset.split_arrays("test1")
        fit = nn.accuracy(model.network, x, y)
        return EvalOutcome(fit, nn.phenotype_of(model, self.dataset), model.epochs_trained, fit, model.history)

    def full(self, genome: Genome, arch: ArchitectureDescriptor) -> EvalOutcome:
        seed = self._seed(genome)
        try:
            model = nn.train(arch, self.dataset, self.cfg.partial_epochs, seed, self.cfg.train)
            phenotype = nn.phenotype_of(model, self.dataset)
            x, y = self.dataset.split_arrays("test1")
            partial_fitness = nn.accuracy(model.network, x, y)
            model = nn.train(
                arch,
                self.dataset,
                self.cfg.full_epochs - self.cfg.partial_epochs,
                seed,
                self.cfg.train,
                start=model,
            )
        except nn.NumericalDivergence as e:
            epochs = e.model.epochs_trained if e.model else 0
            return EvalOutcome(0.0, self._uniform.copy(), epochs, 0.0, None)
        fitness = nn.accuracy(model.network, x, y)
        return EvalOutcome(fitness, phenotype, model.epochs_trained, partial_fitness, model.history)


class ProxyBackend:
    """Deterministic no-training backend: the proxy fitness plus a synthetic
    phenotype whose rows encode it, so the surrogate path stays exercisable.
    Epoch-unit accounting matches the trainer."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.n_val = cfg.proxy_val_instances
        self.k = cfg.data.n_classes

    def _phenotype(self, genome: Genome, fitness: float) -> np.ndarray:
        rng = _rng(_PROXY_PHENOTYPE_STREAM, stable_key(genome))
        p = np.clip(fitness + rng.uniform(-0.15, 0.15, size=self.n_val), 0.05, 0.95)
        rows = np.tile(((1.0 - p) / (self.k - 1))[:, None], (1, self.k))
        rows[np.arange(self.n_val), np.arange(self.n_val) % self.k] = p
        return rows.ravel()

    def _partial_fitness(self, genome: Genome, fitness: float) -> float:
        rng = _rng(_PROXY_PARTIAL_STREAM, stable_key(genome))
        return float(np.clip(fitness + rng.uniform(-0.08, 0.08), 0.0, 1.0))

    def partial(self, genome: Genome, arch: ArchitectureDescriptor) -> EvalOutcome:
        f = nn.proxy_fitness(arch)
        pf = self._partial_fitness(genome, f)
        return EvalOutcome(pf, self._phenotype(genome, f), self.cfg.partial_epochs, pf, None)

    def full(self, genome: Genome, arch: ArchitectureDescriptor) -> EvalOutcome:
        f = nn.proxy_fitness(arch)
        return EvalOutcome(
            f, self._phenotype(genome, f), self.cfg.full_epochs,
            self._partial_fitness(genome, f), None,
        )


def make_backend(cfg: RunConfig):
    return TrainerBackend(cfg) if cfg.backend == "trainer" else ProxyBackend(cfg)


# --------------------------------------------------------------------------
# run logging


def _jsonable(value):
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


_GENERATIONS_HEADER = (
    "generation,best_fitness,mean_fitness,median_fitness,best_full_fitness,"
    "cost_units,cum_cost_units,n_full,n_surrogate,fit_mse,fit_kendall_tau,"
    "fit_r2,n_pairs,surrogate_fallback"
)


class RunLogger:
    """Append-only artifact writer; every line is flushed so a crashed run
    leaves a parseable prefix.  Inactive when no output directory is given."""

    def __init__(self, out_dir: str | Path | None):
        self.out_dir = Path(out_dir) if out_dir else None
        self._runlog = self._generations = self._fit = None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            self._runlog = open(self.out_dir / "runlog.jsonl", "w")
            self._generations = open(self.out_dir / "generations.csv", "w")
            self._generations.write(_GENERATIONS_HEADER + "\n")
            self._generations.flush()
            self._fit = open(self.out_dir / "surrogate_fit.csv", "w")
            self._fit.write("generation,index,predicted_mean,predicted_var,actual_fitness\n")
            self._fit.flush()

    def _jsonl(self, record: dict):
        if self._runlog:
            self._runlog.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")
            self._runlog.flush()

    def individual(self, ind: Individual):
        ev = ind.eval
        self._jsonl(
            {
                "record": "individual",
                "generation": ind.generation,
                "index": ind.index,
                "genome": to_text(ind.genome),
                "repaired_genome": to_text(ind.repaired, annotated=True),
                "repair": ind.report.as_dict(),
                "provenance": ev.provenance,
                "fitness": ev.fitness,
                "partial_fitness": ind.partial_fitness,
                "epochs": ev.epochs_trained,
                "param_count": ev.param_count,
                "cost_units": ev.cost_units,
                "ei": ind.ei,
                "predicted_mean": ind.predicted_mean,
                "predicted_var": ind.predicted_var,
                "history": ind.history,
            }
        )

    def refit(self, generation: int, diagnostics: dict):
        self._jsonl({"record": "surrogate_refit", "generation": generation, **diagnostics})

    def fallback(self, generation: int, reason: str):
        self._jsonl({"record": "surrogate_fallback", "generation": generation, "reason": reason})

    def generation(self, s: GenerationStats):
        if not self._generations:
            return
        def fmt(v):
            return "" if v is None else repr(float(v)) if isinstance(v, float) else str(v)
        row = [
            s.generation, s.best_fitness, s.mean_fitness, s.median_fitness,
            s.best_full_fitness, s.cost_units, s.cum_cost_units, s.n_full,
            s.n_surrogate, s.fit_mse, s.fit_kendall_tau, s.fit_r2, s.n_pairs,
            int(s.surrogate_fallback),
        ]
        self._generations.write(",".join(fmt(v) for v in row) + "\n")
        self._generations.flush()

    def fit_pairs(self, generation: int, rows: list[tuple[int, float, float, float]]):
        if not self._fit:
            return
        for index, mean, var, actual in rows:
            self._fit.write(f"{generation},{index},{mean!r},{var!r},{actual!r}\n")
        self._fit.flush()

    def best(self, best: BestRecord):
        if self.out_dir:
            (self.out_dir / "best_genome.txt").write_text(best.repaired_text + "\n")

    def close(self):
        for f in (self._runlog, self._generations, self._fit):
            if f:
                f.close()


# --------------------------------------------------------------------------
# population construction


def _make_individual(g: Genome, cfg: RunConfig, generation: int, index: int) -> Individual:
    repaired, report = repair(
        g, cfg.data.input_shape, cfg.repair, cfg.genome, cfg.data.n_classes
    )
    arch = decode(repaired, cfg.data.input_shape, cfg.data.n_classes, cfg.genome.catalogue)
    return Individual(g, repaired, report, arch, generation, index)


def _initial_population(cfg: RunConfig, generation: int) -> list[Individual]:
    rng = _rng(cfg.seed, _INIT_STREAM, generation)
    return [
        _make_individual(random_genome(rng, cfg.genome), cfg, generation, i)
        for i in range(cfg.population)
    ]


def _next_population(cfg: RunConfig, prev: list[Individual], generation: int) -> list[Individual]:
    rng = _rng(cfg.seed, _VARIATION_STREAM, generation)
    var = cfg.variation
    out: list[Individual] = []
    elites = sorted(prev, key=lambda ind: (-ind.fitness, ind.param_count, ind.index))
    for elite in elites[: min(var.elitism, cfg.population)]:
        out.append(Individual(elite.genome, elite.repaired, elite.report, elite.arch,
                              generation, len(out)))
    while len(out) < cfg.population:
        p1, p2 = select_parents(prev, rng, var)
        if rng.random() < var.p_crossover:
            children = crossover(p1.repaired, p2.repaired, rng)
        else:
            children = (p1.repaired, p2.repaired)
        for child in children:
            if len(out) >= cfg.population:
                break
            if rng.random() < var.p_mutate:
                child = mutate(child, rng, var, cfg.genome)
            child = truncate(child, cfg.genome.max_len)
            out.append(_make_individual(child, cfg, generation, len(out)))
    return out


# --------------------------------------------------------------------------
# runs


class _RunState:
    def __init__(self, cfg: RunConfig, out_dir):
        cfg.validate()
        self.cfg = cfg
        self.backend = make_backend(cfg)
        self.logger = RunLogger(out_dir)
        self.stats: list[GenerationStats] = []
        self.cum_cost = 0
        self.best: Individual | None = None
        self.best_full = -math.inf

    def note_full(self, ind: Individual):
        self.best_full = max(self.best_full, ind.eval.fitness)
        if self.best is None or (
            (-ind.eval.fitness, ind.param_count) < (-self.best.eval.fitness, self.best.param_count)
        ):
            self.best = ind

    def finish_generation(self, generation: int, pop: list[Individual], **diag):
        fits = np.array([ind.fitness for ind in pop])
        cost = int(sum(ind.eval.cost_units for ind in pop))
        self.cum_cost += cost
        n_full = sum(ind.eval.provenance == nn.PROVENANCE_FULL for ind in pop)
        stats = GenerationStats(
            generation=generation,
            best_fitness=float(fits.max()),
            mean_fitness=float(fits.mean()),
            median_fitness=float(np.median(fits)),
            best_full_fitness=self.best_full,
            cost_units=cost,
            cum_cost_units=self.cum_cost,
            n_full=n_full,
            n_surrogate=len(pop) - n_full,
            **diag,
        )
        self.stats.append(stats)
        for ind in pop:
            self.logger.individual(ind)
        self.logger.generation(stats)

    def result(self, out_dir) -> RunResult:
        b = self.best
        best = BestRecord(
            genome_text=to_text(b.genome),
            repaired_text=to_text(b.repaired, annotated=True),
            fitness=b.eval.fitness,
            param_count=b.param_count,
            generation=b.generation,
            index=b.index,
        )
        self.logger.best(best)
        self.logger.close()
        return RunResult(
            mode=self.cfg.mode,
            seed=self.cfg.seed,
            stats=self.stats,
            best=best,
            total_cost_units=self.cum_cost,
            out_dir=str(out_dir) if out_dir else None,
        )


def _evaluate_full(state: _RunState, ind: Individual, include_partial_cost: bool):
    out = state.backend.full(ind.repaired, ind.arch)
    cost = out.epochs + (state.cfg.partial_epochs if include_partial_cost else 0)
    ind.eval = nn.EvalResult(
        fitness=out.fitness,
        phenotype=out.phenotype,
        epochs_trained=out.epochs,
        param_count=ind.param_count,
        cost_units=cost,
        provenance=nn.PROVENANCE_FULL,
    )
    ind.partial_fitness = out.partial_fitness
    ind.history = out.history
    state.note_full(ind)
    return out


def run_baseline(cfg: RunConfig, out_dir=None) -> RunResult:
    """Random search: generations x population independent repaired genomes,
    each fully trained; no selection or variation."""
    state = _RunState(cfg, out_dir)
    for gen in range(cfg.generations):
        pop = _initial_population(cfg, gen)
        for ind in pop:
            _evaluate_full(state, ind, include_partial_cost=False)
        state.finish_generation(gen, pop)
    return state.result(out_dir)


def run_expensive(cfg: RunConfig, out_dir=None) -> RunResult:
    """Generational GA with every individual fully trained."""
    state = _RunState(cfg, out_dir)
    pop = _initial_population(cfg, 0)
    for gen in range(cfg.generations):
        if gen > 0:
            pop = _next_population(cfg, pop, gen)
        for ind in pop:
            _evaluate_full(state, ind, include_partial_cost=False)
        state.finish_generation(gen, pop)
    return state.result(out_dir)


def run_surrogate(cfg: RunConfig, out_dir=None) -> RunResult:
    """Surrogate-managed evolution (see module docstring for the protocol)."""
    state = _RunState(cfg, out_dir)
    archive = sm.Archive()
    pop = _initial_population(cfg, 0)
    for ind in pop:
        out = _evaluate_full(state, ind, include_partial_cost=False)
        archive.add(out.phenotype, out.fitness)
    state.finish_generation(0, pop)

    n_full = math.ceil((1.0 - cfg.surrogate_fraction) * cfg.population)
    for gen in range(1, cfg.generations):
        pop = _next_population(cfg, pop, gen)
        outs = [state.backend.partial(ind.repaired, ind.arch) for ind in pop]
        for ind, out in zip(pop, outs):
            ind.partial_fitness = out.fitness
            ind.history = out.history
        try:
            if len(archive) < 2:
                raise SurrogateUnfittable(f"archive holds {len(archive)} point(s)")
            model = sm.fit(archive, cfg.surrogate)
        except (SurrogateUnfittable, ValueError, sm.SingularCorrelation) as exc:
            # full-evaluation fallback: everyone gets trained, archive still grows
            state.logger.fallback(gen, f"{type(exc).__name__}: {exc}")
            for ind, out in zip(pop, outs):
                _evaluate_full(state, ind, include_partial_cost=True)
                archive.add(out.phenotype, ind.eval.fitness)
            state.finish_generation(gen, pop, surrogate_fallback=True)
            continue

        state.logger.refit(gen, model.diagnostics())
        phenos = np.stack([out.phenotype for out in outs])
        means, variances = sm.predict_batch(model, phenos)
        f_best = state.best_full
        eis = np.array(
            [sm.expected_improvement(m, v, f_best) for m, v in zip(means, variances)]
        )
        order = sorted(range(len(pop)), key=lambda i: (-eis[i], -means[i], i))
        chosen = set(order[:n_full])
        pairs = []
        for i, (ind, out) in enumerate(zip(pop, outs)):
            ind.predicted_mean = float(means[i])
            ind.predicted_var = float(variances[i])
            ind.ei = float(eis[i])
            if i in chosen:
                _evaluate_full(state, ind, include_partial_cost=True)
                ind.partial_fitness = out.fitness
                archive.add(out.phenotype, ind.eval.fitness)
                pairs.append((i, float(means[i]), float(variances[i]), ind.eval.fitness))
            else:
                ind.eval = nn.EvalResult(
                    fitness=float(np.clip(means[i], 0.0, 1.0)),
                    phenotype=out.phenotype,
                    epochs_trained=out.epochs,
                    param_count=ind.param_count,
                    cost_units=out.epochs,
                    provenance=nn.PROVENANCE_SURROGATE,
                )
        state.logger.fit_pairs(gen, pairs)
        diag = _fit_diagnostics([(m, a) for _, m, _, a in pairs])
        state.finish_generation(gen, pop, **diag)

    result = state.result(out_dir)
    result.archive_size = len(archive)
    result.archive_total_added = archive.total_added
    return result


def _fit_diagnostics(pairs: list[tuple[float, float]]) -> dict:
    if len(pairs) < 2:
        return {"n_pairs": len(pairs)}
    predicted = [p for p, _ in pairs]
    actual = [a for _, a in pairs]
    try:
        r2 = metrics.r_squared(predicted, actual)
    except metrics.ConstantActual:
        r2 = None
    return {
        "fit_mse": metrics.mse(predicted, actual),
        "fit_kendall_tau": metrics.kendall_tau(predicted, actual),
        "fit_r2": r2,
        "n_pairs": len(pairs),
    }


def run(cfg: RunConfig, out_dir=None) -> RunResult:
    cfg.validate()
    return {"baseline": run_baseline, "expensive": run_expensive, "surrogate": run_surrogate}[
        cfg.mode
    ](cfg, out_dir)


def nominal_cost_units(cfg: RunConfig, mode: str | None = None) -> int:
    """Closed-form epoch-unit cost of one run under the configured parameters."""
    mode = mode or cfg.mode
    full_generation = cfg.population * cfg.full_epochs
    if mode in ("baseline", "expensive"):
        return cfg.generations * full_generation
    n_full = math.ceil((1.0 - cfg.surrogate_fraction) * cfg.population)
    per_gen = cfg.population * cfg.partial_epochs + n_full * cfg.full_epochs
    return full_generation + (cfg.generations - 1) * per_gen
