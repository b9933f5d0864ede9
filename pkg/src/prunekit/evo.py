"""Evolutionary width search: depth-prune to half the target ratio, then run
NSGA-II over per-layer width genomes to trade calibration perplexity against
pruning ratio, and pick the lowest-perplexity genome on the target-ratio
band.

Genomes are integer vectors of kept units -- MLP channel groups and KV head
groups per surviving block -- so granularity constraints hold by
construction and mutation moves in single granularity steps. Every evaluated
individual is retained in an append-only archive. The search is fully
deterministic for a given seed: each offspring draws from its own RNG stream
keyed by (seed, generation, index), so evaluation order and parallelism
cannot perturb the outcome.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as model_mod
from . import pruner as pruner_mod
from . import reorder as reorder_mod
from .calib import CalibrationSet, Metric, perplexity
from .errors import InputError, SearchError, StateError
from .model import ATTN, MLP, ArchDescriptor, BlockId, TransformerModel, pruning_ratio
from .reorder import ReorderMetric


@dataclass
class SearchConfig:
    n_evals: int
    population_size: int = 50
    crossover_rate: float = 0.9
    mutation_rate: float | None = None  # default: 1 / number of genes
    seed: int = 0
    ratio_tolerance: float | None = None  # default: half the smallest gene quantum

    def validate(self) -> None:
        if self.population_size < 2:
            raise InputError("population_size must be >= 2")
        if self.n_evals < self.population_size:
            raise InputError("evaluation budget must cover at least one population")
        for name in ("crossover_rate", "mutation_rate"):
            v = getattr(self, name)
            if v is not None and not (0.0 <= v <= 1.0):
                raise InputError(f"{name} must lie in [0, 1]")


@dataclass
class Individual:
    genome: tuple
    ppl: float
    ratio: float
    gen: int = 0
    index: int = 0
    rank: int | None = None
    crowding: float | None = None

    @property
    def objectives(self) -> tuple:
        return (self.ppl, self.ratio)

    def key(self) -> tuple:
        # minimize perplexity, maximize ratio
        return (self.ppl, -self.ratio)


# ---------------------------------------------------------------------------
# NSGA-II primitives (minimize both objectives)


def _dominates(a, b) -> bool:
    return a[0] <= b[0] and a[1] <= b[1] and (a[0] < b[0] or a[1] < b[1])


def non_dominated_sort(objectives) -> list:
    """Deb's fast non-dominated sort. objectives: (n, 2) array-like, both
    minimized. Returns fronts as lists of indices; front 0 is non-dominated,
    every front is dominated only by earlier ones."""
    objs = np.asarray(objectives, dtype=np.float64)
    if objs.size and np.any(np.isnan(objs)):
        raise StateError("all individuals must be evaluated before sorting")
    n = len(objs)
    dominated_by = [[] for _ in range(n)]
    domination_count = np.zeros(n, dtype=np.int64)
    fronts = [[]]
    for p in range(n):
        for q in range(n):
            if p == q:
                continue
            if _dominates(objs[p], objs[q]):
                dominated_by[p].append(q)
            elif _dominates(objs[q], objs[p]):
                domination_count[p] += 1
        if domination_count[p] == 0:
            fronts[0].append(p)
    i = 0
    while fronts[i]:
        nxt = []
        for p in fronts[i]:
            for q in dominated_by[p]:
                domination_count[q] -= 1
                if domination_count[q] == 0:
                    nxt.append(q)
        i += 1
        fronts.append(nxt)
    fronts.pop()
    return fronts


def crowding_distance(objectives) -> np.ndarray:
    """Crowding distance of one front: boundary points get +inf, interior
    points the sum over objectives of normalized neighbor gaps."""
    objs = np.asarray(objectives, dtype=np.float64)
    n = len(objs)
    if n == 0:
        raise InputError("crowding_distance of an empty front")
    dist = np.zeros(n)
    if n <= 2:
        return np.full(n, np.inf)
    for m in range(objs.shape[1]):
        order = np.argsort(objs[:, m], kind="stable")
        lo, hi = objs[order[0], m], objs[order[-1], m]
        dist[order[0]] = dist[order[-1]] = np.inf
        if hi == lo:
            continue
        with np.errstate(invalid="ignore"):
            gaps = (objs[order[2:], m] - objs[order[:-2], m]) / (hi - lo)
        dist[order[1:-1]] += np.nan_to_num(gaps, nan=0.0)
    return dist


def _rank_and_crowd(objs) -> tuple:
    fronts = non_dominated_sort(objs)
    n = len(objs)
    rank = np.zeros(n, dtype=np.int64)
    crowd = np.zeros(n)
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance([objs[i] for i in front])
    return rank, crowd, fronts


def _tournament(rng, rank, crowd) -> int:
    i, j = rng.integers(0, len(rank), size=2)
    if rank[i] != rank[j]:
        return i if rank[i] < rank[j] else j
    if crowd[i] != crowd[j]:
        return i if crowd[i] > crowd[j] else j
    return min(i, j)


def _clamp(v, lo, hi):
    return max(lo, min(hi, v))


def nsga2_minimize(gene_bounds, evaluate, cfg: SearchConfig, seed_genomes=()) -> list:
    """Generic integer-genome NSGA-II. gene_bounds: [(lo, hi)] inclusive;
    evaluate(genome) -> (f1, f2), both minimized. Returns the append-only
    archive as [(genome, (f1, f2), gen, index)], consuming exactly
    cfg.n_evals evaluations."""
    cfg.validate()
    genes = len(gene_bounds)
    if genes == 0:
        raise InputError("empty search space")
    mut_rate = cfg.mutation_rate if cfg.mutation_rate is not None else 1.0 / genes

    def random_genome(rng):
        return tuple(int(rng.integers(lo, hi + 1)) for lo, hi in gene_bounds)

    population = []
    archive = []
    evals = 0

    def submit(genome, gen, index):
        nonlocal evals
        f = evaluate(genome)
        archive.append((genome, (float(f[0]), float(f[1])), gen, index))
        evals += 1
        return f

    seeds = list(seed_genomes)[: cfg.population_size]
    for i in range(cfg.population_size):
        rng = np.random.default_rng((cfg.seed, 0, i))
        genome = seeds[i] if i < len(seeds) else random_genome(rng)
        population.append((genome, submit(genome, 0, i)))

    gen = 0
    while evals < cfg.n_evals:
        gen += 1
        n_off = min(cfg.population_size, cfg.n_evals - evals)
        objs = [f for _, f in population]
        rank, crowd, _ = _rank_and_crowd(objs)
        offspring = []
        for i in range(n_off):
            rng = np.random.default_rng((cfg.seed, gen, i))
            p1 = population[_tournament(rng, rank, crowd)][0]
            p2 = population[_tournament(rng, rank, crowd)][0]
            if rng.random() < cfg.crossover_rate:
                child = tuple(p1[g] if rng.random() < 0.5 else p2[g] for g in range(genes))
            else:
                child = p1
            mutated = list(child)
            for g in range(genes):
                if rng.random() < mut_rate:
                    step = 1 if rng.random() < 0.5 else -1
                    mutated[g] = _clamp(mutated[g] + step, *gene_bounds[g])
            child = tuple(mutated)
            offspring.append((child, submit(child, gen, i)))
        population = _environmental_selection(population + offspring, cfg.population_size)
    return archive


def _environmental_selection(pool, size):
    objs = [f for _, f in pool]
    rank, crowd, fronts = _rank_and_crowd(objs)
    chosen = []
    for front in fronts:
        if len(chosen) + len(front) <= size:
            chosen.extend(front)
        else:
            # fill from the split front by descending crowding, index as tie-break
            rest = sorted(front, key=lambda i: (-crowd[i], i))
            chosen.extend(rest[: size - len(chosen)])
            break
    return [pool[i] for i in chosen]


# ---------------------------------------------------------------------------
# width search space


@dataclass
class WidthGene:
    block: BlockId
    unit: int  # channels (MLP) or query heads (ATTN) per step
    max_units: int
    params_per_unit: int


class WidthSearchSpace:
    """Per-layer width genome over the blocks surviving depth pruning."""

    def __init__(self, config, base_descriptor: ArchDescriptor, g_mlp: int | None = None):
        self.config = config
        self.base = base_descriptor.copy()
        g_mlp = g_mlp if g_mlp is not None else config.hidden // 4
        if config.intermediate % g_mlp != 0:
            raise InputError(f"g_mlp={g_mlp} must divide intermediate={config.intermediate}")
        gs = config.group_size
        hd = config.head_dim
        d = config.hidden
        self.genes = []
        for i, ls in enumerate(base_descriptor.layers):
            if ls.attn_present and ls.kv_heads_kept > 0:
                per_group = (2 * gs + 2) * hd * d  # wq+wo per q head, wk+wv per kv head
                self.genes.append(WidthGene(BlockId(i, ATTN), gs, ls.kv_heads_kept, per_group))
            if ls.mlp_present and ls.mlp_channels_kept > 0:
                if ls.mlp_channels_kept % g_mlp != 0:
                    raise InputError(f"layer {i}: kept channels not a multiple of g_mlp")
                self.genes.append(WidthGene(BlockId(i, MLP), g_mlp,
                                            ls.mlp_channels_kept // g_mlp, 3 * d * g_mlp))

    def gene_bounds(self) -> list:
        return [(0, g.max_units) for g in self.genes]

    def identity_genome(self) -> tuple:
        return tuple(g.max_units for g in self.genes)

    def to_descriptor(self, genome) -> ArchDescriptor:
        if len(genome) != len(self.genes):
            raise InputError(f"genome has {len(genome)} genes, space has {len(self.genes)}")
        desc = self.base.copy()
        for gene, units in zip(self.genes, genome):
            if not (0 <= units <= gene.max_units):
                raise InputError(f"gene for {gene.block} out of range: {units}")
            ls = desc.layers[gene.block.layer]
            if gene.block.kind == ATTN:
                ls.heads_kept = units * gene.unit
                ls.kv_heads_kept = ls.heads_kept // self.config.group_size
                ls.attn_present = ls.heads_kept > 0
            else:
                ls.mlp_channels_kept = units * gene.unit
                ls.mlp_present = ls.mlp_channels_kept > 0
        return desc

    def min_ratio_quantum(self, dense_descriptor: ArchDescriptor) -> float:
        dense_params = model_mod.count_params(self.config, dense_descriptor)
        return min(g.params_per_unit for g in self.genes) / dense_params


def depth_half(mdl: TransformerModel, tau: float, calib: CalibrationSet,
               metric: Metric = Metric.PERPLEXITY,
               dense_descriptor: ArchDescriptor | None = None) -> list:
    """Depth stage of the evolutionary variant: greedy block removal up to
    half the target ratio."""
    return pruner_mod.prune_depth(mdl, tau / 2.0, calib, metric, dense_descriptor)


def evaluate_genome(space: WidthSearchSpace, genome, base_model: TransformerModel,
                    dense_descriptor: ArchDescriptor, calib: CalibrationSet,
                    metric: Metric = Metric.PERPLEXITY) -> Individual:
    """Objectives of one genome: masked perplexity on the depth-pruned model
    and pruning ratio versus the dense reference."""
    desc = space.to_descriptor(genome)
    ppl = perplexity(base_model.with_descriptor(desc), calib, metric)
    ratio = pruning_ratio(desc, dense_descriptor, space.config)
    return Individual(tuple(genome), ppl, ratio)


def nsga2_search(base_model: TransformerModel, calib: CalibrationSet, tau: float,
                 cfg: SearchConfig, dense_descriptor: ArchDescriptor | None = None,
                 g_mlp: int | None = None, metric: Metric = Metric.PERPLEXITY) -> tuple:
    """NSGA-II over width genomes of a depth-pruned model.

    Returns (archive, space); the archive holds every evaluated Individual
    in evaluation order. The initial population is the identity genome plus
    uniform random genomes.
    """
    dense = dense_descriptor if dense_descriptor is not None else ArchDescriptor.dense(base_model.config)
    space = WidthSearchSpace(base_model.config, base_model.descriptor, g_mlp)

    def evaluate(genome):
        ind = evaluate_genome(space, genome, base_model, dense, calib, metric)
        return (ind.ppl, -ind.ratio)

    raw = nsga2_minimize(space.gene_bounds(), evaluate, cfg,
                         seed_genomes=[space.identity_genome()])
    archive = [Individual(genome, f[0], -f[1], gen, idx) for genome, f, gen, idx in raw]
    return archive, space


def default_ratio_tolerance(space: WidthSearchSpace, dense_descriptor: ArchDescriptor) -> float:
    """Half the smallest single-gene ratio quantum: the target band is one
    grid step wide since exact equality is unattainable on a discrete grid."""
    return 0.5 * space.min_ratio_quantum(dense_descriptor)


def select_final(archive, tau: float, eps: float) -> Individual:
    """Lowest-perplexity individual on the target-ratio band.

    Preference order: within |ratio - tau| <= eps and ratio >= tau, then
    anywhere in the band, then the lowest-perplexity individual with
    ratio >= tau. Ties break toward smaller ratio, then lexicographically
    smaller genome. Raises SearchError when nothing reaches tau - eps.
    """
    if not archive:
        raise SearchError("empty archive")

    def pick(pool):
        return min(pool, key=lambda ind: (ind.ppl, ind.ratio, ind.genome))

    band = [ind for ind in archive if abs(ind.ratio - tau) <= eps]
    over = [ind for ind in band if ind.ratio >= tau]
    if over:
        return pick(over)
    if band:
        return pick(band)
    above = [ind for ind in archive if ind.ratio >= tau]
    if above:
        return pick(above)
    raise SearchError(
        f"no individual with ratio >= {tau - eps:.4f}; increase the evaluation "
        "budget or widen the search space"
    )


def evolve(mdl: TransformerModel, tau: float, calib: CalibrationSet, cfg: SearchConfig,
           reorder_metric: ReorderMetric = ReorderMetric.L1_NORM,
           depth_calib_samples: int = 256, width_calib_samples: int = 128,
           g_mlp: int | None = None, metric: Metric = Metric.PERPLEXITY) -> tuple:
    """Full evolutionary variant: depth pruning to tau/2, weight reordering,
    NSGA-II width search, band selection, materialization.

    Returns (pruned model, report). The report carries the depth trace, the
    full archive, and the selected individual.
    """
    if not (0.0 <= tau < 1.0):
        raise InputError(f"target ratio {tau} outside [0, 1)")
    work = mdl.clone()
    dense = mdl.descriptor.copy()
    report = {"depth_steps": [], "archive": [], "selected": None,
              "final_ratio": 0.0, "final_ppl": None, "ratio_tolerance": None}
    if tau == 0.0:
        pruned = model_mod.materialize(work, work.descriptor)
        report["final_ppl"] = perplexity(pruned, calib, metric)
        return pruned, report
    depth_set = calib.sample(min(depth_calib_samples, calib.sample_count), (cfg.seed, 0))
    width_set = calib.sample(min(width_calib_samples, calib.sample_count), (cfg.seed, 1))
    report["depth_steps"] = depth_half(work, tau, depth_set, metric, dense)
    reorder_mod.apply_reordering(work, reorder_metric, width_set)
    archive, space = nsga2_search(work, width_set, tau, cfg, dense, g_mlp, metric)
    eps = cfg.ratio_tolerance if cfg.ratio_tolerance is not None \
        else default_ratio_tolerance(space, dense)
    best = select_final(archive, tau, eps)
    pruned = model_mod.materialize(work, space.to_descriptor(best.genome))
    report["archive"] = archive
    report["selected"] = best
    report["ratio_tolerance"] = eps
    report["final_ratio"] = best.ratio
    report["final_ppl"] = perplexity(pruned, calib, metric)
    return pruned, report
