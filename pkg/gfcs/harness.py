"""Campaigns of attacks over a dataset, and the statistics reported for them."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    Any,
    Callable,
    Dict,
    Iterable,
    Iterator,
    List,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
)

import numpy as np
import numpy.typing as npt
from tqdm import tqdm

from .data import (
    LabeledDataset,
    filter_correct,
    gen_blobs,
    gen_minimages,
    load_dataset,
)
from .directions import (
    FixedBasisSource,
    OdsSource,
    dct_basis_source,
    image_pca_basis,
    pca_gradient_basis,
    pixel_basis,
)
from .engine import (
    DEFAULT_BUDGET,
    AttackConfig,
    AttackResult,
    QueryOracle,
    gf_only_attack,
    gfcs_attack,
    pick_target_class,
    simba_attack,
)
from .errors import ConfigError, GfcsError, InvalidInputError, ShortfallError
from .models import Classifier, adapt_domain, load_model
from .numerics import FloatArray, RandomStream, child_seed
from .serialization import PathLike

logger = logging.getLogger(__name__)

RECORD_SCHEMA_VERSION = 1
DEFAULT_BOOTSTRAP = 1000

METHODS = (
    "gfcs",
    "gf-only",
    "simba-ods",
    "simba-pixel",
    "simba-dct",
    "simba-pca-gradients",
    "simba-pca-images",
)
SURROGATE_METHODS = {"gfcs", "gf-only", "simba-ods", "simba-pca-gradients"}

REPORT_NOTES = (
    "# failed attacks count as +inf queries in medians;"
    " the median is undefined when the success rate is <= 50%",
    "# bootstrap: {samples} resamples with seed {seed};"
    " SE = std of resampled medians; CI = 2.5/97.5 percentiles",
)


@dataclass
class CampaignSpec:
    victim: Path
    surrogates: List[Path] = field(default_factory=list)
    data: Optional[Path] = None
    generator: Optional[str] = None
    generator_seed: int = 0
    height: int = 16
    width: int = 16
    channels: int = 3
    dim: int = 20
    classes: int = 10
    per_class: int = 50
    noise: float = 0.1
    spread: float = 0.1
    method: str = "gfcs"
    epsilon: float = 2.0
    nu: Optional[float] = None
    budget: int = DEFAULT_BUDGET
    targeted: bool = False
    loss: Optional[str] = None
    clamp: Optional[Tuple[float, float]] = None
    count: int = 100
    seed: int = 0
    output: Path = Path("campaign")
    workers: int = 1
    bootstrap: int = DEFAULT_BOOTSTRAP
    freq_count: Optional[int] = None
    dct_order: str = "random"
    pca_k: int = 100
    pca_samples: Optional[int] = None

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"Unknown method: {self.method!r}")
        if self.count < 1:
            raise ConfigError(f"count must be at least 1: {self.count!r}")
        if self.method in SURROGATE_METHODS and not self.surrogates:
            raise ConfigError(f"method {self.method!r} needs at least one surrogate")
        if (self.data is None) == (self.generator is None):
            raise ConfigError("exactly one of 'data' and 'generator' must be given")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1: {self.workers!r}")

    def attack_config(self, target: Optional[int] = None) -> AttackConfig:
        loss = self.loss or ("targeted-log" if self.targeted else "margin")
        return AttackConfig(
            epsilon=self.epsilon,
            nu=self.nu,
            budget=self.budget,
            target=target,
            loss=loss,
            clamp=self.clamp,
        )


def _parse_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in {"1", "true", "yes", "on"}:
        return True
    if lowered in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_clamp(value: str) -> Optional[Tuple[float, float]]:
    if value.strip().lower() in {"off", "none", ""}:
        return None
    low, high = (float(part) for part in value.split(","))
    return (low, high)


def _optional(convert: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda value: None if value.strip().lower() in {"", "none"} else convert(value)


def load_campaign_spec(filename: PathLike, **overrides: Any) -> CampaignSpec:
    """Read a flat ``key = value`` campaign file.

    Relative paths are resolved against the directory of the file.
    """
    filename = Path(filename)
    base = filename.parent
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string("[campaign]\n" + filename.read_text(), source=str(filename))
    except configparser.Error as e:
        raise ConfigError(f"Malformed campaign spec {filename}: {e}") from e
    path = lambda value: base / value.strip()
    converters: Dict[str, Callable[[str], Any]] = {
        "victim": path,
        "surrogates": lambda value: [
            path(part) for part in value.split(",") if part.strip()
        ],
        "data": _optional(path),
        "generator": _optional(str.strip),
        "nu": _optional(float),
        "loss": _optional(str.strip),
        "clamp": _parse_clamp,
        "output": path,
        "targeted": _parse_bool,
        "freq_count": _optional(int),
        "pca_samples": _optional(int),
        "method": str.strip,
        "dct_order": str.strip,
    }
    types = {f.name: f.type for f in dataclasses.fields(CampaignSpec)}
    values: Dict[str, Any] = {}
    for key, raw in parser["campaign"].items():
        if key not in types:
            raise ConfigError(f"Unknown campaign key: {key!r}")
        convert = converters.get(key) or (float if types[key] == "float" else int)
        try:
            values[key] = convert(raw)
        except ValueError as e:
            raise ConfigError(f"Invalid value for {key!r}: {raw!r}") from e
    values.update(overrides)
    if "victim" not in values:
        raise ConfigError("campaign spec is missing the 'victim' key")
    return CampaignSpec(**values)


def campaign_dataset(spec: CampaignSpec) -> LabeledDataset:
    if spec.data is not None:
        return load_dataset(spec.data)
    if spec.generator == "blobs":
        return gen_blobs(
            spec.generator_seed, spec.dim, spec.classes, spec.per_class, spec.spread
        )
    if spec.generator == "minimages":
        return gen_minimages(
            spec.generator_seed,
            spec.height,
            spec.width,
            spec.channels,
            spec.classes,
            spec.per_class,
            spec.noise,
        )
    raise ConfigError(f"Unknown generator: {spec.generator!r}")


class AttackRunner:
    """Runs one attack method for one example, building fresh direction sources."""

    def __init__(
        self,
        method: str,
        victim: Classifier,
        surrogates: Sequence[Classifier] = (),
        freq_count: Optional[int] = None,
        dct_order: str = "random",
        fixed_basis: Optional[FloatArray] = None,
    ):
        if method not in METHODS:
            raise InvalidInputError(f"Unknown method: {method!r}")
        if method in SURROGATE_METHODS and not surrogates:
            raise InvalidInputError(f"method {method!r} needs at least one surrogate")
        if method in {"simba-pca-gradients", "simba-pca-images"} and fixed_basis is None:
            raise InvalidInputError(f"method {method!r} needs a precomputed basis")
        if method == "simba-dct" and len(victim.input_shape) != 3:
            raise InvalidInputError("the DCT basis needs image-shaped victim inputs")
        self.method = method
        self.victim = victim
        self.surrogates = list(surrogates)
        self.freq_count = freq_count
        self.dct_order = dct_order
        self.fixed_basis = fixed_basis

    def run(
        self,
        x_in: FloatArray,
        initial_scores: FloatArray,
        cfg: AttackConfig,
        stream: RandomStream,
    ) -> AttackResult:
        oracle = QueryOracle(self.victim, cfg.budget)
        method = self.method
        if method == "gfcs":
            return gfcs_attack(oracle, self.surrogates, x_in, initial_scores, cfg, stream)
        if method == "gf-only":
            return gf_only_attack(
                oracle, self.surrogates, x_in, initial_scores, cfg, stream
            )
        if method == "simba-ods":
            source: Any = OdsSource(self.surrogates, stream)
        elif method == "simba-pixel":
            source = pixel_basis(self.victim.input_size, stream)
        elif method == "simba-dct":
            height, width, channels = self.victim.input_shape
            source = dct_basis_source(
                height,
                width,
                channels,
                self.freq_count or min(height, width),
                stream,
                self.dct_order,
            )
        else:
            assert self.fixed_basis is not None
            source = FixedBasisSource(self.fixed_basis)
        return simba_attack(oracle, source, x_in, initial_scores, cfg)


def prepare_fixed_basis(
    method: str,
    surrogates: Sequence[Classifier],
    data: LabeledDataset,
    exclude_ids: npt.ArrayLike,
    seed: int = 0,
    pca_k: int = 100,
    pca_samples: Optional[int] = None,
) -> Optional[FloatArray]:
    """PCA bases are fit on dataset items that are not attacked."""
    if method not in {"simba-pca-gradients", "simba-pca-images"}:
        return None
    held_out = data.subset(np.flatnonzero(~np.isin(data.ids, exclude_ids)))
    if len(held_out) == 0:
        raise ShortfallError(0, 1)
    if method == "simba-pca-images":
        k = min(pca_k, len(held_out), held_out.inputs.shape[1])
        return image_pca_basis(held_out, k).directions
    stream = RandomStream(child_seed(seed, 0)).child(1)
    order = stream.permutation(len(held_out))
    samples = held_out.inputs[order]
    sample_count = min(pca_samples or 2 * pca_k, len(samples))
    k = min(pca_k, sample_count)
    return pca_gradient_basis(
        surrogates[0], samples, k, stream, sample_count=sample_count
    ).directions


@dataclass
class RunRecord:
    example_id: int
    method: str
    success: bool
    total_queries: int
    gradient_queries: int
    coimage_queries: int
    basis_queries: int
    final_norm: float
    final_class: int
    target: Optional[int]
    reason: Optional[str]
    seed: int
    wall_time: float = field(default=0.0, compare=False)

    @classmethod
    def from_result(
        cls,
        example_id: int,
        method: str,
        result: AttackResult,
        target: Optional[int],
        seed: int,
        wall_time: float = 0.0,
    ) -> RunRecord:
        return cls(
            example_id=example_id,
            method=method,
            success=result.success,
            total_queries=result.total_queries,
            gradient_queries=result.gradient_queries,
            coimage_queries=result.coimage_queries,
            basis_queries=result.basis_queries,
            final_norm=result.final_norm,
            final_class=result.final_class,
            target=target,
            reason=result.reason,
            seed=seed,
            wall_time=wall_time,
        )

    def to_json(self) -> str:
        payload = dataclasses.asdict(self)
        del payload["wall_time"]
        payload["schema_version"] = RECORD_SCHEMA_VERSION
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> RunRecord:
        payload = json.loads(line)
        version = payload.pop("schema_version", None)
        if version != RECORD_SCHEMA_VERSION:
            raise GfcsError(f"Unsupported record schema version: {version!r}")
        return cls(**payload)


def load_records(filename: PathLike) -> List[RunRecord]:
    with open(filename) as f:
        return [RunRecord.from_json(line) for line in f if line.strip()]


class _CampaignContext(NamedTuple):
    runner: AttackRunner
    spec: CampaignSpec
    inputs: FloatArray
    labels: npt.NDArray[np.int64]
    ids: npt.NDArray[np.int64]
    scores: FloatArray


_CONTEXT: Optional[_CampaignContext] = None


def _init_worker(context: _CampaignContext) -> None:
    global _CONTEXT
    _CONTEXT = context


def _attack_example(task: Tuple[int, int]) -> RunRecord:
    position, seed = task
    context = _CONTEXT
    assert context is not None, "worker context was not initialized"
    spec = context.spec
    stream = RandomStream(seed)
    target = (
        pick_target_class(
            stream.child(0),
            int(context.labels[position]),
            int(context.scores.shape[1]),
        )
        if spec.targeted
        else None
    )
    start = time.perf_counter()
    result = context.runner.run(
        context.inputs[position],
        context.scores[position],
        spec.attack_config(target),
        stream.child(1),
    )
    return RunRecord.from_result(
        int(context.ids[position]),
        spec.method,
        result,
        target,
        seed,
        time.perf_counter() - start,
    )


def _map_examples(
    context: _CampaignContext, tasks: List[Tuple[int, int]], workers: int
) -> Iterator[RunRecord]:
    if workers == 1:
        _init_worker(context)
        yield from map(_attack_example, tasks)
        return
    with ProcessPoolExecutor(
        max_workers=workers, initializer=_init_worker, initargs=(context,)
    ) as executor:
        yield from executor.map(_attack_example, tasks, chunksize=4)


def run_campaign(spec: CampaignSpec, progress: bool = True) -> List[RunRecord]:
    """Attack ``spec.count`` correctly classified examples and persist the records.

    Records go to ``records.jsonl`` in example order as they complete; wall
    times go to ``timings.csv`` so that reruns reproduce the records exactly.
    """
    victim = load_model(spec.victim)
    surrogates = [adapt_domain(load_model(p), victim.input_shape) for p in spec.surrogates]
    selected, scores = filter_correct(victim, campaign_dataset(spec))
    if len(selected) < spec.count:
        raise ShortfallError(len(selected), spec.count)
    picks = np.sort(
        RandomStream(spec.seed).choice(len(selected), spec.count, replace=False)
    )
    data = selected.subset(picks)
    runner = AttackRunner(
        spec.method,
        victim,
        surrogates,
        freq_count=spec.freq_count,
        dct_order=spec.dct_order,
        fixed_basis=prepare_fixed_basis(
            spec.method,
            surrogates,
            selected,
            data.ids,
            spec.seed,
            spec.pca_k,
            spec.pca_samples,
        ),
    )
    context = _CampaignContext(
        runner, spec, data.inputs, data.labels, data.ids, scores[picks]
    )
    tasks = [(i, child_seed(spec.seed, i + 1)) for i in range(len(data))]
    logger.info(
        "running %s on %d examples (epsilon=%g, nu=%s, budget=%d)",
        spec.method,
        len(tasks),
        spec.epsilon,
        "sqrt(0.001*D)" if spec.nu is None else spec.nu,
        spec.budget,
    )

    output = Path(spec.output)
    output.mkdir(parents=True, exist_ok=True)
    records: List[RunRecord] = []
    with open(output / "records.jsonl", "w") as record_file, open(
        output / "timings.csv", "w", newline=""
    ) as timing_file, tqdm(
        total=len(tasks), desc=spec.method, disable=not progress
    ) as bar:
        timings = csv.writer(timing_file)
        timings.writerow(("example_id", "wall_time"))
        for record in _map_examples(context, tasks, spec.workers):
            record_file.write(record.to_json() + "\n")
            record_file.flush()
            timings.writerow((record.example_id, record.wall_time))
            records.append(record)
            bar.update()
    logger.info(
        "%s: %d/%d successful", spec.method, sum(r.success for r in records), len(records)
    )
    return records


class MedianEstimate(NamedTuple):
    median: Optional[int]
    se: float


def _query_values(records: Sequence[RunRecord]) -> FloatArray:
    return np.array(
        [r.total_queries if r.success else math.inf for r in records], dtype=np.float64
    )


def success_rate(records: Sequence[RunRecord]) -> float:
    if not records:
        return 0.0
    return sum(r.success for r in records) / len(records)


def median_queries(
    records: Sequence[RunRecord], samples: int = DEFAULT_BOOTSTRAP, seed: int = 0
) -> MedianEstimate:
    """Lower-middle order statistic of query counts, failures counted as +inf.

    The standard error is the standard deviation of the medians of ``samples``
    bootstrap resamples; it is infinite when a resample's median is a failure.
    """
    if not records:
        raise InvalidInputError("median of an empty record list")
    values = _query_values(records)
    n = len(values)
    middle = (n - 1) // 2
    median = np.sort(values)[middle]
    resampled = np.sort(values[RandomStream(seed).integers(0, n, (samples, n))], axis=1)
    medians = resampled[:, middle]
    se = float(np.std(medians)) if np.all(np.isfinite(medians)) else math.inf
    if success_rate(records) <= 0.5 or not np.isfinite(median):
        return MedianEstimate(None, se)
    return MedianEstimate(int(median), se)


class CdfPoint(NamedTuple):
    queries: int
    fraction: float
    ci_low: float
    ci_high: float


def default_query_grid(budget: int = DEFAULT_BUDGET) -> List[int]:
    grid = sorted(
        set(range(1, 101))
        | set(range(100, 1001, 10))
        | set(range(1000, 10001, 100))
        | set(range(10000, budget + 1, 1000))
    )
    grid = [q for q in grid if q <= budget]
    if budget >= 1 and (not grid or grid[-1] != budget):
        grid.append(budget)
    return grid


def cdf_curve(
    records: Sequence[RunRecord],
    grid: Optional[Sequence[int]] = None,
    samples: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    budget: Optional[int] = None,
) -> List[CdfPoint]:
    """Fraction of examples attacked within each query count, with bootstrap CIs.

    Without an explicit grid the default one runs up to the larger of ``budget``
    and the highest query count in ``records``.
    """
    if grid is None:
        top = max((r.total_queries for r in records), default=0)
        grid = default_query_grid(max(DEFAULT_BUDGET if budget is None else budget, top))
    grid = list(grid)
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise InvalidInputError("query grid must be sorted ascending")
    if not records or not grid:
        return [CdfPoint(q, 0.0, 0.0, 0.0) for q in grid]
    values = _query_values(records)
    within = values[:, None] <= np.asarray(grid, dtype=np.float64)[None, :]
    fractions = within.mean(axis=0)
    n = len(values)
    indices = RandomStream(seed).integers(0, n, (samples, n))
    resampled = within[indices].mean(axis=1)
    low, high = np.percentile(resampled, [2.5, 97.5], axis=0)
    return [
        CdfPoint(int(q), float(f), float(min(lo, f)), float(max(hi, f)))
        for q, f, lo, hi in zip(grid, fractions, low, high)
    ]


class Breakdown(NamedTuple):
    points: npt.NDArray[np.int64]
    gradient_histogram: Tuple[npt.NDArray[np.int64], FloatArray]
    coimage_histogram: Tuple[npt.NDArray[np.int64], FloatArray]


def breakdown_export(records: Sequence[RunRecord], bins: int = 20) -> Breakdown:
    """Gradient-block vs coimage-block queries of successful attacks, with marginals."""
    points = np.array(
        [(r.gradient_queries, r.coimage_queries) for r in records if r.success],
        dtype=np.int64,
    ).reshape(-1, 2)

    def histogram(column: npt.NDArray[np.int64]):
        top = int(column.max(initial=0)) + 1
        return np.histogram(column, bins=bins, range=(0, top))

    return Breakdown(points, histogram(points[:, 0]), histogram(points[:, 1]))


class SweepRow(NamedTuple):
    epsilon: float
    median: Optional[int]
    se: float
    success_rate: float
    n: int


def epsilon_sweep(
    spec: CampaignSpec, epsilons: Iterable[float], progress: bool = True
) -> List[SweepRow]:
    """One campaign per step length, all on the same example subsample."""
    rows = []
    for epsilon in epsilons:
        run_spec = dataclasses.replace(
            spec, epsilon=epsilon, output=Path(spec.output) / f"epsilon-{epsilon:g}"
        )
        records = run_campaign(run_spec, progress=progress)
        estimate = median_queries(records, spec.bootstrap, spec.seed)
        rows.append(
            SweepRow(
                epsilon, estimate.median, estimate.se, success_rate(records), len(records)
            )
        )
    return rows


def _format_median(median: Optional[int]) -> str:
    return "undefined" if median is None else str(median)


def _report_header(samples: int, seed: int) -> List[str]:
    return [line.format(samples=samples, seed=seed) for line in REPORT_NOTES]


def write_csv(
    filename: PathLike,
    columns: Sequence[str],
    rows: Iterable[Sequence[Any]],
    notes: Sequence[str] = (),
) -> None:
    with open(filename, "w", newline="") as f:
        for note in notes:
            f.write(note + "\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        writer.writerows(rows)


def write_reports(
    records: Sequence[RunRecord],
    output: PathLike,
    method: str,
    samples: int = DEFAULT_BOOTSTRAP,
    seed: int = 0,
    grid: Optional[Sequence[int]] = None,
    budget: Optional[int] = None,
) -> None:
    """Write ``summary.csv``, ``cdf.csv`` and ``breakdown.csv`` for one campaign."""
    output = Path(output)
    output.mkdir(parents=True, exist_ok=True)
    notes = _report_header(samples, seed)
    estimate = median_queries(records, samples, seed)
    write_csv(
        output / "summary.csv",
        ("method", "median", "se", "success_rate", "n"),
        [
            (
                method,
                _format_median(estimate.median),
                estimate.se,
                success_rate(records),
                len(records),
            )
        ],
        notes,
    )
    write_csv(
        output / "cdf.csv",
        ("q", "fraction", "ci_low", "ci_high"),
        cdf_curve(records, grid, samples, seed, budget),
        notes,
    )
    write_csv(
        output / "breakdown.csv",
        ("grad_q", "coimage_q"),
        breakdown_export(records).points.tolist(),
    )


def write_sweep(rows: Sequence[SweepRow], filename: PathLike, samples: int, seed: int) -> None:
    write_csv(
        filename,
        ("epsilon", "median", "se", "success_rate", "n"),
        [
            (row.epsilon, _format_median(row.median), row.se, row.success_rate, row.n)
            for row in rows
        ],
        _report_header(samples, seed),
    )


__all__ = [
    "AttackRunner",
    "CampaignSpec",
    "CdfPoint",
    "MedianEstimate",
    "RunRecord",
    "breakdown_export",
    "cdf_curve",
    "default_query_grid",
    "epsilon_sweep",
    "load_campaign_spec",
    "load_records",
    "median_queries",
    "run_campaign",
    "success_rate",
    "write_reports",
    "write_sweep",
]
