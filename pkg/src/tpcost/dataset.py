"""Sample persistence, Box-Cox label normalization, dataset splitting, and a
synthetic latency oracle for desk-scale experiments.

The oracle prices each leaf at the larger of its compute time and its memory
time (classic roofline shape) so that a smooth, learnable ground truth exists
without hardware.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats as sstats

from .errors import (DegenerateLabels, DomainError, EmptyDataset,
                     MissingPeakFlops, NotFitted, ValidationError)
from .features import (IDX_LOG_PARALLEL_EXTENT, IDX_LOG_TOTAL_BYTES_READ,
                       IDX_LOG_TOTAL_BYTES_WRITTEN, IDX_LOG_TOTAL_FLOPS,
                       IDX_PARALLEL_COUNT, CompactAst, DeviceSpec,
                       build_compact_ast)
from .ir import (AstNode, ComputeStats, LoopInfo, ProgramAst, leaf, loop,
                 make_program)

SPLITS = ("train", "valid", "test", "holdout")

# Stand-in accelerator for synthetic datasets and desk-scale experiments.
# Balance point ~14 flops/byte so both roofline regimes occur.
DEFAULT_SYNTH_DEVICE = DeviceSpec(name="synth0", clock_mhz=1000.0,
                                  mem_gb=16.0, bandwidth_gbps=1024.0,
                                  cores=16, peak_fp32_gflops=2048.0,
                                  l2_cache_mb=4.0)


@dataclass
class Sample:
    id: str
    task_id: str
    model_id: str
    device_id: str
    compact: CompactAst
    latency_s: float


@dataclass
class Dataset:
    samples: list[Sample] = field(default_factory=list)
    splits: dict[str, str] = field(default_factory=dict)

    def subset(self, split: str) -> list[Sample]:
        return [s for s in self.samples if self.splits.get(s.id) == split]

    def labels(self, split: str | None = None) -> np.ndarray:
        samples = self.samples if split is None else self.subset(split)
        return np.array([s.latency_s for s in samples], dtype=np.float64)


# ---------------------------------------------------------------------------
# Box-Cox normalization
# ---------------------------------------------------------------------------

_LAMBDA_ZERO_EPS = 1e-9


@dataclass
class BoxCoxNormalizer:
    """Power transform ((y+shift)^lambda - 1)/lambda, log at lambda ~ 0,
    plus standardization statistics of the transformed training labels."""

    lambda_bc: float = 0.0
    shift: float = 0.0
    fitted: bool = False
    t_mean: float = 0.0
    t_std: float = 1.0
    loss_offset: float = 0.0  # makes standardized training labels positive

    def _check(self) -> None:
        if not self.fitted:
            raise NotFitted("normalizer used before fit")

    def transform(self, y):
        self._check()
        arr = np.asarray(y, dtype=np.float64)
        shifted = arr + self.shift
        if np.any(shifted <= 0):
            raise DomainError("transform input must be > -shift")
        if abs(self.lambda_bc) < _LAMBDA_ZERO_EPS:
            out = np.log(shifted)
        else:
            out = (np.power(shifted, self.lambda_bc) - 1.0) / self.lambda_bc
        return float(out) if np.isscalar(y) else out

    def inverse_transform(self, t):
        self._check()
        arr = np.asarray(t, dtype=np.float64)
        if abs(self.lambda_bc) < _LAMBDA_ZERO_EPS:
            out = np.exp(arr) - self.shift
        else:
            base = self.lambda_bc * arr + 1.0
            if np.any(base <= 0):
                raise DomainError("no positive preimage: lambda*t + 1 <= 0")
            out = np.power(base, 1.0 / self.lambda_bc) - self.shift
        return float(out) if np.isscalar(t) else out

    def encode(self, y):
        """Original scale -> standardized transformed scale (model space)."""
        return (self.transform(y) - self.t_mean) / self.t_std

    def decode(self, e):
        """Model space -> original scale."""
        return self.inverse_transform(np.asarray(e) * self.t_std + self.t_mean)


def apply_normalizer(norm: BoxCoxNormalizer, y):
    return norm.transform(y)


def invert_normalizer(norm: BoxCoxNormalizer, t):
    return norm.inverse_transform(t)


def _golden_section_max(f, lo: float, hi: float, tol: float) -> float:
    """Golden-section search for the maximizer of a unimodal f on [lo, hi]."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def fit_boxcox(train_labels, lambda_range: tuple[float, float] = (-2.0, 2.0),
               tol: float = 1e-5) -> BoxCoxNormalizer:
    """Maximum-likelihood Box-Cox fit via golden-section search on the
    profile log-likelihood, followed by standardization of the transformed
    labels."""
    y = np.asarray(train_labels, dtype=np.float64)
    if y.size < 2 or np.unique(y).size < 2:
        raise DegenerateLabels("need at least 2 distinct labels")
    if np.any(y < 0):
        raise ValidationError("labels must be positive")
    shift = 1e-12 if np.any(y == 0) else 0.0
    shifted = y + shift

    lam = _golden_section_max(lambda l: float(sstats.boxcox_llf(l, shifted)),
                              lambda_range[0], lambda_range[1], tol)
    norm = BoxCoxNormalizer(lambda_bc=lam, shift=shift, fitted=True)
    t = norm.transform(y)
    t_std = float(np.std(t))
    if t_std == 0.0:
        raise DegenerateLabels("transformed labels are constant")
    norm.t_mean = float(np.mean(t))
    norm.t_std = t_std
    standardized = (t - norm.t_mean) / t_std
    norm.loss_offset = 1.0 - float(np.min(standardized))
    return norm


def skewness(values) -> float:
    """Fisher-Pearson sample skewness."""
    return float(sstats.skew(np.asarray(values, dtype=np.float64)))


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_dataset(ds: Dataset, ratios: tuple[int, int, int] = (8, 1, 1),
                  seed: int = 0,
                  holdout_models: frozenset[str] | set[str] = frozenset()
                  ) -> Dataset:
    """Assign every sample to train/valid/test (ratios, seeded shuffle) or to
    holdout when its model_id is held out."""
    if not ds.samples:
        raise EmptyDataset("cannot split an empty dataset")
    if min(ratios) < 0 or sum(ratios) <= 0:
        raise ValidationError("ratios must be non-negative with positive sum")
    splits: dict[str, str] = {}
    rest: list[Sample] = []
    for s in ds.samples:
        if s.model_id in holdout_models:
            splits[s.id] = "holdout"
        else:
            rest.append(s)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(rest))
    total = sum(ratios)
    n = len(rest)
    n_valid = round(n * ratios[1] / total)
    n_test = round(n * ratios[2] / total)
    n_train = n - n_valid - n_test
    for pos, idx in enumerate(order):
        if pos < n_train:
            name = "train"
        elif pos < n_train + n_valid:
            name = "valid"
        else:
            name = "test"
        splits[rest[idx].id] = name
    return Dataset(samples=ds.samples, splits=splits)


# ---------------------------------------------------------------------------
# Synthetic latency oracle
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthOracleConfig:
    flops_efficiency: float = 0.6
    mem_efficiency: float = 0.7
    per_leaf_overhead_s: float = 2e-6
    noise_sigma: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 < self.flops_efficiency <= 1.0):
            raise ValidationError("flops_efficiency must be in (0, 1]")
        if not (0.0 < self.mem_efficiency <= 1.0):
            raise ValidationError("mem_efficiency must be in (0, 1]")
        if self.per_leaf_overhead_s < 0 or self.noise_sigma < 0:
            raise ValidationError("overhead and noise_sigma must be >= 0")


def _noise_seed(compact: CompactAst, device_name: str, seed: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(repr((compact.serialized, compact.ordering, seed,
                   device_name)).encode())
    h.update(np.ascontiguousarray(compact.leaf_vectors).tobytes())
    return int.from_bytes(h.digest(), "little")


def synth_latency(compact: CompactAst, device: DeviceSpec,
                  cfg: SynthOracleConfig) -> float:
    """Roofline-style latency: per leaf the max of compute and memory time,
    plus a fixed per-leaf overhead, with optional log-normal noise."""
    cfg.validate()
    if device.peak_fp32_gflops <= 0:
        raise MissingPeakFlops(
            f"device '{device.name}' has no peak_fp32_gflops")
    flops_rate = device.peak_fp32_gflops * 1e9 * cfg.flops_efficiency
    bytes_rate = device.bandwidth_gbps * 1e9 / 8.0 * cfg.mem_efficiency
    total = cfg.per_leaf_overhead_s * compact.n_leaf
    for row in compact.leaf_vectors:
        flops = 2.0 ** row[IDX_LOG_TOTAL_FLOPS] - 1.0
        nbytes = (2.0 ** row[IDX_LOG_TOTAL_BYTES_READ] - 1.0
                  + 2.0 ** row[IDX_LOG_TOTAL_BYTES_WRITTEN] - 1.0)
        if row[IDX_PARALLEL_COUNT] > 0:
            p = min(float(device.cores),
                    2.0 ** row[IDX_LOG_PARALLEL_EXTENT] - 1.0)
            p = max(p, 1.0)
        else:
            p = 1.0
        total += max(flops / (flops_rate * p), nbytes / bytes_rate)
    if cfg.noise_sigma > 0:
        rng = np.random.default_rng(_noise_seed(compact, device.name, cfg.seed))
        total *= math.exp(cfg.noise_sigma * rng.standard_normal())
    return float(total)


# ---------------------------------------------------------------------------
# Random program generation
# ---------------------------------------------------------------------------

_MAX_EXTENT_BITS = 9.0  # extents stay in 1..512


def _rand_annotations(rng: np.random.Generator,
                      parallel_p: float = 0.15) -> frozenset[str]:
    annots = set()
    if rng.random() < parallel_p:
        annots.add("parallel")
    if rng.random() < 0.25:
        annots.add("vectorize")
    if rng.random() < 0.15:
        annots.add("unroll")
    return frozenset(annots)


def _rand_stats(rng: np.random.Generator) -> ComputeStats:
    # op counts log-uniform up to 512/iteration so both roofline regimes
    # (compute-bound and memory-bound) occur
    def log_count(bits: float) -> int:
        return int(round(2.0 ** rng.uniform(0.0, bits)))

    return ComputeStats(
        fma_count=log_count(9.0),
        add_count=log_count(5.0),
        mul_count=log_count(5.0),
        div_count=int(rng.integers(0, 3)),
        special_count=int(rng.integers(0, 3)),
        bytes_read=4 * log_count(5.0),
        bytes_written=4 * log_count(3.0),
        buffers_read=int(rng.integers(1, 5)),
        buffers_written=int(rng.integers(1, 3)),
    )


@dataclass
class _TaskTemplate:
    """Shared structure of one task: per-leaf loop chains under a common
    root loop, fixed annotations/stats, and a target iteration scale."""

    root_annots: frozenset[str]
    chain_annots: list[list[frozenset[str]]]  # per leaf, per chain loop
    stats: list[ComputeStats]
    e_center: float  # per-leaf log2 iteration target


def _random_template(rng: np.random.Generator,
                     max_leaves: int) -> _TaskTemplate:
    n_leaves = int(rng.integers(1, min(6, max_leaves) + 1))
    chain_annots = []
    stats = []
    for _ in range(n_leaves):
        chain_len = int(rng.integers(1, 4))  # depth 2..4 incl. the root
        chain_annots.append([_rand_annotations(rng) for _ in range(chain_len)])
        stats.append(_rand_stats(rng))
    return _TaskTemplate(root_annots=_rand_annotations(rng, parallel_p=0.4),
                         chain_annots=chain_annots, stats=stats,
                         e_center=float(rng.uniform(10.0, 20.0)))


def _split_exponent(rng: np.random.Generator, total: float,
                    parts: int) -> list[float]:
    """Split `total` bits across `parts` loops, each within [0, 9]."""
    out = []
    remaining = min(total, _MAX_EXTENT_BITS * parts)
    for i in range(parts):
        left = parts - i - 1
        lo = max(0.0, remaining - _MAX_EXTENT_BITS * left)
        hi = min(_MAX_EXTENT_BITS, remaining)
        e = float(rng.uniform(lo, hi)) if hi > lo else hi
        out.append(e)
        remaining -= e
    return out


def _extent_from_bits(e: float) -> int:
    return max(1, min(512, int(round(2.0 ** e))))


def _instantiate(template: _TaskTemplate, rng: np.random.Generator,
                 name: str, max_leaves: int) -> ProgramAst:
    counter = [0]

    def fresh(extent_bits: float, annots: frozenset[str]) -> LoopInfo:
        counter[0] += 1
        return LoopInfo(f"v{counter[0]}", _extent_from_bits(extent_bits),
                        annots)

    e_root = float(rng.uniform(2.0, 6.0))
    children: list[AstNode] = []
    for i, chain in enumerate(template.chain_annots):
        e_target = template.e_center + float(rng.uniform(-1.5, 1.5))
        bits = _split_exponent(rng, e_target - e_root, len(chain))
        node: AstNode = leaf(f"c{i}", template.stats[i])
        for loop_bits, loop_annots in zip(reversed(bits), reversed(chain)):
            node = loop(fresh(loop_bits, loop_annots), (node,))
        children.append(node)
    root = loop(fresh(e_root, template.root_annots), children)
    return make_program(name, root, max_leaves=max_leaves)


def random_program(rng: np.random.Generator, name: str,
                   max_leaves: int = 16) -> ProgramAst:
    """Random loop nest: a root loop over per-leaf chains, depth <= 4,
    1..min(6, max_leaves) leaves, extents in 1..512."""
    template = _random_template(rng, max_leaves)
    return _instantiate(template, rng, name, max_leaves)


def generate_synthetic(n: int, devices: list[DeviceSpec],
                       cfg: SynthOracleConfig, seed: int = 0,
                       task_size: int = 32, tasks_per_model: int = 4
                       ) -> Dataset:
    """Random programs grouped into tasks that share a base loop structure
    and iteration scale; labels come from the synthetic oracle."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    if not devices:
        raise ValidationError("need at least one device")
    rng = np.random.default_rng(seed)
    samples: list[Sample] = []
    task_idx = 0
    while len(samples) < n:
        template = _random_template(rng, max_leaves=16)
        model_id = f"m{task_idx // tasks_per_model}"
        for j in range(task_size):
            if len(samples) >= n:
                break
            i = len(samples)
            program = _instantiate(template, rng, f"t{task_idx}_p{j}",
                                   max_leaves=16)
            compact = build_compact_ast(program)
            device = devices[i % len(devices)]
            latency = synth_latency(compact, device, cfg)
            samples.append(Sample(id=f"s{i}", task_id=f"t{task_idx}",
                                  model_id=model_id, device_id=device.name,
                                  compact=compact, latency_s=latency))
        task_idx += 1
    return Dataset(samples=samples)


# ---------------------------------------------------------------------------
# JSONL persistence (floats written with 17 significant digits)
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    if not math.isfinite(x):
        raise ValidationError("cannot serialize non-finite float")
    return format(float(x), ".17g")


def compact_json_fields(compact: CompactAst) -> str:
    """The shared n_leaf/vectors/ordering/serialized JSON fragment."""
    vectors = "[" + ",".join(
        "[" + ",".join(_fmt(v) for v in row) + "]"
        for row in compact.leaf_vectors) + "]"
    ordering = "[" + ",".join(str(i) for i in compact.ordering) + "]"
    serialized = "[" + ",".join(str(i) for i in compact.serialized) + "]"
    return (f"\"n_leaf\":{compact.n_leaf},"
            f"\"vectors\":{vectors},"
            f"\"ordering\":{ordering},"
            f"\"serialized\":{serialized}")


def sample_to_line(s: Sample) -> str:
    return ("{"
            f"\"id\":{json.dumps(s.id)},"
            f"\"task_id\":{json.dumps(s.task_id)},"
            f"\"model_id\":{json.dumps(s.model_id)},"
            f"\"device_id\":{json.dumps(s.device_id)},"
            f"{compact_json_fields(s.compact)},"
            f"\"latency_s\":{_fmt(s.latency_s)}"
            "}")


def sample_from_dict(d: dict) -> Sample:
    vectors = np.asarray(d["vectors"], dtype=np.float64)
    if vectors.ndim != 2:
        raise ValidationError("vectors must be a 2-D array")
    compact = CompactAst(leaf_vectors=vectors,
                         ordering=tuple(int(i) for i in d["ordering"]),
                         serialized=tuple(int(i) for i in d["serialized"]),
                         n_leaf=int(d["n_leaf"]))
    if compact.n_leaf != vectors.shape[0]:
        raise ValidationError("n_leaf does not match vector count")
    return Sample(id=str(d["id"]), task_id=str(d["task_id"]),
                  model_id=str(d["model_id"]), device_id=str(d["device_id"]),
                  compact=compact, latency_s=float(d["latency_s"]))


def save_dataset(ds: Dataset, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for s in ds.samples:
            f.write(sample_to_line(s))
            f.write("\n")


def load_dataset(path: str | Path) -> Dataset:
    samples = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise ValidationError(f"{path}:{lineno}: bad JSON: {e}") from e
            samples.append(sample_from_dict(d))
    return Dataset(samples=samples)
