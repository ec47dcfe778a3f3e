"""Device-independent and device-dependent feature extraction.

A program AST is flattened into a *compact* form: one fixed-width
computation vector per compute leaf plus an ordering vector derived from a
marker-annotated pre-order serialization (marker -1 emitted after every
leaf id). A sinusoidal positional encoding of each leaf's serialized
position is added to its computation vector to form the model input.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from math import log2
from pathlib import Path

import numpy as np

from .errors import LeafCountExceeded, ValidationError
from .ir import AstNode, ComputeStats, LoopInfo, ProgramAst

N_ENTRY = 24  # computation-vector width; must stay even for the PE formulas
THETA_DEFAULT = 10000.0
MARKER = -1
_EXTENT_PRODUCT_LIMIT = 2 ** 62

# Computation-vector schema (fixed order, length N_ENTRY):
#   0  loop depth
#   1  log2(1 + product of enclosing extents)          (0 if no loops)
#   2  log2(1 + innermost extent)                      (0 if no loops)
#   3  log2(1 + outermost extent)                      (0 if no loops)
#   4  number of vectorized enclosing loops
#   5  number of unrolled enclosing loops
#   6  number of parallel enclosing loops
#   7  log2(1 + extent product of vectorized loops)    (0 if none)
#   8  log2(1 + extent product of unrolled loops)      (0 if none)
#   9  log2(1 + extent product of parallel loops)      (0 if none)
#   10 log2(1 + fma per iteration)
#   11 log2(1 + add per iteration)
#   12 log2(1 + mul per iteration)
#   13 log2(1 + div per iteration)
#   14 log2(1 + special per iteration)
#   15 log2(1 + total flops over all iterations), fma counted as 2 flops
#   16 log2(1 + bytes read per iteration)
#   17 log2(1 + bytes written per iteration)
#   18 log2(1 + total bytes read)
#   19 log2(1 + total bytes written)
#   20 distinct buffers read
#   21 distinct buffers written
#   22 arithmetic intensity: total flops / (total bytes + 1), raw
#   23 leaf position fraction: leaf_index / n_leaf, raw

IDX_LOG_TOTAL_FLOPS = 15
IDX_LOG_TOTAL_BYTES_READ = 18
IDX_LOG_TOTAL_BYTES_WRITTEN = 19
IDX_PARALLEL_COUNT = 6
IDX_LOG_PARALLEL_EXTENT = 9


@dataclass(frozen=True)
class CompactAst:
    """Per-leaf computation vectors plus the serialized-position ordering."""

    leaf_vectors: np.ndarray  # (n_leaf, N_ENTRY) float64
    ordering: tuple[int, ...]  # position of each leaf id in `serialized`
    serialized: tuple[int, ...]  # pre-order node ids with MARKER after leaves
    n_leaf: int

    def __eq__(self, other) -> bool:
        if not isinstance(other, CompactAst):
            return NotImplemented
        return (self.n_leaf == other.n_leaf
                and self.ordering == other.ordering
                and self.serialized == other.serialized
                and np.array_equal(self.leaf_vectors, other.leaf_vectors))


@dataclass(frozen=True)
class DeviceSpec:
    """Hardware descriptor used for the device-dependent feature vector.

    peak_fp32_gflops and l2_cache_mb use 0 to mean "unknown"."""

    name: str
    clock_mhz: float
    mem_gb: float
    bandwidth_gbps: float
    cores: int
    peak_fp32_gflops: float = 0.0
    l2_cache_mb: float = 0.0

    def validate(self) -> None:
        for attr in ("clock_mhz", "mem_gb", "bandwidth_gbps", "cores"):
            if getattr(self, attr) <= 0:
                raise ValidationError(f"device '{self.name}': {attr} must be > 0")
        if self.peak_fp32_gflops < 0 or self.l2_cache_mb < 0:
            raise ValidationError(f"device '{self.name}': negative optional field")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "clock_mhz": self.clock_mhz,
            "mem_gb": self.mem_gb,
            "bandwidth_gbps": self.bandwidth_gbps,
            "cores": self.cores,
            "peak_fp32_gflops": self.peak_fp32_gflops,
            "l2_cache_mb": self.l2_cache_mb,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceSpec":
        spec = cls(name=d["name"], clock_mhz=float(d["clock_mhz"]),
                   mem_gb=float(d["mem_gb"]),
                   bandwidth_gbps=float(d["bandwidth_gbps"]),
                   cores=int(d["cores"]),
                   peak_fp32_gflops=float(d.get("peak_fp32_gflops", 0.0)),
                   l2_cache_mb=float(d.get("l2_cache_mb", 0.0)))
        spec.validate()
        return spec


def load_device_catalog(path: str | Path) -> dict[str, DeviceSpec]:
    """Load a JSON list of device specs, keyed by device name."""
    with open(path, "r", encoding="utf-8") as f:
        entries = json.load(f)
    catalog = {}
    for entry in entries:
        spec = DeviceSpec.from_dict(entry)
        if spec.name in catalog:
            raise ValidationError(f"duplicate device name '{spec.name}'")
        catalog[spec.name] = spec
    return catalog


def save_device_catalog(catalog: dict[str, DeviceSpec] | list[DeviceSpec],
                        path: str | Path) -> None:
    specs = list(catalog.values()) if isinstance(catalog, dict) else catalog
    with open(path, "w", encoding="utf-8") as f:
        json.dump([s.to_dict() for s in specs], f, indent=2)
        f.write("\n")


@dataclass(frozen=True)
class EncodedInput:
    """Model-ready input: PE-augmented leaf vectors plus device features."""

    matrix: np.ndarray  # (n_leaf, N_ENTRY)
    device_vector: np.ndarray  # (6,)

    @property
    def n_leaf(self) -> int:
        return self.matrix.shape[0]


def _log_extent_product(loops: list[LoopInfo]) -> tuple[float, int]:
    """(log2(1 + product of extents), product); empty list maps to (0, 0)."""
    if not loops:
        return 0.0, 0
    product = 1
    for lp in loops:
        product *= lp.extent
    if product > _EXTENT_PRODUCT_LIMIT:
        raise OverflowError(
            f"extent product {product} exceeds 2^62")
    return log2(1 + product), product


def compute_vector(leaf: ComputeStats, enclosing: list[LoopInfo],
                   leaf_index: int, n_leaf: int) -> np.ndarray:
    """Fill the 24-entry schema for one leaf under its enclosing loops
    (outermost first)."""
    v = np.zeros(N_ENTRY, dtype=np.float64)
    log_prod, iters = _log_extent_product(enclosing)
    if enclosing:
        v[0] = len(enclosing)
        v[1] = log_prod
        v[2] = log2(1 + enclosing[-1].extent)
        v[3] = log2(1 + enclosing[0].extent)
    else:
        iters = 1  # a loop-free leaf body executes once
    for offset, annot in enumerate(("vectorize", "unroll", "parallel")):
        tagged = [lp for lp in enclosing if annot in lp.annotations]
        v[4 + offset] = len(tagged)
        v[7 + offset], _ = _log_extent_product(tagged)
    per_iter_flops = (2 * leaf.fma_count + leaf.add_count + leaf.mul_count
                      + leaf.div_count + leaf.special_count)
    for offset, count in enumerate((leaf.fma_count, leaf.add_count,
                                    leaf.mul_count, leaf.div_count,
                                    leaf.special_count)):
        v[10 + offset] = log2(1 + count)
    total_flops = per_iter_flops * iters
    total_read = leaf.bytes_read * iters
    total_written = leaf.bytes_written * iters
    v[15] = log2(1 + total_flops)
    v[16] = log2(1 + leaf.bytes_read)
    v[17] = log2(1 + leaf.bytes_written)
    v[18] = log2(1 + total_read)
    v[19] = log2(1 + total_written)
    v[20] = leaf.buffers_read
    v[21] = leaf.buffers_written
    v[22] = total_flops / (total_read + total_written + 1)
    v[23] = leaf_index / n_leaf
    return v


def build_compact_ast(ast: ProgramAst,
                      max_leaves: int | None = None) -> CompactAst:
    """Serialize the tree pre-order (marker after each leaf) and extract one
    computation vector per leaf."""
    if max_leaves is not None and ast.n_leaf > max_leaves:
        raise LeafCountExceeded(
            f"{ast.n_leaf} leaves exceeds maximum {max_leaves}")

    serialized: list[int] = []
    ordering: list[int] = []
    leaves: list[tuple[ComputeStats, list[LoopInfo]]] = []
    next_id = 0

    def visit(node: AstNode, ctx: list[LoopInfo]) -> None:
        nonlocal next_id
        node_id = next_id
        next_id += 1
        if node.is_leaf:
            ordering.append(len(serialized))
            serialized.append(node_id)
            serialized.append(MARKER)
            leaves.append((node.stats, list(ctx)))
            return
        serialized.append(node_id)
        ctx.append(node.loop)
        for child in node.children:
            visit(child, ctx)
        ctx.pop()

    visit(ast.root, [])
    n_leaf = len(leaves)
    if n_leaf != ast.n_leaf:
        raise ValidationError(
            f"leaf count mismatch: tree has {n_leaf}, header says {ast.n_leaf}")
    vectors = np.stack([
        compute_vector(stats, ctx, idx, n_leaf)
        for idx, (stats, ctx) in enumerate(leaves)
    ])
    return CompactAst(leaf_vectors=vectors, ordering=tuple(ordering),
                      serialized=tuple(serialized), n_leaf=n_leaf)


def positional_encoding(compact: CompactAst,
                        theta: float = THETA_DEFAULT) -> np.ndarray:
    """Sinusoidal encoding of each leaf's serialized position.

    Row xi: column 2d holds sin(V[xi] / theta^(2d/N_ENTRY)) and column
    2d+1 the matching cos. All entries lie in [-1, 1].
    """
    if theta <= 0:
        raise ValidationError("theta must be > 0")
    positions = np.asarray(compact.ordering, dtype=np.float64)[:, None]
    exponents = 2.0 * np.arange(N_ENTRY // 2, dtype=np.float64) / N_ENTRY
    angles = positions / theta ** exponents  # (n_leaf, N_ENTRY/2)
    pe = np.empty((compact.n_leaf, N_ENTRY), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def device_vector(device: DeviceSpec) -> np.ndarray:
    """6-entry log-compressed hardware feature vector."""
    raw = np.array([device.clock_mhz, device.mem_gb, device.bandwidth_gbps,
                    float(device.cores), device.peak_fp32_gflops,
                    device.l2_cache_mb], dtype=np.float64)
    return np.log2(1.0 + raw)


def encode_input(compact: CompactAst, device: DeviceSpec,
                 theta: float = THETA_DEFAULT) -> EncodedInput:
    """Add the positional encoding to the leaf vectors and attach device
    features."""
    matrix = compact.leaf_vectors + positional_encoding(compact, theta)
    return EncodedInput(matrix=matrix, device_vector=device_vector(device))
