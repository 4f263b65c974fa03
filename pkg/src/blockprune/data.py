"""Synthetic Lennard-Jones clusters, neighbour lists and the dataset text format.

File format, one record per sample, records concatenated (UTF-8, LF)::

    <n>
    energy=<17 significant digits>
    <Z> <x> <y> <z> <fx> <fy> <fz>     (n lines)
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "MolecularSample",
    "EdgeList",
    "Dataset",
    "LJParams",
    "GenerationSpec",
    "DatasetFormatError",
    "build_edges",
    "oracle_energy_forces",
    "make_lj_params",
    "shift_params",
    "generate_dataset",
    "split_indices",
    "split_dataset",
    "read_dataset",
    "write_dataset",
    "format_dataset",
    "parse_dataset",
]


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class MolecularSample:
    atomic_numbers: np.ndarray  # (n,) int
    positions: np.ndarray  # (n, 3)
    energy: float
    forces: np.ndarray  # (n, 3)

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.forces = np.asarray(self.forces, dtype=np.float64)
        self.energy = float(self.energy)
        n = self.atomic_numbers.shape[0]
        if n < 2:
            raise ValueError("a sample needs at least two atoms")
        if self.positions.shape != (n, 3) or self.forces.shape != (n, 3):
            raise ValueError("positions and forces must both be (n, 3)")
        if np.any(self.atomic_numbers < 1):
            raise ValueError("atomic numbers must be positive")
        if not np.all(np.isfinite(self.positions)):
            raise ValueError("positions must be finite")

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])


@dataclass
class EdgeList:
    senders: np.ndarray
    receivers: np.ndarray
    distances: np.ndarray
    unit_vectors: np.ndarray  # (positions[receiver] - positions[sender]) / distance

    def __len__(self) -> int:
        return int(self.senders.shape[0])


@dataclass
class LJParams:
    """Per-species-pair Lennard-Jones table, indexed by species 0..k-1 (Z - 1)."""

    epsilon: np.ndarray  # (k, k) symmetric
    sigma: np.ndarray  # (k, k) symmetric

    @property
    def species_count(self) -> int:
        return int(self.epsilon.shape[0])

    def pair(self, species: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        idx = np.asarray(species, dtype=np.int64) - 1
        if np.any(idx < 0) or np.any(idx >= self.species_count):
            raise ValueError("species outside the parameter table")
        return self.epsilon[np.ix_(idx, idx)], self.sigma[np.ix_(idx, idx)]


@dataclass
class Dataset:
    samples: list[MolecularSample]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    def subset(self, indices, **extra) -> "Dataset":
        meta = dict(self.metadata)
        meta.update(extra)
        return Dataset([self.samples[int(i)] for i in indices], meta)


def build_edges(sample: MolecularSample, cutoff: float) -> EdgeList:
    """All directed pairs with 0 < r < cutoff, sender-major then receiver-minor."""
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    pos = sample.positions
    n = pos.shape[0]
    delta = pos[None, :, :] - pos[:, None, :]  # [s, r] = pos[r] - pos[s]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", delta, delta))
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0.0):
        raise ValueError("two atoms share identical positions")
    s, r = np.nonzero(off & (dist < cutoff))
    d = dist[s, r]
    return EdgeList(s.astype(np.int64), r.astype(np.int64), d, delta[s, r] / d[:, None])


def _pair_geometry(positions: np.ndarray):
    delta = positions[None, :, :] - positions[:, None, :]
    dist = np.sqrt(np.einsum("ijk,ijk->ij", delta, delta))
    return delta, dist


def oracle_energy_forces(positions, species, params: LJParams) -> tuple[float, np.ndarray]:
    """Total LJ energy sum_{i<j} 4 eps [(sig/r)^12 - (sig/r)^6] and its negative gradient."""
    positions = np.asarray(positions, dtype=np.float64)
    eps, sig = params.pair(species)
    delta, dist = _pair_geometry(positions)
    n = positions.shape[0]
    off = ~np.eye(n, dtype=bool)
    if np.any(dist[off] == 0.0):
        raise ValueError("coincident atoms")
    r = np.where(off, dist, 1.0)
    sr6 = (sig / r) ** 6
    sr12 = sr6 * sr6
    pair_e = np.where(off, 4.0 * eps * (sr12 - sr6), 0.0)
    energy = 0.5 * float(pair_e.sum())
    # dE/dr for each pair, then F_i = -sum_j dE/dr * (x_i - x_j)/r
    de_dr = np.where(off, 4.0 * eps * (-12.0 * sr12 + 6.0 * sr6) / r, 0.0)
    # delta[i, j] = x_j - x_i
    forces = np.einsum("ij,ijk->ik", de_dr / r, delta)
    return energy, forces


def make_lj_params(species_count: int, seed: int) -> LJParams:
    """Seeded symmetric (epsilon, sigma) table; sigma near 1 so default cutoffs make sense."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x4C4A]))
    eps = rng.uniform(0.6, 1.4, size=(species_count, species_count))
    sig = rng.uniform(0.9, 1.1, size=(species_count, species_count))
    eps = np.triu(eps) + np.triu(eps, 1).T
    sig = np.triu(sig) + np.triu(sig, 1).T
    return LJParams(eps, sig)


def shift_params(params: LJParams, epsilon_scale: float = 1.5, sigma_scale: float = 1.1) -> LJParams:
    """Downstream-task potential: the pre-training table with scaled epsilon and sigma."""
    return LJParams(params.epsilon * epsilon_scale, params.sigma * sigma_scale)


@dataclass
class GenerationSpec:
    count: int
    seed: int
    atoms_min: int = 6
    atoms_max: int = 12
    species_count: int = 3
    density: float = 0.45  # atoms per unit volume of the placement box
    relax_steps: int = 20
    relax_step_size: float = 0.01
    max_displacement: float = 0.05
    min_separation: float = 0.7  # in units of the pair sigma
    placement_separation: float = 0.85
    max_retries: int = 200
    task: str = "upstream"  # "downstream" applies the shifted potential
    split: str = "train"
    params: LJParams | None = None  # pre-training table; seeded from param_seed when absent
    param_seed: int = 0
    epsilon_scale: float = 1.5
    sigma_scale: float = 1.1

    def resolved_params(self) -> LJParams:
        base = self.params if self.params is not None else make_lj_params(self.species_count, self.param_seed)
        if self.task == "downstream":
            return shift_params(base, self.epsilon_scale, self.sigma_scale)
        return base


_SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


def _split_code(split: str) -> int:
    if split in _SPLIT_CODES:
        return _SPLIT_CODES[split]
    return int.from_bytes(split.encode("utf-8")[:7].ljust(7, b"\0"), "little") + 16


def _place(rng, n, box, sig_pairs, sep, max_retries) -> np.ndarray | None:
    pos = np.empty((n, 3))
    for i in range(n):
        for _ in range(max_retries):
            cand = rng.uniform(0.0, box, size=3)
            if i == 0:
                pos[0] = cand
                break
            d = np.linalg.norm(pos[:i] - cand, axis=1)
            if np.all(d >= sep * sig_pairs[i, :i]):
                pos[i] = cand
                break
        else:
            return None
    return pos


def _generate_one(spec: GenerationSpec, params: LJParams, index: int) -> MolecularSample:
    task_code = 2 if spec.task == "downstream" else 1
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, task_code, _split_code(spec.split), index]))
    for _ in range(spec.max_retries):
        n = int(rng.integers(spec.atoms_min, spec.atoms_max + 1))
        species = rng.integers(1, spec.species_count + 1, size=n)
        _, sig = params.pair(species)
        box = (n / spec.density) ** (1.0 / 3.0)
        pos = _place(rng, n, box, sig, spec.placement_separation, spec.max_retries)
        if pos is None:
            continue
        for _ in range(spec.relax_steps):
            _, f = oracle_energy_forces(pos, species, params)
            step = spec.relax_step_size * f
            norm = np.linalg.norm(step, axis=1, keepdims=True)
            scale = np.minimum(1.0, spec.max_displacement / np.maximum(norm, 1e-300))
            pos = pos + step * scale
        _, dist = _pair_geometry(pos)
        off = ~np.eye(n, dtype=bool)
        if np.any(dist[off] < spec.min_separation * sig[off]):
            continue
        pos = pos - pos.mean(axis=0)
        energy, forces = oracle_energy_forces(pos, species, params)
        return MolecularSample(species, pos, energy, forces)
    raise RuntimeError(f"placement failed for sample {index} after {spec.max_retries} retries")


def generate_dataset(spec: GenerationSpec) -> Dataset:
    """Rejection-sampled, briefly relaxed LJ clusters labelled by the oracle.

    Every sample is seeded from (seed, task, split, index) alone, so any
    subrange can be regenerated independently.
    """
    if spec.count < 1:
        raise ValueError("count must be >= 1")
    if spec.species_count < 1 or spec.atoms_min < 2 or spec.atoms_max < spec.atoms_min:
        raise ValueError("invalid atom or species counts")
    params = spec.resolved_params()
    samples = [_generate_one(spec, params, i) for i in range(spec.count)]
    meta = {
        "seed": spec.seed,
        "task": spec.task,
        "split": spec.split,
        "epsilon": params.epsilon.tolist(),
        "sigma": params.sigma.tolist(),
    }
    return Dataset(samples, meta)


def split_indices(count: int, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, np.ndarray]:
    """Assign each index to train/val/test by a uniform draw seeded with (seed, index)."""
    edges = np.cumsum(fractions)
    if not math.isclose(edges[-1], 1.0):
        raise ValueError("split fractions must sum to 1")
    names = ("train", "val", "test")
    buckets: dict[str, list[int]] = {k: [] for k in names}
    for i in range(count):
        u = np.random.default_rng(np.random.SeedSequence([seed, 0x5B17, i])).random()
        buckets[names[int(np.searchsorted(edges, u, side="right"))]].append(i)
    return {k: np.asarray(v, dtype=np.int64) for k, v in buckets.items()}


def split_dataset(dataset: Dataset, seed: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, Dataset]:
    idx = split_indices(len(dataset), seed, fractions)
    return {k: dataset.subset(v, split=k) for k, v in idx.items()}


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def format_dataset(dataset: Dataset) -> str:
    lines: list[str] = []
    for s in dataset.samples:
        lines.append(str(s.n_atoms))
        lines.append(f"energy={_fmt(s.energy)}")
        for z, p, f in zip(s.atomic_numbers, s.positions, s.forces):
            lines.append(" ".join([str(int(z))] + [_fmt(v) for v in p] + [_fmt(v) for v in f]))
    return "".join(line + "\n" for line in lines)


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_bytes(format_dataset(dataset).encode("utf-8"))


def _finite(text: str, lineno: int) -> float:
    try:
        v = float(text)
    except ValueError:
        raise DatasetFormatError(f"not a number: {text!r}", lineno) from None
    if not math.isfinite(v):
        raise DatasetFormatError(f"non-finite value {text!r}", lineno)
    return v


def parse_dataset(text: str, metadata: dict | None = None) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    samples: list[MolecularSample] = []
    i = 0
    while i < len(lines):
        lineno = i + 1
        head = lines[i].strip()
        try:
            n = int(head)
        except ValueError:
            raise DatasetFormatError(f"malformed atom count {head!r}", lineno) from None
        if n < 2:
            raise DatasetFormatError(f"atom count must be >= 2, got {n}", lineno)
        if i + 1 >= len(lines):
            raise DatasetFormatError("missing energy line", lineno + 1)
        eline = lines[i + 1].strip()
        if not eline.startswith("energy="):
            raise DatasetFormatError("expected 'energy=<value>'", lineno + 1)
        energy = _finite(eline[len("energy="):], lineno + 1)
        zs, pos, frc = [], [], []
        for k in range(n):
            j = i + 2 + k
            if j >= len(lines):
                raise DatasetFormatError(f"expected {n} atom lines, found {k}", j + 1)
            fields = lines[j].split()
            if len(fields) != 7:
                raise DatasetFormatError(f"expected 7 fields, found {len(fields)}", j + 1)
            try:
                z = int(fields[0])
            except ValueError:
                raise DatasetFormatError(f"bad atomic number {fields[0]!r}", j + 1) from None
            if z < 1:
                raise DatasetFormatError(f"atomic number must be positive, got {z}", j + 1)
            vals = [_finite(t, j + 1) for t in fields[1:]]
            zs.append(z)
            pos.append(vals[:3])
            frc.append(vals[3:])
        samples.append(MolecularSample(np.array(zs), np.array(pos), energy, np.array(frc)))
        i += 2 + n
    return Dataset(samples, dict(metadata or {}))


def read_dataset(path) -> Dataset:
    text = Path(path).read_bytes().decode("utf-8")
    return parse_dataset(text, {"source": str(path)})
