"""Miniature multi-block message-passing potential with a FinalMLP and direct force head.

Layout of a forward pass::

    f1:  h0 = atom_table[Z],  m0 = SiLU([h_s, h_r, rbf] W + b)        (embedding)
    fk:  m  = MLP([m, h_s, h_r, rbf]);  h = h + MLP(sum_s env * m)     (k = 1..b-1)
    f  = concat(h0, h1, ..., h_{b-1})                                  (n x d*b)
    g  = SiLU-linear stack of m layers, g1: d*b -> d
    E  = sum_i  g_i w_E + b_E
    F_i = sum_{j in N(i)} phi(g_i, g_j, m_ij) * env_ij * u_ji

Checkpoint files are little-endian: ``BFCK``, u32 version, the config
(u32 fields with an f64 cutoff), u32 tensor count, then per tensor a u32
name length, UTF-8 name, u32 ndim, u64 dims, u8 dtype tag (0 = float32)
and the raw payload.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import EdgeList, MolecularSample, build_edges
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "LossWeights",
    "Checkpoint",
    "GraphBatch",
    "FeatureBundle",
    "Prediction",
    "CheckpointError",
    "BadMagicError",
    "VersionMismatchError",
    "ManifestMismatchError",
    "TruncatedCheckpointError",
    "manifest",
    "init_checkpoint",
    "glorot",
    "make_graph",
    "collate",
    "forward",
    "forward_features",
    "predict",
    "energy_force_loss",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "parse_checkpoint",
    "as_tensors",
    "radial_basis",
    "block_manifest",
    "group_of",
]

MAGIC = b"BFCK"
VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    b: int = 7  # total blocks, embedding included
    m: int = 5  # FinalMLP depth
    d: int = 32
    d_e: int = 16
    n_rbf: int = 8
    cutoff: float = 1.6
    species_count: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.b < 2:
            raise ValueError("b must be >= 2 (embedding plus one interaction block)")
        if self.m < 1:
            raise ValueError("m must be >= 1")
        if min(self.d, self.d_e, self.n_rbf, self.species_count) < 1:
            raise ValueError("d, d_e, n_rbf and species_count must be >= 1")
        if not self.cutoff > 0:
            raise ValueError("cutoff must be positive")
        if not 0 <= self.seed < 2**32:
            raise ValueError("seed must fit in an unsigned 32-bit integer")

    @property
    def interaction_blocks(self) -> int:
        return self.b - 1


@dataclass(frozen=True)
class LossWeights:
    alpha_E: float = 1.0
    alpha_F: float = 10.0

    def __post_init__(self):
        if self.alpha_E < 0 or self.alpha_F < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.alpha_E == 0 and self.alpha_F == 0:
            raise ValueError("loss weights cannot both be zero")


def block_manifest(config: ModelConfig, k: int) -> list[tuple[str, tuple[int, ...]]]:
    d, de, nr = config.d, config.d_e, config.n_rbf
    p = f"block{k}"
    return [
        (f"{p}.edge1.weight", (de + 2 * d + nr, de)),
        (f"{p}.edge1.bias", (de,)),
        (f"{p}.edge2.weight", (de, de)),
        (f"{p}.edge2.bias", (de,)),
        (f"{p}.node1.weight", (de, d)),
        (f"{p}.node1.bias", (d,)),
        (f"{p}.node2.weight", (d, d)),
        (f"{p}.node2.bias", (d,)),
    ]


def manifest(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list implied by the config."""
    d, de, nr = config.d, config.d_e, config.n_rbf
    out = [
        ("embedding.atoms", (config.species_count, d)),
        ("embedding.edge.weight", (2 * d + nr, de)),
        ("embedding.edge.bias", (de,)),
    ]
    for k in range(1, config.b):
        out += block_manifest(config, k)
    for i in range(1, config.m + 1):
        fan_in = d * config.b if i == 1 else d
        out += [(f"mlp{i}.weight", (fan_in, d)), (f"mlp{i}.bias", (d,))]
    out += [
        ("head.energy.weight", (d, 1)),
        ("head.energy.bias", (1,)),
        ("head.force1.weight", (2 * d + de, d)),
        ("head.force1.bias", (d,)),
        ("head.force2.weight", (d, 1)),
        ("head.force2.bias", (1,)),
    ]
    return out


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class Checkpoint:
    config: ModelConfig
    tensors: "OrderedDict[str, np.ndarray]"

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def validate(self) -> None:
        expected = manifest(self.config)
        if [k for k, _ in expected] != list(self.tensors):
            raise ManifestMismatchError("tensor names do not match the config manifest")
        for name, shape in expected:
            if self.tensors[name].shape != shape:
                raise ManifestMismatchError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))


def glorot(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in, fan_out = shape[0], shape[-1]
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


def init_checkpoint(config: ModelConfig) -> Checkpoint:
    """Glorot-uniform weights drawn in manifest order from ``config.seed``; zero biases."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x1417]))
    tensors = OrderedDict()
    for name, shape in manifest(config):
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = glorot(rng, shape)
    return Checkpoint(config, tensors)


# --------------------------------------------------------------------- graphs


@dataclass
class GraphBatch:
    """One or more molecular graphs as a single disjoint graph."""

    species: np.ndarray  # (N,) zero-based species index
    senders: np.ndarray
    receivers: np.ndarray
    rbf: np.ndarray  # (E, n_rbf), envelope applied
    envelope: np.ndarray  # (E, 1)
    unit_vectors: np.ndarray  # (E, 3)
    atom_sample: np.ndarray  # (N,) sample index of every atom
    atoms_per_sample: np.ndarray  # (S,)
    energy: np.ndarray  # (S,) targets
    forces: np.ndarray  # (N, 3) targets

    @property
    def n_atoms(self) -> int:
        return int(self.species.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    @property
    def n_samples(self) -> int:
        return int(self.atoms_per_sample.shape[0])


def radial_basis(distances: np.ndarray, cutoff: float, n_rbf: int) -> tuple[np.ndarray, np.ndarray]:
    """Gaussians centred uniformly inside (0, cutoff), width cutoff/n_rbf, times a cosine envelope."""
    r = np.asarray(distances, dtype=np.float64)[:, None]
    centers = cutoff * np.arange(1, n_rbf + 1) / (n_rbf + 1)
    width = cutoff / n_rbf
    env = np.where(r < cutoff, 0.5 * (np.cos(np.pi * r / cutoff) + 1.0), 0.0)
    return np.exp(-(((r - centers) / width) ** 2)) * env, env


def make_graph(sample: MolecularSample, config: ModelConfig, edges: EdgeList | None = None) -> GraphBatch:
    species = sample.atomic_numbers - 1
    if np.any(species < 0) or np.any(species >= config.species_count):
        raise ValueError(f"atomic numbers must lie in 1..{config.species_count}")
    if edges is None:
        edges = build_edges(sample, config.cutoff)
    if len(edges) == 0:
        raise ValueError("sample has no edges within the cutoff")
    rbf, env = radial_basis(edges.distances, config.cutoff, config.n_rbf)
    n = sample.n_atoms
    return GraphBatch(
        species=species,
        senders=edges.senders,
        receivers=edges.receivers,
        rbf=rbf,
        envelope=env,
        unit_vectors=edges.unit_vectors,
        atom_sample=np.zeros(n, dtype=np.int64),
        atoms_per_sample=np.array([n]),
        energy=np.array([sample.energy]),
        forces=sample.forces,
    )


def collate(graphs: list[GraphBatch]) -> GraphBatch:
    if len(graphs) == 1:
        return graphs[0]
    offsets = np.cumsum([0] + [g.n_atoms for g in graphs])
    sample_offsets = np.cumsum([0] + [g.n_samples for g in graphs])
    return GraphBatch(
        species=np.concatenate([g.species for g in graphs]),
        senders=np.concatenate([g.senders + o for g, o in zip(graphs, offsets)]),
        receivers=np.concatenate([g.receivers + o for g, o in zip(graphs, offsets)]),
        rbf=np.concatenate([g.rbf for g in graphs]),
        envelope=np.concatenate([g.envelope for g in graphs]),
        unit_vectors=np.concatenate([g.unit_vectors for g in graphs]),
        atom_sample=np.concatenate([g.atom_sample + o for g, o in zip(graphs, sample_offsets)]),
        atoms_per_sample=np.concatenate([g.atoms_per_sample for g in graphs]),
        energy=np.concatenate([g.energy for g in graphs]),
        forces=np.concatenate([g.forces for g in graphs]),
    )


# -------------------------------------------------------------------- forward


@dataclass
class FeatureBundle:
    block_node_features: list[Tensor]
    block_edge_features: list[Tensor]
    concatenated: Tensor
    partition_width: int


@dataclass
class Prediction:
    energy: Tensor  # (S, 1)
    forces: Tensor  # (N, 3)
    features: FeatureBundle
    mlp_layer_outputs: list[Tensor]


def as_tensors(checkpoint: Checkpoint, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in checkpoint.tensors.items()}


def _linear(x: Tensor, p: dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, p[prefix + ".weight"]), p[prefix + ".bias"])


def forward(
    config: ModelConfig,
    params: dict[str, Tensor],
    batch: GraphBatch,
    watch_features: bool = False,
    concatenated_override: np.ndarray | None = None,
) -> Prediction:
    """Run the model on a collated batch.

    ``watch_features`` turns the concatenated features into a fresh leaf
    that requires grad, so its gradient can be read after a backward pass
    even when the parameters themselves are frozen.
    ``concatenated_override`` replaces f(x) before the FinalMLP.
    """
    s, r = batch.senders, batch.receivers
    n = batch.n_atoms
    rbf = Tensor(batch.rbf)
    env = Tensor(batch.envelope)

    h = T.gather(params["embedding.atoms"], batch.species)
    m = T.silu(_linear(T.concat([T.gather(h, s), T.gather(h, r), rbf]), params, "embedding.edge"))
    nodes = [h]
    edges: list[Tensor] = []
    for k in range(1, config.b):
        p = f"block{k}"
        x = T.concat([m, T.gather(h, s), T.gather(h, r), rbf])
        m = _linear(T.silu(_linear(x, params, p + ".edge1")), params, p + ".edge2")
        agg = T.scatter_add(T.mul(m, env), r, n)
        h = T.add(h, _linear(T.silu(_linear(agg, params, p + ".node1")), params, p + ".node2"))
        nodes.append(h)
        edges.append(m)

    f = T.concat(nodes)
    if concatenated_override is not None:
        f = Tensor(concatenated_override, requires_grad=watch_features)
    elif watch_features:
        f = Tensor(f.data, requires_grad=True)
    bundle = FeatureBundle(nodes, edges, f, config.d)

    g = f
    mlp_outputs = []
    for i in range(1, config.m + 1):
        g = T.silu(_linear(g, params, f"mlp{i}"))
        mlp_outputs.append(g)

    atom_e = _linear(g, params, "head.energy")
    energy = T.scatter_add(atom_e, batch.atom_sample, batch.n_samples)

    xf = T.concat([T.gather(g, s), T.gather(g, r), m])
    phi = _linear(T.silu(_linear(xf, params, "head.force1")), params, "head.force2")
    vec = T.mul(T.mul(phi, env), Tensor(batch.unit_vectors))
    forces = T.scatter_add(vec, r, n)
    return Prediction(energy, forces, bundle, mlp_outputs)


def energy_force_loss(pred: Prediction, batch: GraphBatch, weights: LossWeights) -> tuple[Tensor, Tensor, Tensor]:
    """(L0, L_E, L_F): per-atom-normalised energy L1 and per-component force L1."""
    inv_n = Tensor(1.0 / batch.atoms_per_sample[:, None])
    loss_e = T.l1_loss(T.mul(pred.energy, inv_n), batch.energy[:, None] * inv_n.data)
    loss_f = T.l1_loss(pred.forces, batch.forces)
    total = T.add(T.mul(loss_e, weights.alpha_E), T.mul(loss_f, weights.alpha_F))
    return total, loss_e, loss_f


def forward_features(checkpoint: Checkpoint, sample: MolecularSample, edges: EdgeList | None = None) -> FeatureBundle:
    batch = make_graph(sample, checkpoint.config, edges)
    return forward(checkpoint.config, as_tensors(checkpoint), batch).features


def predict(
    checkpoint: Checkpoint,
    sample: MolecularSample,
    edges: EdgeList | None = None,
    loss_weights: LossWeights = LossWeights(),
) -> tuple[Prediction, float]:
    batch = make_graph(sample, checkpoint.config, edges)
    pred = forward(checkpoint.config, as_tensors(checkpoint), batch)
    loss, _, _ = energy_force_loss(pred, batch, loss_weights)
    return pred, loss.item()


# ---------------------------------------------------------------- persistence


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


_CONFIG_FIELDS = [f.name for f in fields(ModelConfig)]


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    checkpoint.validate()
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    cfg = asdict(checkpoint.config)
    for name in _CONFIG_FIELDS:
        out += struct.pack("<d" if name == "cutoff" else "<I", cfg[name])
    out += struct.pack("<I", len(checkpoint.tensors))
    for name, arr in checkpoint.tensors.items():
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += struct.pack("<B", 0)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    return bytes(out)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(checkpoint))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes, config: ModelConfig | None = None) -> Checkpoint:
    rd = _Reader(buf)
    if rd.take(4) != MAGIC:
        raise BadMagicError("bad magic: not a checkpoint file")
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise VersionMismatchError(f"unsupported checkpoint version {version}")
    values = {}
    for name in _CONFIG_FIELDS:
        (values[name],) = rd.unpack("<d" if name == "cutoff" else "<I")
    stored = ModelConfig(**values)
    expected = config if config is not None else stored
    (count,) = rd.unpack("<I")
    tensors = OrderedDict()
    for _ in range(count):
        (nlen,) = rd.unpack("<I")
        name = rd.take(nlen).decode("utf-8")
        (ndim,) = rd.unpack("<I")
        shape = rd.unpack(f"<{ndim}Q")
        (dtype,) = rd.unpack("<B")
        if dtype != 0:
            raise CheckpointError(f"{name}: unknown dtype tag {dtype}")
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
        tensors[name] = arr
    if rd.pos != len(buf):
        raise CheckpointError("trailing bytes after the last tensor")
    ckpt = Checkpoint(expected, tensors)
    names = [k for k, _ in manifest(expected)]
    if len(tensors) != len(names) or list(tensors) != names:
        raise ManifestMismatchError("tensor names or count do not match the expected manifest")
    ckpt.validate()
    return ckpt


def load_checkpoint(path, config: ModelConfig | None = None) -> Checkpoint:
    """Read a checkpoint; ``config`` forces validation against a different manifest."""
    return parse_checkpoint(Path(path).read_bytes(), config)


def with_config(checkpoint: Checkpoint, **changes) -> ModelConfig:
    return replace(checkpoint.config, **changes)
