"""Episode storage, replay buffers, chunk sampling, and the on-disk trajectory format.

Episodes hold image observations (uint8, HxWxC), continuous actions in [-1, 1],
per-step scalar rewards, a domain label, and an optimality tag.  The binary
episode container ("DACE") is self-describing: a JSON header lists the named
arrays followed by their raw little-endian payloads, so files are readable
from any language.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DACE"
FORMAT_VERSION = 1

EXPERT_DOMAIN = 0
AGENT_DOMAIN = 1


class EpisodeError(ValueError):
    """An episode violates its structural invariants."""


class FormatError(ValueError):
    """A .dace file is malformed; message carries the byte offset."""


class EmptySourceError(RuntimeError):
    """No episode in the store is long enough to sample the requested chunk."""


class OptimalityTag(str, enum.Enum):
    EXPERT = "expert"
    NOVICE = "novice"
    AGENT = "agent"


@dataclass(frozen=True)
class DomainLabel:
    """Index into the domain set plus its one-hot encoding."""

    index: int
    num_domains: int = 2

    def __post_init__(self):
        if not 0 <= self.index < self.num_domains:
            raise ValueError(f"domain index {self.index} out of [0, {self.num_domains})")

    @property
    def one_hot(self) -> np.ndarray:
        v = np.zeros(self.num_domains, dtype=np.float32)
        v[self.index] = 1.0
        return v


@dataclass
class Episode:
    observations: np.ndarray  # (T, H, W, C) uint8
    actions: np.ndarray       # (T, A) float32, components in [-1, 1]
    rewards: np.ndarray       # (T,) float32
    domain: DomainLabel
    optimality_tag: OptimalityTag
    seed: int = 0

    def __post_init__(self):
        self.observations = np.asarray(self.observations)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        self.validate()

    def validate(self) -> None:
        if self.observations.ndim != 4 or self.observations.dtype != np.uint8:
            raise EpisodeError("observations must be (T,H,W,C) uint8")
        if self.actions.ndim != 2:
            raise EpisodeError("actions must be (T,A)")
        if self.rewards.ndim != 1:
            raise EpisodeError("rewards must be (T,)")
        T = self.observations.shape[0]
        if T < 1:
            raise EpisodeError("episode must have T >= 1 steps")
        if self.actions.shape[0] != T or self.rewards.shape[0] != T:
            raise EpisodeError(
                f"length mismatch: {T} observations, {self.actions.shape[0]} actions, "
                f"{self.rewards.shape[0]} rewards"
            )
        if self.optimality_tag in (OptimalityTag.EXPERT, OptimalityTag.NOVICE):
            if self.domain.index != EXPERT_DOMAIN:
                raise EpisodeError("expert/novice episodes must carry domain index 0")

    def __len__(self) -> int:
        return self.observations.shape[0]


class EpisodeStore:
    """Append-only episode store with FIFO eviction at capacity."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._episodes: list[Episode] = []
        self._frozen = False

    def freeze(self) -> None:
        """Mark read-only; used for the expert/novice stores after dataset load."""
        self._frozen = True

    def append(self, ep: Episode) -> None:
        if self._frozen:
            raise RuntimeError("store is read-only")
        ep.validate()
        self._episodes.append(ep)
        if len(self._episodes) > self.capacity:
            self._episodes.pop(0)

    def __len__(self) -> int:
        return len(self._episodes)

    def __getitem__(self, idx: int) -> Episode:
        return self._episodes[idx]

    def __iter__(self):
        return iter(self._episodes)


def append_episode(store: EpisodeStore, ep: Episode) -> EpisodeStore:
    store.append(ep)
    return store


@dataclass
class ReplayBufferTriple:
    """The agent / expert / novice episode stores used during training."""

    agent: EpisodeStore
    expert: EpisodeStore
    novice: EpisodeStore

    @classmethod
    def with_capacity(cls, capacity: int) -> "ReplayBufferTriple":
        return cls(EpisodeStore(capacity), EpisodeStore(capacity), EpisodeStore(capacity))


@dataclass
class ChunkBatch:
    observations: np.ndarray  # (B, L, H, W, C) uint8
    actions: np.ndarray       # (B, L, A) float32
    rewards: np.ndarray       # (B, L) float32
    domains: np.ndarray       # (B, D) one-hot float32
    source_tags: list[OptimalityTag]
    # provenance for spot-checking chunks against their source episodes
    episode_indices: np.ndarray = field(default=None)  # (B,) int
    offsets: np.ndarray = field(default=None)          # (B,) int

    @property
    def batch_size(self) -> int:
        return self.observations.shape[0]

    @property
    def length(self) -> int:
        return self.observations.shape[1]


def sample_chunks(store: EpisodeStore, batch: int, length: int,
                  rng: np.random.Generator) -> ChunkBatch:
    """Sample `batch` contiguous length-`length` chunks, uniform over (episode, offset).

    Episodes shorter than `length` are excluded.  Deterministic given the rng state.
    """
    eligible = [(i, len(store[i]) - length + 1) for i in range(len(store))
                if len(store[i]) >= length]
    if not eligible:
        raise EmptySourceError(f"no episode of length >= {length} in store of {len(store)}")
    ep_ids = np.array([i for i, _ in eligible])
    counts = np.array([c for _, c in eligible], dtype=np.float64)
    probs = counts / counts.sum()

    chosen = rng.choice(len(ep_ids), size=batch, p=probs)
    offsets = np.array([rng.integers(0, counts[c]) for c in chosen], dtype=np.int64)

    obs, acts, rews, doms, tags = [], [], [], [], []
    for c, off in zip(chosen, offsets):
        ep = store[ep_ids[c]]
        obs.append(ep.observations[off:off + length])
        acts.append(ep.actions[off:off + length])
        rews.append(ep.rewards[off:off + length])
        doms.append(ep.domain.one_hot)
        tags.append(ep.optimality_tag)
    return ChunkBatch(
        observations=np.stack(obs),
        actions=np.stack(acts),
        rewards=np.stack(rews),
        domains=np.stack(doms),
        source_tags=tags,
        episode_indices=ep_ids[chosen],
        offsets=offsets,
    )


# ---------------------------------------------------------------------------
# On-disk format: magic "DACE" | u32 version | u64 header length | JSON header
# | raw little-endian arrays in header order.
# ---------------------------------------------------------------------------

_DTYPES = {"u8": np.uint8, "f32": np.float32}
_DTYPE_NAMES = {np.dtype(np.uint8): "u8", np.dtype(np.float32): "f32"}


def write_episode(path, ep: Episode) -> None:
    arrays = [
        ("observations", ep.observations),
        ("actions", ep.actions),
        ("rewards", ep.rewards),
    ]
    header = {
        "arrays": [
            {"name": n, "dtype": _DTYPE_NAMES[a.dtype], "shape": list(a.shape)}
            for n, a in arrays
        ],
        "domain_index": ep.domain.index,
        "num_domains": ep.domain.num_domains,
        "optimality_tag": ep.optimality_tag.value,
        "seed": ep.seed,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<Q", len(hdr)))
        f.write(hdr)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a).astype(a.dtype, copy=False).tobytes())


def read_episode(path) -> Episode:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic at byte 0: {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version} at byte 4")
    (hdr_len,) = struct.unpack_from("<Q", data, 8)
    off = 16
    if len(data) < off + hdr_len:
        raise FormatError(f"truncated header at byte {len(data)} (need {off + hdr_len})")
    try:
        header = json.loads(data[off:off + hdr_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"bad JSON header at byte {off}: {e}") from e
    off += hdr_len

    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(_DTYPES[spec["dtype"]]).newbyteorder("<")
        n_bytes = int(np.prod(spec["shape"])) * dt.itemsize
        if len(data) < off + n_bytes:
            raise FormatError(
                f"truncated payload for '{spec['name']}' at byte {len(data)} "
                f"(need {off + n_bytes})"
            )
        arrays[spec["name"]] = np.frombuffer(
            data[off:off + n_bytes], dtype=dt
        ).reshape(spec["shape"]).astype(_DTYPES[spec["dtype"]])
        off += n_bytes

    return Episode(
        observations=arrays["observations"],
        actions=arrays["actions"],
        rewards=arrays["rewards"],
        domain=DomainLabel(header["domain_index"], header["num_domains"]),
        optimality_tag=OptimalityTag(header["optimality_tag"]),
        seed=header["seed"],
    )


# ---------------------------------------------------------------------------
# Dataset directory layout: <root>/<split>/episode_%06d.dace + manifest.json
# ---------------------------------------------------------------------------

def write_dataset(out_dir, episodes: list[Episode], extra_manifest: dict | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    returns = []
    for i, ep in enumerate(episodes):
        write_episode(out / f"episode_{i:06d}.dace", ep)
        returns.append(float(ep.rewards.sum()))
    manifest = {
        "count": len(episodes),
        "observation_shape": list(episodes[0].observations.shape[1:]) if episodes else None,
        "action_dim": int(episodes[0].actions.shape[1]) if episodes else None,
        "returns": returns,
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_dataset(in_dir, capacity: int | None = None, freeze: bool = True) -> EpisodeStore:
    in_dir = Path(in_dir)
    paths = sorted(in_dir.glob("episode_*.dace"))
    store = EpisodeStore(capacity or max(len(paths), 1))
    for p in paths:
        store.append(read_episode(p))
    if freeze:
        store.freeze()
    return store
