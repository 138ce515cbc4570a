"""
LoRA Module.

Per-attention-layer low-rank adapters, the style/content block partition,
masked parameter updates and the safetensors checkpoint format.

Checkpoint layout, for an archive ``adapter.safetensors``:

    adapter.safetensors      flat tensor archive, keys ``<layer key>.lora_A``
                             (rank x d_in) and ``<layer key>.lora_B``
                             (d_out x rank), float64
    adapter.manifest.yaml    sidecar manifest with the fields
        format_version       integer, currently 1
        backbone             backbone registry name
        rank                 adapter rank r
        alpha                LoRA alpha; scale = alpha / rank
        scale                alpha / rank, informational
        block_names          canonical block order of the backbone
        partition            style_blocks and all_blocks, or null
        entries              layer key -> block, a_shape, b_shape
"""

import hashlib
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import (
    Callable,
    Dict,
    Iterable,
    List,
    Mapping,
    MutableMapping,
    NamedTuple,
    Optional,
    Sequence,
    Tuple,
    Union,
)

import torch
from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from embroidery_lora.backbone import LoraDelta, BlockedDenoiser
from embroidery_lora.errors import AdapterError, CheckpointError

logger = logging.getLogger(__name__)

DEFAULT_STYLE_BLOCKS = ("down.1.1", "down.2.0", "up.0.1", "up.0.2")
FORMAT_VERSION = 1
_SUFFIX_A = ".lora_A"
_SUFFIX_B = ".lora_B"


class LoraEntry(NamedTuple):
    """Down projection ``A`` (r x d_in) and up projection ``B`` (d_out x r)."""

    A: torch.Tensor
    B: torch.Tensor


Gradient = Dict[str, LoraEntry]


class UpdateSubset(str, Enum):
    ALL = "all"
    STYLE_ONLY = "style_only"


@dataclass(frozen=True)
class BlockPartition:
    """Style blocks (theta^e) inside the full adapter block set (theta^a)."""

    style_blocks: Tuple[str, ...]
    all_blocks: Tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "style_blocks", tuple(self.style_blocks))
        object.__setattr__(self, "all_blocks", tuple(self.all_blocks))
        if len(set(self.all_blocks)) != len(self.all_blocks):
            raise AdapterError("Partition block names must be unique")
        outside = set(self.style_blocks) - set(self.all_blocks)
        if outside:
            raise AdapterError("Style blocks are not part of the adapter", outside)
        if len(set(self.style_blocks)) != len(self.style_blocks):
            raise AdapterError("Style block names must be unique")

    @classmethod
    def default(cls, all_blocks: Sequence[str]) -> "BlockPartition":
        return cls.of(DEFAULT_STYLE_BLOCKS, all_blocks)

    @classmethod
    def of(cls, style_blocks: Iterable[str], all_blocks: Sequence[str]) -> "BlockPartition":
        """Partition with ``style_blocks`` put into canonical order."""
        chosen = set(style_blocks)
        return cls(tuple(b for b in all_blocks if b in chosen), tuple(all_blocks))

    @classmethod
    def everything(cls, all_blocks: Sequence[str]) -> "BlockPartition":
        return cls(tuple(all_blocks), tuple(all_blocks))

    def is_style(self, block: str) -> bool:
        return block in self.style_blocks

    def to_dict(self) -> Dict[str, List[str]]:
        return {"style_blocks": list(self.style_blocks), "all_blocks": list(self.all_blocks)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Sequence[str]]) -> "BlockPartition":
        return cls(tuple(data["style_blocks"]), tuple(data["all_blocks"]))


@dataclass(eq=False)
class LoraAdapter:
    """
    Low-rank deltas keyed by ``<attention layer>.<projection>``.

    ``blocks`` maps every key to the block that owns its layer, so a
    partition change needs no re-keying.
    """

    entries: Dict[str, LoraEntry]
    rank: int
    alpha: float
    blocks: Dict[str, str]
    backbone: str = "toy"
    block_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        self.entries = dict(sorted(self.entries.items()))
        missing = set(self.entries) - set(self.blocks)
        if missing:
            raise AdapterError("Adapter entries without an owning block", missing)
        for key, entry in self.entries.items():
            if entry.A.dim() != 2 or entry.B.dim() != 2:
                raise AdapterError("Adapter matrices must be 2-D", [key])
            if entry.A.shape[0] != self.rank or entry.B.shape[1] != self.rank:
                raise AdapterError(f"Adapter matrices do not have rank {self.rank}", [key])

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def deltas(self) -> Dict[str, LoraDelta]:
        return {k: LoraDelta(e.A, e.B, self.scale) for k, e in self.entries.items()}

    def delta_weight(self, key: str) -> torch.Tensor:
        entry = self.entries[key]
        return self.scale * (entry.B @ entry.A)

    def keys_in(self, blocks: Iterable[str]) -> List[str]:
        wanted = set(blocks)
        return [k for k in self.entries if self.blocks[k] in wanted]

    def replace_entries(self, entries: Mapping[str, LoraEntry]) -> "LoraAdapter":
        return LoraAdapter(
            dict(entries),
            self.rank,
            self.alpha,
            {k: self.blocks[k] for k in entries},
            self.backbone,
            self.block_names,
        )

    def subset(self, blocks: Iterable[str]) -> "LoraAdapter":
        """Adapter holding only the entries of ``blocks``."""
        return self.replace_entries({k: self.entries[k] for k in self.keys_in(blocks)})

    def clone(self) -> "LoraAdapter":
        return self.replace_entries(
            {
                k: LoraEntry(e.A.detach().clone(), e.B.detach().clone())
                for k, e in self.entries.items()
            }
        )

    def requires_grad_copy(self) -> "LoraAdapter":
        return self.replace_entries(
            {
                k: LoraEntry(
                    e.A.detach().clone().requires_grad_(True),
                    e.B.detach().clone().requires_grad_(True),
                )
                for k, e in self.entries.items()
            }
        )

    def tensors(self) -> Dict[str, torch.Tensor]:
        """Flat archive view: ``<key>.lora_A`` / ``<key>.lora_B``."""
        flat: Dict[str, torch.Tensor] = {}
        for key, entry in self.entries.items():
            flat[f"{key}{_SUFFIX_A}"] = entry.A.detach().contiguous()
            flat[f"{key}{_SUFFIX_B}"] = entry.B.detach().contiguous()
        return flat

    def fingerprint(self) -> str:
        header = f"{self.rank}:{self.alpha!r}:{self.backbone}"
        return tensor_fingerprint(self.tensors(), header)

    def changed_keys(self, other: "LoraAdapter") -> List[str]:
        """Keys whose matrices differ bit-wise from ``other``."""
        return [
            k
            for k, e in self.entries.items()
            if k not in other.entries
            or not torch.equal(e.A, other.entries[k].A)
            or not torch.equal(e.B, other.entries[k].B)
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return (
            self.rank == other.rank
            and self.alpha == other.alpha
            and self.backbone == other.backbone
            and self.blocks == other.blocks
            and list(self.entries) == list(other.entries)
            and not self.changed_keys(other)
        )


def tensor_fingerprint(tensors: Mapping[str, torch.Tensor], header: str = "") -> str:
    """sha256 over sorted names, dtypes, shapes and raw bytes."""
    digest = hashlib.sha256(header.encode("utf-8"))
    for name in sorted(tensors):
        tensor = tensors[name].detach().cpu().contiguous()
        digest.update(f"{name}:{tensor.dtype}:{tuple(tensor.shape)}".encode("utf-8"))
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def model_fingerprint(model: object) -> str:
    """Fingerprint of a module's weights; empty for models without a state dict."""
    state_dict = getattr(model, "state_dict", None)
    return tensor_fingerprint(dict(state_dict())) if callable(state_dict) else ""


def init_adapter(
    model: BlockedDenoiser,
    rank: int,
    seed: int = 0,
    alpha: Optional[float] = None,
    backbone: str = "toy",
) -> LoraAdapter:
    """
    Fresh adapter over every adaptable projection of ``model``.

    A is drawn uniformly in ``[-1/sqrt(d_in), 1/sqrt(d_in)]`` from a generator
    seeded with ``seed``; B is zero, so the adapted model equals the base.

    Raises:
        AdapterError: If the rank is below 1 or exceeds a target dimension
    """
    if rank < 1:
        raise AdapterError(f"Adapter rank must be at least 1, got {rank}")
    targets = model.lora_targets()
    too_small = [k for k, (d_out, d_in) in targets.items() if rank > min(d_out, d_in)]
    if too_small:
        raise AdapterError(f"Rank {rank} exceeds the dimensions of", too_small)

    gen = torch.Generator().manual_seed(seed)
    entries: Dict[str, LoraEntry] = {}
    for key in sorted(targets):
        d_out, d_in = targets[key]
        bound = 1.0 / math.sqrt(d_in)
        A = (torch.rand(rank, d_in, generator=gen, dtype=torch.float64) * 2 - 1) * bound
        entries[key] = LoraEntry(A, torch.zeros(d_out, rank, dtype=torch.float64))
    return LoraAdapter(
        entries,
        rank,
        float(alpha if alpha is not None else rank),
        model.target_blocks(),
        backbone,
        model.block_names,
    )


def _check_gradient_keys(adapter: LoraAdapter, gradient: Mapping[str, LoraEntry]) -> None:
    mismatch = set(adapter.entries) ^ set(gradient)
    if mismatch:
        raise AdapterError("Gradient keys do not match adapter entries", mismatch)


def update_keys(
    adapter: LoraAdapter, partition: BlockPartition, subset: UpdateSubset
) -> List[str]:
    if UpdateSubset(subset) is UpdateSubset.ALL:
        return list(adapter.entries)
    return adapter.keys_in(partition.style_blocks)


def masked_update(
    adapter: LoraAdapter,
    gradient: Mapping[str, LoraEntry],
    partition: BlockPartition,
    subset: UpdateSubset,
    lr: float,
    momentum: float = 0.0,
    velocity: Optional[MutableMapping[str, LoraEntry]] = None,
) -> LoraAdapter:
    """
    One SGD step restricted to ``subset``.

    Entries outside the subset are carried over as the same tensors, so they
    stay bit-identical. With ``momentum > 0`` the heavy-ball buffers in
    ``velocity`` are updated in place for the stepped keys only.

    Raises:
        AdapterError: If gradient keys differ from the adapter's
    """
    _check_gradient_keys(adapter, gradient)
    if lr == 0:
        return adapter.clone()
    stepped = set(update_keys(adapter, partition, subset))
    entries: Dict[str, LoraEntry] = {}
    with torch.no_grad():
        for key, entry in adapter.entries.items():
            if key not in stepped:
                entries[key] = LoraEntry(entry.A.detach(), entry.B.detach())
                continue
            grad = gradient[key]
            if momentum > 0 and velocity is not None:
                prev = velocity.get(key)
                if prev is None:
                    grad = LoraEntry(grad.A.clone(), grad.B.clone())
                else:
                    grad = LoraEntry(momentum * prev.A + grad.A, momentum * prev.B + grad.B)
                velocity[key] = grad
            entries[key] = LoraEntry(
                entry.A.detach() - lr * grad.A, entry.B.detach() - lr * grad.B
            )
    return adapter.replace_entries(entries)


class MomentumSGD:
    """Heavy-ball SGD over adapter entries; one velocity buffer per key."""

    def __init__(self, momentum: float = 0.9) -> None:
        self.momentum = momentum
        self.velocity: Dict[str, LoraEntry] = {}

    def step(
        self,
        adapter: LoraAdapter,
        gradient: Mapping[str, LoraEntry],
        partition: BlockPartition,
        subset: UpdateSubset,
        lr: float,
    ) -> LoraAdapter:
        return masked_update(
            adapter, gradient, partition, subset, lr, self.momentum, self.velocity
        )


LossFn = Callable[[LoraAdapter], torch.Tensor]
GradFn = Callable[[LossFn, LoraAdapter], Tuple[float, Gradient]]


def autograd_grad(loss_fn: LossFn, adapter: LoraAdapter) -> Tuple[float, Gradient]:
    """Loss value and reverse-mode gradient with respect to every entry."""
    leaves = adapter.requires_grad_copy()
    loss = loss_fn(leaves)
    params = [t for e in leaves.entries.values() for t in (e.A, e.B)]
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    gradient: Gradient = {}
    for i, (key, entry) in enumerate(leaves.entries.items()):
        gA, gB = grads[2 * i], grads[2 * i + 1]
        gradient[key] = LoraEntry(
            torch.zeros_like(entry.A) if gA is None else gA.detach(),
            torch.zeros_like(entry.B) if gB is None else gB.detach(),
        )
    return float(loss.detach()), gradient


def finite_difference_grad(
    loss_fn: LossFn,
    adapter: LoraAdapter,
    eps: float = 1e-6,
    keys: Optional[Iterable[str]] = None,
) -> Tuple[float, Gradient]:
    """
    Central finite differences, element by element.

    Only ``keys`` (default: all) are differenced; the rest get zero gradients.
    Slow, meant for toy-sized checks of the autograd path.
    """
    selected = set(adapter.entries if keys is None else keys)
    with torch.no_grad():
        base = float(loss_fn(adapter))
        gradient: Gradient = {}
        for key, entry in adapter.entries.items():
            parts = []
            for which in (0, 1):
                tensor = entry[which]
                grad = torch.zeros_like(tensor)
                if key in selected:
                    flat = grad.view(-1)
                    for idx in range(tensor.numel()):
                        values = []
                        for sign in (1.0, -1.0):
                            bumped = tensor.clone()
                            bumped.view(-1)[idx] += sign * eps
                            swapped = (
                                LoraEntry(bumped, entry.B)
                                if which == 0
                                else LoraEntry(entry.A, bumped)
                            )
                            trial = adapter.replace_entries(
                                {**adapter.entries, key: swapped}
                            )
                            values.append(float(loss_fn(trial)))
                        flat[idx] = (values[0] - values[1]) / (2 * eps)
                parts.append(grad)
            gradient[key] = LoraEntry(parts[0], parts[1])
    return base, gradient


def manifest_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(f"{path.stem}.manifest.yaml")


def save_adapter(
    adapter: LoraAdapter,
    path: Union[str, Path],
    partition: Optional[BlockPartition] = None,
) -> Path:
    """
    Write the adapter archive and its sidecar manifest.

    Returns:
        Path of the archive
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_file(adapter.tensors(), str(path))
    manifest = {
        "format_version": FORMAT_VERSION,
        "backbone": adapter.backbone,
        "rank": adapter.rank,
        "alpha": adapter.alpha,
        "scale": adapter.scale,
        "block_names": list(adapter.block_names),
        "partition": partition.to_dict() if partition else None,
        "entries": {
            key: {
                "block": adapter.blocks[key],
                "a_shape": list(entry.A.shape),
                "b_shape": list(entry.B.shape),
            }
            for key, entry in adapter.entries.items()
        },
    }
    OmegaConf.save(OmegaConf.create(manifest), manifest_path(path))
    logger.debug("Saved adapter with %d entries to %s", len(adapter.entries), path)
    return path


class Checkpoint(NamedTuple):
    adapter: LoraAdapter
    partition: Optional[BlockPartition]
    backbone: str


def _read_manifest(path: Path) -> Dict:
    sidecar = manifest_path(path)
    if not sidecar.exists():
        raise CheckpointError(f"Adapter manifest not found: {sidecar}")
    try:
        data = OmegaConf.to_container(OmegaConf.load(sidecar))
    except (OmegaConfBaseException, ValueError) as e:
        raise CheckpointError(f"Adapter manifest is not valid YAML: {sidecar}") from e
    if not isinstance(data, dict) or data.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"Unsupported adapter manifest: {sidecar}")
    for required in ("rank", "alpha", "entries", "backbone"):
        if required not in data:
            raise CheckpointError(f"Adapter manifest lacks '{required}': {sidecar}")
    return data


def load_checkpoint(
    path: Union[str, Path], model: Optional[BlockedDenoiser] = None
) -> Checkpoint:
    """
    Load an adapter archive, its manifest and the stored partition.

    Nothing is returned unless every entry checks out.

    Args:
        path: Archive path
        model: If given, keys and block naming must match this denoiser

    Raises:
        CheckpointError: On a missing, corrupt, incomplete or foreign archive
    """
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Adapter archive not found: {path}")
    manifest = _read_manifest(path)
    try:
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"Adapter archive is corrupt: {path}") from e

    malformed = sorted(
        name for name in tensors if not name.endswith((_SUFFIX_A, _SUFFIX_B))
    )
    if malformed:
        raise CheckpointError(f"Malformed archive entry '{malformed[0]}'")

    expected = manifest["entries"]
    names = {f"{k}{s}" for k in expected for s in (_SUFFIX_A, _SUFFIX_B)}
    missing = names - set(tensors)
    if missing:
        raise CheckpointError("Archive is missing entries", missing)
    unexpected = set(tensors) - names
    if unexpected:
        raise CheckpointError("Archive has entries absent from its manifest", unexpected)

    block_names = tuple(manifest.get("block_names") or ())
    if model is not None:
        if block_names and block_names != model.block_names:
            raise CheckpointError(
                "Archive uses a different block naming scheme",
                sorted(set(block_names) ^ set(model.block_names)),
            )
        targets = model.lora_targets()
        foreign = set(expected) - set(targets)
        if foreign:
            raise CheckpointError(
                "Archive targets layers the model does not have", foreign
            )
        resized = sorted(
            key
            for key, info in expected.items()
            if (info["b_shape"][0], info["a_shape"][1]) != tuple(targets[key])
        )
        if resized:
            raise CheckpointError("Archive entry shapes do not match the model", resized)

    rank = int(manifest["rank"])
    entries: Dict[str, LoraEntry] = {}
    blocks: Dict[str, str] = {}
    for key in sorted(expected):
        info = expected[key]
        A, B = tensors[f"{key}{_SUFFIX_A}"], tensors[f"{key}{_SUFFIX_B}"]
        if (
            list(A.shape) != list(info["a_shape"])
            or list(B.shape) != list(info["b_shape"])
            or A.shape[0] != rank
            or B.shape[1] != rank
        ):
            raise CheckpointError(f"Malformed archive entry '{key}'")
        if block_names and info["block"] not in block_names:
            raise CheckpointError(f"Malformed archive entry '{key}'")
        entries[key] = LoraEntry(A, B)
        blocks[key] = info["block"]

    adapter = LoraAdapter(
        entries, rank, float(manifest["alpha"]), blocks, str(manifest["backbone"]), block_names
    )
    partition = manifest.get("partition")
    return Checkpoint(
        adapter,
        BlockPartition.from_dict(partition) if partition else None,
        adapter.backbone,
    )


def load_adapter(
    path: Union[str, Path], model: Optional[BlockedDenoiser] = None
) -> LoraAdapter:
    return load_checkpoint(path, model).adapter
