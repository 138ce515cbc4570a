"""
Analysis Module.

Captures per-block self-attention output features while an image is inverted
and reconstructed, compares two captures step by step with cosine similarity
averaged over denoising sections, and picks the blocks whose features differ
most between a style image and its content counterpart.
"""

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from matplotlib.figure import Figure
from omegaconf import OmegaConf

from embroidery_lora.backbone import Backbone, DenoiserInput, denoise
from embroidery_lora.errors import ContractViolationError
from embroidery_lora.images import ImageArray, check_rgb, quantize
from embroidery_lora.lora import BlockPartition, LoraAdapter

logger = logging.getLogger(__name__)

CSV_DECIMALS = 6
AGGREGATION_ORDER = "section means per pair, then element-wise mean across pairs"


@dataclass
class FeatureTrace:
    """
    Pooled attention outputs ``features[block]`` of shape (T, D_block).

    Row ``i`` is the ``i``-th denoising step of the reconstruction pass, so
    row 0 is the noisiest step.
    """

    block_names: Tuple[str, ...]
    features: Dict[str, np.ndarray]
    image_id: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.block_names = tuple(self.block_names)
        if set(self.features) != set(self.block_names):
            raise ContractViolationError(
                "trace blocks do not match block_names: "
                f"{sorted(set(self.features) ^ set(self.block_names))}"
            )
        steps = None
        for name in self.block_names:
            array = np.asarray(self.features[name], dtype=np.float64)
            if array.ndim != 2:
                raise ContractViolationError(f"trace for block {name} must be (T, D)")
            if steps is None:
                steps = array.shape[0]
            elif array.shape[0] != steps:
                raise ContractViolationError(
                    f"block {name} has {array.shape[0]} steps, expected {steps}"
                )
            if not np.all(np.isfinite(array)):
                raise ContractViolationError(f"trace for block {name} has non-finite values")
            self.features[name] = array

    @property
    def steps(self) -> int:
        return self.features[self.block_names[0]].shape[0]

    def __len__(self) -> int:
        return len(self.block_names) * self.steps

    def dims(self) -> Dict[str, int]:
        return {name: self.features[name].shape[1] for name in self.block_names}


class FeatureRecorder:
    """Attention observer that pools each block's outputs into one vector per step."""

    def __init__(self, layer_blocks: Dict[str, str], block_names: Sequence[str]) -> None:
        self.layer_blocks = layer_blocks
        self.block_names = tuple(block_names)
        self.rows: Dict[str, List[np.ndarray]] = {name: [] for name in self.block_names}
        self._current: Dict[str, List[np.ndarray]] = {}
        self.max_row_sum_error = 0.0

    def begin_step(self) -> None:
        self._current = {name: [] for name in self.block_names}

    def __call__(self, layer_id: str, probs: torch.Tensor, out: torch.Tensor) -> None:
        row_error = float((probs.sum(dim=-1) - 1.0).abs().max())
        self.max_row_sum_error = max(self.max_row_sum_error, row_error)
        block = self.layer_blocks[layer_id]
        self._current[block].append(out.detach().reshape(-1).cpu().numpy())

    def end_step(self) -> None:
        for name in self.block_names:
            parts = self._current.get(name)
            if not parts:
                raise ContractViolationError(f"block {name} produced no attention output")
            self.rows[name].append(np.concatenate(parts))
        self._current = {}

    def trace(self, image_id: str = "", **metadata: Any) -> FeatureTrace:
        features = {name: np.stack(rows) for name, rows in self.rows.items()}
        return FeatureTrace(self.block_names, features, image_id, dict(metadata))


def image_id_of(image: ImageArray) -> str:
    return hashlib.sha256(np.ascontiguousarray(image).tobytes()).hexdigest()[:16]


def invert_reconstruct(
    backbone: Backbone,
    image: ImageArray,
    steps: Optional[int] = None,
    renoise_iters: int = 5,
    prompt: str = "",
    adapter: Optional[LoraAdapter] = None,
    tolerance: float = 1e-4,
    image_id: Optional[str] = None,
) -> Tuple[ImageArray, FeatureTrace]:
    """
    Invert ``image`` to noise with fixed-point refinement, then denoise back.

    Each inversion step starts from the plain DDIM estimate and re-evaluates
    the noise at the current guess ``renoise_iters`` times. The trace is
    recorded during the reconstruction pass. A final fixed-point change above
    ``tolerance`` is logged and stored under ``metadata["warnings"]``.

    Args:
        backbone: Backbone providing codec, scheduler and denoiser
        image: RGB image
        steps: Must equal the scheduler's T when given
        renoise_iters: Fixed-point refinements per inversion step
        prompt: Conditioning prompt shared by every block

    Returns:
        Reconstructed image and its feature trace
    """
    scheduler = backbone.scheduler
    if steps is not None and steps != scheduler.T:
        raise ContractViolationError(
            f"steps={steps} must equal the scheduler's T={scheduler.T}"
        )
    if renoise_iters < 1:
        raise ContractViolationError("renoise_iters must be at least 1")
    rgb = check_rgb(image)
    image_id = image_id or image_id_of(rgb)
    model = backbone.denoiser
    cond = backbone.uniform_cond(backbone.embed(prompt))

    def eps(z: torch.Tensor, t: int, observer: Any = None) -> torch.Tensor:
        return denoise(model, DenoiserInput(z, t, cond), adapter, observer=observer)

    max_residual = 0.0
    with torch.no_grad():
        z = backbone.codec.encode(rgb)
        for t in range(scheduler.T):
            z_prev = z
            z = scheduler.invert_step(z_prev, eps(z_prev, t), t)
            residual = 0.0
            for _ in range(renoise_iters):
                refined = scheduler.invert_step(z_prev, eps(z, t), t)
                residual = float((refined - z).abs().max())
                z = refined
            max_residual = max(max_residual, residual)

        recorder = FeatureRecorder(model.layer_blocks(), model.block_names)
        for t in range(scheduler.T - 1, -1, -1):
            recorder.begin_step()
            noise_pred = eps(z, t, recorder)
            recorder.end_step()
            z = scheduler.step(z, noise_pred, t)
        reconstruction = quantize(backbone.codec.decode(z))

    warnings: List[str] = []
    if max_residual > tolerance:
        message = (
            f"inversion of {image_id} did not converge: fixed-point change "
            f"{max_residual:.3e} > {tolerance:.1e} after {renoise_iters} iterations"
        )
        logger.warning(message)
        warnings.append(message)
    trace = recorder.trace(
        image_id,
        renoise_iters=renoise_iters,
        max_residual=max_residual,
        converged=not warnings,
        warnings=warnings,
        max_row_sum_error=recorder.max_row_sum_error,
    )
    return reconstruction, trace


def _cosine_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise cosine; two zero rows count as identical, one zero row as orthogonal."""
    dot = np.einsum("td,td->t", a, b)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    out = np.zeros_like(dot)
    nonzero = denom > 0
    out[nonzero] = dot[nonzero] / denom[nonzero]
    out[(na == 0) & (nb == 0)] = 1.0
    return np.clip(out, -1.0, 1.0)


def step_similarity(trace_a: FeatureTrace, trace_b: FeatureTrace) -> np.ndarray:
    """(B, T) per-step cosine similarities in canonical block order."""
    if trace_a.block_names != trace_b.block_names:
        raise ContractViolationError("traces have different block sets")
    if trace_a.steps != trace_b.steps:
        raise ContractViolationError(
            f"traces have different step counts: {trace_a.steps} vs {trace_b.steps}"
        )
    if trace_a.dims() != trace_b.dims():
        raise ContractViolationError("traces have different feature dimensions")
    return np.stack(
        [
            _cosine_rows(trace_a.features[name], trace_b.features[name])
            for name in trace_a.block_names
        ]
    )


@dataclass
class SimilarityMatrix:
    """B x S matrix of section-averaged cosine similarities."""

    values: np.ndarray
    block_order: Tuple[str, ...]
    section_size: int
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float64)
        self.block_order = tuple(self.block_order)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.block_order):
            raise ContractViolationError(
                f"similarity values must be ({len(self.block_order)}, S), "
                f"got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ContractViolationError("similarity values must be finite")
        if np.any(np.abs(self.values) > 1.0):
            raise ContractViolationError("similarity values must lie in [-1, 1]")

    @property
    def sections(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape  # type: ignore[return-value]

    def check_section_range(self, section_range: Sequence[int]) -> Tuple[int, int]:
        lo, hi = int(section_range[0]), int(section_range[1])
        if not 0 <= lo < hi <= self.sections:
            raise ContractViolationError(
                f"section range [{lo}, {hi}) must lie within [0, {self.sections})"
            )
        return lo, hi

    def mean_over(self, section_range: Optional[Sequence[int]] = None) -> np.ndarray:
        """Per-block mean over sections ``[lo, hi)``."""
        lo, hi = self.check_section_range(section_range or (0, self.sections))
        return self.values[:, lo:hi].mean(axis=1)

    def to_csv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ",".join(["block"] + [f"s{s}" for s in range(self.sections)])
        lines = [header]
        for name, row in zip(self.block_order, self.values):
            lines.append(",".join([name] + [f"{v:.{CSV_DECIMALS}f}" for v in row]))
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, path: Union[str, Path], section_size: int = 1) -> "SimilarityMatrix":
        lines = Path(path).read_text(encoding="utf-8").strip().splitlines()
        names, rows = [], []
        for line in lines[1:]:
            cells = line.split(",")
            names.append(cells[0])
            rows.append([float(v) for v in cells[1:]])
        return cls(np.array(rows), tuple(names), section_size)


def pair_similarity(
    trace_a: FeatureTrace, trace_b: FeatureTrace, sections: int
) -> SimilarityMatrix:
    """
    Section-averaged cosine similarity of two traces.

    Raises:
        ContractViolationError: If the traces differ in blocks, steps or
            dimensions, or ``sections`` does not divide T
    """
    per_step = step_similarity(trace_a, trace_b)
    steps = per_step.shape[1]
    if sections < 1 or steps % sections:
        raise ContractViolationError(f"sections={sections} must divide T={steps}")
    size = steps // sections
    values = per_step.reshape(len(trace_a.block_names), sections, size).mean(axis=2)
    return SimilarityMatrix(
        np.clip(values, -1.0, 1.0),
        trace_a.block_names,
        size,
        {"pair": [trace_a.image_id, trace_b.image_id]},
    )


def aggregate_reference_set(matrices: Sequence[SimilarityMatrix]) -> SimilarityMatrix:
    """Element-wise mean of per-pair matrices."""
    if not matrices:
        raise ContractViolationError("cannot aggregate an empty set of matrices")
    first = matrices[0]
    for m in matrices[1:]:
        if (
            m.shape != first.shape
            or m.block_order != first.block_order
            or m.section_size != first.section_size
        ):
            raise ContractViolationError(
                f"similarity matrix shape {m.shape} does not match {first.shape}"
            )
    if len(matrices) == 1:
        return first
    values = np.mean(np.stack([m.values for m in matrices]), axis=0)
    return SimilarityMatrix(
        np.clip(values, -1.0, 1.0),
        first.block_order,
        first.section_size,
        {"pairs": len(matrices), "aggregation": AGGREGATION_ORDER},
    )


def rank_blocks(
    matrix: SimilarityMatrix, section_range: Optional[Sequence[int]] = None
) -> List[Tuple[str, float]]:
    """Blocks by ascending mean similarity; ties keep canonical order."""
    scores = matrix.mean_over(section_range)
    order = sorted(range(len(scores)), key=lambda i: (scores[i], i))
    return [(matrix.block_order[i], float(scores[i])) for i in order]


def select_style_blocks(
    matrix: SimilarityMatrix, k: int, section_range: Optional[Sequence[int]] = None
) -> BlockPartition:
    """
    The ``k`` blocks whose features differ most between style and content.

    Raises:
        ContractViolationError: If ``k`` is outside ``[1, B]`` or the section
            range leaves ``[0, S)``
    """
    if not 1 <= k <= len(matrix.block_order):
        raise ContractViolationError(
            f"k={k} must lie in [1, {len(matrix.block_order)}]"
        )
    chosen = [name for name, _ in rank_blocks(matrix, section_range)[:k]]
    return BlockPartition.of(chosen, matrix.block_order)


def render_heatmap(
    matrix: SimilarityMatrix, path: Union[str, Path], title: str = ""
) -> Path:
    """Blocks on the x axis, sections on the y axis."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig = Figure(figsize=(8, 4.5))
    ax = fig.subplots()
    im = ax.imshow(matrix.values.T, aspect="auto", cmap="viridis", origin="lower")
    ax.set_xticks(range(len(matrix.block_order)))
    ax.set_xticklabels(matrix.block_order, rotation=45, ha="right")
    ax.set_yticks(range(matrix.sections))
    ax.set_ylabel("section")
    ax.set_title(title or "Average cosine similarity of self-attention outputs")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    return path


def write_block_manifest(
    path: Union[str, Path],
    matrix: SimilarityMatrix,
    partition: BlockPartition,
    k: int,
    section_range: Sequence[int],
    pairs: Sequence[str] = (),
) -> Path:
    """YAML record of the ranking and the chosen style blocks."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "k": k,
        "section_range": [int(section_range[0]), int(section_range[1])],
        "style_blocks": list(partition.style_blocks),
        "all_blocks": list(partition.all_blocks),
        "ranking": [
            {"block": name, "mean_similarity": round(score, CSV_DECIMALS)}
            for name, score in rank_blocks(matrix, section_range)
        ],
        "aggregation": AGGREGATION_ORDER,
        "pairs": list(pairs),
    }
    OmegaConf.save(OmegaConf.create(manifest), path)
    return path


class StyleSimilarityScorer:
    """
    Style similarity between two images from their reconstruction traces.

    The score is the mean of the section-averaged similarity over
    ``section_range`` and over ``blocks`` (all blocks when empty). Traces are
    cached by image content.
    """

    def __init__(
        self,
        backbone: Backbone,
        sections: int = 10,
        section_range: Sequence[int] = (5, 10),
        renoise_iters: int = 5,
        blocks: Sequence[str] = (),
        prompt: str = "",
    ) -> None:
        self.backbone = backbone
        self.sections = sections
        self.section_range = tuple(section_range)
        self.renoise_iters = renoise_iters
        self.blocks = tuple(blocks)
        self.prompt = prompt
        self._traces: Dict[str, FeatureTrace] = {}

    def trace(self, image: ImageArray) -> FeatureTrace:
        key = image_id_of(check_rgb(image))
        if key not in self._traces:
            _, self._traces[key] = invert_reconstruct(
                self.backbone,
                image,
                renoise_iters=self.renoise_iters,
                prompt=self.prompt,
                image_id=key,
            )
        return self._traces[key]

    def __call__(self, candidate: ImageArray, reference: ImageArray) -> float:
        matrix = pair_similarity(self.trace(candidate), self.trace(reference), self.sections)
        per_block = matrix.mean_over(self.section_range)
        if self.blocks:
            per_block = per_block[[matrix.block_order.index(b) for b in self.blocks]]
        return float(per_block.mean())
