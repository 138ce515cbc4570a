"""
Training Module.

Two-stage adapter training against a single reference pair.

Stage 1 alternates a full-adapter step on the content image (content prompt
in every block) with a style-block step on the style image (style prompt in
the style blocks only). Complementary pairs are then generated with the
stage-1 adapter and filtered twice. Stage 2 adds a contrastive step that
pulls the style component of the reference noise decomposition towards that
of a generated pair.
"""

import csv
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from omegaconf import OmegaConf
from tqdm import tqdm

from embroidery_lora import style_suffix
from embroidery_lora.analysis import (
    StyleSimilarityScorer,
    invert_reconstruct,
    pair_similarity,
    select_style_blocks,
)
from embroidery_lora.backbone import Backbone, BlockedDenoiser, DenoiserInput, denoise
from embroidery_lora.config import (
    AnalysisConfig,
    ExperimentConfig,
    PairgenConfig,
    TrainingConfig,
    derive_seed,
)
from embroidery_lora.errors import (
    BackendError,
    BackendUnavailableError,
    ConfigError,
    ContractViolationError,
    DegenerateDecompositionError,
    NonFiniteLossError,
)
from embroidery_lora.images import ImageArray
from embroidery_lora.inference import (
    GenerationMode,
    InferenceRequest,
    apply_style_blocks,
    generate_text,
)
from embroidery_lora.lora import (
    BlockPartition,
    GradFn,
    LoraAdapter,
    LossFn,
    MomentumSGD,
    UpdateSubset,
    autograd_grad,
    init_adapter,
    model_fingerprint,
    save_adapter,
)
from embroidery_lora.pairgen import (
    PairOrigin,
    TrainingPair,
    build_control_signals,
    construct_content,
    save_pair,
)

logger = logging.getLogger(__name__)

# (style prompt, candidate index) -> generated image
ImageGenerator = Callable[[str, int], ImageArray]
# (candidate, reference) -> similarity, higher is more alike
SimilarityScorer = Callable[[ImageArray, ImageArray], float]
# (generated style image, content prompt) -> content image
DesignEmulator = Callable[[ImageArray, str], ImageArray]


@dataclass(frozen=True)
class NoiseDecomposition:
    """Adapter-induced prediction deltas; ``eps_emb_star = eps_emb - eps_des``."""

    eps_des: torch.Tensor
    eps_emb: torch.Tensor
    eps_emb_star: torch.Tensor

    @classmethod
    def from_terms(cls, eps_des: torch.Tensor, eps_emb: torch.Tensor) -> "NoiseDecomposition":
        return cls(eps_des, eps_emb, eps_emb - eps_des)


def route_conditioning(
    partition: BlockPartition, emb_cond: torch.Tensor, des_cond: torch.Tensor
) -> Dict[str, torch.Tensor]:
    """Style blocks get ``emb_cond``; every other block gets ``des_cond``."""
    if emb_cond is None or des_cond is None:
        raise ContractViolationError("both embeddings are required for routing")
    return {
        block: emb_cond if partition.is_style(block) else des_cond
        for block in partition.all_blocks
    }


def _mse(noise: torch.Tensor, pred: torch.Tensor) -> torch.Tensor:
    return ((noise - pred) ** 2).mean()


def loss_des(
    backbone: Backbone,
    adapter: LoraAdapter,
    pair: TrainingPair,
    t: int,
    noise: torch.Tensor,
) -> torch.Tensor:
    """MSE of the noise prediction on the noised content image, content prompt everywhere."""
    z_t = backbone.scheduler.add_noise(backbone.codec.encode(pair.content_image), noise, t)
    cond = backbone.uniform_cond(backbone.embed(pair.prompt_content))
    pred = denoise(backbone.denoiser, DenoiserInput(z_t, t, cond), adapter)
    return _mse(noise, pred)


def loss_emb(
    backbone: Backbone,
    adapter: LoraAdapter,
    pair: TrainingPair,
    t: int,
    noise: torch.Tensor,
    partition: BlockPartition,
) -> torch.Tensor:
    """MSE on the noised style image, style prompt routed to the style blocks."""
    z_t = backbone.scheduler.add_noise(backbone.codec.encode(pair.style_image), noise, t)
    cond = route_conditioning(
        partition,
        backbone.embed(pair.prompt_style),
        backbone.embed(pair.prompt_content),
    )
    pred = denoise(backbone.denoiser, DenoiserInput(z_t, t, cond), adapter)
    return _mse(noise, pred)


def noise_decomposition(
    model: BlockedDenoiser,
    adapter: LoraAdapter,
    z_t_des: torch.Tensor,
    t: int,
    c_des: torch.Tensor,
    c_emb: torch.Tensor,
    partition: Optional[BlockPartition] = None,
) -> NoiseDecomposition:
    """
    Prediction deltas of the adapted model over the base, both on the noised
    content latent, once under the content prompt and once under the style
    prompt. With ``partition`` the style prompt goes to the style blocks only.
    Guidance is not applied.
    """
    blocks = model.block_names
    des_cond = {name: c_des for name in blocks}
    if partition is None:
        emb_cond = {name: c_emb for name in blocks}
    else:
        emb_cond = route_conditioning(partition, c_emb, c_des)
    with torch.no_grad():
        base_des = denoise(model, DenoiserInput(z_t_des, t, des_cond))
        base_emb = denoise(model, DenoiserInput(z_t_des, t, emb_cond))
    eps_des = denoise(model, DenoiserInput(z_t_des, t, des_cond), adapter) - base_des
    eps_emb = denoise(model, DenoiserInput(z_t_des, t, emb_cond), adapter) - base_emb
    return NoiseDecomposition.from_terms(eps_des, eps_emb)


def decompose_pair(
    backbone: Backbone,
    adapter: LoraAdapter,
    pair: TrainingPair,
    t: int,
    noise: torch.Tensor,
    partition: Optional[BlockPartition] = None,
) -> NoiseDecomposition:
    z_t = backbone.scheduler.add_noise(backbone.codec.encode(pair.content_image), noise, t)
    return noise_decomposition(
        backbone.denoiser,
        adapter,
        z_t,
        t,
        backbone.embed(pair.prompt_content),
        backbone.embed(pair.prompt_style),
        partition,
    )


def _cosine(a: torch.Tensor, b: torch.Tensor, what: str) -> torch.Tensor:
    a, b = a.reshape(-1), b.reshape(-1)
    na, nb = a.norm(), b.norm()
    if float(na) == 0.0 or float(nb) == 0.0:
        raise DegenerateDecompositionError(f"{what}: zero-norm noise decomposition term")
    return (a * b).sum() / (na * nb)


def contrastive_loss(
    ref: NoiseDecomposition, gen: NoiseDecomposition, tau: float = 1.0
) -> torch.Tensor:
    """
    ``-log(exp(s_pos) / (exp(s_1) + exp(s_2)))`` with cosine similarities
    scaled by ``1/tau``; the positive pairs the two style components, the
    negatives cross each style component with the other's content component.

    Raises:
        DegenerateDecompositionError: If any term has zero norm
    """
    if ref.eps_emb_star.shape != gen.eps_emb_star.shape:
        raise ContractViolationError("decompositions must have matching shapes")
    s_pos = _cosine(ref.eps_emb_star, gen.eps_emb_star, "positive")
    s_n1 = _cosine(ref.eps_emb_star, gen.eps_des, "negative (ref style, gen content)")
    s_n2 = _cosine(ref.eps_des, gen.eps_emb_star, "negative (ref content, gen style)")
    return -s_pos / tau + torch.logsumexp(torch.stack([s_n1, s_n2]) / tau, dim=0)


def contrastive_from_similarities(
    s_pos: float, s_n1: float, s_n2: float, tau: float = 1.0
) -> float:
    """``contrastive_loss`` evaluated on given similarities."""
    return float(-s_pos / tau + np.logaddexp(s_n1 / tau, s_n2 / tau))


class TimestepSampler:
    """Uniform over ``[0, T)`` or a fixed index, drawn from a seeded generator."""

    def __init__(self, config: TrainingConfig, T: int, generator: torch.Generator) -> None:
        if config.timestep_sampler == "fixed" and not 0 <= config.fixed_timestep < T:
            raise ConfigError(f"training.fixed_timestep must lie in [0, {T})")
        self.mode = config.timestep_sampler
        self.fixed = config.fixed_timestep
        self.T = T
        self.generator = generator

    def __call__(self) -> int:
        if self.mode == "fixed":
            return self.fixed
        return int(torch.randint(self.T, (1,), generator=self.generator))


@dataclass
class StepRecord:
    stage: int
    iteration: int
    step: str
    t: int
    loss: float
    retries: int = 0


@dataclass
class TrainingState:
    """Mutable per-run state shared by the iteration functions."""

    backbone: Backbone
    config: TrainingConfig
    generator: torch.Generator
    sampler: TimestepSampler
    optimizer: MomentumSGD
    grad_fn: GradFn = autograd_grad
    history: List[StepRecord] = field(default_factory=list)
    events: List[str] = field(default_factory=list)
    noise_cache: Dict[Tuple[int, ...], torch.Tensor] = field(default_factory=dict)

    @classmethod
    def create(
        cls, backbone: Backbone, config: TrainingConfig, grad_fn: GradFn = autograd_grad
    ) -> "TrainingState":
        generator = backbone.scheduler.generator("training")
        return cls(
            backbone,
            config,
            generator,
            TimestepSampler(config, backbone.scheduler.T, generator),
            MomentumSGD(config.momentum),
            grad_fn,
        )

    def draw(self, pair: TrainingPair) -> Tuple[int, torch.Tensor]:
        shape = self.backbone.codec.encode(pair.content_image).shape
        t = self.sampler()
        if not self.config.fixed_noise:
            return t, self.backbone.scheduler.draw_noise(shape, self.generator)
        key = tuple(shape)
        if key not in self.noise_cache:
            self.noise_cache[key] = self.backbone.scheduler.draw_noise(shape, self.generator)
        return t, self.noise_cache[key]

    def record(self, message: str) -> None:
        logger.warning(message)
        self.events.append(message)


def _gradient_step(
    state: TrainingState,
    adapter: LoraAdapter,
    partition: BlockPartition,
    loss_fn: LossFn,
    subset: UpdateSubset,
    lr: float,
    records: List[StepRecord],
    label: Tuple[int, int, str, int],
) -> LoraAdapter:
    value, gradient = state.grad_fn(loss_fn, adapter)
    finite = math.isfinite(value) and all(
        bool(torch.isfinite(g.A).all()) and bool(torch.isfinite(g.B).all())
        for g in gradient.values()
    )
    if not finite:
        raise NonFiniteLossError(f"{label[2]} loss is not finite at t={label[3]}")
    stage, iteration, name, t = label
    records.append(StepRecord(stage, iteration, name, t, value))
    return state.optimizer.step(adapter, gradient, partition, subset, lr)


def _guarded(
    state: TrainingState,
    stage: int,
    iteration: int,
    adapter: LoraAdapter,
    steps: Callable[[LoraAdapter, List[StepRecord]], LoraAdapter],
) -> LoraAdapter:
    """Run one iteration; a non-finite loss discards it and re-samples."""
    retries = state.config.max_nan_retries
    for attempt in range(retries + 1):
        velocity = dict(state.optimizer.velocity)
        records: List[StepRecord] = []
        try:
            updated = steps(adapter, records)
        except NonFiniteLossError as e:
            state.optimizer.velocity = velocity
            state.record(
                f"stage {stage} iteration {iteration}: {e}; iteration aborted, "
                f"re-sampling t (attempt {attempt + 1}/{retries + 1})"
            )
            continue
        for rec in records:
            rec.retries = attempt
        state.history.extend(records)
        return updated
    raise NonFiniteLossError(
        f"stage {stage} iteration {iteration}: loss stayed non-finite after "
        f"{retries + 1} attempts"
    )


def stage1_iteration(
    backbone: Backbone,
    adapter: LoraAdapter,
    partition: BlockPartition,
    pair: TrainingPair,
    config: TrainingConfig,
    state: Optional[TrainingState] = None,
    iteration: int = 0,
) -> LoraAdapter:
    """
    Step 1 updates the whole adapter on ``loss_des`` at rate ``eta1``; step 2
    updates the style-block entries on ``loss_emb`` at the same rate.
    """
    state = state or TrainingState.create(backbone, config)

    def steps(current: LoraAdapter, records: List[StepRecord]) -> LoraAdapter:
        t, noise = state.draw(pair)
        current = _gradient_step(
            state,
            current,
            partition,
            lambda a: loss_des(backbone, a, pair, t, noise),
            UpdateSubset.ALL,
            config.eta1,
            records,
            (1, iteration, "des", t),
        )
        if config.resample_noise:
            t, noise = state.draw(pair)
        return _gradient_step(
            state,
            current,
            partition,
            lambda a: loss_emb(backbone, a, pair, t, noise, partition),
            UpdateSubset.STYLE_ONLY,
            config.eta1,
            records,
            (1, iteration, "emb", t),
        )

    return _guarded(state, 1, iteration, adapter, steps)


def stage2_iteration(
    backbone: Backbone,
    adapter: LoraAdapter,
    partition: BlockPartition,
    ref_pair: TrainingPair,
    gen_pairs: Sequence[TrainingPair],
    config: TrainingConfig,
    state: Optional[TrainingState] = None,
    iteration: int = 0,
) -> LoraAdapter:
    """
    One batch of the reference pair and one sampled generated pair: full
    step on ``loss_des``, style step on ``loss_emb`` (both averaged over the
    two pairs, rate ``eta1``), then a style step on ``contrastive_loss`` at
    rate ``eta2``. A degenerate decomposition skips the contrastive step and
    is recorded.
    """
    if not gen_pairs:
        raise ContractViolationError("stage 2 needs at least one generated pair")
    state = state or TrainingState.create(backbone, config)

    def steps(current: LoraAdapter, records: List[StepRecord]) -> LoraAdapter:
        index = int(torch.randint(len(gen_pairs), (1,), generator=state.generator))
        gen = gen_pairs[index]
        batch = (ref_pair, gen)

        t, noise = state.draw(ref_pair)
        current = _gradient_step(
            state,
            current,
            partition,
            lambda a: sum(loss_des(backbone, a, p, t, noise) for p in batch) / 2,
            UpdateSubset.ALL,
            config.eta1,
            records,
            (2, iteration, "des", t),
        )
        if config.resample_noise:
            t, noise = state.draw(ref_pair)
        current = _gradient_step(
            state,
            current,
            partition,
            lambda a: sum(loss_emb(backbone, a, p, t, noise, partition) for p in batch) / 2,
            UpdateSubset.STYLE_ONLY,
            config.eta1,
            records,
            (2, iteration, "emb", t),
        )
        if config.resample_noise:
            t, noise = state.draw(ref_pair)

        def con(a: LoraAdapter) -> torch.Tensor:
            return contrastive_loss(
                decompose_pair(backbone, a, ref_pair, t, noise, partition),
                decompose_pair(backbone, a, gen, t, noise, partition),
                config.tau,
            )

        try:
            return _gradient_step(
                state,
                current,
                partition,
                con,
                UpdateSubset.STYLE_ONLY,
                config.eta2,
                records,
                (2, iteration, "con", t),
            )
        except DegenerateDecompositionError as e:
            state.record(f"stage 2 iteration {iteration}: {e}; contrastive step skipped")
            return current

    return _guarded(state, 2, iteration, adapter, steps)


@dataclass
class ComplementarySet:
    """Generated pairs plus the two ranked selections that produced them."""

    pairs: List[TrainingPair]
    prompts: List[str]
    style_scores: List[float]
    style_selected: List[int]
    dropped: List[int]
    design_scores: Dict[int, float]
    final: List[int]

    def manifest(self) -> Dict[str, Any]:
        return {
            "N": len(self.prompts),
            "prompts": list(self.prompts),
            "style_scores": [round(s, 6) for s in self.style_scores],
            "style_selected": list(self.style_selected),
            "dropped": list(self.dropped),
            "design_scores": {str(i): round(s, 6) for i, s in self.design_scores.items()},
            "final": list(self.final),
        }


def selection_sizes(N: int) -> Tuple[int, int]:
    """Sizes of the style selection and the final design selection."""
    return math.ceil(N / 2), math.ceil(N / 4)


def generate_complementary(
    backbone: Backbone,
    adapter: LoraAdapter,
    partition: BlockPartition,
    reference: TrainingPair,
    prompt_bank: Sequence[str],
    N: int,
    analysis_cfg: Optional[AnalysisConfig] = None,
    pairgen_cfg: Optional[PairgenConfig] = None,
    seed: int = 0,
    generator_fn: Optional[ImageGenerator] = None,
    scorer: Optional[SimilarityScorer] = None,
    emulator: Optional[DesignEmulator] = None,
    eta: float = 0.0,
) -> ComplementarySet:
    """
    Generate ``N`` style images from the prompt bank, keep the ``ceil(N/2)``
    most similar in style to the reference, emulate their designs, then keep
    the ``ceil(N/4)`` designs least similar to the reference design.

    An emulator failure drops that candidate and the next one in style rank
    order takes its place.
    """
    if N < 1:
        raise ContractViolationError("N must be at least 1")
    if not prompt_bank:
        raise ContractViolationError("prompt bank is empty")
    analysis_cfg = analysis_cfg or AnalysisConfig()
    pairgen_cfg = pairgen_cfg or PairgenConfig()
    emb_token = reference.emb_token

    if generator_fn is None:
        view = apply_style_blocks(backbone, adapter, partition)
        size = reference.style_image.shape[0]

        def _generate(prompt: str, index: int) -> ImageArray:
            request = InferenceRequest(
                GenerationMode.TEXT,
                prompt,
                seed=derive_seed(seed, f"complementary:{index}"),
                emb_token=emb_token,
                size=size,
            )
            return generate_text(view, request, eta=eta).image

        generator_fn = _generate

    if scorer is None:
        scorer = StyleSimilarityScorer(
            backbone,
            analysis_cfg.sections,
            analysis_cfg.complementary_sections,
            analysis_cfg.renoise_iters,
            prompt=analysis_cfg.inversion_prompt,
        )
    if emulator is None:

        def _emulate(image: ImageArray, prompt: str) -> ImageArray:
            signals = build_control_signals(
                image, pairgen_cfg.edge_detector, pairgen_cfg.blur_sigma
            )
            return construct_content(image, signals, prompt, pairgen_cfg, seed)

        emulator = _emulate

    n_style, n_final = selection_sizes(N)
    prompts = [prompt_bank[i % len(prompt_bank)] for i in range(N)]
    suffix_prompts = [p + style_suffix(emb_token) for p in prompts]
    images = [generator_fn(p, i) for i, p in enumerate(suffix_prompts)]
    style_scores = [float(scorer(img, reference.style_image)) for img in images]
    style_rank = sorted(range(N), key=lambda i: (-style_scores[i], i))

    kept: List[int] = []
    dropped: List[int] = []
    designs: Dict[int, ImageArray] = {}
    for i in style_rank:
        if len(kept) == n_style:
            break
        try:
            designs[i] = emulator(images[i], prompts[i])
        except (BackendError, BackendUnavailableError) as e:
            logger.warning("Design emulation failed for candidate %d, backfilling: %s", i, e)
            dropped.append(i)
            continue
        kept.append(i)
    if not kept:
        raise BackendError("design emulator", "failed for every complementary candidate")

    design_scores = {i: float(scorer(designs[i], reference.content_image)) for i in kept}
    final = sorted(kept, key=lambda i: (design_scores[i], i))[:n_final]
    pairs = [
        TrainingPair.build(
            images[i],
            designs[i],
            prompts[i],
            prompts[i],
            PairOrigin.GENERATED,
            emb_token,
            index=i,
            style_score=style_scores[i],
            design_score=design_scores[i],
        )
        for i in final
    ]
    logger.info(
        "Complementary selection: %d generated, %d kept by style, %d final",
        N,
        len(kept),
        len(final),
    )
    return ComplementarySet(
        pairs, prompts, style_scores, kept, dropped, design_scores, final
    )


def moving_average(values: Sequence[float], window: int = 5) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return values.copy()
    return np.convolve(values, np.ones(window) / window, mode="valid")


def write_loss_csv(records: Sequence[StepRecord], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["iteration", "step", "t", "loss", "retries"])
        for rec in records:
            writer.writerow([rec.iteration, rec.step, rec.t, repr(rec.loss), rec.retries])
    return path


@dataclass
class TrainingResult:
    adapter: LoraAdapter
    partition: BlockPartition
    complementary: Optional[ComplementarySet]
    history: List[StepRecord]
    events: List[str]
    checkpoints: List[Path]
    artifacts: Dict[str, Path]
    base_fingerprint: str

    def losses(self, stage: int, step: str) -> List[float]:
        return [r.loss for r in self.history if r.stage == stage and r.step == step]


class ContrastiveTrainer:
    """
    Runs stage 1, complementary generation and stage 2 for one reference
    pair, writing checkpoints, loss curves and the complementary pairs under
    ``output_dir`` when one is given.
    """

    def __init__(
        self,
        backbone: Backbone,
        config: ExperimentConfig,
        output_dir: Optional[Path] = None,
        grad_fn: GradFn = autograd_grad,
        generator_fn: Optional[ImageGenerator] = None,
        scorer: Optional[SimilarityScorer] = None,
        emulator: Optional[DesignEmulator] = None,
        progress: bool = True,
    ) -> None:
        self.backbone = backbone
        self.config = config
        self.output_dir = Path(output_dir) if output_dir else None
        self.grad_fn = grad_fn
        self.generator_fn = generator_fn
        self.scorer = scorer
        self.emulator = emulator
        self.progress = progress and sys.stderr.isatty()

    def resolve_partition(self, reference: TrainingPair) -> BlockPartition:
        """Style blocks per ``training.partition_mode``."""
        blocks = self.backbone.block_names
        mode = self.config.training.partition_mode
        if mode == "all":
            return BlockPartition.everything(blocks)
        if mode == "explicit":
            unknown = set(self.config.training.style_blocks) - set(blocks)
            if unknown or not self.config.training.style_blocks:
                raise ConfigError(
                    f"training.style_blocks must name known blocks, got "
                    f"{list(self.config.training.style_blocks)}",
                    list(blocks),
                )
            return BlockPartition.of(self.config.training.style_blocks, blocks)
        analysis = self.config.analysis
        traces = [
            invert_reconstruct(
                self.backbone,
                image,
                renoise_iters=analysis.renoise_iters,
                prompt=analysis.inversion_prompt,
                tolerance=analysis.residual_tolerance,
            )[1]
            for image in (reference.style_image, reference.content_image)
        ]
        matrix = pair_similarity(traces[0], traces[1], analysis.sections)
        return select_style_blocks(matrix, analysis.k, analysis.selection_sections)

    def _bar(self, total: int, desc: str) -> Iterable[int]:
        return tqdm(range(total), desc=desc, disable=not self.progress, leave=False)

    def _checkpoint(
        self, adapter: LoraAdapter, partition: BlockPartition, name: str
    ) -> Optional[Path]:
        if self.output_dir is None:
            return None
        return save_adapter(adapter, self.output_dir / "checkpoints" / name, partition)

    def train(
        self, reference: TrainingPair, partition: Optional[BlockPartition] = None
    ) -> TrainingResult:
        cfg = self.config
        tcfg = cfg.training
        partition = partition or self.resolve_partition(reference)
        logger.info("Style blocks: %s", ", ".join(partition.style_blocks))
        base_fingerprint = model_fingerprint(self.backbone.denoiser)

        adapter = init_adapter(
            self.backbone.denoiser,
            cfg.lora.rank,
            derive_seed(cfg.seed, "adapter"),
            cfg.lora.alpha,
            self.backbone.name,
        )
        state = TrainingState.create(self.backbone, tcfg, self.grad_fn)
        checkpoints: List[Path] = []
        every = max(tcfg.checkpoint_every, 1)

        for it in self._bar(tcfg.stage1_iters, "stage 1"):
            adapter = stage1_iteration(
                self.backbone, adapter, partition, reference, tcfg, state, it
            )
            if (it + 1) % every == 0:
                path = self._checkpoint(adapter, partition, f"stage1_{it + 1:04d}.safetensors")
                if path:
                    checkpoints.append(path)

        complementary = None
        if tcfg.stage2_iters > 0:
            complementary = generate_complementary(
                self.backbone,
                adapter,
                partition,
                reference,
                tcfg.prompt_bank,
                tcfg.N,
                cfg.analysis,
                cfg.pairgen,
                derive_seed(cfg.seed, "complementary"),
                self.generator_fn,
                self.scorer,
                self.emulator,
                cfg.backbone.eta,
            )
            for it in self._bar(tcfg.stage2_iters, "stage 2"):
                adapter = stage2_iteration(
                    self.backbone,
                    adapter,
                    partition,
                    reference,
                    complementary.pairs,
                    tcfg,
                    state,
                    it,
                )
                if (it + 1) % every == 0:
                    path = self._checkpoint(
                        adapter, partition, f"stage2_{it + 1:04d}.safetensors"
                    )
                    if path:
                        checkpoints.append(path)

        if model_fingerprint(self.backbone.denoiser) != base_fingerprint:
            raise ContractViolationError("base model weights changed during training")

        result = TrainingResult(
            adapter,
            partition,
            complementary,
            state.history,
            state.events,
            checkpoints,
            {},
            base_fingerprint,
        )
        if self.output_dir is not None:
            self._write_artifacts(result)
        return result

    def _write_artifacts(self, result: TrainingResult) -> None:
        out = self.output_dir
        assert out is not None
        artifacts = result.artifacts
        artifacts["adapter"] = save_adapter(
            result.adapter, out / "adapter.safetensors", result.partition
        )
        for stage in (1, 2):
            rows = [r for r in result.history if r.stage == stage]
            if rows:
                artifacts[f"losses_stage{stage}"] = write_loss_csv(
                    rows, out / f"losses_stage{stage}.csv"
                )
        if result.complementary is not None:
            comp_dir = out / "complementary"
            for pair in result.complementary.pairs:
                index = pair.metadata["index"]
                save_pair(pair, comp_dir / f"{index:02d}")
            manifest = comp_dir / "complementary.yaml"
            comp_dir.mkdir(parents=True, exist_ok=True)
            OmegaConf.save(OmegaConf.create(result.complementary.manifest()), manifest)
            artifacts["complementary"] = manifest
        if result.events:
            events = out / "training_events.yaml"
            OmegaConf.save(OmegaConf.create({"events": list(result.events)}), events)
            artifacts["training_events"] = events
