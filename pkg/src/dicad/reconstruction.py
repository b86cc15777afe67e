"""Severity-conditioned latent reconstruction.

Ties the pieces together for one image: pick a noising depth from the
feature-distance bins, scale the encoded latent to that depth (by default
without injecting noise), run the guided deterministic denoising loop over
a short timestep subsequence, and decode the result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .conditioning import BinTable, FeatureIndex, choose_step
from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    ddim_step,
    forward_sample,
    guided_eps,
    make_subsequence,
)

DEFAULT_GUIDANCE = GuidanceConfig(eta=8.0, sigma=0.0)


@dataclass
class ReconstructionResult:
    """One image's reconstruction along with what produced it.

    ``image`` is always the decoded ``latent``; ``depth`` is the noising
    depth the denoising loop started from. ``distance`` and ``bin_index``
    are present only when the depth was chosen dynamically. ``trace``
    (optional) holds the initial scaled latent followed by the latent
    after every denoising update.
    """

    image: np.ndarray
    latent: np.ndarray
    input_latent: np.ndarray
    depth: int
    distance: float | None = None
    bin_index: int | None = None
    trace: list[np.ndarray] | None = None


def denoise_latent(
    z_start: np.ndarray,
    z_target: np.ndarray,
    depth: int,
    denoiser,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    num_steps: int = 10,
    rng: np.random.Generator | None = None,
    keep_trace: bool = False,
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Run the reverse loop from ``depth`` down to a clean latent.

    Each subsequence step makes one denoiser call, corrects the noise
    estimate toward ``z_target``, and applies the deterministic update
    to the next-lower step (0 at the end).
    """
    steps = make_subsequence(depth, num_steps)
    trace: list[np.ndarray] | None = [z_start.copy()] if keep_trace else None
    z = z_start
    for i in range(len(steps) - 1, -1, -1):
        t_cur = steps[i]
        t_prev = steps[i - 1] if i > 0 else 0
        eps_pred = denoiser.predict(z, t_cur)
        eps_hat = guided_eps(eps_pred, z, z_target, t_cur, schedule, guidance)
        step_cfg = guidance
        if guidance.sigma > 0.0 and t_prev == 0:
            # no variance is available at the terminus; the last update
            # is deterministic even in a stochastic run
            step_cfg = GuidanceConfig(eta=guidance.eta, sigma=0.0)
        noise = None
        if step_cfg.sigma > 0.0:
            noise = rng.standard_normal(z.shape).astype(z.dtype, copy=False)
        z = ddim_step(z, eps_hat, t_cur, t_prev, schedule, step_cfg, noise)
        if keep_trace:
            trace.append(z.copy())
    return z, trace


def _check_stochastic_rng(omega: float, guidance: GuidanceConfig, rng) -> None:
    if (omega > 0.0 or guidance.sigma > 0.0) and rng is None:
        raise ValueError(
            "omega > 0 or sigma > 0 draws fresh noise; pass a numpy Generator as rng"
        )


def _run(
    image: np.ndarray,
    depth: int,
    denoiser,
    codec,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
    omega: float,
    num_steps: int,
    rng: np.random.Generator | None,
    keep_trace: bool,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[np.ndarray] | None]:
    z0 = codec.encode(image)
    eps = None
    if omega > 0.0:
        eps = rng.standard_normal(z0.shape).astype(z0.dtype, copy=False)
    z_start = forward_sample(z0, depth, eps, schedule, omega)
    z_hat, trace = denoise_latent(
        z_start, z0, depth, denoiser, schedule, guidance,
        num_steps=num_steps, rng=rng, keep_trace=keep_trace,
    )
    return codec.decode(z_hat), z_hat, z0, trace


def reconstruct(
    image: np.ndarray,
    denoiser,
    codec,
    extractor,
    index: FeatureIndex,
    table: BinTable,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig = DEFAULT_GUIDANCE,
    omega: float = 0.0,
    num_steps: int = 10,
    block: int = 2,
    round_multiple: int = 10,
    rng: np.random.Generator | None = None,
    keep_trace: bool = False,
    exclude_self: bool = False,
) -> ReconstructionResult:
    """Reconstruct one image with a dynamically chosen noising depth.

    ``exclude_self`` belongs on queries with images that are members of
    the index (see ``choose_step``).
    """
    _check_stochastic_rng(omega, guidance, rng)
    depth, distance, bin_index = choose_step(
        image, extractor, block, index, table, round_multiple,
        exclude_self=exclude_self,
    )
    decoded, z_hat, z0, trace = _run(
        image, depth, denoiser, codec, schedule, guidance, omega,
        num_steps, rng, keep_trace,
    )
    return ReconstructionResult(
        image=decoded, latent=z_hat, input_latent=z0, depth=depth,
        distance=distance, bin_index=bin_index, trace=trace,
    )


def reconstruct_static(
    image: np.ndarray,
    depth: int,
    denoiser,
    codec,
    schedule: NoiseSchedule,
    t_max: int = 80,
    guidance: GuidanceConfig = DEFAULT_GUIDANCE,
    omega: float = 0.0,
    num_steps: int = 10,
    rng: np.random.Generator | None = None,
    keep_trace: bool = False,
) -> ReconstructionResult:
    """Reconstruct with a fixed noising depth, bypassing severity binning."""
    if not 1 <= depth <= t_max:
        raise ValueError(f"fixed depth {depth} outside [1, {t_max}]")
    _check_stochastic_rng(omega, guidance, rng)
    decoded, z_hat, z0, trace = _run(
        image, depth, denoiser, codec, schedule, guidance, omega,
        num_steps, rng, keep_trace,
    )
    return ReconstructionResult(
        image=decoded, latent=z_hat, input_latent=z0, depth=depth, trace=trace,
    )


@dataclass
class Pipeline:
    """Bundle of trained components with the reconstruction settings.

    Convenience wrapper so downstream stages (map fusion, extractor
    adaptation, the CLI) can pass one object around instead of seven.
    """

    denoiser: object
    codec: object
    extractor: object
    index: FeatureIndex
    table: BinTable
    schedule: NoiseSchedule
    guidance: GuidanceConfig = DEFAULT_GUIDANCE
    omega: float = 0.0
    num_steps: int = 10
    block: int = 2
    round_multiple: int = 10

    def reconstruct(
        self,
        image: np.ndarray,
        rng: np.random.Generator | None = None,
        keep_trace: bool = False,
        exclude_self: bool = False,
    ) -> ReconstructionResult:
        return reconstruct(
            image, self.denoiser, self.codec, self.extractor, self.index,
            self.table, self.schedule, guidance=self.guidance, omega=self.omega,
            num_steps=self.num_steps, block=self.block,
            round_multiple=self.round_multiple, rng=rng, keep_trace=keep_trace,
            exclude_self=exclude_self,
        )

    def reconstruct_static(
        self,
        image: np.ndarray,
        depth: int,
        rng: np.random.Generator | None = None,
        keep_trace: bool = False,
    ) -> ReconstructionResult:
        return reconstruct_static(
            image, depth, self.denoiser, self.codec, self.schedule,
            t_max=self.table.t_max, guidance=self.guidance, omega=self.omega,
            num_steps=self.num_steps, rng=rng, keep_trace=keep_trace,
        )
