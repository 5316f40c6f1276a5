"""The N + 2 layer stack: prompts, per-layer denoising, fusion and geometry.

Layer 0 reconstructs the source, layers ``1..N`` each carry one object with
its conflict region suppressed, and layer ``N + 1`` is the canvas that
receives geometric mappings and the transparency-weighted fusion.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import Substrate, TokenSet
from .decomposition import (
    TK_FRACTION,
    TQ_FRACTION,
    ConflictReport,
    RemovalSchedule,
    aggregate_attention,
    decompose,
    range_warnings,
)
from .fusion import TransparencyField, fuse, init_transparency, optimize_transparency
from .geometry import GeometricOp, move_map, resize_map, shift
from .grid import ROLE_NOISE, ParameterError, SeededRng, StateError, as_grid, as_mask
from .gridio import digest
from .schedule import LatentState, NoiseSchedule, cfg_combine, ddim_invert, ddim_step


@dataclass
class ObjectSpec:
    source_tokens: tuple
    edit_tokens: tuple
    mask: np.ndarray = field(repr=False)
    move: tuple | None = None
    resize: float | None = None

    def geometric_op(self, index: int) -> GeometricOp | None:
        if self.move is not None:
            return GeometricOp("move", index, int(self.move[0]), int(self.move[1]))
        if self.resize is not None:
            return GeometricOp("resize", index, scale=float(self.resize))
        return None


@dataclass
class PanopticRegion:
    mask: np.ndarray = field(repr=False)
    # token whose embedding paints this region in a synthesised source
    token: int | None = None


@dataclass
class EditScenario:
    height: int
    width: int
    source_prompt: tuple
    edit_prompt: tuple
    objects: list
    panoptic: list
    channels: int = 32
    steps: int = 50
    beta_start: float = 0.00085
    beta_end: float = 0.012
    eta: float = 0.3
    k: float = 5.0
    # ``None`` means a fixed fraction of ``steps`` (20 and 40 at 50 steps)
    t_query: int | None = None
    t_key: int | None = None
    guidance: float = 7.5
    inversion_guidance: float = 1.0
    inversion_refine: int = 1
    tau_step: float = 1e-2
    tau_iterations: int = 10
    tau_seed: float = 0.05
    tau_band: int = 2
    containment: float = 0.5
    cross_gain: float = 1.0
    out_gain: float = 0.02
    temb_gain: float = 0.05
    seed: int = 0
    source: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.t_query is None:
            self.t_query = max(1, round(TQ_FRACTION * self.steps))
        if self.t_key is None:
            self.t_key = max(1, round(TK_FRACTION * self.steps))

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def validate(self) -> list:
        """Raise :class:`ParameterError` listing every invalid field; return warnings."""
        errors = []
        shape = (self.height, self.width)
        if self.height < 1 or self.width < 1 or self.channels < 1:
            errors.append("grid: height, width and channels must be positive")
        if self.steps < 1:
            errors.append("schedule.steps: must be positive")
        for name, prompt in (("prompts.source", self.source_prompt), ("prompts.edit", self.edit_prompt)):
            if len(set(prompt)) != len(prompt):
                errors.append(f"{name}: duplicate token ids")
        for i, obj in enumerate(self.objects):
            for t in obj.source_tokens:
                if t not in self.source_prompt:
                    errors.append(f"objects[{i}].source_tokens: token {t} not in source prompt")
            for t in obj.edit_tokens:
                if t not in self.edit_prompt:
                    errors.append(f"objects[{i}].edit_tokens: token {t} not in edit prompt")
            try:
                m = as_mask(obj.mask, f"objects[{i}].mask", binary=True, shape=shape)
                if not m.any():
                    errors.append(f"objects[{i}].mask: empty")
            except ParameterError as exc:
                errors.append(str(exc))
            if obj.move is not None and obj.resize is not None:
                errors.append(f"objects[{i}]: give either move or resize, not both")
            try:
                op = obj.geometric_op(i)
                if op is not None and op.kind == "move":
                    op.check(self.height, self.width)
            except ParameterError as exc:
                errors.append(f"objects[{i}]: {exc}")
        pan = []
        for j, region in enumerate(self.panoptic):
            try:
                pan.append(as_mask(region.mask, f"panoptic[{j}].mask", binary=True, shape=shape))
            except ParameterError as exc:
                errors.append(str(exc))
        if pan and len(pan) == len(self.panoptic) and np.any(np.sum(pan, axis=0) > 1):
            errors.append("panoptic: masks overlap")
        if not 0 < self.eta < 1:
            errors.append("hyperparameters.eta: must lie in (0, 1)")
        for name in ("t_query", "t_key"):
            if not 1 <= getattr(self, name) <= self.steps:
                errors.append(f"hyperparameters.{name}: must lie in [1, steps]")
        if self.tau_step <= 0:
            errors.append("hyperparameters.tau_step: must be positive")
        if self.source is not None:
            src = np.asarray(self.source)
            if src.shape != (self.height, self.width, self.channels):
                errors.append(f"grid.source: shape {src.shape} does not match grid")
        if errors:
            raise ParameterError("; ".join(errors))
        return range_warnings(self.eta, self.k, self.t_query, self.t_key, self.steps)


@dataclass(frozen=True)
class LayerSpec:
    layer_id: int
    prompt: TokenSet
    m_con: np.ndarray = field(repr=False)
    removal: tuple | None = None


@dataclass
class LayerStack:
    n: int
    specs: list
    latents: list
    seed: int
    substrate: Substrate
    sched: NoiseSchedule
    guidance: float
    ops: list = field(default_factory=list)
    rates: dict = field(default_factory=dict)
    tau_iterations: int = 10
    freeze_tau: bool = False
    workers: int = 1
    pool: ThreadPoolExecutor | None = field(default=None, repr=False)

    @property
    def step(self) -> int:
        steps = {s.step for s in self.latents}
        if len(steps) != 1:
            raise StateError(f"layers are out of step: {sorted(steps)}")
        return steps.pop()

    @property
    def canvas_id(self) -> int:
        return self.n + 1


def containment(m_inner, m_outer, ratio: float = 0.5, with_flag: bool = False):
    """Whether at least ``ratio`` of ``m_inner`` lies inside ``m_outer``."""
    m_inner = np.asarray(m_inner) > 0
    m_outer = np.asarray(m_outer) > 0
    if m_inner.shape != m_outer.shape:
        raise ParameterError(f"containment: shapes {m_inner.shape} vs {m_outer.shape}")
    size = m_inner.sum()
    if size == 0:
        return (False, True) if with_flag else False
    inside = bool((m_inner & m_outer).sum() / size >= ratio)
    return (inside, False) if with_flag else inside


def build_layer_prompts(source: TokenSet, edit: TokenSet, edit_token_sets, object_masks,
                        conflict_masks, ratio: float = 0.5) -> list:
    """Prompts for layers ``0..N+1``.

    Object layer ``i`` drops the edit tokens of every other object whose mask
    lies inside its conflict region; the canvas prompt is empty.
    """
    prompts = [source]
    for m_con in conflict_masks:
        drop = set()
        for j, m_o in enumerate(object_masks):
            if containment(m_o, m_con, ratio):
                drop.update(edit_token_sets[j])
        prompts.append(edit.without(drop))
    prompts.append(edit.without(edit.tokens))
    return prompts


def _evaluate_layer(stack: LayerStack, layer_id: int, step_index: int):
    spec = stack.specs[layer_id]
    state = stack.latents[layer_id]
    r_q, r_k = stack.rates[layer_id][step_index - 1] if layer_id in stack.rates else (0.0, 0.0)
    rng = SeededRng(stack.seed, (layer_id, step_index))
    phi_self, phi_cond, _ = stack.substrate.features(state.latent, spec.prompt, spec.m_con, r_q, r_k, rng)
    return phi_cond, phi_self


def denoise_all_layers(stack: LayerStack, tf: TransparencyField, order=None):
    """Advance every layer by one denoising step.

    Layers are evaluated independently (concurrently when
    ``stack.workers > 1``); then geometry and fusion write into the canvas
    features, transparencies are refined, guidance is applied and each latent
    takes one DDIM step.  Returns the new stack and transparency field.
    """
    pos = stack.step
    if pos < 1:
        raise StateError("stack is already at the clean position")
    step_index = stack.sched.steps - pos + 1
    ids = list(range(stack.n + 2)) if order is None else list(order)
    if sorted(ids) != list(range(stack.n + 2)):
        raise ParameterError(f"evaluation order {ids} is not a permutation of the layers")

    if stack.pool is not None:
        results = dict(zip(ids, stack.pool.map(lambda i: _evaluate_layer(stack, i, step_index), ids)))
    elif stack.workers > 1:
        with ThreadPoolExecutor(max_workers=stack.workers) as pool:
            results = dict(zip(ids, pool.map(lambda i: _evaluate_layer(stack, i, step_index), ids)))
    else:
        results = {i: _evaluate_layer(stack, i, step_index) for i in ids}

    n, c = stack.n, stack.canvas_id
    cond = [results[i][0] for i in range(n + 2)]
    uncond = [results[i][1] for i in range(n + 2)]
    canvas_c, canvas_u = cond[c], uncond[c]

    tau_prev = tf.tau
    for op in stack.ops:
        i = op.obj
        if op.kind == "move":
            canvas_c = move_map(canvas_c, tau_prev[i], op.dh, op.dw)
            canvas_u = move_map(canvas_u, tau_prev[i], op.dh, op.dw)
        else:
            canvas_c = resize_map(cond[i + 1], canvas_c, tau_prev[i], op.scale)
            canvas_u = resize_map(uncond[i + 1], canvas_u, tau_prev[i], op.scale)

    fused_ids, shifts = _fusion_members(stack)
    if fused_ids:
        tau_f = _to_fusion_space(tf.tau, fused_ids, shifts)
        feats_c = np.stack([_shift_feats(cond[i + 1], shifts[i]) for i in fused_ids])
        feats_u = np.stack([_shift_feats(uncond[i + 1], shifts[i]) for i in fused_ids])
        if not stack.freeze_tau and stack.tau_iterations > 0:
            sub = TransparencyField(tau_f, tf.iterations, tf.step_size)
            sub = optimize_transparency(sub, feats_c, canvas_c, cond[0], iterations=stack.tau_iterations)
            tau = tf.tau.copy()
            tau[fused_ids] = _from_fusion_space(sub.tau, fused_ids, shifts)
            tf = TransparencyField(tau, sub.iterations, sub.step_size)
            tau_f = sub.tau
        canvas_c = fuse(tau_f, feats_c, canvas_c)
        canvas_u = fuse(tau_f, feats_u, canvas_u)
    cond[c], uncond[c] = canvas_c, canvas_u

    sub = stack.substrate
    latents = []
    for i in range(n + 2):
        eps = cfg_combine(sub.project(uncond[i], pos), sub.project(cond[i], pos), stack.guidance)
        latents.append(ddim_step(stack.latents[i], eps, stack.sched))
    return replace(stack, latents=latents), tf


def _fusion_members(stack: LayerStack):
    resized = {op.obj for op in stack.ops if op.kind == "resize"}
    shifts = {i: (0, 0) for i in range(stack.n)}
    for op in stack.ops:
        if op.kind == "move":
            shifts[op.obj] = (op.dh, op.dw)
    return [i for i in range(stack.n) if i not in resized], shifts


def _shift_feats(x, d):
    return x if d == (0, 0) else shift(x, *d)


def _to_fusion_space(tau, ids, shifts):
    return np.stack([_shift_feats(tau[i], shifts[i]) for i in ids])


def _from_fusion_space(tau_f, ids, shifts):
    return np.stack([_shift_feats(t, (-shifts[i][0], -shifts[i][1])) for t, i in zip(tau_f, ids)])


@dataclass
class PipelineOutput:
    canvas: np.ndarray = field(repr=False)
    layers: list = field(repr=False)
    transparency: np.ndarray = field(repr=False)
    overlap: np.ndarray = field(repr=False)
    report: ConflictReport = field(repr=False)
    prompts: list = field(repr=False)
    source: np.ndarray = field(repr=False)
    inverted: np.ndarray = field(repr=False)
    manifest: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False)
    specs: list = field(default_factory=list, repr=False)


def synthesize_source(scenario: EditScenario, substrate: Substrate) -> np.ndarray:
    """Seeded source latent whose regions resemble their tokens' embeddings.

    Background is weak Gaussian noise; each panoptic region with a token and
    each object mask adds that token's (unit-RMS) embedding, so the
    cross-attention of the substrate localises the objects.
    """
    h, w, d = scenario.height, scenario.width, scenario.channels
    gen = SeededRng(scenario.seed, (ROLE_NOISE, 0)).generator()
    z0 = 0.5 * gen.standard_normal((h, w, d))

    def paint(mask, tokens):
        if not tokens:
            return
        e = substrate.tokens(tokens).embeddings.mean(axis=0)
        e = e / np.sqrt(np.mean(e**2))
        z0[np.asarray(mask) > 0] += e

    for region in scenario.panoptic:
        if region.token is not None:
            paint(region.mask, [region.token])
    for obj in scenario.objects:
        paint(obj.mask, list(obj.source_tokens))
    return z0


def _maps_by_token(collected, h, w):
    # collected: per step, a list holding one (H*W, T) map
    return [step_maps[0][:, :-1].reshape(h, w, -1) for step_maps in collected if step_maps]


def run_pipeline(scenario: EditScenario, workers: int = 1, order=None, tau_override=None,
                 record_history: bool = False) -> PipelineOutput:
    """Invert, decompose, edit every layer and fuse; returns all final grids.

    ``tau_override`` pins the transparencies (``(N, H, W)``) and disables
    their optimisation.  ``order`` permutes layer evaluation within each step.
    """
    timings = {}
    t0 = time.perf_counter()
    warns = scenario.validate()
    h, w, d = scenario.height, scenario.width, scenario.channels
    n = scenario.n_objects
    sched = NoiseSchedule.scaled_linear(scenario.steps, scenario.beta_start, scenario.beta_end)
    substrate = Substrate(d, scenario.seed, scenario.cross_gain, scenario.out_gain, scenario.temb_gain)
    z0 = as_grid(scenario.source, "source") if scenario.source is not None else synthesize_source(scenario, substrate)
    t_s = substrate.tokens(scenario.source_prompt)
    t_e = substrate.tokens(scenario.edit_prompt)
    empty_mask = np.zeros((h, w))
    timings["setup"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    inv_rng = SeededRng(scenario.seed, (0, 0))

    def invert_denoiser(latent, pos):
        phi_self, phi_cond, maps = substrate.features(latent, t_s, empty_mask, 0.0, 0.0, inv_rng)
        eps = cfg_combine(substrate.project(phi_self, pos), substrate.project(phi_cond, pos),
                          scenario.inversion_guidance)
        return eps, maps

    inverted, collected = ddim_invert(z0, invert_denoiser, sched, refine=scenario.inversion_refine)
    timings["inversion"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    maps = _maps_by_token(collected, h, w)
    object_masks = [np.asarray(o.mask, dtype=np.float64) for o in scenario.objects]
    aggregated = []
    for obj in scenario.objects:
        cols = [t_s.index(t) for t in obj.source_tokens]
        aggregated.append(aggregate_attention(maps, cols) if cols and maps else np.zeros((h, w)))
    report = decompose(aggregated, [p.mask for p in scenario.panoptic], object_masks, scenario.eta)
    prompts = build_layer_prompts(t_s, t_e, [o.edit_tokens for o in scenario.objects], object_masks,
                                  report.masks, scenario.containment)
    timings["decomposition"] = time.perf_counter() - t0

    rq = RemovalSchedule(scenario.k, scenario.t_query).rates(sched)
    rk = RemovalSchedule(scenario.k, scenario.t_key).rates(sched)
    pair = list(zip(rq.tolist(), rk.tolist()))
    canvas_mask = np.clip(np.sum(object_masks, axis=0), 0, 1) if n else empty_mask
    specs = [LayerSpec(0, prompts[0], empty_mask)]
    specs += [LayerSpec(i + 1, prompts[i + 1], report.masks[i], (rq, rk)) for i in range(n)]
    specs.append(LayerSpec(n + 1, prompts[n + 1], canvas_mask, (rq, rk)))
    ops = [op for i, o in enumerate(scenario.objects) if (op := o.geometric_op(i)) is not None]

    stack = LayerStack(
        n=n, specs=specs, latents=[LatentState(sched.steps, inverted.latent.copy()) for _ in range(n + 2)],
        seed=scenario.seed, substrate=substrate, sched=sched, guidance=scenario.guidance, ops=ops,
        rates={i: pair for i in range(1, n + 2)}, tau_iterations=scenario.tau_iterations,
        freeze_tau=tau_override is not None, workers=workers,
    )
    if tau_override is not None:
        tf = TransparencyField(np.asarray(tau_override, dtype=np.float64).reshape(n, h, w).copy(),
                               step_size=scenario.tau_step)
    elif n:
        tf = init_transparency(object_masks, seed_value=scenario.tau_seed, band=scenario.tau_band)
        tf.step_size = scenario.tau_step
    else:
        tf = TransparencyField(np.zeros((0, h, w)), step_size=scenario.tau_step)

    t0 = time.perf_counter()
    history = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    stack.pool = pool
    try:
        while stack.step > 0:
            stack, tf = denoise_all_layers(stack, tf, order=order)
            if record_history:
                history.append(tf.report())
    finally:
        if pool is not None:
            pool.shutdown()
    timings["denoising"] = time.perf_counter() - t0

    finals = [s.latent for s in stack.latents]
    manifest = {
        "hyperparameters": scenario_hyperparameters(scenario),
        "seed": scenario.seed,
        "inputs": scenario_inputs(scenario),
        "objects": n,
        "layers": n + 2,
        "workers": workers,
        "warnings": warns,
        "tau_step_final": tf.step_size,
        "tau_iterations_total": tf.iterations,
        "timings": timings,
    }
    return PipelineOutput(
        canvas=finals[-1], layers=finals, transparency=tf.report(), overlap=tf.overlap,
        report=report, prompts=[list(p.tokens) for p in prompts], source=z0,
        inverted=inverted.latent, manifest=manifest, history=history, specs=specs,
    )


HYPERPARAMETER_FIELDS = (
    "height", "width", "channels", "steps", "beta_start", "beta_end", "eta", "k", "t_query", "t_key",
    "guidance", "inversion_guidance", "inversion_refine", "tau_step", "tau_iterations", "tau_seed",
    "tau_band", "containment", "cross_gain", "out_gain", "temb_gain",
)


def scenario_hyperparameters(scenario: EditScenario) -> dict:
    return {name: getattr(scenario, name) for name in HYPERPARAMETER_FIELDS}


def scenario_inputs(scenario: EditScenario) -> dict:
    """Prompts, per-object settings and digests of every input array."""
    def mask_digest(m):
        return digest(np.ascontiguousarray(m, dtype="<f8").tobytes())

    return {
        "source_prompt": list(scenario.source_prompt),
        "edit_prompt": list(scenario.edit_prompt),
        "objects": [
            {"source_tokens": list(o.source_tokens), "edit_tokens": list(o.edit_tokens),
             "move": list(o.move) if o.move is not None else None, "resize": o.resize,
             "mask": mask_digest(o.mask)}
            for o in scenario.objects
        ],
        "panoptic": [{"token": p.token, "mask": mask_digest(p.mask)} for p in scenario.panoptic],
        "source": mask_digest(scenario.source) if scenario.source is not None else None,
    }
