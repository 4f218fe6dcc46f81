"""Gradient inversion engines: pixel baseline, latent baseline and staged feature-domain search."""

import contextlib
import logging
import math
import time
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import torch

from .core import ImageBatch, derive_seed, torch_generator
from .gradmatch import MatchObjective, attack_loss, infer_transform
from .labels import LabelEstimate, extract_single_label_with_note, infer_batch_labels, map_label

log = logging.getLogger(__name__)

METHODS = ("pixel", "latent", "gifd")
LABEL_MODES = ("extract", "infer-batch", "map", "given")


@dataclass
class AttackConfig:
    method: str = "gifd"
    K: int = 3
    # desk-scale radii for the 32x32 generator (base width 16); re-tune with `gifdlab tune-k`
    radii: Optional[List[float]] = field(default_factory=lambda: [150.0, 300.0, 600.0])
    iters: int = 1000
    coarse_iters: int = 100
    lr: float = 0.1
    warmup_frac: float = 1 / 20
    decay_frac: float = 3 / 4
    distance: str = "neg-cosine"
    alpha_tv: float = 1e-4
    alpha_l2: float = 1e-6
    trials: int = 4
    seed: int = 0
    label_mode: str = "extract"
    # ablation switches: project=False drops the l1 ball, select="last" keeps the deepest layer
    project: bool = True
    select: str = "min-loss"
    layer_weighted: bool = False
    infer_defense: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.label_mode not in LABEL_MODES:
            raise ValueError(f"unknown label mode {self.label_mode!r}; choose from {LABEL_MODES}")
        if self.select not in ("min-loss", "last"):
            raise ValueError("select must be 'min-loss' or 'last'")
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.radii is not None:
            self.radii = [float(r) for r in self.radii]
            if any(b < a for a, b in zip(self.radii, self.radii[1:])):
                warnings.warn("l1 radii are not non-decreasing", stacklevel=2)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack keys: {sorted(unknown)}")
        return cls(**d)

    def radius(self, i: int) -> Optional[float]:
        if not self.project:
            return None
        if self.radii is None or len(self.radii) < i:
            raise ValueError(f"no l1 radius configured for layer {i} (radii={self.radii})")
        return self.radii[i - 1]


@dataclass
class StageTrace:
    stage_id: str
    loss_curve: List[float]
    lr_curve: List[float]
    best_loss: float
    best_iter: int
    best_images: torch.Tensor
    features: Optional[torch.Tensor] = None
    center: Optional[torch.Tensor] = None
    radius: Optional[float] = None


@dataclass
class ReconstructionReport:
    final_images: ImageBatch
    chosen_stage: str
    stages: List[StageTrace]
    labels_used: LabelEstimate
    trial_index: int = 0
    trial_losses: List[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    method: str = ""
    config: dict = field(default_factory=dict)
    defense_inferred: str = "identity"
    wall_time_s: float = 0.0
    coarse: Optional["ReconstructionReport"] = None

    @property
    def best_loss(self) -> float:
        return min(s.best_loss for s in self.stages) if self.stages else float("nan")

    def stage(self, stage_id: str) -> StageTrace:
        for s in self.stages:
            if s.stage_id == stage_id:
                return s
        raise KeyError(stage_id)


# ---------------------------------------------------------------------------
# optimizer kernels


def project_l1_ball(v: torch.Tensor, center: torch.Tensor, r: float) -> torch.Tensor:
    """Euclidean projection of ``v`` onto {u : ||u - center||_1 <= r} (sort-based)."""
    if v.shape != center.shape:
        raise ValueError(f"shape mismatch: {tuple(v.shape)} vs {tuple(center.shape)}")
    if r <= 0:
        raise ValueError("radius must be positive")
    d = (v - center).reshape(1, -1)
    return (center.reshape(1, -1) + _project_rows(d, r)).reshape(v.shape).to(v.dtype)


def project_l1_ball_per_sample(v: torch.Tensor, center: torch.Tensor, r: float) -> torch.Tensor:
    """Project every sample (leading dim) onto its own l1 ball of radius r."""
    b = v.shape[0]
    d = (v - center).reshape(b, -1)
    return (center.reshape(b, -1) + _project_rows(d, r)).reshape(v.shape).to(v.dtype)


def _project_rows(d: torch.Tensor, r: float) -> torch.Tensor:
    d64 = d.double()
    a = d64.abs()
    inside = a.sum(dim=1) <= r
    if inside.all():
        return d
    u = torch.sort(a, dim=1, descending=True).values
    css = torch.cumsum(u, dim=1)
    j = torch.arange(1, d.shape[1] + 1, dtype=torch.float64)
    cond = u - (css - r) / j > 0
    rho = cond.to(torch.int64).cumsum(dim=1).argmax(dim=1)  # last True index
    theta = (css.gather(1, rho[:, None]) - r) / (rho[:, None] + 1).double()
    out = torch.sign(d64) * torch.clamp(a - theta, min=0)
    out = torch.where(inside[:, None], d64, out)
    # guard against round-up (in the output dtype) pushing the point marginally outside
    out32 = out.to(d.dtype)
    over = out32.double().abs().sum(dim=1) > r
    if over.any():
        margin = 1 - 4 * torch.finfo(d.dtype).eps
        shrink = torch.where(over, r / out32.double().abs().sum(dim=1), torch.ones_like(theta[:, 0]))
        out32 = (out32.double() * shrink[:, None] * margin).to(d.dtype)
    return out32


@dataclass
class AdamState:
    param: torch.Tensor
    m: torch.Tensor
    v: torch.Tensor
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, param: torch.Tensor, **kw) -> "AdamState":
        p = param.detach().clone()
        return cls(p, torch.zeros_like(p), torch.zeros_like(p), **kw)


def adam_step(state: AdamState, grad: torch.Tensor, lr: float) -> AdamState:
    """One bias-corrected adaptive-moment update; returns a new state."""
    t = state.t + 1
    m = state.beta1 * state.m + (1 - state.beta1) * grad
    v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = m / (1 - state.beta1 ** t)
    v_hat = v / (1 - state.beta2 ** t)
    param = state.param - lr * m_hat / (v_hat.sqrt() + state.eps)
    return replace(state, param=param, m=m, v=v, t=t)


def lr_schedule(t: int, total: int, base_lr: float, warmup_frac: float = 1 / 20, decay_frac: float = 3 / 4) -> float:
    """Linear warm-up from 0, flat, then cosine decay to 0 over the last ``decay_frac`` of the run."""
    if total <= 0:
        return base_lr
    s = t / total
    ramp_up = min(1.0, s / warmup_frac) if warmup_frac > 0 else 1.0
    ramp_down = min(1.0, (1 - s) / decay_frac) if decay_frac > 0 else 1.0
    return base_lr * ramp_up * (0.5 - 0.5 * math.cos(ramp_down * math.pi))


def sphere_project(z: torch.Tensor, seed: int = 0) -> torch.Tensor:
    """Rescale each sample's latent to l2 norm sqrt(k); zero rows are re-drawn."""
    k = z.shape[1]
    norms = z.norm(dim=1, keepdim=True)
    if (norms == 0).any():
        log.warning("zero latent vector encountered; re-randomising from seeded stream")
        fresh = torch.randn(z.shape, generator=torch_generator(seed), dtype=z.dtype)
        z = torch.where(norms == 0, fresh, z)
        norms = z.norm(dim=1, keepdim=True)
    return z / norms * math.sqrt(k)


def spherical_step(z: torch.Tensor, grad: torch.Tensor, lr: float, state: Optional[AdamState] = None, seed: int = 0):
    """Gradient (or Adam, when ``state`` is given) step followed by projection onto the sqrt(k) sphere.

    Returns the new latent, or ``(latent, state)`` when ``state`` is supplied.
    """
    if state is None:
        return sphere_project(z - lr * grad, seed)
    state = adam_step(state, grad, lr)
    state = replace(state, param=sphere_project(state.param, seed))
    return state.param, state


# ---------------------------------------------------------------------------
# attack plumbing


@contextlib.contextmanager
def _frozen(module):
    if module is None:
        yield
        return
    flags = [p.requires_grad for p in module.parameters()]
    was_training = module.training
    module.requires_grad_(False)
    module.eval()
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)
        module.train(was_training)


def resolve_labels(record, cfg: AttackConfig) -> LabelEstimate:
    g = record.shared_gradients
    b = record.batch_size
    if cfg.label_mode == "given":
        return LabelEstimate([int(i) for i in record.victim_batch.labels], "given",
                             "ground-truth labels supplied (ablation only)")
    if cfg.label_mode in ("extract", "map") and b == 1:
        idx, note = extract_single_label_with_note(g)
        return LabelEstimate([idx], "extracted-single", note)
    return infer_batch_labels(g, b)


def build_objective(record, cfg: AttackConfig) -> MatchObjective:
    transform = infer_transform(record.shared_gradients) if cfg.infer_defense else None
    obj = MatchObjective(distance=cfg.distance, alpha_tv=cfg.alpha_tv, alpha_l2=cfg.alpha_l2,
                         layer_weighted=cfg.layer_weighted)
    if transform is not None:
        obj.transform = transform
    return obj


def _optimize_stage(stage_id: str, init: torch.Tensor, render: Callable, loss_fn: Callable, iters: int,
                    cfg: AttackConfig, project: Optional[Callable] = None) -> StageTrace:
    """Adam + schedule over one variable; tracks the best iterate by matching loss."""
    state = AdamState.init(init)
    curve, lrs = [], []
    best = (math.inf, -1, None, None)
    for t in range(iters):
        lr = lr_schedule(t, iters, cfg.lr, cfg.warmup_frac, cfg.decay_frac)
        p = state.param.detach().requires_grad_(True)
        img = render(p)
        total, match = loss_fn(img)
        (grad,) = torch.autograd.grad(total, p)
        m = match.item()
        if not math.isfinite(m):
            raise FloatingPointError(f"non-finite attack loss in stage {stage_id} at iteration {t}")
        curve.append(m)
        lrs.append(lr)
        if m < best[0]:
            best = (m, t, p.detach().clone(), img.detach().clone())
        state = adam_step(replace(state, param=p.detach()), grad, lr)
        if project is not None:
            state = replace(state, param=project(state.param))
    if best[2] is None:
        # zero-iteration stage: score the initial point
        p = init.detach().requires_grad_(True)
        img = render(p)
        _, match = loss_fn(img)
        best = (match.item(), 0, p.detach().clone(), img.detach().clone())
        curve.append(best[0])
        lrs.append(0.0)
    return StageTrace(stage_id, curve, lrs, best[0], best[1], best[3], features=best[2])


def _loss_fn(record, labels, obj):
    model = record.global_model()

    def fn(img):
        return attack_loss(img, labels, model, record.shared_gradients, obj, return_parts=True)

    return fn


def _select(stages: Sequence[StageTrace], rule: str) -> StageTrace:
    if rule == "last":
        return stages[-1]
    best = stages[0]
    for s in stages[1:]:
        if s.best_loss < best.best_loss:
            best = s
    return best


def _best_trial(reports: List[ReconstructionReport]) -> ReconstructionReport:
    losses = [r.trial_losses[0] for r in reports]
    idx = min(range(len(reports)), key=lambda i: (losses[i], i))
    out = reports[idx]
    out.trial_losses = losses
    out.trial_index = idx
    return out


def _final_loss(report: ReconstructionReport) -> float:
    return report.stage(report.chosen_stage).best_loss


# ---------------------------------------------------------------------------
# attacks


def attack_pixel(record, cfg: AttackConfig) -> ReconstructionReport:
    """Optimise dummy pixels directly (no generative prior)."""
    t0 = time.perf_counter()
    labels_est = resolve_labels(record, cfg)
    labels = labels_est.tensor()
    obj = build_objective(record, cfg)
    shape = (record.batch_size,) + tuple(record.global_model().input_shape)
    trials = []
    for trial in range(cfg.trials):
        gen = torch_generator(derive_seed(cfg.seed, "pixel-init", trial))
        x0 = torch.rand(shape, generator=gen)
        stage = _optimize_stage("pixel", x0, lambda x: x, _loss_fn(record, labels, obj), cfg.iters, cfg,
                                project=lambda x: x.clamp(0, 1))
        rep = ReconstructionReport(ImageBatch(stage.best_images, labels.clone()), "pixel", [stage], labels_est,
                                   trial_index=trial, trial_losses=[stage.best_loss], method="pixel")
        trials.append(rep)
    out = _best_trial(trials)
    out.config = cfg.to_dict()
    out.defense_inferred = obj.transform.describe()
    out.wall_time_s = time.perf_counter() - t0
    return out


def _latent_stage(record, gen, cfg: AttackConfig, loss_fn, trial: int, iters: int, cond) -> StageTrace:
    zseed = derive_seed(cfg.seed, "latent-init", trial)
    z0 = sphere_project(torch.randn(record.batch_size, gen.latent_dim, generator=torch_generator(zseed)), zseed)
    return _optimize_stage("latent", z0, lambda z: gen.tail(z, 0, cond), loss_fn, iters, cfg,
                           project=lambda z: sphere_project(z, zseed))


def _layer_stages(gen, cfg: AttackConfig, loss_fn, latent: StageTrace, iters: int, K: int, cond) -> List[StageTrace]:
    stages = []
    with torch.no_grad():
        h = gen.block(latent.features, 0, cond)
    for i in range(1, K + 1):
        r = cfg.radius(i)
        center = h.detach().clone()
        proj = None if r is None else (lambda v, c=center, rr=r: project_l1_ball_per_sample(v, c, rr))
        st = _optimize_stage(f"layer-{i}", center, lambda hi, i=i: gen.tail(hi, i, cond), loss_fn, iters, cfg,
                             project=proj)
        st.center, st.radius = center, r
        stages.append(st)
        if i < gen.depth:
            with torch.no_grad():
                h = gen.block(st.features, i, cond)
    return stages


def _run_gifd_trial(record, gen, cfg: AttackConfig, labels: torch.Tensor, obj: MatchObjective, trial: int,
                    iters: int, K: int, condition: Optional[torch.Tensor] = None) -> List[StageTrace]:
    """One restart: latent stage, then layers 1..K.  ``labels`` enter the gradient
    matching loss; ``condition`` (default: the same labels) drives the generator."""
    loss_fn = _loss_fn(record, labels, obj)
    cond = (labels if condition is None else condition) if gen.conditional else None
    latent = _latent_stage(record, gen, cfg, loss_fn, trial, iters, cond)
    return [latent] + _layer_stages(gen, cfg, loss_fn, latent, iters, K, cond)


def _gifd(record, gen, cfg: AttackConfig, labels_est: LabelEstimate, K: int, iters: int,
          condition: Optional[LabelEstimate] = None) -> ReconstructionReport:
    if K > gen.depth:
        raise ValueError(f"K={K} exceeds generator depth N={gen.depth}")
    labels = labels_est.tensor()
    cond = None if condition is None else condition.tensor()
    obj = build_objective(record, cfg)
    trials = []
    with _frozen(gen):
        for trial in range(cfg.trials):
            stages = _run_gifd_trial(record, gen, cfg, labels, obj, trial, iters, K, cond)
            chosen = _select(stages, cfg.select)
            rep = ReconstructionReport(ImageBatch(chosen.best_images, labels.clone()), chosen.stage_id, stages,
                                       labels_est, trial_index=trial, trial_losses=[chosen.best_loss],
                                       method=cfg.method)
            trials.append(rep)
    out = _best_trial(trials)
    out.config = cfg.to_dict()
    out.defense_inferred = obj.transform.describe()
    return out


def attack_latent(record, gen, cfg: AttackConfig) -> ReconstructionReport:
    """Latent-code search only (spherical Adam over z)."""
    t0 = time.perf_counter()
    out = _gifd(record, gen, replace(cfg, method="latent"), resolve_labels(record, cfg), 0, cfg.iters)
    out.wall_time_s = time.perf_counter() - t0
    return out


def attack_gifd(record, gen, cfg: AttackConfig, labels: Optional[LabelEstimate] = None,
                iters: Optional[int] = None, condition: Optional[LabelEstimate] = None) -> ReconstructionReport:
    """Latent search followed by l1-constrained search over intermediate features 1..K.

    Every trial returns the stage with the lowest gradient matching loss; the
    trial with the lowest such loss wins.  ``condition`` overrides the class
    labels fed to a conditional generator (label mapping).
    """
    t0 = time.perf_counter()
    labels = labels if labels is not None else resolve_labels(record, cfg)
    out = _gifd(record, gen, replace(cfg, method="gifd"), labels, cfg.K, cfg.iters if iters is None else iters,
                condition)
    out.wall_time_s = time.perf_counter() - t0
    return out


def attack_gifd_with_mapping(record, gen, f_m, cfg: AttackConfig) -> ReconstructionReport:
    """Coarse inversion with the extracted label, re-label with ``f_m``, then full inversion."""
    t0 = time.perf_counter()
    initial = resolve_labels(record, replace(cfg, label_mode="extract" if cfg.label_mode == "map" else cfg.label_mode))
    coarse = attack_gifd(record, gen, cfg, labels=initial, iters=cfg.coarse_iters)
    mapped = map_label(coarse.final_images, f_m)
    mapped.initial = list(initial.labels)
    mapped.confidence_note = f"coarse label {initial.labels} remapped to {mapped.labels}"
    # the gradient matching loss keeps the task label; only the generator condition changes
    fine = attack_gifd(record, gen, cfg, labels=initial, condition=mapped)
    fine.labels_used = mapped
    fine.coarse = coarse
    fine.method = "gifd-mapped"
    fine.wall_time_s = time.perf_counter() - t0
    return fine


def run_attack(record, cfg: AttackConfig, gen=None, f_m=None) -> ReconstructionReport:
    if cfg.method == "pixel":
        return attack_pixel(record, cfg)
    if gen is None:
        raise ValueError(f"method {cfg.method!r} needs a generator")
    if cfg.method == "latent":
        return attack_latent(record, gen, cfg)
    if cfg.label_mode == "map":
        if f_m is None:
            raise ValueError("label_mode 'map' needs the mapping classifier f_m")
        return attack_gifd_with_mapping(record, gen, f_m, cfg)
    return attack_gifd(record, gen, cfg)


LADDER = ("gifd-z", "gifd-f", "gifd-e", "gifd")


def ablation_ladder(record, gen, cfg: AttackConfig, variants: Sequence[str] = LADDER) -> dict:
    """The four ablation variants from shared latent stages.

    * ``gifd-z``: latent search only
    * ``gifd-f``: + intermediate layers without the l1 ball, deepest layer returned
    * ``gifd-e``: + min-loss selection over stages
    * ``gifd``: + l1 ball

    Each variant equals the corresponding standalone run with the same config and
    seed (``attack_latent`` / ``attack_gifd`` with ``project`` and ``select``
    switched); sharing only avoids recomputing identical latent and unconstrained
    layer stages.  ``variants`` restricts the output (and the work) to a subset.
    """
    unknown = set(variants) - set(LADDER)
    if unknown:
        raise ValueError(f"unknown ladder variants {sorted(unknown)}; choose from {LADDER}")
    t0 = time.perf_counter()
    labels_est = resolve_labels(record, cfg)
    labels = labels_est.tensor()
    obj = build_objective(record, cfg)
    loss_fn = _loss_fn(record, labels, obj)
    cond = labels if gen.conditional else None
    free_cfg = replace(cfg, project=False)
    per_variant = {name: [] for name in variants}
    with _frozen(gen):
        for trial in range(cfg.trials):
            latent = _latent_stage(record, gen, cfg, loss_fn, trial, cfg.iters, cond)
            free = ball = None
            if {"gifd-f", "gifd-e"} & set(variants):
                free = [latent] + _layer_stages(gen, free_cfg, loss_fn, latent, cfg.iters, cfg.K, cond)
            if "gifd" in variants:
                ball = [latent] + _layer_stages(gen, cfg, loss_fn, latent, cfg.iters, cfg.K, cond)
            for name, stages, rule in (("gifd-z", [latent], "min-loss"), ("gifd-f", free, "last"),
                                       ("gifd-e", free, "min-loss"), ("gifd", ball, "min-loss")):
                if name not in per_variant:
                    continue
                chosen = _select(stages, rule)
                per_variant[name].append(ReconstructionReport(
                    ImageBatch(chosen.best_images, labels.clone()), chosen.stage_id, list(stages), labels_est,
                    trial_index=trial, trial_losses=[chosen.best_loss], method=name))
    out = {}
    variant_cfg = {"gifd-z": replace(cfg, method="latent"), "gifd-f": replace(cfg, project=False, select="last"),
                   "gifd-e": replace(cfg, project=False), "gifd": cfg}
    for name in LADDER:
        if name not in per_variant:
            continue
        rep = _best_trial(per_variant[name])
        rep.config = variant_cfg[name].to_dict()
        rep.defense_inferred = obj.transform.describe()
        rep.wall_time_s = time.perf_counter() - t0
        out[name] = rep
    return out

