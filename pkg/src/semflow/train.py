"""Adam optimization of the adaptation layers on synthetic pair datasets.

Only the adaptation blocks train; the feature provider and all matching
hyperparameters stay frozen. Each iteration draws a batch from a shuffled
epoch queue, adapts every grid in the batch jointly (shared normalization
statistics), runs both matching directions through the kernel soft argmax,
and takes one bias-corrected Adam step on the mean weighted loss. The
learning rate divides by `decay_factor` once the epoch count passes
`decay_epochs`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np

from . import grid, tape
from .losses import LossReport, LossWeights, combine_terms, flow_consistency, \
    mask_consistency, smoothness
from .matching import MatchParams, fused_correlation, kernel_soft_argmax
from .pipeline import Matcher, load_named_tensors, save_named_tensors
from .synthdata import TrainingPair, load_manifest, load_pair
from .tape import Tape, backward

__all__ = [
    "AdamState", "adam_step", "TrainConfig", "TrainState",
    "train", "load_dataset", "DatasetPair", "evaluate_pck",
    "save_train_checkpoint", "load_train_checkpoint",
]


@dataclass
class AdamState:
    """First/second moment buffers and step count for one parameter set."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    incidents: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray], lr: float, **kwargs) -> "AdamState":
        state = cls(lr=lr, **kwargs)
        state.m = {k: np.zeros_like(v) for k, v in params.items()}
        state.v = {k: np.zeros_like(v) for k, v in params.items()}
        return state


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns the new parameter arrays.

    A non-finite gradient rejects the whole step: parameters, moments, and
    the step count stay untouched and the incident is recorded on the state.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            state.incidents.append(f"step {state.step + 1}: non-finite gradient in {name}")
            return params
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    out = {}
    for name, p in params.items():
        g = grads[name]
        state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        out[name] = p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


@dataclass
class TrainConfig:
    """Training schedule and model hyperparameters.

    The defaults are the desk-scale preset; `full_scale()` carries the
    original protocol's values (batch 16, lr 3e-5, about 40 epochs with a
    divide-by-5 after 30).
    """

    iterations: int = 200
    batch_size: int = 8
    lr: float = 1e-2
    decay_epochs: float = 30.0
    decay_factor: float = 5.0
    beta: float = 50.0
    sigma: float = 5.0
    epsilon: float = 1e-8
    lambda_mask: float = 3.0
    lambda_flow: float = 16.0
    lambda_smooth: float = 0.5
    seed: int = 0
    multi_level: bool = True
    train_argmax: str = "kernel"   # "kernel" or "soft" (ablation baseline)
    backbone_seed: int = 0
    backbone_widths: tuple = (12, 16, 24, 32)
    coarse_width: int = 48

    def __post_init__(self):
        if self.iterations < 1 or self.batch_size < 1:
            raise ValueError("iterations and batch_size must be positive")
        if self.train_argmax not in ("kernel", "soft"):
            raise ValueError(f"train_argmax must be 'kernel' or 'soft', got {self.train_argmax!r}")

    @classmethod
    def full_scale(cls, **overrides) -> "TrainConfig":
        base = cls(iterations=7000, batch_size=16, lr=3e-5)
        return replace(base, **overrides)

    def match_params(self) -> MatchParams:
        return MatchParams(beta=self.beta, sigma=self.sigma, epsilon=self.epsilon)

    def loss_weights(self) -> LossWeights:
        return LossWeights(lambda_mask=self.lambda_mask, lambda_flow=self.lambda_flow,
                           lambda_smooth=self.lambda_smooth)

    def to_json(self) -> dict:
        out = asdict(self)
        out["backbone_widths"] = list(self.backbone_widths)
        return out

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "backbone_widths" in data:
            data["backbone_widths"] = tuple(data["backbone_widths"])
        return cls(**data)


@dataclass
class DatasetPair:
    """A persisted pair plus its evaluation annotations."""

    name: str
    pair: TrainingPair
    keypoints: tuple[np.ndarray, np.ndarray] | None = None
    box: dict | None = None


def load_dataset(dataset_dir) -> list[DatasetPair]:
    from .fileio import read_keypoints
    dataset_dir = Path(dataset_dir)
    manifest = load_manifest(dataset_dir)
    out = []
    for name in manifest["pairs"]:
        pair_dir = dataset_dir / name
        pair = load_pair(pair_dir)
        keypoints = box = None
        if (pair_dir / "keypoints.csv").exists():
            keypoints = read_keypoints(pair_dir / "keypoints.csv")
        if (pair_dir / "box.json").exists():
            box = json.loads((pair_dir / "box.json").read_text())
        out.append(DatasetPair(name=name, pair=pair, keypoints=keypoints, box=box))
    if not out:
        raise ValueError(f"dataset at {dataset_dir} lists no pairs")
    return out


@dataclass
class TrainState:
    """Everything needed to continue a run: model, optimizer, rng, position."""

    matcher: Matcher
    adam: AdamState
    iteration: int = 0
    rng_state: dict | None = None


class _EpochSampler:
    """Shuffled without-replacement batches, reshuffling each epoch."""

    def __init__(self, count: int, rng: np.random.Generator):
        self.count = count
        self.rng = rng
        self.queue: list[int] = []

    def next_batch(self, size: int) -> list[int]:
        batch = []
        while len(batch) < size:
            if not self.queue:
                self.queue = list(self.rng.permutation(self.count))
            batch.append(int(self.queue.pop()))
        return batch


def _pair_losses(matcher: Matcher, leaves: dict, items: list, config: TrainConfig):
    """Batch forward pass: adapt jointly, then per-pair matching losses."""
    params = config.match_params()
    weights = config.loss_weights()

    fine_grids, coarse_grids = [], []
    for feats_s, feats_t, _masks in items:
        fine_grids.extend([feats_s[0], feats_t[0]])
        coarse_grids.extend([feats_s[1], feats_t[1]])
    fine_leaves = {n: leaves[f"fine.{n}"] for n in matcher.fine_block.PARAM_NAMES}
    adapted_fine = matcher.fine_block.forward(fine_grids, params=fine_leaves, training=True)
    adapted_coarse = None
    if matcher.multi_level:
        coarse_leaves = {n: leaves[f"coarse.{n}"] for n in matcher.coarse_block.PARAM_NAMES}
        adapted_coarse = matcher.coarse_block.forward(coarse_grids, params=coarse_leaves,
                                                      training=True)

    from .diffops import upsample_bilinear
    totals, reports = [], []
    for i, (_fs, _ft, masks) in enumerate(items):
        mask_s, mask_t = masks
        src_levels = [adapted_fine[2 * i]]
        tgt_levels = [adapted_fine[2 * i + 1]]
        if adapted_coarse is not None:
            h, w = src_levels[0].shape[:2]
            src_levels.append(upsample_bilinear(adapted_coarse[2 * i], h, w))
            tgt_levels.append(upsample_bilinear(adapted_coarse[2 * i + 1], h, w))
        fused = fused_correlation(src_levels, tgt_levels, params.epsilon)
        reverse = tape.transpose(fused, (2, 3, 0, 1))
        kernels = (None, None)
        if config.train_argmax == "soft":
            kernels = (np.ones(fused.shape), np.ones(reverse.shape))
        flow_s, _ = kernel_soft_argmax(fused, params, kernels=kernels[0])
        flow_t, _ = kernel_soft_argmax(reverse, params, kernels=kernels[1])

        warnings: list[str] = []
        mask_term = mask_consistency(mask_s, mask_t, flow_s, flow_t)
        flow_term = flow_consistency(flow_s, flow_t, mask_s, mask_t, warnings)
        smooth_term = smoothness(flow_s, flow_t, mask_s, mask_t, warnings)
        total = combine_terms(weights, mask_term, flow_term, smooth_term)
        totals.append(total)
        reports.append(LossReport(
            mask=float(mask_term.value), flow=float(flow_term.value),
            smooth=float(smooth_term.value), total=float(total.value),
            nf_source=int((mask_s > 0.5).sum()), nf_target=int((mask_t > 0.5).sum()),
            warnings=warnings))
    batch_total = totals[0]
    for t in totals[1:]:
        batch_total = tape.add(batch_total, t)
    return tape.div(batch_total, float(len(totals))), reports


def _mean_report(reports: list[LossReport]) -> LossReport:
    warnings = [w for r in reports for w in r.warnings]
    return LossReport(
        mask=float(np.mean([r.mask for r in reports])),
        flow=float(np.mean([r.flow for r in reports])),
        smooth=float(np.mean([r.smooth for r in reports])),
        total=float(np.mean([r.total for r in reports])),
        nf_source=int(np.mean([r.nf_source for r in reports])),
        nf_target=int(np.mean([r.nf_target for r in reports])),
        warnings=warnings)


def train(pairs: list[TrainingPair], config: TrainConfig,
          state: TrainState | None = None, progress=None):
    """Optimize adaptation parameters; returns (TrainState, per-iteration log).

    `pairs` may also be DatasetPair items. Pass a previous TrainState to
    resume: iteration numbering, optimizer moments, and the batch sampler
    continue where they left off.
    """
    items_in = [p.pair if isinstance(p, DatasetPair) else p for p in pairs]
    if not items_in:
        raise ValueError("empty dataset")

    if state is None:
        matcher = Matcher.create(
            seed=config.backbone_seed, widths=config.backbone_widths,
            coarse_width=config.coarse_width, params=config.match_params(),
            multi_level=config.multi_level)
        adam = AdamState.for_params(matcher.param_arrays(), lr=config.lr)
        state = TrainState(matcher=matcher, adam=adam, iteration=0)
        rng = np.random.default_rng(config.seed)
    else:
        matcher = state.matcher
        adam = state.adam
        rng = np.random.default_rng(config.seed)
        if state.rng_state is not None:
            rng.bit_generator.state = state.rng_state

    gh, gw = matcher.grid_shape_for(items_in[0].image_shape)
    prepared = []
    for p in items_in:
        # provider is frozen, so its features are computed once per pair
        feats_s = matcher.provider_features(p.source_image)
        feats_t = matcher.provider_features(p.target_image)
        masks = (grid.downsample_mask(p.source_mask, gh, gw),
                 grid.downsample_mask(p.target_mask, gh, gw))
        prepared.append((feats_s, feats_t, masks))

    sampler = _EpochSampler(len(prepared), rng)
    history = []
    for _ in range(config.iterations):
        it = state.iteration
        epoch = it * config.batch_size / len(prepared)
        adam.lr = config.lr / (config.decay_factor if epoch >= config.decay_epochs else 1.0)

        batch = sampler.next_batch(config.batch_size)
        t = Tape()
        param_values = matcher.param_arrays()
        leaves = {k: t.variable(v) for k, v in param_values.items()}
        batch_loss, reports = _pair_losses(matcher, leaves,
                                           [prepared[i] for i in batch], config)
        backward(batch_loss)
        grads = {k: leaves[k].grad for k in leaves}
        matcher.set_param_arrays(adam_step(param_values, grads, adam))

        state.iteration += 1
        entry = _mean_report(reports)
        history.append({"iteration": state.iteration, "lr": adam.lr, **entry.to_json()})
        if progress is not None:
            progress(state.iteration, entry)
    state.rng_state = rng.bit_generator.state
    return state, history


def evaluate_pck(matcher: Matcher, dataset: list[DatasetPair], alpha: float = 0.1,
                 variant: str = "kernel") -> dict:
    """Mean keypoint-transfer accuracy of a matcher over annotated pairs."""
    from .metrics import pck
    per_pair = {}
    for item in dataset:
        if item.keypoints is None or item.box is None:
            continue
        flow, _ = matcher.flow(item.pair.source_image, item.pair.target_image,
                               variant=variant)
        score = pck(flow, item.keypoints[0], item.keypoints[1],
                    (item.box["height"], item.box["width"]), alpha,
                    item.pair.image_shape)
        per_pair[item.name] = score
    if not per_pair:
        raise ValueError("no annotated pairs to evaluate")
    return {"alpha": alpha, "variant": variant,
            "mean": float(np.mean(list(per_pair.values()))), "per_pair": per_pair,
            "box_source": "mask bounding box"}


def save_train_checkpoint(directory, state: TrainState, config: TrainConfig) -> None:
    """Checkpoint the matcher plus optimizer/rng state for exact resumption."""
    directory = Path(directory)
    state.matcher.save_checkpoint(directory, extra={
        "iteration": state.iteration,
        "config": config.to_json(),
        "rng_state": _jsonable_rng(state.rng_state),
        "adam": {"lr": state.adam.lr, "beta1": state.adam.beta1,
                 "beta2": state.adam.beta2, "eps": state.adam.eps,
                 "step": state.adam.step, "incidents": state.adam.incidents},
    })
    moments = {}
    for name, arr in state.adam.m.items():
        moments[f"adam.m.{name}"] = arr
    for name, arr in state.adam.v.items():
        moments[f"adam.v.{name}"] = arr
    index = save_named_tensors(directory / "optimizer", moments)
    (directory / "optimizer" / "index.json").write_text(json.dumps(index, indent=1))


def load_train_checkpoint(directory) -> tuple[TrainState, TrainConfig]:
    directory = Path(directory)
    matcher, manifest = Matcher.load_checkpoint(directory)
    config = TrainConfig.from_json(manifest["config"])
    adam_meta = manifest["adam"]
    adam = AdamState(lr=adam_meta["lr"], beta1=adam_meta["beta1"],
                     beta2=adam_meta["beta2"], eps=adam_meta["eps"],
                     step=adam_meta["step"], incidents=list(adam_meta["incidents"]))
    index = json.loads((directory / "optimizer" / "index.json").read_text())
    moments = load_named_tensors(directory / "optimizer", index)
    adam.m = {k[len("adam.m."):]: v for k, v in moments.items() if k.startswith("adam.m.")}
    adam.v = {k[len("adam.v."):]: v for k, v in moments.items() if k.startswith("adam.v.")}
    state = TrainState(matcher=matcher, adam=adam, iteration=manifest["iteration"],
                       rng_state=_dejson_rng(manifest["rng_state"]))
    return state, config


def _jsonable_rng(rng_state) -> dict | None:
    if rng_state is None:
        return None
    out = dict(rng_state)
    out["state"] = {k: int(v) for k, v in rng_state["state"].items()}
    return out


def _dejson_rng(data) -> dict | None:
    if data is None:
        return None
    return data
