"""AdamW training with a two-stage learning rate, evaluation and ablations."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import mrlm
from . import tensor as tt
from .dialgen import DialSpec, GenConfig, Manifest, SampleRecord, render_records
from .metrics import MetricReport, PredictionPair, build_report

log = logging.getLogger(__name__)

VARIANTS = {
    # name: (use_kfm, use_moe), in reporting order
    "Baseline": (False, False),
    "w/o KFM (MoE only)": (False, True),
    "w/o MoE (KFM only)": (True, False),
    "MRLM": (True, True),
}


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr_initial: float = 3e-4
    lr_final: float = 3e-6
    stage1_iters: int = 3000
    stage2_iters: int = 500
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    use_kfm: bool = True
    use_moe: bool = True
    log_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        if self.lr_final > self.lr_initial:
            raise ValueError("lr_final must not exceed lr_initial")
        if self.stage1_iters <= 0 or self.stage2_iters < 0:
            raise ValueError("iteration counts must be positive")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    def lr_at(self, step: int) -> float:
        """Hard drop after stage 1 (steps are 1-based)."""
        return self.lr_initial if step <= self.stage1_iters else self.lr_final

    def to_dict(self) -> dict:
        return {"schema_version": 1, **asdict(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k != "schema_version"})


# full-length schedule, for reference and full-scale runs
PAPER_TRAIN = TrainConfig(batch_size=8, lr_initial=1e-4, lr_final=1e-6,
                          stage1_iters=200_000, stage2_iters=50_000)


# ---------------------------------------------------------------- optimiser

@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    skipped: int = 0


def decays(name: str, arr: np.ndarray) -> bool:
    """Weight decay applies to matrices only, never to biases or norm gains."""
    return arr.ndim >= 2 and not name.endswith(("_b", ".b", ".g"))


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               opt: AdamWState, lr: float) -> bool:
    """In-place AdamW update with decoupled decay and bias correction.

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {name}")
    if not all(np.isfinite(g).all() for g in grads.values()):
        opt.skipped += 1
        log.warning("non-finite gradient at step %d; update skipped", opt.step + 1)
        return False
    opt.step += 1
    t = opt.step
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = opt.m.get(name)
        if m is None:
            m = opt.m[name] = np.zeros_like(p)
            opt.v[name] = np.zeros_like(p)
        v = opt.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if opt.weight_decay and decays(name, p):
            p *= p.dtype.type(1.0 - lr * opt.weight_decay)
        p -= (lr / c1) * m / (np.sqrt(v / c2) + opt.eps)
    return True


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Rescale ``grads`` in place when their joint L2 norm exceeds ``max_norm``; returns the norm."""
    norm = math.sqrt(math.fsum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * grads[k].dtype.type(s)
    return norm


# ---------------------------------------------------------------- data

@dataclass
class ReadingData:
    images: np.ndarray  # (N, H, W, 3) uint8
    records: list[SampleRecord]
    specs: dict[int, DialSpec]

    def __len__(self):
        return len(self.records)

    @property
    def labels(self) -> list[str]:
        return [r.label for r in self.records]

    def digest(self) -> str:
        h = hashlib.sha256(self.images.tobytes())
        for r in self.records:
            h.update(r.to_json().encode())
        return h.hexdigest()[:16]


def load_split(config: GenConfig, manifest: Manifest, split: str) -> ReadingData:
    recs = manifest.split(split)
    return ReadingData(render_records(config, recs), recs, config.spec_by_id())


def _order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0x5EED]).permutation(n)


# ---------------------------------------------------------------- evaluation

def predictions_to_pairs(preds: Sequence[float | None], data: ReadingData) -> list[PredictionPair]:
    out = []
    for y_star, rec in zip(preds, data.records):
        spec = data.specs[rec.archetype_id]
        out.append(PredictionPair(rec.reading, y_star, spec.span, rec.archetype_id, tuple(rec.corruptions)))
    return out


def evaluate(state: mrlm.ModelState, data: ReadingData, group_by: str = "none",
             use_kfm: bool | None = None, use_moe: bool | None = None) -> tuple[MetricReport, list[str]]:
    """Metric report plus the raw decoded label strings."""
    cfg = mrlm.with_flags(state.config,
                          use_kfm=state.config.use_kfm if use_kfm is None else use_kfm,
                          use_moe=state.config.use_moe if use_moe is None else use_moe)
    view = mrlm.ModelState(cfg, state.params)
    bank = mrlm.build_template_bank(view, list(data.specs.values())) if cfg.use_kfm else None
    outs = mrlm.predict_batch(data.images, view, bank)
    pairs = predictions_to_pairs([v for _, v in outs], data)
    return build_report(pairs, group_by), [t for t, _ in outs]


def expert_utilization(state: mrlm.ModelState, images: np.ndarray, bank=None) -> np.ndarray:
    """Mean gate probability per expert over ``images`` (no load-balancing loss is used)."""
    with tt.no_grad():
        F_img = mrlm.encode_images(images, state)
        F_enh = None
        if state.config.use_kfm:
            F_t = bank.features if bank.features is not None else mrlm.template_features(state, bank.images)
            F_enh = mrlm.kfm_forward(F_t, F_img, state)
        p = mrlm.gate_probs(mrlm.relation_input(F_enh, F_img, state), state).data
    return p.reshape(-1, p.shape[-1]).mean(axis=0)


# ---------------------------------------------------------------- training

def train(state: mrlm.ModelState, data: ReadingData, cfg: TrainConfig,
          eval_data: ReadingData | None = None, checkpoint_dir=None,
          callback: Callable[[dict], None] | None = None) -> tuple[mrlm.ModelState, list[dict]]:
    """Optimise ``state`` in place on ``data``; returns it with the logged history.

    Template features are recomputed inside the graph at every step, so the bank
    always reflects the current encoder weights.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    state.config = mrlm.with_flags(state.config, use_kfm=cfg.use_kfm, use_moe=cfg.use_moe)
    mcfg = state.config
    bank = mrlm.build_template_bank(state, list(data.specs.values()), cache=False) if cfg.use_kfm else None
    ids, masks = mrlm.label_targets(data.labels, mcfg.label_slots)
    params = state.params
    # a disabled branch must not drift under weight decay
    live = _live_params(state, cfg)
    opt = AdamWState(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    history: list[dict] = []
    window: list[float] = []
    bad = 0
    n = len(data)
    per_epoch = max(1, n // cfg.batch_size)
    order = None
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    for step in range(1, cfg.total_iters + 1):
        epoch, pos = divmod(step - 1, per_epoch)
        if pos == 0:
            order = _order(n, cfg.seed, epoch)
        idx = np.sort(order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size])
        lr = cfg.lr_at(step)

        state.zero_grad()
        logits = mrlm.forward(data.images[idx], state, bank)
        L = tt.cross_entropy(logits, ids[idx], masks[idx])
        value = float(L.data)
        if not math.isfinite(value):
            bad += 1
            log.warning("non-finite loss at step %d", step)
            if bad >= 10:
                raise TrainingDiverged(f"loss non-finite for {bad} consecutive steps (last step {step})")
            continue
        bad = 0
        tt.backward(L)
        grads = {k: (params[k].grad if params[k].grad is not None else np.zeros_like(params[k].data))
                 for k in live}
        norm = clip_global_norm(grads, cfg.clip_norm)
        if cfg.clip_norm is not None and norm > cfg.clip_norm and step % cfg.log_every == 0:
            log.debug("step %d: gradient norm %.3g clipped to %.3g", step, norm, cfg.clip_norm)
        adamw_step({k: params[k].data for k in live}, grads, opt, lr)
        window.append(value)

        boundary = step == cfg.stage1_iters or step == cfg.total_iters
        if step % cfg.log_every == 0 or boundary:
            row = {"step": step, "lr": lr, "loss": float(np.mean(window)), "acc_eps": None, "acc_theta": None}
            window = []
            if eval_data is not None and (boundary or (cfg.eval_every and step % cfg.eval_every == 0)):
                rep, _ = evaluate(state, eval_data)
                row["acc_eps"], row["acc_theta"] = rep.weighted.acc_eps, rep.weighted.acc_theta
            history.append(row)
            if callback is not None:
                callback(row)
            log.info("step %d lr %.1e loss %.4f", step, lr, row["loss"])
        if boundary and cfg.use_moe:
            use = expert_utilization(state, data.images[idx], bank)
            log.info("step %d expert utilization %s", step, np.array2string(use, precision=3))
        if boundary and ckpt is not None:
            stage = 1 if step == cfg.stage1_iters else 2
            state.save(ckpt / f"stage{stage}.ckpt")
    return state, history


def _live_params(state: mrlm.ModelState, cfg: TrainConfig) -> list[str]:
    names = []
    for k in state.params:
        if k.startswith("kfm.") and not cfg.use_kfm:
            continue
        if k.startswith(("moe.mlp1", "moe.mlp2")) and not cfg.use_kfm:
            continue
        if k.startswith(("moe.gate", "moe.fc")) and not cfg.use_moe:
            continue
        names.append(k)
    return names


def write_history(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["step", "lr", "loss", "acc_eps", "acc_theta"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: ("" if v is None else v) for k, v in row.items()})


# ---------------------------------------------------------------- ablations

@dataclass
class AblationResult:
    variant: str
    seed: int
    report: MetricReport
    history: list[dict]


def run_ablation_suite(train_data: ReadingData, test_data: ReadingData, model_cfg: mrlm.ModelConfig,
                       base_cfg: TrainConfig, variants: Sequence[str] | None = None,
                       out_dir=None) -> list[AblationResult]:
    """Train and evaluate each variant with identical seed, init and data order."""
    results = []
    for name in variants or VARIANTS:
        use_kfm, use_moe = VARIANTS[name]
        cfg = replace(base_cfg, use_kfm=use_kfm, use_moe=use_moe)
        state = mrlm.init_state(model_cfg, seed=base_cfg.seed)
        ckdir = None if out_dir is None else Path(out_dir) / _slug(name)
        state, hist = train(state, train_data, cfg, checkpoint_dir=ckdir)
        report, _ = evaluate(state, test_data)
        log.info("%s: acc_eps %.1f acc_theta %.1f", name, report.weighted.acc_eps, report.weighted.acc_theta)
        results.append(AblationResult(name, base_cfg.seed, report, hist))
    return results


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name).strip("_").lower()


def ablation_table(results: Sequence[AblationResult]) -> str:
    """Markdown table with columns Variant | Acc_eps | Acc_theta | Ref | Rel."""
    lines = ["| Variant | Acc_eps (%) | Acc_theta (%) | Ref | Rel |", "|---|---|---|---|---|"]
    for r in results:
        w = r.report.weighted

        def f(v, spec):
            return "-" if v is None else format(v, spec)

        lines.append(f"| {r.variant} | {f(w.acc_eps, '.1f')} | {f(w.acc_theta, '.1f')} | "
                     f"{f(w.mean_ref, '.3f')} | {f(w.mean_rel, '.3f')} |")
    return "\n".join(lines) + "\n"


def ablation_csv(results: Sequence[AblationResult]) -> str:
    rows = ["variant,seed,acc_eps,acc_theta,ref,rel"]
    for r in results:
        w = r.report.weighted
        vals = [w.acc_eps, w.acc_theta, w.mean_ref, w.mean_rel]
        rows.append(",".join([f'"{r.variant}"', str(r.seed)] + ["" if v is None else f"{v:.6g}" for v in vals]))
    return "\n".join(rows) + "\n"
