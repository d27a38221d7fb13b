"""Dataset-independent property checks behind ``meterlab verify``.

Each check returns a :class:`CheckResult`. Ops are always looked up through
the :mod:`meterlab.tensor` module at call time, so a patched op (for instance
a softmax with a flipped backward sign) is what gets checked.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import dialgen, georead, metrics, mrlm
from . import tensor as tt

LINEAR_TOL = 1e-6
NONLINEAR_TOL = 1e-4

# small fp64 configuration used for whole-graph gradient checks
TINY = mrlm.ModelConfig(img_size=16, patch=8, d_model=8, n_heads=2, n_layers=2, mlp_ratio=2,
                        K_templates=2, n_experts=3, expert_hidden=5, n_queries=2, label_slots=4,
                        n_text=2, dtype="float64")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _leaf(rng, shape, low=None):
    x = rng.normal(size=shape)
    if low is not None:
        # keep entries away from kinks
        x = np.sign(x) * (np.abs(x) + low)
    return tt.Tensor(x, requires_grad=True)


def _probe(out: tt.Tensor, rng) -> tt.Tensor:
    """Scalar ``sum(out * R)`` with a fixed random ``R``; linear in ``out``."""
    R = tt.Tensor(rng.normal(size=out.shape))
    return tt.sum(tt.mul(out, R))


def op_cases(rng: np.random.Generator) -> list[tuple[str, bool, list, Callable]]:
    """(name, is_linear, leaves, fn) for every differentiable op."""
    cases = []

    def add(name, linear, leaves, body):
        R = rng.normal(size=body(*leaves).shape)
        cases.append((name, linear, leaves, lambda: tt.sum(tt.mul(body(*leaves), tt.Tensor(R)))))

    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4,))
    add("add", True, [a, b], lambda x, y: tt.add(x, y))
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))
    add("sub", True, [a, b], lambda x, y: tt.sub(x, y))
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (3, 4))
    add("mul", True, [a, b], lambda x, y: tt.mul(x, y))
    a = _leaf(rng, (5,))
    add("scale", True, [a], lambda x: tt.scale(x, -2.5))
    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    add("matmul_fold", True, [a, b], lambda x, y: tt.matmul(x, y))
    a, b = _leaf(rng, (1, 3, 4)), _leaf(rng, (2, 4, 5))
    add("matmul_batched", True, [a, b], lambda x, y: tt.matmul(x, y))
    a = _leaf(rng, (2, 3, 4))
    add("transpose", True, [a], lambda x: tt.transpose(x, (2, 0, 1)))
    a = _leaf(rng, (2, 6))
    add("reshape", True, [a], lambda x: tt.reshape(x, (3, 4)))
    a = _leaf(rng, (1, 4))
    add("broadcast_to", True, [a], lambda x: tt.broadcast_to(x, (3, 4)))
    a = _leaf(rng, (4, 5))
    add("getitem_basic", True, [a], lambda x: tt.getitem(x, (slice(1, 3), slice(None, None, 2))))
    a = _leaf(rng, (4, 5))
    add("getitem_fancy", True, [a], lambda x: tt.getitem(x, np.array([0, 2, 2])))
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 4))
    add("concat", True, [a, b], lambda x, y: tt.concat_cols([x, y]))
    a = _leaf(rng, (3, 4))
    add("sum", True, [a], lambda x: tt.sum(x, axis=0))
    a = _leaf(rng, (3, 4))
    add("mean", True, [a], lambda x: tt.mean(x, axis=-1))

    a = _leaf(rng, (3, 4))
    add("gelu", False, [a], lambda x: tt.gelu(x))
    a = _leaf(rng, (3, 4), low=0.1)
    add("relu", False, [a], lambda x: tt.relu(x))
    a = _leaf(rng, (3, 5))
    add("softmax", False, [a], lambda x: tt.softmax(x, axis=-1))
    a = _leaf(rng, (4, 3))
    add("softmax_axis0", False, [a], lambda x: tt.softmax(x, axis=0))
    a, g, bb = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    add("layer_norm", False, [a, g, bb], lambda x, y, z: tt.layer_norm(x, y, z))

    z = _leaf(rng, (2, 3, 13))
    targets = rng.integers(0, 13, size=(2, 3))
    mask = np.array([[True, True, False], [True, False, False]])
    cases.append(("cross_entropy", False, [z], lambda: tt.cross_entropy(z, targets, mask)))

    p = tt.Tensor(rng.dirichlet(np.ones(4), size=2), requires_grad=True)
    Y = _leaf(rng, (4, 2, 3, 5))
    add("mixture", False, [p, Y], lambda q, y: mrlm.mixture(q, y))
    return cases


def check_op_gradients(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, failures = {}, []
    for name, linear, leaves, fn in op_cases(rng):
        tol = LINEAR_TOL if linear else NONLINEAR_TOL
        errs = tt.gradcheck(fn, leaves, eps=1e-6)
        err = max(errs.values())
        worst[name] = err
        if not err <= tol:
            failures.append(f"{name}: {err:.2e} > {tol:.0e}")
    detail = "; ".join(failures) if failures else f"{len(worst)} ops, max rel err {max(worst.values()):.1e}"
    return CheckResult("op gradients", not failures, detail)


def tiny_batch(cfg: mrlm.ModelConfig = TINY):
    specs = dialgen.default_specs()
    imgs = np.stack([dialgen.render_dial(specs[i], specs[i].range_min + 0.3 * (i + 1) * specs[i].span / 3,
                                         render_seed=i, size=cfg.img_size) for i in range(2)])
    return specs, imgs, ["1.5", "2"]


def check_model_gradients(seed: int = 0, max_entries: int = 12) -> CheckResult:
    failures, worst = [], 0.0
    specs, imgs, labels = tiny_batch()
    for use_kfm, use_moe in [(True, True), (False, True), (True, False), (False, False)]:
        state = mrlm.init_state(mrlm.with_flags(TINY, use_kfm=use_kfm, use_moe=use_moe), seed, zero_init=False)
        bank = mrlm.build_template_bank(state, specs, cache=False)
        live = [p for k, p in state.params.items()
                if not (k.startswith("kfm.") and not use_kfm)
                and not (k.startswith(("moe.mlp1", "moe.mlp2")) and not use_kfm)
                and not (k.startswith(("moe.gate", "moe.fc")) and not use_moe)]

        def fn():
            return mrlm.loss(mrlm.forward(imgs, state, bank), labels)

        errs = tt.gradcheck(fn, live, eps=1e-6, max_entries=max_entries, rng=np.random.default_rng(seed))
        err = max(errs.values())
        worst = max(worst, err)
        if not err <= NONLINEAR_TOL:
            bad = max(errs, key=errs.get)
            failures.append(f"kfm={use_kfm} moe={use_moe}: {bad} {err:.2e}")
    detail = "; ".join(failures) if failures else f"4 variants, max rel err {worst:.1e}"
    return CheckResult("model gradients", not failures, detail)


def check_normalization(n: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        width = int(rng.integers(2, 33))
        x = rng.normal(scale=float(rng.choice([0.1, 1.0, 10.0, 100.0])), size=(3, width))
        s = tt.softmax(tt.Tensor(x), axis=-1).data.sum(axis=-1)
        worst = max(worst, float(np.abs(s - 1).max()))
    cfg = mrlm.with_flags(TINY, n_experts=6)
    state = mrlm.init_state(cfg, seed, zero_init=False)
    gate_worst, negative = 0.0, False
    for _ in range(n):
        x = tt.Tensor(rng.normal(scale=float(rng.choice([0.1, 1.0, 10.0])), size=(2, cfg.n_tokens, cfg.tap_dim)))
        p = mrlm.gate_probs(x, state).data
        negative |= bool((p < 0).any())
        gate_worst = max(gate_worst, float(np.abs(p.sum(axis=-1) - 1).max()))
    ok = worst <= 1e-6 and gate_worst <= 1e-6 and not negative
    return CheckResult("normalization", ok, f"softmax max |sum-1| {worst:.1e}, gate {gate_worst:.1e}")


PAPER_SHAPES = {"F_i": (256, 4224), "F_template": (1536, 4224)}


def check_shape_laws() -> CheckResult:
    plan = mrlm.shape_plan(mrlm.PAPER_SCALE)
    cfg = mrlm.PAPER_SCALE
    bad = [f"{k} {plan[k]} != {v}" for k, v in PAPER_SHAPES.items() if plan[k] != v]
    if cfg.n_tokens != 256 or cfg.K_templates != 6:
        bad.append(f"T={cfg.n_tokens} K={cfg.K_templates}")
    if plan["F_attn"] != plan["F_template"] or plan["F_moe"][0] != cfg.n_tokens:
        bad.append("F_attn/F_template or F_moe rows disagree")
    return CheckResult("shape laws", not bad, "; ".join(bad) or "F_i 256x4224, F_template 1536x4224")


def moe_loop_oracle(x: tt.Tensor, state: mrlm.ModelState, p: np.ndarray) -> np.ndarray:
    """``sum_i p_i E_i(x)`` with one expert evaluated at a time."""
    P = state.params
    B, T, C = x.shape
    flat = tt.reshape(x, (B * T, C))
    acc = None
    for i in range(state.config.n_experts):
        h = tt.gelu(tt.add(tt.matmul(flat, tt.Tensor(P["moe.fc1"].data[i])), tt.Tensor(P["moe.fc1_b"].data[i])))
        y = tt.add(tt.matmul(h, tt.Tensor(P["moe.fc2"].data[i])), tt.Tensor(P["moe.fc2_b"].data[i])).data
        term = p[:, i, None, None] * y.reshape(B, T, C)
        acc = term if acc is None else acc + term
    return acc


def check_moe_equivalence(seed: int = 0, experts=(2, 6, 8, 10)) -> CheckResult:
    rng = np.random.default_rng(seed)
    bad = []
    for n in experts:
        state = mrlm.init_state(mrlm.with_flags(TINY, n_experts=n), seed, zero_init=False)
        x = tt.Tensor(rng.normal(size=(3, TINY.n_tokens, TINY.tap_dim)))
        with tt.no_grad():
            F_moe, p = mrlm.moe_forward(None, x, state, return_gate=True)
        if not np.array_equal(F_moe.data, moe_loop_oracle(x, state, p.data)):
            bad.append(str(n))
    return CheckResult("moe equivalence", not bad,
                       f"mismatch for n={','.join(bad)}" if bad else f"bitwise equal for n={list(experts)}")


def random_pairs(n: int, rng: np.random.Generator) -> list[metrics.PredictionPair]:
    specs = dialgen.default_specs()
    pairs = []
    for _ in range(n):
        s = specs[int(rng.integers(len(specs)))]
        grid = s.reading_grid()
        y = float(grid[rng.integers(len(grid))])
        u = rng.random()
        if u < 0.05:
            ys = None
        elif u < 0.3:
            ys = float(grid[rng.integers(len(grid))])
        else:
            ys = y + float(rng.normal(scale=0.05 * s.span))
        kinds = tuple(k for k in dialgen.CORRUPTION_KINDS if rng.random() < 0.15)
        pairs.append(metrics.PredictionPair(y, ys, s.span, s.archetype_id, kinds))
    return pairs


def metric_loop_oracle(pairs) -> dict:
    """Plain per-pair loop with exactly rounded sums."""
    n = len(pairs)
    refs, rels, eps, theta, n_def = [], [], 0, 0, 0
    for p in pairs:
        r = metrics.ref_error(p)
        if metrics.eps_hit(r):
            eps += 1
        if math.isfinite(r):
            refs.append(r)
        q = metrics.rel_error(p)
        if q is None:
            continue
        n_def += 1
        if metrics.theta_hit(q):
            theta += 1
        if math.isfinite(q):
            rels.append(q)
    return {
        "acc_eps": 100.0 * eps / n,
        "acc_theta": 100.0 * theta / n_def if n_def else None,
        "mean_ref": math.fsum(refs) / len(refs) if refs else None,
        "mean_rel": math.fsum(rels) / len(rels) if rels else None,
    }


BOUNDARY_CASES = [
    # (y, y_star, span, eps_hit, theta_hit)
    (1.0, 1.1, 10.0, True, False),    # ref exactly 0.01, rel 0.1
    (1.0, 1.11, 10.0, False, False),
    (2.0, 2.1, 10.0, True, False),    # rel exactly 0.05: strict, so a miss
    (2.0, 2.09, 10.0, True, True),
    (4.0, 4.2, 20.0, True, False),    # rel 0.05 again, ref 0.01 again
]


def check_metric_oracle(n: int = 1000, seed: int = 0) -> CheckResult:
    pairs = random_pairs(n, np.random.default_rng(seed))
    row = metrics.summarize(pairs)
    want = metric_loop_oracle(pairs)
    bad = [k for k, v in want.items() if getattr(row, k) != v]
    for y, ys, span, e, t in BOUNDARY_CASES:
        pr = metrics.PredictionPair(y, ys, span)
        if metrics.eps_hit(metrics.ref_error(pr)) != e or metrics.theta_hit(metrics.rel_error(pr)) != t:
            bad.append(f"boundary {y}->{ys}")
    return CheckResult("metric oracle", not bad, "; ".join(bad) or f"{n} pairs exact, boundaries ok")


def check_generator_oracle(n: int = 60, seed: int = 0, size: int = 64) -> CheckResult:
    cfg = dialgen.paper_profile(n, master_seed=seed, image_size=size)
    specs = cfg.spec_by_id()
    misses = []
    for rec in dialgen.generate_dataset(cfg).records:
        spec = specs[rec.archetype_id]
        got = georead.read(dialgen.render_sample(cfg, rec.id), spec)
        if got is None or abs(got - rec.reading) > 0.5 * spec.index_value:
            misses.append(rec.id)
    return CheckResult("generator/georead", not misses,
                       f"{n - len(misses)}/{n} within half an index" + (f"; misses {misses[:5]}" if misses else ""))


def check_checkpoint_roundtrip(seed: int = 0) -> CheckResult:
    state = mrlm.init_state(mrlm.with_flags(TINY, dtype="float32"), seed, zero_init=False)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "m.ckpt"
        state.save(path)
        back = mrlm.ModelState.load(path)
        state.save(Path(tmp) / "again.ckpt")
        same_file = path.read_bytes() == (Path(tmp) / "again.ckpt").read_bytes()
    same = back.params.keys() == state.params.keys() and all(
        np.array_equal(back.params[k].data, state.params[k].data) and back.params[k].dtype == state.params[k].dtype
        for k in state.params)
    return CheckResult("checkpoint round trip", same and same_file, "bit-exact" if same else "arrays differ")


def check_kfm_residual(seed: int = 0) -> CheckResult:
    state = mrlm.init_state(TINY, seed)
    specs, imgs, _ = tiny_batch()
    bank = mrlm.build_template_bank(state, specs)
    with tt.no_grad():
        F_img = mrlm.encode_images(imgs, state)
        F_enh = mrlm.kfm_forward(bank.features, F_img, state)
    ok = all(np.array_equal(F_enh.data[b], bank.features.data) for b in range(len(imgs)))
    return CheckResult("kfm residual start", ok, "F_enh == F_template at init" if ok else "residual broken")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "op_gradients": check_op_gradients,
    "model_gradients": check_model_gradients,
    "normalization": check_normalization,
    "shape_laws": check_shape_laws,
    "moe_equivalence": check_moe_equivalence,
    "metric_oracle": check_metric_oracle,
    "generator_oracle": check_generator_oracle,
    "checkpoint": check_checkpoint_roundtrip,
    "kfm_residual": check_kfm_residual,
}


def run_checks(names=None) -> list[CheckResult]:
    out = []
    for name in names or CHECKS:
        t0 = time.perf_counter()
        try:
            res = CHECKS[name]()
        except Exception as exc:  # a crashing check is a failing check
            res = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - t0
        out.append(res)
    return out
