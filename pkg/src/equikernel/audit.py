"""Randomised equivariance audits: reflect (per layer and end to end),
rotate (grid angles and small-angle comparison) and scale (SEL contracts)."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import ConvSpec, NormState, Tensor, bilinear_resize, conv2d, grad_check, no_tape, normalize, tsum
from .loss import cross_entropy, triplet_loss
from .model import BackboneConfig, Network, horizontal_pool
from .reflect import mirror, swap_groups
from .rotate import RoEL, rotate_image, rotate_kernel
from .scale import SEL, assemble_multiscale

REFLECT_TOL = 1e-4
EMBED_REL_TOL = 1e-3
STRIDED_RATIO = 10.0
GRID_TOL = 1e-6
SMALL_ANGLE = 10.0
WIN_RATE = 0.95


@dataclass(frozen=True)
class AuditRow:
    layer: str
    transform: str
    equivariance_error: float
    invariance_error: float
    threshold: float
    passed: bool
    note: str = ""


def worker_count() -> int:
    raw = os.environ.get("EQUIKERNEL_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def _map_trials(fn, n: int, workers: int | None = None) -> list:
    """Run ``fn(i)`` for i < n; results stay in trial order."""
    workers = workers or worker_count()
    if workers == 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, range(n)))


def audit_config(widths=(4, 8, 8, 16), embed_dim: int = 32, **kw) -> BackboneConfig:
    """Narrow stride-1 network; equivariance is structural, so width only
    changes the cost."""
    return BackboneConfig(widths=widths, embed_dim=embed_dim, audit_mode=True, **kw)


def smooth_noise(rng: np.random.Generator, shape, sigma: float = 2.0) -> np.ndarray:
    """Gaussian-blurred white noise over the last two axes (zero padded)."""
    radius = max(1, int(math.ceil(3 * sigma)))
    t = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (t / sigma) ** 2)
    g /= g.sum()
    x = rng.standard_normal(shape)
    x = np.apply_along_axis(lambda r: np.convolve(r, g, mode="same"), -1, x)
    return np.apply_along_axis(lambda c: np.convolve(c, g, mode="same"), -2, x)


# --- reflect ------------------------------------------------------------------

def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64))))


def _rel(a, b) -> float:
    a = np.asarray(a, np.float64)
    b = np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def reflect_trial(net: Network, x: np.ndarray) -> dict[str, tuple[float, float]]:
    """(equivariance, raw difference) per probe point for one input."""
    with no_tape():
        a = net(x, keep_stages=True)
        b = net(mirror(x), keep_stages=True)
    out = {}
    names = ["stem"] + [f"stage{i}" for i in range(1, len(a.stages))]
    for name, fa, fb in zip(names, a.stages, b.stages):
        fa, fb = fa.data, fb.data
        expect = swap_groups(mirror(fa)) if net.cfg.reel else mirror(fa)
        out[name] = (_max_abs(fb, expect), _max_abs(fb, fa))
    out["gpool"] = (_max_abs(b.f4.data, mirror(a.f4.data)), _max_abs(b.f4.data, a.f4.data))
    if a.f4_rot is not None:
        out["rotate_branch"] = (_max_abs(b.f4_rot.data, mirror(a.f4_rot.data)),
                                _max_abs(b.f4_rot.data, a.f4_rot.data))
    if a.scale is not None:
        out["scale_branch"] = (_max_abs(b.scale.data, mirror(a.scale.data)), _max_abs(b.scale.data, a.scale.data))
    ea, eb = a.retrieval_vectors(), b.retrieval_vectors()
    out["embedding"] = (_rel(eb, ea), _rel(eb, ea))
    return out


def reflect_audit(net: Network, trials: int = 50, seed: int = 0, frames: int = 2,
                  workers: int | None = None) -> list[AuditRow]:
    """Max errors over ``trials`` random inputs, one row per probe point.

    Backbone stages must satisfy F(mirror X) = swap(mirror F(X)); pooled maps
    must commute with mirror alone; the embeddings must be invariant.
    """
    net.eval()
    h, w = net.cfg.frame_size

    def one(i):
        rng = np.random.default_rng([seed, i])
        return reflect_trial(net, rng.random((1, frames, h, w), dtype=np.float32))

    results = _map_trials(one, trials, workers)
    rows = []
    for name in results[0]:
        eq = max(r[name][0] for r in results)
        raw = max(r[name][1] for r in results)
        tol = EMBED_REL_TOL if name == "embedding" else REFLECT_TOL
        rows.append(AuditRow(name, "reflect", eq, raw, tol, eq <= tol))
    return rows


def embedding_distances(net: Network, inputs: int = 100, seed: int = 0, frames: int = 2,
                        batch: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Per-input reflect invariance error and all pairwise distances between
    the embeddings of ``inputs`` random inputs."""
    net.eval()
    h, w = net.cfg.frame_size
    rng = np.random.default_rng(seed)
    x = rng.random((inputs, frames, h, w), dtype=np.float32)
    emb, emb_m = [], []
    with no_tape():
        for i in range(0, inputs, batch):
            emb.append(net(x[i:i + batch]).retrieval_vectors())
            emb_m.append(net(mirror(x[i:i + batch])).retrieval_vectors())
    e = np.concatenate(emb).astype(np.float64)
    em = np.concatenate(emb_m).astype(np.float64)
    err = np.linalg.norm(e - em, axis=1)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    return err, d[np.triu_indices(inputs, 1)]


def strided_reflect_row(net: Network, inputs: int = 100, seed: int = 0, frames: int = 2) -> AuditRow:
    err, dist = embedding_distances(net, inputs, seed, frames)
    worst, median = float(err.max()), float(np.median(dist))
    limit = median / STRIDED_RATIO
    return AuditRow("embedding_vs_distance", "reflect", worst, median, limit, worst <= limit,
                    f"max invariance error vs median pairwise distance over {inputs} inputs")


# --- rotate -------------------------------------------------------------------

def grid_rotation_errors(rng: np.random.Generator, trials: int = 20, sizes=(3, 5)) -> dict[int, float]:
    """Max deviation of rotate_kernel from the exact quarter-turn permutation."""
    worst = {0: 0.0, 90: 0.0, 180: 0.0, 270: 0.0}
    for _ in range(trials):
        for k in sizes:
            kern = rng.standard_normal((2, 3, k, k))
            for deg in worst:
                exact = np.rot90(kern, k=-deg // 90, axes=(-2, -1))
                worst[deg] = max(worst[deg], _max_abs(rotate_kernel(kern, float(deg)).data, exact))
    return worst


def rotation_error(x: np.ndarray, kernel: np.ndarray, theta: float, use_rotated: bool, crop: int) -> float:
    """||rotate(-t)(conv(rotate(t) x, K')) - conv(x, K)|| on the interior,
    with K' the rotated kernel or K itself."""
    spec = ConvSpec.same(kernel.shape[-1])
    ref = conv2d(x, kernel, None, spec).data
    k = rotate_kernel(kernel, theta).data if use_rotated else kernel
    back = rotate_image(conv2d(rotate_image(x, theta), k, None, spec).data, -theta)
    diff = (back - ref)[..., crop:-crop, crop:-crop]
    return float(np.linalg.norm(diff))


def small_angle_trials(trials: int = 100, seed: int = 0, theta: float = SMALL_ANGLE, size: int = 33,
                       k: int = 3, sigma: float = 2.0, crop: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Errors of the rotated and the unrotated kernel over random trials.

    Inputs are smooth noise; kernels use the network's He initialisation.
    """
    rot, plain = [], []
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        x = smooth_noise(rng, (1, size, size), sigma)
        kern = rng.standard_normal((1, 1, k, k)) * math.sqrt(2.0 / (k * k))
        rot.append(rotation_error(x, kern, theta, True, crop))
        plain.append(rotation_error(x, kern, theta, False, crop))
    return np.array(rot), np.array(plain)


def predictor_bounds(channels: int = 8, limits=(20.0, 30.0, 40.0, 50.0), inputs: int = 1000, draws: int = 20,
                     seed: int = 0, grid=(16, 11)) -> dict[float, int]:
    """Violations of |theta| < limit and 0 < lambda < 1 per angle limit, over
    random inputs and random weight draws of every predictor parameter."""
    violations = {}
    for limit in limits:
        bad = 0
        for d in range(draws):
            rng = np.random.default_rng([seed, int(limit), d])
            roel = RoEL(channels, limit, rng=rng, dtype=np.float64)
            for _, p in roel.named_parameters():
                p.data = rng.standard_normal(p.shape) * rng.uniform(0.1, 3.0)
            x = rng.standard_normal((inputs, channels) + tuple(grid)) * rng.uniform(0.1, 10.0)
            with no_tape():
                ac = roel.predict(x)
            t, lam = ac.theta.data, ac.lam.data
            bad += int(np.sum(~(np.abs(t) < limit)) + np.sum(~((lam > 0) & (lam < 1))))
        violations[limit] = bad
    return violations


def rotate_audit(trials: int = 100, seed: int = 0) -> list[AuditRow]:
    rng = np.random.default_rng(seed)
    rows = []
    for deg, err in grid_rotation_errors(rng).items():
        rows.append(AuditRow(f"rotate_kernel@{deg}", "rotate", err, float("nan"), GRID_TOL, err <= GRID_TOL))
    x = smooth_noise(rng, (1, 33, 33))
    kern = rng.standard_normal((1, 1, 3, 3))
    e0 = rotation_error(x, kern, 0.0, True, 8)
    rows.append(AuditRow("conv@0", "rotate", e0, rotation_error(x, kern, 0.0, False, 8), GRID_TOL, e0 <= GRID_TOL))
    rot, plain = small_angle_trials(trials, seed)
    wins = int(np.sum(rot < plain))
    rows.append(AuditRow(f"conv@{SMALL_ANGLE:g}", "rotate", float(np.median(rot)), float(np.median(plain)),
                         WIN_RATE, wins >= math.ceil(WIN_RATE * trials),
                         f"rotated kernel wins {wins}/{trials}; columns are median errors (rotated, unrotated)"))
    for limit, bad in predictor_bounds(inputs=200, draws=5, seed=seed).items():
        rows.append(AuditRow(f"predictor@{limit:g}", "rotate", float(bad), float("nan"), 0.0, bad == 0,
                             "bound violations"))
    return rows


# --- scale --------------------------------------------------------------------

def scale_audit(trials: int = 10, seed: int = 0, widths=(4, 8, 8, 16), grid=(16, 11)) -> list[AuditRow]:
    """SEL contracts: output shapes equal tap shapes, gates inside (0, 1),
    the identity start, and mirror equivariance of the whole block. Running
    statistics are randomised so eval-mode BN is not the identity."""
    shape_err = 0
    eq = ident = 0.0
    gate_bad = 0
    for i in range(trials):
        rng = np.random.default_rng([seed, i])
        sel = SEL(widths, r=4, rng=rng, dtype=np.float64)
        for bn in [sel.reduce_bn, sel.expand_bn, *sel.gate_bns]:
            bn.running_mean = rng.standard_normal(bn.running_mean.shape) * 0.1
            bn.running_var = rng.uniform(0.5, 1.5, bn.running_var.shape)
        sel.eval()
        taps = [rng.random((2, c) + tuple(grid)) for c in widths]
        with no_tape():
            outs = sel(taps)
            outs_m = sel([mirror(t) for t in taps])
            gates = sel.gates(sel.cross_scale(sel.reduce_channels(assemble_multiscale(taps))))
        shape_err += sum(o.shape != t.shape for o, t in zip(outs, taps))
        eq = max(eq, max(_max_abs(om.data, mirror(o.data)) for o, om in zip(outs, outs_m)))
        gate_bad += sum(int(np.sum(~((g.data > 0) & (g.data < 1)))) for g in gates)
        start = SEL(widths, r=4, identity_init=True, rng=rng, dtype=np.float64).eval()
        with no_tape():
            ident = max(ident, max(_max_abs(o.data, t) for o, t in zip(start(taps), taps)))
    return [
        AuditRow("sel_shapes", "scale", float(shape_err), float("nan"), 0.0, shape_err == 0),
        AuditRow("sel_reflect", "scale", eq, float("nan"), REFLECT_TOL, eq <= REFLECT_TOL),
        AuditRow("sel_identity_init", "scale", ident, float("nan"), GRID_TOL, ident <= GRID_TOL),
        AuditRow("sel_gate_bounds", "scale", float(gate_bad), float("nan"), 0.0, gate_bad == 0,
                 "gate entries outside (0, 1)"),
    ]


def reflect_rows(cfg: BackboneConfig, trials: int, seed: int, debug_break: bool = False,
                 strided_inputs: int = 100) -> list[AuditRow]:
    """Per-layer rows on ``cfg`` plus, for a strided config, the embedding
    invariance versus distance row."""
    net = Network(cfg, seed=seed)
    if debug_break:
        net.break_equivariance()
    rows = reflect_audit(net, trials, seed)
    if not cfg.audit_mode:
        rows.append(strided_reflect_row(net, strided_inputs, seed))
    return rows


# --- gradients ----------------------------------------------------------------

GRAD_TOL = 1e-3


def _weighted(out, weights) -> Tensor:
    return tsum(out * weights)


def gradient_suite(seed: int = 0) -> list[tuple[str, float]]:
    """Tape versus finite differences in float64 on small shapes; one entry
    per operator family."""
    rng = np.random.default_rng(seed)
    r = lambda *s: rng.standard_normal(s)
    checks: list[tuple[str, float]] = []

    def add(name, f, point, **kw):
        checks.append((name, grad_check(f, point, **kw)))

    spec = ConvSpec(3, 2, 1, 1)
    w_out = r(2, 3, 4, 3)
    add("conv2d", lambda x, w, b: _weighted(conv2d(x, w, b, spec), w_out), [r(2, 3, 7, 6), r(3, 3, 3, 3), r(3)])
    w_rs = r(2, 5, 7)
    add("bilinear_resize", lambda x: _weighted(bilinear_resize(x, (5, 7)), w_rs), [r(2, 4, 3)])
    w_k = r(2, 2, 3, 3)
    theta = np.array(17.0)
    add("rotate_kernel[K]", lambda k: _weighted(rotate_kernel(k, theta), w_k), [r(2, 2, 3, 3)])
    kern = r(2, 2, 3, 3)
    x_rot = r(1, 2, 6, 5)
    w_rc = r(1, 2, 6, 5)
    add("rotate_kernel[theta]",
        lambda t: _weighted(conv2d(x_rot, rotate_kernel(kern, t), None, ConvSpec(3, 1, 1)), w_rc),
        [np.array(17.0)], step=1e-4)
    sel = SEL((2, 2, 2, 2), r=2, rng=rng, dtype=np.float64)
    f_c = r(2, 4, 3, 3)
    w_att = r(2, 4, 3, 3)

    def attention(fc, wq, wk, wv):
        sel.wq, sel.wk, sel.wv = wq, wk, wv
        return _weighted(sel.cross_scale(fc), w_att)

    add("attention", attention, [f_c, sel.wq.data, sel.wk.data, sel.wv.data])
    tokens = r(2, 5, 4)
    w_ffn = r(2, 5, 4)

    def ffn(t, a, b):
        sel.ffn1, sel.ffn2 = a, b
        return _weighted(sel.ffn(t), w_ffn)

    add("ffn", ffn, [tokens, sel.ffn1.data, sel.ffn2.data])
    for kind, axis in (("batch_norm", 1), ("layer_norm", -3)):
        x = r(4, 3, 2, 2)
        state = NormState(x.shape[axis], np.float64)
        w_n = r(*x.shape)

        def norm(xx, g, b, kind=kind, axis=axis, state=state, w_n=w_n):
            state.weight, state.bias = g, b
            return _weighted(normalize(xx, kind, state, "train", axis), w_n)

        add(kind, norm, [x, 1.0 + 0.1 * r(x.shape[axis]), r(x.shape[axis])])
    w_hp = r(2, 4, 3)
    add("horizontal_pool", lambda f: _weighted(horizontal_pool(f, 4), w_hp), [r(2, 3, 9, 5)])
    labels = np.array([0, 0, 1, 1, 2])
    add("triplet_loss", lambda e: triplet_loss(e, labels, 0.5)[0], [r(2, 5, 3)])
    add("cross_entropy", lambda z: cross_entropy(z, labels), [r(2, 5, 4)])
    return checks
