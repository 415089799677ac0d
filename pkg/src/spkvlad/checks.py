"""Self-verification suites: finite-difference gradient checks and the
layer-table shape contract. Shared by the CLI (`grad-check`, `shape-check`)
and the acceptance tests.

All gradient checks run in float64 with eps = 1e-5 and must come in under
1e-4 max relative error; float32 differencing cannot resolve that, which is
why the model supports a float64 build.
"""

from __future__ import annotations

import numpy as np

from . import losses, model as m, tensor as t
from .model import ModelConfig, TrunkConfig
from .tensor import Tensor

GRAD_TOL = 1e-4
EPS = 1e-5

# Structurally complete thin ResNet (all stages, both pools, the 7x1
# projection) at widths small enough to difference every parameter.
TINY_TRUNK = TrunkConfig(stem_width=2, stage_widths=((2, 3), (3, 4), (4, 6), (6, 8)),
                         block_counts=(2, 3, 3, 3), frame_width=8)
TINY_MODEL = ModelConfig(trunk=TINY_TRUNK, aggregation="ghostvlad", clusters=2,
                         ghost_clusters=1, embed_dim=4, num_classes=3,
                         classifier="cosine", dtype="float64")


def _projector(rng, shape):
    """Fixed random projection to a scalar so grads flow through every output."""
    w = Tensor(rng.standard_normal(shape))
    return lambda out: t.sum_all(t.mul(out, w))


def op_grad_checks(seed: int = 0) -> list[tuple[str, float]]:
    """Finite-difference check of every differentiable primitive; (name, err) rows."""
    results = []

    def check(name, fn, params):
        results.append((name, t.grad_check(fn, params, eps=EPS)))

    rng = np.random.default_rng(seed)

    x = t.parameter(rng.standard_normal((1, 5, 7, 2)))
    k = t.parameter(rng.standard_normal((3, 3, 2, 4)) * 0.5)
    pv = _projector(rng, (1, 3, 5, 4))
    check("conv2d/valid", lambda: pv(t.conv2d(x, k, (1, 1), "valid")), [x, k])
    ps = _projector(rng, (1, 3, 4, 4))
    check("conv2d/same-stride2", lambda: ps(t.conv2d(x, k, (2, 2), "same")), [x, k])

    xb = t.parameter(rng.standard_normal((4, 3, 3, 2)))
    gamma = t.parameter(rng.standard_normal(2) * 0.5 + 1.0)
    beta = t.parameter(rng.standard_normal(2) * 0.1)
    state = t.BatchNormState(2, dtype=np.float64)
    pb = _projector(rng, (4, 3, 3, 2))
    check("batchnorm2d/train",
          lambda: pb(t.batchnorm2d(xb, gamma, beta, state, True, update_stats=False)),
          [xb, gamma, beta])

    xl = t.parameter(rng.standard_normal((2, 3)))
    wl = t.parameter(rng.standard_normal((3, 4)))
    bl = t.parameter(rng.standard_normal(4))
    pl = _projector(rng, (2, 4))
    check("linear", lambda: pl(t.linear(xl, wl, bl)), [xl, wl, bl])

    xp = t.parameter(rng.standard_normal((1, 6, 6, 2)))
    pp = _projector(rng, (1, 3, 3, 2))
    check("maxpool2d", lambda: pp(t.maxpool2d(xp, (2, 2), (2, 2))), [xp])

    xs = t.parameter(rng.standard_normal((3, 5)))
    psm = _projector(rng, (3, 5))
    check("softmax_rows", lambda: psm(t.softmax_rows(xs)), [xs])

    xn = t.parameter(rng.standard_normal((4, 6)))
    pn = _projector(rng, (4, 6))
    check("l2_normalize", lambda: pn(t.l2_normalize(xn, axis=1)), [xn])

    feats = t.parameter(rng.standard_normal((5, 4)))
    vlad = m.VladParams(3, 0, 4, rng=rng, dtype=np.float64)
    pvl = _projector(rng, (12,))
    check("netvlad_aggregate", lambda: pvl(m.netvlad_aggregate(feats, vlad)),
          [feats, vlad.w, vlad.b, vlad.c])

    feats_g = t.parameter(rng.standard_normal((5, 4)))
    gvlad = m.VladParams(3, 2, 4, rng=rng, dtype=np.float64)
    pg = _projector(rng, (12,))
    check("ghostvlad_aggregate", lambda: pg(m.ghostvlad_aggregate(feats_g, gvlad)),
          [feats_g, gvlad.w, gvlad.b, gvlad.c])

    logits = t.parameter(rng.standard_normal((3, 5)))
    labels = np.array([0, 3, 2])
    check("softmax_ce", lambda: losses.softmax_ce(logits, labels), [logits])

    fa = t.parameter(rng.standard_normal((4, 6)))
    wa = t.parameter(rng.standard_normal((5, 6)))
    cfg = losses.AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=5)
    am_labels = np.array([0, 1, 4, 2])
    check("am_softmax", lambda: losses.am_softmax(fa, wa, am_labels, cfg), [fa, wa])

    return results


def full_model_grad_check(seed: int = 0, frames: int = 64) -> float:
    """Differencing every parameter of the tiny trunk + GhostVLAD + AM-Softmax."""
    rng = np.random.default_rng(seed)
    model = m.build_model(TINY_MODEL, seed=rng)
    x = Tensor(rng.standard_normal((1, 257, frames, 1)))
    labels = np.array([1])
    cfg = losses.AmSoftmaxConfig(margin=0.4, scale=30.0, num_classes=3)

    def fn():
        emb = model.embedding(x, training=True, update_stats=False)
        return losses.am_softmax(emb, model.classifier.weight, labels, cfg)

    params = list(model.named_params().values())
    return t.grad_check(fn, params, eps=EPS)


# ---------------------------------------------------------------------------
# shape contract
# ---------------------------------------------------------------------------

_FREQ_CHAIN = {"stem": 257, "pool1": 128, "stage1": 128, "stage2": 64,
               "stage3": 32, "stage4": 16, "pool2": 7, "proj": 1}


def expected_time_chain(frames: int) -> dict[str, int]:
    out = {"stem": frames}
    tt = (frames - 2) // 2 + 1
    out["pool1"] = tt
    out["stage1"] = tt
    for stage in ("stage2", "stage3", "stage4"):
        tt = -(-tt // 2)
        out[stage] = tt
    tt = (tt - 1) // 2 + 1
    out["pool2"] = tt
    out["proj"] = tt
    return out


def shape_check(frame_counts=(64, 128, 256, 250), seed: int = 0):
    """Trace the trunk at a narrow width and compare every extent.

    Returns (ok, report_lines). Widths do not affect extents, so the trace
    runs at multiplier 1/16 to keep this under a second per input length.
    """
    cfg = TrunkConfig(width_multiplier=1.0 / 16.0)
    rng = np.random.default_rng(seed)
    trunk = m.build_thin_resnet(cfg, rng)
    lines = []
    ok = True
    for frames in frame_counts:
        trace: list = []
        x = Tensor(np.zeros((1, 257, frames, 1), dtype=np.float32))
        with t.no_grad():
            feats = trunk(x, training=False, trace=trace)
        times = expected_time_chain(frames)
        for tag, shape in trace:
            want = (_FREQ_CHAIN[tag], times[tag])
            got = (shape[1], shape[2])
            good = want == got
            ok &= good
            lines.append(f"T={frames:3d} {tag:7s} {got[0]:3d} x {got[1]:3d}"
                         + ("" if good else f"  MISMATCH, expected {want[0]} x {want[1]}"))
        want_tp = times["proj"]
        got_tp = feats.shape[1]
        good = got_tp == want_tp and feats.shape[2] == trunk.frame_width
        ok &= good
        lines.append(f"T={frames:3d} frames  {got_tp} descriptors of dim {feats.shape[2]}"
                     + ("" if good else f"  MISMATCH, expected {want_tp}"))
    return ok, lines


def parameter_report(seed: int = 0) -> list[str]:
    """Parameter counts of the full-width trunk, residual stack vs everything."""
    trunk = m.build_thin_resnet(TrunkConfig(), np.random.default_rng(seed))
    core = m.trunk_parameter_count(trunk)
    full = m.trunk_parameter_count(trunk, include_frame_projection=True)
    return [
        f"residual trunk (stem + stages): {core:,} parameters",
        f"with 7x1 frame projection:      {full:,} parameters",
    ]
