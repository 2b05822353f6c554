"""Acceptance gate: ten numbered criteria, one test and one printed line each.

Each test computes its verdict first, prints a single
``criterion N ...: PASS/FAIL`` line on the real stdout (visible without
``-s``), and only then asserts, so the printed report always covers all
ten. Oracles are independent of the implementation: pure-Python loops
for the scan, a quadratic DFT for the FFT, hand-derived closed forms
for the gate discretization, and central finite differences for the
end-to-end gradients.
"""
import cmath
import math
import os
import time

import numpy as np
import pytest

from ssmseg.checkpoint import CheckpointError, load_tensors, save_tensors
from ssmseg.config import RunConfig
from ssmseg.data import (PnmError, generate_clip, make_scene_specs,
                         normalize_frames, read_pgm, read_ppm, write_pgm,
                         write_ppm)
from ssmseg.gates import RefinerSettings, invert_gate, refine
from ssmseg.gradcheck import check_leaves
from ssmseg.spectral import (build_band_partition, channel_info_loss, fft2d,
                             spectrum_features)
from ssmseg.ssm import SsmParams, discretize, scan
from ssmseg.tensor import Tensor, no_grad, set_default_dtype
from ssmseg.train import (LossConfig, build_from_config, eval_clips_for,
                          eval_loop, total_loss, train_loop)


@pytest.fixture(autouse=True)
def full_precision():
    set_default_dtype("f64")
    yield
    set_default_dtype("f32")


@pytest.fixture
def announce(capfd):
    """Print one line on the real terminal, bypassing pytest capture."""
    def _announce(line: str) -> None:
        with capfd.disabled():
            print(line)
    return _announce


def verdict(ok: bool) -> str:
    return "PASS" if ok else "FAIL"


# ---------------------------------------------------------------------------
# 1. scan equals the unrolled recurrence
# ---------------------------------------------------------------------------

def unrolled_recurrence(decay, update, readout, x):
    """Reference scan in plain Python floats: per channel and state,
    h <- a*h + b*x[t], then y[t] = sum_s c*h."""
    length, dim = x.shape
    states = decay.shape[1]
    h = [[0.0] * states for _ in range(dim)]
    y = np.empty((length, dim))
    for t in range(length):
        for d in range(dim):
            acc = 0.0
            for s in range(states):
                h[d][s] = float(decay[d, s]) * h[d][s] \
                    + float(update[d, s]) * float(x[t, d])
                acc += float(readout[d, s]) * h[d][s]
            y[t, d] = acc
    return y, np.array(h)


def test_criterion_01_scan_matches_unrolled_recurrence(announce):
    rng = np.random.default_rng(20260817)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(50):
        dim = int(rng.integers(1, 9))
        states = int(rng.integers(1, 9))
        length = int(rng.integers(1, 65))
        decay = rng.uniform(0.02, 0.999, (dim, states))
        update = rng.normal(0.0, 1.0, (dim, states))
        readout = rng.normal(0.0, 1.0, (dim, states))
        x = rng.normal(0.0, 1.0, (length, dim))
        y, h_final = scan(Tensor(decay), Tensor(update), Tensor(readout),
                          Tensor(x))
        y_ref, h_ref = unrolled_recurrence(decay, update, readout, x)
        worst = max(worst,
                    float(np.abs(y.data - y_ref).max()),
                    float(np.abs(h_final.data - h_ref).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 10.0
    announce(f"criterion 1 scan vs unrolled recurrence: {verdict(ok)} "
             f"(50 configs, max abs diff {worst:.2e}, {elapsed:.1f}s)")
    assert worst < 1e-10
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. discretization closed form
# ---------------------------------------------------------------------------

def test_criterion_02_discretization_closed_form(announce):
    # a_log = 0 gives the continuous gate -exp(0) = -1; dt_raw = 0 gives
    # step softplus(0) = ln 2. Hand-solving the zero-order hold:
    # decay = exp(-ln 2) = 1/2, update = (decay - 1)/(-1) * b = b/2.
    rng = np.random.default_rng(7)
    b = rng.normal(0.0, 1.0, (5, 3))
    params = SsmParams(a_log=Tensor(np.zeros((5, 3))),
                       b=Tensor(b.copy()),
                       c=Tensor(rng.normal(0.0, 1.0, (5, 3))),
                       dt_raw=Tensor(np.zeros(5)))
    gates = discretize(params)
    err_decay = float(np.abs(gates.decay.data - 0.5).max())
    err_update = float(np.abs(gates.update.data - 0.5 * b).max())
    worst = max(err_decay, err_update)
    ok = worst < 1e-12
    announce(f"criterion 2 discretization closed form: {verdict(ok)} "
             f"(decay err {err_decay:.2e}, update err {err_update:.2e})")
    assert worst < 1e-12


# ---------------------------------------------------------------------------
# 3. FFT against a naive quadratic DFT
# ---------------------------------------------------------------------------

def naive_dft2(x: np.ndarray) -> np.ndarray:
    h, w = x.shape
    out = np.empty((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            acc = 0j
            for r in range(h):
                for c in range(w):
                    acc += x[r, c] * cmath.exp(-2j * math.pi
                                               * (u * r / h + v * c / w))
            out[u, v] = acc
    return out


def test_criterion_03_fft_correctness(announce):
    rng = np.random.default_rng(31)
    x = rng.normal(0.0, 1.0, (16, 16))
    planes = fft2d(Tensor(x))
    # the implementation stores the zero-frequency bin at the center of
    # the plane; rotating the raw DFT layout by half along each axis is
    # the same permutation and involves no arithmetic
    ref = np.roll(naive_dft2(x), (8, 8), axis=(0, 1))
    dft_err = max(float(np.abs(planes.re.data - ref.real).max()),
                  float(np.abs(planes.im.data - ref.imag).max()))

    power_space = float(np.sum(x * x))
    power_freq = float(np.sum(planes.re.data ** 2 + planes.im.data ** 2)) / x.size
    parseval_rel = abs(power_space - power_freq) / power_space

    part = build_band_partition(16, 16, 6)
    flat = spectrum_features(Tensor(np.full((16, 16), 0.73)), part,
                             high_bands=2)
    flat_feature = float(np.abs(flat.data).max())

    ok = dft_err < 1e-6 and parseval_rel < 1e-9 and flat_feature == 0.0
    announce(f"criterion 3 fft correctness: {verdict(ok)} "
             f"(dft diff {dft_err:.2e}, parseval rel {parseval_rel:.2e}, "
             f"constant-image feature {flat_feature:g})")
    assert dft_err < 1e-6
    assert parseval_rel < 1e-9
    assert flat_feature == 0.0


# ---------------------------------------------------------------------------
# 4. gate inversion algebra
# ---------------------------------------------------------------------------

def test_criterion_04_gate_algebra(announce):
    # The value map a -> max + min - a is an involution of the reals, but
    # no float implementation can return every input bit for bit: inside
    # [min, max] the float grid is denser near the small-magnitude end,
    # so the reflected value must round. The check therefore allows the
    # inversion's round trip to deviate by at most two ulp of the range
    # scale 2*max|a| per draw, and demands exact rank reversal plus the
    # refined gate lying elementwise between its two endpoints.
    rng = np.random.default_rng(41)
    worst_ulp_ratio = 0.0  # round-trip deviation over its per-draw bound
    rank_ok = True
    between_ok = True
    settings = RefinerSettings(detach_spectrum=False)
    for _ in range(20):
        dim = int(rng.integers(2, 9))
        states = int(rng.integers(1, 5))
        frames = int(rng.integers(1, 4))
        a = Tensor(-np.exp(rng.normal(0.0, 1.0, (dim, states))),
                   requires_grad=True)
        inverted = invert_gate(a, axis="channel")
        round_trip = invert_gate(inverted, axis="channel")
        bound = 2.0 * float(np.spacing(2.0 * np.abs(a.data).max()))
        deviation = float(np.abs(round_trip.data - a.data).max())
        worst_ulp_ratio = max(worst_ulp_ratio, deviation / bound)
        for s in range(states):
            fwd = np.argsort(a.data[:, s], kind="stable")
            rev = np.argsort(inverted.data[:, s], kind="stable")
            if not np.array_equal(fwd, rev[::-1]):
                rank_ok = False

        features = Tensor(np.abs(rng.normal(0.0, 1.0, (frames, dim))),
                          requires_grad=True)
        gate = refine(a, features, settings)
        lo = np.minimum(a.data, gate.inverted.data)
        hi = np.maximum(a.data, gate.inverted.data)
        slack = 4.0 * np.spacing(np.abs(hi) + np.abs(lo))
        if not (np.all(gate.refined.data >= lo - slack)
                and np.all(gate.refined.data <= hi + slack)):
            between_ok = False

    ok = rank_ok and between_ok and worst_ulp_ratio <= 1.0
    announce(f"criterion 4 gate inversion algebra: {verdict(ok)} "
             f"(round trip worst at {worst_ulp_ratio:.2f}x the 2-ulp bound; "
             f"rank reversal {rank_ok}; refined between endpoints {between_ok})")
    assert worst_ulp_ratio <= 1.0
    assert rank_ok
    assert between_ok


# ---------------------------------------------------------------------------
# 5. end-to-end gradient check
# ---------------------------------------------------------------------------

def test_criterion_05_end_to_end_gradients(announce):
    t0 = time.perf_counter()
    cfg = RunConfig(variant="rs-ssm", layers=1, embed_dim=4, state_dim=2,
                    img_size=8, frames=2, classes=3, shapes=1, train_clips=1,
                    precision="f64", detach_spectrum=False)
    set_default_dtype(cfg.precision)
    spec = make_scene_specs(1, cfg.data_seed, height=cfg.img_size,
                            width=cfg.img_size, frames=cfg.frames,
                            n_classes=cfg.classes, n_shapes=cfg.shapes,
                            noise_amp=cfg.noise)[0]
    clip = generate_clip(spec)
    frames = normalize_frames(clip.frames)
    model = build_from_config(cfg)
    loss_cfg = LossConfig(cfg.ce_weight, cfg.ci_weight)

    def forward():
        logits, profile_losses, _, _ = model.forward(frames)
        return total_loss(logits, clip.masks, profile_losses, loss_cfg,
                          cfg.ignore_index).total

    rows = check_leaves(lambda: float(forward().data),
                        dict(model.named_parameters()),
                        lambda: forward().backward(),
                        step=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    bad = [r for r in rows if not r.ok]
    worst = max(r.max_rel_err for r in rows)
    ok = not bad and elapsed < 300.0
    announce(f"criterion 5 end-to-end gradient check: {verdict(ok)} "
             f"({len(rows)} leaves, worst rel err {worst:.2e}, {elapsed:.1f}s)")
    assert not bad, [r.name for r in bad]
    assert elapsed < 300.0


# ---------------------------------------------------------------------------
# 6. channel-information loss behavior
# ---------------------------------------------------------------------------

def mean_profile_loss(model, clips) -> float:
    vals = []
    with no_grad():
        for clip in clips:
            _, losses, _, _ = model.forward(normalize_frames(clip.frames))
            vals.extend(float(l.data) for l in losses)
    return float(np.mean(vals))


def test_criterion_06_channel_info_loss(announce):
    rng = np.random.default_rng(61)
    in_range = True
    for _ in range(25):
        n = int(rng.integers(1, 7))
        d = int(rng.integers(2, 9))
        feats = np.abs(rng.normal(0.0, 1.0, (n, d)))
        if rng.random() < 0.3:
            feats[rng.integers(0, n)] = feats[0]
        val = float(channel_info_loss(Tensor(feats)).data)
        if not 0.0 <= val <= 1.0:
            in_range = False

    reduced = []
    deltas = []
    for seed in (0, 1, 2):
        cfg = RunConfig(variant="rs-ssm", seed=seed, steps=200, ci_weight=0.5,
                        detach_spectrum=False, train_clips=40, eval_clips=8)
        clips = eval_clips_for(cfg)
        before = mean_profile_loss(build_from_config(cfg), clips)
        out = train_loop(cfg)
        after = mean_profile_loss(out.model, clips)
        reduced.append(after < before)
        deltas.append(before - after)

    ok = in_range and all(reduced)
    announce(f"criterion 6 channel-information loss: {verdict(ok)} "
             f"(range [0,1] {in_range}; 200-step reduction "
             f"{sum(reduced)}/3 seeds, drops "
             f"{' '.join(f'{d:.1e}' for d in deltas)})")
    assert in_range
    assert all(reduced)


# ---------------------------------------------------------------------------
# 7. linear scan complexity
# ---------------------------------------------------------------------------

def test_criterion_07_linear_complexity(announce):
    from ssmseg.cli import _time_scan
    _time_scan(64, 64, 8, reps=1)  # absorb kernel compilation
    lengths = (1024, 2048, 4096, 8192)
    times = [_time_scan(length, 64, 8, reps=5) for length in lengths]
    ratios = []
    for i in range(1, len(lengths)):
        ratios.append(times[i][0] / max(times[i - 1][0], 1e-12))
        ratios.append(times[i][1] / max(times[i - 1][1], 1e-12))
    worst = max(ratios)
    ok = worst <= 2.5
    announce(f"criterion 7 linear scan complexity: {verdict(ok)} "
             f"(doubling ratios fwd/bwd over 1k..8k, worst x{worst:.2f})")
    assert worst <= 2.5


# ---------------------------------------------------------------------------
# 8. ablation direction on the synthetic task
# ---------------------------------------------------------------------------

def test_criterion_08_ablation_direction(announce):
    t0 = time.perf_counter()
    variants = ("rs-ssm", "no-cwap", "bi-v-ssm", "v-ssm")
    mious = {v: [] for v in variants}
    bfs = {v: [] for v in variants}
    shared = None
    for variant in variants:
        for seed in (0, 1, 2):
            cfg = RunConfig(variant=variant, seed=seed)
            if shared is None:
                shared = eval_clips_for(cfg)
            result = train_loop(cfg)
            scored = eval_loop(cfg, result.model, clips=shared)
            mious[variant].append(scored.miou)
            bfs[variant].append(scored.boundary_f)
    elapsed = time.perf_counter() - t0

    mean = {v: float(np.mean(mious[v])) for v in variants}
    margin = mean["rs-ssm"] - mean["v-ssm"]
    outer_ok = margin > 0.0
    boundary_wins = sum(r >= b for r, b in
                        zip(bfs["rs-ssm"], bfs["bi-v-ssm"]))
    chain = " ".join(f"{v} {mean[v]:.4f}" for v in variants)
    monotone = (mean["rs-ssm"] >= mean["no-cwap"] >= mean["bi-v-ssm"]
                >= mean["v-ssm"])

    ok = outer_ok and boundary_wins >= 2 and elapsed < 1800.0
    announce(f"criterion 8 ablation direction: {verdict(ok)} "
             f"(mean miou {chain}; outer margin +{margin:.4f}; boundary wins "
             f"{boundary_wins}/3; full chain monotone {monotone}, reported "
             f"only; {elapsed:.0f}s)")
    assert outer_ok, mean
    assert boundary_wins >= 2, (bfs["rs-ssm"], bfs["bi-v-ssm"])
    assert elapsed < 1800.0


# ---------------------------------------------------------------------------
# 9. bitwise reproducibility
# ---------------------------------------------------------------------------

def test_criterion_09_bitwise_reproducibility(announce, tmp_path):
    cfg = RunConfig(variant="rs-ssm", layers=1, embed_dim=8, state_dim=2,
                    bands=4, high_bands=2, steps=10, img_size=16, frames=2,
                    classes=3, shapes=2, train_clips=3, eval_clips=2,
                    precision="f64", seed=11)
    artifacts = ("train_log.csv", "model_final.ckpt", "metrics.txt",
                 "metrics.csv")
    payloads = []
    for run in ("first", "second"):
        out = str(tmp_path / run)
        os.makedirs(out)
        result = train_loop(cfg, out_dir=out)
        eval_loop(cfg, result.model, out_dir=out)
        blob = {}
        for name in artifacts:
            with open(os.path.join(out, name), "rb") as f:
                blob[name] = f.read()
        payloads.append(blob)

    same = {name: payloads[0][name] == payloads[1][name] for name in artifacts}
    ok = all(same.values())
    detail = ", ".join(f"{n} {'ok' if v else 'DIFFERS'}"
                       for n, v in same.items())
    announce(f"criterion 9 bitwise reproducibility: {verdict(ok)} ({detail})")
    assert ok, same


# ---------------------------------------------------------------------------
# 10. format round trips and truncation diagnostics
# ---------------------------------------------------------------------------

def test_criterion_10_format_round_trips(announce, tmp_path):
    rng = np.random.default_rng(101)
    ckpt = str(tmp_path / "state.ckpt")
    named = {
        "enc.weight": rng.normal(0.0, 1.0, (7, 3)),
        "enc.bias": rng.normal(0.0, 1.0, (7,)).astype(np.float32),
        "odd.cube": rng.normal(0.0, 1.0, (2, 3, 4, 5)),
        "scalar": np.array(3.5),
    }
    save_tensors(ckpt, named)
    loaded = load_tensors(ckpt)
    ckpt_ok = (set(loaded) == set(named)
               and all(np.array_equal(loaded[k], np.asarray(named[k]))
                       and loaded[k].dtype == np.asarray(named[k]).dtype
                       for k in named))

    ppm = str(tmp_path / "img.ppm")
    pgm = str(tmp_path / "img.pgm")
    rgb = rng.integers(0, 256, (9, 13, 3), dtype=np.uint8)
    gray = rng.integers(0, 256, (9, 13), dtype=np.uint8)
    write_ppm(ppm, rgb)
    write_pgm(pgm, gray)
    image_ok = (np.array_equal(read_ppm(ppm), rgb)
                and np.array_equal(read_pgm(pgm), gray))

    diagnostics = []
    with open(ckpt, "rb") as f:
        whole = f.read()
    cut_ckpt = str(tmp_path / "cut.ckpt")
    with open(cut_ckpt, "wb") as f:
        f.write(whole[:len(whole) * 2 // 3])
    try:
        load_tensors(cut_ckpt)
        diagnostics.append(False)
    except CheckpointError as exc:
        diagnostics.append(bool(str(exc)))

    with open(ppm, "rb") as f:
        img_bytes = f.read()
    cut_ppm = str(tmp_path / "cut.ppm")
    with open(cut_ppm, "wb") as f:
        f.write(img_bytes[:len(img_bytes) - 10])
    try:
        read_ppm(cut_ppm)
        diagnostics.append(False)
    except PnmError as exc:
        diagnostics.append("truncated" in str(exc))

    header_only = str(tmp_path / "header.pgm")
    with open(header_only, "wb") as f:
        f.write(b"P5\n13 9\n")
    try:
        read_pgm(header_only)
        diagnostics.append(False)
    except PnmError as exc:
        diagnostics.append(bool(str(exc)))

    diag_ok = all(diagnostics)
    ok = ckpt_ok and image_ok and diag_ok
    announce(f"criterion 10 format round trips: {verdict(ok)} "
             f"(checkpoint bitwise {ckpt_ok}, images bitwise {image_ok}, "
             f"truncation diagnosed {diag_ok})")
    assert ckpt_ok
    assert image_ok
    assert diag_ok
