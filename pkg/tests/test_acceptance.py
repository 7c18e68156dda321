"""Acceptance suite: one test per release criterion, each printing PASS/FAIL.

Criteria 3-9 share two expensive session fixtures: the full toy training run
(64 covers at 128x128, 3000 steps) and the SyncNet phase on top of it. Run
with ``pytest tests/test_acceptance.py -v -s`` to watch progress; the whole
module takes roughly an hour on a 2-core desktop CPU, dominated by training.
"""

import time

import numpy as np
import pytest

from oracles import estimate_transform_exhaustive
from wmk import cli
from wmk import tensor as T
from wmk.bench import geometry_trial, GeometryRange, IDENTITY, jpeg_condition, measure_latency, noise_condition
from wmk.covers import make_cover_set, synth_cover
from wmk.decoder import crop_to_grid, decode_message, init_decoder_params
from wmk.distortions import diff_jpeg, gaussian_noise, scale_translate
from wmk.encoder import (MASK_H, MASK_W, init_encoder_params, precompute_overlay,
                         random_message)
from wmk.imageio import save_png
from wmk.metrics import bit_accuracy, is_recoverable, psnr, transform_error
from wmk.rng import Rng
from wmk.sync import (SearchGrid, estimate_transform, rectify, syncnet_forward,
                      universal_template)
from wmk.tensor import Tensor, grad_check
from wmk.training import (SyncTrainConfig, TrainConfig, loss_joint, save_state,
                          train_joint, train_syncnet)

pytestmark = pytest.mark.acceptance


def report(num, name, ok, detail=""):
    print(f"\nACCEPTANCE {num} {name}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# shared trained models
# ---------------------------------------------------------------------------

TOY_COVERS_SEED = 7
TOY_CFG = TrainConfig(steps=3000, batch=4, lr=1e-3, seed=0, image_size=(128, 128),
                      checkpoint_every=1000, log_interval=100)
SYNC_CFG = SyncTrainConfig(steps=2200, batch=4, lr=1e-3, seed=1)


@pytest.fixture(scope="session")
def toy_covers():
    return make_cover_set(Rng(TOY_COVERS_SEED), 64, 128, 128)


@pytest.fixture(scope="session")
def heldout_covers():
    return make_cover_set(Rng(TOY_COVERS_SEED + 1000), 24, 128, 128)


@pytest.fixture(scope="session")
def toy_run(toy_covers):
    t0 = time.time()
    state, rows = train_joint(toy_covers, TOY_CFG)
    return state, rows, time.time() - t0


@pytest.fixture(scope="session")
def toy_state(toy_run):
    return toy_run[0]


@pytest.fixture(scope="session")
def sync_state(toy_state, toy_covers):
    state, _ = train_syncnet(toy_covers, toy_state, SYNC_CFG)
    return state


def _clean_accuracy(state, covers, seed, distort=None):
    accs = []
    for i, cover in enumerate(covers):
        rng = Rng(seed).child("eval", i)
        msg = random_message(rng.child("m"))
        img = precompute_overlay(msg, state.encoder).embed_into(cover)
        if distort is not None:
            img = distort(img, rng.child("d"))
        accs.append(bit_accuracy(decode_message(crop_to_grid(img), state.decoder), msg))
    return float(np.mean(accs))


# ---------------------------------------------------------------------------
# criterion 1: gradient suite
# ---------------------------------------------------------------------------


def test_criterion_1_gradient_suite():
    from test_tensor import GRAD_CASES

    t0 = time.time()
    worst = {}
    for case, builder in GRAD_CASES.items():
        errs = [grad_check(*builder(Rng(5000 + s)), eps=1e-3) for s in range(20)]
        worst[case] = max(errs)

    # composed Eq.3 graph at 32x64: image side and a parameter tensor
    rng = Rng(42)
    enc = init_encoder_params(rng.child("e"))
    dec = init_decoder_params(rng.child("d"), matched=False)
    cover = synth_cover(rng.child("c"), 32, 64)
    msg = random_message(rng.child("m"))
    h2 = dec.tensors_by_name["dec/h2/w"]

    def joint_wrt_head(p):
        dec.tensors_by_name["dec/h2/w"] = p
        out, _ = loss_joint(cover, msg, enc, dec)
        dec.tensors_by_name["dec/h2/w"] = h2
        return out

    worst["eq3_wrt_head"] = grad_check(joint_wrt_head, Tensor(h2.data.copy()),
                                       eps=1e-3, max_entries=128, rng=rng.child("s1"))

    we = enc.weight

    def joint_wrt_encoder(p):
        enc.weight = p
        out, _ = loss_joint(cover, msg, enc, dec)
        enc.weight = we
        return out

    worst["eq3_wrt_encoder"] = grad_check(joint_wrt_encoder, Tensor(we.data.copy()),
                                          eps=1e-3, max_entries=96, rng=rng.child("s2"))
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    report(1, "gradient suite", not bad and elapsed < 120,
           f"worst={max(worst.values()):.2e} runtime={elapsed:.0f}s {bad or ''}")


# ---------------------------------------------------------------------------
# criterion 2: encoder algebra
# ---------------------------------------------------------------------------


def test_criterion_2_encoder_algebra(toy_state):
    enc = toy_state.encoder
    a = enc.alpha
    rng = Rng(2025)
    cache = precompute_overlay(random_message(rng.child("m")), enc)

    diffs = None
    identical = True
    psnrs = []
    for i in range(50):
        cover = synth_cover(rng.child("c", i), 64, 64)
        marked64 = cache.embed_into(cover, dtype=np.float64)
        d = (marked64 - (1.0 - a) * cover.astype(np.float64)).astype(np.float32)
        if diffs is None:
            diffs = d
        elif not np.array_equal(d, diffs):
            identical = False
        psnrs.append(psnr(marked64.astype(np.float32), cover))
    bound = -20.0 * np.log10(a)
    all_above = all(p >= bound - 1e-9 for p in psnrs)
    mean_psnr = float(np.mean(psnrs))
    ok = identical and all_above and 38.0 <= mean_psnr <= 44.0
    report(2, "encoder algebra", ok,
           f"bit-exact={identical} min_psnr={min(psnrs):.2f} (bound {bound:.2f}) mean_psnr={mean_psnr:.2f}")


# ---------------------------------------------------------------------------
# criterion 3: toy training
# ---------------------------------------------------------------------------


def test_criterion_3_toy_training(toy_run, heldout_covers):
    state, rows, elapsed = toy_run
    train_acc = float(rows[-1][3])
    held = _clean_accuracy(state, heldout_covers, seed=31)
    ok = held >= 0.95 and train_acc >= 0.99 and elapsed <= 45 * 60
    report(3, "toy training", ok,
           f"held-out={held:.4f} train-batch={train_acc:.4f} runtime={elapsed / 60:.1f}min")


# ---------------------------------------------------------------------------
# criterion 4: robust decode
# ---------------------------------------------------------------------------


def test_criterion_4_robust_decode(toy_state, heldout_covers):
    noise = _clean_accuracy(toy_state, heldout_covers, seed=41,
                            distort=lambda img, r: gaussian_noise(img, 0.02, r))
    jpeg90 = _clean_accuracy(toy_state, heldout_covers, seed=42,
                             distort=lambda img, r: diff_jpeg(img, 90, "444"))
    sweep = {q: _clean_accuracy(toy_state, heldout_covers, seed=43,
                                distort=lambda img, r, q=q: diff_jpeg(img, q, "444"))
             for q in (60, 70, 80, 85, 90)}
    ok = noise >= 0.90 and jpeg90 >= 0.90 and sweep[85] >= sweep[80]
    report(4, "robust decode", ok,
           f"GN(0.02)={noise:.4f} Q90={jpeg90:.4f} sweep={ {q: round(a, 4) for q, a in sweep.items()} }")


# ---------------------------------------------------------------------------
# criterion 5: sync oracle exactness
# ---------------------------------------------------------------------------


def test_criterion_5_sync_oracle():
    t0 = time.time()
    grid = SearchGrid()
    scales = grid.scales()
    rng = Rng(55)
    exact = 0
    for i in range(500):
        s = float(scales[rng.choice(len(scales))])
        dx = float(rng.integers(0, int(np.floor(MASK_W * s - 1e-9)) + 1))
        dy = float(rng.integers(0, int(np.floor(MASK_H * s - 1e-9)) + 1))
        u = universal_template(160, 192, s, dx, dy)
        est = estimate_transform(u, grid)
        if (est.scale, est.dx, est.dy) == (s, dx, dy) and est.residual == 0.0:
            exact += 1

    coarse = SearchGrid(scale_min=0.9, scale_max=1.15, scale_step=0.05)
    sep_eq_full = True
    for i in range(20):
        r = Rng(56).child(i)
        s = float(coarse.scales()[r.choice(len(coarse.scales()))])
        dx, dy = float(r.integers(0, 40)), float(r.integers(0, 20))
        u = universal_template(64, 96, s, dx, dy).astype(np.float64)
        u = np.clip(u + r.normal(0.2, size=u.shape), 0, 1).astype(np.float32)
        est = estimate_transform(u, coarse)
        ex = estimate_transform_exhaustive(u, coarse.scales())
        if abs(est.residual - ex[3]) > 1e-9 * max(1.0, ex[3]):
            sep_eq_full = False
    elapsed = time.time() - t0
    ok = exact == 500 and sep_eq_full and elapsed < 300
    report(5, "sync oracle exactness", ok,
           f"exact={exact}/500 separable==exhaustive={sep_eq_full} runtime={elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criteria 6 + 7: end-to-end geometry and sync error bounds
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def geometry_trials(sync_state):
    covers = make_cover_set(Rng(66), 50, 256, 256)
    geo = GeometryRange(0.8, 1.0, 1.5)
    rows_sync, rows_blind = [], []
    for i, cover in enumerate(covers):
        rows_sync.append(geometry_trial(sync_state, cover, Rng(67).child(i), geo, IDENTITY, use_sync=True))
        rows_blind.append(geometry_trial(sync_state, cover, Rng(67).child(i), geo, IDENTITY, use_sync=False))
    return rows_sync, rows_blind


def test_criterion_6_end_to_end_geometry(geometry_trials):
    rows_sync, rows_blind = geometry_trials
    acc = float(np.mean([r.bit_acc for r in rows_sync]))
    rec = float(np.mean([r.recoverable for r in rows_sync]))
    acc_off = float(np.mean([r.bit_acc for r in rows_blind]))
    ok = acc >= 0.90 and rec >= 0.75 and acc_off < 0.70
    report(6, "end-to-end geometry", ok,
           f"sync-on acc={acc:.4f} recoverable={rec:.2f} sync-off acc={acc_off:.4f}")


def test_criterion_7_sync_error_bounds(geometry_trials):
    rows_sync, _ = geometry_trials
    off = float(np.median([r.offset_err for r in rows_sync]))
    sc = float(np.median([r.scale_err for r in rows_sync]))
    ok = off <= 6.0 and sc <= 0.06
    report(7, "sync error bounds", ok, f"median offset err={off:.2f}px median scale err={sc:.4f}")


# ---------------------------------------------------------------------------
# criterion 8: encoder latency
# ---------------------------------------------------------------------------


def test_criterion_8_latency(toy_state):
    stats = measure_latency(toy_state, size=384, iters=1000, seed=8)
    full = stats["full"].mean_ms
    cached = stats["cached"].mean_ms
    ok = full < 15.0 and cached < 2.0 and cached < full
    report(8, "encoder latency", ok, f"full={full:.2f}ms cached={cached:.3f}ms (384x384, 1000 iters)")


# ---------------------------------------------------------------------------
# criterion 9: modulo property
# ---------------------------------------------------------------------------


def test_criterion_9_modulo_property(toy_state):
    from wmk.sync import TransformEstimate

    all_equal = True
    for i in range(20):
        rng = Rng(90).child(i)
        msg = random_message(rng.child("m"))
        cover = synth_cover(rng.child("c"), 128, 128)
        marked = precompute_overlay(msg, toy_state.encoder).embed_into(cover)
        s = 1.0 + 0.25 * float(rng.uniform(0, 1))
        dx = float(rng.uniform(0, 40))
        dy = float(rng.uniform(0, 20))
        moved = scale_translate(marked, s, dx, dy)
        m1 = decode_message(crop_to_grid(rectify(moved, TransformEstimate(s, dx, dy, 0.0))), toy_state.decoder)
        m2 = decode_message(crop_to_grid(rectify(moved, TransformEstimate(s, dx + MASK_W * s, dy + MASK_H * s, 0.0))), toy_state.decoder)
        if not np.array_equal(m1, m2):
            all_equal = False
    report(9, "modulo offset property", all_equal, "20/20 cases bit-identical" if all_equal else "mismatch")


# ---------------------------------------------------------------------------
# criterion 10: determinism of the CLI surfaces
# ---------------------------------------------------------------------------


def test_criterion_10_cli_determinism(tmp_path, capsys):
    covers_dir = tmp_path / "covers"
    covers_dir.mkdir()
    for i in range(3):
        save_png(covers_dir / f"c{i}.png", synth_cover(Rng(100 + i), 64, 64))
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps = 8\nbatch = 2\nimage_h = 64\nimage_w = 64\nseed = 12\n"
                   "warmup_steps = 4\nlog_interval = 4\ncheckpoint_every = 8\n")
    m1, m2 = tmp_path / "m1.wmk", tmp_path / "m2.wmk"
    assert cli.main(["train", str(covers_dir), "--config", str(cfg), "--out", str(m1)]) == 0
    assert cli.main(["train", str(covers_dir), "--config", str(cfg), "--out", str(m2)]) == 0
    ckpt_same = m1.read_bytes() == m2.read_bytes()

    sync_cfg = tmp_path / "sync.cfg"
    sync_cfg.write_text("sync_steps = 4\nsync_batch = 2\nlog_interval = 2\ncheckpoint_every = 4\n")
    s1 = tmp_path / "s1.wmk"
    assert cli.main(["train-sync", str(covers_dir), "--checkpoint", str(m1),
                     "--config", str(sync_cfg), "--out", str(s1)]) == 0

    bench_cfg = tmp_path / "bench.cfg"
    bench_cfg.write_text("bench_size = 64\nbench_trials = 2\n"
                         "search_scale_min = 0.95\nsearch_scale_max = 1.1\nsearch_scale_step = 0.05\n")
    b1, b2 = tmp_path / "b1", tmp_path / "b2"
    for d in (b1, b2):
        assert cli.main(["bench", str(covers_dir), "--checkpoint", str(s1),
                         "--out", str(d), "--config", str(bench_cfg), "--seed", "3"]) == 0
    capsys.readouterr()
    csv_same = (b1 / "table.csv").read_bytes() == (b2 / "table.csv").read_bytes()
    report(10, "determinism", ckpt_same and csv_same,
           f"checkpoints identical={ckpt_same} bench CSVs identical={csv_same}")
