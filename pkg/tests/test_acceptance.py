"""Acceptance criteria, each checked at its stated tolerance.

Every test carries a ``criterion`` marker; ``conftest.py`` prints one
PASS/FAIL line per criterion, with the measured values, after the run.
"""

import math
import time

import numpy as np
import pytest

from hyfusion import tensor as T
from hyfusion.attention import shift_mask, sw_msa, w_msa
from hyfusion.checkpoint import Checkpoint
from hyfusion.data import Dataset, SceneSpec, synth_scene
from hyfusion.erf import TAGS, erf_suite
from hyfusion.hsc import decode_cube, encode_cube, read_cube, write_cube
from hyfusion.losses import LossConfig, l1_loss, sam_loss, swt_loss, total_loss
from hyfusion.metrics import ergas, psnr, rmse, sam_metric
from hyfusion.model import ERFB, HyFusion, ModelConfig, fuse
from hyfusion.resample import upsample_bilinear
from hyfusion.swt import swt_forward, swt_inverse
from hyfusion.tensor import Tensor, no_grad
from hyfusion.train import TrainConfig, train, train_steps

from test_attention import make_attention, region_oracle
from test_model import full_model_grad_check
from test_swt import haar_direct
from test_tensor import PRIMITIVES, check_primitive
from test_train import TINY, same_params, tiny_cfg, tiny_data


def detail(record_property, text):
    record_property("detail", text)


@pytest.mark.criterion(1, "gradient integrity: ops < 1e-5, full model < 1e-4, < 5 min")
def test_gradient_integrity(record_property):
    start = time.perf_counter()
    op_errors = {name: check_primitive(name) for name in sorted(PRIMITIVES)}
    worst_op = max(op_errors, key=op_errors.get)
    model = full_model_grad_check()
    elapsed = time.perf_counter() - start
    detail(record_property, f"worst op {worst_op} {op_errors[worst_op]:.2e}, "
                            f"full model {model.worst:.2e}, {elapsed:.0f} s")
    assert op_errors[worst_op] < 1e-5
    assert model.passed and model.worst < 1e-4, model.summary()
    assert elapsed < 300


@pytest.mark.criterion(2, "attention oracles < 1e-10, masked weights < 1e-12, rows sum to 1 +- 1e-12")
def test_attention_oracles(record_property):
    errors = []
    for size in (8, 12):
        p = make_attention(seed=size)
        x = np.random.default_rng(size).standard_normal((8, size, size))
        errors.append(np.max(np.abs(w_msa(Tensor(x[None]), p).data[0] - region_oracle(x, p))))
        errors.append(np.max(np.abs(sw_msa(Tensor(x[None]), p, 2).data[0] - region_oracle(x, p, 2))))
    masked, row_err = 0.0, 0.0
    for size in (8, 12):
        p = make_attention()
        x = Tensor(np.random.default_rng(6).standard_normal((1, 8, size, size)))
        mask = shift_mask(size, size, 4, 2)
        _, weights = p.attend(T.window_partition(T.cyclic_shift(x, -2, -2), 4), mask, 1, return_weights=True)
        w = weights.data
        masked = max(masked, w[np.broadcast_to((mask < 0)[:, None], w.shape)].max())
        row_err = max(row_err, np.max(np.abs(w.sum(-1) - 1.0)))
    detail(record_property, f"oracle {max(errors):.1e}, masked {masked:.1e}, rows {row_err:.1e}")
    assert max(errors) < 1e-10
    assert masked < 1e-12
    assert row_err < 1e-12


@pytest.mark.criterion(3, "residual identities: zeroed block convs give Z5 == Z0, zeroed reconstruction gives bilinear")
def test_residual_identities(record_property):
    block = ERFB(ModelConfig.toy(), np.random.default_rng(0))
    for conv in block.proj + block.conv:
        conv.weight.data[...] = 0.0
        conv.bias.data[...] = 0.0
    z0 = Tensor(np.random.default_rng(1).standard_normal((1, 16, 8, 8)))
    block_err = np.max(np.abs(block(z0).data - z0.data))
    model = HyFusion(ModelConfig.toy(), seed=0)
    rng = np.random.default_rng(2)
    x_h, x_m = rng.random((1, 31, 4, 4)), rng.random((1, 4, 16, 16))
    with no_grad():
        y = fuse(x_h, x_m, model).y.data
    exact = np.array_equal(y, upsample_bilinear(x_h, 4))
    detail(record_property, f"block {block_err:.1e}, fuse exact {exact}")
    assert block_err < 1e-12
    assert exact


@pytest.mark.criterion(4, "SWT: round trip < 1e-10, shift equivariance < 1e-12, haar loss oracle < 1e-10")
def test_swt_correctness(record_property):
    rng = np.random.default_rng(0)
    x = rng.random((3, 16, 16))
    round_trip = max(np.max(np.abs(swt_inverse(swt_forward(x, j, w)) - x)) for w in ("haar", "db2") for j in (1, 2))
    shift = 0.0
    for dy, dx in [(1, 0), (0, 3), (5, -2), (-7, 7)]:
        a = swt_forward(np.roll(x, (dy, dx), axis=(1, 2)), 2, "db2").subbands()
        b = [np.roll(s, (dy, dx), axis=(1, 2)) for s in swt_forward(x, 2, "db2").subbands()]
        shift = max(shift, max(np.max(np.abs(u - v)) for u, v in zip(a, b)))
    y, ys = rng.random((2, 8, 8)), rng.random((2, 8, 8))
    want = 0.0
    for k in range(2):
        da, db = haar_direct(y[k]), haar_direct(ys[k])
        want += sum(np.abs(da[n] - db[n]).sum() for n in ("LL", "LH", "HL", "HH")) / (2 * 64)
    loss_err = abs(swt_loss(y, ys).item() - want)
    detail(record_property, f"round trip {round_trip:.1e}, shift {shift:.1e}, loss {loss_err:.1e}")
    assert round_trip < 1e-10
    assert shift < 1e-12
    assert loss_err < 1e-10


@pytest.mark.criterion(5, "loss laws: SAM scale invariance 1e-6, l1-only total exact, 0.01 weights < 1e-12")
def test_loss_laws(record_property):
    rng = np.random.default_rng(0)
    y, ys = rng.random((2, 5, 6, 6)) + 0.1, rng.random((2, 5, 6, 6)) + 0.1
    base = sam_loss(y, ys).item()
    scale = max(abs(sam_loss(a * y, b * ys).item() - base) for a in (0.1, 3.0) for b in (0.5, 7.0))
    l1_only = total_loss(y, ys, LossConfig(0.0, 0.0)).item() == l1_loss(y, ys).item()
    cfg = LossConfig()
    want = l1_loss(y, ys).item() + 0.01 * sam_loss(y, ys).item() + 0.01 * swt_loss(y, ys).item()
    weighted = abs(total_loss(y, ys).item() - want)
    detail(record_property, f"scale {scale:.1e}, l1-only exact {l1_only}, weighted {weighted:.1e}")
    assert (cfg.lambda_sam, cfg.lambda_swt) == (0.01, 0.01)
    assert scale < 1e-6
    assert l1_only
    assert weighted < 1e-12


@pytest.mark.criterion(6, "metric oracles: PSNR/RMSE < 1e-10 dB, ERGAS 25.0, SAM degree/radian < 1e-6")
def test_metric_oracles(record_property):
    rng = np.random.default_rng(0)
    y, ys = rng.random((4, 6, 6)) + 0.05, rng.random((4, 6, 6)) + 0.05
    identity = abs(psnr(y, ys, 0.9) - 20 * math.log10(0.9 / rmse(y, ys)))
    single = ergas(np.full((1, 4, 4), 2.0), np.full((1, 4, 4), 4.0), 4)
    # compared in radians at the default loss settings, and in degrees with the norm regulariser negligible
    radians = abs(math.radians(sam_metric(y, ys)) - sam_loss(y, ys).item())
    degrees = abs(sam_metric(y, ys) - math.degrees(sam_loss(y, ys, eps=1e-15).item()))
    detail(record_property, f"identity {identity:.1e} dB, ERGAS {single!r}, SAM {radians:.1e} rad / {degrees:.1e} deg")
    assert identity < 1e-10
    assert single == 25.0
    assert radians < 1e-6 and degrees < 1e-6


OVERFIT_SCENE = SceneSpec(seed=0)  # 128 x 128 x 31


@pytest.mark.criterion(7, "overfit: toy model, 300 ADAM steps at lr 1e-4 on one 128x128x31 sample > 40 dB, < 10 min")
def test_overfit_sanity(record_property):
    sample = Dataset.synthesize(1, OVERFIT_SCENE)[0]
    model = HyFusion(ModelConfig.toy(dtype="float32"), seed=0)
    start = time.perf_counter()
    with no_grad():
        before = psnr(sample.y, model(sample.x_h, sample.x_m).y.data[0])
    train_steps(model, sample, 300, TrainConfig(lr=1e-4, batch=1, seed=0))
    with no_grad():
        after = psnr(sample.y, model(sample.x_h, sample.x_m).y.data[0])
    elapsed = time.perf_counter() - start
    detail(record_property, f"PSNR {before:.2f} -> {after:.2f} dB, {elapsed:.0f} s")
    assert after > 40.0
    assert elapsed < 600


SWEEP_SCENES = 64
SWEEP_EXTENT = 32
SWEEP_EPOCHS = 50
FRACTIONS = (1.0, 0.5, 0.25, 0.05)


def sweep_run(data, fraction, dense):
    model = HyFusion(ModelConfig.toy(dtype="float32", dense=dense), seed=0)
    cfg = TrainConfig(epochs=SWEEP_EPOCHS, fraction=fraction, seed=0)
    return train(model, data.split("train"), cfg, val_set=data.split("val")).best_val_psnr


@pytest.mark.criterion(8, "data efficiency: best-val PSNR nonincreasing over fractions, dense >= ablation + 0.3 dB at 0.05, < 2 h")
def test_data_efficiency(record_property):
    start = time.perf_counter()
    data = Dataset.synthesize(SWEEP_SCENES, SceneSpec(seed=1000, height=SWEEP_EXTENT, width=SWEEP_EXTENT))
    best = {f: sweep_run(data, f, dense=True) for f in FRACTIONS}
    ablation = sweep_run(data, 0.05, dense=False)
    elapsed = time.perf_counter() - start
    curve = ", ".join(f"{f}: {best[f]:.2f}" for f in FRACTIONS)
    margin = best[0.05] - ablation
    detail(record_property, f"{curve} dB; no-dense at 0.05: {ablation:.2f} dB (margin {margin:+.2f}); {elapsed / 60:.0f} min")
    assert all(best[b] <= best[a] + 0.1 for a, b in zip(FRACTIONS, FRACTIONS[1:]))
    assert margin >= 0.3
    assert elapsed < 7200


ERF_SEEDS = (0, 1, 2)


@pytest.mark.criterion(9, "receptive fields: supports (a) within (b) within (c) at tau 1e-6, strict a -> c, 3 seeds")
def test_receptive_field_ordering(record_property):
    areas, nested = [], []
    for seed in ERF_SEEDS:
        maps = erf_suite(64, 32, seed, threshold=1e-6)
        a, b, c = (maps[t].support() for t in TAGS)
        areas.append(tuple(int(s.sum()) for s in (a, b, c)))
        nested.append(bool(np.all(a <= b) and np.all(b <= c) and a.sum() < c.sum()))
    detail(record_property, "areas (a, b, c) per seed " + ", ".join(str(x) for x in areas))
    assert all(nested)


@pytest.mark.criterion(10, "reproducibility: checkpoint resume, same-seed logs, HSC1 round trip bit-exact")
def test_reproducibility(record_property, tmp_path):
    data = tiny_data()
    cfg = tiny_cfg()
    full = train(HyFusion(TINY, seed=3), data.split("train"), cfg, val_set=data.split("val"),
                 log_path=tmp_path / "full.jsonl")
    part = train(HyFusion(TINY, seed=3), data.split("train"), cfg, val_set=data.split("val"), epochs=1)
    reloaded = Checkpoint.load(part.last.save(tmp_path / "ck"))
    saved_exact = all(same_params(getattr(reloaded, g), getattr(part.last, g)) for g in ("params", "adam_m", "adam_v"))
    resumed = HyFusion(TINY, seed=42)
    train(resumed, data.split("train"), cfg, val_set=data.split("val"), resume=reloaded)
    resume_exact = same_params(resumed.state_dict(), full.last.params)
    train(HyFusion(TINY, seed=3), data.split("train"), cfg, val_set=data.split("val"), log_path=tmp_path / "again.jsonl")
    logs_exact = (tmp_path / "full.jsonl").read_bytes() == (tmp_path / "again.jsonl").read_bytes()
    cube = synth_scene(SceneSpec(seed=5, height=16, width=16))
    write_cube(cube, tmp_path / "y.hsc")
    back = read_cube(tmp_path / "y.hsc")
    hsc_exact = (back.values.tobytes() == cube.values.astype("<f4").tobytes()
                 and encode_cube(back) == (tmp_path / "y.hsc").read_bytes()
                 and encode_cube(decode_cube(encode_cube(back))) == encode_cube(back))
    detail(record_property, f"checkpoint {saved_exact}, resume {resume_exact}, logs {logs_exact}, HSC1 {hsc_exact}")
    assert saved_exact and resume_exact and logs_exact and hsc_exact
