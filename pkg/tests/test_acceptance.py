"""The ten primary acceptance criteria.

Each test records a PASS/FAIL line (WARN for the stochastic transfer smoke)
that is printed in the terminal summary. Criteria 7 and 8 train on the
default synthetic dataset and take several minutes each.
"""

import dataclasses
import functools
import math
import os
import signal
import subprocess
import sys
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE, grad_check, model_gradient_sweep, rel_err
from ssvaerr import augment as A
from ssvaerr import cli
from ssvaerr import datagen as G
from ssvaerr import diffcore as dc
from ssvaerr import model as M
from ssvaerr import pretext as PT
from ssvaerr import trainer as TR
from ssvaerr.diffcore import Tensor
from ssvaerr.labels import DIMENSIONS, Discretizer
from ssvaerr.losses import (
    LOSS_PRESETS,
    CompositeLossConfig,
    PredictionBatch,
    ccc,
    ccc_loss,
    ce,
    ce_per_frame,
    composite_loss,
    cost_norm,
    loss_preset,
    mse,
    ncce,
)

SMALL = M.ModelConfig(widths=(4, 8), hidden=8, num_bins=5)
D20 = Discretizer(20)
D6 = Discretizer(6)


def criterion(n, title):
    """Record the outcome of criterion ``n``; the test returns ``(status, detail)`` or ``detail``."""

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            try:
                out = fn(*args, **kwargs)
            except BaseException as exc:
                msg = str(exc).splitlines()[0] if str(exc) else ""
                ACCEPTANCE[n] = ("FAIL", title, f"{type(exc).__name__}: {msg}"[:200])
                raise
            status, detail = out if isinstance(out, tuple) else ("PASS", out)
            ACCEPTANCE[n] = (status, title, detail)
            print(f"criterion {n} {status} {title}: {detail}")

        return wrapper

    return deco


@pytest.fixture(scope="module")
def default_data(tmp_path_factory):
    """Default synthetic set: 40/8/8 clips, T=120, 64x64, seed 7."""
    return G.generate(G.SyntheticConfig(), tmp_path_factory.mktemp("default_data"))


# ---------------------------------------------------------------------------
# 1. gradient suite


def _ccc_direct(y, yhat):
    n = len(y)
    my = sum(y) / n
    mh = sum(yhat) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vh = sum((b - mh) ** 2 for b in yhat) / n
    cov = sum((a - my) * (b - mh) for a, b in zip(y, yhat)) / n
    return 2 * cov / (vy + vh + (my - mh) ** 2)


@criterion(1, "gradient suite")
def test_criterion_1_gradients():
    t0 = time.perf_counter()
    rng = np.random.default_rng(100)
    worst = {}

    def y(n=16):
        return np.tanh(rng.normal(size=n))

    worst["ccc_loss"] = max(grad_check(ccc_loss, [y(32), y(32)]) for _ in range(50))
    worst["mse"] = max(grad_check(lambda a, t=y(): mse(Tensor(t), a), [y()]) for _ in range(50))
    worst["ce"] = max(
        grad_check(lambda z, oh=D20.one_hot(rng.uniform(-1, 1, 5)): ce(oh, z), [rng.normal(size=(5, 20))])
        for _ in range(50)
    )
    # default nCCE holds the cost norm constant per frame: the oracle freezes it too
    errs = []
    for _ in range(50):
        oh = D20.one_hot(rng.uniform(-1, 1, 5))
        z0 = rng.normal(size=(5, 20))
        weight = cost_norm(oh, dc.softmax(Tensor(z0)).data, D20.midpoints)
        z = Tensor(z0, requires_grad=True)
        analytic = dc.backward(ncce(oh, z, D20.midpoints))[z]
        numeric = dc.finite_diff(lambda x: float(np.mean(weight * ce_per_frame(oh, x).data)), z0)
        errs.append(rel_err(analytic, numeric))
    worst["ncce"] = max(errs)
    worst["ncce_full"] = max(
        grad_check(
            lambda z, oh=D20.one_hot(rng.uniform(-1, 1, 5)): ncce(oh, z, D20.midpoints, True),
            [rng.normal(size=(5, 20))],
        )
        for _ in range(50)
    )
    cfg = loss_preset("ccc_ncce_mse")
    cfg.weights["valence"]["ce"] = 0.3
    cfg.cost_grad = True
    errs = []
    for _ in range(50):
        targets = np.tanh(rng.normal(size=(4, 2)))

        def f(reg, logits, targets=targets):
            return composite_loss(PredictionBatch(reg, logits, targets), cfg, D6)[0]

        errs.append(grad_check(f, [np.tanh(rng.normal(size=(4, 2))), rng.normal(size=(4, 2, 6))]))
    worst["composite"] = max(errs)
    model_worst, kinks, checked = model_gradient_sweep(50)
    seconds = time.perf_counter() - t0
    for name, err in worst.items():
        assert err < 1e-5, (name, err)
    assert model_worst < 1e-4 and kinks <= checked // 100, (model_worst, kinks, checked)
    assert seconds < 120, seconds
    loss_part = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return f"{loss_part}; model {model_worst:.1e} ({checked} coords, {kinks} kink re-checks); {seconds:.0f}s"


# ---------------------------------------------------------------------------
# 2. CCC oracle


@criterion(2, "CCC oracle")
def test_criterion_2_ccc_oracle():
    rng = np.random.default_rng(200)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        yv = rng.normal(size=n) * rng.uniform(0.1, 3)
        yh = 0.6 * yv + rng.normal(size=n) + rng.normal()
        worst = max(worst, abs(ccc(yv, yh) - _ccc_direct(yv.tolist(), yh.tolist())))
    hand = ccc([1, 2, 3, 4], [2, 3, 4, 5])
    assert worst < 1e-12, worst
    assert abs(hand - 5 / 7) < 1e-12, hand
    return f"max |diff| {worst:.1e} over 1000 series; hand case {hand!r}"


# ---------------------------------------------------------------------------
# 3. loss identities


def _direct_terms(batch, disc):
    out = {}
    for j, d in enumerate(DIMENSIONS):
        yv, yh, z = batch.targets[:, j], batch.reg.data[:, j], batch.logits.data[:, j, :]
        oh = disc.one_hot(yv)
        my, mh = yv.mean(), yh.mean()
        c = 2 * np.mean((yv - my) * (yh - mh)) / (yv.var() + yh.var() + (my - mh) ** 2 + 1e-8)
        lse = z.max(axis=1) + np.log(np.exp(z - z.max(axis=1, keepdims=True)).sum(axis=1))
        ce_rows = -(oh * (z - lse[:, None])).sum(axis=1)
        p = np.exp(z - lse[:, None])
        norm = cost_norm(oh, p, disc.midpoints)
        out[d] = {"ccc": 1 - c, "mse": float(np.mean((yh - yv) ** 2)), "ce": ce_rows.mean(), "ncce": np.mean(norm * ce_rows)}
    return out


@criterion(3, "loss identities")
def test_criterion_3_loss_identities():
    # nCCE == CE when every cost norm is 1: mass centroid on the target bin centroid
    logits = np.full((3, 20), -400.0)
    onehot = np.zeros((3, 20))
    for f, lb in enumerate((4, 9, 15)):
        onehot[f, lb] = 1.0
        logits[f, lb - 1] = logits[f, lb + 1] = 2.0
    assert np.allclose(cost_norm(onehot, dc.softmax(Tensor(logits)).data, D20.midpoints), 1.0, atol=1e-12)
    gap = abs(ncce(onehot, logits, D20.midpoints).item() - ce(onehot, logits).item())
    assert gap < 1e-12, gap
    uniform = ce(D20.one_hot(np.array([-0.3, 0.2, 0.9])), np.zeros((3, 20))).item()
    assert abs(uniform - math.log(20)) < 1e-12

    rng = np.random.default_rng(300)
    batch = PredictionBatch(
        Tensor(np.tanh(rng.normal(size=(10, 2)))), Tensor(rng.normal(size=(10, 2, 20))), np.tanh(rng.normal(size=(10, 2)))
    )
    # linear in each weight: total(w) = rest + w * term, with the term computed independently
    terms = _direct_terms(batch, D20)
    lin = 0.0
    for d in DIMENSIONS:
        other = "valence" if d == "arousal" else "arousal"
        rest = composite_loss(batch, CompositeLossConfig({other: {"mse": 0.5}}), D20)[0].item()
        for t in ("ccc", "mse", "ce", "ncce"):
            for w in (0.0, 0.25, 1.0, 3.5):
                total, _ = composite_loss(batch, CompositeLossConfig({d: {t: w}, other: {"mse": 0.5}}), D20)
                lin = max(lin, abs(total.item() - (rest + w * terms[d][t])))
    assert lin < 1e-12, lin

    sums = 0.0
    for name in sorted(LOSS_PRESETS):
        cfg = CompositeLossConfig.parse(LOSS_PRESETS[name])
        total, _ = composite_loss(batch, cfg, D20)
        expect = sum(cfg.w(d, t) * terms[d][t] for d in DIMENSIONS for t in terms[d])
        sums = max(sums, abs(total.item() - expect))
    assert sums < 1e-12, sums
    return f"|ncce-ce| {gap:.1e}; CE uniform - ln 20 = {uniform - math.log(20):.1e}; linearity {lin:.1e}; {len(LOSS_PRESETS)} presets, max |sum diff| {sums:.1e}"


# ---------------------------------------------------------------------------
# 4. EMA / DINO mechanics


@criterion(4, "EMA/DINO mechanics")
def test_criterion_4_ema_dino(small_data, monkeypatch):
    for tau in (0.5, 0.25):
        target, online = {"p": np.zeros(1)}, {"p": np.ones(1)}
        for k in range(1, 30):
            target = PT.ema_update(target, online, tau)
            assert target["p"][0] == 1 - tau**k, (tau, k)

    m = small_data.with_entries(small_data.entries[:6])
    cfg = PT.PretextConfig(model=SMALL, segment_length=6, batch=3, proj_hidden=8, dino_out=6, ema=0.9)
    means = []
    real_update = PT.update_center

    def spy(center, teacher_logits, momentum):
        means.append(np.concatenate(teacher_logits).mean(axis=0))
        return real_update(center, teacher_logits, momentum)

    monkeypatch.setattr(PT, "update_center", spy)

    # one step: the teacher after it is exactly the EMA of the teacher before it
    before = PT.init_state("dino", cfg, 0)
    one = PT.pretrain("dino", m.with_entries(m.entries[:3]), 1, 0, dataclasses.replace(cfg))
    expect = PT.ema_update(before.target, one.state.online, 0.9)
    assert all(expect[k].tobytes() == one.state.target[k].tobytes() for k in expect)
    # teacher tensors never receive gradients
    P = M.as_tensors(one.state.online)
    views = [np.random.default_rng(1).normal(size=(2, 4, 40, 40)) for _ in range(3)]
    loss, _ = PT._objective(one.state, P, views, None, cfg)
    assert set(dc.backward(loss)) <= set(P.values())

    means.clear()
    run = PT.pretrain("dino", m, 2, 1, cfg)
    ref = np.zeros(cfg.dino_out)
    for mu in means:
        ref = 0.9 * ref + 0.1 * mu
    center_err = float(np.max(np.abs(run.state.center - ref)))
    assert len(means) == 4 and center_err < 1e-12

    logits = np.random.default_rng(400).normal(size=(6, 12))
    ents = []
    for tau in (1.0, 0.5, 0.2, 0.1, 0.04, 0.02):
        p = np.clip(PT.teacher_probs(logits, np.zeros(12), tau), 1e-300, None)
        ents.append(float(-(p * np.log(p)).sum(axis=1).mean()))
    assert all(a > b for a, b in zip(ents, ents[1:])), ents
    return f"EMA closed form exact; teacher bytes = EMA of student; center err {center_err:.1e}; entropy {ents[0]:.3f} -> {ents[-1]:.3f}"


# ---------------------------------------------------------------------------
# 5. augmentation suite


@criterion(5, "augmentation suite")
def test_criterion_5_augmentation():
    rng = np.random.default_rng(500)
    x = rng.integers(1, 256, size=(50, 24, 28)).astype(np.float64)
    flip = A.HorizontalFlip(1.0)
    assert flip(flip(x, rng), rng).tobytes() == x.tobytes()
    for T in (1, 4, 5, 50, 123):
        clip = rng.integers(1, 256, size=(T, 8, 8)).astype(np.float64)
        out = A.MissingFrames(0.2)(clip, np.random.default_rng(T))
        assert sum(not out[t].any() for t in range(T)) == math.floor(0.2 * T)
    for amount in (0.0, 0.02, 0.1, 0.5):
        flat = np.full((10, 24, 24), 128.0)
        out = A.SaltPepper(amount, 0.5)(flat, np.random.default_rng(7))
        assert int((out != 128.0).sum()) == round(amount * flat.size)
    steps = (A.RandomCrop(20, 20), A.HorizontalFlip(0.5), A.CropOut(5), A.MissingFrames(0.2),
             A.Solarization(0.2), A.SaltPepper(0.02, 0.5))
    spec = A.AugmentationSpec(steps, seed=5)
    for cid in range(5):
        for epoch in range(3):
            assert A.apply(x, spec, cid, epoch).tobytes() == A.apply(x.copy(), spec, cid, epoch).tobytes()
    const = np.full((20, 16, 16), 77.0)
    assert A.Solarization(1.0)(const, rng).tobytes() == const.tobytes()
    return "flip involution, floor(0.2T) missing frames, exact salt-pepper counts, keyed determinism, solarization no-op"


# ---------------------------------------------------------------------------
# 6. freeze / transfer


@criterion(6, "freeze/transfer semantics")
def test_criterion_6_freeze_transfer(small_data, tmp_path):
    PT.pretrain("lira", small_data, 1, 0, PT.PretextConfig(model=SMALL, segment_length=8), tmp_path / "pt")
    ckpt = tmp_path / "pt" / "lira.ssvk"
    pre = M.load_checkpoint(ckpt)
    base = TR.RunConfig(init=f"pretext:{ckpt}", model=SMALL, segment_length=8, epochs=2)
    frozen = TR.train(dataclasses.replace(base, freeze="frontend"), small_data, tmp_path / "frozen")
    free = TR.train(base, small_data, tmp_path / "free")
    last = M.load_checkpoint(tmp_path / "frozen" / "last.ssvk")
    front = [k for k in pre if k.startswith("frontend.")]
    assert all(last[k].tobytes() == pre[k].tobytes() == frozen.params[k].tobytes() for k in front)
    assert all(free.params[k].tobytes() != pre[k].tobytes() for k in front)
    assert any(frozen.params[k].tobytes() != pre[k].tobytes() for k in pre if not k.startswith("frontend."))
    for path in (ckpt, tmp_path / "frozen" / "last.ssvk", tmp_path / "free" / "best.ssvk"):
        assert M.checkpoint_bytes(M.load_checkpoint(path)) == path.read_bytes()
    return f"{len(front)} frontend tensors byte-identical when frozen, all differ when free; round-trips byte-exact"


# ---------------------------------------------------------------------------
# 7. end-to-end learnability


# pinned reference run of this implementation (default data, scratch, seed 0)
REFERENCE_FINAL = {"val_ccc_arousal": 0.9693750817357114, "val_ccc_valence": 0.9766265788821676}


@pytest.mark.slow
@criterion(7, "end-to-end learnability")
def test_criterion_7_learnability(default_data):
    assert [len(default_data.split(s)) for s in G.SPLITS] == [40, 8, 8]
    t0 = time.perf_counter()
    run = TR.train(TR.RunConfig(seed=0), default_data)
    seconds = time.perf_counter() - t0
    last = run.metrics[-1]
    a, v = last["val_ccc_arousal"], last["val_ccc_valence"]
    assert len(run.metrics) == 10
    assert a >= 0.5 and v >= 0.5, (a, v)
    assert seconds < 15 * 60, seconds
    drift = max(abs(last[k] - REFERENCE_FINAL[k]) for k in REFERENCE_FINAL)
    return f"val CCC arousal {a:.4f}, valence {v:.4f} (reference drift {drift:.1e}); {seconds:.0f}s"


# ---------------------------------------------------------------------------
# 8. transfer smoke


@pytest.mark.slow
@criterion(8, "transfer smoke (LiRA init vs scratch, 8 train clips)")
def test_criterion_8_transfer(default_data, tmp_path):
    pre = PT.pretrain("lira", default_data, 10, 0, out_dir=tmp_path)
    cut = default_data.with_entries(default_data.split("train")[:8] + default_data.split("val") + default_data.split("test"))
    scores = []
    for seed in (0, 1, 2):
        pair = []
        for init in ("scratch", f"pretext:{tmp_path / 'lira.ssvk'}"):
            last = TR.train(TR.RunConfig(init=init, seed=seed), cut).metrics[-1]
            pair.append(0.5 * (last["val_ccc_arousal"] + last["val_ccc_valence"]))
        scores.append(pair)
    wins = sum(p >= s for s, p in scores)
    detail = f"pretext >= scratch on {wins}/3 seeds; " + ", ".join(
        f"seed {i}: {p:.3f} vs {s:.3f}" for i, (s, p) in enumerate(scores)
    )
    detail += f"; pretext loss {pre.losses[0]:.3f} -> {pre.losses[-1]:.3f}"
    if wins < 2:
        warnings.warn(f"transfer smoke below expectation: {detail}", stacklevel=1)
        return "WARN", detail
    return "PASS", detail


# ---------------------------------------------------------------------------
# 9. determinism


@criterion(9, "determinism")
def test_criterion_9_determinism(small_data, tmp_path):
    argv = ["train", "--data", str(small_data.path), "--loss", "ccc_ncce_mse", "--augment", "hflip+missing_frames",
            "--epochs", "2", "--seed", "4"]
    for d in ("a", "b"):
        assert cli.main(argv + ["--out", str(tmp_path / d)]) == 0
    files = ("metrics.csv", "last.ssvk", "best.ssvk")
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f
    return "two `train` runs: metrics.csv, last.ssvk, best.ssvk byte-identical"


# ---------------------------------------------------------------------------
# 10. ablation harness


@criterion(10, "ablation harness")
def test_criterion_10_ablation(small_data, tmp_path):
    for method in ("lira", "byol"):
        PT.pretrain(method, small_data, 1, 0, PT.PretextConfig(model=SMALL, segment_length=8), tmp_path / "pt")
    grid = tmp_path / "grid.cfg"
    grid.write_text(
        "init.lira=pretext:pt/lira.ssvk\ninit.byol=pretext:pt/byol.ssvk\n"
        "loss.ccc=ccc\nloss.ccc_ncce_mse=ccc_ncce_mse\n"
        "aug.none=none\naug.hflip_missing=hflip+missing_frames\n"
    )
    out = tmp_path / "abl"
    argv = ["ablate", "--grid", str(grid), "--data", str(small_data.path), "--out", str(out),
            "--widths", "4,8", "--hidden", "8", "--bins", "5", "--segment-length", "8", "--epochs", "2"]
    csv_path = out / "ablation.csv"

    # first attempt: SIGKILL once at least one cell is on disk
    proc = subprocess.Popen([sys.executable, "-m", "ssvaerr"] + argv, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
    deadline = time.time() + 300
    while time.time() < deadline and proc.poll() is None:
        if len(TR.read_ablation(csv_path)) >= 2:
            break
        time.sleep(0.02)
    os.kill(proc.pid, signal.SIGKILL)
    proc.wait()
    at_kill = len(TR.read_ablation(csv_path))
    assert 1 <= at_kill < 8, at_kill

    assert cli.main(argv) == 0
    rows = TR.read_ablation(csv_path)
    assert len(rows) == 8 and len({r["config_hash"] for r in rows}) == 8
    assert {(r["pretext"], r["loss_config"], r["augmentation"]) for r in rows} == {
        (p, lo, a) for p in ("lira", "byol") for lo in ("ccc", "ccc_ncce_mse") for a in ("none", "hflip_missing")
    }
    first_rows = rows[:at_kill]
    before = csv_path.read_bytes()
    assert cli.main(argv) == 0
    assert csv_path.read_bytes() == before  # completed grid: pure cache hits
    assert TR.read_ablation(csv_path)[:at_kill] == first_rows

    # every cell equals a direct train + evaluate with the same settings
    spec = cli.ablation_grid(cli.build_parser().parse_args(argv))
    by_hash = {r["config_hash"]: r for r in rows}
    worst = 0.0
    for _, run in spec.cells():
        row = by_hash[TR.config_hash(run)]
        _, rep = TR.run_cell(run, small_data)
        for d in DIMENSIONS:
            worst = max(worst, abs(float(row[f"ccc_{d}"]) - rep.combined[d]))
    assert worst < 1e-12, worst
    return f"killed with {at_kill}/8 rows on disk, resumed to 8 unique rows; rerun is a cache hit; max |cell - direct| {worst:.1e}"
