"""End-to-end acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``. Criteria 5 and 6
train at desk scale and take several minutes each.
"""

import itertools
import json
import statistics
import time

import numpy as np
import pytest
import torch

from helpers import gradient_rel_error
from jointsr.cli import main as cli_main
from jointsr.config import OUTPUT_ROOT_ENV
from jointsr.data import generate_synthetic_corpus
from jointsr.losses import (
    FC_TERMS,
    SR_TERMS,
    LossWeights,
    adversarial_g_loss,
    face_prior_loss,
    l_fc,
    l_sr,
    l_total,
    perceptual_loss,
    pixel_loss,
    smooth_loss,
    style_loss,
)
from jointsr.metrics import mssim, psnr
from jointsr.models import FC_VARIANTS, SR_VARIANTS, ModelConfig, build_generator
from jointsr.occlusion import composite
from jointsr.studies import ABLATIONS, run_ablation_study, run_standard_eval
from jointsr.trainer import TrainConfig, Trainer, load_generator
from test_metrics import brute_mssim, brute_psnr


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail, table=None):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
            if table:
                print(table)
        assert ok, detail

    return emit


@pytest.fixture(scope="module")
def desk_corpus():
    return generate_synthetic_corpus(500, 64, seed=1).split(100)


def test_criterion_1_composite_exactness(verdict):
    t0 = time.perf_counter()
    g = torch.Generator().manual_seed(1)
    bad = 0
    for _ in range(1000):
        c, h, w = 3, int(torch.randint(2, 33, (1,), generator=g)), int(torch.randint(2, 33, (1,), generator=g))
        raw = torch.randn(c, h, w, generator=g)
        inp = torch.rand(c, h, w, generator=g)
        m = (torch.rand(h, w, generator=g) > 0.5).float()
        out = composite(raw, inp, m)
        vis = m.bool().expand(c, h, w)
        bad += int(not torch.equal(out[vis], inp[vis]))
    elapsed = time.perf_counter() - t0
    verdict(1, bad == 0 and elapsed < 10, f"{bad} of 1000 triples altered a visible pixel; {elapsed:.2f}s (limit 10s)")


def test_criterion_2_gradient_suite(verdict, extractor):
    t0 = time.perf_counter()
    worst = dict.fromkeys(("pixel", "perceptual", "style", "smooth", "face_prior", "adv_g"), 0.0)
    for seed in range(20):
        g = torch.Generator().manual_seed(100 + seed)
        x, gt, other = (torch.rand(3, 8, 8, generator=g, dtype=torch.float64) for _ in range(3))
        scores = 0.05 + 0.9 * torch.rand(3, 8, 8, generator=g, dtype=torch.float64)
        fns = {
            "pixel": (lambda t: pixel_loss(t, gt), x),
            "perceptual": (lambda t: perceptual_loss(t, gt, extractor), x),
            "style": (lambda t: style_loss(t, other, gt, extractor), x),
            "smooth": (lambda t: smooth_loss(t), x),
            "face_prior": (lambda t: face_prior_loss(t, gt, t.flip(-1), other), x),
            "adv_g": (lambda t: adversarial_g_loss(t), scores),
        }
        for name, (fn, inp) in fns.items():
            worst[name] = max(worst[name], gradient_rel_error(fn, inp))
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-3 for v in worst.values()) and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, ok, f"worst relative error: {detail}; {elapsed:.1f}s (limit 120s)")


def test_criterion_3_metric_oracles(verdict):
    worst_p = worst_m = 0.0
    for seed in range(20):
        g = torch.Generator().manual_seed(seed)
        a = torch.rand(3, 16, 16, generator=g)
        b = (a + 0.3 * torch.randn(3, 16, 16, generator=g)).clamp(0, 1)
        worst_p = max(worst_p, abs(psnr(a, b) - brute_psnr(a, b)))
        worst_m = max(worst_m, abs(mssim(a, b) - brute_mssim(a, b)))
    zero = torch.zeros(1, 16, 16, dtype=torch.float64)
    closed_psnr = psnr(zero, zero + 0.1)
    closed_mssim = mssim(torch.full((1, 16, 16), 0.25), torch.full((1, 16, 16), 0.75))
    ok = (worst_p < 1e-6 and worst_m < 1e-6 and abs(closed_psnr - 20.0) < 1e-9
          and round(closed_mssim, 4) == 0.6001)
    verdict(3, ok, f"max |dPSNR| {worst_p:.1e} dB, max |dMSSIM| {worst_m:.1e}; "
                   f"closed forms {closed_psnr:.6f} dB, {closed_mssim:.6f}")


def test_criterion_4_composite_linearity(verdict):
    lam_fc = {"style": 10.0, "perceptual": 0.1, "pixel": 0.1, "smooth": 1.0}
    lam_sr = {"adv": 1e-3, "face_prior": 1.0, "perceptual": 0.01, "pixel": 1.0, "smooth": 0.01}
    rng = np.random.default_rng(0)
    worst = 0.0
    exact_total = True
    w = LossWeights()
    for _ in range(1000):
        fc = dict(zip(FC_TERMS, rng.random(4) * 10))
        sr = dict(zip(SR_TERMS, rng.random(5) * 10))
        f, s = l_fc(fc, w), l_sr(sr, w)
        worst = max(worst, abs(f - sum(lam_fc[k] * v for k, v in fc.items())),
                    abs(s - sum(lam_sr[k] * v for k, v in sr.items())))
        exact_total &= l_total(f, s) == f + s
    ok = worst < 1e-12 and exact_total
    verdict(4, ok, f"max deviation from hand-weighted sums {worst:.1e}; total equals fc + sr exactly: {exact_total}")


@pytest.mark.slow
def test_criterion_5_desk_end_to_end(verdict, desk_corpus):
    train, test = desk_corpus
    cfg = TrainConfig(prior_steps=300, stage1_steps=1000, stage2_steps=1500, log_every=0)
    total = cfg.prior_steps + cfg.stage1_steps + cfg.stage2_steps
    t0 = time.perf_counter()
    trainer = Trainer(ModelConfig(scale=4), cfg)
    trainer.run(train)
    report = run_standard_eval(trainer.generator, test, 4, area_fraction=0.25, seed=0)
    elapsed = time.perf_counter() - t0
    rec, base = report.pair("recovered"), report.pair("bicubic-occluded")
    gain = rec.psnr - base.psnr
    ok = gain >= 1.0 and rec.mssim > base.mssim and total <= 3000 and elapsed < 1800
    verdict(5, ok, f"PSNR {rec.psnr:.2f} vs baseline {base.psnr:.2f} dB (+{gain:.2f}), "
                   f"MSSIM {rec.mssim:.4f} vs {base.mssim:.4f}; {total} steps, {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_criterion_6_ablation_report(verdict, desk_corpus, tmp_path):
    train, test = desk_corpus
    cfg = TrainConfig(prior_steps=100, stage1_steps=200, stage2_steps=300, log_every=0)
    lines = []
    report = run_ablation_study(train, test, ModelConfig(), cfg, log=lines.append)
    path = report.write(tmp_path, "ablations")
    saved = json.loads(path.read_text())
    names = [r["condition"] for r in saved["rows"]]
    columns = all({"psnr", "mssim"} <= set(r) for r in saved["rows"])
    full = saved["rows"][-1]
    order = saved["meta"]["ordering"]
    held = sum(v["psnr_le_full"] and v["mssim_le_full"] for v in order.values())
    ok = names == [n for n, _, _ in ABLATIONS] and columns
    verdict(6, ok, f"{len(names)} conditions with PSNR and MSSIM columns; full method "
                   f"({full['psnr']:.2f} dB, {full['mssim']:.4f}) >= ablation on both metrics "
                   f"for {held} of {len(order)} (ordering is a soft check)", report.to_text())


def test_criterion_7_generality_matrix(verdict):
    failures = []
    for fc, sr, scale in itertools.product(FC_VARIANTS, SR_VARIANTS, (4, 8)):
        tag = f"{fc}/{sr}/x{scale}"
        mcfg = ModelConfig(fc_variant=fc, sr_variant=sr, scale=scale)
        gen = build_generator(mcfg)
        lr = 128 // scale
        g = torch.Generator().manual_seed(0)
        x = torch.rand(2, 3, lr, lr, generator=g)
        m = torch.ones(2, 1, lr, lr)
        m[..., : lr // 2, : lr // 2] = 0
        with torch.no_grad():
            raw, completed, hr = gen(x * m, m)
        vis = m.expand_as(x).bool()
        if hr.shape != (2, 3, 128, 128) or raw.shape != x.shape or not torch.equal(completed[vis], (x * m)[vis]):
            failures.append(f"{tag}: contract")
            continue
        corpus = generate_synthetic_corpus(16, 64, seed=3)
        tcfg = TrainConfig(prior_steps=5, stage1_steps=15, stage2_steps=30, warmup_steps=6, batch_size=4,
                           log_every=0)
        reports = []
        try:
            Trainer(mcfg, tcfg).run(corpus, reports.append)
        except FloatingPointError as exc:
            failures.append(f"{tag}: {exc}")
            continue
        if len(reports) != 50:
            failures.append(f"{tag}: {len(reports)} steps")
    verdict(7, not failures, "all 8 variant/scale combinations pass shape, composite and 50-step checks"
            if not failures else "; ".join(failures))


def test_criterion_8_study_harnesses(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path))
    cfg = tmp_path / "study.toml"
    cfg.write_text(
        "data.hr_size = 64\ndata.n_samples = 40\ndata.n_test = 12\n"
        "train.prior_steps = 10\ntrain.stage1_steps = 20\ntrain.stage2_steps = 20\n"
        "train.sr_only_steps = 20\ntrain.batch_size = 4\ntrain.log_every = 0\n"
        "eval.sizes = [8, 0, 4, 2, 6]\noutput.dir = \"study\"\n"
    )
    out = tmp_path / "study"
    problems = []
    assert cli_main(["train", "--config", str(cfg)]) == 0
    for grid, rows in ((2, 4), (3, 9)):
        assert cli_main(["study", "locations", "--grid", str(grid), "--config", str(cfg)]) == 0
        rep = json.loads((out / f"study_locations_grid{grid}.json").read_text())
        p = [r["psnr"] for r in rep["rows"]]
        m = [r["mssim"] for r in rep["rows"]]
        s = rep["summary"]
        if len(rep["rows"]) != rows:
            problems.append(f"grid {grid}: {len(rep['rows'])} rows")
        recomputed = (statistics.fmean(p), statistics.pstdev(p), statistics.fmean(m), statistics.pstdev(m))
        stored = (s["psnr_mean"], s["psnr_std"], s["mssim_mean"], s["mssim_std"])
        if max(abs(a - b) for a, b in zip(recomputed, stored)) > 1e-9:
            problems.append(f"grid {grid}: summary mismatch")
    assert cli_main(["study", "sizes", "--config", str(cfg)]) == 0
    sizes = json.loads((out / "study_sizes.json").read_text())
    axis = [int(r["condition"].split("-")[1]) for r in sizes["rows"]]
    if axis != sorted(axis) or len(set(axis)) != len(axis):
        problems.append(f"size axis {axis}")
    assert cli_main(["study", "baselines", "--config", str(cfg)]) == 0
    base = json.loads((out / "study_baselines.json").read_text())
    if [r["condition"] for r in base["rows"]] != ["FC->SR", "SR->FC", "joint"]:
        problems.append("baseline rows")
    verdict(8, not problems, "locations 4/9 rows with matching mean and std, sizes axis "
            f"{axis}, baselines FC->SR / SR->FC / joint" if not problems else "; ".join(problems))


def test_criterion_9_determinism_and_checkpoint(verdict, tmp_path):
    corpus = generate_synthetic_corpus(64, 64, seed=5)
    cfg = TrainConfig(prior_steps=3, stage1_steps=3, stage2_steps=4, warmup_steps=1, log_every=0)

    def trace():
        reports = []
        t = Trainer(ModelConfig(), cfg)
        t.run(corpus, reports.append)
        return t, [r.to_json() for r in reports]

    t1, a = trace()
    _, b = trace()
    t1.save_checkpoint(tmp_path / "ckpt.bin")
    gen, _ = load_generator(tmp_path / "ckpt.bin")
    g = torch.Generator().manual_seed(9)
    probe = torch.rand(4, 3, 16, 16, generator=g)
    m = torch.ones(4, 1, 16, 16)
    m[..., 4:12, 4:12] = 0
    with torch.no_grad():
        before = t1.generator.eval()(probe * m, m)
        after = gen(probe * m, m)
    same_outputs = all(torch.equal(x, y) for x, y in zip(before, after))
    ok = len(a) == 10 and a == b and same_outputs
    verdict(9, ok, f"10-step traces identical: {a == b}; reloaded generator bit-identical: {same_outputs}")
