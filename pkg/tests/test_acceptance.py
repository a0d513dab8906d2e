"""Acceptance criteria 1-10, one test each.

Every test records a PASS/FAIL line; the lines are printed as they happen and again in
the terminal summary.
"""
import hashlib
import shutil
import time

import numpy as np

from garmentanim import autograd as ag
from garmentanim.backbone import BackboneConfig, backbone_forward, encode_text
from garmentanim.dual_module import InjectionSchedule, dual_velocity, forward_injected, forward_interpolated
from garmentanim.metrics import MetricReport, frechet_distance, render_report
from garmentanim.pipeline.clients import FunctionClient, StubClient, encode_png
from garmentanim.pipeline.geometry import MaskImage, adaptive_crop
from garmentanim.pipeline.stages import extract_garment_image, synthesize_alt_human
from garmentanim.sampling import GenerationRequest, Model, generate
from garmentanim.toy import toy_triplet
from garmentanim.training import TrainConfig, TrainState, batch_loss, train

from conftest import ACCEPTANCE, model_params
from oracles import injected
from test_dual_module import _inputs, _latents
from test_geometry import check_crop, random_case

L4 = BackboneConfig(num_blocks=4, model_dim=16, num_heads=2, patch=(1, 2, 2), text_dim=8)


def verdict(number, title, ok, detail, seconds):
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} ({seconds:.1f} s)"
    ACCEPTANCE[number] = line
    print(line)
    assert ok, line


def test_1_backbone_equivalence():
    t0 = time.perf_counter()
    mismatches = 0
    prompts = ["a person walking"]
    for case in range(50):
        fresh = case % 2 == 0
        params = model_params(L4, case, trained_seed=None if fresh else case)
        sched = InjectionSchedule(4, 0.5, 0.5) if fresh else InjectionSchedule(4, 0.0, 0.0)
        noisy, ham, gtm = _latents(L4, case)
        t = float(np.random.default_rng(case).uniform(0.05, 0.95))
        ours = dual_velocity(noisy, t, prompts, ham, gtm, params, L4, sched).data
        ref = backbone_forward(noisy, t, encode_text(prompts, L4, params), L4, params).data
        mismatches += not np.array_equal(ours, ref)
    verdict(1, "backbone equivalence", mismatches == 0,
            f"{50 - mismatches}/50 bitwise identical (25 fresh adapters, 25 with alpha=beta=0)",
            time.perf_counter() - t0)


def test_2_injection_oracle():
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(20):
        params = model_params(L4, case, trained_seed=100 + case).astype(np.float64)
        w = {k: np.asarray(v, np.float64) for k, v in params.arrays().items()}
        rng = np.random.default_rng(case)
        alpha, beta = rng.uniform(0, 1.5, size=2)
        h0, ham, gtm, text, temb = _inputs(L4, params, case)
        out = forward_injected(h0, ham, gtm, InjectionSchedule(4, alpha, beta), text, temb, params, L4)
        ref = injected(h0.tokens.data[0], ham.tokens.data[0], gtm.tokens.data[0], text.tokens.data[0],
                       temb.data[0], w, 4, L4.num_heads, alpha, beta)
        worst = max(worst, float(np.max(np.abs(out.tokens.data[0] - ref))))
    verdict(2, "injection oracle", worst < 1e-6, f"max abs error {worst:.2e} over 20 parameterizations (< 1e-6)",
            time.perf_counter() - t0)


def test_3_interpolation_endpoints():
    t0 = time.perf_counter()
    ok, worst_half = True, 0.0
    for case in range(5):
        params = model_params(L4, case, trained_seed=200 + case)
        h0, ham, ga, text, temb = _inputs(L4, params, case)
        _, _, gb, _, _ = _inputs(L4, params, case + 50)
        # Interpolation carries no beta; its reference is forward_injected at beta = 1.
        sched = InjectionSchedule(4, 0.5, 1.0)
        inj_a = forward_injected(h0, ham, ga, sched, text, temb, params, L4).tokens.data
        inj_b = forward_injected(h0, ham, gb, sched, text, temb, params, L4).tokens.data
        at1 = forward_interpolated(h0, ham, ga, gb, 1.0, sched, text, temb, params, L4).tokens.data
        at0 = forward_interpolated(h0, ham, ga, gb, 0.0, sched, text, temb, params, L4).tokens.data
        half = forward_interpolated(h0, ham, ga, ga, 0.5, sched, text, temb, params, L4).tokens.data
        ok &= np.array_equal(at1, inj_a) and np.array_equal(at0, inj_b)
        worst_half = max(worst_half, float(np.max(np.abs(half - inj_a))))
    ok &= worst_half < 1e-6
    verdict(3, "interpolation endpoints", ok,
            f"gamma 0/1 bitwise={ok}, gamma 0.5 same-garment max error {worst_half:.2e}",
            time.perf_counter() - t0)


def test_4_freeze_contract():
    t0 = time.perf_counter()
    samples = [toy_triplet(0, "red", "walk-right", "gray", frames=2),
               toy_triplet(1, "green", "wave", "white", frames=2)]
    state = TrainState.fresh(L4, TrainConfig(variant="dual-module", steps=200, batch_size=2, seed=0))
    before = state.params.digest("backbone.")
    records = train(samples, state)
    unchanged = state.params.digest("backbone.") == before
    zero = all(r.grad_norms["backbone"] == 0.0 for r in records)
    positive = sum(r.grad_norms["ham"] > 0 and r.grad_norms["gtm"] > 0 for r in records)
    ok = unchanged and zero and len(records) == 200 and positive >= 0.95 * len(records)
    verdict(4, "freeze contract", ok,
            f"backbone hash unchanged={unchanged}, backbone grad 0 on all steps={zero}, "
            f"adapter grads > 0 on {positive}/{len(records)} steps", time.perf_counter() - t0)


def test_5_gradient_check():
    t0 = time.perf_counter()
    samples = [toy_triplet(0, "red", "walk-right", "gray", frames=2)]
    state = TrainState.fresh(L4, TrainConfig(batch_size=1))
    params = model_params(L4, 0, trained_seed=5).astype(np.float64)
    for name in params.names("ham.") + params.names("gtm."):
        params.set_trainable(name, True)
    rng = np.random.default_rng(0)
    t = np.array([0.4])
    noises = [rng.standard_normal((1, 2, 8, 8, 8))[0]]
    grads = ag.reverse_gradient(batch_loss(samples, state, t, noises, params), params)
    names = params.trainable_names()
    worst = 0.0
    for _ in range(50):
        name = names[rng.integers(len(names))]
        idx = tuple(rng.integers(s) for s in params.array(name).shape)
        base = params.array(name)
        vals = []
        for sign in (1, -1):
            arr = base.copy()
            arr[idx] += sign * 1e-5
            params.assign(name, arr)
            vals.append(float(batch_loss(samples, state, t, noises, params).data))
        params.assign(name, base)
        fd = (vals[0] - vals[1]) / 2e-5
        g = float(grads[name][idx])
        worst = max(worst, abs(g - fd) / max(abs(fd), abs(g), 1e-8))
    verdict(5, "gradient check", worst < 1e-2, f"max relative error {worst:.2e} over 50 adapter coordinates",
            time.perf_counter() - t0)


def _region_error(video, sample, color):
    return max(float(np.abs(video[f][:, m].mean(axis=1) - color).max())
               for f, m in enumerate(sample.garment_masks))


def test_6_toy_overfit_and_transfer(overfit_run):
    t0 = time.perf_counter()
    ratio = overfit_run["final"] / overfit_run["initial"]
    model = Model.load(overfit_run["path"])
    errors = []
    for s in overfit_run["heldout"]:
        video = generate(GenerationRequest.from_sample(s, steps=20, seed=0), model)
        color = s.garments[0][0][:, 12, 16]
        errors.append(_region_error(video, s, color))
    seconds = overfit_run["seconds"] + time.perf_counter() - t0
    ok = ratio < 0.1 and max(errors) < 0.1 and seconds < 1800
    verdict(6, "toy overfit and transfer", ok,
            f"loss ratio {ratio:.3f} (< 0.1), held-out region-mean color error "
            f"{', '.join(f'{e:.3f}' for e in errors)} (< 0.1)", seconds)


def test_7_pipeline_geometry():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    problems = []
    for _ in range(1000):
        size, face, body = random_case(rng)
        problems += check_crop(size, adaptive_crop(size, face, body, rng=rng))
    frame = np.random.default_rng(1).integers(0, 250, size=(32, 32, 3), dtype=np.uint8)
    mask = np.zeros((32, 32), bool)
    mask[12:20, 10:22] = True
    seg = FunctionClient(lambda task, media, params, seed: {"mask": encode_png(mask)}, "segmenter")
    ext = extract_garment_image(frame, seg, StubClient(), np.random.default_rng(0))
    dy, dx = ext.offset
    expected = np.full_like(frame, 255)
    expected[12 + dy:20 + dy, 10 + dx:22 + dx] = frame[12:20, 10:22]
    white_ok = np.array_equal(ext.image, expected)
    alt = synthesize_alt_human(frame, MaskImage(mask), "gray shirt", StubClient())
    outside_ok = np.array_equal(alt[~mask], frame[~mask])
    ok = not problems and white_ok and outside_ok
    verdict(7, "pipeline geometry", ok,
            f"{1000 - len(problems)}/1000 crops valid, garment-on-white exact={white_ok}, "
            f"outside-mask identity={outside_ok}", time.perf_counter() - t0)


def test_8_frechet():
    t0 = time.perf_counter()
    feats = np.random.default_rng(0).standard_normal((64, 5))
    ident = frechet_distance(feats, feats)
    a = np.array([-1.0, 0.0, 1.0])
    one_d = frechet_distance(a[:, None], (a + 1)[:, None])
    rng = np.random.default_rng(1)
    base = rng.standard_normal((400, 3))
    base -= base.mean(0)
    base = base @ np.linalg.inv(np.linalg.cholesky(np.cov(base, rowvar=False)).T)
    mu_a, mu_b = np.array([0.0, 1.0, -2.0]), np.array([0.5, 0.0, 1.0])
    sd_a, sd_b = np.array([1.0, 2.0, 0.5]), np.array([0.3, 1.5, 2.5])
    expected = float(np.sum((mu_a - mu_b) ** 2 + (sd_a - sd_b) ** 2))
    diag = frechet_distance(mu_a + base * sd_a, mu_b + base * sd_b)
    ok = abs(ident) <= 1e-6 and abs(one_d - 1.0) <= 1e-4 and abs(diag - expected) <= 1e-5
    verdict(8, "Frechet correctness", ok,
            f"identity {ident:.1e}, 1-D {one_d:.6f} (1.0), 3-D diagonal {diag:.6f} vs {expected:.6f}",
            time.perf_counter() - t0)


def _tree_digest(root):
    h = hashlib.sha256()
    for f in sorted(p for p in root.rglob("*") if p.is_file()):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()


def test_9_determinism(tmp_path):
    from garmentanim.cli import main

    t0 = time.perf_counter()
    toy = tmp_path / "toy"
    assert main(["toy-data", "--out", str(toy), "--frames", "2"]) == 0
    videos = tmp_path / "videos.txt"
    videos.write_text("".join(f"{toy / n}\n" for n in (toy / "videos.txt").read_text().split()))
    digests = {"build": [], "generate": []}
    model = ["--num-blocks", "2", "--model-dim", "16", "--num-heads", "2"]
    assert main(["train", "--manifest", str(toy / "manifest.jsonl"), "--out", str(tmp_path / "tr"),
                 "--steps", "2", "--batch-size", "2"] + model) == 0
    sample = toy / "toy-h0-red-walk-right"
    for run in ("a", "b"):
        out = tmp_path / "runs" / "ds"
        assert main(["build-dataset", "--videos", str(videos), "--out", str(out), "--seed", "3"]) == 0
        digests["build"].append(_tree_digest(out))
        gen = tmp_path / "runs" / "gen"
        assert main(["generate", "--checkpoint", str(tmp_path / "tr" / "final.ckpt"),
                     "--human", str(sample / "human.png"), "--garment", str(sample / "garment_0.png"),
                     "--pose", str(sample / "pose.json"), "--steps", "4", "--seed", "1", "--raw",
                     "--out", str(gen)]) == 0
        digests["generate"].append(_tree_digest(gen))
        shutil.rmtree(tmp_path / "runs")
    ok = all(a == b for a, b in digests.values())
    verdict(9, "determinism", ok,
            f"build-dataset identical={digests['build'][0] == digests['build'][1]}, "
            f"generate identical={digests['generate'][0] == digests['generate'][1]}",
            time.perf_counter() - t0)


def test_10_report_fidelity():
    t0 = time.perf_counter()
    values = {"L1": 0.0719, "PSNR": 17.95, "SSIM": 0.7550, "LPIPS": 0.2370, "FID": 91.05,
              "VFID_I3D": 22.52, "VFID_ResNeXt": 0.39}
    text, csv_text = render_report([MetricReport("Ours", "Internet", values)], "table1")
    lines = text.splitlines()
    header = lines[2].split()
    row = lines[4].split()
    ok = (header == ["Method", "L1", "PSNR", "SSIM", "LPIPS", "FID", "VFID_I3D", "VFID_ResNeXt"]
          and row == ["Ours", "0.0719", "17.95", "0.7550", "0.2370", "91.05", "22.52", "0.39"]
          and csv_text.splitlines()[1] == "Ours,Internet,0.0719,17.95,0.755,0.237,91.05,22.52,0.39")
    verdict(10, "report fidelity", ok, " ".join(row), time.perf_counter() - t0)
