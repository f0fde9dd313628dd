"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL`` line; the lines are also
collected into a terminal summary section by ``conftest.py``.
"""
import contextlib
import math
import time

import numpy as np
import pytest
import torch

from erpnormal.d2n import depth_to_normal
from erpnormal.losses import LossWeights, PerceptualExtractor, mse_loss, perceptual_loss, quaternion_loss, smooth_loss
from erpnormal.metrics import aggregate, angular_error_map, compare_reports, MetricReport
from erpnormal.net import ModelConfig, SphericalNormalNet
from erpnormal.runner import TrainConfig, Trainer, load_model
from erpnormal.runner.ablate import ablate
from erpnormal.runner.data import load_split
from erpnormal.runner.gradcheck import gradcheck
from erpnormal.sphere_geom import (
    ErpGridSpec,
    build_tangent_sampling_grid,
    dir_to_erp_pixel,
    erp_pixel_to_dir,
    gnomonic_forward,
    gnomonic_inverse,
)
from erpnormal.synthdata import Box, SceneSpec, make_dataset, random_scene, ray_directions, render_scene, rotate_scene_y90

SUMMARY = []


@contextlib.contextmanager
def criterion(n, title):
    t0 = time.perf_counter()
    try:
        yield
    except BaseException as e:
        line = f"criterion {n}: FAIL  {title} ({type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''})"
        SUMMARY.append(line)
        print(line)
        raise
    line = f"criterion {n}: PASS  {title} [{time.perf_counter() - t0:.1f}s]"
    SUMMARY.append(line)
    print(line)


def unit(x, axis=0):
    return x / np.linalg.norm(x, axis=axis, keepdims=True)


def test_criterion_01_geometry_round_trips():
    with criterion(1, "ERP and gnomonic round trips < 1e-9, under 10 s"):
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        spec = ErpGridSpec(512, 1024)
        u = rng.uniform(0, spec.width, 10_000)
        # stay a pixel clear of the poles, where longitude is undefined
        v = rng.uniform(0.5, spec.height - 1.5, 10_000)
        u2, v2 = dir_to_erp_pixel(erp_pixel_to_dir(u, v, spec), spec)
        du = np.abs(np.mod(u2 - u + spec.width / 2, spec.width) - spec.width / 2)
        assert du.max() < 1e-9 and np.abs(v2 - v).max() < 1e-9

        centers = unit(rng.normal(size=(10_000, 3)), axis=1)
        # directions within 60 degrees of each tangent point
        axis = unit(np.cross(centers, rng.normal(size=(10_000, 3))), axis=1)
        ang = rng.uniform(0, math.radians(60), (10_000, 1))
        d = np.cos(ang) * centers + np.sin(ang) * axis
        x, y = gnomonic_forward(centers, d)
        back = gnomonic_inverse(centers, x, y)
        assert np.abs(back - d).max() < 1e-9
        x2, y2 = gnomonic_forward(centers, back)
        assert max(np.abs(x2 - x).max(), np.abs(y2 - y).max()) < 1e-9
        assert time.perf_counter() - t0 < 10


def test_criterion_02_grid_longitude_equivariance():
    with criterion(2, "tangent grids at equal latitude differ by a column shift, < 1e-9"):
        spec = ErpGridSpec(32, 64)
        p = build_tangent_sampling_grid(spec, 9).positions
        worst = 0.0
        for shift in range(1, spec.width):
            moved = np.roll(p, -shift, axis=1)
            du = moved[..., 0] - shift - p[..., 0]
            du = np.mod(du + spec.width / 2, spec.width) - spec.width / 2
            worst = max(worst, np.abs(du).max(), np.abs(moved[..., 1] - p[..., 1]).max())
        assert worst < 1e-9


def test_criterion_03_gradcheck():
    with criterion(3, "gradcheck 8x16, 1 level, 8 channels: >= 99% groups at 1e-3, under 5 min"):
        t0 = time.perf_counter()
        report = gradcheck(ModelConfig(height=8, width=16, levels=1, base_channels=8), h=1e-5, threshold=1e-3)
        print(report.format())
        assert report.pass_fraction >= 0.99, report.format()
        assert time.perf_counter() - t0 < 300


def test_criterion_04_attention_invariants():
    with criterion(4, "attention weights sum to 1, zero-flow grid bit-exact, shift equivariance < 1e-4"):
        torch.manual_seed(0)
        cfg = ModelConfig(height=16, width=32, levels=2, base_channels=8)
        model = SphericalNormalNet(cfg).eval()
        model.set_record(True)
        x = torch.rand(1, 3, 16, 32)
        with torch.no_grad():
            out = model(x)
        mods = model.attention_modules()
        assert mods
        for attn in mods:
            w = attn.last_weights
            assert (w.sum(-1) - 1).abs().max() < 1e-6
            spec = attn.spec
            grid = torch.tensor(build_tangent_sampling_grid(spec, cfg.k_samples).positions).float()
            grid = grid.reshape(spec.height * spec.width, cfg.k_samples, 2)
            expected = grid[None, :, None].expand_as(attn.last_positions)
            assert torch.equal(attn.last_positions, expected)
        model.set_record(False)
        with torch.no_grad():
            shifted = model(torch.roll(x, 8, -1))
        for a, b in zip(out, shifted):
            k = 8 * a.shape[-1] // 32
            assert (torch.roll(a, k, -1) - b).abs().max() < 1e-4


def test_criterion_05_loss_contracts():
    with criterion(5, "losses vanish on identical input, quaternion 0/pi2/pi, default weights"):
        gen = torch.Generator().manual_seed(0)
        g = torch.randn(1, 3, 8, 16, generator=gen, dtype=torch.float64)
        g = g / g.norm(dim=1, keepdim=True)
        assert mse_loss([g], g).item() == 0
        assert quaternion_loss([g], g).item() < 1e-7
        assert perceptual_loss(g, g, PerceptualExtractor().double()).item() == 0
        assert smooth_loss([g], g).item() == 0

        def q(p):
            return quaternion_loss([torch.tensor(p, dtype=torch.float64).view(1, 3, 1, 1)],
                                   torch.tensor([1.0, 0, 0], dtype=torch.float64).view(1, 3, 1, 1)).item()

        assert q([1.0, 0, 0]) == 0.0
        assert q([0, 1.0, 0]) == math.pi / 2
        assert q([-1.0, 0, 0]) == math.pi
        w = LossWeights()
        assert (w.lambda_m, w.lambda_q, w.lambda_p, w.lambda_s) == (1.0, 10.0, 0.05, 0.5)


def test_criterion_06_metrics_oracle():
    with criterion(6, "vectorised metrics equal the per-pixel loop on 20 random 8x16 datasets"):
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            n_img = int(rng.integers(1, 4))
            gts = [unit(rng.normal(size=(3, 8, 16))) for _ in range(n_img)]
            preds = [g + rng.normal(0, rng.uniform(0.02, 1.0), g.shape) for g in gts]
            masks = [rng.random((8, 16)) > 0.15 for _ in range(n_img)]
            maps = [angular_error_map(p, g, m) for p, g, m in zip(preds, gts, masks)]
            r = aggregate(maps)
            # same per-pixel values through the loop's midpoint median: exact match
            pooled = sorted(x for e in maps for x in e.ravel().tolist() if x == x)
            k = len(pooled)
            assert r.median_deg == (pooled[k // 2] if k % 2 else (pooled[k // 2 - 1] + pooled[k // 2]) / 2)
            errs = []
            for p, g, m in zip(preds, gts, masks):
                for i in range(8):
                    for j in range(16):
                        if m[i, j]:
                            a, b = p[:, i, j], g[:, i, j]
                            c = float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))
                            errs.append(math.degrees(math.acos(max(-1.0, min(1.0, c)))))
            errs.sort()
            n = len(errs)
            median = errs[n // 2] if n % 2 else (errs[n // 2 - 1] + errs[n // 2]) / 2
            assert abs(r.mean_deg - sum(errs) / n) <= 1e-9
            assert abs(r.median_deg - median) <= 1e-9
            assert abs(r.mse_deg2 - sum(e * e for e in errs) / n) <= 1e-9 * max(1.0, r.mse_deg2)
            for t, d in zip((5.0, 7.5, 11.5, 22.5, 30.0), r.delta):
                assert d == sum(e < t for e in errs) / n
            assert all(a <= b for a, b in zip(r.delta, r.delta[1:]))
            assert r.mse_deg2 >= r.mean_deg ** 2


def test_criterion_07_improvement_arithmetic():
    with criterion(7, "improvement arithmetic gives 9.12% and 0.82 points"):
        ours = MetricReport(4.9312, 1.0, 1.0, (0.1, 0.2, 0.3, 0.4, 0.9489), 1)
        base = MetricReport(5.4263, 1.0, 1.0, (0.1, 0.2, 0.3, 0.4, 0.9407), 1)
        out = compare_reports(ours, base)
        assert f"{out['mean_deg']:.2f}" == "9.12"
        assert f"{out['delta_30']:.2f}" == "0.82"


def test_criterion_08_d2n_plane():
    with criterion(8, "depth-to-normal floor: > 99% interior pixels within 2 deg, deterministic, under 30 s"):
        t0 = time.perf_counter()
        grid = ErpGridSpec.from_height(64)
        room = Box([-40, -1.5, -40], [40, 2.5, 40])
        s = render_scene(SceneSpec(room, [], np.zeros(3), np.array([0.0, 1.0, 0.0])), grid)
        n, valid = depth_to_normal(s.depth, grid)
        floor = s.face_id == 2
        interior = floor.copy()
        for dy in (-2, -1, 0, 1, 2):
            for dx in (-2, -1, 0, 1, 2):
                interior &= np.roll(np.roll(floor, dy, 0), dx, 1)
        interior[-2:] = False
        err = np.degrees(np.arccos(np.clip(n[1], -1, 1)))
        frac = (valid & (err < 2.0))[interior].mean()
        print(f"  floor interior pixels within 2 deg: {100 * frac:.2f}% of {interior.sum()}")
        assert frac > 0.99
        n2, valid2 = depth_to_normal(s.depth, grid)
        assert np.array_equal(n, n2) and np.array_equal(valid, valid2)
        assert time.perf_counter() - t0 < 30


def test_criterion_09_synthetic_consistency():
    with criterion(9, "depth-derived normals within 3 deg on face interiors, 90 deg rotation = W/4 shift"):
        grid = ErpGridSpec.from_height(64)
        rng = np.random.default_rng(9)
        q = grid.width // 4
        worst = 0.0
        for i in range(5):
            spec = random_scene(rng, seed=i)
            s = render_scene(spec, grid)
            p = ray_directions(grid) * s.depth[..., None]
            du = np.roll(p, -1, 1) - np.roll(p, 1, 1)
            dv = p[2:] - p[:-2]
            fd = unit(np.cross(du[1:-1], dv), axis=-1)
            gt = s.normal.transpose(1, 2, 0)[1:-1]
            cos = np.abs(np.sum(fd * gt, -1))
            f = s.face_id
            same = np.ones_like(f, dtype=bool)
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    same &= np.roll(np.roll(f, dy, 0), dx, 1) == f
            ang = np.degrees(np.arccos(np.clip(cos, -1, 1)))[same[1:-1]]
            worst = max(worst, ang.max())

            r = render_scene(rotate_scene_y90(spec), grid)
            assert np.array_equal(r.face_id >= 0, np.roll(s.face_id >= 0, q, 1))
            assert np.abs(r.rgb - np.roll(s.rgb, q, 2)).max() < 1e-12
            assert np.abs(r.depth - np.roll(s.depth, q, 1)).max() < 1e-9
            rot = np.stack([s.normal[2], s.normal[1], -s.normal[0]])
            assert np.abs(r.normal - np.roll(rot, q, 2)).max() < 1e-12
        print(f"  worst interior finite-difference normal error: {worst:.3e} deg")
        assert worst < 3.0


@pytest.mark.slow
def test_criterion_10_overfit(tmp_path):
    with criterion(10, "overfit 4 scenes at 64x128 to training mean < 10 deg within 2000 steps, under 30 min"):
        t0 = time.perf_counter()
        make_dataset(4, seed=0, grid=ErpGridSpec.from_height(64), out_dir=tmp_path / "data",
                     val_fraction=0, test_fraction=0)
        cfg = TrainConfig(
            data=str(tmp_path / "data"), val_split="train", out_dir=str(tmp_path / "run"),
            lr0=1e-3, lr_halve_every=10**6, max_epochs=10**6, patience=10**6,
            max_steps=2000, val_every=10, target_mean_deg=10.0, log_every=100,
            model=ModelConfig(height=64, width=128, levels=3, base_channels=8),
        )
        trainer = Trainer(cfg)
        result = trainer.run()
        train_report = aggregate([
            angular_error_map(p, g, m) for p, g, m in zip(
                load_model(result.last_checkpoint)(trainer.train_data.rgb)[-1].detach(),
                trainer.train_data.normal, trainer.train_data.mask)
        ])
        print(f"  stopped after {trainer.state.step} steps ({result.stop_reason}); "
              f"training mean error {train_report.mean_deg:.3f} deg")
        assert trainer.state.step <= 2000
        assert train_report.mean_deg < 10.0
        assert time.perf_counter() - t0 < 1800


ABLATION_HEIGHT = 32
ABLATION_STEPS = 1000
ABLATION_SCENES = 24


@pytest.mark.slow
def test_criterion_11_ablation_direction(tmp_path):
    with criterion(11, "full model beats finest-head-only supervision on validation mean error"):
        make_dataset(ABLATION_SCENES, seed=7, grid=ErpGridSpec.from_height(ABLATION_HEIGHT), out_dir=tmp_path / "data",
                     val_fraction=0.25, test_fraction=0)
        cfg = TrainConfig(
            data=str(tmp_path / "data"), out_dir=str(tmp_path / "abl"), seed=0,
            lr0=1e-3, lr_halve_every=10**6, max_epochs=10**6, patience=10**6,
            max_steps=ABLATION_STEPS, val_every=10**6, log_every=100,
            model=ModelConfig(height=ABLATION_HEIGHT, width=2 * ABLATION_HEIGHT, levels=2, base_channels=8),
        )
        rows = ablate(cfg, ["full", "single-scale"])
        full, single = rows["full"].mean_deg, rows["single-scale"].mean_deg
        print(f"  validation mean error: full {full:.3f} deg, single-scale {single:.3f} deg")
        assert full < single


def test_criterion_12_determinism(tiny_dataset, tmp_path):
    with criterion(12, "bit-identical 10-step loss trace and checkpoint forward outputs"):
        cfg = TrainConfig(data=str(tiny_dataset), out_dir=str(tmp_path / "run"), max_steps=10, log_every=10**6,
                          model=ModelConfig(height=16, width=32, levels=2, base_channels=8))
        train_data, val_data = load_split(tiny_dataset, "train"), load_split(tiny_dataset, "val")
        traces = []
        for k in range(2):
            result = Trainer(cfg, train_data, val_data).run(tmp_path / f"run{k}")
            traces.append(result.losses)
        assert len(traces[0]) == 10 and traces[0] == traces[1]
        trainer = Trainer.from_checkpoint(tmp_path / "run0" / "last.pt", train_data, val_data)
        trainer.model.eval()
        with torch.no_grad():
            a = trainer.model(train_data.rgb)
            b = load_model(tmp_path / "run0" / "last.pt")(train_data.rgb)
            c = load_model(tmp_path / "run1" / "last.pt")(train_data.rgb)
        assert all(torch.equal(x, y) and torch.equal(x, z) for x, y, z in zip(a, b, c))
