"""Acceptance suite: one test per criterion, each recorded as a pass/fail line.

The verdict lines are printed in the "acceptance criteria" section of the
pytest terminal summary. Desk-scale criteria share the session ``desk``
fixture (data, trained codec, masking-ablation encoders, frozen heads).
"""
import math
import shutil
import warnings
from contextlib import contextmanager
from dataclasses import replace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from vertikit.cli import main
from vertikit.codec import (LATENT_DIM, PatchCodec, codec_loss, psnr, random_projections, sample_prior,
                            sliced_wasserstein_distance)
from vertikit.encoder import N_OBS, N_TOKENS, ContextEncoder, load_encoder, mask_count, pretext_terms, pretrain, random_mask
from vertikit.harness import (BCPolicy, ExperimentConfig, load_downstream, overfit_e2e, overfit_pretext,
                              rollout_summary, run_rollouts, train_downstream, write_rollout_report)
from vertikit.heads import E2EModel, TaskHead
from vertikit.terrain import OK, Action, HeightMap, Pose, VehicleConfig, settle, step_vehicle

from conftest import DESK_PRETRAIN, record_criterion
from gradcheck import ATOL, check_gradients

pytestmark = pytest.mark.slow


@contextmanager
def criterion(number, name):
    notes = []
    try:
        yield notes
    except BaseException as exc:
        record_criterion(number, name, "FAIL", "; ".join(notes + [str(exc).splitlines()[0] if str(exc) else
                                                                    type(exc).__name__]))
        raise
    status = "FLAGGED" if any(n.startswith("flag") for n in notes) else "PASS"
    record_criterion(number, name, status, "; ".join(notes))


def within(value, target, tol=0.15):
    return abs(value - target) <= tol * target


def test_criterion_01_parameter_budgets():
    with criterion(1, "parameter budgets") as notes:
        torch.manual_seed(0)
        counts = {"codec": PatchCodec().param_count(), "encoder": ContextEncoder().param_count(),
                  "frozen fkd head": TaskHead("fkd").learnable_count()}
        counts.update({f"e2e {t}": E2EModel(t).param_count() for t in ("fkd", "ikd", "bc", "pr")})
        targets = {"codec": 3.67e6, "encoder": 0.88e6, "frozen fkd head": 0.011e6}
        notes.append(", ".join(f"{k} {v / 1e6:.3f}M" for k, v in counts.items()))
        for k, v in counts.items():
            assert within(v, targets.get(k, 11.47e6)), f"{k}: {v}"


def test_criterion_02_structural_constants():
    with criterion(2, "structural constants") as notes:
        enc = ContextEncoder().eval()
        g = torch.Generator().manual_seed(0)
        e, a, p = torch.randn(2, 20, 128, generator=g), torch.randn(2, 20, 2, generator=g), torch.randn(2, 20, 6, generator=g)
        with torch.no_grad():
            ctx, out, _ = enc(e, a, p)
        assert N_TOKENS == 61 and out.shape[1] == 61 and ctx.shape == (2, 128)
        assert len(enc.blocks) == 4 and all(b.heads == 4 for b in enc.blocks)
        assert mask_count(0.75) == 45 and (random_mask(100, 0.75, g).sum(1) == 45).all()
        head = TaskHead("fkd")
        assert head.widths[:-1] == [128, 64, 32, 16]
        notes.append(f"61 tokens, ctx 128, 4x4 transformer, 45/{N_OBS} masked, head layers {head.widths}")


def _float64_codec():
    torch.manual_seed(0)
    return PatchCodec().double()


def test_criterion_03_gradient_checks():
    with criterion(3, "gradient verification") as notes:
        checks = {}
        g = torch.Generator().manual_seed(1)
        codec = _float64_codec()
        x = torch.rand(2, 40, 40, generator=g, dtype=torch.float64) * 2 - 1
        prior = sample_prior(2, LATENT_DIM, g, dtype=torch.float64)
        proj = random_projections(LATENT_DIM, 50, 0, torch.float64)
        checks["codec"] = check_gradients(lambda: codec_loss(codec, x, prior, proj)[0], codec.parameters())

        torch.manual_seed(0)
        enc = ContextEncoder().double()
        e = torch.randn(2, 20, 128, generator=g, dtype=torch.float64)
        a = torch.randn(2, 20, 2, generator=g, dtype=torch.float64)
        p = torch.randn(2, 20, 6, generator=g, dtype=torch.float64)
        n = torch.randn(2, 128, generator=g, dtype=torch.float64)
        mask = random_mask(2, 0.75, g)
        with torch.no_grad():
            targets = enc.raw_tokens(e, a, p)
        checks["pretext"] = check_gradients(lambda: pretext_terms(enc, e, a, p, n, mask, targets=targets)[0],
                                            enc.parameters())

        for task, aux in (("fkd", 0), ("ikd", 6), ("bc", 3)):
            head = TaskHead(task).double()
            ctx = torch.randn(4, 128, generator=g, dtype=torch.float64)
            av = torch.randn(4, aux, generator=g, dtype=torch.float64) if aux else None
            y = torch.randn(4, head.out_dim, generator=g, dtype=torch.float64)
            checks[task] = check_gradients(lambda: F.mse_loss(head(ctx, av), y), head.parameters())

        for name, res in checks.items():
            live = sum(abs(r[2]) > ATOL for r in res)
            worst = max(abs(r[2] - r[3]) / max(abs(r[2]), abs(r[3]), 1e-300) for r in res if abs(r[2]) > ATOL)
            notes.append(f"{name} {sum(r[4] for r in res)}/{len(res)} ok ({live} non-zero, worst rel {worst:.1e})")
            assert all(r[4] for r in res), f"{name} mismatch"


def _sw_oracle(x, y, proj):
    total = 0.0
    for k in range(proj.shape[1]):
        u = sorted(float(v) for v in x @ proj[:, k])
        w = sorted(float(v) for v in y @ proj[:, k])
        total += sum((s - t) ** 2 for s, t in zip(u, w)) / len(u)
    return total / proj.shape[1]


def test_criterion_04_oracle_equivalences():
    with criterion(4, "oracle equivalences") as notes:
        sw_err = 0.0
        for seed in range(20):
            g = torch.Generator().manual_seed(seed)
            x = torch.randn(8, LATENT_DIM, generator=g, dtype=torch.float64)
            y = torch.randn(8, LATENT_DIM, generator=g, dtype=torch.float64)
            proj = random_projections(LATENT_DIM, 4, seed, torch.float64)
            d = sliced_wasserstein_distance(x, y, projections=proj).item()
            sw_err = max(sw_err, abs(d - _sw_oracle(x.numpy(), y.numpy(), proj.numpy())))

        torch.manual_seed(0)
        enc = ContextEncoder().eval()
        g = torch.Generator().manual_seed(0)
        e, a, p, n = (torch.randn(3, 20, 128, generator=g), torch.randn(3, 20, 2, generator=g),
                      torch.randn(3, 20, 6, generator=g), torch.randn(3, 128, generator=g))
        mask = random_mask(3, 0.75, g)
        with torch.no_grad():
            _, _, mt = pretext_terms(enc, e, a, p, n, mask)
            _, out, raw = enc(e, a, p, mask)
        o, r, m = out.double().numpy(), raw.double().numpy(), mask.numpy()
        gathered = np.mean([np.mean((o[b, 1 + i] - r[b, i]) ** 2) for b in range(3) for i in range(N_OBS) if m[b, i]])
        mask_err = abs(mt.item() - gathered)

        rng = np.random.default_rng(0)
        psnr_err = 0.0
        for _ in range(10):
            u, v = rng.uniform(-1, 1, (2, 40, 40))
            psnr_err = max(psnr_err, abs(psnr(u, v) - 10 * math.log10(4.0 / np.mean((u - v) ** 2))))
        notes.append(f"SW max err {sw_err:.1e}, masked term err {mask_err:.1e}, PSNR max err {psnr_err:.1e}")
        assert sw_err < 1e-6 and mask_err < 1e-7 and psnr_err < 1e-9


TRACES = {}


def _overfit_batch(desk):
    train = desk.data["train"]
    return train, np.linspace(0, len(train) - 1, 8).astype(int)


def _traces(desk):
    if not TRACES:
        data, idx = _overfit_batch(desk)
        TRACES["pretext"] = overfit_pretext(data, idx)
        for task in ("fkd", "ikd", "bc", "pr"):
            TRACES[f"e2e {task}"] = overfit_e2e(task, data, idx, desk.codec)
    return TRACES


def test_criterion_05_overfit_sanity(desk):
    with criterion(5, "overfit sanity") as notes:
        traces = _traces(desk)
        for name, tr in traces.items():
            notes.append(f"{name} {tr[-1] / tr[0]:.4f} at step {len(tr) - 1}")
        for name, tr in traces.items():
            assert tr[-1] < 0.01 * tr[0] and len(tr) - 1 <= 1000, name


def test_criterion_06_simulator_conservation():
    with criterion(6, "simulator conservation") as notes:
        veh = VehicleConfig()
        hmap = HeightMap(np.full((201, 201), 0.3), 0.025, origin=(-2.5, -2.5))
        rng = np.random.default_rng(0)
        bad = 0
        for _ in range(10_000):
            pose = settle(hmap, *rng.uniform(-1.5, 1.5, 2), rng.uniform(-math.pi, math.pi), veh)
            act = Action(rng.uniform(-veh.v_max, veh.v_max), rng.uniform(-veh.w_max, veh.w_max))
            new, status = step_vehicle(hmap, pose, act, 0.1, veh)
            bad += status != OK or (new.z, new.roll, new.pitch) != (pose.z, pose.roll, pose.pitch)
        xs = -2.0 + np.arange(161) * 0.025
        ramp = HeightMap(0.2 * np.tile(xs, (161, 1)), 0.025, origin=(-2.0, -2.0), max_height=10.0)
        pitch_err = abs(settle(ramp, 0.0, 0.0, 0.0, veh).pitch - math.atan(0.2))
        notes.append(f"{bad} violations in 10000 flat steps, ramp pitch err {pitch_err:.1e}")
        assert bad == 0 and pitch_err < 1e-6


def test_criterion_07_frozen_integrity(desk):
    with criterion(7, "frozen-backbone integrity") as notes:
        from vertikit.checkpoint import module_checksum

        bb = desk.backbone()
        before = module_checksum(bb.encoder), module_checksum(bb.codec)
        for task in ("fkd", "ikd", "bc", "pr"):
            ckpt, _ = desk.head(task)
            assert ckpt.meta["backbone_checksum"] == bb.encoder_checksum
        cfg = replace(ExperimentConfig(), task="fkd", epochs=3, seed=11)
        train_downstream(cfg, desk.data, bb)
        after = module_checksum(bb.encoder), module_checksum(bb.codec)
        notes.append(f"encoder {before[0][:12]} codec {before[1][:12]} unchanged")
        assert before == after == (bb.encoder_checksum, desk.codec_checksum)


def test_criterion_08_desk_learning(desk):
    with criterion(8, "desk-scale learning") as notes:
        runs = [r for r in desk.masking.runs if r["arm"] == "75%"]
        fkd = float(np.mean([r["fkd_test"] for r in runs]))
        base = float(np.mean([r["fkd_baseline"] for r in runs]))
        pr = float(np.mean([r["pr_test"] for r in runs]))
        zero = runs[0]["pr_zero"]
        gain = 1 - fkd / base
        notes.append(f"FKD test {fkd:.4f} vs mean baseline {base:.4f} ({100 * gain:.1f}% better); "
                     f"PR {pr:.2f} dB vs zero-vector {zero:.2f} dB (+{pr - zero:.2f})")
        assert gain >= 0.20 and pr - zero >= 3.0


def test_criterion_09_masking_direction(desk):
    with criterion(9, "directional masking ablation") as notes:
        summary = {r["arm"]: r for r in desk.masking.summary()}
        hi, lo = summary["75%"]["pr_test"], summary["90%"]["pr_test"]
        notes.append(f"PR 75% {hi:.3f} dB vs 90% {lo:.3f} dB")
        if hi < lo:
            notes.append("flag: 75% arm below 90% arm, investigate")
            warnings.warn(f"masking ablation direction violated: {hi:.3f} < {lo:.3f} dB")


def test_criterion_10_closed_loop_rollout(desk, tmp_path):
    with criterion(10, "closed-loop BC rollout") as notes:
        policy = BCPolicy(load_downstream(desk.head("bc")[0], desk.backbone()))
        flat = run_rollouts(policy, range(10), flat=True)
        rocky = run_rollouts(policy, range(10))
        rows = write_rollout_report(tmp_path, {"flat": flat, "rocky": rocky})
        s = rollout_summary(flat)
        notes.append(f"flat {s['successes']}/10 in {s['mean_time']:.2f}±{s['std_time']:.2f} s; "
                     f"rocky {rows[1]['successes']}/10 " +
                     ", ".join(f"{k[5:]} {v}" for k, v in rows[1].items() if k.startswith("fail_") and v))
        assert all(np.isfinite(a).all() for r in flat + rocky for a in r.actions)
        assert len(rows) == 2 and all(len(r) == 10 for r in rows)
        assert s["successes"] == 10


def _tree(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.name != "timing.json"}


def test_criterion_11_determinism(desk, tmp_path):
    with criterion(11, "determinism") as notes:
        # full CLI chain, then every stage again from its own echoed config
        run, first = tmp_path / "run", tmp_path / "first"
        fast = ["--set", "codec.epochs=1", "--set", "pretrain.epochs=1", "--set", "downstream.epochs=2",
                "--set", "pretrain.max_windows=16", "--seed", "3"]
        stages = [["gen-data", "--seeds", "3", "--split", "2:1", "--episodes", "2", "--steps", "30"],
                  ["train-swae"], ["pretrain"], ["train-task", "--task", "fkd", "--mode", "frozen"],
                  ["eval", "--checkpoint", str(run / "tasks" / "fkd_frozen.vckpt")]]
        dirs = ["data", "codec", "pretrain", "tasks", "eval"]
        for argv in stages:
            assert main(argv + fast + ["--root", str(run)]) == 0
        shutil.move(run, first)
        for argv, d in zip(stages, dirs):
            base = argv[:1] + (argv[1:] if argv[0] == "eval" else [])
            assert main(base + ["--config", str(first / d / "config_echo.ini"), "--root", str(run)]) == 0
        a, b = _tree(first), _tree(run)
        assert a.keys() == b.keys() and a == b, sorted(k for k in a if a.get(k) != b.get(k))
        notes.append(f"CLI chain: {len(a)} files byte-identical")

        # criterion 5: overfit traces
        data, idx = _overfit_batch(desk)
        traces = _traces(desk)
        assert overfit_pretext(data, idx) == traces["pretext"]
        assert overfit_e2e("fkd", data, idx, desk.codec) == traces["e2e fkd"]
        notes.append("overfit traces identical")

        # criterion 8: encoder pretraining and the frozen FKD metrics file
        ckpt = pretrain(data.tensors, replace(DESK_PRETRAIN, seed=0), desk.codec_checksum)
        assert ckpt.checksum == desk.backbone().encoder_checksum
        desk.head("fkd")
        cfg = replace(ExperimentConfig(), task="fkd", seed=0)
        train_downstream(cfg, desk.data, desk.backbone(), out=tmp_path / "fkd_again")
        name = "metrics_fkd_frozen.csv"
        assert (tmp_path / "fkd_again" / name).read_bytes() == (desk.root / "tasks" / "seed0" / name).read_bytes()
        notes.append("encoder checksum and FKD metrics file identical")
