"""One test per acceptance criterion; each prints a PASS/FAIL line.

The lines are repeated in the ``acceptance criteria`` section of the pytest
terminal summary. Criterion 6 trains for real and takes a few minutes.
"""

import dataclasses
import math
import time

import numpy as np
import pytest

from sambaunet import checkpoint as ckpt_io
from sambaunet import tensor as T
from sambaunet.data import generate_dataset, read_dataset, write_dataset
from sambaunet.diagnostics import COMPOSITES, GRAD_TOLERANCE, SUITE, bench_scan, run_gradient_suite
from sambaunet.hiera import HieraBlock, HieraStageConfig, AdapterSwitches, window_partition
from sambaunet.hoacm import BSEA
from sambaunet.layers import LayerNorm
from sambaunet.metrics import TABLE_COLUMNS, asd, hd95, overlap_metrics
from sambaunet.model import PRESETS
from sambaunet.ssm import selective_scan, selective_scan_reference
from sambaunet.tensor import Tensor
from sambaunet.train import TrainConfig, ablate, format_table, net_from_checkpoint, train

from test_metrics import brute_asd, brute_hd95, random_pair

DESK = PRESETS["desk"]


def test_criterion_1_scale_note(criterion):
    with criterion("1", "paper-scale numbers are not reproduced at desk scale") as c:
        c.note("informational; criteria 2-9 are the property-based substitutes")


def test_criterion_2_gradient_suite(criterion):
    with criterion("2", f"gradient suite rel err <= {GRAD_TOLERANCE:g} on 20 micro-inputs") as c:
        start = time.perf_counter()
        results = run_gradient_suite(trials=20, seed=0)
        elapsed = time.perf_counter() - start
        failing = [r.name for r in results if not r.passed]
        worst = max(results, key=lambda r: r.worst)
        c.note(f"{len(results)} cases, worst {worst.name} {worst.worst:.1e}, {elapsed:.1f}s")
        assert {r.name for r in results} >= set(COMPOSITES)
        assert len(results) == len(SUITE) and all(r.trials >= 20 for r in results)
        assert not failing, failing
        assert elapsed < 120


def test_criterion_3_scan_oracle_and_scaling(criterion):
    with criterion("3", "scan equals naive recurrence within 1e-5; doubling ratio <= 2.6") as c:
        rng = np.random.default_rng(3)
        worst = 0.0
        for _ in range(60):
            G, D, N = rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 9)
            L = int(rng.integers(1, 257))
            args = (rng.standard_normal((G, D, L)), rng.uniform(0.01, 1.0, (G, D, L)),
                    -rng.uniform(0.0, 2.0, (G, D, N)), rng.standard_normal((G, N, L)),
                    rng.standard_normal((G, N, L)), rng.standard_normal((G, D)))
            with T.default_dtype(np.float64), T.no_grad():
                got = selective_scan(*(Tensor(a) for a in args)).data
            worst = max(worst, float(np.abs(got - selective_scan_reference(*args)).max()))
        rows = {r.length: r for r in bench_scan()}
        ratios = {L: rows[2 * L].ratio for L in (1024, 2048, 4096)}
        c.note(f"60 parameterizations, max err {worst:.1e}; ratios "
               + ", ".join(f"{L}->{2 * L}: {r:.2f}" for L, r in ratios.items()))
        assert worst <= 1e-5
        assert all(r <= 2.6 for r in ratios.values())


def test_criterion_4_normalization(criterion):
    with criterion("4", "affinity rows and spatial maps sum to 1 within 1e-6; LN mean within 1e-5") as c:
        rng = np.random.default_rng(4)
        row_err = map_err = ln_err = 0.0
        for i in range(100):
            C, n = int(rng.integers(1, 9)), 2 * int(rng.integers(1, 5))
            b = BSEA(C, (n, n))
            b.init_parameters(i)
            x = Tensor(rng.standard_normal((2, C, n, n)) * rng.uniform(0.1, 5.0))
            maps = b.attention_map(x).data.astype(np.float64)
            map_err = max(map_err, float(np.abs(maps.sum(axis=(2, 3)) - 1).max()))
            for M in b.last_affinity:
                row_err = max(row_err, float(np.abs(M.astype(np.float64).sum(-1) - 1).max()))
            ln = LayerNorm(C, axis=1)
            ln.init_parameters(i)  # unit scale, zero shift: the output is the pre-affine value
            assert np.all(ln.weight.data == 1) and np.all(ln.bias.data == 0)
            z = ln(x).data
            ln_err = max(ln_err, float(np.abs(z.mean(axis=1)).max()))
        c.note(f"row {row_err:.1e}, map {map_err:.1e}, LN mean {ln_err:.1e}")
        assert row_err <= 1e-6 and map_err <= 1e-6 and ln_err <= 1e-5


def test_criterion_5_metric_oracle(criterion):
    with criterion("5", "HD95/ASD equal all-pairs oracle; Dice/IoU equal set counts on 200 pairs") as c:
        rng = np.random.default_rng(2025)
        checked = 0
        for _ in range(200):
            pred, gt = random_pair(rng)
            for k in (1, 2, 3):
                assert hd95(pred, gt, k) == brute_hd95(pred, gt, k)
                assert asd(pred, gt, k) == brute_asd(pred, gt, k)
                P = {tuple(p) for p in np.argwhere(pred == k)}
                G = {tuple(p) for p in np.argwhere(gt == k)}
                union = len(P | G)
                dice = 1.0 if not P and not G else 2 * len(P & G) / (len(P) + len(G))
                iou = 1.0 if union == 0 else len(P & G) / union
                assert overlap_metrics(pred, gt, k) == (dice, iou)
                checked += 1
        c.note(f"{checked} class comparisons, all exact")


def test_criterion_6_overfit(criterion, tmp_path):
    with criterion("6", "desk overfit reaches train mDice >= 0.95 within 2000 iterations and 30 min") as c:
        cfg = TrainConfig(lr=0.01, momentum=0.9, weight_decay=1e-4, batch_size=4, max_iters=2000,
                          eval_interval=100, eval_on_train=True, target_dice=0.95,
                          checkpoint_dir=str(tmp_path))
        result = train(cfg, DESK, generate_dataset(8, 64, seed=0))
        best = result.best
        c.note(f"mDice {best['mDice']:.4f} at iteration {best['iteration']}, {result.seconds:.0f}s")
        losses = np.array(result.losses)
        medians = [float(np.median(losses[i:i + 100])) for i in range(0, len(losses) - 99, 100)]
        c.note("100-iteration loss medians " + " ".join(f"{m:.3f}" for m in medians))
        assert best["mDice"] >= 0.95 and best["iteration"] <= 2000
        assert result.seconds <= 30 * 60
        assert all(b <= a for a, b in zip(medians, medians[1:]))


def test_criterion_7_ablation(criterion):
    with criterion("7", "ablate runs 8 configurations with fewer params per w/o row and exact columns") as c:
        cfg = TrainConfig(batch_size=4, max_iters=3, eval_interval=3)
        rows = ablate(cfg, dataclasses.replace(DESK, image_size=32), generate_dataset(6, 32, seed=7))
        table = format_table(rows)
        all_row = rows[0]
        c.note("params " + ", ".join(f"{r.name}={r.params}" for r in rows))
        best_everywhere = all(
            all_row.metrics[k] >= r.metrics[k] if k not in ("mHD95", "ASD") else all_row.metrics[k] <= r.metrics[k]
            for r in rows[1:] for k in TABLE_COLUMNS
        )
        c.note(f"ALL best on every column: {best_everywhere} (reported, not asserted)")
        assert len(rows) == 8 and all_row.name == "ALL"
        assert all(r.params < all_row.params for r in rows[1:])
        header = [h.strip() for h in table.splitlines()[0].split("|")]
        assert header == ["Configuration", "mDice", "mIoU", "Acc", "Pre", "Sen", "Spe", "mHD95", "ASD"]


def test_criterion_8_determinism(criterion, tmp_path):
    with criterion("8", "bit-identical losses, checkpoint forward and dataset round-trip") as c:
        data = generate_dataset(6, 32, seed=11)
        net_cfg = dataclasses.replace(DESK, image_size=32)
        cfg = TrainConfig(batch_size=2, max_iters=6, eval_interval=3, checkpoint_dir=str(tmp_path / "a"))
        a = train(cfg, net_cfg, data)
        b = train(dataclasses.replace(cfg, checkpoint_dir=str(tmp_path / "b")), net_cfg, data)
        same_losses = np.array(a.losses).tobytes() == np.array(b.losses).tobytes()
        x = Tensor(np.stack([s.image for s in data])[:, None])
        restored = net_from_checkpoint(ckpt_io.load(tmp_path / "a" / "last.smbc"))
        with T.no_grad():
            same_forward = a.net(x).data.tobytes() == restored(x).data.tobytes()
        write_dataset(data, tmp_path / "d1.smbd")
        back = read_dataset(tmp_path / "d1.smbd")
        write_dataset(back, tmp_path / "d2.smbd")
        same_data = ((tmp_path / "d1.smbd").read_bytes() == (tmp_path / "d2.smbd").read_bytes()
                     and all(s.image.tobytes() == t.image.tobytes() and s.label.tobytes() == t.label.tobytes()
                             for s, t in zip(data, back)))
        c.note(f"losses {same_losses}, forward {same_forward}, dataset {same_data}")
        assert same_losses and same_forward and same_data


def test_criterion_9_window_locality(criterion):
    with criterion("9", "zeroing one window leaves other windows' attention outputs unchanged") as c:
        rng = np.random.default_rng(9)
        block = HieraBlock(HieraStageConfig(16, window=4, heads=2), AdapterSwitches())
        block.init_parameters(9)
        x = rng.standard_normal((2, 16, 16, 16)).astype(np.float32)  # (B, H, W, C)
        trials = 0
        for wi in range(4):
            for wj in range(4):
                x2 = x.copy()
                x2[:, 4 * wi:4 * wi + 4, 4 * wj:4 * wj + 4, :] = 0
                outs = [block.attn(window_partition(block.norm1(Tensor(v)), 4, channels_last=True)).data
                        for v in (x, x2)]
                zeroed = {b * 16 + wi * 4 + wj for b in range(2)}
                others = [k for k in range(32) if k not in zeroed]
                assert outs[0][others].tobytes() == outs[1][others].tobytes()
                assert all(not np.array_equal(outs[0][k], outs[1][k]) for k in zeroed)
                trials += 1
        c.note(f"{trials} windows zeroed, untouched windows bit-identical")
