"""Acceptance checks 1 to 10.

Each check prints one ``[PASS]`` or ``[FAIL]`` line. Run under pytest or as a
script: ``python3 tests/test_acceptance.py``.
"""

import contextlib
import io
import math
import sys
import tempfile
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_orthogonal, random_spd, random_sym  # noqa: E402
from gradcheck import check_objective  # noqa: E402
from remind.attention import attention_map, similarity_from_distance  # noqa: E402
from remind.cli import run  # noqa: E402
from remind.corruption import CorruptionSpec, apply  # noqa: E402
from remind.data import generate_synthetic, load_recordings  # noqa: E402
from remind.experiment import ExperimentConfig, cross_validate  # noqa: E402
from remind.frontend import ElectrodeLayout  # noqa: E402
from remind.model import ModelConfig, ParamSet  # noqa: E402
from remind.recon import reconstruct  # noqa: E402
from remind.spd_geometry import le_distance, min_eigenvalue, spd_exp, spd_log, weighted_le_mean  # noqa: E402
from remind.training import TrainConfig, forward_encoder, pretrain  # noqa: E402

SYNTH = dict(subjects_per_class=20, n_channels=8, n_samples=512, n_recordings=4, delta=0.4)
SSL_MARGIN = 0.05


def _line(n, ok, text):
    return f"[{'PASS' if ok else 'FAIL'}] C{n} {text}"


# ------------------------------------------------------------- 1 geometry


def criterion_1():
    rng = np.random.default_rng(0)
    start = time.perf_counter()
    worst_tri = worst_trip = worst_mean = 0.0
    ok = True
    for C in range(4, 17):
        # 1000 triples spread evenly over the 13 dimensions
        m = 1000 // 13 + (C - 4 < 1000 % 13)
        P, Q, R = (np.stack([random_spd(rng, C) for _ in range(m)]) for _ in range(3))
        dpq, dqp = le_distance(P, Q), le_distance(Q, P)
        dqr, dpr = le_distance(Q, R), le_distance(P, R)
        ok &= bool(np.all(dpq >= 0.0) and np.array_equal(dpq, dqp))
        ok &= bool(np.all(le_distance(P, P) <= 1e-9))
        worst_tri = max(worst_tri, float(np.max(dpr - dpq - dqr)))
        S = np.stack([random_sym(rng, C) for _ in range(m)])
        norm = lambda A: np.linalg.norm(A, axis=(-2, -1))  # noqa: E731
        worst_trip = max(
            worst_trip,
            float(np.max(norm(spd_exp(spd_log(P)) - P) / norm(P))),
            float(np.max(norm(spd_log(spd_exp(S)) - S) / norm(S))),
        )
        for i in range(2):
            mats = np.stack([P[i], Q[i], R[i]])
            w = rng.dirichlet(np.ones(3))
            O = random_orthogonal(rng, C)
            worst_mean = max(
                worst_mean,
                np.max(np.abs(weighted_le_mean([0.0, 1.0, 0.0], mats) - Q[i])),
                np.max(np.abs(weighted_le_mean(w, np.stack([P[i]] * 3)) - P[i])),
                np.max(np.abs(weighted_le_mean(w, O @ mats @ O.T) - O @ weighted_le_mean(w, mats) @ O.T)),
            )
    elapsed = time.perf_counter() - start
    ok = bool(ok and worst_tri <= 1e-9 and worst_trip <= 1e-8 and worst_mean <= 1e-8 and elapsed < 10.0)
    return ok, (f"geometry: 1000 triples, triangle slack {worst_tri:.1e}, round trip {worst_trip:.1e}, "
                f"mean {worst_mean:.1e}, {elapsed:.1f}s")


# ------------------------------------------------------------- 2 SPD closure


def criterion_2():
    start = time.perf_counter()
    worst = np.inf
    runs = 0
    grid = [(C, n) for C in (4, 8) for n in (2, 4, 8)]
    for i in range(100):
        C, n = grid[i % len(grid)]
        rng = np.random.default_rng(1000 + i)
        cfg = ModelConfig(C, n * (C + 8), n)
        p = ParamSet.init(cfg, i)
        p.w_q, p.w_k, p.w_v = (rng.standard_normal((C, C)) for _ in range(3))
        attended, cache = forward_encoder(p, cfg, ElectrodeLayout.ring(C), rng.standard_normal((C, cfg.n_samples)))
        recon = reconstruct(p.recon_head(), attended)
        for stack in (cache["states"], cache["qkv"], attended, recon):
            worst = min(worst, float(np.min(min_eigenvalue(stack))))
        runs += 1
    elapsed = time.perf_counter() - start
    ok = worst > 1e-9 and elapsed < 30.0
    return ok, f"SPD closure: {runs} passes, smallest eigenvalue {worst:.2e}, {elapsed:.1f}s"


# ------------------------------------------------------------- 3 attention contract


def criterion_3():
    rng = np.random.default_rng(3)
    worst_row = 0.0
    sim_ok = True
    for i in range(200):
        C, n = 3 + i % 6, 1 + i % 9
        Q = np.stack([random_spd(rng, C) for _ in range(n)])
        K = np.stack([random_spd(rng, C) for _ in range(n)])
        A = attention_map(Q, K)
        worst_row = max(worst_row, float(np.max(np.abs(A.sum(axis=1) - 1.0))))
        d = np.array([le_distance(q, k) for q in Q for k in K])
        s = similarity_from_distance(d)
        sim_ok &= bool(np.all((s > 0.0) & (s <= 1.0)))
    spot0 = similarity_from_distance(0.0)
    spot1 = similarity_from_distance(math.e - 1.0)
    ok = worst_row <= 1e-10 and sim_ok and spot0 == 1.0 and abs(spot1 - 0.5) <= 1e-12
    return ok, (f"attention: row-sum error {worst_row:.1e}, similarity in (0,1] {sim_ok}, "
                f"s(0)={float(spot0)!r}, s(e-1)={spot1:.15f}")


# ------------------------------------------------------------- 4 gradient check


def criterion_4():
    cfg = ModelConfig(6, 64, 4, d_enc=8)
    layout = ElectrodeLayout.ring(6)
    start = time.perf_counter()
    worst = {}
    for objective in ("recon-log", "classify"):
        errors, _ = check_objective(cfg, layout, objective, seed=0, h=1e-5)
        worst[objective] = max(errors.values())
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < 1e-4 and elapsed < 300.0
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    return ok, f"gradient check: max relative error {detail}, {elapsed:.0f}s"


# ------------------------------------------------------------- 5 corruption


def criterion_5():
    ok = True
    cells = 0
    for C in (4, 8, 64):
        for T in (100, 500, 2000):
            x = np.random.default_rng(C * T).standard_normal((C, T))
            for kind in ("segment", "random", "channel"):
                out, mask = apply(CorruptionSpec(kind, seed=C + T), x)
                ok &= bool(np.array_equal(out[~mask], x[~mask]))
                ok &= bool(np.all(out[mask] == 0.0))
                if kind == "segment":
                    cols = np.flatnonzero(mask.any(axis=0))
                    ok &= cols.size == math.ceil(T / 2) and bool(np.all(np.diff(cols) == 1))
                    ok &= bool(np.all(mask[:, cols]))
                elif kind == "random":
                    ok &= int(mask.sum()) == math.floor(0.5 * C * T)
                else:
                    ok &= set(np.flatnonzero(mask.any(axis=1)).tolist()) == {0, 1}
                    ok &= bool(np.all(mask[[0, 1]]))
                cells += 1
    return bool(ok), f"corruption bit-exactness: {cells} grid cells"


# ------------------------------------------------------------- shared synthetic data


@lru_cache(maxsize=None)
def _synthetic(seed):
    root = Path(tempfile.mkdtemp(prefix=f"remind-acc-{seed}-"))
    manifest = generate_synthetic(root, seed, **SYNTH)
    layout = ElectrodeLayout.read_csv(root / "layout.csv")
    return manifest, layout, load_recordings(manifest)


@lru_cache(maxsize=None)
def _xval(seed, corruption="none", compare_scratch=False):
    manifest, layout, recordings = _synthetic(seed)
    cfg = ExperimentConfig(
        ModelConfig(8, 512, 8),
        seed=seed,
        test_corruption=CorruptionSpec(corruption, seed=seed),
        compare_scratch=compare_scratch,
    )
    start = time.perf_counter()
    out = cross_validate(cfg, layout, recordings, manifest)
    return out, time.perf_counter() - start


# ------------------------------------------------------------- 6 overfit


def criterion_6():
    reductions = []
    for seed in range(3):
        _, layout, recordings = _synthetic(0)
        cfg = TrainConfig("pretrain", seed=seed, batch_size=1, resample_masks=False)
        _, losses = pretrain(cfg, ModelConfig(8, 512, 8), layout, [recordings[seed]], steps=500)
        reductions.append(1.0 - losses[-1] / losses[0])
    ok = min(reductions) >= 0.9
    return ok, "overfit: log-domain loss reduction " + ", ".join(f"{r:.1%}" for r in reductions)


# ------------------------------------------------------------- 7 synthetic end to end


def criterion_7():
    accs, times = [], []
    for seed in range(3):
        (_, _, report, _), elapsed = _xval(seed)
        accs.append(report.summary()["subject_accuracy"]["mean"])
        times.append(elapsed)
    mean = float(np.mean(accs))
    ok = mean >= 0.85 and sum(times) < 1200.0
    per = ", ".join(f"{a:.3f}" for a in accs)
    return ok, f"synthetic xval: subject accuracy {mean:.3f} (seeds {per}), {sum(times):.0f}s"


# ------------------------------------------------------------- 8 SSL benefit under corruption


def criterion_8():
    ssl, scratch = [], []
    for seed in range(5):
        (_, _, report, scr), _ = _xval(seed, "segment", True)
        ssl.append(report.summary()["subject_accuracy"]["mean"])
        scratch.append(scr.summary()["subject_accuracy"]["mean"])
    s, b = float(np.mean(ssl)), float(np.mean(scratch))
    ok = s - b >= SSL_MARGIN
    flag = "ok" if ok else "below_required_margin"
    return ok, (f"SSL vs scratch under segment corruption: ssl {s:.3f}, scratch {b:.3f}, "
                f"margin {s - b:+.3f} (required {SSL_MARGIN:+.3f}) flag={flag}")


# ------------------------------------------------------------- 9 determinism


def criterion_9():
    root = Path(tempfile.mkdtemp(prefix="remind-det-"))
    data = root / "data"
    with contextlib.redirect_stdout(io.StringIO()):
        run(["generate", "--out", str(data), "--seed", "5", "--subjects-per-class", "4",
             "--channels", "4", "--samples", "128", "--recordings-per-subject", "4"])
    base = ["--data", str(data), "--seed", "7", "--segments", "4"]
    pre = ["--pretrain-epochs", "2"]
    ft = ["--finetune-epochs", "5", "--label-fraction", "0.5"]
    compared = []
    ok = True
    for rep in ("a", "b"):
        out = root / rep
        with contextlib.redirect_stdout(io.StringIO()):
            codes = [
                run(["pretrain", *base, *pre, "--out", str(out / "pre")]),
                run(["finetune", *base, *ft, "--checkpoint", str(out / "pre" / "checkpoint.bin"),
                     "--out", str(out / "ft")]),
                run(["eval", *base, "--checkpoint", str(out / "ft" / "checkpoint.bin"),
                     "--corrupt", "kind=segment", "--out", str(out / "ev")]),
                run(["xval", *base, *pre, *ft, "--folds", "2", "--compare-scratch",
                     "--corrupt", "kind=random", "--out", str(out / "xv")]),
            ]
        ok &= all(c == 0 for c in codes)
    for rel in ("pre/losses.json", "pre/checkpoint.bin", "ft/checkpoint.bin",
                "ev/metrics.json", "xv/metrics.json"):
        same = (root / "a" / rel).read_bytes() == (root / "b" / rel).read_bytes()
        ok &= same
        compared.append(rel)
    return bool(ok), f"determinism: byte-identical {', '.join(compared)}"


# ------------------------------------------------------------- 10 leakage audits


def criterion_10():
    reads, overlaps = [], []
    runs = [_xval(s) for s in range(3)] + [_xval(s, "segment", True) for s in range(5)]
    for (_, results, _, _), _ in runs:
        for r in results:
            reads.append(r.label_reads_during_pretrain)
            overlaps.append(len(set(r.train_subjects) & set(r.test_subjects)))
    ok = max(reads) == 0 and max(overlaps) == 0
    return ok, (f"leakage audits over {len(reads)} folds: max label reads during pretraining "
                f"{max(reads)}, max subject overlap {max(overlaps)}")


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5,
            criterion_6, criterion_7, criterion_8, criterion_9, criterion_10]


@pytest.mark.acceptance
@pytest.mark.parametrize("n", range(1, 11))
def test_criterion(n, capsys):
    ok, text = CRITERIA[n - 1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, text))
    assert ok, text


if __name__ == "__main__":
    failed = 0
    for n, check in enumerate(CRITERIA, 1):
        ok, text = check()
        failed += not ok
        print(_line(n, ok, text), flush=True)
    sys.exit(1 if failed else 0)
