"""Acceptance criteria, one test each; every test prints a single PASS/FAIL line.

The ordering / ensemble / few-shot criteria train real models on the full
synthetic benchmark (8 verbs x 12 nouns x 20 seeds, T=16, 64x64) and are
marked ``slow``; their trainings are cached for the session.
"""

import json
import time

import numpy as np
import pytest

from safcar.checkpoint import Checkpoint
from safcar.cli import fewshot_verbs, main
from safcar.data.dataset import ClipDataset
from safcar.data.io import read_clip, read_frames, write_clip
from safcar.data.splits import make_compositional_split, make_fewshot_split
from safcar.data.synth import generate_clip
from safcar.errors import FormatError
from safcar.gradcheck import CASES, TOLERANCE, run_suite
from safcar.model import assemble_model
from safcar.saf import SAFWeights, saf_attend, saf_fuse
from safcar.si import SIVariantConfig
from safcar.tensor import Tensor, precision
from safcar.train import (
    TrainSchedule,
    _param_bytes,
    ensemble,
    evaluate,
    fewshot_finetune,
    metrics_from_scores,
    predict,
    train,
)
from safcar.vi import VIConfig

from . import oracles

SEEDS = (0, 1, 2)
TOPOLOGIES = ("late", "concat", "si-only", "vi-only")
VERB_HALVES = ([0, 1, 2, 3], [4, 5, 6, 7])
NOUN_HALVES = (list(range(6)), list(range(6, 12)))


def record(log, n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} -- {detail}"
    print(line)
    log.append(line)
    assert ok, line


@pytest.fixture(scope="module")
def benchmark():
    return ClipDataset.generate(range(8), range(12), range(20))


@pytest.fixture(scope="module")
def comp_split(benchmark):
    return make_compositional_split(benchmark.instances(), VERB_HALVES, NOUN_HALVES)


@pytest.fixture(scope="module")
def sweep(benchmark, comp_split):
    """Validation probabilities for every (seed, topology), plus total wall time."""
    start = time.perf_counter()
    probs = {}
    for seed in SEEDS:
        for topo in TOPOLOGIES:
            model = assemble_model(topo, SIVariantConfig.preset("v1"), VIConfig(), 8, np.random.default_rng(seed))
            train(model, benchmark, comp_split.train_ids, TrainSchedule.preset("toy", seed=seed))
            probs[seed, topo] = predict(model, benchmark, comp_split.val_ids)
    return probs, time.perf_counter() - start


def _top1(probs, benchmark, ids):
    return metrics_from_scores(probs, benchmark.labels(ids), range(8)).top1


# 1 ---------------------------------------------------------------------------


def test_c1_gradient_correctness(acceptance_log):
    start = time.perf_counter()
    results = run_suite(seed=0, eps=1e-5)
    elapsed = time.perf_counter() - start
    worst = max(results.values(), key=lambda r: r[0])
    ok = set(results) == set(CASES) and all(e < TOLERANCE for e, _ in results.values()) and elapsed < 120
    detail = ", ".join(f"{k} {e:.1e}" for k, (e, _) in results.items())
    record(acceptance_log, 1, "gradient check < 1e-4 in < 2 min", ok, f"worst {worst[0]:.2e}, {elapsed:.1f}s ({detail})")


# 2 ---------------------------------------------------------------------------


def test_c2_saf_oracle_equivalence(acceptance_log):
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        t_s, d_v, c_s, c_v, c = (int(x) for x in rng.integers(1, 7, size=5))
        with precision(np.float64):
            w = SAFWeights(rng, c_s, c_v, c).astype(np.float64)
            for p in (w.norm_s.gamma, w.norm_s.beta, w.norm_v.gamma, w.norm_v.beta):
                p.data[...] = rng.normal(size=p.shape)
            S, V = rng.normal(size=(t_s, c_s)), rng.normal(size=(d_v, c_v))
            a_sv, a_vs, (p_sv, p_vs) = saf_attend(Tensor(S, dtype=np.float64), Tensor(V, dtype=np.float64), w, True)
            f_s, f_v = saf_fuse(Tensor(S, dtype=np.float64), Tensor(V, dtype=np.float64), w)
        ref = oracles.saf(
            S, V, w.W_S.data, w.W_V.data, w.W_sy.data, w.W_vy.data,
            norm_s=(w.norm_s.gamma.data, w.norm_s.beta.data),
            norm_v=(w.norm_v.gamma.data, w.norm_v.beta.data),
        )
        ours = (a_sv.data, a_vs.data, f_s.data, f_v.data, p_sv, p_vs)
        worst = max(worst, max(float(np.max(np.abs(a - b))) for a, b in zip(ours, ref)))
    record(acceptance_log, 2, "SAF matches brute-force oracle within 1e-6 (100 instances)", worst < 1e-6, f"max abs diff {worst:.2e}")


# 3 ---------------------------------------------------------------------------


def test_c3_split_protocol(acceptance_log, benchmark, comp_split):
    pairs = {(v, n) for _, v, n in benchmark.instances()}
    by_id = {i: (v, n) for i, v, n in benchmark.instances()}
    train_pairs = {by_id[int(i)] for i in comp_split.train_ids}
    val_pairs = {by_id[int(i)] for i in comp_split.val_ids}
    overlap = train_pairs & val_pairs
    ok = not overlap and len(train_pairs) + len(val_pairs) <= len(pairs)
    ok &= {v for v, _ in val_pairs} == {v for v, _ in train_pairs}  # every verb seen, only compositions novel

    base, novel = fewshot_verbs(8)
    counts = {}
    for k in (1, 5, 10):
        fs = make_fewshot_split(benchmark.instances(), base, novel, k, seed=0)
        c = np.bincount([by_id[int(i)][0] for i in fs.train_ids], minlength=8)
        counts[k] = c[novel].tolist()
        ok &= all(x == k for x in c[novel]) and not c[base].any()
        ok &= not (set(map(int, fs.train_ids)) & set(map(int, fs.val_ids)))
        ok &= {by_id[int(i)][0] for i in fs.pretrain_ids} == set(base)
    record(
        acceptance_log, 3, "compositional split has no shared pairs; k-shot split has k per novel verb", ok,
        f"{len(train_pairs)} train / {len(val_pairs)} val pairs, overlap {len(overlap)}; novel counts {counts}",
    )


# 4 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c4_ordering(acceptance_log, sweep, benchmark, comp_split):
    probs, elapsed = sweep
    acc = {t: float(np.mean([_top1(probs[s, t], benchmark, comp_split.val_ids) for s in SEEDS])) for t in TOPOLOGIES}
    ok = (
        acc["late"] - acc["concat"] >= 0.02
        and acc["late"] > acc["si-only"]
        and acc["late"] > acc["vi-only"]
        and elapsed < 3600
    )
    detail = ", ".join(f"{t} {100 * a:.2f}" for t, a in acc.items()) + f"; sweep {elapsed / 60:.1f} min"
    record(acceptance_log, 4, "Late-SAF >= concat + 2 pts and beats si-only / vi-only (3-seed mean)", ok, detail)


# 5 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c5_ensemble_direction(acceptance_log, sweep, benchmark, comp_split):
    probs, _ = sweep
    ids = comp_split.val_ids
    gaps = []
    for s in SEEDS:
        members = [probs[s, t] for t in ("vi-only", "si-only", "late")]
        ens = _top1(ensemble(members), benchmark, ids)
        best = max(_top1(p, benchmark, ids) for p in members)
        gaps.append(100 * (ens - best))
    ok = all(g >= -0.5 for g in gaps)
    record(acceptance_log, 5, "ensemble >= best member - 0.5 pts on every seed", ok, "gaps " + ", ".join(f"{g:+.2f}" for g in gaps))


# 6 ---------------------------------------------------------------------------


@pytest.mark.slow
def test_c6_fewshot(acceptance_log, benchmark, tmp_path):
    base, novel = fewshot_verbs(8)
    fs = make_fewshot_split(benchmark.instances(), base, novel, 10, seed=0)
    model = assemble_model("late", SIVariantConfig.preset("v1"), VIConfig(), len(base), np.random.default_rng(0))
    pre, _ = train(model, benchmark, fs.pretrain_ids, TrainSchedule.preset("toy", seed=0), classes=base)
    frozen = _param_bytes(pre.build(), "head.")
    tuned, _ = fewshot_finetune(pre, benchmark, fs.train_ids, novel, 10, out_dir=tmp_path)
    after = _param_bytes(tuned.build(), "head.")
    report = evaluate(tuned, benchmark, fs.val_ids)
    n = report.count
    sigma = np.sqrt(0.25 * 0.75 / n)
    z = (report.top1 - 0.25) / sigma
    ok = z >= 3 and frozen == after and report.classes == novel
    record(
        acceptance_log, 6, "k=10 few-shot top-1 > chance + 3 sigma, frozen params byte-identical", ok,
        f"top-1 {100 * report.top1:.2f} on {n} clips ({z:.1f} sigma), {len(frozen)} frozen tensors identical={frozen == after}",
    )


# 7 ---------------------------------------------------------------------------


def _tree(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "run_manifest.json":
            data = p.read_bytes()
            if p.name == "metrics.json":
                d = json.loads(data)
                d.pop("wall_clock", None)
                data = json.dumps(d, sort_keys=True).encode()
            out[str(p.relative_to(root))] = data
    return out


def test_c7_determinism(acceptance_log, tmp_path):
    data = tmp_path / "data"
    assert main(["gen", "--data", str(data), "--out", str(tmp_path / "g"), "--nouns", "4", "--seeds", "2",
                 "--dims", "8", "32", "32"]) == 0
    runs = []
    for topo in ("late", "cascaded"):
        out = tmp_path / topo
        assert main(["train", "--data", str(data), "--out", str(out), "--topology", topo, "--epochs", "3",
                     "--batch", "8", "--seed", "7"]) == 0
        assert main(["replay", str(out / "run_manifest.json"), "--out", str(tmp_path / f"{topo}-replay")]) == 0
        runs.append((_tree(out), _tree(tmp_path / f"{topo}-replay")))
    ok = all(a == b and any("weights.bin" in k for k in a) for a, b in runs)
    n_files = sum(len(a) for a, _ in runs)
    record(acceptance_log, 7, "train replayed from its RunManifest is bit-identical", ok, f"{n_files} artifacts compared (wall-clock excluded)")


# 8 ---------------------------------------------------------------------------


def test_c8_format_round_trips(acceptance_log, tmp_path):
    problems = []
    clip = generate_clip(5, 9, 42)
    write_clip(clip, tmp_path / "clip")
    back = read_clip(tmp_path / "clip")
    if not (back == clip and back.frames.tobytes() == clip.frames.tobytes()):
        problems.append("clip round trip")

    model = assemble_model("late", SIVariantConfig.preset("v1"), VIConfig(), 8, np.random.default_rng(3))
    ck = Checkpoint.from_model(model, classes=list(range(8)), seed=3)
    ck.save(tmp_path / "ck")
    loaded = Checkpoint.load(tmp_path / "ck")
    same = loaded.digest() == ck.digest() and all(
        loaded.params[k].tobytes() == v.tobytes() for k, v in ck.params.items()
    )
    rebuilt = loaded.build()
    same &= all(p.data.tobytes() == ck.params[n].tobytes() for n, p in rebuilt.named_parameters())
    if not same:
        problems.append("checkpoint round trip")

    frames = tmp_path / "clip" / "frames.bin"
    good = frames.read_bytes()
    corruptions = {
        "magic": b"XXXX" + good[4:],
        "version": good[:4] + (9).to_bytes(4, "little") + good[8:],
        "zero dim": good[:8] + (0).to_bytes(4, "little") + good[12:],
        "wrong dim": good[:12] + (65).to_bytes(4, "little") + good[16:],
        "short header": good[:10],
        "truncated": good[:-4],
        "trailing": good + b"\0\0\0\0",
    }
    for name, raw in corruptions.items():
        frames.write_bytes(raw)
        try:
            read_frames(frames)
            problems.append(f"clip {name} read silently")
        except FormatError:
            pass
    frames.write_bytes(good)

    weights = tmp_path / "ck" / "weights.bin"
    manifest = tmp_path / "ck" / "manifest.json"
    w_good, m_good = weights.read_bytes(), manifest.read_text()
    m = json.loads(m_good)
    m_bad_version = dict(m, format_version=99)
    ck_corruptions = {
        "truncated weights": (w_good[:-8], m_good),
        "trailing weights": (w_good + b"\0" * 4, m_good),
        "bad version": (w_good, json.dumps(m_bad_version)),
        "bad json": (w_good, m_good[:-5]),
    }
    for name, (wb, mt) in ck_corruptions.items():
        weights.write_bytes(wb)
        manifest.write_text(mt)
        try:
            Checkpoint.load(tmp_path / "ck")
            problems.append(f"checkpoint {name} loaded silently")
        except FormatError:
            pass
    record(
        acceptance_log, 8, "clip and checkpoint round trips are bit-exact; corruption raises FormatError",
        not problems, "; ".join(problems) or f"{len(corruptions) + len(ck_corruptions)} corruptions rejected",
    )
