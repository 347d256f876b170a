"""Acceptance checks. Each test prints one ``ACCEPTANCE <n> PASS|FAIL`` line."""

import math
import subprocess
import sys
import time
from collections import deque
from pathlib import Path

import numpy as np
import pytest

from cosalign import alignment as al
from cosalign import checkpoint as ck
from cosalign.harness import load_config, replace
from cosalign.harness.gradchecks import run_all
from cosalign.harness.suite import (
    ABLATION_TABLE,
    CURVES_FILE,
    Benchmark,
    adaptation_study,
    run_ablation_suite,
)
from cosalign.harness.config import VARIANT_LABELS, VARIANTS
from cosalign.numerics import Tensor, nearest_resize
from cosalign.pseudolabel import TAU_CAP, compute_class_thresholds
from cosalign.synthdata import generate_dataset, generate_scene

BENCHMARK_CONFIG = Path(__file__).resolve().parents[1] / "configs" / "benchmark.cfg"
BENCHMARK_SEEDS = (0, 1, 2, 3, 4)
# fixed after the first full benchmark run (medians 0.607 / 0.753 / 0.763 / 0.761)
MIN_STAGE1_GAIN = 0.03
MAX_BENCHMARK_SECONDS = 20 * 60


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n} {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return report


def cosine_double_loop(targets, bank, eps=1e-8):
    out = np.empty((len(targets), len(bank)))
    bank_norms = [max(math.sqrt(sum(x * x for x in d)), eps) for d in bank]
    for i, t in enumerate(targets):
        nt = max(math.sqrt(sum(x * x for x in t)), eps)
        for j, d in enumerate(bank):
            out[i, j] = sum(a * b for a, b in zip(t, d)) / (nt * bank_norms[j])
    return out


def test_1_cosine_matrix_oracle(verdict):
    rng = np.random.default_rng(2024)
    worst, lib_seconds = 0.0, 0.0
    for _ in range(100):
        k = int(rng.integers(1, 65))
        n, m = int(rng.integers(1, 257)), int(rng.integers(1, 257))
        targets = rng.normal(size=(n, k)).astype(np.float32)
        bank = rng.normal(size=(m, k)).astype(np.float32)
        t0 = time.perf_counter()
        got = al.cosine_matrix(Tensor(targets), bank).data
        lib_seconds += time.perf_counter() - t0
        want = cosine_double_loop(targets.astype(float).tolist(), bank.astype(float).tolist())
        worst = max(worst, float(np.abs(got - want).max()))
    ok = worst <= 1e-6 and lib_seconds < 10
    verdict(1, ok, f"max |lib - oracle| = {worst:.2e} (tol 1e-6) over 100 cases, library time {lib_seconds:.2f}s")


def test_2_gradient_checks(verdict):
    t0 = time.perf_counter()
    reports = run_all(seed=0, tolerance=1e-3)
    seconds = time.perf_counter() - t0
    failed = [r.line() for r in reports if not r.passed]
    worst = max(r.max_rel_err for r in reports)
    ok = not failed and seconds < 60
    verdict(2, ok, f"{len(reports)} checks incl. both stage objectives, worst rel err {worst:.2e}, "
                   f"{seconds:.1f}s{'; ' + '; '.join(failed) if failed else ''}")


def test_3_dictionary_semantics(verdict, tmp_path):
    problems = []
    for capacity in range(1, 9):
        rng = np.random.default_rng(100 + capacity)
        k = 3
        d = al.FeatureDictionary(capacity, k)
        queues: dict[int, deque] = {}
        for step in range(40):
            h, w = int(rng.integers(1, 4)), int(rng.integers(1, 4))
            feature = Tensor(rng.normal(size=(k, h, w)), requires_grad=True)
            governing = rng.integers(0, 4, size=(h, w))
            split = al.split_target(feature, governing)
            d.enqueue(split)
            flat = feature.data.reshape(k, -1).T
            for c in split.classes:
                q = queues.setdefault(c, deque(maxlen=capacity))
                q.extend(flat[governing.reshape(-1) == c].tolist())
            for c, q in queues.items():
                if len(d.bucket(c)) > capacity:
                    problems.append(f"cap {capacity}: class {c} holds {len(d.bucket(c))}")
                if not np.array_equal(d.bucket(c), np.array(list(q), np.float32).reshape(-1, k)):
                    problems.append(f"cap {capacity} step {step}: class {c} order differs from FIFO")

            # detachment: a loss through the bank sends nothing into the vectors' origin
            snapshot = {c: d.bucket(c).tobytes() for c in d.buckets}
            target = Tensor(rng.normal(size=(k, 2, 2)), requires_grad=True)
            matrices, _ = al.class_similarities(al.split_target(target, rng.integers(1, 4, size=(2, 2))), d, -0.99)
            loss = al.cosine_loss(matrices, -0.99, 3)
            if matrices:
                loss.backward()
            if feature.grad is not None and np.any(feature.grad):
                problems.append(f"cap {capacity}: gradient reached stored vectors")
            if any(d.bucket(c).tobytes() != snapshot[c] for c in d.buckets):
                problems.append(f"cap {capacity}: bank changed during backward")
            feature.data[...] = 99.0
            if any(d.bucket(c).tobytes() != snapshot[c] for c in d.buckets):
                problems.append(f"cap {capacity}: bank aliases the feature map")

        path = tmp_path / f"d{capacity}.ckpt"
        ck.save_checkpoint(path, ck.with_prefix("dict", d.state_dict()))
        back = al.FeatureDictionary(capacity, k)
        back.load_state_dict(ck.strip_prefix("dict", ck.load_checkpoint(path)))
        if sorted(back.buckets) != sorted(d.buckets) or any(
            back.bucket(c).tobytes() != d.bucket(c).tobytes() for c in d.buckets
        ):
            problems.append(f"cap {capacity}: checkpoint round trip differs")
    verdict(3, not problems, "FIFO, bound, detachment, round trip over capacities 1-8"
            + (f"; {problems[:3]}" if problems else ""))


def percentile_oracle(dumps, num_classes):
    pooled = {c: [] for c in range(1, num_classes + 1)}
    for dump in dumps:
        _, h, w = dump.shape
        for i in range(h):
            for j in range(w):
                column = [float(v) for v in dump[:, i, j]]
                best = max(range(num_classes), key=lambda c: (column[c], -c))
                pooled[best + 1].append(column[best])
    tau = {}
    for c, values in pooled.items():
        ordered = sorted(values, reverse=True)
        tau[c] = min(ordered[len(ordered) // 2], 0.9) if ordered else 0.9
    return tau


def test_4_threshold_oracle(verdict):
    rng = np.random.default_rng(7)
    mismatches, capped = 0, 0
    for _ in range(1000):
        C = int(rng.integers(2, 6))
        h, w = int(rng.integers(1, 7)), int(rng.integers(1, 7))
        logits = rng.normal(size=(C, h, w)) * float(rng.choice([0.5, 2.0, 8.0]))
        e = np.exp(logits - logits.max(axis=0))
        dump = e / e.sum(axis=0)
        table = compute_class_thresholds([dump], C)
        want = percentile_oracle([dump], C)
        mismatches += table.tau != want
        capped += any(table.coverage[c] > 0 and t == TAU_CAP for c, t in table.tau.items())
    ok = mismatches == 0 and capped > 0
    verdict(4, ok, f"{mismatches} mismatches over 1000 dumps, {capped} dumps hit the {TAU_CAP} cap")


ONLY_CLASS = 4


def _unmatching_fixture():
    """One flagged source scene and one target scene showing the target-only class at feature scale."""
    source = generate_scene(0, "source", target_only_class=ONLY_CLASS)
    for seed in range(50):
        target = generate_scene(seed, "target", target_only_class=ONLY_CLASS)
        if (nearest_resize(target.label, 16, 16) == ONLY_CLASS).sum() >= 4:
            return source, target
    raise AssertionError("no target scene shows the target-only class")


def test_5_unmatching_regression(verdict):
    source, target = _unmatching_fixture()
    assert ONLY_CLASS not in source.label
    bench = Benchmark([source], [target], [], 5)
    pseudo = {target.seed: target.label.copy()}
    base = load_config(None, {"stage": "2", "max_iter": "10", "t_cos": "0.0"})

    no_dict = bench.trainer(replace(base, variant="no_dict"), pseudo=pseudo)
    skipped_always = all(ONLY_CLASS in r.skipped and ONLY_CLASS not in r.matched
                         for r in (no_dict.step() for _ in range(5)))

    unseen = bench.trainer(replace(base, dict_size=1), pseudo=pseudo)
    skipped_unseen = ONLY_CLASS in unseen.step().skipped

    seen = bench.trainer(replace(base, dict_size=1), pseudo=pseudo)
    # an earlier source image showed the class, so its bucket holds one vector
    seen.dictionaries[0].push(ONLY_CLASS, np.random.default_rng(0).normal(size=(1, seen.cfg.feature_dim)))
    matched_always = all(ONLY_CLASS in r.matched and ONLY_CLASS not in r.skipped
                         for r in (seen.step() for _ in range(5)))

    ok = skipped_always and skipped_unseen and matched_always
    verdict(5, ok, f"dictionary off: skipped every iteration={skipped_always}; "
                   f"on but unseen: skipped={skipped_unseen}; on after seen: matched every iteration={matched_always}")


@pytest.mark.slow
def test_6_adaptation_effect(verdict, tmp_path):
    data = generate_dataset(tmp_path / "synthshift")
    template = load_config(BENCHMARK_CONFIG, {"data": str(data)})
    t0 = time.perf_counter()
    finals = adaptation_study(template, BENCHMARK_SEEDS, tmp_path / "study")
    seconds = time.perf_counter() - t0
    med = {arm: float(np.median(v)) for arm, v in finals.items()}
    gain = med["stage1"] - med["source_only"]
    ok = gain >= MIN_STAGE1_GAIN and med["ours"] >= med["only_ssl"] and seconds < MAX_BENCHMARK_SECONDS
    verdict(6, ok, f"medians over {len(BENCHMARK_SEEDS)} seeds: source-only {med['source_only']:.4f}, "
                   f"stage 1 {med['stage1']:.4f} (gain {gain:+.4f}, need >= {MIN_STAGE1_GAIN}), "
                   f"ours {med['ours']:.4f} vs only SSL {med['only_ssl']:.4f}; {seconds:.0f}s")


def test_7_ablation_structure(verdict, tmp_path):
    data = generate_dataset(tmp_path / "data", n_train=4, n_eval=2, height=32, width=32)
    template = load_config(None, {"data": str(data), "max_iter": "4", "eval_every": "2", "dict_size": "16",
                                  "disc_channels": "8,8,8,8,1"})
    results = run_ablation_suite(template, [0], tmp_path / "abl")
    table = (tmp_path / "abl" / ABLATION_TABLE).read_text().splitlines()
    curves = (tmp_path / "abl" / CURVES_FILE).read_text().splitlines()
    header_ok = table[0] == ",".join(["seed", *(VARIANT_LABELS[v] for v in VARIANTS)])
    rows_ok = len(table) == 3 and all(len(r.split(",")) == 7 and "" not in r.split(",") for r in table[1:])
    curves_ok = curves[0] == "variant,seed,iter,miou" and len(curves) == 1 + 6 * 3
    ok = sorted(r.variant for r in results) == sorted(VARIANTS) and header_ok and rows_ok and curves_ok
    verdict(7, ok, f"{len(results)} runs, table header={header_ok}, rows={rows_ok}, curves={curves_ok}")


def test_8_multi_layer(verdict):
    thresholds = al.multi_layer_thresholds(0.5)
    thr_ok = thresholds == [0.5, 0.6, 0.7]

    # two taps carry one class-1 pair at cosine 0.8, the third has nothing to match; C = 2
    C = 2
    pair = (Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1), requires_grad=True), np.array([[0.8, 0.6]]))
    splits, banks = [], []
    for tap in range(3):
        feature, bank_vec = pair
        governing = np.ones((1, 1), int) if tap < 2 else np.zeros((1, 1), int)
        splits.append(al.split_target(feature, governing))
        bank = al.FeatureDictionary(1, 2)
        bank.push(1, bank_vec)
        banks.append(bank)
    loss, _ = al.multi_layer_cosine_loss(splits, banks, 0.5, C)
    hand = (abs(1 - 0.8) + abs(1 - 0.8)) / (3 * C)
    norm_ok = abs(loss.item() - hand) <= 1e-6
    verdict(8, thr_ok and norm_ok, f"thresholds {thresholds}; 2-tap loss {loss.item():.6f} vs hand {hand:.6f}")


def test_9_determinism(verdict, tmp_path):
    data = generate_dataset(tmp_path / "data", n_train=4, n_eval=2, height=32, width=32)
    configs = {
        "stage1": {},
        "multi_layer": {"multi_layer": "true"},
        "no_split": {"variant": "no_split"},
    }
    identical = {}
    for name, extra in configs.items():
        sets = {"data": str(data), "max_iter": "6", "eval_every": "2", "dict_size": "16", "seed": "3", **extra}
        digests = []
        for run in ("a", "b"):
            out = tmp_path / name / run
            args = [sys.executable, "-m", "cosalign.cli", "train"]
            for k, v in {**sets, "out": str(out)}.items():
                args += ["--set", f"{k}={v}"]
            subprocess.run(args, check=True, capture_output=True)
            digests.append((out / "metrics.csv").read_bytes())
        identical[name] = digests[0] == digests[1]

    pseudo_dir = tmp_path / "pl"
    subprocess.run([sys.executable, "-m", "cosalign.cli", "pseudo-label", "--ckpt",
                    str(tmp_path / "stage1" / "a" / "final.ckpt"), "--data", str(data), "--out", str(pseudo_dir)],
                   check=True, capture_output=True)
    bench = Benchmark.load(data)
    for variant in ("ours", "with_adv"):
        cfg = load_config(None, {"data": str(data), "stage": "2", "variant": variant, "max_iter": "6",
                                 "eval_every": "2", "dict_size": "16", "disc_channels": "8,8,8,8,1",
                                 "pseudo_dir": str(pseudo_dir)})
        runs = []
        for run in ("a", "b"):
            bench.trainer(cfg).run(tmp_path / variant / run)
            runs.append((tmp_path / variant / run / "metrics.csv").read_bytes())
        identical[f"stage2_{variant}"] = runs[0] == runs[1]
    verdict(9, all(identical.values()), f"byte-identical metrics.csv: {identical}")
