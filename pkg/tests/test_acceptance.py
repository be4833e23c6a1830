"""Acceptance criteria 1-7, one PASS/FAIL line per criterion.

Criterion 7 needs external assets and is skipped unless these variables are set:
ZSAL_BENCH_MODEL (converted ViT-B-16+ archive), ZSAL_BENCH_MANIFEST (MVTecAD test
manifest) and ZSAL_BENCH_TOKENS (directory of ``<class>.tokens`` built from the
default bank with the CLIP tokenizer).
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from conftest import unit_rows
from gradcheck import random_instance, relative_error
from metric_oracles import aupr_exhaustive, auroc_pairs, f1max_exhaustive
from metric_oracles import random_instance as metric_instance
from zsal.blocks import BlockWeights, qkv_block, vv_block
from zsal.cli import main
from zsal.fixtures import FIXTURE_CONFIG, planted_image
from zsal.image_io import preprocess_array, read_raw_map, write_raw_map
from zsal.metrics import aupr, auroc, f1max, pro
from zsal.pipeline import localize_rgb
from zsal.scoring import score_rows
from zsal.tta import TtaConfig, adapt_tokens, run_tta
from zsal.vision import EncodeMode, encode_image
from zsal.weights_io import WeightStore, load_archive, make_synthetic_model, save_archive

GRAD_INSTANCES = 50
GRAD_TOL = 1e-3
GRAD_SECONDS = 10.0
METRIC_INSTANCES = 1000
METRIC_TOL = 1e-9
METRIC_SECONDS = 30.0
ANTISYMMETRY_TOL = 1e-6
AUROC_SLACK = 0.02
MODES = [m.value for m in EncodeMode]


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
        assert ok, detail

    return emit


def test_criterion_1_gradient(report):
    t0 = time.perf_counter()
    errors = [relative_error(random_instance(seed)) for seed in range(GRAD_INSTANCES)]
    elapsed = time.perf_counter() - t0
    worst = max(errors)
    ok = worst < GRAD_TOL and elapsed < GRAD_SECONDS
    report(1, ok, f"{GRAD_INSTANCES} float64 FD checks, max rel err {worst:.2e} (< {GRAD_TOL}), {elapsed:.2f}s (< {GRAD_SECONDS}s)")


def test_criterion_2_metric_oracles(report):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    auroc_err = f1_err = ap_err = 0.0
    for _ in range(METRIC_INSTANCES):
        s, y = metric_instance(rng, 200)
        auroc_err = max(auroc_err, abs(auroc(s, y) - auroc_pairs(s, y)))
        s, y = metric_instance(rng, 50)
        f1_err = max(f1_err, abs(f1max(s, y) - f1max_exhaustive(s, y)))
        ap_err = max(ap_err, abs(aupr(s, y) - aupr_exhaustive(s, y)))
    mask = np.zeros((4, 8), int)
    mask[0:2, 0:2] = 1
    mask[0:2, 5:7] = 1
    scores = np.zeros((4, 8))
    scores[0:2, 0:2] = 1.0
    scores[0:2, 5] = 1.0
    pro_value = pro(scores, mask)
    elapsed = time.perf_counter() - t0
    ok = max(auroc_err, f1_err, ap_err) < METRIC_TOL and pro_value == 0.75 and elapsed < METRIC_SECONDS
    report(2, ok, f"{METRIC_INSTANCES} instances, max err auroc {auroc_err:.1e} f1max {f1_err:.1e} "
                  f"aupr {ap_err:.1e} (< {METRIC_TOL}); pro {pro_value} (== 0.75); {elapsed:.2f}s (< {METRIC_SECONDS}s)")


def _permute_patches(image, perm, p):
    c, s, _ = image.shape
    g = s // p
    tiles = image.reshape(c, g, p, g, p).transpose(1, 3, 0, 2, 4).reshape(g * g, c, p, p)[perm]
    return tiles.reshape(g, g, c, p, p).transpose(2, 0, 3, 1, 4).reshape(c, s, s)


def test_criterion_3_structural_invariants(report):
    rng = np.random.default_rng(3)
    cfg = FIXTURE_CONFIG
    store = make_synthetic_model(cfg, 0)
    image = rng.standard_normal((3, cfg.image_size, cfg.image_size)).astype(np.float32)
    checks = {}

    vs = {encode_image(image, store, cfg, m).v.tobytes() for m in MODES}
    checks["a v bitwise-equal across modes"] = len(vs) == 1

    entries = dict(store.entries)
    entries["visual.positional_embedding"] = np.zeros_like(entries["visual.positional_embedding"])
    flat = WeightStore(entries, store.metadata)
    perm = rng.permutation(cfg.num_patches)
    shuffled = _permute_patches(image, perm, cfg.patch_size)
    checks["b permutation equivariance"] = all(
        np.allclose(encode_image(shuffled, flat, cfg, m).patches, encode_image(image, flat, cfg, m).patches[perm], atol=1e-5)
        for m in MODES
    )

    width = 8
    zero = {k: np.zeros(s, np.float32) for k, s in {
        "qkv_weight": (3 * width, width), "qkv_bias": (3 * width,), "out_weight": (width, width), "out_bias": (width,),
        "fc_weight": (4 * width, width), "fc_bias": (4 * width,), "proj_weight": (width, 4 * width), "proj_bias": (width,),
        "ln_1_bias": (width,), "ln_2_bias": (width,)}.items()}
    w = BlockWeights(ln_1_weight=np.ones(width, np.float32), ln_2_weight=np.ones(width, np.float32), **zero)
    z = rng.standard_normal((5, width)).astype(np.float32)
    checks["c residual identity"] = np.array_equal(qkv_block(z, w, 2), z) and np.array_equal(vv_block(z, w, 2), z)

    rows = unit_rows(rng, 50, 16, np.float32)
    tp, tm = unit_rows(rng, 2, 16, np.float32)
    gap = np.abs(score_rows(rows, tp, tm, 100.0) + score_rows(rows, tm, tp, 100.0) - 1.0).max()
    checks["d antisymmetry"] = gap <= ANTISYMMETRY_TOL

    p = unit_rows(rng, 10, 16, np.float32)
    checks["e adapter identity at T=0"] = np.array_equal(
        adapt_tokens(p, rng.standard_normal((6, 16)).astype(np.float32), np.zeros((6, 16), np.float32)), p
    )
    failed = [k for k, v in checks.items() if not v]
    report(3, not failed, "all of (a)-(e) hold" if not failed else f"failed: {failed}")


def test_criterion_4_tta_behaviour(report, ci):
    patches = encode_image(preprocess_array(ci.rgb, ci.config), ci.store, ci.config, ci.mode).patches
    res = run_tta(patches, ci.pair, TtaConfig())
    again = run_tta(patches, ci.pair, TtaConfig())
    tfa = localize_rgb(ci.rgb, ci.store, ci.config, ci.pair, mode=ci.mode)
    tta = localize_rgb(ci.rgb, ci.store, ci.config, ci.pair, mode=ci.mode, tta=TtaConfig())
    tta2 = localize_rgb(ci.rgb, ci.store, ci.config, ci.pair, mode=ci.mode, tta=TtaConfig())
    a_tfa, a_tta = auroc(tfa.anomaly_map.scores, ci.mask), auroc(tta.anomaly_map.scores, ci.mask)
    deterministic = res.trace == again.trace and tta.anomaly_map.scores.tobytes() == tta2.anomaly_map.scores.tobytes()
    ok = res.final_loss < res.initial_loss and a_tta >= a_tfa - AUROC_SLACK and deterministic
    report(4, ok, f"L {res.initial_loss:.6f} -> {res.final_loss:.6f} (same noise draw); pixel AUROC "
                  f"TFA {a_tfa:.4f} TTA {a_tta:.4f} (>= TFA - {AUROC_SLACK}); deterministic={deterministic}")


def test_criterion_5_end_to_end_determinism(report, tmp_path):
    (tmp_path / "cfg.json").write_text(FIXTURE_CONFIG.to_json())
    model, tokens = tmp_path / "m.zsal", tmp_path / "t.tokens"
    assert main(["synth-model", "--config", str(tmp_path / "cfg.json"), "--out", str(model)]) == 0
    assert main(["prompts", "--model", str(model), "--class", "bottle", "--tier", "+CS", "--out", str(tokens)]) == 0
    lines = []
    for i in range(2):
        rgb, mask = planted_image(10 + i, anomaly_patches=((1, 1),) if i == 0 else ())
        Image.fromarray(rgb).save(tmp_path / f"i{i}.png")
        if i == 0:
            Image.fromarray(mask * 255).save(tmp_path / "m0.png")
        lines.append(f"i{i}.png\t{'m0.png' if i == 0 else '-'}\tbottle\t{1 - i}")
    (tmp_path / "manifest.tsv").write_text("\n".join(lines) + "\n")
    digests = []
    for run in ("a", "b"):
        out = tmp_path / run
        out.mkdir()
        base = ["--model", str(model), "--tokens", str(tokens), "--tta", "--seed", "7"]
        assert main(["localize", *base, "--image", str(tmp_path / "i0.png"), "--out", str(out / "map.pgm"),
                     "--out-raw", str(out / "map.raw"), "--trace", str(out / "trace.csv")]) == 0
        assert main(["eval", *base, "--manifest", str(tmp_path / "manifest.tsv"), "--out", str(out / "r.json")]) == 0
        digests.append([p.read_bytes() for p in sorted(out.iterdir())])
    report(5, digests[0] == digests[1], f"{len(digests[0])} output files byte-identical across two runs")


def test_criterion_6_round_trips(report, tmp_path):
    store = make_synthetic_model(FIXTURE_CONFIG, 6)
    save_archive(store, tmp_path / "m.zsal")
    archive_ok = load_archive(tmp_path / "m.zsal").bitwise_equal(store)
    scores = np.random.default_rng(6).random((37, 53)).astype(np.float32)
    write_raw_map(scores, tmp_path / "m.raw")
    raw_ok = read_raw_map(tmp_path / "m.raw").tobytes() == scores.tobytes()
    report(6, archive_ok and raw_ok, f"weight archive bitwise={archive_ok}, raw map bitwise={raw_ok}")


BENCH_ENV = ("ZSAL_BENCH_MODEL", "ZSAL_BENCH_MANIFEST", "ZSAL_BENCH_TOKENS")


def test_criterion_7_benchmark_numbers(report, capsys):
    from zsal.cli import TokenSource, evaluate_manifest, read_manifest

    missing = [k for k in BENCH_ENV if not os.environ.get(k)]
    if missing:
        with capsys.disabled():
            print(f"\n[SKIP] criterion 7: optional tier, set {', '.join(missing)}")
        pytest.skip("optional tier needs pretrained weights and MVTecAD")

    store = load_archive(os.environ["ZSAL_BENCH_MODEL"])
    config = store.config()
    records = read_manifest(Path(os.environ["ZSAL_BENCH_MANIFEST"]))
    tokens = TokenSource(os.environ["ZSAL_BENCH_TOKENS"])
    px = {m: evaluate_manifest(records, store, config, tokens, m, None, None)["mean"]["pixel"] for m in MODES}
    tta = evaluate_manifest(records, store, config, tokens, "vv_multi", TtaConfig(), None)["mean"]["pixel"]
    auc = {m: 100 * px[m]["auroc"] for m in MODES}
    pro_tfa = 100 * px["vv_multi"]["pro"]
    ordered = auc["qkv"] < auc["v_last"] < auc["vv_last"] < auc["vv_multi"]
    ok = abs(auc["vv_multi"] - 86.6) <= 2.0 and abs(pro_tfa - 70.4) <= 3.0 and ordered \
        and 100 * tta["auroc"] - auc["vv_multi"] >= 1.0
    report(7, ok, f"TFA AUROC {auc['vv_multi']:.1f} PRO {pro_tfa:.1f}; ordering {ordered} "
                  f"({', '.join(f'{m} {auc[m]:.1f}' for m in MODES)}); TTA AUROC {100 * tta['auroc']:.1f}")
