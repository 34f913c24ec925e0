"""End-to-end quality gates, one test per gated property.

Every expected value here is re-derived from first principles inside the
test (central finite differences, brute-force pixel counting, exhaustive
sign enumeration) or produced by running the full phantom -> preprocess ->
train -> evaluate pipeline at desk scale and checking segmentation
quality, the coordinate-channel effect, annotation-cross removal
fidelity, protocol invariants, and report rendering. The two training
runs are shared across tests through module-scoped fixtures; expect
roughly half an hour of wall time for the whole module.
"""

import itertools
import re
import time
from dataclasses import replace

import numpy as np
import pytest
import scipy.stats

from conftest import find_kink_free_point
from effseg.evaluate import (
    area_bias_pct,
    area_error_pct,
    cross_validate,
    dsc,
    histogram_counts,
    kfold_split,
    predict_sample,
    render_report,
    wilcoxon_signed_rank,
)
from effseg.net import UNetConfig, backward, forward_with_caches
from effseg.numerics import (
    conv2d,
    conv2d_backward,
    instance_norm,
    instance_norm_backward,
    leaky_relu,
    leaky_relu_backward,
    upsample2x,
    upsample2x_backward,
)
from effseg.phantom import (
    OBSERVER_STRENGTH,
    Sample,
    cross_template,
    generate_dataset,
    generate_depth_gated_dataset,
    preset_a,
    preset_gated,
    simulate_observer,
)
from effseg.preproc import detect_crosses, preprocess_pipeline
from effseg.storage import write_hist_csv
from effseg.train import TrainConfig, dice_ce_loss, train_fold

FD_STEP = 1e-3


def _fd(f, x, step=FD_STEP):
    """Central finite-difference gradient of scalar f, elementwise over x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.ravel(), g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * step)
    return g


def _rel(a, b, floor=1e-8):
    denom = max(np.abs(a).max(), np.abs(b).max(), floor)
    return np.abs(a - b).max() / denom


def _cleaned(sample, template):
    res = preprocess_pipeline(sample, None, template)
    return Sample(image=res.image, mask=res.mask, probe=sample.probe,
                  apex=sample.apex, cross_positions=[], id=sample.id)


# ------------------------------------------------- shared expensive runs

@pytest.fixture(scope="module")
def linear_phantoms():
    """51 linear-probe phantoms (seed 0): raw and cross-cleaned."""
    spec = preset_a()
    raw = generate_dataset(51, spec, seed=0)
    template = cross_template(spec.cross_size, spec.cross_arm)
    return raw, [_cleaned(s, template) for s in raw]


@pytest.fixture(scope="module")
def linear_cv(linear_phantoms):
    """5-fold CV of the default model on the cleaned 51-image set."""
    _, cleaned = linear_phantoms
    cfg = TrainConfig(epochs=20, steps_per_epoch=50, batch_size=4, seed=0)
    net = UNetConfig(depth=3, base_channels=8)
    t0 = time.monotonic()
    records = cross_validate(cleaned, cfg, net, k=5)
    return records, time.monotonic() - t0, cfg


@pytest.fixture(scope="module")
def gated_cv():
    """Both model variants cross-validated on the depth-gated task."""
    dataset = generate_depth_gated_dataset(100, preset_gated(), seed=0)
    cfg = TrainConfig(epochs=10, steps_per_epoch=25, batch_size=4, seed=0)
    base_net = UNetConfig(depth=2, base_channels=8)
    coord_net = replace(base_net, in_channels=None, coord_mode="cartesian",
                        coord_normalize=True)
    t0 = time.monotonic()
    baseline = cross_validate(dataset, cfg, base_net, k=5)
    coordconv = cross_validate(dataset, cfg, coord_net, k=5)
    return baseline, coordconv, time.monotonic() - t0


@pytest.fixture(scope="module")
def fold0_model_twice(linear_phantoms):
    """The same fold-0 training run executed twice from the same seed."""
    _, cleaned = linear_phantoms
    cfg = TrainConfig(epochs=8, steps_per_epoch=25, batch_size=4, seed=0)
    net = UNetConfig(depth=3, base_channels=8)
    held = set(kfold_split(sorted(s.id for s in cleaned), k=5, seed=cfg.seed).folds[0])
    train_samples = [s for s in cleaned if s.id not in held]
    first, _ = train_fold(train_samples, cfg, net)
    second, _ = train_fold(train_samples, cfg, net)
    return first, second, net


# ------------------------------------------------------------- criteria

def test_gradients_match_central_finite_differences():
    t0 = time.monotonic()
    rng = np.random.default_rng(41)

    x = rng.normal(size=(2, 3, 6, 7))
    w = 0.5 * rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=(4,))
    r = rng.normal(size=conv2d(x, w, b, stride=1, pad=1).shape)
    dx, dw, db = conv2d_backward(r, x, w, stride=1, pad=1)
    assert _rel(dx, _fd(lambda v: np.sum(conv2d(v, w, b, stride=1, pad=1) * r), x)) <= 1e-6
    assert _rel(dw, _fd(lambda v: np.sum(conv2d(x, v, b, stride=1, pad=1) * r), w)) <= 1e-6
    assert _rel(db, _fd(lambda v: np.sum(conv2d(x, w, v, stride=1, pad=1) * r), b)) <= 1e-6

    x = rng.normal(size=(2, 3, 5, 5))
    x += np.sign(x) * 0.01  # keep every entry clear of the leaky-ReLU kink
    r = rng.normal(size=x.shape)
    assert _rel(leaky_relu_backward(r, x),
                _fd(lambda v: np.sum(leaky_relu(v) * r), x)) <= 1e-6

    x = rng.normal(size=(2, 3, 6, 6))
    r = rng.normal(size=x.shape)
    assert _rel(instance_norm_backward(r, x),
                _fd(lambda v: np.sum(instance_norm(v) * r), x)) <= 1e-6

    x = rng.normal(size=(1, 2, 4, 4))
    r = rng.normal(size=(1, 2, 8, 8))
    assert _rel(upsample2x_backward(r),
                _fd(lambda v: np.sum(upsample2x(v) * r), x)) <= 1e-6

    logits = rng.normal(size=(2, 2, 8, 8))
    targets = rng.integers(0, 2, size=(2, 8, 8)).astype(np.float64)
    _, dlogits = dice_ce_loss(logits, targets)
    assert _rel(dlogits, _fd(lambda v: dice_ce_loss(v, targets)[0], logits)) <= 1e-6

    # full composition: every parameter and the input, through the loss
    cfg = UNetConfig(depth=1, base_channels=2)
    model, x, _ = find_kink_free_point(cfg)
    targets = np.random.default_rng(11).integers(0, 2, size=x.shape[:1] + x.shape[2:])
    targets = targets.astype(np.float64)

    def loss_now():
        logits, caches = forward_with_caches(model, x)
        loss, dlogits = dice_ce_loss(logits, targets)
        return loss, caches, dlogits

    loss, caches, dlogits = loss_now()
    grads, dx_analytic = backward(model, caches, dlogits)
    for name, tensor in model.params.items():
        fd = np.zeros_like(tensor.data)
        flat, gf = tensor.data.ravel(), fd.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + FD_STEP
            fp = loss_now()[0]
            flat[i] = orig - FD_STEP
            fm = loss_now()[0]
            flat[i] = orig
            gf[i] = (fp - fm) / (2 * FD_STEP)
        assert _rel(grads[name], fd, floor=1e-6) <= 1e-5, name
    fd_x = _fd(lambda v: dice_ce_loss(forward_with_caches(model, v)[0], targets)[0], x)
    assert _rel(dx_analytic, fd_x, floor=1e-6) <= 1e-5

    assert time.monotonic() - t0 < 60.0


def test_overlap_and_area_metrics_match_brute_force():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        a = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        b = rng.integers(0, 2, size=(16, 16)).astype(np.uint8)
        inter = ca = cb = 0
        for i in range(16):
            for j in range(16):
                ca += a[i, j] == 1
                cb += b[i, j] == 1
                inter += a[i, j] == 1 and b[i, j] == 1
        expected = 1.0 if ca + cb == 0 else 2.0 * inter / (ca + cb)
        assert dsc(a, b) == expected
        assert cb > 0  # random 16x16 masks never come up empty
        assert area_error_pct(a, b) == abs(area_bias_pct(a, b))


def _two_tailed_by_enumeration(a, b):
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    ranks = scipy.stats.rankdata(np.abs(d))
    w = float(ranks[d > 0].sum())
    n_le = n_ge = 0
    for signs in itertools.product((0, 1), repeat=d.size):
        ws = sum(r for s, r in zip(signs, ranks) if s)
        n_le += ws <= w + 1e-9
        n_ge += ws >= w - 1e-9
    total = 2 ** d.size
    return min(1.0, 2.0 * min(n_le, n_ge) / total)


def test_wilcoxon_exact_path_and_approximation():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(4, 11))
        b = rng.integers(0, 20, size=n).astype(np.float64)
        a = b + rng.integers(-6, 7, size=n)
        if np.all(a == b):
            a[0] += 1.0
        res = wilcoxon_signed_rank(list(a), list(b), method="exact")
        assert abs(res.p_value - _two_tailed_by_enumeration(a, b)) <= 1e-12

    base = [10.0, 11.0, 12.0, 13.0, 14.0, 15.0]
    improved = [v + d for v, d in zip(base, (1.0, 2.0, 0.5, 3.0, 1.5, 2.5))]
    assert wilcoxon_signed_rank(improved, base).p_value == 0.03125

    for trial in range(20):
        g = np.random.default_rng(100 + trial)
        b = g.normal(size=25)
        a = b + g.normal(loc=0.3, size=25)
        exact = wilcoxon_signed_rank(list(a), list(b), method="exact")
        approx = wilcoxon_signed_rank(list(a), list(b), method="approx")
        assert abs(exact.p_value - approx.p_value) <= 0.01


def test_linear_probe_cv_reaches_segmentation_quality(linear_cv):
    records, elapsed, _ = linear_cv
    assert len(records) == 51
    assert all(r.variant == "baseline" for r in records)
    dscs = [r.dsc for r in records]
    area_errors = [r.abs_area_error_pct for r in records]
    assert not any(np.isnan(area_errors))
    print(f"\n  median DSC {np.median(dscs):.3f}, "
          f"median abs area error {np.median(area_errors):.1f}%, "
          f"CV wall time {elapsed / 60:.1f} min")
    assert np.median(dscs) >= 0.85
    assert np.median(area_errors) <= 15.0
    assert elapsed <= 30 * 60


def test_coordconv_outperforms_baseline_on_depth_gated_task(gated_cv):
    baseline, coordconv, elapsed = gated_cv
    assert len(baseline) == len(coordconv) == 100
    med_base = np.median([r.dsc for r in baseline])
    med_coord = np.median([r.dsc for r in coordconv])
    res = wilcoxon_signed_rank([r.dsc for r in coordconv],
                               [r.dsc for r in baseline])
    print(f"\n  baseline {med_base:.3f} vs coordconv {med_coord:.3f}, "
          f"p = {res.p_value:.2e}, wall time {elapsed / 60:.1f} min")
    assert med_coord - med_base >= 0.10
    assert res.p_value < 0.05
    assert elapsed <= 30 * 60


def test_cross_removal_is_faithful_and_harmless(fold0_model_twice):
    spec = preset_a()
    template = cross_template(spec.cross_size, spec.cross_arm)
    half = spec.cross_size // 2
    with_crosses = generate_dataset(50, spec, seed=6)
    cross_free = generate_dataset(50, replace(spec, burn_crosses=False), seed=6)

    hits = misses = false_pos = 0
    residuals = []
    cleaned = []
    for marked, clean in zip(with_crosses, cross_free):
        detections = detect_crosses(marked.image, template)
        for tr, tc in marked.cross_positions:
            found = any(abs(r - tr) <= 1 and abs(c - tc) <= 1 for r, c in detections)
            hits += found
            misses += not found
        false_pos += sum(
            not any(abs(r - tr) <= 1 and abs(c - tc) <= 1
                    for tr, tc in marked.cross_positions)
            for r, c in detections)
        result = preprocess_pipeline(marked, None, template)
        cleaned.append(result)
        footprint = np.zeros(marked.image.shape, dtype=bool)
        for tr, tc in marked.cross_positions:
            footprint[tr - half:tr + half + 1, tc - half:tc + half + 1] = True
        residuals.append(float(np.abs(result.image[footprint]
                                      - clean.image[footprint]).mean()))
    print(f"\n  recall {hits}/{hits + misses}, {false_pos} false positives, "
          f"residual mean {np.mean(residuals):.4f} max {max(residuals):.4f}")
    assert hits == 100 and misses == 0
    assert false_pos == 0
    assert np.mean(residuals) < 0.02
    assert max(residuals) < 0.02

    model, _, net = fold0_model_twice
    diffs = []
    for result, clean in zip(cleaned, cross_free):
        on_cleaned = predict_sample(model, net, Sample(
            image=result.image, mask=result.mask, probe=clean.probe,
            apex=clean.apex, cross_positions=[], id=clean.id))
        on_free = predict_sample(model, net, clean)
        diffs.append(abs(dsc(on_cleaned, clean.mask) - dsc(on_free, clean.mask)))
    print(f"  cleaned-vs-cross-free DSC median |diff| {np.median(diffs):.5f}")
    assert np.median(diffs) < 0.01


def test_protocol_invariants_and_reproducibility(linear_phantoms, linear_cv,
                                                 fold0_model_twice):
    sizes = sorted((len(f) for f in kfold_split([str(i) for i in range(51)],
                                                k=5, seed=0).folds), reverse=True)
    assert sizes == [11, 10, 10, 10, 10]
    sizes = sorted((len(f) for f in kfold_split([str(i) for i in range(92)],
                                                k=5, seed=0).folds), reverse=True)
    assert sizes == [19, 19, 18, 18, 18]

    # every sample was scored exactly once, by the fold that held it out
    records, _, cfg = linear_cv
    raw, cleaned = linear_phantoms
    split = kfold_split(sorted(s.id for s in cleaned), k=5, seed=cfg.seed)
    assert sorted(r.id for r in records) == sorted(s.id for s in cleaned)
    for record in records:
        assert record.id in split.folds[record.fold]

    # bit-reproducibility: phantoms, fold splits, and a full training run
    again = generate_dataset(51, preset_a(), seed=0)
    for s1, s2 in zip(raw, again):
        assert np.array_equal(s1.image, s2.image)
        assert np.array_equal(s1.mask, s2.mask)
    assert kfold_split(sorted(s.id for s in cleaned), k=5, seed=cfg.seed).folds \
        == split.folds
    first, second, _ = fold0_model_twice
    assert first.params.keys() == second.params.keys()
    for name in first.params:
        assert np.array_equal(first.params[name].data, second.params[name].data), name


def test_report_renders_summary_rows_and_calibrated_interobserver(
        linear_phantoms, gated_cv, tmp_path):
    raw, _ = linear_phantoms
    interobs = [dsc(simulate_observer(s.mask, OBSERVER_STRENGTH, seed=71 + i), s.mask)
                for i, s in enumerate(raw)]
    med = float(np.median(interobs))
    print(f"\n  simulated inter-observer median DSC {med:.3f}")
    assert 0.65 <= med <= 0.85

    baseline, coordconv, _ = gated_cv
    text = render_report(baseline, coordconv, interobs)
    triplet = r"-?\d+\.\d+ \(-?\d+\.\d+, -?\d+\.\d+\)"
    for label in ("DSC", "Abs. area error %", "Area bias %"):
        row = next(line for line in text.splitlines() if line.startswith(label))
        assert len(re.findall(triplet, row)) == 2, row
    assert f"{med:.2f}" in text
    assert "Baseline" in text and "Coord. conv." in text and "Inter-observer" in text

    for name, recs in (("baseline", baseline), ("coordconv", coordconv)):
        counts, edges = histogram_counts([r.dsc for r in recs])
        path = tmp_path / f"hist_{name}.csv"
        write_hist_csv(path, counts, edges)
        rows = path.read_text().strip().splitlines()[1:]
        assert sum(int(r.rsplit(",", 1)[1]) for r in rows) == len(recs)
