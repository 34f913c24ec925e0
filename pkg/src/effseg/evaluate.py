"""Segmentation metrics, k-fold protocol, Wilcoxon signed-rank, report text.

The Wilcoxon exact path enumerates the full sign-assignment distribution via
a subset-sum table over doubled ranks (doubling makes tie-averaged half-ranks
integral), so exact two-tailed p-values are available up to n = 25 pairs;
larger n falls back to the tie-corrected normal approximation with
continuity correction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .net import UNetConfig, forward, predict_mask
from .train import TrainConfig, _coord_batch, train_fold

EXACT_CUTOFF = 25
SIGNIFICANCE = 0.05


@dataclass
class MetricsRecord:
    id: str
    variant: str                 # baseline | coordconv
    fold: int
    dsc: float
    abs_area_error_pct: float    # NaN when ground truth is empty
    area_bias_pct: float


@dataclass
class FoldSplit:
    folds: list[list[str]]


@dataclass
class WilcoxonResult:
    n_effective: int
    statistic: float             # W = sum of positive-difference ranks
    p_value: float
    method: str                  # exact | normal-approximation


def _as_binary_mask(m, name):
    a = np.asarray(m)
    if not np.isin(a, (0, 1)).all():
        raise ValueError(f"{name} must be binary {{0, 1}}")
    return a.astype(bool)


def dsc(pred, gt) -> float:
    """2|X∩Y| / (|X|+|Y|); two empty masks agree perfectly (1.0)."""
    p = _as_binary_mask(pred, "pred")
    g = _as_binary_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask dims differ: {p.shape} vs {g.shape}")
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def area_error_pct(pred, gt) -> float:
    """abs(|X| - |Y|) / |Y| * 100."""
    return abs(area_bias_pct(pred, gt))


def area_bias_pct(pred, gt) -> float:
    """(|X| - |Y|) / |Y| * 100; positive means over-segmentation."""
    p = _as_binary_mask(pred, "pred")
    g = _as_binary_mask(gt, "gt")
    if p.shape != g.shape:
        raise ValueError(f"mask dims differ: {p.shape} vs {g.shape}")
    ny = int(g.sum())
    if ny == 0:
        raise ValueError("empty ground truth: area percentages are undefined")
    return (int(p.sum()) - ny) / ny * 100.0


def median_quartiles(values) -> tuple[float, float, float]:
    """(q1, median, q3) by linear interpolation at positions (n-1)*q."""
    v = np.asarray(list(values), dtype=np.float64)
    if v.size == 0:
        raise ValueError("median_quartiles needs a nonempty list")
    q1, med, q3 = np.quantile(v, [0.25, 0.5, 0.75])
    return float(q1), float(med), float(q3)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _exact_two_tailed(r2: np.ndarray, w2: int, n: int) -> float:
    """Tail of the exact W distribution over all 2^n sign assignments.

    r2 holds doubled ranks (integers); the subset-sum table counts how many
    assignments produce each doubled rank-sum.
    """
    total = int(r2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in r2:
        counts[r:] += counts[: total + 1 - r]
    denom = 2.0**n
    p_le = counts[: w2 + 1].sum() / denom
    p_ge = counts[w2:].sum() / denom
    return min(1.0, 2.0 * min(p_le, p_ge))


def wilcoxon_signed_rank(a, b, paired: bool = True, method: str = "auto") -> WilcoxonResult:
    """Two-tailed signed-rank test on paired samples a, b.

    Zero differences are dropped; |differences| are average-ranked; W sums
    the ranks of positive differences. method: auto | exact | approx.
    """
    if not paired:
        raise ValueError("signed-rank is a paired test; paired must be True")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValueError(f"need equal-length 1-D samples, got {a.shape} and {b.shape}")
    if a.size == 0:
        raise ValueError("need at least one pair")
    d = a - b
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        raise ValueError("no nonzero pairs")
    absd = np.abs(d)
    ranks = _average_ranks(absd)
    w = float(ranks[d > 0].sum())
    use_exact = method == "exact" or (method == "auto" and n <= EXACT_CUTOFF)
    if use_exact:
        r2 = np.rint(2.0 * ranks).astype(np.int64)
        p = _exact_two_tailed(r2, int(round(2.0 * w)), n)
        return WilcoxonResult(n, w, p, "exact")
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var -= float(((tie_counts**3 - tie_counts) / 48.0).sum())
    if var <= 0:
        raise ValueError("zero variance: all differences are tied at one value")
    z = max(abs(w - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return WilcoxonResult(n, w, p, "normal-approximation")


def kfold_split(ids, k: int = 5, seed: int = 0) -> FoldSplit:
    """Seeded shuffle, then round-robin deal into k folds."""
    ids = list(ids)
    if len(ids) < k:
        raise ValueError(f"need at least k={k} ids, got {len(ids)}")
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(set(ids)) != len(ids):
        raise ValueError("ids must be unique")
    rng = np.random.default_rng(seed)
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    return FoldSplit(folds=[shuffled[i::k] for i in range(k)])


def variant_name(unet_config: UNetConfig) -> str:
    return "baseline" if unet_config.coord_mode == "none" else "coordconv"


def predict_sample(model, unet_config: UNetConfig, sample) -> np.ndarray:
    """Hard mask for one sample (adds coordinate channels as configured)."""
    x = _coord_batch([np.asarray(sample.image)], unet_config,
                     [getattr(sample, "apex", None)])
    return predict_mask(forward(model, x))[0]


def record_for(sample, pred, variant: str, fold: int) -> MetricsRecord:
    """Metrics vs ground truth; empty ground truth yields NaN area stats."""
    score = dsc(pred, sample.mask)
    try:
        bias = area_bias_pct(pred, sample.mask)
        err = abs(bias)
    except ValueError:
        bias = err = math.nan
    return MetricsRecord(id=sample.id, variant=variant, fold=fold,
                         dsc=score, abs_area_error_pct=err, area_bias_pct=bias)


def cross_validate(dataset, train_config: TrainConfig, unet_config: UNetConfig,
                   k: int = 5) -> list[MetricsRecord]:
    """Image-level k-fold CV: each sample is predicted exactly once, by the
    model whose training folds excluded it. Records come back sorted by id."""
    by_id = {s.id: s for s in dataset}
    if len(by_id) != len(dataset):
        raise ValueError("duplicate sample ids in dataset")
    split = kfold_split(sorted(by_id), k=k, seed=train_config.seed)
    variant = variant_name(unet_config)
    records = []
    for fold_idx, held_out in enumerate(split.folds):
        held = set(held_out)
        train_samples = [s for s in dataset if s.id not in held]
        fold_config = replace(train_config, seed=train_config.seed + fold_idx)
        model, _ = train_fold(train_samples, fold_config, unet_config)
        for sid in held_out:
            pred = predict_sample(model, unet_config, by_id[sid])
            records.append(record_for(by_id[sid], pred, variant, fold_idx))
    return sorted(records, key=lambda r: r.id)


def histogram_counts(values, bins: int = 10,
                     value_range: tuple[float, float] = (0.0, 1.0)):
    """Equal-width histogram; the last bin includes its right edge.

    Returns (counts, edges); counts sum to the number of in-range values.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    counts, edges = np.histogram(list(values), bins=bins, range=value_range)
    return [int(c) for c in counts], [float(e) for e in edges]


def _fmt_triplet(values, decimals: int) -> str:
    q1, med, q3 = median_quartiles(values)
    return f"{med:.{decimals}f} ({q1:.{decimals}f}, {q3:.{decimals}f})"


def summarize_report(baseline: list[MetricsRecord], coordconv: list[MetricsRecord],
                     interobs_pairs) -> str:
    """Three-column summary: per-variant median (q1, q3) rows for DSC and
    area statistics, the inter-observer median DSC, and the paired Wilcoxon
    between variant DSCs (rendered as "p = n/a" when all pairs tie)."""
    return render_report(baseline, coordconv,
                         [dsc(m1, m2) for m1, m2 in interobs_pairs])


def render_report(baseline: list[MetricsRecord], coordconv: list[MetricsRecord],
                  interobs_dscs: list[float]) -> str:
    """Like summarize_report but takes precomputed inter-observer DSCs, so
    reports can be rebuilt from stored records without the original masks."""
    if not baseline or not coordconv:
        raise ValueError("both variant record sets must be nonempty")
    base = sorted(baseline, key=lambda r: r.id)
    coord = sorted(coordconv, key=lambda r: r.id)
    if [r.id for r in base] != [r.id for r in coord]:
        raise ValueError("variant record sets cover different sample ids")

    def area_values(records, attr):
        return [getattr(r, attr) for r in records if not math.isnan(r.area_bias_pct)]

    excluded = sum(1 for r in base if math.isnan(r.area_bias_pct))
    inter_med = f"{median_quartiles(interobs_dscs)[1]:.2f}" if interobs_dscs else "n/a"

    try:
        wres = wilcoxon_signed_rank([r.dsc for r in base], [r.dsc for r in coord])
        verdict = "significant" if wres.p_value < SIGNIFICANCE else "not significant"
        wline = (f"Wilcoxon signed-rank (DSC, baseline vs coord. conv.): "
                 f"p = {wres.p_value:.4f} ({verdict} at {SIGNIFICANCE}, "
                 f"{wres.method}, n = {wres.n_effective})")
    except ValueError:
        wline = "Wilcoxon signed-rank (DSC, baseline vs coord. conv.): p = n/a (no nonzero pairs)"

    rows = [
        ("DSC", _fmt_triplet([r.dsc for r in base], 2),
         _fmt_triplet([r.dsc for r in coord], 2), inter_med),
        ("Abs. area error %", _fmt_triplet(area_values(base, "abs_area_error_pct"), 1),
         _fmt_triplet(area_values(coord, "abs_area_error_pct"), 1), "-"),
        ("Area bias %", _fmt_triplet(area_values(base, "area_bias_pct"), 1),
         _fmt_triplet(area_values(coord, "area_bias_pct"), 1), "-"),
    ]
    widths = (20, 22, 22)
    header = (f"{'Metric':<{widths[0]}}{'Baseline':<{widths[1]}}"
              f"{'Coord. conv.':<{widths[2]}}Inter-observer")
    lines = ["Cross-validation summary", "=" * len(header), header, "-" * len(header)]
    for name, b, c, inter in rows:
        lines.append(f"{name:<{widths[0]}}{b:<{widths[1]}}{c:<{widths[2]}}{inter}")
    lines.append("")
    lines.append(wline)
    lines.append(f"Records per variant: {len(base)}; "
                 f"excluded from area stats (empty ground truth): {excluded}")
    return "\n".join(lines) + "\n"
