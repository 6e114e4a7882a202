"""Built-in invariant suite and its brute-force oracles.

The oracles here recompute results from first principles — O(n²) pairwise
comparisons for ranking, exhaustive threshold enumeration for region curves,
breadth-first flood fill for components, finite differences for gradients and
Jacobians — and share no kernels with the production code they check. The
test suite imports them too, so there is exactly one canonical oracle per
quantity.

``run_selftest`` prints one ``ok <name>`` / ``FAIL <name>: <detail>`` line
per check and returns True only if every check passed.
"""

from __future__ import annotations

import collections
import time

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, using_dtype
from .flow import FlowConfig, FlowStack
from .gradcheck import check_gradients
from .metrics import au_pro, auroc, connected_components, region_overlap_curve, spro

# ---------------------------------------------------------------------------
# oracles


def auroc_bruteforce(scores, labels) -> float:
    """Mean pairwise win rate of positives over negatives, ties half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0
    ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return ((2 * wins + ties) / 2.0) / (pos.size * neg.size)


def connected_components_bfs(mask: np.ndarray) -> list:
    """8-connected regions via breadth-first search, same output contract as
    ``metrics.connected_components`` (sorted coords, row-major first pixel)."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    seen = np.zeros_like(mask)
    regions = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            queue = collections.deque([(y, x)])
            seen[y, x] = True
            coords = []
            while queue:
                cy, cx = queue.popleft()
                coords.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            queue.append((ny, nx))
            regions.append(np.array(sorted(coords), dtype=np.int64))
    return regions


def region_curve_bruteforce(maps, masks, saturations=None):
    """Exhaustive threshold sweep. For every distinct score value t (treating
    ``score >= t`` as positive, highest first) compute the global FPR and the
    mean over regions of min(overlap / saturation·area, 1). Returns
    (fprs, vals) with the implicit (0, 0) point prepended."""
    if saturations is None:
        saturations = [1.0] * len(maps)
    regions = []  # (flat positions in the pooled array, saturated area)
    offset = 0
    pooled_scores = []
    pooled_normal = []
    for amap, mask, sat in zip(maps, masks, saturations):
        amap = np.asarray(amap, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        for coords in connected_components_bfs(mask):
            flat = coords[:, 0] * mask.shape[1] + coords[:, 1] + offset
            regions.append((set(flat.tolist()), len(flat) * float(sat)))
        pooled_scores.append(amap.reshape(-1))
        pooled_normal.append(~mask.reshape(-1))
        offset += mask.size
    scores = np.concatenate(pooled_scores)
    normal = np.concatenate(pooled_normal)
    n_neg = int(normal.sum())
    thresholds = np.unique(scores)[::-1]
    fprs = [0.0]
    vals = [0.0]
    for t in thresholds:
        hit = scores >= t
        fprs.append(float((hit & normal).sum()) / n_neg)
        total = 0.0
        for flat, sat_area in regions:
            tp = sum(1 for i in flat if hit[i])
            total += min(tp / sat_area, 1.0)
        vals.append(total / len(regions))
    return np.array(fprs), np.array(vals)


def area_bruteforce(fprs, vals, limit: float) -> float:
    """Trapezoid area under the (fprs, vals) polyline on [0, limit], crossing
    segment interpolated, normalized by the limit."""
    area = 0.0
    for k in range(1, len(fprs)):
        f0, f1, v0, v1 = fprs[k - 1], fprs[k], vals[k - 1], vals[k]
        if f1 <= limit:
            area += (f1 - f0) * (v0 + v1) * 0.5
        else:
            if f0 < limit:
                v_lim = v0 + (v1 - v0) * (limit - f0) / (f1 - f0)
                area += (limit - f0) * (v0 + v_lim) * 0.5
            break
    return area / limit


def au_pro_bruteforce(maps, masks, fpr_limit: float = 0.3) -> float:
    return area_bruteforce(*region_curve_bruteforce(maps, masks), fpr_limit)


def spro_bruteforce(maps, masks, saturations, fpr_limit: float = 0.3) -> float:
    return area_bruteforce(*region_curve_bruteforce(maps, masks, saturations), fpr_limit)


def numeric_jacobian(fn, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Dense Jacobian of ``fn`` (flat ndarray -> flat ndarray) by central
    differences, one column per input entry."""
    y0 = fn(x)
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += eps
        lo[i] -= eps
        jac[:, i] = (fn(hi) - fn(lo)) / (2.0 * eps)
    return jac


# ---------------------------------------------------------------------------
# checks


def _perturbed_stack(channels: int, rng, scale: float = 0.1) -> FlowStack:
    """Default-config stack with randomized (non-identity) weights at the
    conditioning of a typical trained stack."""
    stack = FlowStack(channels, FlowConfig(), rng)
    for p in stack.params().values():
        p.data = p.data + rng.normal(0.0, scale, size=p.data.shape)
    mean = rng.normal(0.0, 0.5, size=channels)
    std = rng.uniform(0.5, 2.0, size=channels)
    stack.standardize.set_stats(mean, std)
    return stack


def check_flow_roundtrip() -> tuple[bool, str]:
    """inverse(forward(u)) == u on 100 random inputs, f64 and f32."""
    worst = {}
    for dtype, tol in ((np.float64, 1e-10), (np.float32, 1e-5)):
        with using_dtype(dtype):
            rng = np.random.default_rng(7)
            stack = _perturbed_stack(12, rng)
            u = Tensor(rng.normal(size=(100, 3, 3, 12)))
            z, _, _ = stack.forward(u)
            back = stack.inverse(z)
            err = float(np.abs(back.data - u.data).max())
            worst[dtype.__name__] = err
            if err >= tol:
                return False, f"{dtype.__name__} round-trip error {err:.3e} >= {tol}"
    return True, (f"f64 {worst['float64']:.1e}, f32 {worst['float32']:.1e}")


def check_flow_logdet() -> tuple[bool, str]:
    """Analytic log-det vs the numerically assembled Jacobian (32 dims)."""
    with using_dtype(np.float64):
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            stack = _perturbed_stack(8, rng)
            u0 = rng.normal(size=(1, 2, 2, 8))

            def fwd(flat: np.ndarray) -> np.ndarray:
                z, _, _ = stack.forward(Tensor(flat.reshape(u0.shape)))
                return z.data.reshape(-1)

            _, logdet, _ = stack.forward(Tensor(u0))
            sign, num = np.linalg.slogdet(numeric_jacobian(fwd, u0.reshape(-1)))
            if sign <= 0:
                return False, f"seed {seed}: numeric Jacobian not orientation-preserving"
            rel = abs(float(logdet.data[0]) - num) / max(abs(num), 1e-12)
            if rel >= 1e-3:
                return False, f"seed {seed}: log-det rel err {rel:.3e} >= 1e-3"
    return True, "5 seeds < 1e-3"


def check_gradcheck() -> tuple[bool, str]:
    """Finite-difference check of a composite touching every primitive family:
    conv subnet, coupling layer, attention-style softmax/matmul, layer norm."""
    with using_dtype(np.float64):
        rng = np.random.default_rng(3)
        stack = _perturbed_stack(6, rng)
        u = Tensor(rng.normal(size=(2, 2, 2, 6)))

        def flow_loss():
            z, logdet, _ = stack.forward(u)
            nll = ad.sub(ad.mul(ad.sum_all(ad.mul(z, z)), 0.5),
                         ad.sum_all(logdet))
            return ad.mul(nll, 1.0 / u.shape[0])

        params = list(stack.params().values())
        worst = check_gradients(flow_loss, params)

        w_q = Tensor(rng.normal(0, 0.3, size=(5, 5)), requires_grad=True)
        gain = Tensor(np.ones(5), requires_grad=True)
        bias = Tensor(np.zeros(5), requires_grad=True)
        x = Tensor(rng.normal(size=(4, 5)))

        def attn_loss():
            h = ad.layer_norm(x, gain, bias)
            q = ad.matmul(h, w_q)
            a = ad.softmax_rows(ad.matmul(q, ad.transpose(h)))
            out = ad.matmul(a, h)
            return ad.sum_all(ad.mul(ad.gelu(out), ad.tanh(out)))

        worst = max(worst, check_gradients(attn_loss, [w_q, gain, bias]))
        if worst >= 1e-4:
            return False, f"worst rel err {worst:.3e} >= 1e-4"
    return True, f"worst rel err {worst:.1e}"


def _metric_instances(rng):
    """Handful of small map/mask instances with deliberate score ties."""
    cases = []
    for _ in range(6):
        amap = rng.integers(0, 12, size=(8, 8)) / 8.0
        mask = np.zeros((8, 8), dtype=bool)
        mask[1:3, 1:4] = True
        mask[5:7, 5:8] = rng.random((2, 3)) < 0.8
        if not mask[5:7, 5:8].any():
            mask[6, 6] = True
        cases.append(([amap], [mask]))
    perfect = np.zeros((8, 8))
    pmask = np.zeros((8, 8), dtype=bool)
    pmask[2:5, 2:5] = True
    perfect[pmask] = 1.0
    cases.append(([perfect], [pmask]))
    const = (np.zeros((8, 8)), pmask)
    cases.append(([const[0]], [const[1]]))
    return cases


def check_metric_oracles() -> tuple[bool, str]:
    """Production metrics vs the brute-force oracles, exact equality."""
    if auroc([0.9, 0.1], [1, 0]) != 1.0:
        return False, "perfect-separation AUROC != 1"
    if auroc([0.5, 0.5, 0.5], [1, 0, 1]) != 0.5:
        return False, "all-ties AUROC != 0.5"
    if auroc([0.8, 0.4, 0.6, 0.2], [1, 0, 0, 1]) != 0.5:
        return False, "mixed-pairs AUROC != 0.5"
    rng = np.random.default_rng(11)
    for trial in range(20):
        scores = rng.integers(0, 10, size=24) / 16.0
        labels = rng.integers(0, 2, size=24)
        if labels.min() == labels.max():
            labels[0] = 1 - labels[0]
        a, b = auroc(scores, labels), auroc_bruteforce(scores, labels)
        if a != b:
            return False, f"AUROC trial {trial}: {a!r} != oracle {b!r}"
    for idx, (maps, masks) in enumerate(_metric_instances(rng)):
        f_p, v_p = region_overlap_curve(maps, masks)
        f_o, v_o = region_curve_bruteforce(maps, masks)
        if not (np.array_equal(f_p, f_o) and np.array_equal(v_p, v_o)):
            return False, f"region curve instance {idx} differs from sweep oracle"
        if au_pro(maps, masks) != au_pro_bruteforce(maps, masks):
            return False, f"au_pro instance {idx} differs from sweep oracle"
        sats = [0.5] * len(maps)
        if spro(maps, masks, sats) != spro_bruteforce(maps, masks, sats):
            return False, f"spro instance {idx} differs from sweep oracle"
        for m in masks:
            prod = connected_components(m)
            orac = connected_components_bfs(m)
            if len(prod) != len(orac) or any(
                    not np.array_equal(p, o) for p, o in zip(prod, orac)):
                return False, f"components instance {idx} differ from BFS oracle"
    return True, "20 ranking + 8 region instances exact"


CHECKS = (
    ("flow_roundtrip", check_flow_roundtrip),
    ("flow_logdet", check_flow_logdet),
    ("gradcheck", check_gradcheck),
    ("metric_oracles", check_metric_oracles),
)


def run_selftest(write=print) -> bool:
    """Run every check; report one line each; True iff all passed."""
    all_ok = True
    for name, check in CHECKS:
        t0 = time.time()
        try:
            ok, detail = check()
        except Exception as exc:  # surface, never swallow
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        all_ok &= ok
        status = "ok" if ok else "FAIL"
        write(f"{status} {name} ({time.time() - t0:.1f}s): {detail}")
    return all_ok
