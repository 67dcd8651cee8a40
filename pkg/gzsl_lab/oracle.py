"""
Reference Oracle
================
Brute-force reference implementations with explicit index loops, used to
check the tensor kernels, the DSVTM stack, the head and the losses, plus a
central finite-difference gradient checker.

Nothing here imports the tensor core: inputs and parameters are plain numpy
arrays (parameters keyed by their dotted names) and every loop is spelled out.
Slow by construction; desk-scale shapes only.
"""

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ContractError

DELTA = 1e-8


# =============================================================================
# PRIMITIVES
# =============================================================================

def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    vector = a.ndim == 1
    if vector:
        a = a[None, :]
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise ContractError(f"oracle matmul: {a.shape} @ {b.shape}")
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            total = 0.0
            for t in range(k):
                total += a[i, t] * b[t, j]
            out[i, j] = total
    return out[0] if vector else out


def transpose(x: np.ndarray) -> np.ndarray:
    rows, cols = x.shape
    out = np.zeros((cols, rows))
    for i in range(rows):
        for j in range(cols):
            out[j, i] = x[i, j]
    return out


def linear(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> np.ndarray:
    out = matmul(x, weight)
    if bias is not None:
        for i in range(out.shape[0]):
            for j in range(out.shape[1]):
                out[i, j] += bias[j]
    return out


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    rows, cols = x.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        mean = 0.0
        for j in range(cols):
            mean += x[i, j]
        mean /= cols
        var = 0.0
        for j in range(cols):
            var += (x[i, j] - mean) ** 2
        var /= cols
        denom = math.sqrt(var + eps)
        for j in range(cols):
            out[i, j] = (x[i, j] - mean) / denom * gamma[j] + beta[j]
    return out


def softmax_rows(x: np.ndarray) -> np.ndarray:
    rows, cols = x.shape
    out = np.zeros((rows, cols))
    for i in range(rows):
        peak = x[i, 0]
        for j in range(1, cols):
            peak = max(peak, x[i, j])
        total = 0.0
        for j in range(cols):
            out[i, j] = math.exp(x[i, j] - peak)
            total += out[i, j]
        for j in range(cols):
            out[i, j] /= total
    return out


def gmp(x: np.ndarray, axis: int) -> np.ndarray:
    rows, cols = x.shape
    if axis == 1:
        out = np.zeros(rows)
        for i in range(rows):
            best = x[i, 0]
            for j in range(1, cols):
                if x[i, j] > best:
                    best = x[i, j]
            out[i] = best
        return out
    out = np.zeros(cols)
    for j in range(cols):
        best = x[0, j]
        for i in range(1, rows):
            if x[i, j] > best:
                best = x[i, j]
        out[j] = best
    return out


def _elementwise(fn: Callable[[float], float], x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.zeros(flat.shape)
    for i in range(flat.size):
        out[i] = fn(float(flat[i]))
    return out.reshape(x.shape)


def _gelu_scalar(v: float) -> float:
    return 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0)))


def _sigmoid_scalar(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def gelu(x: np.ndarray) -> np.ndarray:
    return _elementwise(_gelu_scalar, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return _elementwise(_sigmoid_scalar, x)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=np.float64)
    flat_out, flat_b = out.reshape(-1), np.asarray(b, dtype=np.float64).reshape(-1)
    for i in range(flat_out.size):
        flat_out[i] += flat_b[i]
    return out


# =============================================================================
# MODEL BLOCKS (parameters addressed by dotted name)
# =============================================================================

def _ln(x, params, prefix, eps):
    return layer_norm(x, params[prefix + ".gamma"], params[prefix + ".beta"], eps)


def _lin(x, params, prefix):
    return linear(x, params[prefix + ".weight"], params.get(prefix + ".bias"))


def mlp(x: np.ndarray, params: Dict[str, np.ndarray], prefix: str) -> np.ndarray:
    return _lin(gelu(_lin(x, params, prefix + ".fc1")), params, prefix + ".fc2")


def _scaled(m: np.ndarray, scale: Optional[float]) -> np.ndarray:
    if scale is None:
        return m
    out = m.copy()
    for i in range(out.shape[0]):
        for j in range(out.shape[1]):
            out[i, j] *= scale
    return out


def imse_attention(s_in, f, residual_base, params, prefix="imse.0", eps=1e-5, scale=None):
    """Affinity M = q(LN(S)) k(LN(F))^T and S_attr = softmax(M) v(LN(F)) + base."""
    f_norm = _ln(f, params, prefix + ".ln_f", eps)
    q = _lin(_ln(s_in, params, prefix + ".ln_s", eps), params, prefix + ".q")
    k = _lin(f_norm, params, prefix + ".k")
    v = _lin(f_norm, params, prefix + ".v")
    m = _scaled(matmul(q, transpose(k)), scale)
    s_attr = add(matmul(softmax_rows(m), v), residual_base)
    return m, s_attr


def semantic_alignment_loss(m: np.ndarray, a_y: np.ndarray) -> float:
    pooled = gmp(m, axis=1)
    total = 0.0
    for i in range(pooled.size):
        total += (pooled[i] - a_y[i]) ** 2
    return total


def attribute_group_gate(s_attr, w_p1, w_p2):
    gate = sigmoid(matmul(gelu(matmul(gmp(s_attr, axis=1), w_p1)), w_p2))
    out = np.zeros(s_attr.shape)
    for i in range(s_attr.shape[0]):
        for j in range(s_attr.shape[1]):
            out[i, j] = gate[i] * s_attr[i, j] + s_attr[i, j]
    return out


def attribute_activate(s_bar, s_attr, params, prefix):
    return add(add(mlp(s_bar, params, prefix), s_bar), s_attr)


def imse_pass(s_in, f, residual_base, params, prefix, options):
    m, s_attr = imse_attention(s_in, f, residual_base, params, prefix, options["ln_eps"], options["scale"])
    if not options["use_aca"]:
        return s_attr, m
    s_bar = attribute_group_gate(s_attr, params[prefix + ".w_p1"], params[prefix + ".w_p2"])
    return attribute_activate(s_bar, s_attr, params, prefix + ".mlp"), m


def imse_forward(s0, f, params, options, prefix="imse"):
    """R loops; loop r reads loop r-1's output and (by default) anchors to it."""
    s_current = s0
    s_hats, affinities = [], []
    for r in range(options["loops"]):
        owner = 0 if options["share_loop_weights"] else r
        base = s0 if options["anchor_to_shared"] else s_current
        s_current, m = imse_pass(s_current, f, base, params, f"{prefix}.{owner}", options)
        s_hats.append(s_current)
        affinities.append(m)
    return s_current, s_hats, affinities


def smid_attention(f, s_hat, params, prefix="smid", eps=1e-5, scale=None):
    s_norm = _ln(s_hat, params, prefix + ".ln_s", eps)
    q = _lin(_ln(f, params, prefix + ".ln_f", eps), params, prefix + ".q")
    k = _lin(s_norm, params, prefix + ".k")
    v = _lin(s_norm, params, prefix + ".v")
    m_bar = _scaled(matmul(q, transpose(k)), scale)
    return add(matmul(softmax_rows(m_bar), v), f)


def patch_mixing(f_tilde, w_e, w_s, w_n):
    expanded = gelu(matmul(transpose(f_tilde), w_e))
    selected = gelu(matmul(expanded, w_s))
    narrowed = matmul(selected, w_n)
    return add(transpose(narrowed), f_tilde)


def patch_activate(f_bar, params, prefix="smid.mlp"):
    return add(mlp(f_bar, params, prefix), f_bar)


def dsvtm_options(config) -> Dict:
    """Plain-dict view of a DSVTM configuration."""
    return {
        "loops": config.loops,
        "ln_eps": config.ln_eps,
        "scale": 1.0 / math.sqrt(config.width) if config.attn_scale else None,
        "use_imse": config.use_imse,
        "use_aca": config.use_aca,
        "use_smid_attention": config.use_smid_attention,
        "use_patch_mixing": config.use_patch_mixing,
        "share_loop_weights": config.share_loop_weights,
        "anchor_to_shared": config.anchor_to_shared,
    }


def dsvtm_forward(f, s_in, params, options) -> Dict:
    """One DSVTM; ``params`` keyed relative to the module (``imse.0.q.weight``...)."""
    if options["use_imse"]:
        s_final, s_hats, affinities = imse_forward(s_in, f, params, options)
    else:
        s_final, s_hats, affinities = s_in, [s_in], []
    out = f
    f_tilde = f_bar = None
    if options["use_smid_attention"]:
        out = f_tilde = smid_attention(f, s_final, params, "smid", options["ln_eps"], options["scale"])
    if options["use_patch_mixing"]:
        f_bar = patch_mixing(out, params["smid.w_e"], params["smid.w_s"], params["smid.w_n"])
        out = patch_activate(f_bar, params)
    return {
        "s_hats": s_hats,
        "affinities": affinities,
        "f_tilde": f_tilde,
        "f_bar": f_bar,
        "f_hat": out,
    }


# =============================================================================
# HEAD AND LOSSES
# =============================================================================

def class_head(f_hat, w):
    return matmul(gmp(f_hat, axis=0), w)


def cosine_scores(pred, prototypes, tau):
    num_classes, width = prototypes.shape
    p_norm = 0.0
    for j in range(width):
        p_norm += pred[j] * pred[j]
    p_norm = math.sqrt(p_norm)
    scores = np.zeros(num_classes)
    for c in range(num_classes):
        dot, a_norm = 0.0, 0.0
        for j in range(width):
            dot += pred[j] * prototypes[c, j]
            a_norm += prototypes[c, j] * prototypes[c, j]
        a_norm = math.sqrt(a_norm)
        scores[c] = 0.0 if p_norm == 0.0 or a_norm == 0.0 else tau * dot / (p_norm * a_norm)
    return scores


def classification_loss(scores, seen_mask, y) -> float:
    seen = [c for c in range(len(scores)) if seen_mask[c]]
    peak = max(scores[c] for c in seen)
    total = 0.0
    for c in seen:
        total += math.exp(scores[c] - peak)
    return -(scores[y] - peak - math.log(total))


def _mean_var(values: List[float]) -> Tuple[float, float]:
    mean = sum(values) / len(values)
    var = sum((v - mean) ** 2 for v in values) / len(values)
    return mean, var


def debias_loss(scores, seen_mask) -> float:
    seen = [scores[c] for c in range(len(scores)) if seen_mask[c]]
    unseen = [scores[c] for c in range(len(scores)) if not seen_mask[c]]
    alpha_s, beta_s = _mean_var(seen)
    alpha_u, beta_u = _mean_var(unseen)
    return (alpha_s - alpha_u) ** 2 + (beta_s - beta_u) ** 2


def total_loss(cls, sem_terms, deb, lambda_sem, lambda_deb) -> float:
    return cls + lambda_sem * sum(sem_terms) + lambda_deb * deb


def _strip(params: Dict[str, np.ndarray], prefix: str) -> Dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def naive_forward_suite(case: Dict) -> Dict:
    """
    Reference outputs of every stage for one sample with an identity backbone.

    Args:
        case: ``f`` [N_v×D], ``s`` [N_s×D], ``params`` (model state dict),
            ``dsvtm`` (DSVTM config), ``modules`` Z, ``prototypes`` A [C×N_s],
            ``seen_mask``, ``label``, ``tau``, ``lambda_sem``, ``lambda_deb``,
            optional ``restart_from_shared`` and ``side_branch``

    Returns:
        Per-module DSVTM outputs, head output, scores and the loss terms
    """
    options = dsvtm_options(case["dsvtm"])
    params = case["params"]
    f = np.asarray(case["f"], dtype=np.float64)
    s_shared = np.asarray(case["s"], dtype=np.float64)
    stream, s_current, modules = f, s_shared, []
    f_hat = f
    for z in range(case["modules"]):
        s_in = s_shared if case.get("restart_from_shared") else s_current
        out = dsvtm_forward(stream, s_in, _strip(params, f"dsvtm.{z}."), options)
        modules.append(out)
        s_current = out["s_hats"][-1]
        f_hat = out["f_hat"]
        if not case.get("side_branch"):
            stream = f_hat

    pred = class_head(f_hat, params["head.weight"])
    scores = cosine_scores(pred, case["prototypes"], case["tau"])
    a_y = case["prototypes"][case["label"]]
    sem_terms = [semantic_alignment_loss(m, a_y) for out in modules for m in out["affinities"]]
    cls = classification_loss(scores, case["seen_mask"], case["label"])
    deb = debias_loss(scores, case["seen_mask"])
    return {
        "modules": modules,
        "pred": pred,
        "scores": scores,
        "cls": cls,
        "sem_terms": sem_terms,
        "deb": deb,
        "total": total_loss(cls, sem_terms, deb, case["lambda_sem"], case["lambda_deb"]),
    }


# =============================================================================
# FINITE-DIFFERENCE GRADIENT CHECK
# =============================================================================

@dataclass
class ParameterCheck:
    name: str
    max_rel_error: float
    max_abs_error: float
    worst_index: List[int]
    failures: int
    passed: bool
    tolerated: int = 0      # relative error over threshold, accepted by abs_tol


@dataclass
class GradCheckReport:
    """Per-parameter agreement between analytic and central-difference gradients."""

    h: float
    threshold: float
    abs_tol: float
    parameters: Dict[str, ParameterCheck] = field(default_factory=dict)
    non_finite: List[Dict] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.non_finite and all(p.passed for p in self.parameters.values())

    @property
    def tolerated(self) -> int:
        return sum(p.tolerated for p in self.parameters.values())

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.parameters.values()), default=0.0)

    @property
    def worst(self) -> Optional[ParameterCheck]:
        if not self.parameters:
            return None
        return max(self.parameters.values(), key=lambda p: p.max_rel_error)

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "h": self.h,
            "threshold": self.threshold,
            "abs_tol": self.abs_tol,
            "max_rel_error": self.max_rel_error,
            "tolerated": self.tolerated,
            "parameters": {name: asdict(p) for name, p in self.parameters.items()},
            "non_finite": self.non_finite,
        }

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)
        return path


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), DELTA)


def finite_diff_grad(
    loss_fn: Callable[[], float],
    params: Sequence[Tuple[str, np.ndarray]],
    analytic: Dict[str, np.ndarray],
    h: float = 1e-5,
    threshold: float = 1e-4,
    abs_tol: float = 1e-9,
) -> GradCheckReport:
    """
    Compare analytic gradients with central differences, one scalar at a time.

    Args:
        loss_fn: Deterministic loss reading the arrays in ``params`` in place
        params: (name, array) pairs; arrays are perturbed and restored in place
        analytic: Gradient per name (missing names count as zero gradient)
        h: Central-difference step, within [1e-7, 1e-3]
        threshold: Maximum accepted relative error
        abs_tol: Element differences below this are accepted whatever the ratio

    Returns:
        GradCheckReport; non-finite probes are recorded as failures with coordinates
    """
    if not 1e-7 <= h <= 1e-3:
        raise ContractError(f"finite-difference step must lie in [1e-7, 1e-3], got {h}")
    report = GradCheckReport(h=h, threshold=threshold, abs_tol=abs_tol)
    for name, array in params:
        grad = analytic.get(name)
        if grad is None:
            grad = np.zeros_like(array)
        worst_rel, worst_abs, worst_index, failures, tolerated = 0.0, 0.0, [], 0, 0
        for index in np.ndindex(array.shape):
            original = array[index]
            array[index] = original + h
            plus = loss_fn()
            array[index] = original - h
            minus = loss_fn()
            array[index] = original
            if not (math.isfinite(plus) and math.isfinite(minus)):
                report.non_finite.append({"parameter": name, "index": list(index)})
                failures += 1
                continue
            numeric = (plus - minus) / (2.0 * h)
            a = float(grad[index])
            rel = relative_error(a, numeric)
            diff = abs(a - numeric)
            if rel > threshold:
                if diff > abs_tol:
                    failures += 1
                else:
                    tolerated += 1
            if rel > worst_rel:
                worst_rel, worst_index = rel, list(index)
            worst_abs = max(worst_abs, diff)
        report.parameters[name] = ParameterCheck(
            name=name,
            max_rel_error=worst_rel,
            max_abs_error=worst_abs,
            worst_index=worst_index,
            failures=failures,
            passed=failures == 0,
            tolerated=tolerated,
        )
    return report
