"""LASSO-Cox regression and survival evaluation statistics.

The penalized fit minimizes NLL(beta)/N + lambda * ||beta||_1 by cyclic
coordinate descent with per-coordinate Newton steps and soft thresholding,
warm-started along a descending lambda path. Columns are standardized
internally; reported coefficients are on the original scale. Risk sets use
Breslow tie handling throughout (subject j is at risk for an event at t when
t_j >= t).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, NumericError

DAYS_PER_YEAR = 365.25


def _arrays(records) -> tuple[np.ndarray, np.ndarray]:
    times = np.array([r.time for r in records], dtype=np.float64)
    events = np.array([r.event for r in records], dtype=bool)
    return times, events


# ---------------------------------------------------------------------------
# Cox partial likelihood machinery (sorted-descending-time representation)
# ---------------------------------------------------------------------------

class _CoxProblem:
    """Sorted views and tie blocks shared by every coordinate update."""

    def __init__(self, X: np.ndarray, times: np.ndarray, events: np.ndarray):
        self.n, self.d = X.shape
        self.order = np.argsort(-times, kind="stable")
        t = times[self.order]
        self.X = X[self.order]
        self.events = events[self.order]
        block_end = np.empty(self.n, dtype=np.intp)
        i = 0
        while i < self.n:
            j = i
            while j + 1 < self.n and t[j + 1] == t[i]:
                j += 1
            block_end[i:j + 1] = j
            i = j + 1
        self.block_end = block_end
        self.ev_idx = np.flatnonzero(self.events)
        self.x_event_sum = self.X[self.ev_idx].sum(axis=0)

    def _risk_sums(self, eta: np.ndarray) -> tuple[np.ndarray, float]:
        shift = eta.max()
        w = np.exp(eta - shift)
        return w, shift

    def nll(self, eta: np.ndarray) -> float:
        """Negative log partial likelihood at linear predictor eta (sorted)."""
        w, shift = self._risk_sums(eta)
        denom = np.cumsum(w)[self.block_end[self.ev_idx]]
        return float(np.sum(np.log(denom) + shift - eta[self.ev_idx]))

    def grad_hess_coord(self, j: int, eta: np.ndarray) -> tuple[float, float]:
        """Gradient and curvature of NLL/N for coordinate j."""
        w, _ = self._risk_sums(eta)
        xj = self.X[:, j]
        cw = np.cumsum(w)
        cxw = np.cumsum(xj * w)
        cx2w = np.cumsum(xj * xj * w)
        be = self.block_end[self.ev_idx]
        s = cw[be]
        r1 = cxw[be] / s
        grad = (r1.sum() - self.x_event_sum[j]) / self.n
        hess = (cx2w[be] / s - r1 * r1).sum() / self.n
        return float(grad), float(hess)

    def null_gradient(self) -> np.ndarray:
        """Gradient of NLL/N at beta = 0 (used for lambda_max)."""
        cw = np.arange(1, self.n + 1, dtype=np.float64)
        be = self.block_end[self.ev_idx]
        cx = np.cumsum(self.X, axis=0)
        return ((cx[be] / cw[be, None]).sum(axis=0) - self.x_event_sum) / self.n


def _soft(z: float, thresh: float) -> float:
    if z > thresh:
        return z - thresh
    if z < -thresh:
        return z + thresh
    return 0.0


def lasso_cox_path(X: np.ndarray, times: np.ndarray, events: np.ndarray,
                   lambdas, max_sweeps: int = 1000, tol: float = 1e-7,
                   ) -> tuple[np.ndarray, list[list[float]], bool]:
    """Warm-started coordinate descent over a descending lambda path.

    ``X`` is used as given (callers standardize). Returns (betas with one row
    per lambda, per-lambda objective traces with one entry per sweep including
    the starting value, all_converged). The objective never increases between
    consecutive sweeps; a rare overshooting sweep is replaced by a damped step
    along the same direction.
    """
    prob = _CoxProblem(np.asarray(X, dtype=np.float64), times, events)
    n, d = prob.n, prob.d
    lambdas = list(lambdas)
    beta = np.zeros(d)
    eta = np.zeros(n)
    betas = np.zeros((len(lambdas), d))
    traces: list[list[float]] = []
    all_converged = True

    def objective(b, e, lam):
        return prob.nll(e) / n + lam * np.abs(b).sum()

    for li, lam in enumerate(lambdas):
        trace = [objective(beta, eta, lam)]
        converged = False
        for _ in range(max_sweeps):
            beta_start = beta.copy()
            eta_start = eta.copy()
            for j in range(d):
                grad, hess = prob.grad_hess_coord(j, eta)
                if hess <= 1e-12:
                    continue
                new = _soft(beta[j] - grad / hess, lam / hess)
                delta = new - beta[j]
                if delta != 0.0:
                    beta[j] = new
                    eta = eta + prob.X[:, j] * delta
            obj = objective(beta, eta, lam)
            if obj > trace[-1] + 1e-12:
                # damp the sweep as a whole direction until it descends
                direction = beta - beta_start
                step = 0.5
                while step > 1e-10:
                    cand = beta_start + step * direction
                    cand_eta = eta_start + prob.X @ (cand - beta_start)
                    obj = objective(cand, cand_eta, lam)
                    if obj <= trace[-1] + 1e-15:
                        beta, eta = cand, cand_eta
                        break
                    step *= 0.5
                else:
                    beta, eta = beta_start, eta_start
                    converged = True
                    trace.append(trace[-1])
                    break
            trace.append(obj)
            if np.abs(beta - beta_start).max() < tol:
                converged = True
                break
        betas[li] = beta
        traces.append(trace)
        all_converged = all_converged and converged
    return betas, traces, all_converged


@dataclass
class CoxFit:
    coefficients: np.ndarray              # original feature scale
    chosen_lambda: float
    lambda_path: np.ndarray
    cv_path: list[tuple[float, float]]    # (lambda, mean held-out partial loglik)
    converged: bool
    diagnostics: str = ""


def _standardize(X: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = X.mean(axis=0)
    sd = X.std(axis=0)
    safe = np.where(sd > 0, sd, 1.0)
    return (X - mu) / safe, mu, safe


def _fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    out = np.empty(n, dtype=np.intp)
    out[rng.permutation(n)] = np.arange(n) % folds
    return out


def fit_lasso_cox(X: np.ndarray, records, lambdas=None, folds: int = 10,
                  seed: int = 0, lambda_count: int = 50,
                  lambda_min_ratio: float = 1e-3) -> CoxFit:
    """LASSO-Cox with the penalty weight chosen by cross-validation.

    When ``lambdas`` is omitted, the path is ``lambda_count`` log-spaced values
    from lambda_max (the smallest lambda with an all-zero solution, from the
    null-model gradient) down to lambda_max * lambda_min_ratio. Model selection
    scores each
    lambda by the mean held-out partial log likelihood across folds and picks
    the largest lambda within one standard error of the maximizer (the usual
    one-standard-error rule; the raw maximizer systematically over-selects).
    The reported coefficients come from a full-data fit at that lambda.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"feature matrix must be 2-D, got shape {X.shape}")
    if not np.isfinite(X).all():
        raise DataError("non-finite values in feature matrix")
    times, events = _arrays(records)
    n, d = X.shape
    if len(times) != n:
        raise DataError("records do not align with feature rows")
    if int(events.sum()) < 2:
        raise DataError(f"need at least 2 events, got {int(events.sum())}")
    if not 2 <= folds <= n:
        raise DataError(f"folds must be in [2, {n}], got {folds}")

    Xs, _, sd = _standardize(X)
    if lambdas is None:
        if lambda_count < 1 or not 0 < lambda_min_ratio <= 1:
            raise ConfigError("lambda_count must be >= 1 and lambda_min_ratio in (0, 1]")
        prob = _CoxProblem(Xs, times, events)
        lam_max = float(np.abs(prob.null_gradient()).max())
        if lam_max <= 0:
            raise NumericError("degenerate design: null-model gradient is zero")
        lambdas = np.geomspace(lam_max, lam_max * lambda_min_ratio, lambda_count)
    else:
        lambdas = np.asarray(list(lambdas), dtype=np.float64)
        if lambdas.size == 0 or np.any(np.diff(lambdas) > 0) or np.any(lambdas < 0):
            raise DataError("lambdas must be a non-empty descending non-negative list")

    betas, _, conv_full = lasso_cox_path(Xs, times, events, lambdas)

    assign = _fold_assignment(n, folds, seed)
    cv = np.zeros((folds, len(lambdas)))
    conv_folds = True
    for f in range(folds):
        tr = assign != f
        te = ~tr
        if int(events[tr].sum()) < 2:
            raise NumericError(
                f"cv fold {f}: training part has fewer than 2 events; reduce folds")
        Xtr, _, sd_tr = _standardize(X[tr])
        b_tr, _, ok = lasso_cox_path(Xtr, times[tr], events[tr], lambdas)
        conv_folds = conv_folds and ok
        te_times, te_events = times[te], events[te]
        if not te_events.any():
            continue  # a fold with no held-out events carries no information
        te_prob = _CoxProblem(X[te], te_times, te_events)
        for li in range(len(lambdas)):
            beta_orig = b_tr[li] / sd_tr
            cv[f, li] = -te_prob.nll(te_prob.X @ beta_orig)

    mean_cv = cv.mean(axis=0)
    best = int(np.argmax(mean_cv))
    se = float(cv[:, best].std(ddof=1)) / math.sqrt(folds)
    chosen = next(i for i in range(len(lambdas)) if mean_cv[i] >= mean_cv[best] - se)
    converged = conv_full and conv_folds
    return CoxFit(
        coefficients=betas[chosen] / sd,
        chosen_lambda=float(lambdas[chosen]),
        lambda_path=np.asarray(lambdas, dtype=np.float64),
        cv_path=[(float(l), float(v)) for l, v in zip(lambdas, mean_cv)],
        converged=converged,
        diagnostics="" if converged else "coordinate descent hit the sweep cap",
    )


def predict_risk(fit: CoxFit, X: np.ndarray) -> np.ndarray:
    return np.asarray(X, dtype=np.float64) @ fit.coefficients


def cross_validated_risks(X: np.ndarray, records, lam: float, lambdas,
                          folds: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold risk scores at a fixed lambda.

    Refits each training fold along the warm-started sub-path down to ``lam``
    and scores the held-out fold. Uses the same fold assignment as
    ``fit_lasso_cox`` for the same (n, folds, seed). Returns (risks, fold id
    per subject).
    """
    X = np.asarray(X, dtype=np.float64)
    times, events = _arrays(records)
    n = X.shape[0]
    assign = _fold_assignment(n, folds, seed)
    sub_path = [l for l in np.asarray(lambdas, dtype=np.float64) if l >= lam]
    if not sub_path or sub_path[-1] != lam:
        sub_path.append(lam)
    risks = np.zeros(n)
    for f in range(folds):
        tr = assign != f
        te = ~tr
        Xtr, _, sd_tr = _standardize(X[tr])
        b_tr, _, _ = lasso_cox_path(Xtr, times[tr], events[tr], sub_path)
        beta_orig = b_tr[-1] / sd_tr
        risks[te] = X[te] @ beta_orig
    return risks, assign


# ---------------------------------------------------------------------------
# evaluation statistics
# ---------------------------------------------------------------------------

def concordance_index(risks, records) -> float:
    c, pairs = concordance_with_pairs(risks, records)
    if pairs == 0:
        raise NumericError("no comparable pairs")
    return c


def concordance_with_pairs(risks, records) -> tuple[float, int]:
    """Harrell concordance and the comparable-pair count.

    Ordered pair (i, j) is comparable iff t_i < t_j and subject i had an
    event; concordant when risk_i > risk_j; risk ties count 0.5. Returns
    (nan, 0) when no pair is comparable.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    comparable = (times[:, None] < times[None, :]) & events[:, None]
    n_comp = int(np.count_nonzero(comparable))
    if n_comp == 0:
        return float("nan"), 0
    higher = risks[:, None] > risks[None, :]
    tied = risks[:, None] == risks[None, :]
    concordant = float(np.count_nonzero(comparable & higher))
    concordant += 0.5 * np.count_nonzero(comparable & tied)
    return concordant / n_comp, n_comp


@dataclass
class KmCurve:
    times: np.ndarray     # ascending distinct event times
    survival: np.ndarray  # product-limit estimates, non-increasing
    at_risk: np.ndarray   # risk-set size just before each time
    events: np.ndarray    # event count at each time


def kaplan_meier(records) -> KmCurve:
    """Product-limit estimator; censored subjects leave the risk set after
    their observed time."""
    if not len(records):
        raise DataError("empty input")
    times, events = _arrays(records)
    ts = np.unique(times[events])
    at_risk = np.array([(times >= t).sum() for t in ts], dtype=np.intp)
    died = np.array([((times == t) & events).sum() for t in ts], dtype=np.intp)
    surv = np.cumprod((at_risk - died) / at_risk) if len(ts) else np.empty(0)
    return KmCurve(times=ts, survival=surv, at_risk=at_risk, events=died)


def log_rank(group_a, group_b) -> tuple[float, float]:
    """Two-group log-rank test: (chi_square, p) with p from chi2(1)."""
    if not len(group_a) or not len(group_b):
        raise DataError("log-rank requires two non-empty groups")
    ta, ea = _arrays(group_a)
    tb, eb = _arrays(group_b)
    times = np.concatenate([ta, tb])
    events = np.concatenate([ea, eb])
    in_a = np.zeros(len(times), dtype=bool)
    in_a[:len(ta)] = True
    observed_a = 0.0
    expected_a = 0.0
    variance = 0.0
    for t in np.unique(times[events]):
        at_risk = times >= t
        n = int(at_risk.sum())
        n1 = int((at_risk & in_a).sum())
        dead = (times == t) & events
        d = int(dead.sum())
        d1 = int((dead & in_a).sum())
        observed_a += d1
        expected_a += d * n1 / n
        if n > 1:
            variance += d * (n1 / n) * (1.0 - n1 / n) * (n - d) / (n - 1)
    if variance <= 0.0:
        return 0.0, 1.0
    chi = (observed_a - expected_a) ** 2 / variance
    return float(chi), float(math.erfc(math.sqrt(chi / 2.0)))


def median_risk_split(risks, records=None) -> tuple[list[int], list[int]]:
    """Index lists (high, low): high risk is strictly above the median.

    Subjects exactly at the median go to the low group; with all risks equal
    the high group is empty.
    """
    risks = np.asarray(risks, dtype=np.float64)
    med = float(np.median(risks))
    high = np.flatnonzero(risks > med)
    low = np.flatnonzero(risks <= med)
    return high.tolist(), low.tolist()


def time_dependent_roc(risks, records, horizon: float,
                       ) -> tuple[list[tuple[float, float, float]], float]:
    """Cumulative/dynamic ROC at a horizon.

    Cases: event with time <= horizon. Controls: observed beyond the horizon.
    Censored at or before the horizon: excluded. The curve sweeps descending
    thresholds over the observed risk values (positive = risk >= threshold);
    the trapezoid AUC is accumulated in integer counts so it equals the
    case/control pair count (ties at 0.5) exactly.
    """
    risks = np.asarray(risks, dtype=np.float64)
    times, events = _arrays(records)
    case = events & (times <= horizon)
    control = times > horizon
    n_case, n_ctrl = int(case.sum()), int(control.sum())
    if n_case == 0 or n_ctrl == 0:
        raise NumericError(
            f"horizon {horizon}: {n_case} cases and {n_ctrl} controls")
    thresholds = np.unique(np.concatenate([risks[case], risks[control]]))[::-1]
    curve = [(float("inf"), 0.0, 0.0)]
    tp = fp = 0
    auc_num = 0  # 2 * n_case * n_ctrl * AUC, an exact integer
    for thr in thresholds:
        new_tp = int((risks[case] >= thr).sum())
        new_fp = int((risks[control] >= thr).sum())
        auc_num += (new_fp - fp) * (new_tp + tp)
        tp, fp = new_tp, new_fp
        curve.append((float(thr), fp / n_ctrl, tp / n_case))
    auc = auc_num / (2 * n_case * n_ctrl)
    return curve, auc
