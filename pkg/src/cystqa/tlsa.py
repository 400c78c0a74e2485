"""Target-label selection: pick the better of two annotations or go manual.

The rule system compares how well each annotation agrees with the three
regional proposals. Identical-looking labels with disagreeing proposals, or
labels neither of which overlaps any proposal, escalate to manual review.
Otherwise the label with clearly higher mean proposal overlap (or clearly
lower intensity variance-over-mean inside its proposal-supported region)
wins; near-unity ratios fall back to checking whether both labels prefer the
same proposal.

Note on the small-variation test: eta flags "labels differ by fewer than w
pixels" and is computed as min(|T1|, |T2|) - |T1 and T2| < w. The difference
taken in the other direction would be non-positive for any pair of masks and
the test vacuously true.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baseline import RegionalProposals
from .metrics import OverlapReport, overlap_report

TAU_MANUAL = "Manual"
TAU_G1 = "G1"
TAU_G2 = "G2"

BRANCH_PRECHECK = "precheck_blank_manual"
BRANCH_SMALL_DIFF = "small_diff_rp_disagree_manual"
BRANCH_NO_OVERLAP = "zero_overlap_manual"
BRANCH_RATIO_G1 = "ratio_g1"
BRANCH_RATIO_G2 = "ratio_g2"
BRANCH_PSI_TIE = "psi_tie"
BRANCH_PSI_MISMATCH = "psi_mismatch_manual"


@dataclass(frozen=True)
class TlsaConfig:
    delta1: float = 0.4   # proposal-disagreement bound
    delta2: float = 1.1   # mean-overlap ratio bound
    delta3: float = 1.02  # variance-ratio bound
    w: int = 100          # small-variation pixel threshold

    def __post_init__(self):
        if self.delta1 <= 0:
            raise ValueError("delta1 must be > 0")
        if self.delta2 <= 1:
            raise ValueError("delta2 must be > 1")
        if self.delta3 <= 1:
            raise ValueError("delta3 must be > 1")
        if self.w <= 0:
            raise ValueError("w must be > 0")


@dataclass(frozen=True)
class TlsaDecision:
    tau: str
    ratio_mu: float
    ratio_v: float
    eta: int
    report: OverlapReport
    branch_taken: str

    def as_record(self, image_id: str, model_source: str) -> dict:
        return {
            "id": image_id,
            "tau": self.tau,
            "ratio_mu": self.ratio_mu,
            "ratio_v": self.ratio_v,
            "eta": self.eta,
            "phi_pi": self.report.phi_pi,
            "psi_star": list(self.report.psi_star),
            "branch_taken": self.branch_taken,
            "model_source": model_source,
        }


def safe_ratio(num: float, den: float) -> float:
    """Ratio of two non-negative statistics with inf/zero sentinels.

    inf/inf and 0/0 carry no evidence either way and map to 1; a finite
    numerator over inf maps to 0; inf or x>0 over zero maps to +inf.
    """
    num_inf = math.isinf(num)
    den_inf = math.isinf(den)
    if num_inf and den_inf:
        return 1.0
    if den_inf:
        return 0.0
    if num_inf:
        return math.inf
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def tlsa(
    rps: RegionalProposals,
    t1: np.ndarray,
    t2: np.ndarray,
    img: np.ndarray,
    cfg: TlsaConfig = TlsaConfig(),
) -> TlsaDecision:
    """Decide between labels t1 (G1), t2 (G2) and manual review for one image."""
    p1, p2, p3 = rps.as_tuple()
    report = overlap_report((p1, p2, p3), t1, t2, img)

    sum1 = int(np.count_nonzero(t1))
    sum2 = int(np.count_nonzero(t2))
    inter = int(np.count_nonzero(t1.astype(bool) & t2.astype(bool)))
    eta = 1 if (min(sum1, sum2) - inter) < cfg.w else 0

    ratio_mu = safe_ratio(report.mu_iou[0], report.mu_iou[1])
    ratio_v = safe_ratio(report.phi[1], report.phi[0])

    def decision(tau: str, branch: str) -> TlsaDecision:
        return TlsaDecision(
            tau=tau,
            ratio_mu=ratio_mu,
            ratio_v=ratio_v,
            eta=eta,
            report=report,
            branch_taken=branch,
        )

    if sum1 == 0 and sum2 == 0:
        return decision(TAU_MANUAL, BRANCH_PRECHECK)
    if eta == 1 and report.phi_pi > cfg.delta1:
        return decision(TAU_MANUAL, BRANCH_SMALL_DIFF)
    if report.mu_iou[0] == 0.0 and report.mu_iou[1] == 0.0:
        return decision(TAU_MANUAL, BRANCH_NO_OVERLAP)
    if ratio_mu > cfg.delta2 or ratio_v > cfg.delta3:
        return decision(TAU_G1, BRANCH_RATIO_G1)
    if ratio_mu < 1.0 / cfg.delta2 or ratio_v < 1.0 / cfg.delta3:
        return decision(TAU_G2, BRANCH_RATIO_G2)
    if report.psi_star[0] == report.psi_star[1]:
        return decision(TAU_G1 if ratio_mu >= 1.0 else TAU_G2, BRANCH_PSI_TIE)
    return decision(TAU_MANUAL, BRANCH_PSI_MISMATCH)
