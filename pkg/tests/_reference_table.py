"""Recorded benchmark scorecard used by the golden consistency test.

Nine methods evaluated on three utility cohorts, each stratified into
Large/Medium/Small storm sizes. Column order within each method row:
cohort 1 (L, M, S), cohort 2 (L, M, S), cohort 3 (L, M, S). Values are
the published two-decimal UPR / OPR-8 / CSI rates; the test recomputes
CSI from (UPR, OPR-8) with alpha=5, beta=2 and checks agreement.
"""

COLUMNS = tuple(
    (cohort, size)
    for cohort in ("cohort-1", "cohort-2", "cohort-3")
    for size in ("Large", "Medium", "Small")
)

# method -> {"upr": 9 values, "opr8": 9 values, "csi": 9 values}
SCORECARD = {
    "LTT": {
        "upr": (0.30, 0.29, 0.24, 0.25, 0.37, 0.03, 0.09, 0.14, 0.02),
        "opr8": (0.02, 0.08, 0.18, 0.21, 0.00, 0.12, 0.09, 0.03, 0.11),
        "csi": (0.80, 0.78, 0.77, 0.76, 0.76, 0.93, 0.90, 0.89, 0.94),
    },
    "LGBM": {
        "upr": (0.39, 0.31, 0.39, 0.49, 0.30, 0.45, 0.45, 0.40, 0.41),
        "opr8": (0.21, 0.32, 0.21, 0.20, 0.19, 0.00, 0.12, 0.23, 0.09),
        "csi": (0.65, 0.68, 0.65, 0.59, 0.72, 0.67, 0.63, 0.64, 0.67),
    },
    "XGB": {
        "upr": (0.32, 0.34, 0.28, 0.47, 0.31, 0.29, 0.37, 0.35, 0.36),
        "opr8": (0.36, 0.29, 0.38, 0.26, 0.15, 0.04, 0.28, 0.36, 0.25),
        "csi": (0.66, 0.66, 0.68, 0.58, 0.73, 0.77, 0.64, 0.64, 0.67),
    },
    "CB": {
        "upr": (0.38, 0.45, 0.30, 0.48, 0.27, 0.30, 0.46, 0.43, 0.38),
        "opr8": (0.24, 0.16, 0.33, 0.20, 0.21, 0.04, 0.12, 0.20, 0.16),
        "csi": (0.65, 0.62, 0.68, 0.59, 0.73, 0.76, 0.63, 0.62, 0.67),
    },
    "LR": {
        "upr": (0.44, 0.35, 0.41, 0.94, 0.58, 0.82, 0.57, 0.27, 0.57),
        "opr8": (0.18, 0.28, 0.26, 0.00, 0.01, 0.00, 0.10, 0.50, 0.01),
        "csi": (0.62, 0.66, 0.62, 0.32, 0.57, 0.40, 0.55, 0.65, 0.58),
    },
    "FCN": {
        "upr": (0.28, 0.45, 0.34, 0.53, 0.39, 0.64, 0.38, 0.34, 0.57),
        "opr8": (0.48, 0.21, 0.32, 0.18, 0.14, 0.00, 0.26, 0.35, 0.01),
        "csi": (0.65, 0.61, 0.66, 0.56, 0.67, 0.53, 0.64, 0.65, 0.58),
    },
    "ResNet": {
        "upr": (0.38, 0.22, 0.39, 0.75, 0.06, 0.81, 0.56, 0.25, 0.51),
        "opr8": (0.24, 0.52, 0.24, 0.06, 0.81, 0.00, 0.17, 0.49, 0.07),
        "csi": (0.65, 0.68, 0.64, 0.44, 0.72, 0.41, 0.54, 0.67, 0.60),
    },
    "TT": {
        "upr": (0.38, 0.26, 0.37, 0.31, 0.16, 0.02, 0.24, 0.22, 0.15),
        "opr8": (0.07, 0.13, 0.04, 0.29, 0.42, 0.35, 0.06, 0.18, 0.21),
        "csi": (0.70, 0.77, 0.71, 0.69, 0.76, 0.87, 0.80, 0.78, 0.82),
    },
    "FTT": {
        "upr": (0.42, 0.27, 0.34, 0.59, 0.52, 0.10, 0.22, 0.30, 0.16),
        "opr8": (0.02, 0.14, 0.07, 0.00, 0.00, 0.00, 0.09, 0.00, 0.00),
        "csi": (0.68, 0.76, 0.73, 0.57, 0.62, 0.92, 0.81, 0.77, 0.88),
    },
}


def iter_cells():
    """Yield (method, cohort, size, upr, opr8, csi) for every scorecard cell."""
    for method, rows in SCORECARD.items():
        for i, (cohort, size) in enumerate(COLUMNS):
            yield method, cohort, size, rows["upr"][i], rows["opr8"][i], rows["csi"][i]
