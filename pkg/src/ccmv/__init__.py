"""Estimation with nonmonotone missing covariates and incomplete outcomes.

Covariates may be missing in arbitrary patterns; outcomes are observed
according to a discrete outcome pattern (censoring indicator, response
indicator, or treatment arm).  Identification of complete-case odds and
extrapolation densities follows the complete-case missing value (CCMV)
restriction, which supports inverse-probability weighting, stacked
multiple imputation, and multiply-robust estimating equations.
"""

from ccmv.datamodel import (
    DatasetSchema,
    MissingDataset,
    ObservedRecord,
    OdfSpec,
    PatternMask,
    load_csv,
    pattern_cells,
    write_csv,
)

__all__ = [
    "DatasetSchema",
    "MissingDataset",
    "ObservedRecord",
    "OdfSpec",
    "PatternMask",
    "load_csv",
    "pattern_cells",
    "write_csv",
]
