from .cox import CoxResult, cox_fit, partial_loglik
from .km import KmCurve, SurvivalSample, km_estimate, write_curves_csv
from .logrank import LogrankResult, chi2_sf, format_p, logrank_test
from .rmst import RmstResult, rmst, rmst_difference, rmst_variance

__all__ = [
    "CoxResult", "KmCurve", "LogrankResult", "RmstResult", "SurvivalSample", "chi2_sf",
    "cox_fit", "format_p", "km_estimate", "logrank_test", "partial_loglik", "rmst",
    "rmst_difference", "rmst_variance", "write_curves_csv",
]
