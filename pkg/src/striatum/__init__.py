"""SPECT striatal-uptake image classification pipeline.

End to end: NIfTI ingestion with slice selection and normalisation, four
classifiers (CNN, MLP, L1 logistic regression, L1 linear SVM) on a shared
fit/score/predict contract, TPE hyperparameter search, stratified 10-fold
cross-validated evaluation, and a seeded phantom generator that stands in
for access-gated clinical data.
"""

__version__ = "0.1.0"

from .errors import ConfigError, DataFormatError, StriatumError, TrainingError

__all__ = [
    "ConfigError",
    "DataFormatError",
    "StriatumError",
    "TrainingError",
    "__version__",
]
