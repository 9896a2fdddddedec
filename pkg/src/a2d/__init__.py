"""Attack cost as a signal for detecting adversarial examples.

Modules: `nn` (dense network engine), `data` (IDX/MNIST and synthetic data),
`attacks` (instrumented attacks), `fingerprint` (cost vectors), `detectors`
(K-NN / Z-score / ensembles and ROC metrics), `hardening` (adaptive-attack
evaluation) and `cli`.
"""
from . import attacks, data, detectors, fingerprint, hardening, nn

__all__ = ["attacks", "data", "detectors", "fingerprint", "hardening", "nn"]
__version__ = "0.1.0"
