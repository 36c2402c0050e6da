"""Forced spatial attention training toolkit.

Convnet classifiers whose class activation maps are supervised with
hand-authored spatial masks, trained with a numpy autodiff core.
"""
from . import numcore
from .errors import (ConfigurationError, FSAError, InputError, IntegrityError,
                     NumericError, TrainingError, ValidationError, VerificationError)

__version__ = "0.1.0"
