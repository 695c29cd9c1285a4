"""Feature/logit extraction into the vrf tensor and manifest formats."""

from .extract import extract
from .job import ExtractionJob

__version__ = "0.1.0"
