"""Sample-wise ensembling of zero-shot and fine-tuned classifiers.

The toolkit operates on precomputed feature/logit tensors: it builds a
zero-shot failure index from training outputs, scores test samples by
k-NN distance to that index, maps distances to per-sample ensemble
weights, and evaluates the resulting mixtures against constant-mix and
selective-prediction baselines, with residual-variance analyses on top.
"""

from .analysis import (RatioCurve, ResidualStats, binned_optimal_weight,
                       combined_variance, frontier, optimal_weight_correlated,
                       optimal_weight_independent, ratio_curve, residual_stats,
                       residuals, select_hyperparams, sweep_weights)
from .baselines import (OodScorer, SelectiveClassifier, calibrate_threshold,
                        evaluate_detectors, fit_scorer, score, selective_predict)
from .core import (CalibrationParams, ModelOutputs, accuracy, apply_temperature,
                   fit_temperature, normalize_features, predict, softmax)
from .ensembling import (EnsembleConfig, PipelineResult, ensemble, lse, ose,
                         vrf_pipeline)
from .errors import (EmptyIndexError, ManifestError, TensorFormatError,
                     ValidationError, VrfError)
from .synth import SynthSpec, generate_dataset, generate_residual_pair
from .tensor_io import (DatasetManifest, SplitSpec, SplitTensors, load_manifest,
                        read_tensor, save_manifest, write_tensor)
from .weighting import (WeightFunction, parse_weight_spec, sweep_grid, weight,
                        weight_batch)
from .zsf_index import (ZsfIndex, build_zsf, knn_distance, knn_distance_batch,
                        load_index, save_index)

__version__ = "0.1.0"
