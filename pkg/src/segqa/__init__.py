"""Predict semantic-segmentation accuracy without ground truth and recommend a segmentation method."""

from .core import ConfusionMatrix, FeatureMap, FeatureVector, QualityRecord, ScoreTable, validate_score_table
from .dataset import DatasetManifest, build_label_table, compute_oa, crop_patches, split_manifest
from .metrics import MetricBundle, fit_4pl, krocc, metric_bundle, plcc, rmse, srocc
from .model import ModelConfig, QualityModel, gap, scgb_forward
from .recommend import best_set, precision_at_1, precision_at_3, recommend_method
from .training import LossConfig, TrainConfig, evaluate_split, kl_loss, mse_loss, total_loss, train

__version__ = "0.1.0"
