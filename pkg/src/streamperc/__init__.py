"""Latency-aware evaluation of streaming perception, with next-frame forecasting."""

from .geometry import BBox, Detection, GroundTruthBox, greedy_match, iou, iou_matrix
from .data import (Frame, Triplet, VideoStream, build_triplets, load_predictions,
                   load_stream_dataset, resample_speed, save_predictions, save_stream_dataset)
from .scene import MockDetectorConfig, MovingObject, SceneConfig, generate_stream, mock_detect
from .stream_sim import LatencyModel, pair_for_sap, pair_offline, simulate
from .metrics import APParams, APResult, evaluate_ap, offline_ap, streaming_ap
from .trend_loss import TrendConfig, matching_iou, normalize_weights, total_loss, trend_factor
from .forecast import KFConfig, LinearForecaster, TrainConfig, kalman_agent, kf_step
from .dfp import DFPConfig, ProjectionParams, dfp_fuse, reduce_project, silu

__version__ = "0.1.0"
