"""Bag-of-visual-words image retrieval with SIFT+FREAK late fusion."""

from .codebook import Codebook, assign_word, assign_words, kmeans_fit, train_codebook
from .dataset import (DatasetManifest, GrayImage, SplitPlan, load_image, make_split,
                      sample_features, scan_dataset)
from .descriptors import DescriptorSet, hamming_distance
from .encoder import FusedVector, WordHistogram, encode, encode_image, fuse
from .evaluation import (EvalConfig, EvalReport, emit_reports, precision_at_k,
                         recall_at_k, run_experiment)
from .freak import (PairSelection, RetinalPattern, build_pattern, compute_freak,
                    estimate_orientation, extract_freak, select_pairs,
                    smoothed_intensity)
from .retrieval import RankedResult, SvmModel, retrieve, score, train_svm
from .scalespace import (DetectorParams, GaussianPyramid, Keypoint, assign_orientations,
                         build_pyramid, detect_extrema, detect_keypoints)
from .sift import compute_sift, extract_sift

__version__ = "0.1.0"
