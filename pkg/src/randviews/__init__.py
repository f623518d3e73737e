"""Random 2.5D orthogonal-view CNN scoring for volumetric detection candidates."""

from .cnn import CnnModel, TrainConfig, train
from .evaluation import FrocPoint, fisher_exact, froc_curve, make_folds, roc_auc, sensitivity_at_fp
from .phantom import PhantomConfig, generate_cohort, generate_phantom
from .scoring import CandidateScore, aggregate, score_all, score_candidate
from .views import Candidate, Observation, SamplerConfig, extract_all_patches, extract_patch, generate_observations
from .volume import Volume, WindowLevel, apply_window, load_volume, resample_isotropic, sample_trilinear, save_volume

__version__ = "0.1.0"
