"""textvol: linear encoders from free text to spatial probability densities."""

from .density import BinnedSample, KdeConfig, KernelBlock, bin_samples, build_kernel_block, kde_density
from .encoder import (
    EncoderModel,
    TextDensityEncoder,
    baseline_mean_map,
    load_model,
    predict_density,
    save_model,
    with_background,
)
from .evaluation import (
    EvalReport,
    ModelSpec,
    chance_score,
    score_document,
    shuffle_split_cv,
    term_contrast,
    tv_distance,
)
from .lad_solver import (
    DualState,
    LeastDeviationsRegressor,
    SolverReport,
    dual_objective_grad,
    fit_lad,
    fit_path,
    select_lambda,
)
from .ridge_solver import RidgeModel, fit_label_constrained, fit_ridge, fit_volume_ridge
from .targets import TargetMatrix, build_targets, rescale_for_loss
from .text_features import (
    Document,
    FeatureMatrix,
    Vocabulary,
    assemble_features,
    load_corpus,
    load_vocabulary,
    vectorize,
)
from .volume_space import (
    DensityVolume,
    Partition,
    build_voxel_partition,
    load_atlas_partition,
    locate,
    read_volume,
    write_nifti,
    write_volume,
)

__version__ = "0.1.0"

__all__ = [
    "BinnedSample",
    "DensityVolume",
    "Document",
    "DualState",
    "EncoderModel",
    "EvalReport",
    "FeatureMatrix",
    "KdeConfig",
    "KernelBlock",
    "LeastDeviationsRegressor",
    "ModelSpec",
    "Partition",
    "RidgeModel",
    "SolverReport",
    "TargetMatrix",
    "TextDensityEncoder",
    "Vocabulary",
    "assemble_features",
    "baseline_mean_map",
    "bin_samples",
    "build_kernel_block",
    "build_targets",
    "build_voxel_partition",
    "chance_score",
    "dual_objective_grad",
    "fit_lad",
    "fit_label_constrained",
    "fit_path",
    "fit_ridge",
    "fit_volume_ridge",
    "kde_density",
    "load_atlas_partition",
    "load_corpus",
    "load_model",
    "load_vocabulary",
    "locate",
    "predict_density",
    "read_volume",
    "rescale_for_loss",
    "save_model",
    "score_document",
    "select_lambda",
    "shuffle_split_cv",
    "term_contrast",
    "tv_distance",
    "vectorize",
    "with_background",
    "write_nifti",
    "write_volume",
]
