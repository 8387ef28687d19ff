"""panseg: atlas-based volumetric organ segmentation toolkit.

Pipeline stages: regression-forest bounding-box localization, multi-scale
vessel enhancement with direction weighting, similarity-ranked probabilistic
atlas fusion, EM/MAP rough segmentation and graph-cut refinement, plus a
synthetic phantom suite and a leave-one-out evaluation harness.
"""

from .volume import (BoundingBox6, Cuboid, IntegralVolume, Volume3D,
                     build_integral, crop, cuboid_mean, cuboid_sum,
                     mask_bounding_box, resample_trilinear)
from .io import read_volume, write_volume, VolumeIOError
from .forest import (CuboidFeature, ForestParams, RegressionForest,
                     RegressionTree, estimate_bounding_box, eval_feature,
                     extract_patches, fit_leaf_gaussian_em, load_forest,
                     offset_variance, predict_face, save_forest, split_score,
                     train_forest, train_tree, ModelVersionError)
from .dss import (DSSParams, Eig3, dss_volume, eig3_sym, gaussian_hessian,
                  line_measure)
from .registration import (DeformationField, RegistrationParams,
                           register_deformable, warp)
from .atlas import (AtlasCandidate, EmptySelectionError, ProbAtlas,
                    UndefinedSimilarityError, VOI, build_atlas, make_voi,
                    project_voi_label, save_atlas, select_similar, zncc)
from .segment import (ClassModel, DegenerateAtlasError, IntensityModel,
                      fit_intensity_model_em, largest_component, map_segment,
                      posterior_foreground)
from .graphcut import (FlowNetwork, build_graph, labeling_energy,
                       max_flow_min_cut, refine_graph_cut)
from .metrics import dice, jaccard, overlap_counts
from .phantom import DatasetRanges, PhantomSpec, TubeSpec, gen_dataset, gen_phantom
from .config import (ConfigError, PipelineConfig, load_config, phantom_profile,
                     save_config)
from .evaluate import CaseResult, OverlapReport, run_loocv

__version__ = "0.1.0"
