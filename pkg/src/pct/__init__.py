"""Point cloud transformer library.

Three encoder variants are provided: NPCT (pointwise embedding +
self-attention), SPCT (pointwise embedding + offset-attention) and full
PCT (neighbor embedding + offset-attention), together with a minimal
reverse-mode autodiff engine, geometric kernels, task heads, a training
harness and synthetic parametric-shape datasets.
"""

from .autodiff import Tensor, gradcheck, matmul, softmax_axis
from .geometry import (
    AugmentConfig,
    PointCloud,
    SgLayerConfig,
    augment,
    farthest_point_sample,
    knn,
    sg_layer,
)
from .attention import (
    AttentionLayer,
    export_attention_map,
    laplacian_residual,
    oa_normalize,
    offset_attention,
    sa_normalize,
    self_attention,
)
from .encoder import Backbone, EncoderConfig, encode, global_feature
from .heads import (
    avg_cosine_error,
    mean_part_iou,
    multi_scale_eval,
    part_iou,
    soft_cross_entropy,
)
from .models import (
    PointCloudClassifier,
    PointCloudNormalEstimator,
    PointCloudSegmenter,
    build_model,
    make_encoder_config,
)
from .training import (
    SGD,
    Schedule,
    TrainConfig,
    cosine_lr,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .data import (
    DatasetConfig,
    ShapeSpec,
    generate_shape,
    load_dataset,
    load_points,
    make_dataset,
    save_points,
)

__version__ = "0.1.0"
