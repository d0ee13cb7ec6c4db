"""Masked-token transformer reconstruction of synthetic massive-MIMO CSI."""

__version__ = "0.1.0"

from .channel_sim import (  # noqa: E402
    CsiTensor,
    Dataset,
    DatasetConfig,
    ScenarioId,
    desk_dataset_config,
    generate_dataset,
    paper_dataset_config,
)
from .estimators import (  # noqa: E402
    LinearRegressionBaseline,
    MaskedCsiTransformer,
    MLPBaseline,
    PerfectOracle,
    ZeroPredictor,
)
from .preprocess import CsiFeaturizer, CsiMasker, MaskSpec  # noqa: E402

__all__ = [
    "__version__",
    "CsiTensor",
    "Dataset",
    "DatasetConfig",
    "ScenarioId",
    "desk_dataset_config",
    "paper_dataset_config",
    "generate_dataset",
    "CsiFeaturizer",
    "CsiMasker",
    "MaskSpec",
    "MaskedCsiTransformer",
    "LinearRegressionBaseline",
    "MLPBaseline",
    "ZeroPredictor",
    "PerfectOracle",
]
