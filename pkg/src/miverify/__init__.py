"""Detect image-caption packages whose caption does not belong to the image.

The pipeline: a joint embedding model trained on a clean reference dataset
turns each package into a scalar consistency score; a one-class outlier
detector fitted on the reference scores assigns each query an inlier or
outlier verdict; outliers are flagged as tampered.

Typical use::

    from miverify import (
        SyntheticSpec, make_synthetic, tamper,
        train_model, score_dataset, odm_fit_on_scores,
    )

    train, val, test = make_synthetic(SyntheticSpec())
    model = train_model("vsm", train, val=val)
    detector = odm_fit_on_scores(score_dataset(model, train), "ocsvm")
    queries = tamper(test, 0.5, seed=1)
    scored = score_dataset(model, queries)
    verdicts = detector.verdicts([v for _, v in scored])
"""

from .datamodel import (
    FPK_FORMAT,
    ConfigError,
    DatasetFormatError,
    FeatureDataset,
    Label,
    MediaPackage,
    SplitSpec,
    TamperError,
    load_dataset,
    save_dataset,
    split_dataset,
    tamper,
    validate_dataset,
)
from .embedmodels import (
    MODEL_FORMAT,
    MODEL_KINDS,
    BidnnConfig,
    IccsValue,
    MaeConfig,
    VsmConfig,
    load_model,
    save_model,
    score_dataset,
    train_model,
)
from .harness import (
    REPORT_FORMAT,
    EvaluationReport,
    ExperimentConfig,
    SyntheticSpec,
    compare_models,
    derived_seed,
    experiment_config_from_dict,
    f1_scores,
    make_synthetic,
    run_experiment,
)
from .neuralnet import TrainingDivergedError
from .odm import (
    ODM_FORMAT,
    ODM_KINDS,
    OdmConfig,
    OutlierModel,
    Verdict,
    iforest_fit,
    load_odm,
    ocsvm_fit,
    odm_fit_on_scores,
    save_odm,
)

__version__ = "1.0.0"

__all__ = [
    "BidnnConfig",
    "ConfigError",
    "DatasetFormatError",
    "EvaluationReport",
    "ExperimentConfig",
    "FPK_FORMAT",
    "FeatureDataset",
    "IccsValue",
    "Label",
    "MODEL_FORMAT",
    "MODEL_KINDS",
    "MaeConfig",
    "MediaPackage",
    "ODM_FORMAT",
    "ODM_KINDS",
    "OdmConfig",
    "OutlierModel",
    "REPORT_FORMAT",
    "SplitSpec",
    "SyntheticSpec",
    "TamperError",
    "TrainingDivergedError",
    "Verdict",
    "VsmConfig",
    "compare_models",
    "derived_seed",
    "experiment_config_from_dict",
    "f1_scores",
    "iforest_fit",
    "load_dataset",
    "load_model",
    "load_odm",
    "make_synthetic",
    "ocsvm_fit",
    "odm_fit_on_scores",
    "run_experiment",
    "save_dataset",
    "save_model",
    "save_odm",
    "score_dataset",
    "split_dataset",
    "tamper",
    "train_model",
    "validate_dataset",
    "__version__",
]
