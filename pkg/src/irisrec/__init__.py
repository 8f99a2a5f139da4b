"""Iris recognition from deep CNN or scattering features, PCA, and linear SVM."""

from .cnn import (
    Activation,
    FeatureVector,
    NetworkSpec,
    LayerSpec,
    WeightStore,
    conv2d,
    forward,
    fully_connected,
    load_weights,
    maxpool2d,
    relu,
    save_weights,
    spatial_average,
    vgg16,
)
from .dataset import (
    DatasetIndex,
    ImageTensor,
    SplitSpec,
    index_dataset,
    load_image,
    resize_bilinear,
    split_dataset,
    to_network_input,
    write_pgm,
)
from .pca import PcaModel, fit, retained_variance, transform
from .pipeline import RunConfig, accuracy, extract_features, run_experiment
from .scattering import FilterBank, ScatteringMaps, build_filter_bank, scatter, scattering_features
from .svm import BinarySvm, MultiSvmModel, decision, predict, train_binary, train_multiclass

__version__ = "0.1.0"
