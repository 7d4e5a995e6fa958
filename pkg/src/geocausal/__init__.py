"""Propensity-adjusted treatment effects of geolocated projects from imagery and tabular data."""
from .analysis import (RegularizedCCA, SalienceMatrix, TwoWayFixedEffects, auc,
                       leading_canonical_correlation, meta_regress_ate, salience_delta, twfe)
from .estimator import AteEstimate, HajekIPW, diff_in_means, estimate_ate, hajek_ate, hajek_weights
from .panel import PanelSlice, build_panel, validate_panel
from .propensity import FusionPropensityClassifier, cross_fit_propensity, grouped_folds
from .simulator import WorldConfig, bias_ladder, generate_world
from .vit import FusionViT, ModelConfig

__version__ = "0.1.0"
