"""PCA-embedded gated-attention MIL with a clinical side prior."""

from pcamil.data import FeatureBag, Label, PatientRecord, Side, SynthConfig
from pcamil.embed import EigenBasis, patient_embedding
from pcamil.harness import ExperimentConfig, hyperparameter_sweep, run_experiment, stratified_kfold
from pcamil.mil import MilConfig, MilParams, bag_probability, train_fold
from pcamil.priors import PriorConfig, apply_prior, bayes_posterior, side_prior

__version__ = "0.1.0"
