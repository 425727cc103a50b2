"""Augmentation policy search for momentum-contrast pretraining, scored by rotation-prediction probes."""

__version__ = "0.1.0"
