"""Multimodal (ECG + tabular + cardiac MRI) contrastive pretraining for cardiovascular risk prediction."""

__version__ = "0.1.0"
