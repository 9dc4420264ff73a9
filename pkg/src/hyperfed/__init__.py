"""Deterministic federated-learning simulator and search harness for studying
how benign-client training hyperparameters bound backdoor attack success."""

__version__ = "0.1.0"
