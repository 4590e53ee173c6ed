"""Autodiff engine, reconstruction models and training loop."""
