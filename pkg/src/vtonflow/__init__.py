"""Desk-scale multi-modal video try-on: sprite benchmark, conditioned flow transformer, staged training, refiner and evaluation."""
__version__ = "0.1.0"
